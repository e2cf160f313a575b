#include "support.hpp"

using namespace ldreg;
using ldreg::testing::check_gradient;
using ldreg::testing::random_tensor;

namespace {

using TD = Tensor<double>;
using Inputs = std::vector<Var>;

constexpr double kOpTolerance = 1e-3;

double inner(const TD& a, const TD& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

NetworkConfig small_net(const Shape3& s, int global_n0 = 2, int local_n0 = 2) {
    NetworkConfig cfg;
    cfg.global_channels = global_n0;
    cfg.local_channels = local_n0;
    cfg.input_shape = s;
    return cfg;
}

/// Central-difference check of d(loss)/d(parameter) for sampled entries of
/// one named parameter tensor.
double parameter_gradient_error(NetworkParameters<double> params, const std::string& name,
                                const std::function<Var(ParameterBinder<double>&)>& loss, int samples,
                                std::uint64_t seed) {
    auto evaluate = [&](NetworkParameters<double>& p, std::map<std::string, TD>* grads) {
        Tape<double> tape;
        ParameterBinder<double> bind(tape, p, true);
        const Var out = loss(bind);
        const double value = tape.value(out).data[0];
        if (grads != nullptr) {
            tape.backward(out);
            *grads = bind.gradients();
        }
        return value;
    };
    std::map<std::string, TD> grads;
    {
        auto copy = params;
        evaluate(copy, &grads);
    }
    const TD& g = grads.at(name);
    double scale = 0.0;
    for (double v : g.data) scale = std::max(scale, std::abs(v));
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx(g.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(samples)));
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t i : idx) {
        auto plus = params, minus = params;
        plus.at(name).data[i] += h;
        minus.at(name).data[i] -= h;
        const double numeric = (evaluate(plus, nullptr) - evaluate(minus, nullptr)) / (2 * h);
        worst = std::max(worst, std::abs(numeric - g.data[i]) /
                                    std::max({std::abs(numeric), std::abs(g.data[i]), 1e-3 * scale, 1e-12}));
    }
    return worst;
}

/// mean(x^2) as a tape op.
Var mean_square(Tape<double>& tape, Var x) {
    const auto& v = tape.value(x);
    double total = 0.0;
    for (double e : v.data) total += e * e;
    const int id = static_cast<int>(tape.size());
    return tape.push(TD(Dims5{}, total / double(v.size())), tape.requires_grad(x), [x, id](Tape<double>& t) {
        const auto& val = t.value(x);
        const double g = t.grad(Var{id}).data[0];
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < val.size(); ++i) gx.data[i] += 2.0 * val.data[i] * g / double(val.size());
    });
}

} // namespace

// ------------------------------------------------------------ tape ops

TEST(OpGradient, Relu) {
    std::mt19937_64 rng(41);
    const auto r = check_gradient([](Tape<double>& t, const Inputs& v) { return ops::relu(t, v[0]); },
                                  {random_tensor<double>({2, 2, 3, 3, 3}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

TEST(OpGradient, AddSubConcat) {
    std::mt19937_64 rng(42);
    const Dims5 d{2, 2, 3, 4, 2};
    const auto r = check_gradient(
        [](Tape<double>& t, const Inputs& v) {
            return ops::concat_channels(t, ops::add(t, v[0], v[1]), ops::sub(t, v[0], v[1]));
        },
        {random_tensor<double>(d, rng), random_tensor<double>(d, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

TEST(OpGradient, PadAndCrop) {
    std::mt19937_64 rng(43);
    const auto r = check_gradient(
        [](Tape<double>& t, const Inputs& v) {
            const Var p = ops::pad_spatial(t, v[0], {8, 6, 5});
            return ops::crop_spatial(t, ops::relu(t, p), {4, 5, 3});
        },
        {random_tensor<double>({1, 2, 5, 4, 3}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

TEST(OpGradient, Dense) {
    std::mt19937_64 rng(44);
    const auto r = check_gradient([](Tape<double>& t, const Inputs& v) { return ops::dense(t, v[0], v[1], v[2]); },
                                  {random_tensor<double>({2, 3, 2, 2, 1}, rng),
                                   random_tensor<double>({5, 12, 1, 1, 1}, rng),
                                   random_tensor<double>({1, 5, 1, 1, 1}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

TEST(OpGradient, ScaleChannels) {
    std::mt19937_64 rng(76);
    const auto r = check_gradient(
        [](Tape<double>& t, const Inputs& v) { return ops::scale_channels(t, v[0], {0.1, 7.5, -2.0}); },
        {random_tensor<double>({2, 3, 1, 1, 1}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

TEST(OpGradient, WeightedSum) {
    std::mt19937_64 rng(45);
    const auto r = check_gradient(
        [](Tape<double>& t, const Inputs& v) { return ops::weighted_sum(t, {v[0], v[1]}, {0.3, -2.0}); },
        {random_tensor<double>({1, 1, 1, 1, 1}, rng), random_tensor<double>({1, 1, 1, 1, 1}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

class ConvGradient : public ::testing::TestWithParam<std::pair<int, int>> {};

TEST_P(ConvGradient, InputKernelAndBias) {
    const auto [k, stride] = GetParam();
    std::mt19937_64 rng(46 + k + stride);
    const auto r = check_gradient(
        [stride](Tape<double>& t, const Inputs& v) { return ops::conv3d(t, v[0], v[1], v[2], stride); },
        {random_tensor<double>({2, 2, 6, 4, 4}, rng), random_tensor<double>({3, 2, k, k, k}, rng),
         random_tensor<double>({1, 3, 1, 1, 1}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

INSTANTIATE_TEST_SUITE_P(KernelStride, ConvGradient,
                         ::testing::Values(std::pair{3, 1}, std::pair{3, 2}, std::pair{1, 1}, std::pair{1, 2}));

TEST(OpGradient, TransposeConv) {
    std::mt19937_64 rng(47);
    const auto r = check_gradient(
        [](Tape<double>& t, const Inputs& v) { return ops::conv3d_transpose(t, v[0], v[1], v[2]); },
        {random_tensor<double>({2, 3, 3, 2, 2}, rng), random_tensor<double>({3, 2, 3, 3, 3}, rng),
         random_tensor<double>({1, 2, 1, 1, 1}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

TEST(OpGradient, BatchNormTrain) {
    std::mt19937_64 rng(48);
    TD mean(Dims5{1, 3, 1, 1, 1}), var(Dims5{1, 3, 1, 1, 1}, 1.0);
    const auto r = check_gradient(
        [&](Tape<double>& t, const Inputs& v) {
            return ops::relu(t, ops::batch_norm(t, v[0], v[1], v[2], mean, var, Mode::Train));
        },
        {random_tensor<double>({2, 3, 3, 2, 2}, rng), random_tensor<double>({1, 3, 1, 1, 1}, rng),
         random_tensor<double>({1, 3, 1, 1, 1}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

TEST(OpGradient, BatchNormInfer) {
    std::mt19937_64 rng(49);
    TD mean = random_tensor<double>({1, 2, 1, 1, 1}, rng), var(Dims5{1, 2, 1, 1, 1}, 2.5);
    const auto r = check_gradient(
        [&](Tape<double>& t, const Inputs& v) {
            return ops::batch_norm(t, v[0], v[1], v[2], mean, var, Mode::Infer);
        },
        {random_tensor<double>({1, 2, 3, 2, 2}, rng), random_tensor<double>({1, 2, 1, 1, 1}, rng),
         random_tensor<double>({1, 2, 1, 1, 1}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

TEST(OpGradient, AffineFieldAndCompose) {
    std::mt19937_64 rng(50);
    TD theta = random_tensor<double>({2, 12, 1, 1, 1}, rng, 0.2);
    for (int n = 0; n < 2; ++n)
        for (int r = 0; r < 3; ++r) theta.data[static_cast<std::size_t>(n * 12 + 5 * r)] += 1.0;
    const auto r = check_gradient(
        [](Tape<double>& t, const Inputs& v) {
            const Var a = ops::affine_field(t, v[0], {4, 3, 5});
            return ops::add(t, a, ops::compose_field(t, v[0], v[1]));
        },
        {theta, random_tensor<double>({2, 3, 4, 3, 5}, rng)});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}

TEST(OpGradient, WarpBothArguments) {
    std::mt19937_64 rng(51);
    for (const Padding pad : {Padding::Zero, Padding::Border}) {
        const auto r = check_gradient(
            [pad](Tape<double>& t, const Inputs& v) { return ops::warp(t, v[0], v[1], pad); },
            {random_tensor<double>({2, 2, 5, 4, 6}, rng), random_tensor<double>({2, 3, 5, 4, 6}, rng, 1.5)}, 52,
            60, 1e-7);
        EXPECT_LT(r.max_relative_error, 1e-4);
    }
}

TEST(OpGradient, LossesOnTape) {
    std::mt19937_64 rng(53);
    TD q(Dims5{2, 1, 4, 4, 4}), p(q.dims);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (auto& v : q.data) v = u(rng);
    for (auto& v : p.data) v = u(rng);
    const auto ce = check_gradient(
        [&p](Tape<double>& t, const Inputs& v) {
            return ops::label_cross_entropy(t, v[0], t.constant(p), 1e-6);
        },
        {q});
    EXPECT_LT(ce.max_relative_error, 1e-4);
    for (bool l2 : {false, true}) {
        const auto reg = check_gradient(
            [l2](Tape<double>& t, const Inputs& v) { return ops::field_regulariser(t, v[0], l2); },
            {random_tensor<double>({2, 3, 5, 4, 6}, rng)});
        EXPECT_LT(reg.max_relative_error, 1e-4);
    }
}

// ------------------------------------------------------------ convolution oracles

TEST(Conv, UnitPointKernelIsIdentity) {
    std::mt19937_64 rng(54);
    Tape<double> tape;
    const TD x = random_tensor<double>({1, 1, 4, 5, 3}, rng);
    const Var y = ops::conv3d(tape, tape.constant(x), tape.constant(TD({1, 1, 1, 1, 1}, 1.0)),
                              tape.constant(TD({1, 1, 1, 1, 1})), 1);
    EXPECT_EQ(tape.value(y).data, x.data);
}

TEST(Conv, StrideTwoHalvesShape) {
    Tape<double> tape;
    const Var y = ops::conv3d(tape, tape.constant(TD({1, 2, 16, 16, 16})), tape.constant(TD({4, 2, 3, 3, 3})),
                              Var{}, 2);
    EXPECT_EQ(tape.value(y).dims, (Dims5{1, 4, 8, 8, 8}));
}

TEST(Conv, OddDimensionForStrideTwo) {
    Tape<double> tape;
    try {
        ops::conv3d(tape, tape.constant(TD({1, 1, 5, 4, 4})), tape.constant(TD({1, 1, 3, 3, 3})), Var{}, 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::OddDimensionForStride2);
    }
}

TEST(Conv, CentreMatchesDirectSum) {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 5; ++trial) {
        const TD x = random_tensor<double>({1, 2, 5, 5, 5}, rng);
        const TD w = random_tensor<double>({3, 2, 3, 3, 3}, rng);
        Tape<double> tape;
        const Var y = ops::conv3d(tape, tape.constant(x), tape.constant(w), Var{}, 1);
        for (int co = 0; co < 3; ++co) {
            double direct = 0.0;
            for (int ci = 0; ci < 2; ++ci)
                for (int kz = 0; kz < 3; ++kz)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx)
                            direct += w.data[static_cast<std::size_t>((((co * 2 + ci) * 3 + kz) * 3 + ky) * 3 + kx)] *
                                      x.channel(0, ci)[static_cast<std::size_t>(((1 + kz) * 5 + 1 + ky) * 5 + 1 + kx)];
            EXPECT_NEAR(tape.value(y).channel(0, co)[62], direct, 1e-12);
        }
    }
}

TEST(Conv, AllOnesKernelOnRamp) {
    TD x(Dims5{1, 1, 5, 5, 5});
    for (int z = 0; z < 5; ++z)
        for (int y = 0; y < 5; ++y)
            for (int xx = 0; xx < 5; ++xx) x.data[static_cast<std::size_t>((z * 5 + y) * 5 + xx)] = xx + 5 * y + 25 * z;
    Tape<double> tape;
    const Var y = ops::conv3d(tape, tape.constant(x), tape.constant(TD({1, 1, 3, 3, 3}, 1.0)), Var{}, 1);
    double direct = 0.0;
    for (int z = 1; z <= 3; ++z)
        for (int yy = 1; yy <= 3; ++yy)
            for (int xx = 1; xx <= 3; ++xx) direct += xx + 5 * yy + 25 * z;
    EXPECT_DOUBLE_EQ(tape.value(y).data[62], direct);
}

TEST(Conv, TransposeIsAdjointOfStrideTwo) {
    std::mt19937_64 rng(56);
    for (int trial = 0; trial < 5; ++trial) {
        const TD u = random_tensor<double>({2, 3, 8, 6, 4}, rng);
        const TD v = random_tensor<double>({2, 4, 4, 3, 2}, rng);
        const TD w = random_tensor<double>({4, 3, 3, 3, 3}, rng);
        Tape<double> tape;
        const Var down = ops::conv3d(tape, tape.constant(u), tape.constant(w), Var{}, 2);
        const Var up = ops::conv3d_transpose(tape, tape.constant(v), tape.constant(w), Var{});
        ASSERT_EQ(tape.value(up).dims, u.dims);
        const double lhs = inner(tape.value(down), v), rhs = inner(u, tape.value(up));
        EXPECT_LT(std::abs(lhs - rhs) / std::abs(lhs), 1e-5);
    }
}

TEST(Conv, TransposeShapeAndBiasBroadcast) {
    Tape<double> tape;
    TD b(Dims5{1, 2, 1, 1, 1});
    b.data = {0.5, -1.5};
    const Var y = ops::conv3d_transpose(tape, tape.constant(TD({1, 3, 8, 8, 8})), tape.constant(TD({3, 2, 3, 3, 3}, 0.7)),
                                        tape.constant(b));
    const auto& out = tape.value(y);
    EXPECT_EQ(out.dims, (Dims5{1, 2, 16, 16, 16}));
    for (std::size_t i = 0; i < out.dims.spatial(); ++i) {
        EXPECT_EQ(out.channel(0, 0)[i], 0.5);
        EXPECT_EQ(out.channel(0, 1)[i], -1.5);
    }
}

// ------------------------------------------------------------ batch norm

TEST(BatchNorm, TwoValueChannel) {
    Tape<double> tape;
    TD mean(Dims5{1, 1, 1, 1, 1}), var(Dims5{1, 1, 1, 1, 1}, 1.0);
    const Var y = ops::batch_norm(tape, tape.constant(TD({1, 1, 2, 1, 1}, std::vector<double>{0.0, 2.0})),
                                  tape.constant(TD({1, 1, 1, 1, 1}, 1.0)), tape.constant(TD({1, 1, 1, 1, 1})), mean,
                                  var, Mode::Train);
    const double s = std::sqrt(1.0 + 1e-5);
    EXPECT_NEAR(tape.value(y).data[0], -1.0 / s, 1e-12);
    EXPECT_NEAR(tape.value(y).data[1], 1.0 / s, 1e-12);
    // running stats move by (1 - momentum) toward the batch statistics
    EXPECT_NEAR(mean.data[0], 0.1, 1e-12);
}

TEST(BatchNorm, InferWithUnitRunningStats) {
    std::mt19937_64 rng(57);
    const TD x = random_tensor<double>({1, 2, 3, 3, 3}, rng);
    TD mean(Dims5{1, 2, 1, 1, 1}), var(Dims5{1, 2, 1, 1, 1}, 1.0);
    Tape<double> tape;
    const Var y = ops::batch_norm(tape, tape.constant(x), tape.constant(TD({1, 2, 1, 1, 1}, 1.0)),
                                  tape.constant(TD({1, 2, 1, 1, 1})), mean, var, Mode::Infer);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(tape.value(y).data[i], x.data[i] / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(BatchNorm, TrainOutputIsStandardised) {
    std::mt19937_64 rng(58);
    const TD x = random_tensor<double>({2, 3, 4, 4, 4}, rng, 3.0);
    TD mean(Dims5{1, 3, 1, 1, 1}), var(Dims5{1, 3, 1, 1, 1}, 1.0);
    Tape<double> tape;
    const Var y = ops::batch_norm(tape, tape.constant(x), tape.constant(TD({1, 3, 1, 1, 1}, 1.0)),
                                  tape.constant(TD({1, 3, 1, 1, 1})), mean, var, Mode::Train);
    const auto& out = tape.value(y);
    for (int c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (int n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 64; ++i) m += out.channel(n, c)[i];
        m /= 128;
        for (int n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 64; ++i) v += (out.channel(n, c)[i] - m) * (out.channel(n, c)[i] - m);
        v /= 128;
        EXPECT_NEAR(m, 0.0, 1e-4);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(BatchNorm, DegenerateBatch) {
    Tape<double> tape;
    TD mean(Dims5{1, 1, 1, 1, 1}), var(Dims5{1, 1, 1, 1, 1}, 1.0);
    try {
        ops::batch_norm(tape, tape.constant(TD({1, 1, 1, 1, 1})), tape.constant(TD({1, 1, 1, 1, 1}, 1.0)),
                        tape.constant(TD({1, 1, 1, 1, 1})), mean, var, Mode::Train);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DegenerateBatch);
    }
}

// ------------------------------------------------------------ blocks and nets

TEST(ResnetBlock, ZeroKernelsGiveRelu) {
    std::mt19937_64 rng(59);
    NetworkParameters<double> p;
    detail::add_resnet(p, "r", 2, rng);
    p.at("r.conv1.w").data.assign(p.at("r.conv1.w").size(), 0.0);
    p.at("r.conv2.w").data.assign(p.at("r.conv2.w").size(), 0.0);
    const TD x = random_tensor<double>({1, 2, 4, 4, 4}, rng);
    Tape<double> tape;
    ParameterBinder<double> bind(tape, p, false);
    const Var y = ops::resnet_block(bind, tape.constant(x), "r", Mode::Train, NetworkConfig{});
    ASSERT_EQ(tape.value(y).dims, x.dims);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(tape.value(y).data[i], std::max(0.0, x.data[i]));
}

TEST(ResnetBlock, GradientWrtInputAndKernel) {
    std::mt19937_64 rng(60);
    NetworkParameters<double> p;
    detail::add_resnet(p, "r", 2, rng);
    const TD x = random_tensor<double>({1, 2, 4, 4, 4}, rng);
    const auto r = check_gradient(
        [&p](Tape<double>& t, const Inputs& v) {
            ParameterBinder<double> bind(t, p, false);
            return ops::resnet_block(bind, v[0], "r", Mode::Train, NetworkConfig{});
        },
        {x});
    EXPECT_LT(r.max_relative_error, kOpTolerance);
    const TD wts = random_tensor<double>(x.dims, rng);
    for (const char* name : {"r.conv1.w", "r.conv2.b", "r.bn1.scale"}) {
        const double err = parameter_gradient_error(
            p, name,
            [&](ParameterBinder<double>& bind) {
                auto& t = bind.tape();
                const Var y = ops::resnet_block(bind, t.constant(x), "r", Mode::Train, NetworkConfig{});
                return mean_square(t, ops::add(t, y, t.constant(wts)));
            },
            30, 61);
        EXPECT_LT(err, kOpTolerance) << name;
    }
}

TEST(Network, ChannelAndSizeSchedule) {
    const auto cfg = small_net({32, 32, 32}, 2, 3);
    const auto p = init_params<double>(1, cfg);
    for (int k = 0; k < kLevels; ++k) {
        const auto& w = p.at("local.down" + std::to_string(k) + ".stride.w");
        EXPECT_EQ(w.dims.n, 2 * (3 << k));
        EXPECT_EQ(w.dims.c, 3 << k);
        EXPECT_EQ(p.at("global.down" + std::to_string(k) + ".res.conv1.w").dims.n, 2 << k);
    }
    // 2 << 4 channels at (32 / 16)^3 positions
    EXPECT_EQ(p.at("global.fc.w").dims, (Dims5{12, 32 * 8, 1, 1, 1}));
    EXPECT_EQ(p.at("local.out.w").dims, (Dims5{3, 3, 3, 3, 3}));
}

TEST(Network, InitIsDeterministicAndSeeded) {
    const auto cfg = small_net({16, 16, 16});
    const auto a = init_params<float>(7, cfg), b = init_params<float>(7, cfg), c = init_params<float>(8, cfg);
    ASSERT_EQ(a.tensors.size(), b.tensors.size());
    bool differs = false;
    for (const auto& [name, t] : a.tensors) {
        EXPECT_EQ(t.data, b.at(name).data) << name;
        differs = differs || t.data != c.at(name).data;
    }
    EXPECT_TRUE(differs);
    const AffineParams identity;
    for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(a.at("global.fc.b").data[k], float(identity.values[k]));
}

TEST(Network, IndivisibleShape) {
    auto p = init_params<float>(1, small_net({16, 16, 16}));
    try {
        global_net_forward(Tensor<float>(Dims5{1, 2, 16, 16, 24}), p, Mode::Infer, small_net({16, 16, 16}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::IndivisibleShape);
    }
}

TEST(Network, ZeroFcWeightsGiveExactIdentity) {
    std::mt19937_64 rng(62);
    const auto cfg = small_net({16, 16, 16});
    auto p = init_params<float>(3, cfg);
    p.at("global.fc.w").data.assign(p.at("global.fc.w").size(), 0.0f);
    for (const Mode mode : {Mode::Infer, Mode::Train}) {
        const auto a = global_net_forward(random_tensor<float>({2, 2, 16, 16, 16}, rng), p, mode, cfg);
        EXPECT_EQ(a.values, AffineParams::identity().values);
    }
}

TEST(Network, ZeroOutputLayerGivesZeroField) {
    std::mt19937_64 rng(63);
    const auto cfg = small_net({16, 16, 16});
    auto p = init_params<float>(3, cfg);
    p.at("local.out.w").data.assign(p.at("local.out.w").size(), 0.0f);
    const auto f = local_net_forward(random_tensor<float>({1, 2, 16, 16, 16}, rng), p, Mode::Infer, cfg);
    EXPECT_EQ(f.shape, (Shape3{16, 16, 16}));
    EXPECT_EQ(f.max_magnitude(), 0.0);
}

TEST(Network, NearIdentityAtInit) {
    // desk channel counts; inference mode uses the initial running statistics
    std::mt19937_64 rng(64);
    auto cfg = small_net({32, 32, 32}, 2, 8);
    for (const double matrix_scale : {1.0, 0.1}) {
        cfg.affine_matrix_scale = matrix_scale;
        auto p = init_params<float>(5, cfg);
        for (int trial = 0; trial < 3; ++trial) {
            const auto x = random_tensor<float>({1, 2, 32, 32, 32}, rng);
            for (const Mode mode : {Mode::Infer, Mode::Train}) {
                EXPECT_LT(affine_grid(global_net_forward(x, p, mode, cfg), {32, 32, 32}).max_magnitude(), 0.2);
                EXPECT_LT(local_net_forward(x, p, mode, cfg).max_magnitude(), 0.2);
            }
        }
    }
}

TEST(Network, AffineOutputUnits) {
    std::mt19937_64 rng(75);
    auto cfg = small_net({16, 32, 16});
    cfg.affine_matrix_scale = 0.1;
    cfg.affine_translation_scale = 2.5;
    auto p = init_params<float>(3, cfg);
    auto& b = p.at("global.fc.b").data;
    EXPECT_FLOAT_EQ(b[0], 10.0f);
    EXPECT_FLOAT_EQ(b[3], 0.0f);
    p.at("global.fc.w").data.assign(p.at("global.fc.w").size(), 0.0f);
    const auto x = random_tensor<float>({1, 2, 16, 32, 16}, rng);
    EXPECT_EQ(global_net_forward(x, p, Mode::Infer, cfg).values, AffineParams::identity().values);
    b[3] = 1.0f;
    b[7] = -2.0f;
    b[1] = 2.0f;
    const auto a = global_net_forward(x, p, Mode::Infer, cfg);
    EXPECT_DOUBLE_EQ(a.t(0), 2.5);
    EXPECT_DOUBLE_EQ(a.t(1), -5.0);
    EXPECT_NEAR(a.a(0, 1), 0.2, 1e-7);
}

TEST(Network, GlobalNetFcBiasGradient) {
    std::mt19937_64 rng(65);
    const auto cfg = small_net({16, 16, 16});
    auto p = init_params<double>(9, cfg);
    // larger FC weights so the output depends on the features
    for (auto& v : p.at("global.fc.w").data) v *= 1e6;
    const TD x = random_tensor<double>({2, 2, 16, 16, 16}, rng);
    const TD target = random_tensor<double>({2, 12, 1, 1, 1}, rng);
    auto loss = [&](ParameterBinder<double>& bind) {
        auto& t = bind.tape();
        const Var theta = ops::global_net(bind, t.constant(x), Mode::Train, cfg);
        return mean_square(t, ops::sub(t, theta, t.constant(target)));
    };
    EXPECT_LT(parameter_gradient_error(p, "global.fc.b", loss, 12, 66), kOpTolerance);
    EXPECT_LT(parameter_gradient_error(p, "global.fc.w", loss, 20, 67), kOpTolerance);
    EXPECT_LT(parameter_gradient_error(p, "global.init.w", loss, 20, 68), kOpTolerance);
}

TEST(Network, LocalNetFinalLayerGradient) {
    std::mt19937_64 rng(69);
    const auto cfg = small_net({16, 16, 16});
    auto p = init_params<double>(10, cfg);
    for (auto& v : p.at("local.out.w").data) v *= 1e6;
    const TD x = random_tensor<double>({2, 2, 16, 16, 16}, rng);
    auto loss = [&](ParameterBinder<double>& bind) {
        return mean_square(bind.tape(), ops::local_net(bind, bind.tape().constant(x), Mode::Train, cfg));
    };
    EXPECT_LT(parameter_gradient_error(p, "local.out.w", loss, 20, 70), kOpTolerance);
    EXPECT_LT(parameter_gradient_error(p, "local.up0.tconv.w", loss, 20, 71), kOpTolerance);
    EXPECT_LT(parameter_gradient_error(p, "local.down1.res.conv2.w", loss, 20, 72), kOpTolerance);
}

TEST(Network, InputGradientEndToEnd) {
    std::mt19937_64 rng(73);
    const auto cfg = small_net({16, 16, 16});
    auto p = init_params<double>(11, cfg);
    for (auto& v : p.at("local.out.w").data) v *= 1e6;
    for (auto& v : p.at("global.fc.w").data) v *= 1e6;
    const auto r = check_gradient(
        [&](Tape<double>& t, const Inputs& v) {
            ParameterBinder<double> bind(t, p, false);
            return ops::concat_channels(
                t, ops::local_net(bind, v[0], Mode::Train, cfg),
                ops::affine_field(t, ops::global_net(bind, v[0], Mode::Train, cfg), {16, 16, 16}));
        },
        {random_tensor<double>({2, 2, 16, 16, 16}, rng)}, 74, 20);
    EXPECT_LT(r.max_relative_error, kOpTolerance);
}
