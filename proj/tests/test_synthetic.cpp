#include "support.hpp"

using namespace ldreg;
using ldreg::testing::pearson;
using ldreg::testing::temp_dir;

namespace {

SynthConfig config(double magnitude, double level, std::uint64_t seed = 1) {
    SynthConfig c;
    c.magnitude = magnitude;
    c.level = level;
    c.seed = seed;
    return c;
}

double distance(const Point3& a, const Point3& b) {
    return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

} // namespace

TEST(Synthetic, SameSeedSameCase) {
    const auto cfg = config(6.0, 1.0, 3);
    const auto [a, ga] = generate_case(cfg, 4);
    const auto [b, gb] = generate_case(cfg, 4);
    EXPECT_EQ(a.moving.data, b.moving.data);
    EXPECT_EQ(a.fixed.data, b.fixed.data);
    ASSERT_EQ(a.labels.size(), b.labels.size());
    for (std::size_t l = 0; l < a.labels.size(); ++l) {
        EXPECT_EQ(a.labels[l].moving.data, b.labels[l].moving.data);
        EXPECT_EQ(a.labels[l].fixed.data, b.labels[l].fixed.data);
        EXPECT_EQ(a.labels[l].type, b.labels[l].type);
        EXPECT_EQ(a.labels[l].high_confidence, b.labels[l].high_confidence);
    }
    for (int k = 0; k < 3; ++k) EXPECT_EQ(ga.ddf[k].data, gb.ddf[k].data);
    EXPECT_NE(generate_case(cfg, 5).first.moving.data, a.moving.data);
}

TEST(Synthetic, ZeroMagnitudeIsIdentity) {
    for (int i = 0; i < 5; ++i) {
        const auto [c, gt] = generate_case(config(0.0, 1.0), i);
        EXPECT_EQ(gt.ddf.max_magnitude(), 0.0);
        for (const auto& l : c.labels) EXPECT_EQ(l.fixed.data, l.moving.data);
    }
}

TEST(Synthetic, MisalignmentMatchesMagnitude) {
    const auto cfg = config(6.0, 1.0, 7);
    double total = 0.0;
    int n = 0;
    for (int i = 0; i < 100; ++i) {
        const auto gt = generate_case(cfg, i).second;
        for (std::size_t l = 0; l < gt.moving_centroids.size(); ++l, ++n)
            total += distance(gt.moving_centroids[l], gt.fixed_centroids[l]);
    }
    const double mean = total / n;
    EXPECT_GT(mean, 0.7 * cfg.magnitude);
    EXPECT_LT(mean, 1.3 * cfg.magnitude);
}

TEST(Synthetic, LevelZeroImagesAreMonotone) {
    // aligned pair: the fixed image is an increasing function of the moving one
    for (int i = 0; i < 3; ++i) {
        const auto c = generate_case(config(0.0, 0.0), i).first;
        std::vector<std::size_t> order(c.moving.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return c.moving.data[a] < c.moving.data[b]; });
        for (std::size_t k = 1; k < order.size(); ++k)
            ASSERT_GE(c.fixed.data[order[k]], c.fixed.data[order[k - 1]] - 1e-5f);
        EXPECT_GT(pearson(c.moving.data, c.fixed.data), 0.999);
    }
}

TEST(Synthetic, LevelOneDecorrelatesAlignedPairs) {
    double total = 0.0;
    const int n = 10;
    for (int i = 0; i < n; ++i) {
        const auto [c, gt] = generate_case(config(6.0, 1.0, 9), i);
        total += pearson(warp_trilinear(c.moving, gt.ddf).data, c.fixed.data);
    }
    EXPECT_LT(total / n, 0.5);
}

TEST(Synthetic, ImagesAreNormalised) {
    for (const double level : {0.0, 1.0}) {
        const auto c = generate_case(config(6.0, level), 2).first;
        for (const Volume* v : {&c.moving, &c.fixed}) {
            const auto s = intensity_stats(*v);
            EXPECT_NEAR(s.mean, 0.0, 1e-4);
            EXPECT_NEAR(s.stddev, 1.0, 1e-4);
        }
    }
}

TEST(Synthetic, GroundTruthReproducesFixedLabels) {
    for (int i = 0; i < 10; ++i) {
        const auto [c, gt] = generate_case(config(6.0, 1.0, 11), i);
        EXPECT_EQ(gt.ddf.shape, c.fixed.shape);
        for (const auto& l : c.labels) EXPECT_GE(dice(warp_trilinear(l.moving, gt.ddf), l.fixed), 0.98) << l.type;
    }
}

TEST(Synthetic, IdentityTreEqualsRecordedDisplacement) {
    for (int i = 0; i < 10; ++i) {
        const auto [c, gt] = generate_case(config(6.0, 1.0, 12), i);
        for (std::size_t l = 0; l < c.labels.size(); ++l) {
            const auto& pair = c.labels[l];
            EXPECT_NEAR(tre_centroid(pair.moving, pair.fixed, pair.fixed.spacing),
                        distance(gt.moving_centroids[l], gt.fixed_centroids[l]), 1e-9);
            for (int a = 0; a < 3; ++a) {
                EXPECT_GE(gt.fixed_centroids[l][static_cast<std::size_t>(a)], 0.0);
                EXPECT_LE(gt.fixed_centroids[l][static_cast<std::size_t>(a)], c.fixed.shape[a] - 1.0);
            }
        }
    }
}

TEST(Synthetic, LabelTaxonomy) {
    const auto cfg = config(6.0, 1.0, 13);
    for (int i = 0; i < 20; ++i) {
        const auto c = generate_case(cfg, i).first;
        int glands = 0, landmarks = 0, high = 0;
        for (const auto& l : c.labels) {
            if (l.is_gland()) {
                ++glands;
            } else {
                ++landmarks;
                high += l.high_confidence;
                EXPECT_TRUE(l.type == "landmark_inside" || l.type == "landmark_outside") << l.type;
            }
            EXPECT_GT(foreground_count(l.moving), 0u);
            EXPECT_GT(foreground_count(l.fixed), 0u);
        }
        EXPECT_EQ(glands, 1);
        EXPECT_GE(landmarks, 2);
        EXPECT_GE(landmarks, cfg.landmarks_min);
        EXPECT_LE(landmarks, cfg.landmarks_max);
        EXPECT_EQ(high, static_cast<int>(std::lround(2.0 * landmarks / 3.0)));
        EXPECT_NO_THROW(validate_case(c));
    }
}

TEST(Synthetic, ShapeMustBeMultipleOfEight) {
    SynthConfig c;
    c.shape = {32, 30, 32};
    try {
        generate_case(c, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
    }
}

TEST(Synthetic, DatasetRoundTrip) {
    const auto dir = temp_dir("synth_dataset");
    SynthConfig cfg = config(4.0, 1.0, 14);
    cfg.shape = {24, 24, 24};
    cfg.case_count = 3;
    write_synthetic_dataset(cfg, dir);
    const auto cases = read_dataset(dir);
    ASSERT_EQ(cases.size(), 3u);
    for (int i = 0; i < 3; ++i) {
        const auto [c, gt] = generate_case(cfg, i);
        const auto& r = cases[static_cast<std::size_t>(i)];
        EXPECT_EQ(r.id, c.id);
        EXPECT_EQ(r.patient_id, c.id);
        EXPECT_EQ(r.moving.data, c.moving.data);
        EXPECT_EQ(r.fixed.data, c.fixed.data);
        ASSERT_EQ(r.labels.size(), c.labels.size());
        for (std::size_t l = 0; l < c.labels.size(); ++l) {
            EXPECT_EQ(r.labels[l].fixed.data, c.labels[l].fixed.data);
            EXPECT_EQ(r.labels[l].high_confidence, c.labels[l].high_confidence);
        }
        const auto ddf = read_field(dir / c.id / "ground_truth");
        for (int a = 0; a < 3; ++a) EXPECT_EQ(ddf[a].data, gt.ddf[a].data);
    }
}
