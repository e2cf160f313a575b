#pragma once

// Synthetic image pairs with known correspondence. A "moving anatomy" (one
// ellipsoidal gland plus small spherical landmarks, some outside the gland)
// is mapped into fixed space by a ground-truth field u: fixed voxel x sits
// at x + u(x) in the moving volume. u is an affine map (mostly translation)
// plus a sum of Gaussian bumps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "ldreg/dataset.hpp"
#include "ldreg/error.hpp"
#include "ldreg/spatial_transform.hpp"
#include "ldreg/volume.hpp"

namespace ldreg {

struct SynthConfig {
    Shape3 shape{32, 32, 32};
    int case_count = 200;
    int landmarks_min = 3;
    int landmarks_max = 6;
    double magnitude = 6.0; // mean landmark misalignment, voxels
    double level = 1.0;     // modality divergence in [0, 1]
    std::uint64_t seed = 0;
    int bumps = 10;
    double high_confidence_fraction = 2.0 / 3.0;
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"shape", c.shape},
         {"case_count", c.case_count},
         {"landmarks_min", c.landmarks_min},
         {"landmarks_max", c.landmarks_max},
         {"magnitude", c.magnitude},
         {"level", c.level},
         {"seed", c.seed},
         {"bumps", c.bumps},
         {"high_confidence_fraction", c.high_confidence_fraction}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
    const SynthConfig d;
    c.shape = j.value("shape", d.shape);
    c.case_count = j.value("case_count", d.case_count);
    c.landmarks_min = j.value("landmarks_min", d.landmarks_min);
    c.landmarks_max = j.value("landmarks_max", d.landmarks_max);
    c.magnitude = j.value("magnitude", d.magnitude);
    c.level = j.value("level", d.level);
    c.seed = j.value("seed", d.seed);
    c.bumps = j.value("bumps", d.bumps);
    c.high_confidence_fraction = j.value("high_confidence_fraction", d.high_confidence_fraction);
}

inline void validate(const SynthConfig& c) {
    for (int a = 0; a < 3; ++a)
        require(c.shape[a] > 0 && c.shape[a] % 8 == 0, ErrorCode::InvalidArgument,
                "synthetic shape must be a positive multiple of 8, got " + shape_string(c.shape));
    require(c.case_count > 0, ErrorCode::InvalidArgument, "case_count must be positive");
    require(c.landmarks_min >= 2 && c.landmarks_max >= c.landmarks_min, ErrorCode::InvalidArgument,
            "need 2 <= landmarks_min <= landmarks_max");
    require(c.magnitude >= 0.0 && c.level >= 0.0 && c.level <= 1.0, ErrorCode::InvalidArgument,
            "magnitude must be >= 0 and level in [0, 1]");
}

using Point3 = std::array<double, 3>;

struct GroundTruth {
    DisplacementField ddf; // on the fixed grid
    std::vector<Point3> moving_centroids; // per label pair, voxel coordinates
    std::vector<Point3> fixed_centroids;
};

/// Tissue geometry in moving space, analytic so it can be sampled at any
/// point.
struct Anatomy {
    Point3 centre{};
    Point3 radii{1, 1, 1};
    std::array<double, 9> orient{1, 0, 0, 0, 1, 0, 0, 0, 1};
    double lobe_phase = 0.0;
    struct Landmark {
        Point3 centre;
        double radius;
        bool inside;
    };
    std::vector<Landmark> landmarks;

    /// Normalised gland radius (1 on the lobed surface).
    double rho(double x, double y, double z) const {
        const double d[3] = {x - centre[0], y - centre[1], z - centre[2]};
        double q[3];
        for (int i = 0; i < 3; ++i)
            q[i] = (orient[static_cast<std::size_t>(3 * i)] * d[0] + orient[static_cast<std::size_t>(3 * i + 1)] * d[1] +
                    orient[static_cast<std::size_t>(3 * i + 2)] * d[2]) /
                   radii[static_cast<std::size_t>(i)];
        const double r = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
        return r / (1.0 + 0.08 * std::cos(2.0 * std::atan2(q[1], q[0]) + lobe_phase));
    }

    /// Index of the landmark covering the point, or -1.
    int landmark_at(double x, double y, double z) const {
        for (std::size_t k = 0; k < landmarks.size(); ++k) {
            const auto& l = landmarks[k];
            const double d2 = (x - l.centre[0]) * (x - l.centre[0]) + (y - l.centre[1]) * (y - l.centre[1]) +
                              (z - l.centre[2]) * (z - l.centre[2]);
            if (d2 <= l.radius * l.radius) return static_cast<int>(k);
        }
        return -1;
    }

    Volume gland_mask(const Shape3& s) const {
        Volume m(s);
        for (int z = 0; z < s[2]; ++z)
            for (int y = 0; y < s[1]; ++y)
                for (int x = 0; x < s[0]; ++x) m(x, y, z) = rho(x, y, z) <= 1.0 ? 1.0f : 0.0f;
        return m;
    }

    Volume landmark_mask(const Shape3& s, std::size_t k) const {
        const auto& l = landmarks[k];
        Volume m(s);
        for (int z = 0; z < s[2]; ++z)
            for (int y = 0; y < s[1]; ++y)
                for (int x = 0; x < s[0]; ++x) {
                    const double d2 = (x - l.centre[0]) * (x - l.centre[0]) + (y - l.centre[1]) * (y - l.centre[1]) +
                                      (z - l.centre[2]) * (z - l.centre[2]);
                    m(x, y, z) = d2 <= l.radius * l.radius ? 1.0f : 0.0f;
                }
        return m;
    }
};

/// Unweighted centroid of v >= 0.5.
inline Point3 mask_centroid(const Volume& v) {
    Point3 c{0, 0, 0};
    double n = 0.0;
    for (int z = 0; z < v.shape[2]; ++z)
        for (int y = 0; y < v.shape[1]; ++y)
            for (int x = 0; x < v.shape[0]; ++x)
                if (v(x, y, z) >= 0.5f) {
                    c[0] += x;
                    c[1] += y;
                    c[2] += z;
                    n += 1.0;
                }
    require(n > 0.0, ErrorCode::EmptyLandmark, "centroid of an empty mask");
    for (auto& a : c) a /= n;
    return c;
}

namespace synth {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline Point3 random_unit(Rng& rng) {
    std::normal_distribution<double> g;
    Point3 v{g(rng), g(rng), g(rng)};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (auto& a : v) a /= n > 0 ? n : 1.0;
    return v;
}

using Mat3 = std::array<double, 9>;

/// Rotation by `angle` radians about a unit axis.
inline Mat3 rotation(const Point3& k, double angle) {
    const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    return {t * k[0] * k[0] + c,        t * k[0] * k[1] - s * k[2], t * k[0] * k[2] + s * k[1],
            t * k[0] * k[1] + s * k[2], t * k[1] * k[1] + c,        t * k[1] * k[2] - s * k[0],
            t * k[0] * k[2] - s * k[1], t * k[1] * k[2] + s * k[0], t * k[2] * k[2] + c};
}

/// Smooth random field in roughly [-1, 1]: a coarse lattice of uniform
/// values resized linearly to the full grid.
inline Volume smooth_noise(const Shape3& shape, Rng& rng, int lattice = 5) {
    Volume coarse(Shape3{lattice, lattice, lattice});
    for (auto& v : coarse.data) v = static_cast<float>(uniform(rng, -1.0, 1.0));
    return resize_linear(coarse, shape);
}

inline double det3(const Mat3& m) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6]);
}

/// Smallest Jacobian determinant of x -> x + u(x) (central differences).
inline double min_jacobian(const DisplacementField& u) {
    const auto& s = u.shape;
    double best = 1.0;
    for (int z = 1; z + 1 < s[2]; ++z)
        for (int y = 1; y + 1 < s[1]; ++y)
            for (int x = 1; x + 1 < s[0]; ++x) {
                Mat3 j{};
                for (int c = 0; c < 3; ++c) {
                    const auto& v = u[c];
                    j[3 * c + 0] = 0.5 * (v(x + 1, y, z) - v(x - 1, y, z)) + (c == 0);
                    j[3 * c + 1] = 0.5 * (v(x, y + 1, z) - v(x, y - 1, z)) + (c == 1);
                    j[3 * c + 2] = 0.5 * (v(x, y, z + 1) - v(x, y, z - 1)) + (c == 2);
                }
                best = std::min(best, det3(j));
            }
    return best;
}

/// Affine part plus Gaussian bumps; bump amplitudes shrink until the map
/// is comfortably invertible.
inline DisplacementField sample_field(const SynthConfig& cfg, Rng& rng, Point3* translation) {
    const auto& s = cfg.shape;
    const double mag = cfg.magnitude;
    const double extent = (s[0] + s[1] + s[2]) / 3.0;
    AffineParams p;
    Point3 t{0, 0, 0};
    if (mag > 0.0) {
        const auto dir = random_unit(rng);
        const double len = mag * uniform(rng, 0.85, 1.15);
        for (int a = 0; a < 3; ++a) t[static_cast<std::size_t>(a)] = dir[static_cast<std::size_t>(a)] * len;
        const double angle = uniform(rng, -1.0, 1.0) * mag * 0.7 * std::acos(-1.0) / 180.0;
        const Mat3 r = rotation(random_unit(rng), angle);
        Point3 scale{};
        for (auto& sc : scale) sc = 1.0 + uniform(rng, -1.0, 1.0) * mag * 0.007;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                p.values[static_cast<std::size_t>(4 * i + j)] = r[static_cast<std::size_t>(3 * i + j)] * scale[static_cast<std::size_t>(j)];
        for (int i = 0; i < 3; ++i) p.values[static_cast<std::size_t>(4 * i + 3)] = t[static_cast<std::size_t>(i)];
    }
    if (translation != nullptr) *translation = t;
    auto u = affine_grid(p, s);
    if (mag == 0.0 || cfg.bumps <= 0) return u;

    struct Bump {
        Point3 centre, amp;
        double sigma;
    };
    std::vector<Bump> bumps(static_cast<std::size_t>(cfg.bumps));
    std::normal_distribution<double> g;
    for (auto& b : bumps) {
        for (int a = 0; a < 3; ++a) b.centre[static_cast<std::size_t>(a)] = uniform(rng, 0.2, 0.8) * (s[a] - 1);
        for (auto& a : b.amp) a = g(rng) * 0.15 * mag;
        b.sigma = uniform(rng, 0.1, 0.2) * extent;
    }
    for (double shrink = 1.0;; shrink *= 0.5) {
        auto f = u;
        for (int z = 0; z < s[2]; ++z)
            for (int y = 0; y < s[1]; ++y)
                for (int x = 0; x < s[0]; ++x) {
                    Point3 d{0, 0, 0};
                    for (const auto& b : bumps) {
                        const double dx = x - b.centre[0], dy = y - b.centre[1], dz = z - b.centre[2];
                        const double w = std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * b.sigma * b.sigma));
                        for (int a = 0; a < 3; ++a) d[static_cast<std::size_t>(a)] += shrink * w * b.amp[static_cast<std::size_t>(a)];
                    }
                    for (int a = 0; a < 3; ++a) f[a](x, y, z) += static_cast<float>(d[static_cast<std::size_t>(a)]);
                }
        if (min_jacobian(f) > 0.3 || shrink < 1e-3) return f;
    }
}

inline Volume warp_mask(const Volume& mask, const DisplacementField& u) { return binarized(warp_trilinear(mask, u)); }

inline std::size_t count(const Volume& m) {
    std::size_t n = 0;
    for (float v : m.data) n += v >= 0.5f;
    return n;
}

inline bool touches_border(const Volume& m) {
    const auto& s = m.shape;
    for (int z = 0; z < s[2]; ++z)
        for (int y = 0; y < s[1]; ++y)
            for (int x = 0; x < s[0]; ++x)
                if (m(x, y, z) >= 0.5f && (x == 0 || y == 0 || z == 0 || x == s[0] - 1 || y == s[1] - 1 || z == s[2] - 1))
                    return true;
    return false;
}

} // namespace synth

/// Moving and fixed images of an anatomy. The fixed image samples the
/// anatomy at x + u(x), so it has no padding artefacts. At level 0 the
/// fixed image is an increasing affine function of the moving intensities;
/// at level 1 tissue contrasts are unrelated, and the fixed side gets a
/// bright gland boundary and noise that the moving side lacks.
inline std::pair<Volume, Volume> render_modalities(const Anatomy& anatomy, const Shape3& moving_shape,
                                                   const DisplacementField& u, std::mt19937_64& rng, double level) {
    // Texture lattices are shared by both sides; sampled with edge clamping.
    const auto tex_m = synth::smooth_noise(moving_shape, rng);
    const auto tex_f = synth::smooth_noise(moving_shape, rng);
    auto sample = [&](const Volume& v, double x, double y, double z) {
        x = std::clamp(x, 0.0, moving_shape[0] - 1.0);
        y = std::clamp(y, 0.0, moving_shape[1] - 1.0);
        z = std::clamp(z, 0.0, moving_shape[2] - 1.0);
        const int x0 = std::min(static_cast<int>(x), moving_shape[0] - 2 < 0 ? 0 : moving_shape[0] - 2);
        const int y0 = std::min(static_cast<int>(y), moving_shape[1] - 2 < 0 ? 0 : moving_shape[1] - 2);
        const int z0 = std::min(static_cast<int>(z), moving_shape[2] - 2 < 0 ? 0 : moving_shape[2] - 2);
        const double fx = x - x0, fy = y - y0, fz = z - z0;
        double acc = 0.0;
        for (int k = 0; k < 8; ++k) {
            const int bx = k & 1, by = (k >> 1) & 1, bz = (k >> 2) & 1;
            const int xi = std::min(x0 + bx, moving_shape[0] - 1), yi = std::min(y0 + by, moving_shape[1] - 1),
                      zi = std::min(z0 + bz, moving_shape[2] - 1);
            acc += (bx ? fx : 1 - fx) * (by ? fy : 1 - fy) * (bz ? fz : 1 - fz) * v(xi, yi, zi);
        }
        return acc;
    };
    // Intensity of both modalities at a moving-space point.
    auto tissue = [&](double x, double y, double z) {
        const double rho = anatomy.rho(x, y, z);
        const bool g = rho <= 1.0;
        double m = g ? 0.8 : 0.25;
        double f = g ? 0.25 : 0.6;
        if (rho > 0.82 && rho < 1.05) f = 1.0;
        if (const int k = anatomy.landmark_at(x, y, z); k >= 0) {
            const bool inside = anatomy.landmarks[static_cast<std::size_t>(k)].inside;
            m = inside ? 0.45 : 0.55;
            f = inside ? 0.95 : 0.05;
        }
        const double mov = std::tanh(2.0 * (m + 0.1 * sample(tex_m, x, y, z)));
        const double div = f + 0.1 * sample(tex_f, x, y, z);
        return std::pair{mov, (1.0 - level) * (2.0 * mov + 1.0) + level * div};
    };

    Volume mov(moving_shape), fix(u.shape);
    for (int z = 0; z < moving_shape[2]; ++z)
        for (int y = 0; y < moving_shape[1]; ++y)
            for (int x = 0; x < moving_shape[0]; ++x) mov(x, y, z) = static_cast<float>(tissue(x, y, z).first);
    const auto scale = kernels::sample_scale(moving_shape, u.shape);
    std::size_t i = 0;
    for (int z = 0; z < u.shape[2]; ++z)
        for (int y = 0; y < u.shape[1]; ++y)
            for (int x = 0; x < u.shape[0]; ++x, ++i)
                fix.data[i] = static_cast<float>(tissue((x + u[0].data[i]) * scale[0], (y + u[1].data[i]) * scale[1],
                                                        (z + u[2].data[i]) * scale[2])
                                                     .second);
    if (level > 0.0) {
        std::normal_distribution<double> noise;
        for (auto& v : fix.data) v = static_cast<float>(v + 0.15 * level * noise(rng));
        for (auto& v : mov.data) v = static_cast<float>(v + 0.03 * level * noise(rng));
    }
    return {normalize_intensity(mov), normalize_intensity(fix)};
}

/// One synthetic case; deterministic in (cfg.seed, index). Landmarks that
/// leave the volume are redrawn; a case that cannot be completed raises
/// DegenerateCase.
inline std::pair<Case, GroundTruth> generate_case(const SynthConfig& cfg, int index) {
    validate(cfg);
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(index)};
    synth::Rng rng(seq);
    const auto& s = cfg.shape;
    const double extent = (s[0] + s[1] + s[2]) / 3.0;
    const double unit = extent / 32.0;

    for (int attempt = 0; attempt < 20; ++attempt) {
        Point3 t{};
        const auto u = synth::sample_field(cfg, rng, &t);

        // Gland centred so that both its moving and fixed copies stay inside.
        Anatomy an;
        for (int a = 0; a < 3; ++a) {
            const auto au = static_cast<std::size_t>(a);
            an.centre[au] = 0.5 * (s[a] - 1) + 0.5 * t[au] + synth::uniform(rng, -1.0, 1.0) * unit;
            an.radii[au] = synth::uniform(rng, 5.5, 7.5) * unit;
        }
        an.orient = synth::rotation(synth::random_unit(rng), synth::uniform(rng, 0.0, std::acos(-1.0)));
        an.lobe_phase = synth::uniform(rng, 0.0, 6.283185307179586);
        const Volume gland_mask = an.gland_mask(s);
        const Volume fixed_gland = synth::warp_mask(gland_mask, u);
        if (synth::count(fixed_gland) == 0) continue;

        std::uniform_int_distribution<int> count_dist(cfg.landmarks_min, cfg.landmarks_max);
        const int n_landmarks = count_dist(rng);
        std::vector<Volume> moving_landmarks, fixed_landmarks;
        bool ok = true;
        for (int k = 0; k < n_landmarks && ok; ++k) {
            bool placed = false;
            for (int tries = 0; tries < 200 && !placed; ++tries) {
                Anatomy::Landmark l{};
                l.inside = synth::uniform(rng, 0.0, 1.0) < 0.6;
                l.radius = synth::uniform(rng, 1.5, 2.2) * unit;
                for (int a = 0; a < 3; ++a)
                    l.centre[static_cast<std::size_t>(a)] = synth::uniform(rng, l.radius + 1.0, s[a] - 2.0 - l.radius);
                const double rho = an.rho(l.centre[0], l.centre[1], l.centre[2]);
                if (l.inside ? rho > 0.6 : (rho < 1.25 || rho > 1.8)) continue;
                bool clear = true;
                for (const auto& o : an.landmarks) {
                    double d2 = 0.0;
                    for (std::size_t a = 0; a < 3; ++a) d2 += (l.centre[a] - o.centre[a]) * (l.centre[a] - o.centre[a]);
                    if (std::sqrt(d2) < l.radius + o.radius + 1.5) clear = false;
                }
                if (!clear) continue;
                an.landmarks.push_back(l);
                Volume m = an.landmark_mask(s, an.landmarks.size() - 1);
                Volume f = synth::warp_mask(m, u);
                if (synth::count(m) == 0 || synth::touches_border(m) || synth::count(f) * 2 < synth::count(m) ||
                    synth::touches_border(f)) {
                    an.landmarks.pop_back();
                    continue;
                }
                moving_landmarks.push_back(std::move(m));
                fixed_landmarks.push_back(std::move(f));
                placed = true;
            }
            ok = placed;
        }
        if (!ok) continue;

        auto [mov_img, fix_img] = render_modalities(an, s, u, rng, cfg.level);
        Case c;
        char buf[32];
        std::snprintf(buf, sizeof buf, "case_%03d", index);
        c.id = buf;
        c.patient_id = c.id;
        c.moving = std::move(mov_img);
        c.fixed = std::move(fix_img);
        GroundTruth gt;
        gt.ddf = u;

        LabelPair gland;
        gland.type = kGlandType;
        gland.high_confidence = true;
        gland.moving = gland_mask;
        gland.fixed = fixed_gland;
        c.labels.push_back(std::move(gland));
        // A random two-thirds (rounded) of the landmarks are high confidence.
        std::vector<int> order(static_cast<std::size_t>(n_landmarks));
        for (int k = 0; k < n_landmarks; ++k) order[static_cast<std::size_t>(k)] = k;
        std::shuffle(order.begin(), order.end(), rng);
        const int n_high = static_cast<int>(std::lround(cfg.high_confidence_fraction * n_landmarks));
        std::vector<bool> high(static_cast<std::size_t>(n_landmarks), false);
        for (int k = 0; k < n_high; ++k) high[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = true;
        for (int k = 0; k < n_landmarks; ++k) {
            LabelPair l;
            l.type = an.landmarks[static_cast<std::size_t>(k)].inside ? "landmark_inside" : "landmark_outside";
            l.high_confidence = high[static_cast<std::size_t>(k)];
            l.moving = std::move(moving_landmarks[static_cast<std::size_t>(k)]);
            l.fixed = std::move(fixed_landmarks[static_cast<std::size_t>(k)]);
            c.labels.push_back(std::move(l));
        }
        for (const auto& l : c.labels) {
            gt.moving_centroids.push_back(mask_centroid(l.moving));
            gt.fixed_centroids.push_back(mask_centroid(l.fixed));
        }
        return {std::move(c), std::move(gt)};
    }
    fail(ErrorCode::DegenerateCase, "could not place all landmarks for case " + std::to_string(index));
}

/// Writes cfg.case_count cases plus dataset.json into `dir`.
inline void write_synthetic_dataset(const SynthConfig& cfg, const fs::path& dir) {
    validate(cfg);
    fs::create_directories(dir);
    nlohmann::json names = nlohmann::json::array();
    for (int i = 0; i < cfg.case_count; ++i) {
        auto [c, gt] = generate_case(cfg, i);
        nlohmann::json disp = nlohmann::json::array();
        for (std::size_t k = 0; k < gt.moving_centroids.size(); ++k)
            disp.push_back({{"moving_centroid", gt.moving_centroids[k]}, {"fixed_centroid", gt.fixed_centroids[k]}});
        write_case(c, dir / c.id, {{"ground_truth", {{"ddf", "ground_truth"}, {"centroids", disp}}}});
        write_field(gt.ddf, dir / c.id / "ground_truth");
        names.push_back(c.id);
    }
    write_json({{"cases", names}, {"generator", cfg}}, dir / "dataset.json");
}

} // namespace ldreg
