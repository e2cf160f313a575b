#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "ldreg/checkpoint.hpp"
#include "ldreg/dataset.hpp"
#include "ldreg/model.hpp"
#include "ldreg/synthetic.hpp"
#include "ldreg/training.hpp"

namespace ldreg {

// ---------------------------------------------------------------- metrics

/// 2|A & B| / (|A| + |B|) after thresholding at 0.5; 1 when both are empty.
template <typename T>
double dice(const BasicVolume<T>& a, const BasicVolume<T>& b) {
    require_same_shape(a, b, "dice");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = double(a.data[i]) >= 0.5, y = double(b.data[i]) >= 0.5;
        na += x;
        nb += y;
        both += x && y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

/// Distance in mm between the probability-weighted centroid of `warped`
/// and the plain centroid of the binary `fixed` landmark.
template <typename T>
double tre_centroid(const BasicVolume<T>& warped, const BasicVolume<T>& fixed, const Spacing3& spacing) {
    require_same_shape(warped, fixed, "tre_centroid");
    double cw[3] = {0, 0, 0}, cf[3] = {0, 0, 0}, mass = 0.0, count = 0.0;
    std::size_t i = 0;
    for (int z = 0; z < fixed.shape[2]; ++z)
        for (int y = 0; y < fixed.shape[1]; ++y)
            for (int x = 0; x < fixed.shape[0]; ++x, ++i) {
                const double w = double(warped.data[i]);
                cw[0] += w * x;
                cw[1] += w * y;
                cw[2] += w * z;
                mass += w;
                if (double(fixed.data[i]) >= 0.5) {
                    cf[0] += x;
                    cf[1] += y;
                    cf[2] += z;
                    count += 1.0;
                }
            }
    require(count > 0.0, ErrorCode::EmptyLandmark, "fixed landmark is empty");
    require(mass > 1e-6, ErrorCode::VanishedMass, "warped landmark has no mass left in the volume");
    double sq = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double d = (cw[a] / mass - cf[a] / count) * spacing[static_cast<std::size_t>(a)];
        sq += d * d;
    }
    return std::sqrt(sq);
}

struct Summary {
    double median = 0.0, p5 = 0.0, p95 = 0.0;
};

/// Percentile q in [0, 1] by linear interpolation at index q (n - 1).
inline double percentile(std::vector<double> values, double q) {
    require(!values.empty(), ErrorCode::EmptyList, "percentile of an empty list");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0 || values[hi] == values[lo]) return values[lo]; // avoids inf - inf
    return values[lo] + frac * (values[hi] - values[lo]);
}

inline Summary summarize(const std::vector<double>& values) {
    require(!values.empty(), ErrorCode::EmptyList, "summary of an empty list");
    return {percentile(values, 0.5), percentile(values, 0.05), percentile(values, 0.95)};
}

inline nlohmann::json to_json(const Summary& s) { return {{"median", s.median}, {"p5", s.p5}, {"p95", s.p95}}; }

// ------------------------------------------------------ cross-validation

/// Patients shuffled by seed and dealt into k near-equal groups; returns
/// case indices per fold, ascending.
inline std::vector<std::vector<int>> cv_split(const std::vector<std::string>& patient_of_case, int k, std::uint64_t seed) {
    std::vector<std::string> patients = patient_of_case;
    std::sort(patients.begin(), patients.end());
    patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
    require(k > 0 && static_cast<int>(patients.size()) >= k, ErrorCode::TooFewPatients,
            std::to_string(patients.size()) + " patients cannot fill " + std::to_string(k) + " folds");
    std::mt19937_64 rng(seed);
    std::shuffle(patients.begin(), patients.end(), rng);
    std::map<std::string, int> fold_of;
    const std::size_t P = patients.size();
    for (std::size_t i = 0; i < P; ++i) // contiguous blocks of size floor or ceil(P / k)
        fold_of[patients[i]] = static_cast<int>(i * static_cast<std::size_t>(k) / P);
    std::vector<std::vector<int>> folds(static_cast<std::size_t>(k));
    for (std::size_t c = 0; c < patient_of_case.size(); ++c)
        folds[static_cast<std::size_t>(fold_of[patient_of_case[c]])].push_back(static_cast<int>(c));
    return folds;
}

/// Fold file: {"k": k, "seed": s, "folds": [[case ids held out], ...]}.
struct Folds {
    int k = 0;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::string>> held_out;
};

inline nlohmann::json to_json(const Folds& f) { return {{"k", f.k}, {"seed", f.seed}, {"folds", f.held_out}}; }

inline Folds folds_from_json(const nlohmann::json& j) {
    Folds f;
    f.k = j.at("k").get<int>();
    f.seed = j.value("seed", std::uint64_t{0});
    f.held_out = j.at("folds").get<std::vector<std::vector<std::string>>>();
    require(static_cast<int>(f.held_out.size()) == f.k, ErrorCode::InvalidArgument, "fold count differs from k");
    return f;
}

/// Splits a dataset directory by the patient ids in its case manifests.
inline Folds split_dataset(const fs::path& dataset_dir, int k, std::uint64_t seed) {
    std::vector<std::string> ids, patients;
    for (const auto& dir : list_cases(dataset_dir)) {
        const auto m = case_files(dir).manifest;
        ids.push_back(m.at("id").get<std::string>());
        patients.push_back(m.value("patient_id", ids.back()));
    }
    Folds f{k, seed, {}};
    for (const auto& fold : cv_split(patients, k, seed)) {
        std::vector<std::string> names;
        for (int c : fold) names.push_back(ids[static_cast<std::size_t>(c)]);
        f.held_out.push_back(std::move(names));
    }
    return f;
}

// -------------------------------------------------------------- register

struct Registration {
    DisplacementField ddf;
    Volume warped;
    AffineParams affine; // identity for the local variant
    double seconds = 0.0;
};

/// Label-free inference from images and a checkpoint.
class Registrar {
public:
    explicit Registrar(const Checkpoint& ck) : params_(ck.params) {
        require(ck.config.contains("network"), ErrorCode::CheckpointMismatch, "checkpoint lacks a network config");
        net_ = network_from_json(ck.config["network"]);
    }

    const NetworkConfig& network() const { return net_; }

    Registration run(const Volume& moving, const Volume& fixed, Variant variant) {
        const auto t0 = std::chrono::steady_clock::now();
        require(padded_shape(fixed.shape) == net_.input_shape, ErrorCode::CheckpointMismatch,
                "fixed image " + shape_string(fixed.shape) + " does not fit a network built for " +
                    shape_string(net_.input_shape));
        const Volume m = normalize_intensity(moving);
        const Volume r = resize_linear(m, fixed.shape);
        const Volume f = normalize_intensity(fixed);
        Tape<float> tape;
        ParameterBinder<float> bind(tape, params_, false);
        const auto fwd = ops::registration_forward(bind, tape.constant(stack_channels<float, float>({&m})),
                                                   tape.constant(stack_channels<float, float>({&r})),
                                                   tape.constant(stack_channels<float, float>({&f})), Mode::Infer,
                                                   net_, variant);
        Registration out;
        out.ddf = field_of(tape.value(fwd.ddf));
        for (int a = 0; a < 3; ++a) out.ddf[a].spacing = fixed.spacing;
        if (fwd.theta.valid()) out.affine = affine_params_of(tape.value(fwd.theta)).front();
        out.warped = warp_trilinear(moving, out.ddf);
        out.warped.spacing = fixed.spacing;
        out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return out;
    }

private:
    NetworkParameters<float> params_;
    NetworkConfig net_;
};

// --------------------------------------------------------------- evaluate

/// "identity" and "ground_truth" are reference variants: a zero field and
/// the generator's field (synthetic data only).
struct EvaluationOptions {
    std::vector<std::string> variants{"composite", "global", "local"};
    int fold = -1; // -1: every held-out case in the fold file
};

struct CaseMetrics {
    std::string id;
    std::vector<double> tre_mm;
    double dice = 0.0;
    double seconds = 0.0;
};

/// Landmarks warped out of the volume have infinite TRE; JSON stores them
/// as null and the summary counts them as the largest values.
inline nlohmann::json variant_report(const std::vector<CaseMetrics>& cases) {
    nlohmann::json per_case = nlohmann::json::array();
    std::vector<double> tre, dsc, secs;
    int vanished = 0;
    for (const auto& c : cases) {
        per_case.push_back({{"id", c.id}, {"tre_mm", c.tre_mm}, {"dice", c.dice}, {"seconds", c.seconds}});
        tre.insert(tre.end(), c.tre_mm.begin(), c.tre_mm.end());
        for (double t : c.tre_mm) vanished += std::isinf(t);
        dsc.push_back(c.dice);
        secs.push_back(c.seconds);
    }
    nlohmann::json summary;
    if (!tre.empty()) summary["tre_mm"] = to_json(summarize(tre));
    summary["vanished_landmarks"] = vanished;
    if (!dsc.empty()) {
        summary["dice"] = to_json(summarize(dsc));
        summary["seconds"] = to_json(summarize(secs));
    }
    return {{"cases", per_case}, {"tre_mm", tre}, {"dice", dsc}, {"seconds", secs}, {"summary", summary}};
}

/// Metrics of one case under a given field: gland Dice and the TRE of every
/// high-confidence landmark. Labels are read here, after registration.
inline CaseMetrics case_metrics(const fs::path& case_dir, const DisplacementField& ddf) {
    const auto files = case_files(case_dir);
    CaseMetrics m;
    m.id = files.manifest.at("id").get<std::string>();
    bool gland_seen = false;
    for (const auto& l : files.manifest.at("labels")) {
        const Volume mov = read_volume(case_dir / l.at("moving").get<std::string>());
        const Volume fix = read_volume(case_dir / l.at("fixed").get<std::string>());
        const Volume warped = warp_trilinear(mov, ddf);
        if (l.at("type").get<std::string>() == kGlandType) {
            m.dice = dice(warped, fix);
            gland_seen = true;
        } else if (l.value("confidence", std::string("normal")) == "high") {
            try {
                m.tre_mm.push_back(tre_centroid(warped, fix, fix.spacing));
            } catch (const Error& e) {
                if (e.code() != ErrorCode::VanishedMass) throw;
                m.tre_mm.push_back(std::numeric_limits<double>::infinity()); // warped out of the volume
            }
        }
    }
    require(gland_seen, ErrorCode::InvalidArgument, "case " + m.id + " has no gland label");
    return m;
}

inline nlohmann::json evaluate(const fs::path& dataset_dir, const Folds& folds, const Checkpoint& ck,
                               const EvaluationOptions& opt = {}) {
    std::vector<std::string> ids;
    if (opt.fold >= 0) {
        require(opt.fold < folds.k, ErrorCode::InvalidArgument, "fold index out of range");
        ids = folds.held_out[static_cast<std::size_t>(opt.fold)];
    } else {
        for (const auto& f : folds.held_out) ids.insert(ids.end(), f.begin(), f.end());
    }
    require(!ids.empty(), ErrorCode::EmptyList, "no held-out cases to evaluate");
    Registrar reg(ck);
    nlohmann::json variants = nlohmann::json::object();
    for (const auto& name : opt.variants) {
        std::vector<CaseMetrics> results;
        for (const auto& id : ids) {
            const fs::path dir = dataset_dir / id;
            const auto files = case_files(dir);
            DisplacementField ddf;
            double seconds = 0.0;
            if (name == "identity") {
                ddf = DisplacementField(read_volume(files.fixed_image()).shape);
            } else if (name == "ground_truth") {
                require(files.manifest.contains("ground_truth"), ErrorCode::MissingFile, "case " + id + " has no ground truth");
                ddf = read_field(dir / files.manifest["ground_truth"].at("ddf").get<std::string>());
            } else {
                auto r = reg.run(read_volume(files.moving_image()), read_volume(files.fixed_image()), parse_variant(name));
                ddf = std::move(r.ddf);
                seconds = r.seconds;
            }
            auto m = case_metrics(dir, ddf);
            m.seconds = seconds;
            results.push_back(std::move(m));
        }
        variants[name] = variant_report(results);
    }
    return {{"fold", opt.fold}, {"cases", ids}, {"variants", variants}};
}

} // namespace ldreg
