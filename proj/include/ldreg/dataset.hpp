#pragma once

// Cases and the on-disk dataset layout:
//
//   DIR/dataset.json              {"cases": ["case_000", ...], ...}
//   DIR/case_000/case.json        manifest (see write_case)
//   DIR/case_000/moving.mhd       images, FLOAT32
//   DIR/case_000/fixed.mhd
//   DIR/case_000/labels/*.mhd     binary masks, UINT8
//   DIR/case_000/labels/*_smooth.{mhd,json}   cached smoothed maps
//   DIR/case_000/ground_truth_d{x,y,z}.mhd    synthetic cases only
//
// Paths inside case.json are relative to the case directory.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ldreg/error.hpp"
#include "ldreg/label_smoothing.hpp"
#include "ldreg/spatial_transform.hpp"
#include "ldreg/volume.hpp"
#include "ldreg/volume_io.hpp"

namespace ldreg {

namespace fs = std::filesystem;
using nlohmann::json;

inline const std::string kGlandType = "gland";

struct LabelPair {
    std::string type; // "gland" or a landmark tag
    bool high_confidence = false;
    Volume moving, fixed;               // binary masks
    Volume moving_smooth, fixed_smooth; // one-sided smoothed maps
    std::string moving_file, fixed_file; // relative paths, empty for in-memory cases

    bool is_gland() const { return type == kGlandType; }
};

struct Case {
    std::string id;
    std::string patient_id;
    Volume moving, fixed;
    std::vector<LabelPair> labels;

    int gland_index() const {
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i].is_gland()) return static_cast<int>(i);
        return -1;
    }
    bool smoothed() const {
        for (const auto& l : labels)
            if (l.moving_smooth.data.empty() || l.fixed_smooth.data.empty()) return false;
        return true;
    }
};

/// Checks masks against their images and the single-gland rule.
inline void validate_case(const Case& c) {
    require(!c.labels.empty(), ErrorCode::CaseWithoutLabels, "case " + c.id + " has no label pairs");
    int glands = 0;
    for (const auto& l : c.labels) {
        require(l.moving.shape == c.moving.shape && l.fixed.shape == c.fixed.shape, ErrorCode::ShapeMismatch,
                "case " + c.id + ": label '" + l.type + "' does not match its image shape");
        glands += l.is_gland() ? 1 : 0;
    }
    require(glands == 1, ErrorCode::InvalidArgument,
            "case " + c.id + " needs exactly one gland label, has " + std::to_string(glands));
}

/// Smoothed maps of every label of one image, all normalised to the target
/// mass of that image's largest label.
inline std::vector<SmoothedLabelMap> smooth_image_labels(const std::vector<const Volume*>& masks) {
    std::vector<Volume> copies;
    copies.reserve(masks.size());
    for (const auto* m : masks) copies.push_back(*m);
    const double M = target_mass(copies);
    std::vector<SmoothedLabelMap> out;
    out.reserve(masks.size());
    for (const auto* m : masks) out.push_back(smooth_label(*m, M));
    return out;
}

inline void smooth_case(Case& c) {
    std::vector<const Volume*> mv, fv;
    for (const auto& l : c.labels) {
        mv.push_back(&l.moving);
        fv.push_back(&l.fixed);
    }
    auto ms = smooth_image_labels(mv);
    auto fs_ = smooth_image_labels(fv);
    for (std::size_t i = 0; i < c.labels.size(); ++i) {
        c.labels[i].moving_smooth = std::move(ms[i].values);
        c.labels[i].fixed_smooth = std::move(fs_[i].values);
    }
}

inline json read_json(const fs::path& path) {
    require(fs::exists(path), ErrorCode::MissingFile, "missing " + path.string());
    std::ifstream in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCode::InvalidArgument, path.string() + ": " + e.what());
    }
}

inline void write_json(const json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorCode::IoFailure, "cannot open " + path.string());
    out << j.dump(2) << '\n';
    require(static_cast<bool>(out), ErrorCode::IoFailure, "write failed: " + path.string());
}

inline fs::path smoothed_path(const fs::path& mask_path) {
    return mask_path.parent_path() / (mask_path.stem().string() + "_smooth.mhd");
}
inline fs::path sidecar_path(const fs::path& mask_path) {
    return mask_path.parent_path() / (mask_path.stem().string() + "_smooth.json");
}

/// Writes a displacement field as PREFIX_dx.mhd, PREFIX_dy.mhd, PREFIX_dz.mhd.
inline void write_field(const DisplacementField& f, const fs::path& prefix) {
    static const char* names[3] = {"_dx.mhd", "_dy.mhd", "_dz.mhd"};
    for (int a = 0; a < 3; ++a) write_volume(f[a], prefix.string() + names[a]);
}

inline DisplacementField read_field(const fs::path& prefix) {
    static const char* names[3] = {"_dx.mhd", "_dy.mhd", "_dz.mhd"};
    DisplacementField f;
    for (int a = 0; a < 3; ++a) f[a] = read_volume(prefix.string() + names[a]);
    f.shape = f[0].shape;
    require(f[1].shape == f.shape && f[2].shape == f.shape, ErrorCode::ShapeMismatch,
            "field components differ in shape: " + prefix.string());
    return f;
}

inline Volume binarized(const Volume& v) {
    Volume out = v;
    for (auto& x : out.data) x = x >= 0.5f ? 1.0f : 0.0f;
    return out;
}

/// Writes images, masks and case.json. Smoothed maps are written too when
/// the case carries them.
inline void write_case(const Case& c, const fs::path& dir, const json& extra = json::object()) {
    fs::create_directories(dir / "labels");
    write_volume(c.moving, dir / "moving.mhd");
    write_volume(c.fixed, dir / "fixed.mhd");
    json labels = json::array();
    for (std::size_t i = 0; i < c.labels.size(); ++i) {
        const auto& l = c.labels[i];
        char buf[32];
        std::snprintf(buf, sizeof buf, "%02zu", i);
        const std::string mf = "labels/moving_" + std::string(buf) + ".mhd";
        const std::string ff = "labels/fixed_" + std::string(buf) + ".mhd";
        write_volume(l.moving, dir / mf, ElementType::UInt8);
        write_volume(l.fixed, dir / ff, ElementType::UInt8);
        labels.push_back({{"type", l.type},
                          {"confidence", l.high_confidence ? "high" : "normal"},
                          {"moving", mf},
                          {"fixed", ff}});
    }
    json manifest = {{"id", c.id},
                     {"patient_id", c.patient_id},
                     {"moving_image", "moving.mhd"},
                     {"fixed_image", "fixed.mhd"},
                     {"labels", labels}};
    for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
    write_json(manifest, dir / "case.json");
}

struct CaseFiles {
    fs::path dir;
    json manifest;
    fs::path moving_image() const { return dir / manifest.at("moving_image").get<std::string>(); }
    fs::path fixed_image() const { return dir / manifest.at("fixed_image").get<std::string>(); }
};

inline CaseFiles case_files(const fs::path& dir) { return {dir, read_json(dir / "case.json")}; }

/// Case directories listed in DIR/dataset.json, in order.
inline std::vector<fs::path> list_cases(const fs::path& dataset_dir) {
    const json ds = read_json(dataset_dir / "dataset.json");
    std::vector<fs::path> out;
    for (const auto& name : ds.at("cases")) out.push_back(dataset_dir / name.get<std::string>());
    require(!out.empty(), ErrorCode::EmptyDataset, "dataset " + dataset_dir.string() + " lists no cases");
    return out;
}

/// Loads images and labels. Smoothed maps come from the cache when present
/// and are computed in memory otherwise.
inline Case read_case(const fs::path& dir) {
    const auto files = case_files(dir);
    const json& m = files.manifest;
    Case c;
    c.id = m.at("id").get<std::string>();
    c.patient_id = m.value("patient_id", c.id);
    c.moving = read_volume(files.moving_image());
    c.fixed = read_volume(files.fixed_image());
    bool cached = true;
    for (const auto& l : m.at("labels")) {
        LabelPair p;
        p.type = l.at("type").get<std::string>();
        p.high_confidence = l.value("confidence", std::string("normal")) == "high";
        p.moving_file = l.at("moving").get<std::string>();
        p.fixed_file = l.at("fixed").get<std::string>();
        p.moving = read_volume(dir / p.moving_file);
        p.fixed = read_volume(dir / p.fixed_file);
        const std::pair<Volume*, fs::path> sides[2] = {{&p.moving_smooth, dir / p.moving_file},
                                                        {&p.fixed_smooth, dir / p.fixed_file}};
        for (const auto& [dst, mask_path] : sides) {
            const auto sp = smoothed_path(mask_path);
            if (fs::exists(sp))
                *dst = read_volume(sp);
            else
                cached = false;
        }
        c.labels.push_back(std::move(p));
    }
    validate_case(c);
    if (!cached) smooth_case(c);
    return c;
}

inline std::vector<Case> read_dataset(const fs::path& dataset_dir) {
    std::vector<Case> out;
    for (const auto& d : list_cases(dataset_dir)) out.push_back(read_case(d));
    return out;
}

/// Computes and caches smoothed maps (FLOAT32 volume plus JSON sidecar with
/// exponent, target_mass and achieved_sum) for every label of every case.
inline void smooth_dataset(const fs::path& dataset_dir) {
    for (const auto& dir : list_cases(dataset_dir)) {
        const auto files = case_files(dir);
        const auto& labels = files.manifest.at("labels");
        for (const char* side : {"moving", "fixed"}) {
            std::vector<fs::path> paths;
            std::vector<Volume> masks;
            for (const auto& l : labels) {
                paths.push_back(dir / l.at(side).get<std::string>());
                masks.push_back(read_volume(paths.back()));
            }
            std::vector<const Volume*> ptrs;
            for (const auto& m : masks) ptrs.push_back(&m);
            const auto maps = smooth_image_labels(ptrs);
            for (std::size_t i = 0; i < maps.size(); ++i) {
                write_volume(maps[i].values, smoothed_path(paths[i]));
                write_json({{"exponent", maps[i].exponent},
                            {"target_mass", maps[i].target_mass},
                            {"achieved_sum", maps[i].achieved_sum}},
                           sidecar_path(paths[i]));
            }
        }
    }
}

} // namespace ldreg
