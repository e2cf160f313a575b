#pragma once

// MetaImage-style volume files: a plain-text header (.mhd) plus a raw
// little-endian payload, x-fastest. Only FLOAT32 and UINT8 element types.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ldreg/error.hpp"
#include "ldreg/volume.hpp"

namespace ldreg {

enum class ElementType { Float32, UInt8 };

struct VolumeHeader {
    Shape3 dims{1, 1, 1};
    Spacing3 spacing{1.0, 1.0, 1.0};
    ElementType element_type = ElementType::Float32;
    std::string data_file = "LOCAL";
};

inline std::size_t element_size(ElementType t) { return t == ElementType::Float32 ? 4 : 1; }

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <typename V, std::size_t N>
std::array<V, N> parse_tuple(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    std::array<V, N> out{};
    for (std::size_t i = 0; i < N; ++i) {
        if (!(in >> out[i])) fail(ErrorCode::MalformedHeader, key);
    }
    std::string rest;
    if (in >> rest) fail(ErrorCode::MalformedHeader, key);
    return out;
}

inline void store_f32_le(float value, unsigned char* dst) {
    auto bits = std::bit_cast<std::uint32_t>(value);
    for (int i = 0; i < 4; ++i) dst[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu);
}

inline float load_f32_le(const unsigned char* src) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(src[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

inline std::string format_double(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

} // namespace detail

/// Parses header text. Unknown keys are ignored; required keys must be
/// present and well formed.
inline VolumeHeader parse_header(const std::string& text) {
    std::map<std::string, std::string> fields;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(ErrorCode::MalformedHeader, line);
        fields[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    auto field = [&](const char* key) -> const std::string& {
        auto it = fields.find(key);
        if (it == fields.end()) fail(ErrorCode::MalformedHeader, std::string(key) + " (missing)");
        return it->second;
    };

    VolumeHeader h;
    if (field("NDims") != "3") fail(ErrorCode::MalformedHeader, "NDims");
    h.dims = detail::parse_tuple<int, 3>("DimSize", field("DimSize"));
    for (int d : h.dims)
        if (d <= 0) fail(ErrorCode::MalformedHeader, "DimSize");
    if (fields.count("ElementSpacing")) {
        h.spacing = detail::parse_tuple<double, 3>("ElementSpacing", fields["ElementSpacing"]);
        for (double s : h.spacing)
            if (!(s > 0.0)) fail(ErrorCode::MalformedHeader, "ElementSpacing");
    }
    const auto& type = field("ElementType");
    if (type == "FLOAT32" || type == "MET_FLOAT")
        h.element_type = ElementType::Float32;
    else if (type == "UINT8" || type == "MET_UCHAR")
        h.element_type = ElementType::UInt8;
    else
        fail(ErrorCode::MalformedHeader, "ElementType");
    h.data_file = field("ElementDataFile");
    if (h.data_file.empty()) fail(ErrorCode::MalformedHeader, "ElementDataFile");
    return h;
}

inline std::string format_header(const VolumeHeader& h) {
    std::ostringstream out;
    out << "NDims = 3\n";
    out << "DimSize = " << h.dims[0] << ' ' << h.dims[1] << ' ' << h.dims[2] << '\n';
    out << "ElementSpacing = " << detail::format_double(h.spacing[0]) << ' ' << detail::format_double(h.spacing[1])
        << ' ' << detail::format_double(h.spacing[2]) << '\n';
    out << "ElementType = " << (h.element_type == ElementType::Float32 ? "FLOAT32" : "UINT8") << '\n';
    out << "ElementDataFile = " << h.data_file << '\n';
    return out.str();
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::MissingFile, path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Volume decode_payload(const VolumeHeader& h, const unsigned char* bytes, std::size_t n_bytes) {
    const std::size_t n = voxel_count(h.dims);
    const std::size_t expected = n * element_size(h.element_type);
    if (n_bytes != expected)
        fail(ErrorCode::PayloadSizeMismatch,
             "expected " + std::to_string(expected) + " bytes, got " + std::to_string(n_bytes));
    std::vector<float> data(n);
    if (h.element_type == ElementType::Float32) {
        for (std::size_t i = 0; i < n; ++i) data[i] = detail::load_f32_le(bytes + 4 * i);
    } else {
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<float>(bytes[i]);
    }
    return Volume(h.dims, h.spacing, std::move(data));
}

/// Reads a volume header and its payload. Relative data-file paths are
/// resolved against the header's directory; `LOCAL` means the payload
/// follows the header line `ElementDataFile = LOCAL` in the same file.
inline Volume read_volume(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail(ErrorCode::MissingFile, path.string());
    const auto bytes = read_bytes(path);

    const std::string marker = "ElementDataFile";
    std::size_t header_end = bytes.size();
    {
        const std::string text(bytes.begin(), bytes.end());
        const auto pos = text.find(marker);
        if (pos != std::string::npos) {
            const auto nl = text.find('\n', pos);
            header_end = nl == std::string::npos ? text.size() : nl + 1;
        }
    }
    const std::string header_text(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header_end));
    const auto h = parse_header(header_text);

    if (h.data_file == "LOCAL")
        return decode_payload(h, bytes.data() + header_end, bytes.size() - header_end);

    const auto payload_path = path.parent_path() / h.data_file;
    if (!std::filesystem::exists(payload_path)) fail(ErrorCode::MissingFile, payload_path.string());
    const auto payload = read_bytes(payload_path);
    return decode_payload(h, payload.data(), payload.size());
}

/// Writes `<stem>.mhd` + `<stem>.raw` (the header names the raw file
/// relative to itself). UInt8 requires integral values in [0, 255].
template <typename T>
void write_volume(const BasicVolume<T>& v, const std::filesystem::path& path,
                  ElementType type = ElementType::Float32) {
    VolumeHeader h;
    h.dims = v.shape;
    h.spacing = v.spacing;
    h.element_type = type;
    auto raw_path = path;
    raw_path.replace_extension(".raw");
    h.data_file = raw_path.filename().string();

    std::vector<unsigned char> payload(v.size() * element_size(type));
    if (type == ElementType::Float32) {
        for (std::size_t i = 0; i < v.size(); ++i)
            detail::store_f32_le(static_cast<float>(v.data[i]), payload.data() + 4 * i);
    } else {
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double value = static_cast<double>(v.data[i]);
            require(value >= 0.0 && value <= 255.0 && value == std::floor(value), ErrorCode::InvalidArgument,
                    "UINT8 payload needs integral values in [0, 255]");
            payload[i] = static_cast<unsigned char>(value);
        }
    }

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::IoFailure, path.string());
        out << format_header(h);
        if (!out) fail(ErrorCode::IoFailure, path.string());
    }
    std::ofstream out(raw_path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoFailure, raw_path.string());
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) fail(ErrorCode::IoFailure, raw_path.string());
}

} // namespace ldreg
