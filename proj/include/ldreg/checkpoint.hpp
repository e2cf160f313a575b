#pragma once

// Checkpoint container, version 1. All integers and floats little-endian.
//
//   bytes  "LDREGCK1"
//   u32    version (= 1)
//   u64    length, then UTF-8 JSON: the training config echo
//   i64    completed iterations
//   u64    length, then text state of the sampling engine
//   u32    parameter count, then per parameter (sorted by name):
//            u32 name length, name, i32 dims[5], f32 values[prod(dims)]
//   u32    optimizer slot count, then per slot (sorted by name):
//            u32 name length, name, i64 step, i32 dims[5], f32 m[..], f32 v[..]
//
// Running batch-norm statistics are ordinary parameter blocks whose names
// contain "running_".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ldreg/adam.hpp"
#include "ldreg/error.hpp"
#include "ldreg/network.hpp"

namespace ldreg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Checkpoint {
    nlohmann::json config;
    std::int64_t iteration = 0;
    std::string rng_state;
    NetworkParameters<float> params;
    AdamState<float> adam;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'L', 'D', 'R', 'E', 'G', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
public:
    template <typename V>
    void pod(V v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(V));
    }
    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        bytes.insert(bytes.end(), c, c + n);
    }
    void str32(const std::string& s) {
        pod(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void str64(const std::string& s) {
        pod(static_cast<std::uint64_t>(s.size()));
        raw(s.data(), s.size());
    }
    void dims(const Dims5& d) {
        for (int v : {d.n, d.c, d.x, d.y, d.z}) pod(static_cast<std::int32_t>(v));
    }
    std::vector<char> bytes;
};

class Reader {
public:
    explicit Reader(std::vector<char> b) : bytes_(std::move(b)) {}

    void raw(void* dst, std::size_t n) {
        require(n <= bytes_.size() - pos_, ErrorCode::CheckpointMismatch, "checkpoint truncated");
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    template <typename V>
    V pod() {
        V v{};
        raw(&v, sizeof(V));
        return v;
    }
    std::string str(std::uint64_t n) {
        require(n <= bytes_.size() - pos_, ErrorCode::CheckpointMismatch, "checkpoint truncated");
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    Dims5 dims() {
        Dims5 d;
        d.n = pod<std::int32_t>();
        d.c = pod<std::int32_t>();
        d.x = pod<std::int32_t>();
        d.y = pod<std::int32_t>();
        d.z = pod<std::int32_t>();
        require(d.n > 0 && d.c > 0 && d.x > 0 && d.y > 0 && d.z > 0, ErrorCode::CheckpointMismatch,
                "checkpoint tensor has non-positive dims");
        return d;
    }
    std::vector<float> floats(std::size_t n) {
        std::vector<float> v(n);
        raw(v.data(), n * sizeof(float));
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::vector<char> serialize_checkpoint(const Checkpoint& ck) {
    detail::Writer w;
    w.raw(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
    w.pod(detail::kCheckpointVersion);
    w.str64(ck.config.dump());
    w.pod(static_cast<std::int64_t>(ck.iteration));
    w.str64(ck.rng_state);
    w.pod(static_cast<std::uint32_t>(ck.params.tensors.size()));
    for (const auto& [name, t] : ck.params.tensors) {
        w.str32(name);
        w.dims(t.dims);
        w.raw(t.data.data(), t.data.size() * sizeof(float));
    }
    w.pod(static_cast<std::uint32_t>(ck.adam.slots.size()));
    for (const auto& [name, s] : ck.adam.slots) {
        w.str32(name);
        w.pod(static_cast<std::int64_t>(s.step));
        w.dims(s.m.dims);
        w.raw(s.m.data.data(), s.m.data.size() * sizeof(float));
        w.raw(s.v.data.data(), s.v.data.size() * sizeof(float));
    }
    return std::move(w.bytes);
}

inline Checkpoint deserialize_checkpoint(std::vector<char> bytes) {
    detail::Reader r(std::move(bytes));
    char magic[8];
    r.raw(magic, sizeof magic);
    require(std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) == 0, ErrorCode::CheckpointMismatch,
            "not a checkpoint file");
    const auto version = r.pod<std::uint32_t>();
    require(version == detail::kCheckpointVersion, ErrorCode::CheckpointMismatch,
            "unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    try {
        ck.config = nlohmann::json::parse(r.str(r.pod<std::uint64_t>()));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::CheckpointMismatch, std::string("checkpoint config: ") + e.what());
    }
    ck.iteration = r.pod<std::int64_t>();
    ck.rng_state = r.str(r.pod<std::uint64_t>());
    const auto n_params = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_params; ++i) {
        std::string name = r.str(r.pod<std::uint32_t>());
        const Dims5 d = r.dims();
        ck.params.tensors[name] = Tensor<float>(d, r.floats(d.count()));
    }
    const auto n_slots = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_slots; ++i) {
        std::string name = r.str(r.pod<std::uint32_t>());
        AdamSlot<float> s;
        s.step = r.pod<std::int64_t>();
        const Dims5 d = r.dims();
        s.m = Tensor<float>(d, r.floats(d.count()));
        s.v = Tensor<float>(d, r.floats(d.count()));
        ck.adam.slots[name] = std::move(s);
    }
    require(r.done(), ErrorCode::CheckpointMismatch, "trailing bytes after checkpoint");
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ck);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::IoFailure, "cannot open " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorCode::IoFailure, "write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), ErrorCode::MissingFile, "no checkpoint at " + path.string());
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::IoFailure, "cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(std::move(bytes));
}

} // namespace ldreg
