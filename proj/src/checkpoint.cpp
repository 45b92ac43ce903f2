#include "ccis/diffusion/checkpoint.hpp"

#include <bit>
#include <fstream>

#include "ccis/core/errors.hpp"
#include "ccis/util/hash.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace ccis::diffusion {

namespace {
template <class T>
void put(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for write: " + path);
    put(f, kCheckpointMagic);
    put(f, ckpt.version);
    put(f, ckpt.config_hash);
    put(f, static_cast<uint32_t>(ckpt.meta_json.size()));
    f.write(ckpt.meta_json.data(), static_cast<std::streamsize>(ckpt.meta_json.size()));
    put(f, static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        put(f, static_cast<uint32_t>(t.name.size()));
        f.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put(f, static_cast<uint8_t>(t.is_i64 ? 1 : 0));
        put(f, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) put(f, static_cast<int64_t>(d));
        if (t.is_i64)
            f.write(reinterpret_cast<const char*>(t.i64.data()),
                    static_cast<std::streamsize>(t.i64.size() * sizeof(int64_t)));
        else
            f.write(reinterpret_cast<const char*>(t.f32.data()),
                    static_cast<std::streamsize>(t.f32.size() * sizeof(float)));
    }
    if (!f) throw IoError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    if (get<uint32_t>(f) != kCheckpointMagic) throw ValidationError("bad checkpoint magic: " + path);
    Checkpoint c;
    c.version = get<uint32_t>(f);
    if (c.version != kCheckpointVersion)
        throw ValidationError("unsupported checkpoint version in " + path);
    c.config_hash = get<uint64_t>(f);
    const auto meta_len = get<uint32_t>(f);
    c.meta_json.resize(meta_len);
    f.read(c.meta_json.data(), meta_len);
    const auto n = get<uint32_t>(f);
    for (uint32_t i = 0; i < n; ++i) {
        NamedTensor t;
        const auto name_len = get<uint32_t>(f);
        t.name.resize(name_len);
        f.read(t.name.data(), name_len);
        t.is_i64 = get<uint8_t>(f) == 1;
        const auto ndim = get<uint32_t>(f);
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            const auto dim = get<int64_t>(f);
            t.shape.push_back(static_cast<int>(dim));
            numel *= dim;
        }
        if (t.is_i64) {
            t.i64.resize(static_cast<size_t>(numel));
            f.read(reinterpret_cast<char*>(t.i64.data()),
                   static_cast<std::streamsize>(numel * sizeof(int64_t)));
        } else {
            t.f32.resize(static_cast<size_t>(numel));
            f.read(reinterpret_cast<char*>(t.f32.data()),
                   static_cast<std::streamsize>(numel * sizeof(float)));
        }
        if (!f) throw ValidationError("truncated checkpoint: " + path);
        c.tensors.push_back(std::move(t));
    }
    return c;
}

uint64_t checkpoint_params_hash(const Checkpoint& ckpt) {
    uint64_t h = 14695981039346656037ULL;
    for (const auto& t : ckpt.tensors) {
        h = fnv1a64(t.name.data(), t.name.size(), h);
        if (t.is_i64)
            h = fnv1a64(t.i64.data(), t.i64.size() * sizeof(int64_t), h);
        else
            h = fnv1a64(t.f32.data(), t.f32.size() * sizeof(float), h);
    }
    return h;
}

}  // namespace ccis::diffusion
