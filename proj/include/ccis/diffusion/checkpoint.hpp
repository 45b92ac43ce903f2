#pragma once

#include <map>
#include <string>
#include <vector>

#include "ccis/core/array.hpp"

namespace ccis::diffusion {

// Single-file checkpoint format, shared by the backbone, the control branch,
// optimizer state and scorer assets:
//   magic "CCKP" | u32 version | u64 config_hash | u32 meta_len | meta (JSON)
//   u32 n_tensors | per tensor: u32 name_len, name, u8 dtype (0=f32, 1=i64),
//   u32 ndim, i64 dims..., raw little-endian data.
inline constexpr uint32_t kCheckpointMagic = 0x504B4343;  // "CCKP"
inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> f32;   // dtype 0
    std::vector<int64_t> i64; // dtype 1
    bool is_i64 = false;

    static NamedTensor scalar_i64(const std::string& name, int64_t v) {
        NamedTensor t;
        t.name = name;
        t.shape = {1};
        t.i64 = {v};
        t.is_i64 = true;
        return t;
    }
};

struct Checkpoint {
    uint32_t version = kCheckpointVersion;
    uint64_t config_hash = 0;
    std::string meta_json;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// FNV over the serialized tensor payloads (order-sensitive, names included).
uint64_t checkpoint_params_hash(const Checkpoint& ckpt);

}  // namespace ccis::diffusion
