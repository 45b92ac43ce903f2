#pragma once

#include <functional>
#include <map>

#include "ccis/diffusion/checkpoint.hpp"
#include "ccis/nn/layers.hpp"

namespace ccis::diffusion {

// Parameter tensors always serialize as float32, whatever the in-memory
// scalar type; float models round-trip bit-exactly.
template <class S>
void collect_params(const std::function<void(const nn::ParamVisitor<S>&)>& visit,
                    std::vector<NamedTensor>& out) {
    visit([&out](const std::string& name, Tensor<S>& p) {
        NamedTensor t;
        t.name = name;
        t.shape = p.shape();
        const auto f = p.val().template cast<float>();
        t.f32 = f.v;
        out.push_back(std::move(t));
    });
}

template <class S>
void load_params(const std::function<void(const nn::ParamVisitor<S>&)>& visit, const Checkpoint& ckpt) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : ckpt.tensors) by_name[t.name] = &t;
    visit([&by_name](const std::string& name, Tensor<S>& p) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ConfigError("checkpoint is missing tensor " + name);
        const NamedTensor& t = *it->second;
        if (t.is_i64 || t.shape != p.shape())
            throw ConfigError("checkpoint tensor " + name + " has wrong dtype/shape");
        Array<float> f(t.shape, t.f32);
        p.val() = f.template cast<S>();
    });
}

}  // namespace ccis::diffusion
