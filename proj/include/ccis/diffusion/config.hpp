#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "ccis/util/hash.hpp"

namespace ccis::diffusion {

// Architecture/geometry knobs shared by the backbone and the control branch.
// Serialized into every checkpoint header so reloads can be validated.
struct ModelConfig {
    int image_size = 64;
    std::vector<int> channels = {32, 64, 128};
    int temb_dim = 128;
    int text_dim = 64;
    int text_len = 32;
    int groups = 8;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    // control branch
    double blur_sigma = 2.0;
    int mask_channels = 64;
    int mask_down = 4;  // strided convs in each mask encoder

    int levels() const { return static_cast<int>(channels.size()); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["image_size"] = image_size;
        j["channels"] = channels;
        j["temb_dim"] = temb_dim;
        j["text_dim"] = text_dim;
        j["text_len"] = text_len;
        j["groups"] = groups;
        j["T"] = T;
        j["beta_start"] = beta_start;
        j["beta_end"] = beta_end;
        j["blur_sigma"] = blur_sigma;
        j["mask_channels"] = mask_channels;
        j["mask_down"] = mask_down;
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.image_size = j.at("image_size");
        c.channels = j.at("channels").get<std::vector<int>>();
        c.temb_dim = j.at("temb_dim");
        c.text_dim = j.at("text_dim");
        c.text_len = j.at("text_len");
        c.groups = j.at("groups");
        c.T = j.at("T");
        c.beta_start = j.at("beta_start");
        c.beta_end = j.at("beta_end");
        c.blur_sigma = j.at("blur_sigma");
        c.mask_channels = j.at("mask_channels");
        c.mask_down = j.at("mask_down");
        return c;
    }

    uint64_t hash() const { return fnv1a64(to_json().dump()); }

    // Small instance for gradient checks and fast unit tests.
    static ModelConfig miniature() {
        ModelConfig c;
        c.image_size = 8;
        c.channels = {4, 8};
        c.temb_dim = 16;
        c.text_dim = 64;
        c.text_len = 32;
        c.groups = 2;
        c.T = 50;
        c.mask_channels = 8;
        c.mask_down = 2;
        return c;
    }
};

}  // namespace ccis::diffusion
