#pragma once

#include <cstdint>
#include <string>

#include "ccis/core/array.hpp"
#include "ccis/synth/attributes.hpp"

namespace ccis::synth {

// One dataset record: image [3,H,W] in [0,1], binary mask [H,W] in {0,1},
// foreground/background captions, and the attributes that produced them.
struct Triplet {
    Array<float> image;
    Array<uint8_t> mask;
    std::string caption_fg;
    std::string caption_bg;
    PolypAttributes attributes;
    std::string id;
};

// Rasterizes the polyp mask and paints a mucosa-like background plus a polyp
// whose hue/shape/texture/shading encode the four attribute classes.
// Deterministic in (attrs, image_size, seed); per-pixel noise is hashed from
// (seed, row, col) so the output is iteration-order free.
Triplet generate_scene(const PolypAttributes& attrs, int height, int width, uint64_t seed);

// Mask-only rasterization (used by generate_scene and by tests).
Array<uint8_t> rasterize_polyp(const PolypAttributes& attrs, int height, int width, uint64_t seed);

}  // namespace ccis::synth
