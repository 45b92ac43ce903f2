#pragma once

#include <cmath>

#include "ccis/core/array.hpp"
#include "ccis/util/png_io.hpp"

namespace ccis::synth {

// float [3,H,W] in [0,1]  <->  8-bit HWC PNG buffers

inline PngImage to_png_rgb(const Array<float>& chw) {
    const int H = chw.dim(1), W = chw.dim(2);
    const int64_t hw = int64_t(H) * W;
    PngImage img;
    img.height = H;
    img.width = W;
    img.channels = 3;
    img.data.resize(size_t(hw) * 3);
    for (int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c) {
            const double v = std::clamp(double(chw[c * hw + p]), 0.0, 1.0);
            img.data[size_t(p) * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0));
        }
    return img;
}

inline Array<float> from_png_rgb(const PngImage& img) {
    const int H = img.height, W = img.width;
    const int64_t hw = int64_t(H) * W;
    Array<float> out({3, H, W});
    for (int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c) {
            const uint8_t byte = img.channels == 3 ? img.data[size_t(p) * 3 + c] : img.data[size_t(p)];
            out[c * hw + p] = static_cast<float>(byte) / 255.0f;
        }
    return out;
}

inline PngImage mask_to_png(const Array<uint8_t>& mask) {
    PngImage img;
    img.height = mask.dim(0);
    img.width = mask.dim(1);
    img.channels = 1;
    img.data.resize(mask.v.size());
    for (size_t i = 0; i < mask.v.size(); ++i) img.data[i] = mask.v[i] ? 255 : 0;
    return img;
}

inline Array<uint8_t> png_to_mask(const PngImage& img) {
    Array<uint8_t> mask({img.height, img.width});
    const int64_t hw = int64_t(img.height) * img.width;
    for (int64_t p = 0; p < hw; ++p) {
        const uint8_t byte = img.channels == 1 ? img.data[size_t(p)] : img.data[size_t(p) * img.channels];
        mask[p] = byte >= 128 ? 1 : 0;
    }
    return mask;
}

}  // namespace ccis::synth
