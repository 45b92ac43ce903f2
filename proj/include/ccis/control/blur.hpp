#pragma once

#include <cmath>
#include <vector>

#include "ccis/core/array.hpp"

namespace ccis::control {

// Discrete Gaussian kernel of radius ceil(3*sigma), normalized to sum 1.
inline std::vector<double> gaussian_kernel(double sigma) {
    if (sigma <= 0.0) return {1.0};
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<size_t>(i + radius)] = std::exp(-double(i) * i / (2.0 * sigma * sigma));
        sum += k[static_cast<size_t>(i + radius)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

inline int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -1 - i;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// Gaussian blur of a [H,W] map: separable passes with reflect padding
// (edge-inclusive mirror). sigma = 0 returns the input unchanged.
template <class S>
Array<S> blur_mask(const Array<S>& m, double sigma) {
    if (m.ndim() != 2) throw ShapeError("blur_mask: want [H,W]");
    if (sigma < 0.0) throw ConfigError("blur_mask: sigma must be >= 0");
    if (sigma == 0.0) return m;
    const int H = m.dim(0), W = m.dim(1);
    const auto k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);

    Array<S> tmp({H, W});
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            double s = 0;
            for (int i = -radius; i <= radius; ++i)
                s += k[static_cast<size_t>(i + radius)] * double(m[int64_t(r) * W + reflect_index(c + i, W)]);
            tmp[int64_t(r) * W + c] = S(s);
        }
    Array<S> out({H, W});
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            double s = 0;
            for (int i = -radius; i <= radius; ++i)
                s += k[static_cast<size_t>(i + radius)] * double(tmp[int64_t(reflect_index(r + i, H)) * W + c]);
            out[int64_t(r) * W + c] = S(s);
        }
    return out;
}

}  // namespace ccis::control
