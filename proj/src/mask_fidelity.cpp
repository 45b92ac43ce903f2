#include "ccis/eval/mask_fidelity.hpp"

#include <cmath>
#include <deque>

#include "ccis/core/errors.hpp"
#include "ccis/util/color.hpp"

namespace ccis::eval {

Array<uint8_t> hue_band_segment(const Array<float>& image, synth::Color color) {
    if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("hue_band_segment: want [3,H,W]");
    const int H = image.dim(1), W = image.dim(2);
    const int64_t hw = int64_t(H) * W;
    Array<uint8_t> raw({H, W});
    for (int64_t p = 0; p < hw; ++p) {
        double h, s, v;
        rgb_to_hsv(image[p], image[hw + p], image[2 * hw + p], h, s, v);
        raw[p] = synth::hue_in_band(h, color) ? 1 : 0;
    }
    // 3x3 majority filter
    Array<uint8_t> out({H, W});
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            int count = 0;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    if (rr >= 0 && rr < H && cc >= 0 && cc < W)
                        count += raw[int64_t(rr) * W + cc];
                }
            out[int64_t(r) * W + c] = count >= 5 ? 1 : 0;
        }
    return out;
}

double iou(const Array<uint8_t>& a, const Array<uint8_t>& b) {
    if (a.shape != b.shape) throw ShapeError("iou: shape mismatch");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        const bool av = a.v[i] != 0, bv = b.v[i] != 0;
        inter += (av && bv) ? 1 : 0;
        uni += (av || bv) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : double(inter) / double(uni);
}

double mask_fidelity(const Array<float>& image, const Array<uint8_t>& mask, synth::Color color) {
    int64_t fg = 0;
    for (auto v : mask.v) fg += v ? 1 : 0;
    if (fg == 0) throw ValidationError("mask_fidelity: empty mask, metric undefined");
    return iou(hue_band_segment(image, color), mask);
}

double boundary_smoothness(const Array<float>& image, const Array<uint8_t>& mask) {
    const int H = mask.dim(0), W = mask.dim(1);
    // boundary: mask pixels with a 4-neighbor of the other class
    std::vector<int> dist(static_cast<size_t>(H) * W, -1);
    std::deque<int> queue;
    auto at = [W](int r, int c) { return r * W + c; };
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            const uint8_t m = mask[at(r, c)];
            bool edge = false;
            if (r > 0 && mask[at(r - 1, c)] != m) edge = true;
            if (r + 1 < H && mask[at(r + 1, c)] != m) edge = true;
            if (c > 0 && mask[at(r, c - 1)] != m) edge = true;
            if (c + 1 < W && mask[at(r, c + 1)] != m) edge = true;
            if (edge) {
                dist[static_cast<size_t>(at(r, c))] = 0;
                queue.push_back(at(r, c));
            }
        }
    while (!queue.empty()) {
        const int p = queue.front();
        queue.pop_front();
        const int r = p / W, c = p % W;
        const int d = dist[static_cast<size_t>(p)];
        if (d >= 2) continue;
        const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
        for (const auto& n : nb) {
            if (n[0] < 0 || n[0] >= H || n[1] < 0 || n[1] >= W) continue;
            auto& dd = dist[static_cast<size_t>(at(n[0], n[1]))];
            if (dd < 0) {
                dd = d + 1;
                queue.push_back(at(n[0], n[1]));
            }
        }
    }

    const int64_t hw = int64_t(H) * W;
    auto gray = [&](int r, int c) {
        const int64_t p = int64_t(r) * W + c;
        return (double(image[p]) + image[hw + p] + image[2 * hw + p]) / 3.0;
    };
    double sum = 0;
    int64_t count = 0;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            if (dist[static_cast<size_t>(at(r, c))] < 0) continue;  // outside the band
            const double gx = gray(r, std::min(W - 1, c + 1)) - gray(r, std::max(0, c - 1));
            const double gy = gray(std::min(H - 1, r + 1), c) - gray(std::max(0, r - 1), c);
            sum += std::sqrt(gx * gx + gy * gy);
            ++count;
        }
    return count == 0 ? 0.0 : sum / double(count);
}

}  // namespace ccis::eval
