#include "ccis/synth/scene.hpp"

#include <cmath>
#include <numbers>

#include "ccis/core/errors.hpp"
#include "ccis/synth/captions.hpp"
#include "ccis/util/color.hpp"

namespace ccis::synth {

namespace {

constexpr double kPi = std::numbers::pi;

// Order-free per-pixel noise in [0,1).
double pixel_noise(uint64_t seed, int r, int c, uint64_t salt) {
    uint64_t x = seed ^ (uint64_t(uint32_t(r)) << 32) ^ uint64_t(uint32_t(c)) ^ (salt * 0x9e3779b97f4a7c15ULL);
    splitmix64(x);
    return double(splitmix64(x) >> 11) * 0x1.0p-53;
}

struct SceneParams {
    double bg_phase1, bg_phase2, bg_phase3;
    double bg_freq1, bg_freq2;
    double fold_angle, fold_freq, fold_phase;
    double lobe_phase;
    int lobe_count;
    double spec_dr, spec_dc;  // specular highlight offset, fraction of radius
    double hue_jitter;        // polyp hue offset within its band
    double oval_angle;
};

SceneParams draw_params(Rng& rng) {
    SceneParams p;
    p.bg_phase1 = rng.uniform(0, 2 * kPi);
    p.bg_phase2 = rng.uniform(0, 2 * kPi);
    p.bg_phase3 = rng.uniform(0, 2 * kPi);
    p.bg_freq1 = rng.uniform(1.5, 3.0);
    p.bg_freq2 = rng.uniform(2.5, 5.0);
    p.fold_angle = rng.uniform(0, kPi);
    p.fold_freq = rng.uniform(2.0, 4.0);
    p.fold_phase = rng.uniform(0, 2 * kPi);
    p.lobe_phase = rng.uniform(0, 2 * kPi);
    p.lobe_count = 4 + static_cast<int>(rng.uniform_int(3));  // 4..6
    p.spec_dr = rng.uniform(-0.25, 0.0);
    p.spec_dc = rng.uniform(-0.2, 0.2);
    p.hue_jitter = rng.uniform(-6.0, 6.0);
    p.oval_angle = rng.uniform(0, kPi);
    return p;
}

// Normalized radial metric: <= 1 inside the base outline. phi receives the
// polar angle of the pixel around the polyp center.
double shape_metric(const PolypAttributes& a, const SceneParams& p, double dr, double dc, double& phi) {
    phi = std::atan2(dr, dc);
    const double R = a.radius;
    switch (a.shape) {
        case PolypShape::Round:
            return std::sqrt(dr * dr + dc * dc) / R;
        case PolypShape::Oval: {
            const double ca = std::cos(p.oval_angle), sa = std::sin(p.oval_angle);
            const double u = (dc * ca + dr * sa) / (1.3 * R);
            const double v = (-dc * sa + dr * ca) / (0.7 * R);
            return std::sqrt(u * u + v * v);
        }
        case PolypShape::Flat: {
            const double u = dc / (1.5 * R);
            const double v = dr / (0.45 * R);
            return std::sqrt(u * u + v * v);
        }
        case PolypShape::Pedunculated: {
            // head disk above the center plus a stalk capsule below
            const double hr = dr + 0.55 * R;  // head center offset up
            const double head = std::sqrt(hr * hr + dc * dc) / (0.8 * R);
            // vertical capsule from -0.2R to +0.9R, half-width 0.225R
            const double seg_lo = -0.2 * R, seg_hi = 0.9 * R;
            const double cl = std::clamp(dr, seg_lo, seg_hi);
            const double sd = std::sqrt((dr - cl) * (dr - cl) + dc * dc) / (0.225 * R);
            return std::min(head, sd);
        }
    }
    return 1e9;
}

double lobe_boundary(const PolypAttributes& a, const SceneParams& p, double phi) {
    if (a.texture != Texture::Lobulated) return 1.0;
    return 1.0 + 0.18 * std::sin(p.lobe_count * phi + p.lobe_phase);
}

}  // namespace

Array<uint8_t> rasterize_polyp(const PolypAttributes& attrs, int height, int width, uint64_t seed) {
    Rng rng(derive_seed(seed, 0x5ce11e));
    const SceneParams p = draw_params(rng);
    Array<uint8_t> mask({height, width});
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) {
            double phi = 0;
            const double m = shape_metric(attrs, p, r - attrs.center_row, c - attrs.center_col, phi);
            mask[int64_t(r) * width + c] = (m <= lobe_boundary(attrs, p, phi)) ? 1 : 0;
        }
    return mask;
}

Triplet generate_scene(const PolypAttributes& attrs, int height, int width, uint64_t seed) {
    if (height < 32 || width < 32) throw ConfigError("image_size must be at least 32x32");
    validate_attributes(attrs, height, width);

    Rng rng(derive_seed(seed, 0x5ce11e));
    const SceneParams p = draw_params(rng);

    Triplet t;
    t.attributes = attrs;
    t.mask = Array<uint8_t>({height, width});
    t.image = Array<float>({3, height, width});

    int64_t fg_count = 0;
    double base_s, base_v;
    color_base_sv(attrs.color, base_s, base_v);
    const double polyp_hue = hue_band(attrs.color).center + p.hue_jitter;

    const double fa = std::cos(p.fold_angle), fb = std::sin(p.fold_angle);
    const int64_t hw = int64_t(height) * width;

    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) {
            const double y = double(r) / height, x = double(c) / width;
            double phi = 0;
            const double m = shape_metric(attrs, p, r - attrs.center_row, c - attrs.center_col, phi);
            const bool inside = m <= lobe_boundary(attrs, p, phi);
            t.mask[int64_t(r) * width + c] = inside ? 1 : 0;

            double hue, sat, val;
            if (inside) {
                ++fg_count;
                hue = polyp_hue + 5.0 * (pixel_noise(seed, r, c, 1) - 0.5);
                sat = base_s + 0.08 * (pixel_noise(seed, r, c, 2) - 0.5);
                // swelling: radial shading profile
                double shade = 1.0;
                const double dome = std::max(0.0, 1.0 - m * m);
                switch (attrs.swelling) {
                    case Swelling::Raised: {
                        shade = 0.72 + 0.38 * dome;
                        // specular highlight offset toward the light
                        const double sr = (r - (attrs.center_row + p.spec_dr * attrs.radius)) / attrs.radius;
                        const double sc = (c - (attrs.center_col + p.spec_dc * attrs.radius)) / attrs.radius;
                        shade += 0.22 * std::exp(-(sr * sr + sc * sc) / 0.08);
                        break;
                    }
                    case Swelling::SlightlyRaised:
                        shade = 0.86 + 0.17 * dome;
                        break;
                    case Swelling::Sessile:
                        shade = 0.97;
                        break;
                }
                // texture: value modulation
                if (attrs.texture == Texture::Granular) {
                    shade *= 1.0 + 0.26 * (pixel_noise(seed, r / 2, c / 2, 3) - 0.5) * 2.0;
                } else if (attrs.texture == Texture::Lobulated) {
                    shade *= 1.0 + 0.10 * std::sin(p.lobe_count * phi + p.lobe_phase) * std::min(1.0, m);
                }
                val = base_v * shade;
            } else {
                // mucosa: smooth low-frequency field plus directional folds
                const double n1 = std::sin(2 * kPi * p.bg_freq1 * x + p.bg_phase1);
                const double n2 = std::sin(2 * kPi * p.bg_freq2 * y + p.bg_phase2);
                const double n3 = std::sin(2 * kPi * (p.bg_freq1 * y + p.bg_freq2 * x) * 0.5 + p.bg_phase3);
                const double folds = std::sin(2 * kPi * p.fold_freq * (fa * x + fb * y) + p.fold_phase);
                hue = kBgHueCenter + kBgHueSpread * 0.5 * (0.5 * n1 + 0.3 * n3);
                sat = 0.24 + 0.05 * n2 + 0.02 * (pixel_noise(seed, r, c, 4) - 0.5);
                val = 0.58 + 0.10 * n2 + 0.08 * folds + 0.05 * n3 +
                      0.03 * (pixel_noise(seed, r, c, 5) - 0.5);
            }
            sat = std::clamp(sat, 0.0, 1.0);
            val = std::clamp(val, 0.02, 1.0);
            double rr, gg, bb;
            hsv_to_rgb(hue, sat, val, rr, gg, bb);
            t.image[0 * hw + int64_t(r) * width + c] = static_cast<float>(rr);
            t.image[1 * hw + int64_t(r) * width + c] = static_cast<float>(gg);
            t.image[2 * hw + int64_t(r) * width + c] = static_cast<float>(bb);
        }

    if (fg_count < 1 || fg_count > hw / 2)
        throw PlacementError("mask foreground outside [1, H*W/2] pixels");

    auto caps = caption_from_attributes(attrs, derive_seed(seed, 0xCA7));
    t.caption_fg = caps.first;
    t.caption_bg = caps.second;
    return t;
}

}  // namespace ccis::synth
