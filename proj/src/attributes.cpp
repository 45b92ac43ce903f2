#include "ccis/synth/attributes.hpp"

#include <cmath>

#include "ccis/core/errors.hpp"

namespace ccis::synth {

const std::array<std::string, kNumColors>& color_words() {
    static const std::array<std::string, kNumColors> w{"red", "pink", "pale", "dark-red"};
    return w;
}
const std::array<std::string, kNumShapes>& shape_words() {
    static const std::array<std::string, kNumShapes> w{"round", "oval", "flat", "pedunculated"};
    return w;
}
const std::array<std::string, kNumTextures>& texture_words() {
    static const std::array<std::string, kNumTextures> w{"smooth", "lobulated", "granular"};
    return w;
}
const std::array<std::string, kNumSwellings>& swelling_words() {
    static const std::array<std::string, kNumSwellings> w{"raised", "slightly-raised", "sessile"};
    return w;
}

std::string attribute_word(Color c) { return color_words()[static_cast<size_t>(c)]; }
std::string attribute_word(PolypShape s) { return shape_words()[static_cast<size_t>(s)]; }
std::string attribute_word(Texture t) { return texture_words()[static_cast<size_t>(t)]; }
std::string attribute_word(Swelling s) { return swelling_words()[static_cast<size_t>(s)]; }

const HueBand& hue_band(Color c) {
    // 30-degree bands with 10-degree guard gaps; red wraps through 0.
    static const std::array<HueBand, kNumColors> bands{{
        {355.0, 25.0, 10.0},   // red
        {285.0, 315.0, 300.0}, // pink
        {25.0, 55.0, 40.0},    // pale (tan)
        {325.0, 355.0, 340.0}, // dark-red
    }};
    return bands[static_cast<size_t>(c)];
}

bool hue_in_band(double h, Color c) {
    h = std::fmod(h, 360.0);
    if (h < 0) h += 360.0;
    const auto& b = hue_band(c);
    if (b.lo <= b.hi) return h >= b.lo && h < b.hi;
    return h >= b.lo || h < b.hi;
}

void color_base_sv(Color c, double& s, double& v) {
    switch (c) {
        case Color::Red: s = 0.78; v = 0.66; break;
        case Color::Pink: s = 0.50; v = 0.82; break;
        case Color::Pale: s = 0.38; v = 0.88; break;
        case Color::DarkRed: s = 0.82; v = 0.46; break;
    }
}

double shape_envelope(PolypShape s, double radius) {
    // Covers the base outline plus the lobulated-boundary amplitude (x1.18).
    switch (s) {
        case PolypShape::Round: return radius * 1.20;
        case PolypShape::Oval: return radius * 1.55;
        case PolypShape::Flat: return radius * 1.80;
        case PolypShape::Pedunculated: return radius * 1.75;
    }
    return radius * 2.0;
}

void validate_attributes(const PolypAttributes& a, int height, int width) {
    const int ci = static_cast<int>(a.color), si = static_cast<int>(a.shape),
              ti = static_cast<int>(a.texture), wi = static_cast<int>(a.swelling);
    if (ci < 0 || ci >= kNumColors || si < 0 || si >= kNumShapes || ti < 0 || ti >= kNumTextures ||
        wi < 0 || wi >= kNumSwellings)
        throw ConfigError("attribute enum out of vocabulary");
    if (!(a.radius >= 3.0)) throw ConfigError("polyp radius must be >= 3");
    const double env = shape_envelope(a.shape, a.radius);
    const double margin = 2.0;
    if (a.center_row - env < margin || a.center_row + env > height - 1 - margin ||
        a.center_col - env < margin || a.center_col + env > width - 1 - margin)
        throw PlacementError("polyp does not fit inside the image bounds minus a 2 pixel margin");
}

PolypAttributes sample_attributes(Rng& rng, int height, int width) {
    PolypAttributes a;
    a.color = static_cast<Color>(rng.uniform_int(kNumColors));
    a.shape = static_cast<PolypShape>(rng.uniform_int(kNumShapes));
    a.texture = static_cast<Texture>(rng.uniform_int(kNumTextures));
    a.swelling = static_cast<Swelling>(rng.uniform_int(kNumSwellings));

    const double m = std::min(height, width);
    const double rlo = std::max(3.0, 0.13 * m);
    const double rhi = std::max(rlo + 0.5, 0.21 * m);
    a.radius = rng.uniform(rlo, rhi);

    const double env = shape_envelope(a.shape, a.radius);
    const int lo_r = static_cast<int>(std::ceil(env + 2.0));
    const int hi_r = height - 1 - lo_r;
    const int lo_c = lo_r;
    const int hi_c = width - 1 - lo_c;
    if (hi_r < lo_r || hi_c < lo_c) throw ConfigError("image too small for sampled polyp radius");
    a.center_row = lo_r + static_cast<int>(rng.uniform_int(uint64_t(hi_r - lo_r + 1)));
    a.center_col = lo_c + static_cast<int>(rng.uniform_int(uint64_t(hi_c - lo_c + 1)));
    return a;
}

}  // namespace ccis::synth
