#pragma once

#include <array>
#include <string>

#include "ccis/core/rng.hpp"

namespace ccis::synth {

enum class Color { Red = 0, Pink, Pale, DarkRed };
enum class PolypShape { Round = 0, Oval, Flat, Pedunculated };
enum class Texture { Smooth = 0, Lobulated, Granular };
enum class Swelling { Raised = 0, SlightlyRaised, Sessile };

inline constexpr int kNumColors = 4;
inline constexpr int kNumShapes = 4;
inline constexpr int kNumTextures = 3;
inline constexpr int kNumSwellings = 3;

const std::array<std::string, kNumColors>& color_words();
const std::array<std::string, kNumShapes>& shape_words();
const std::array<std::string, kNumTextures>& texture_words();
const std::array<std::string, kNumSwellings>& swelling_words();

// Hue table. Each color class owns a disjoint 30-degree hue band; the
// background texture lives far outside all of them, so the polyp region of a
// scene can be recovered from hue alone. Bands are [lo, hi) degrees, wrapping
// at 360 (red wraps).
struct HueBand {
    double lo, hi;  // degrees; lo > hi means the band wraps through 0
    double center;
};
const HueBand& hue_band(Color c);
bool hue_in_band(double hue_deg, Color c);

// Base saturation/value used when painting a polyp of this color.
void color_base_sv(Color c, double& s, double& v);

// Background hue range (used by the scene generator; kept clear of all bands).
inline constexpr double kBgHueCenter = 150.0;
inline constexpr double kBgHueSpread = 25.0;

struct PolypAttributes {
    Color color = Color::Red;
    PolypShape shape = PolypShape::Round;
    Texture texture = Texture::Smooth;
    Swelling swelling = Swelling::Raised;
    int center_row = 0;
    int center_col = 0;
    double radius = 0.0;
};

// Largest distance from center to any polyp pixel, per shape.
double shape_envelope(PolypShape s, double radius);

// Throws PlacementError when the polyp (envelope) leaves the image bounds
// minus a 2 pixel margin, ConfigError for bad enum/radius values.
void validate_attributes(const PolypAttributes& a, int height, int width);

// Uniform over the categorical cross product; radius and center uniform over
// the placeable range for the sampled shape.
PolypAttributes sample_attributes(Rng& rng, int height, int width);

std::string attribute_word(Color c);
std::string attribute_word(PolypShape s);
std::string attribute_word(Texture t);
std::string attribute_word(Swelling s);

}  // namespace ccis::synth
