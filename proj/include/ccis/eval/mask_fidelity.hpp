#pragma once

#include "ccis/core/array.hpp"
#include "ccis/synth/attributes.hpp"

namespace ccis::eval {

// Pixels whose hue falls in the color class's band, cleaned by a 3x3 binary
// median (majority vote; out-of-bounds neighbors count as background).
Array<uint8_t> hue_band_segment(const Array<float>& image, synth::Color color);

double iou(const Array<uint8_t>& a, const Array<uint8_t>& b);

// IoU between the hue-band segmentation and the reference mask. Throws
// ValidationError on an empty mask (the metric is undefined).
double mask_fidelity(const Array<float>& image, const Array<uint8_t>& mask, synth::Color color);

// Mean gradient magnitude of the grayscale image inside a 2-pixel band around
// the mask boundary. Used by the blur-weighting ablation check.
double boundary_smoothness(const Array<float>& image, const Array<uint8_t>& mask);

}  // namespace ccis::eval
