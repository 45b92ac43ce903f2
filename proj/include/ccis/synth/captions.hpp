#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ccis/synth/attributes.hpp"

namespace ccis::synth {

// Foreground caption always embeds exactly the four attribute words;
// background caption describes the mucosa. Deterministic in (attrs, seed).
std::pair<std::string, std::string> caption_from_attributes(const PolypAttributes& attrs,
                                                            uint64_t seed);

const std::vector<std::string>& foreground_templates();
const std::vector<std::string>& background_templates();

// Recovers the four categorical attributes from a foreground caption written
// in the template grammar. Geometry fields of the result are zero. Throws
// ValidationError naming the missing/ambiguous slots.
PolypAttributes parse_caption_attributes(const std::string& caption_fg);

// Lowercased word split on everything but alphanumerics and '-', so hyphened
// attribute words ("dark-red", "slightly-raised") stay atomic.
std::vector<std::string> split_words(const std::string& text);

}  // namespace ccis::synth
