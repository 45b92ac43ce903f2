#include "ccis/synth/captions.hpp"

#include <cctype>
#include <sstream>

#include "ccis/core/errors.hpp"

namespace ccis::synth {

const std::vector<std::string>& foreground_templates() {
    // Slot words are the only attribute-vocabulary words in any template.
    static const std::vector<std::string> t{
        "a {color} {shape} polyp with a {texture} surface that appears {swelling}",
        "{shape} polyp, {color} in tone, with a {texture} surface and a {swelling} profile",
        "the lesion is {color} and {shape} with a {texture} mucosal cap and looks {swelling}",
        "one {swelling} {shape} growth of {color} hue showing a {texture} pattern",
        "a {texture} {color} polyp of {shape} outline and {swelling} elevation",
    };
    return t;
}

const std::vector<std::string>& background_templates() {
    static const std::vector<std::string> t{
        "surrounding mucosa with gentle folds and scattered specular highlights",
        "background of clean colonic wall under even illumination",
        "normal mucosal background with faint vascular markings",
        "quiet background mucosa with subtle ridges",
    };
    return t;
}

namespace {
std::string fill(std::string tpl, const PolypAttributes& a) {
    const std::pair<std::string, std::string> subs[] = {
        {"{color}", attribute_word(a.color)},
        {"{shape}", attribute_word(a.shape)},
        {"{texture}", attribute_word(a.texture)},
        {"{swelling}", attribute_word(a.swelling)},
    };
    for (const auto& [key, word] : subs) {
        const size_t pos = tpl.find(key);
        if (pos != std::string::npos) tpl.replace(pos, key.size(), word);
    }
    return tpl;
}
}  // namespace

std::pair<std::string, std::string> caption_from_attributes(const PolypAttributes& attrs,
                                                            uint64_t seed) {
    Rng rng(derive_seed(seed, 0xcab));
    const auto& fgs = foreground_templates();
    const auto& bgs = background_templates();
    const auto& fg = fgs[rng.uniform_int(fgs.size())];
    const auto& bg = bgs[rng.uniform_int(bgs.size())];
    return {fill(fg, attrs), bg};
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || ch == '-') {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

PolypAttributes parse_caption_attributes(const std::string& caption_fg) {
    const auto words = split_words(caption_fg);
    auto find_one = [&](const auto& vocab, const char* slot) -> int {
        int found = -1;
        for (size_t i = 0; i < vocab.size(); ++i)
            for (const auto& w : words)
                if (w == vocab[i]) {
                    if (found >= 0 && found != int(i))
                        throw ValidationError(std::string("caption has conflicting ") + slot + " words");
                    found = int(i);
                }
        if (found < 0)
            throw ValidationError(std::string("caption is missing the ") + slot + " attribute slot");
        return found;
    };
    PolypAttributes a;
    a.color = static_cast<Color>(find_one(color_words(), "color"));
    a.shape = static_cast<PolypShape>(find_one(shape_words(), "shape"));
    a.texture = static_cast<Texture>(find_one(texture_words(), "texture"));
    a.swelling = static_cast<Swelling>(find_one(swelling_words(), "swelling"));
    return a;
}

}  // namespace ccis::synth
