#include "ccis/text/tokenizer.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "ccis/core/errors.hpp"
#include "ccis/synth/captions.hpp"

namespace ccis::text {

Vocabulary Vocabulary::from_lines(const std::vector<std::string>& lines) {
    Vocabulary v;
    v.tokens_ = lines;
    return v;
}

const Vocabulary& Vocabulary::builtin() {
    static const Vocabulary v = [] {
        std::set<std::string> words;
        auto add_words = [&](const std::string& s) {
            for (const auto& w : synth::split_words(s)) words.insert(w);
        };
        for (const auto& t : synth::foreground_templates()) {
            std::string s = t;
            for (const char* slot : {"{color}", "{shape}", "{texture}", "{swelling}"}) {
                size_t pos;
                while ((pos = s.find(slot)) != std::string::npos) s.replace(pos, strlen(slot), " ");
            }
            add_words(s);
        }
        for (const auto& t : synth::background_templates()) add_words(t);
        for (const auto& w : synth::color_words()) words.insert(w);
        for (const auto& w : synth::shape_words()) words.insert(w);
        for (const auto& w : synth::texture_words()) words.insert(w);
        for (const auto& w : synth::swelling_words()) words.insert(w);

        std::vector<std::string> lines{"<pad>", "<bos>", "<eos>", "<unk>"};
        lines.insert(lines.end(), words.begin(), words.end());
        return from_lines(lines);
    }();
    return v;
}

int Vocabulary::id_of(const std::string& word) const {
    const auto it = std::find(tokens_.begin(), tokens_.end(), word);
    return it == tokens_.end() ? kUnkId : static_cast<int>(it - tokens_.begin());
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write vocabulary: " + path);
    for (const auto& t : tokens_) f << t << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read vocabulary: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) lines.push_back(line);
    return from_lines(lines);
}

TokenSeq tokenize(const std::string& caption, const Vocabulary& vocab, int max_len) {
    if (caption.size() >= 512) throw ValidationError("caption exceeds 511 characters");
    const auto words = synth::split_words(caption);
    TokenSeq seq;
    seq.ids.assign(static_cast<size_t>(max_len), kPadId);
    seq.ids[0] = kBosId;
    int pos = 1;
    for (const auto& w : words) {
        if (pos >= max_len - 1) break;  // keep room for EOS
        seq.ids[static_cast<size_t>(pos++)] = vocab.id_of(w);
    }
    seq.ids[static_cast<size_t>(pos++)] = kEosId;
    seq.length = pos;
    return seq;
}

}  // namespace ccis::text
