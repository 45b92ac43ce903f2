#pragma once

#include <string>
#include <vector>

namespace ccis::text {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

// Fixed-length token sequence: [BOS, words..., EOS, PAD...].
struct TokenSeq {
    std::vector<int> ids;
    int length = 0;  // count of non-PAD tokens (BOS and EOS included)
    bool empty_prompt() const { return length <= 2; }
};

// Closed vocabulary: specials first, then the sorted unique words of the
// caption template grammar plus the attribute vocabulary. Line index = id.
class Vocabulary {
  public:
    static const Vocabulary& builtin();
    static Vocabulary from_lines(const std::vector<std::string>& lines);

    int id_of(const std::string& word) const;  // kUnkId when unknown
    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

  private:
    std::vector<std::string> tokens_;
};

// Lowercase, split on non-alphanumerics except '-', map through the
// vocabulary, truncate to max_len-2 words keeping EOS. Deterministic.
TokenSeq tokenize(const std::string& caption, const Vocabulary& vocab, int max_len = 32);

}  // namespace ccis::text
