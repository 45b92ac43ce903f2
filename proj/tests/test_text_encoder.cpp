#include <doctest.h>

#include "ccis/text/text_encoder.hpp"
#include "test_util.hpp"

using namespace ccis;
using namespace ccis::text;

TEST_CASE("tokenize: specials, counts, determinism, truncation") {
    const auto& vocab = Vocabulary::builtin();

    const auto empty = tokenize("", vocab);
    CHECK(empty.ids[0] == kBosId);
    CHECK(empty.ids[1] == kEosId);
    CHECK(empty.ids[2] == kPadId);
    CHECK(empty.length == 2);
    CHECK(empty.empty_prompt());

    const auto t = tokenize("red round polyp", vocab);
    CHECK(t.length == 5);  // BOS + 3 words + EOS
    CHECK(t.ids[0] == kBosId);
    CHECK(t.ids[4] == kEosId);
    for (int j = 5; j < 32; ++j) CHECK(t.ids[static_cast<size_t>(j)] == kPadId);
    int eos_count = 0;
    for (int id : t.ids) eos_count += id == kEosId ? 1 : 0;
    CHECK(eos_count == 1);
    CHECK(!t.empty_prompt());

    const auto t2 = tokenize("red round polyp", vocab);
    CHECK(t.ids == t2.ids);

    // unknown words map to UNK, not errors
    const auto u = tokenize("qwertyuiop polyp", vocab);
    CHECK(u.ids[1] == kUnkId);
    CHECK(u.ids[2] != kUnkId);

    // truncation to max_len-2 words with EOS preserved
    std::string longcap;
    for (int i = 0; i < 60; ++i) longcap += "polyp ";
    const auto lt = tokenize(longcap, vocab);
    CHECK(lt.length == 32);
    CHECK(lt.ids[31] == kEosId);

    CHECK_THROWS_AS(tokenize(std::string(600, 'a'), vocab), ValidationError);

    // vocabulary file round trip, line index = id
    testutil::TempDir tmp("vocab");
    const auto path = (tmp.path / "vocab.txt").string();
    vocab.save(path);
    const auto loaded = Vocabulary::load(path);
    CHECK(loaded.size() == vocab.size());
    CHECK(loaded.tokens() == vocab.tokens());
    CHECK(loaded.id_of("red") == vocab.id_of("red"));
}

TEST_CASE("text encoder: frozen determinism, PAD rows, empty prompt, asset round trip") {
    const auto& vocab = Vocabulary::builtin();
    TextEncoder te;
    te.init_from_seed(vocab.size());

    const auto tok = tokenize("a red round polyp", vocab);
    const auto e1 = te.encode<float>(tok);
    const auto e2 = te.encode<float>(tok);
    CHECK(e1.matrix.v == e2.matrix.v);
    CHECK(e1.matrix.shape == Shape{32, 64});
    CHECK(!e1.null_prompt);

    // rows beyond EOS equal the PAD embedding row (so all PAD rows coincide)
    for (int j = tok.length; j < 32; ++j)
        for (int k = 0; k < 64; ++k)
            CHECK(e1.matrix[int64_t(j) * 64 + k] == e1.matrix[int64_t(31) * 64 + k]);

    const auto empty = te.encode<float>(tokenize("", vocab));
    CHECK(empty.null_prompt);
    const auto empty2 = te.encode<float>(tokenize("", vocab));
    CHECK(empty.matrix.v == empty2.matrix.v);

    // the double instantiation sees numerically identical values
    const auto ed = te.encode<double>(tok);
    for (int64_t i = 0; i < ed.matrix.numel(); ++i)
        CHECK(double(e1.matrix[i]) == ed.matrix[i]);

    // asset round trip preserves the checksum and outputs
    testutil::TempDir tmp("tenc");
    const auto path = (tmp.path / "text_encoder.bin").string();
    te.save(path);
    const auto loaded = TextEncoder::load(path);
    CHECK(loaded.checksum() == te.checksum());
    const auto e3 = loaded.encode<float>(tok);
    CHECK(e3.matrix.v == e1.matrix.v);

    // same seed, fresh instance: bit-identical parameters
    TextEncoder te2;
    te2.init_from_seed(vocab.size());
    CHECK(te2.checksum() == te.checksum());
}
