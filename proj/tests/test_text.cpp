// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>

#include "refseg/rng.h"
#include "refseg/vocab.h"

using namespace refseg;
using namespace refseg::text;

TEST_CASE("tokenize: basic, truncation, oov, empty") {
    Vocab v = Vocab::builtin();
    TokenSequence t = tokenize("The Red circle", v);
    CHECK(t.valid_len == 3);
    CHECK(t.ids[0] == v.id("the"));
    CHECK(t.ids[1] == v.id("red"));
    CHECK(t.ids[2] == v.id("circle"));
    for (int i = 3; i < 20; i++) CHECK(t.ids[static_cast<size_t>(i)] == Vocab::kPad);

    std::string long_text;
    for (int i = 0; i < 25; i++) long_text += "red ";
    TokenSequence lt = tokenize(long_text, v);
    CHECK(lt.valid_len == 20);
    CHECK(lt.length() == 20);

    TokenSequence oov = tokenize("the zebra", v);
    CHECK(oov.ids[1] == Vocab::kUnk);

    CHECK_THROWS_AS(tokenize("   ", v), std::invalid_argument);
}

TEST_CASE("chunker: ADJ* NOUN+ maximal runs") {
    Vocab v = Vocab::builtin();
    auto spans = chunk_entity_phrases(tokenize("the red circle", v), v);
    REQUIRE(spans.size() == 1);
    CHECK(spans[0] == std::pair<int, int>{1, 3});

    Vocab custom;
    custom.add("<pad>");
    custom.add("<unk>");
    custom.add("<mask>");
    custom.add("three", "ADJ");
    custom.add("persons", "NOUN");
    custom.add("playing", "OTHER");
    custom.add("baseball", "NOUN");
    auto sp = chunk_entity_phrases(tokenize("three persons playing baseball", custom), custom);
    REQUIRE(sp.size() == 2);
    CHECK(sp[0] == std::pair<int, int>{0, 2});
    CHECK(sp[1] == std::pair<int, int>{3, 4});

    auto none = chunk_entity_phrases(tokenize("the in on", v), v);
    CHECK(none.empty());
}

TEST_CASE("chunker: spans re-match the pattern and are disjoint (random property)") {
    Vocab v = Vocab::builtin();
    const std::string words[3] = {"the", "red", "circle"}; // OTHER, ADJ, NOUN
    Rng rng(321);
    for (int iter = 0; iter < 200; iter++) {
        const int n = rng.next_int(1, 12);
        std::string textstr;
        for (int i = 0; i < n; i++) {
            if (i) textstr += ' ';
            textstr += words[rng.next_below(3)];
        }
        TokenSequence t = tokenize(textstr, v);
        auto spans = chunk_entity_phrases(t, v);
        int prev_end = 0;
        for (auto [s, e] : spans) {
            CHECK(s >= prev_end);
            prev_end = e;
            CHECK(s >= 0);
            CHECK(e <= t.valid_len);
            // exact ADJ* NOUN+ shape
            int i = s;
            while (i < e && v.tag_of_id(t.ids[static_cast<size_t>(i)]) == "ADJ") i++;
            CHECK(i < e); // at least one noun
            while (i < e) {
                CHECK(v.tag_of_id(t.ids[static_cast<size_t>(i)]) == "NOUN");
                i++;
            }
            // maximal: cannot extend either way
            if (s > 0) {
                const auto tag = v.tag_of_id(t.ids[static_cast<size_t>(s - 1)]);
                CHECK(tag != "ADJ");
            }
            if (e < t.valid_len) {
                const auto tag = v.tag_of_id(t.ids[static_cast<size_t>(e)]);
                CHECK(tag != "NOUN");
            }
        }
    }
}

TEST_CASE("erase_phrase: forced choice, masking, length preservation") {
    Vocab v = Vocab::builtin();
    TokenSequence t = tokenize("the red circle", v);
    TokenSequence e = erase_phrase(t, {{1, 3}}, 0);
    CHECK(e.is_erased);
    CHECK(e.valid_len == t.valid_len);
    CHECK(e.ids[0] == v.id("the"));
    CHECK(e.ids[1] == Vocab::kMask);
    CHECK(e.ids[2] == Vocab::kMask);
    for (int i = 3; i < 20; i++) CHECK(e.ids[static_cast<size_t>(i)] == Vocab::kPad);

    CHECK_THROWS_AS(erase_phrase(t, {}, 0), std::invalid_argument);
}

TEST_CASE("erase_phrase: uniform choice over spans (binomial bound)") {
    Vocab v = Vocab::builtin();
    TokenSequence t = tokenize("red circle blue square", v);
    int first = 0;
    const int trials = 10000;
    for (int s = 0; s < trials; s++) {
        TokenSequence e = erase_phrase(t, {{0, 2}, {2, 4}}, static_cast<uint64_t>(s));
        if (e.ids[0] == Vocab::kMask) first++;
    }
    // 3 sigma for Binomial(10000, 0.5) is 150
    CHECK(first > 5000 - 150);
    CHECK(first < 5000 + 150);
}

TEST_CASE("erase_phrase: tokens outside the span never change (random property)") {
    Vocab v = Vocab::builtin();
    Rng rng(777);
    for (int iter = 0; iter < 100; iter++) {
        TokenSequence t = tokenize("the red circle in the blue square objects", v);
        std::vector<std::pair<int, int>> spans = {{1, 3}, {5, 7}};
        TokenSequence e = erase_phrase(t, spans, rng.next_u64());
        CHECK(e.valid_len == t.valid_len);
        bool masked_first = e.ids[1] == Vocab::kMask;
        auto [s0, e0] = spans[masked_first ? 0 : 1];
        for (int i = 0; i < t.length(); i++) {
            if (i >= s0 && i < e0) CHECK(e.ids[static_cast<size_t>(i)] == Vocab::kMask);
            else CHECK(e.ids[static_cast<size_t>(i)] == t.ids[static_cast<size_t>(i)]);
        }
    }
}

TEST_CASE("vocab: specials, save/load roundtrip") {
    Vocab v = Vocab::builtin();
    CHECK(Vocab::kPad == 0);
    CHECK(v.id_to_token[0] == "<pad>");
    CHECK(Vocab::kMask != Vocab::kPad);
    CHECK(Vocab::kMask != Vocab::kUnk);
    const std::string path = "/tmp/refseg_vocab_test.json";
    v.save(path);
    Vocab w = Vocab::load(path);
    CHECK(w.size() == v.size());
    CHECK(w.id("circle") == v.id("circle"));
    CHECK(w.tag("red") == "ADJ");
    CHECK(w.tag("circle") == "NOUN");
}
