// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_VOCAB_H
#define REFSEG_VOCAB_H

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace refseg::text {

// Word-level vocabulary plus a tiny POS lexicon (ADJ/NOUN/OTHER) used by the
// phrase chunker. ids are dense; 0/1/2 are reserved specials.
struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kMask = 2;

    std::vector<std::string> id_to_token; // [0]="<pad>", [1]="<unk>", [2]="<mask>"
    std::unordered_map<std::string, int> token_to_id;
    std::unordered_map<std::string, std::string> tags; // token -> ADJ|NOUN|OTHER

    int size() const { return static_cast<int>(id_to_token.size()); }

    int id(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? kUnk : it->second;
    }

    std::string tag(const std::string& token) const {
        auto it = tags.find(token);
        return it == tags.end() ? "OTHER" : it->second;
    }

    std::string tag_of_id(int tid) const {
        if (tid < 3 || tid >= size()) return "OTHER";
        return tag(id_to_token[static_cast<size_t>(tid)]);
    }

    void add(const std::string& token, const std::string& tag = "OTHER");

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

    // The template vocabulary of the synthetic benchmark.
    static Vocab builtin();
};

struct TokenSequence {
    std::vector<int> ids; // fixed length L, padded with kPad
    int valid_len = 0;
    bool is_erased = false;

    int length() const { return static_cast<int>(ids.size()); }
};

// lowercase, whitespace split, truncate to max_len, pad, OOV -> <unk>.
// Rejects empty/whitespace-only text.
TokenSequence tokenize(const std::string& text, const Vocab& vocab, int max_len = 20);

// Maximal ADJ* NOUN+ runs over the valid tokens; disjoint, sorted.
std::vector<std::pair<int, int>> chunk_entity_phrases(const TokenSequence& tokens,
                                                      const Vocab& vocab);

// Replaces every token of one uniformly chosen span with <mask>. Length and
// valid_len are untouched. Rejects an empty span list.
TokenSequence erase_phrase(const TokenSequence& tokens,
                           const std::vector<std::pair<int, int>>& spans, uint64_t seed);

} // namespace refseg::text

#endif // REFSEG_VOCAB_H
