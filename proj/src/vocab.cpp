// SPDX-License-Identifier: Apache-2.0

#include "refseg/vocab.h"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "refseg/rng.h"

namespace refseg::text {

void Vocab::add(const std::string& token, const std::string& tag) {
    if (token_to_id.count(token)) return;
    token_to_id[token] = static_cast<int>(id_to_token.size());
    id_to_token.push_back(token);
    tags[token] = tag;
}

void Vocab::save(const std::string& path) const {
    nlohmann::json tokens = nlohmann::json::object();
    nlohmann::json tagobj = nlohmann::json::object();
    for (int i = 0; i < size(); i++) {
        const auto& tok = id_to_token[static_cast<size_t>(i)];
        tokens[tok] = i;
        tagobj[tok] = tag(tok);
    }
    nlohmann::json j;
    j["tokens"] = tokens;
    j["tags"] = tagobj;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocab file: " + path);
    out << j.dump(2) << "\n";
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocab file: " + path);
    nlohmann::json j;
    in >> j;
    Vocab v;
    const auto& tokens = j.at("tokens");
    v.id_to_token.resize(tokens.size());
    for (auto it = tokens.begin(); it != tokens.end(); ++it) {
        const int id = it.value().get<int>();
        if (id < 0 || id >= static_cast<int>(tokens.size()))
            throw std::runtime_error("vocab file has non-dense ids: " + path);
        v.id_to_token[static_cast<size_t>(id)] = it.key();
        v.token_to_id[it.key()] = id;
    }
    if (v.id_to_token.size() < 3 || v.id_to_token[0] != "<pad>")
        throw std::runtime_error("vocab file missing specials: " + path);
    for (auto it = j.at("tags").begin(); it != j.at("tags").end(); ++it)
        v.tags[it.key()] = it.value().get<std::string>();
    return v;
}

Vocab Vocab::builtin() {
    Vocab v;
    v.add("<pad>");
    v.add("<unk>");
    v.add("<mask>");
    for (const char* w : {"the", "in", "on", "a", "picture", "image", "scene", "find"})
        v.add(w);
    for (const char* w : {"red", "green", "blue", "yellow"}) v.add(w, "ADJ");
    for (const char* w : {"square", "circle", "triangle", "squares", "circles", "triangles",
                          "object", "objects", "shape", "shapes"})
        v.add(w, "NOUN");
    return v;
}

TokenSequence tokenize(const std::string& text, const Vocab& vocab, int max_len) {
    std::string lowered = text;
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::istringstream ss(lowered);
    std::vector<std::string> words;
    std::string w;
    while (ss >> w) words.push_back(w);
    if (words.empty()) throw std::invalid_argument("tokenize: empty text");
    TokenSequence seq;
    seq.ids.assign(static_cast<size_t>(max_len), Vocab::kPad);
    seq.valid_len = std::min<int>(max_len, static_cast<int>(words.size()));
    for (int i = 0; i < seq.valid_len; i++)
        seq.ids[static_cast<size_t>(i)] = vocab.id(words[static_cast<size_t>(i)]);
    return seq;
}

std::vector<std::pair<int, int>> chunk_entity_phrases(const TokenSequence& tokens,
                                                      const Vocab& vocab) {
    std::vector<std::pair<int, int>> spans;
    int i = 0;
    while (i < tokens.valid_len) {
        const int start = i;
        int j = i;
        while (j < tokens.valid_len && vocab.tag_of_id(tokens.ids[static_cast<size_t>(j)]) == "ADJ") j++;
        int nouns = 0;
        while (j < tokens.valid_len && vocab.tag_of_id(tokens.ids[static_cast<size_t>(j)]) == "NOUN") {
            j++;
            nouns++;
        }
        if (nouns > 0) {
            spans.emplace_back(start, j);
            i = j;
        } else {
            i = start + 1;
        }
    }
    return spans;
}

TokenSequence erase_phrase(const TokenSequence& tokens,
                           const std::vector<std::pair<int, int>>& spans, uint64_t seed) {
    if (spans.empty()) throw std::invalid_argument("erase_phrase: no spans to erase");
    Rng rng(seed);
    const auto& span = spans[rng.next_below(spans.size())];
    TokenSequence out = tokens;
    const int lo = std::max(0, span.first);
    const int hi = std::min({span.second, out.valid_len, out.length()});
    for (int i = lo; i < hi; i++) out.ids[static_cast<size_t>(i)] = Vocab::kMask;
    out.is_erased = true;
    return out;
}

} // namespace refseg::text
