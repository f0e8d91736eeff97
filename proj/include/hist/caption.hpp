#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "hist/errors.hpp"
#include "hist/rng.hpp"

namespace hist {

// Closed lexicons shared by the caption grammar and the rule parser.
namespace lexicon {
inline const std::vector<std::string> kNouns = {"cat", "dog", "car", "ball", "cup", "lamp", "tree", "bird"};
inline const std::vector<std::string> kColors = {"red", "blue", "green", "yellow", "purple", "orange"};
inline const std::vector<std::string> kSizes = {"small", "large"};
inline const std::vector<std::string> kDeterminers = {"the", "a"};
inline const std::string kConnective = "and";

inline bool contains(const std::vector<std::string>& pool, const std::string& w) {
    return std::find(pool.begin(), pool.end(), w) != pool.end();
}
}  // namespace lexicon

struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kMask = 2;

    std::vector<std::string> words;  // line number = id
    std::unordered_map<std::string, int> index;

    size_t size() const { return words.size(); }

    bool has(const std::string& w) const { return index.count(w) > 0; }

    int id(const std::string& w) const {
        auto it = index.find(w);
        if (it == index.end()) throw ParseError("unknown token '" + w + "'");
        return it->second;
    }

    void push(const std::string& w) {
        if (has(w)) throw DataError("duplicate vocab token '" + w + "'");
        index.emplace(w, static_cast<int>(words.size()));
        words.push_back(w);
    }

    static Vocab standard() {
        Vocab v;
        v.push("[PAD]");
        v.push("[CLS]");
        v.push("[MASK]");
        for (const auto& w : lexicon::kDeterminers) v.push(w);
        v.push(lexicon::kConnective);
        for (const auto& w : lexicon::kSizes) v.push(w);
        for (const auto& w : lexicon::kColors) v.push(w);
        for (const auto& w : lexicon::kNouns) v.push(w);
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw DataError("cannot open vocab file for write: " + path);
        for (const auto& w : words) os << w << "\n";
    }

    static Vocab load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw DataError("cannot open vocab file: " + path);
        Vocab v;
        std::string line;
        while (std::getline(is, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            v.push(line);
        }
        if (v.size() < 3 || v.words[0] != "[PAD]" || v.words[1] != "[CLS]" || v.words[2] != "[MASK]")
            throw DataError("vocab file must start with [PAD], [CLS], [MASK]: " + path);
        return v;
    }
};

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

// Padded token ids with the leading [CLS]; n_real counts [CLS] plus words.
struct TokenSequence {
    std::vector<int> ids;
    size_t n_real = 0;
};

inline TokenSequence tokenize(const std::string& text, const Vocab& vocab, size_t max_tokens) {
    std::vector<std::string> words = split_words(text);
    if (words.size() + 1 > max_tokens)
        throw DataError("text '" + text + "' needs " + std::to_string(words.size() + 1) +
                        " tokens but max_tokens is " + std::to_string(max_tokens));
    TokenSequence seq;
    seq.ids.assign(max_tokens, Vocab::kPad);
    seq.ids[0] = Vocab::kCls;
    for (size_t i = 0; i < words.size(); ++i) seq.ids[i + 1] = vocab.id(words[i]);
    seq.n_real = words.size() + 1;
    return seq;
}

// ---------------------------------------------------------------------------
// Phrase parsing. Grammar captions are conjunctions of phrases shaped
// det? size? color? noun, so a small staged scanner is an exact parser.
// ---------------------------------------------------------------------------

struct PhraseRecord {
    std::string text;     // C_i, maximal modifier span including determiner
    std::string subject;  // S_i, the head noun
    int source_caption_index = 0;
};

inline std::vector<PhraseRecord> parse_caption(const std::string& caption, int source_caption_index = 0) {
    std::vector<PhraseRecord> out;
    std::vector<std::string> words = split_words(caption);
    std::vector<std::string> span;
    int stage = 0;  // 0 start, 1 after det, 2 after size, 3 after color
    bool expect_phrase = true;

    auto fail = [&](const std::string& why) { throw ParseError("cannot parse caption '" + caption + "': " + why); };

    for (const std::string& w : words) {
        if (w == lexicon::kConnective) {
            if (expect_phrase || !span.empty()) fail("connective '" + w + "' without a completed phrase");
            expect_phrase = true;
            continue;
        }
        if (!expect_phrase) fail("expected connective before '" + w + "'");
        if (lexicon::contains(lexicon::kDeterminers, w)) {
            if (stage > 0) fail("determiner '" + w + "' after modifiers");
            span.push_back(w);
            stage = 1;
        } else if (lexicon::contains(lexicon::kSizes, w)) {
            if (stage > 1) fail("size '" + w + "' out of order");
            span.push_back(w);
            stage = 2;
        } else if (lexicon::contains(lexicon::kColors, w)) {
            if (stage > 2) fail("color '" + w + "' out of order");
            span.push_back(w);
            stage = 3;
        } else if (lexicon::contains(lexicon::kNouns, w)) {
            span.push_back(w);
            std::string text;
            for (size_t i = 0; i < span.size(); ++i) text += (i ? " " : "") + span[i];
            out.push_back(PhraseRecord{text, w, source_caption_index});
            span.clear();
            stage = 0;
            expect_phrase = false;
        } else {
            fail("token '" + w + "' not in any lexicon");
        }
    }
    if (!span.empty()) fail("phrase ends without a noun");
    if (expect_phrase && !out.empty()) fail("trailing connective");
    return out;
}

// ---------------------------------------------------------------------------
// Data pair creation. For every phrase, pick one sibling with a different
// subject uniformly at random; phrases with no such sibling yield nothing.
// ---------------------------------------------------------------------------

struct DataTuple {
    std::string scene_id;
    PhraseRecord c_i;
    PhraseRecord c_j;
    std::string c_ij;
};

inline std::string compose_phrases(const std::string& a, const std::string& b) {
    return a + " " + lexicon::kConnective + " " + b;
}

inline std::vector<DataTuple> build_pairs(const std::string& scene_id, const std::vector<PhraseRecord>& phrases,
                                          uint64_t rng_seed) {
    Rng rng(rng_seed);
    std::vector<DataTuple> out;
    for (size_t i = 0; i < phrases.size(); ++i) {
        std::vector<size_t> candidates;
        for (size_t j = 0; j < phrases.size(); ++j)
            if (j != i && phrases[j].subject != phrases[i].subject) candidates.push_back(j);
        if (candidates.empty()) continue;
        const size_t j = candidates[uniform_index(rng, candidates.size())];
        out.push_back(DataTuple{scene_id, phrases[i], phrases[j],
                                compose_phrases(phrases[i].text, phrases[j].text)});
    }
    return out;
}

}  // namespace hist
