#pragma once

// Whitespace + punctuation word tokenizer with byte fallback. A caption's
// token budget is counted in segments (each punctuation mark is its own
// segment); encoding maps in-vocabulary segments to single ids and spells
// out-of-vocabulary segments byte by byte.

#include <map>
#include <string>
#include <vector>

#include "mf2/common.hpp"

namespace mf2 {

enum class CaptionType { Au, Emotion, KeyAu };

CaptionType caption_type_from_string(const std::string& s);  // throws UnknownCaptionType
std::string caption_type_name(CaptionType t);

// Per-type caption token budgets (segments): AU 169, emotion 61; key-AU is
// configurable and defaults to the AU budget.
int caption_max_tokens(CaptionType t, int key_au_budget = 169);

// Lowercased segments; punctuation split off as single-char segments.
std::vector<std::string> segment_text(const std::string& text);

class Tokenizer {
public:
    static constexpr int kPadId = 0;
    static constexpr int kClsId = 1;
    static constexpr int kMaskId = 2;
    static constexpr int kFirstByteId = 3;  // ids 3..258 are byte fallback
    static constexpr int kFirstWordId = 259;

    Tokenizer() = default;

    // Vocabulary = specials + bytes + sorted unique segments of the corpus.
    static Tokenizer build_from_corpus(const std::vector<std::string>& texts);
    static Tokenizer from_words(std::vector<std::string> words);

    static Tokenizer load(const std::string& path);
    void save(const std::string& path) const;

    int vocab_size() const { return kFirstWordId + static_cast<int>(words_.size()); }
    bool has_word(const std::string& w) const { return word_to_id_.count(w) > 0; }

    // Ids without CLS; OOV segments expand to byte tokens.
    std::vector<int> encode(const std::string& text) const;

    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> word_to_id_;
};

}  // namespace mf2
