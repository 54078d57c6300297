#include "mf2/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <set>

namespace mf2 {

using nlohmann::json;

CaptionType caption_type_from_string(const std::string& s) {
    if (s == "au") return CaptionType::Au;
    if (s == "emotion") return CaptionType::Emotion;
    if (s == "key_au") return CaptionType::KeyAu;
    fail(ErrKind::UnknownCaptionType, "'" + s + "'");
}

std::string caption_type_name(CaptionType t) {
    switch (t) {
        case CaptionType::Au: return "au";
        case CaptionType::Emotion: return "emotion";
        case CaptionType::KeyAu: return "key_au";
    }
    return "?";
}

int caption_max_tokens(CaptionType t, int key_au_budget) {
    switch (t) {
        case CaptionType::Au: return 169;
        case CaptionType::Emotion: return 61;
        case CaptionType::KeyAu: return key_au_budget;
    }
    return 0;
}

std::vector<std::string> segment_text(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&]() {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        }
    }
    flush();
    return out;
}

Tokenizer Tokenizer::build_from_corpus(const std::vector<std::string>& texts) {
    std::set<std::string> uniq;
    for (const auto& t : texts)
        for (const auto& seg : segment_text(t)) uniq.insert(seg);
    Tokenizer tok;
    tok.words_.assign(uniq.begin(), uniq.end());
    for (std::size_t i = 0; i < tok.words_.size(); ++i)
        tok.word_to_id_[tok.words_[i]] = kFirstWordId + static_cast<int>(i);
    return tok;
}

Tokenizer Tokenizer::from_words(std::vector<std::string> words) {
    Tokenizer tok;
    tok.words_ = std::move(words);
    for (std::size_t i = 0; i < tok.words_.size(); ++i)
        tok.word_to_id_[tok.words_[i]] = kFirstWordId + static_cast<int>(i);
    return tok;
}

Tokenizer Tokenizer::load(const std::string& path) {
    json j = json::parse(read_text_file(path));
    Tokenizer tok;
    for (const auto& w : j.at("words")) tok.words_.push_back(w.get<std::string>());
    for (std::size_t i = 0; i < tok.words_.size(); ++i)
        tok.word_to_id_[tok.words_[i]] = kFirstWordId + static_cast<int>(i);
    return tok;
}

void Tokenizer::save(const std::string& path) const {
    json j;
    j["words"] = words_;
    write_text_file(path, j.dump());
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& seg : segment_text(text)) {
        auto it = word_to_id_.find(seg);
        if (it != word_to_id_.end()) {
            ids.push_back(it->second);
        } else {
            for (unsigned char c : seg) ids.push_back(kFirstByteId + c);
        }
    }
    return ids;
}

}  // namespace mf2
