#pragma once

// Small UTF-8 and evaluation-normalization helpers shared by the tokenizer,
// the data pipeline and the BLEU scorer.

#include <cctype>
#include <string>
#include <vector>

namespace alst {

// Splits a UTF-8 string into code points (each returned as a string).
// Invalid bytes are passed through as single-byte units.
inline std::vector<std::string> utf8_codepoints(const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const unsigned char b = static_cast<unsigned char>(s[i]);
        std::size_t len = 1;
        if ((b & 0x80u) == 0x00u)
            len = 1;
        else if ((b & 0xE0u) == 0xC0u)
            len = 2;
        else if ((b & 0xF0u) == 0xE0u)
            len = 3;
        else if ((b & 0xF8u) == 0xF0u)
            len = 4;
        if (i + len > s.size()) len = 1;
        for (std::size_t k = 1; k < len; ++k)
            if ((static_cast<unsigned char>(s[i + k]) & 0xC0u) != 0x80u) {
                len = k;
                break;
            }
        out.push_back(s.substr(i, len));
        i += len;
    }
    return out;
}

inline std::size_t utf8_length(const std::string& s) { return utf8_codepoints(s).size(); }

inline bool is_ascii_punct(char c) {
    return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

// Lowercases ASCII letters and removes ASCII punctuation; other bytes pass
// through untouched.
inline std::string normalize_eval(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) {
        if (is_ascii_punct(c)) continue;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

inline std::vector<std::string> split_whitespace(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace alst
