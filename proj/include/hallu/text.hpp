#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace hallu::text {

inline bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

/// Number of Unicode code points in a UTF-8 string (continuation bytes are skipped).
inline std::size_t utf8_length(std::string_view s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) {
        return (static_cast<unsigned char>(c) & 0xC0) != 0x80;
    }));
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

inline std::string_view trim_right(std::string_view s) {
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

/// Collapses every whitespace run into one space and trims both ends.
inline std::string normalize_whitespace(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending = false;
    for (char c : s) {
        if (is_space(c)) {
            pending = !out.empty();
            continue;
        }
        if (pending) out.push_back(' ');
        pending = false;
        out.push_back(c);
    }
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out.append(sep);
        out.append(parts[i]);
    }
    return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(sep, start);
        out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

/// Replaces every occurrence of `from` (non-empty) with `to` in one left-to-right pass,
/// so substituted text is never rescanned.
inline std::string replace_all(std::string_view s, std::string_view from, std::string_view to) {
    std::string out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(from, start);
        if (pos == std::string_view::npos) break;
        out.append(s.substr(start, pos - start));
        out.append(to);
        start = pos + from.size();
    }
    out.append(s.substr(start));
    return out;
}

struct Span {
    std::size_t start = 0;
    std::size_t end = 0;  // exclusive

    std::size_t size() const { return end - start; }
    friend bool operator==(const Span&, const Span&) = default;
};

namespace detail {

inline constexpr std::array<std::string_view, 44> kAbbreviations = {
    "Mr",   "Mrs",  "Ms",   "Dr",   "Prof", "St",   "Sr",   "Jr",   "Gen",  "Gov",  "Sen",
    "Rep",  "Lt",   "Col",  "Capt", "Sgt",  "Mt",   "Ft",   "No",   "Nos",  "vs",   "etc",
    "Inc",  "Ltd",  "Co",   "Corp", "approx", "est", "Jan", "Feb",  "Mar",  "Apr",  "Jun",
    "Jul",  "Aug",  "Sep",  "Sept", "Oct",  "Nov",  "Dec",  "Fig",  "cf",   "al",   "ca"};

inline bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }
inline bool is_opener(char c) { return c == '"' || c == '\'' || c == '(' || c == '['; }
inline bool is_upper_or_digit(char c) {
    auto u = static_cast<unsigned char>(c);
    // Non-ASCII lead bytes are accepted so accented capitals start sentences too.
    return std::isupper(u) || std::isdigit(u) || u >= 0xC0;
}

// Token immediately preceding a '.', without the dot.
inline bool is_abbreviation(std::string_view text, std::size_t dot) {
    std::size_t begin = dot;
    while (begin > 0 && !is_space(text[begin - 1]) && !is_opener(text[begin - 1])) --begin;
    auto token = text.substr(begin, dot - begin);
    if (token.empty()) return false;
    // Initials and dotted acronyms: "J", "U.S", "e.g", "i.e".
    bool dotted = true;
    for (std::size_t i = 0; i < token.size(); ++i) {
        bool letter = std::isalpha(static_cast<unsigned char>(token[i])) != 0;
        if (i % 2 == 0 ? !letter : token[i] != '.') {
            dotted = false;
            break;
        }
    }
    if (dotted) return true;
    return std::find(kAbbreviations.begin(), kAbbreviations.end(), token) != kAbbreviations.end();
}

}  // namespace detail

/// Rule-based sentence segmentation.
///
/// A boundary follows '.', '!' or '?' (plus any closing quotes or brackets) when the
/// next non-space character is an uppercase letter or a digit, optionally behind an
/// opening quote or bracket. Known abbreviations and initials do not end a sentence.
/// A blank line always ends a sentence. Returned spans are trimmed byte ranges into
/// `text` in order; empty pieces are dropped.
inline std::vector<Span> split_sentences(std::string_view text) {
    std::vector<Span> out;
    auto emit = [&](std::size_t start, std::size_t end) {
        while (start < end && is_space(text[start])) ++start;
        while (end > start && is_space(text[end - 1])) --end;
        if (end > start) out.push_back({start, end});
    };

    std::size_t start = 0;
    std::size_t i = 0;
    while (i < text.size()) {
        char c = text[i];
        if (c == '\n') {
            std::size_t j = i + 1;
            while (j < text.size() && (text[j] == ' ' || text[j] == '\t' || text[j] == '\r')) ++j;
            if (j < text.size() && text[j] == '\n') {
                emit(start, i);
                start = j + 1;
                i = j + 1;
                continue;
            }
        }
        if (c == '.' || c == '!' || c == '?') {
            std::size_t end = i + 1;
            while (end < text.size() && (text[end] == '.' || text[end] == '!' || text[end] == '?')) ++end;
            while (end < text.size() && detail::is_closer(text[end])) ++end;
            std::size_t next = end;
            while (next < text.size() && is_space(text[next])) ++next;
            bool has_space = next > end;
            std::size_t probe = next;
            if (probe < text.size() && detail::is_opener(text[probe])) ++probe;
            bool boundary = has_space && probe < text.size() && detail::is_upper_or_digit(text[probe]);
            if (boundary && c == '.' && end == i + 1 && detail::is_abbreviation(text, i)) boundary = false;
            if (boundary) {
                emit(start, end);
                start = next;
                i = next;
                continue;
            }
            i = end;
            continue;
        }
        ++i;
    }
    emit(start, text.size());
    return out;
}

}  // namespace hallu::text
