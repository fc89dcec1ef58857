#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "hallu/date.hpp"
#include "hallu/error.hpp"
#include "hallu/text.hpp"

namespace hallu::corpus {

using json = nlohmann::json;

struct Reference {
    std::string ref_id;
    std::optional<Date> date;
    std::optional<Date> access_date;
    std::optional<Date> archive_date;

    bool has_any_date() const { return date || access_date || archive_date; }

    /// True iff at least one date is present and every present date is strictly after `cutoff`.
    bool recent_after(const Date& cutoff) const {
        if (!has_any_date()) return false;
        for (const auto* d : {&date, &access_date, &archive_date}) {
            if (*d && !(**d > cutoff)) return false;
        }
        return true;
    }
};

struct Section {
    std::string heading;
    std::vector<std::string> paragraphs;
};

struct ArticleSnapshot {
    std::string article_id;
    std::string title;
    Date created_at;
    std::vector<Section> sections;
    std::vector<Reference> references;

    const Reference* find_reference(std::string_view id) const {
        auto it = std::find_if(references.begin(), references.end(),
                               [&](const Reference& r) { return r.ref_id == id; });
        return it == references.end() ? nullptr : &*it;
    }
};

struct SentenceCandidate {
    std::string candidate_id;
    std::string article_id;
    std::string title;
    std::string sentence;
    std::string section_context;  // section text preceding the sentence
    std::string passage;          // full cleaned text of the sentence's section
    std::vector<std::string> reference_ids;
    std::size_t char_length = 0;
    std::size_t section_index = 0;
    std::size_t offset = 0;  // byte offset of the sentence inside `passage`
};

// ---------------------------------------------------------------------------
// Record parsing

namespace detail {

inline std::optional<Date> optional_date(const json& obj, const char* key, const std::string& where,
                                         Diagnostics& diags) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return std::nullopt;
    if (it->is_string()) {
        if (auto d = Date::parse(it->get<std::string>())) return d;
    }
    diags.push_back({where, fmt::format("malformed {} '{}', treated as missing", key, it->dump())});
    return std::nullopt;
}

}  // namespace detail

/// Parses one `articles.jsonl` object. A malformed or missing `created_at`, or a missing
/// id/section list, rejects the record with a diagnostic.
inline std::optional<ArticleSnapshot> parse_snapshot(const json& obj, Diagnostics& diags) {
    std::string where = obj.is_object() && obj.contains("article_id") && obj["article_id"].is_string()
                            ? obj["article_id"].get<std::string>()
                            : std::string("<unknown article>");
    auto reject = [&](std::string msg) -> std::optional<ArticleSnapshot> {
        diags.push_back({where, std::move(msg)});
        return std::nullopt;
    };
    if (!obj.is_object()) return reject("record is not a JSON object");
    if (!obj.contains("article_id") || !obj["article_id"].is_string()) return reject("missing article_id");

    ArticleSnapshot snap;
    snap.article_id = obj["article_id"].get<std::string>();
    snap.title = obj.value("title", std::string{});

    auto created = obj.find("created_at");
    if (created == obj.end() || !created->is_string()) return reject("missing created_at");
    auto date = Date::parse(created->get<std::string>());
    if (!date) return reject(fmt::format("malformed created_at '{}'", created->get<std::string>()));
    snap.created_at = *date;

    auto sections = obj.find("sections");
    if (sections == obj.end() || !sections->is_array() || sections->empty()) return reject("no sections");
    for (const auto& s : *sections) {
        Section sec;
        sec.heading = s.value("heading", std::string{});
        if (auto p = s.find("paragraphs"); p != s.end() && p->is_array()) {
            for (const auto& para : *p) {
                if (para.is_string()) sec.paragraphs.push_back(para.get<std::string>());
            }
        }
        snap.sections.push_back(std::move(sec));
    }

    if (auto refs = obj.find("references"); refs != obj.end() && refs->is_array()) {
        for (const auto& r : *refs) {
            if (!r.contains("ref_id") || !r["ref_id"].is_string()) {
                diags.push_back({where, "reference without ref_id ignored"});
                continue;
            }
            Reference ref;
            ref.ref_id = r["ref_id"].get<std::string>();
            std::string rw = where + "/" + ref.ref_id;
            ref.date = detail::optional_date(r, "date", rw, diags);
            ref.access_date = detail::optional_date(r, "access_date", rw, diags);
            ref.archive_date = detail::optional_date(r, "archive_date", rw, diags);
            snap.references.push_back(std::move(ref));
        }
    }
    return snap;
}

inline json to_json(const SentenceCandidate& c) {
    return json{{"candidate_id", c.candidate_id},   {"article_id", c.article_id},
                {"title", c.title},                 {"sentence", c.sentence},
                {"section_context", c.section_context}, {"passage", c.passage},
                {"reference_ids", c.reference_ids}, {"char_length", c.char_length},
                {"section_index", c.section_index}, {"offset", c.offset}};
}

inline SentenceCandidate candidate_from_json(const json& j) {
    SentenceCandidate c;
    c.candidate_id = j.at("candidate_id").get<std::string>();
    c.article_id = j.at("article_id").get<std::string>();
    c.title = j.value("title", std::string{});
    c.sentence = j.at("sentence").get<std::string>();
    c.section_context = j.value("section_context", std::string{});
    c.passage = j.value("passage", c.sentence);
    c.reference_ids = j.value("reference_ids", std::vector<std::string>{});
    c.char_length = j.value("char_length", text::utf8_length(c.sentence));
    c.section_index = j.value("section_index", std::size_t{0});
    c.offset = j.value("offset", std::size_t{0});
    return c;
}

// ---------------------------------------------------------------------------
// Wiki markup

/// A paragraph with intra-wiki links resolved to their display text and named
/// reference markers removed. Positions are byte offsets into `clean`.
struct MarkedText {
    std::string clean;
    std::vector<text::Span> links;
    std::vector<std::pair<std::size_t, std::string>> refs;
};

/// Parses `[[Target]]`, `[[Target|shown]]` and `<ref name="id"/>` markup. Returns
/// nullopt with a message in `error` for unbalanced or unsupported markup.
inline std::optional<MarkedText> parse_markup(std::string_view raw, std::string& error) {
    MarkedText out;
    std::size_t i = 0;
    while (i < raw.size()) {
        if (raw.compare(i, 2, "[[") == 0) {
            auto close = raw.find("]]", i + 2);
            if (close == std::string_view::npos) {
                error = "unterminated [[ link";
                return std::nullopt;
            }
            auto inner = raw.substr(i + 2, close - i - 2);
            if (inner.find("[[") != std::string_view::npos) {
                error = "nested [[ link";
                return std::nullopt;
            }
            auto bar = inner.rfind('|');
            auto shown = bar == std::string_view::npos ? inner : inner.substr(bar + 1);
            std::size_t start = out.clean.size();
            out.clean.append(shown);
            out.links.push_back({start, out.clean.size()});
            i = close + 2;
            continue;
        }
        if (raw.compare(i, 2, "]]") == 0) {
            error = "stray ]]";
            return std::nullopt;
        }
        if (raw.compare(i, 4, "<ref") == 0) {
            auto close = raw.find("/>", i);
            auto next_open = raw.find('<', i + 1);
            if (close == std::string_view::npos || (next_open != std::string_view::npos && next_open < close)) {
                error = "unsupported or unterminated <ref> markup";
                return std::nullopt;
            }
            auto tag = raw.substr(i + 4, close - i - 4);
            auto name = tag.find("name=");
            if (name == std::string_view::npos) {
                error = "<ref> without name";
                return std::nullopt;
            }
            auto value = text::trim(tag.substr(name + 5));
            if (!value.empty() && (value.front() == '"' || value.front() == '\'')) {
                char q = value.front();
                auto end = value.find(q, 1);
                if (end == std::string_view::npos) {
                    error = "unterminated <ref> name";
                    return std::nullopt;
                }
                value = value.substr(1, end - 1);
            }
            if (value.empty()) {
                error = "<ref> with empty name";
                return std::nullopt;
            }
            out.refs.emplace_back(out.clean.size(), std::string(value));
            i = close + 2;
            continue;
        }
        out.clean.push_back(raw[i]);
        ++i;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Filters

enum RejectReason : std::uint8_t {
    kAccepted = 0,
    kTooShort = 1 << 0,
    kNoReference = 1 << 1,
    kHasLink = 1 << 2,
    kNotRecent = 1 << 3,
};

inline constexpr std::size_t kMinSentenceChars = 50;

inline std::string describe(std::uint8_t reasons) {
    std::vector<std::string> parts;
    if (reasons & kTooShort) parts.emplace_back("length");
    if (reasons & kNoReference) parts.emplace_back("reference");
    if (reasons & kHasLink) parts.emplace_back("link");
    if (reasons & kNotRecent) parts.emplace_back("date");
    return parts.empty() ? "accepted" : text::join(parts, ",");
}

/// Retains exactly the snapshots created strictly after `cutoff`.
inline std::vector<ArticleSnapshot> filter_recent_articles(std::span<const ArticleSnapshot> snapshots,
                                                           const Date& cutoff) {
    std::vector<ArticleSnapshot> out;
    for (const auto& s : snapshots) {
        if (s.created_at > cutoff) out.push_back(s);
    }
    return out;
}

/// Parses raw records and filters them; malformed records become diagnostics.
inline std::vector<ArticleSnapshot> filter_recent_articles(std::span<const json> records, const Date& cutoff,
                                                           Diagnostics& diags) {
    std::vector<ArticleSnapshot> parsed;
    for (const auto& r : records) {
        if (auto s = parse_snapshot(r, diags)) parsed.push_back(std::move(*s));
    }
    return filter_recent_articles(std::span<const ArticleSnapshot>(parsed), cutoff);
}

/// One sentence of a parsed section before filtering.
struct SentenceView {
    std::string text;
    std::size_t offset = 0;
    std::vector<std::string> reference_ids;
    bool has_link = false;
};

struct ParsedSection {
    std::string passage;
    std::vector<SentenceView> sentences;
};

/// Cleans every paragraph of a section, joins them with newlines and segments each
/// paragraph into sentences. Reference markers attach to the sentence whose span (up to
/// the start of the next sentence) contains them; wiki-style refs follow punctuation.
inline ParsedSection parse_section(const ArticleSnapshot& snap, std::size_t section_index, Diagnostics& diags) {
    ParsedSection out;
    const auto& sec = snap.sections[section_index];
    for (std::size_t p = 0; p < sec.paragraphs.size(); ++p) {
        std::string error;
        auto marked = parse_markup(sec.paragraphs[p], error);
        if (!marked) {
            diags.push_back({fmt::format("{}/s{}/p{}", snap.article_id, section_index, p),
                             fmt::format("paragraph skipped: {}", error)});
            continue;
        }
        if (!out.passage.empty()) out.passage.push_back('\n');
        const std::size_t base = out.passage.size();
        out.passage.append(marked->clean);

        auto spans = text::split_sentences(marked->clean);
        for (std::size_t s = 0; s < spans.size(); ++s) {
            SentenceView view;
            view.text = marked->clean.substr(spans[s].start, spans[s].size());
            view.offset = base + spans[s].start;
            const std::size_t own_begin = s == 0 ? 0 : spans[s].start;
            const std::size_t own_end = s + 1 < spans.size() ? spans[s + 1].start : marked->clean.size() + 1;
            for (const auto& [pos, id] : marked->refs) {
                if (pos >= own_begin && pos < own_end &&
                    std::find(view.reference_ids.begin(), view.reference_ids.end(), id) == view.reference_ids.end())
                    view.reference_ids.push_back(id);
            }
            for (const auto& link : marked->links) {
                if (link.start < spans[s].end && link.end > spans[s].start) view.has_link = true;
            }
            out.sentences.push_back(std::move(view));
        }
    }
    return out;
}

/// Bitmask of failed filters for one sentence; kAccepted when it qualifies.
inline std::uint8_t check_sentence(const SentenceView& s, const ArticleSnapshot& snap, const Date& cutoff,
                                   Diagnostics* diags = nullptr) {
    std::uint8_t reasons = kAccepted;
    if (text::utf8_length(s.text) <= kMinSentenceChars) reasons |= kTooShort;
    if (s.reference_ids.empty()) reasons |= kNoReference;
    if (s.has_link) reasons |= kHasLink;
    for (const auto& id : s.reference_ids) {
        const Reference* ref = snap.find_reference(id);
        if (!ref) {
            if (diags) diags->push_back({snap.article_id, fmt::format("unresolved reference '{}'", id)});
            reasons |= kNotRecent;
        } else if (!ref->recent_after(cutoff)) {
            reasons |= kNotRecent;
        }
    }
    return reasons;
}

/// Every sentence of `snap` passing the length, reference, link and recency filters,
/// in (section, offset) order.
inline std::vector<SentenceCandidate> extract_candidates(const ArticleSnapshot& snap, const Date& cutoff,
                                                         Diagnostics& diags) {
    std::vector<SentenceCandidate> out;
    for (std::size_t si = 0; si < snap.sections.size(); ++si) {
        auto section = parse_section(snap, si, diags);
        for (const auto& s : section.sentences) {
            if (check_sentence(s, snap, cutoff, &diags) != kAccepted) continue;
            SentenceCandidate c;
            c.candidate_id = fmt::format("{}:{}:{}", snap.article_id, si, s.offset);
            c.article_id = snap.article_id;
            c.title = snap.title;
            c.sentence = s.text;
            c.section_context = std::string(text::trim_right(std::string_view(section.passage).substr(0, s.offset)));
            c.passage = section.passage;
            c.reference_ids = s.reference_ids;
            c.char_length = text::utf8_length(s.text);
            c.section_index = si;
            c.offset = s.offset;
            out.push_back(std::move(c));
        }
    }
    return out;
}

/// Canonical ordering: (article_id, section_index, offset).
inline void canonicalize(std::vector<SentenceCandidate>& cs) {
    std::sort(cs.begin(), cs.end(), [](const SentenceCandidate& a, const SentenceCandidate& b) {
        return std::tie(a.article_id, a.section_index, a.offset) < std::tie(b.article_id, b.section_index, b.offset);
    });
}

/// Full harvest over raw records: parse, recency filter, extract, canonical order.
inline std::vector<SentenceCandidate> harvest(std::span<const json> records, const Date& cutoff, Diagnostics& diags) {
    std::vector<SentenceCandidate> out;
    for (const auto& snap : filter_recent_articles(records, cutoff, diags)) {
        auto cs = extract_candidates(snap, cutoff, diags);
        out.insert(out.end(), std::make_move_iterator(cs.begin()), std::make_move_iterator(cs.end()));
    }
    canonicalize(out);
    return out;
}

}  // namespace hallu::corpus
