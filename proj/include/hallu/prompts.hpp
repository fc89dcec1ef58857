#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "hallu/corpus.hpp"
#include "hallu/error.hpp"
#include "hallu/qa.hpp"
#include "hallu/rng.hpp"
#include "hallu/templates.hpp"
#include "hallu/text.hpp"

namespace hallu::prompts {

using json = nlohmann::json;

enum class TemplateId { hub, t1, t2 };

inline constexpr std::array<TemplateId, 3> kTemplates = {TemplateId::hub, TemplateId::t1, TemplateId::t2};
inline constexpr std::array<int, 3> kChunkSizes = {350, 550, 750};
inline constexpr std::array<int, 3> kChunkCounts = {1, 3, 5};

inline std::string_view to_string(TemplateId t) {
    switch (t) {
        case TemplateId::hub: return "hub";
        case TemplateId::t1: return "t1";
        case TemplateId::t2: return "t2";
    }
    return "?";
}

inline TemplateId template_from_string(std::string_view s) {
    if (s == "hub") return TemplateId::hub;
    if (s == "t1" || s == "1") return TemplateId::t1;
    if (s == "t2" || s == "2") return TemplateId::t2;
    throw Error(fmt::format("unknown template id '{}'", s));
}

inline std::string_view template_text(TemplateId t) {
    switch (t) {
        case TemplateId::hub: return templates::kRagHub;
        case TemplateId::t1: return templates::kRagTemplate1;
        case TemplateId::t2: return templates::kRagTemplate2;
    }
    return {};
}

struct PromptConfig {
    TemplateId template_id = TemplateId::hub;
    int chunk_size = 350;
    int chunks_per_prompt = 1;
    bool answerable = true;
    std::uint64_t rng_seed = 0;

    bool valid() const {
        return std::find(kChunkSizes.begin(), kChunkSizes.end(), chunk_size) != kChunkSizes.end() &&
               std::find(kChunkCounts.begin(), kChunkCounts.end(), chunks_per_prompt) != kChunkCounts.end();
    }
    friend bool operator==(const PromptConfig&, const PromptConfig&) = default;
};

struct RagPrompt {
    std::string prompt_id;
    std::string question_id;
    std::string article_id;
    std::string question;
    std::string answer_quote;
    std::string passage;
    PromptConfig config;
    std::vector<std::string> chunks;
    std::vector<std::string> chunk_articles;
    std::optional<std::size_t> answer_chunk_index;
    std::string rendered;
};

inline constexpr std::string_view kChunkSeparator = "\n\n";

// ---------------------------------------------------------------------------
// Chunking

namespace detail {

// Byte offsets of every code point start, plus text.size() as a sentinel.
inline std::vector<std::size_t> code_points(std::string_view s) {
    std::vector<std::size_t> cps;
    cps.reserve(s.size() + 1);
    for (std::size_t i = 0; i < s.size(); ++i) {
        if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) cps.push_back(i);
    }
    cps.push_back(s.size());
    return cps;
}

}  // namespace detail

/// Greedy left-to-right segmentation into pieces of at most `chunk_size` code points,
/// breaking at the last whitespace that keeps the piece within the limit. Runs without
/// whitespace longer than the limit are split hard. The whitespace consumed at each
/// break is dropped.
inline std::vector<std::string> chunk_passage(std::string_view input, int chunk_size) {
    if (chunk_size <= 0) throw Error("chunk_size must be positive");
    std::vector<std::string> out;
    const auto cps = detail::code_points(input);
    const std::size_t n = cps.size() - 1;
    const auto limit = static_cast<std::size_t>(chunk_size);
    auto space_at = [&](std::size_t cp) { return cp < n && text::is_space(input[cps[cp]]); };

    std::size_t pos = 0;
    while (true) {
        while (pos < n && space_at(pos)) ++pos;
        if (pos >= n) break;
        std::size_t end;
        std::size_t next;
        if (n - pos <= limit) {
            end = n;
            next = n;
        } else {
            // A break at `b` keeps [pos, b); b == pos + limit is allowed when it is whitespace.
            std::size_t b = pos + limit;
            while (b > pos && !space_at(b)) --b;
            if (b > pos) {
                end = b;
                next = b;
            } else {
                end = pos + limit;
                next = end;
            }
        }
        std::string_view piece = input.substr(cps[pos], cps[end] - cps[pos]);
        piece = text::trim_right(piece);
        if (!piece.empty()) out.emplace_back(piece);
        pos = next;
    }
    return out;
}

/// A chunk of at most `chunk_size` code points that contains `quote`: the chunk of
/// `chunk_passage` that holds it, or else a window that ends at a word boundary at or
/// after the quote. Nullopt when the quote is absent or longer than the limit.
inline std::optional<std::string> answer_chunk(std::string_view passage, std::string_view quote, int chunk_size) {
    if (quote.empty()) return std::nullopt;
    for (auto& c : chunk_passage(passage, chunk_size)) {
        if (c.find(quote) != std::string::npos) return c;
    }
    auto q = passage.find(quote);
    if (q == std::string_view::npos) return std::nullopt;
    const auto cps = detail::code_points(passage);
    auto cp_index = [&](std::size_t byte) {
        return static_cast<std::size_t>(std::lower_bound(cps.begin(), cps.end(), byte) - cps.begin());
    };
    const std::size_t qs = cp_index(q);
    const std::size_t qe = cp_index(q + quote.size());
    const auto limit = static_cast<std::size_t>(chunk_size);
    if (qe - qs > limit) return std::nullopt;
    const std::size_t n = cps.size() - 1;
    std::size_t start = qe > limit ? qe - limit : 0;
    // Move forward to a word start if that does not cut into the quote.
    if (start > 0 && !text::is_space(passage[cps[start - 1]])) {
        std::size_t s = start;
        while (s < qs && !text::is_space(passage[cps[s]])) ++s;
        while (s < qs && text::is_space(passage[cps[s]])) ++s;
        if (s <= qs) start = s;
    }
    std::size_t end = std::min(n, start + limit);
    std::size_t b = end;
    while (b > qe && b < n && !text::is_space(passage[cps[b]])) --b;
    if (b >= qe) end = b;
    auto piece = text::trim(passage.substr(cps[start], cps[end] - cps[start]));
    return std::string(piece);
}

// ---------------------------------------------------------------------------
// Distractors

/// Passages from every article, pre-chunked at each allowed size. Sampling excludes the
/// question's own article and any chunk that happens to contain the answer quote.
class DistractorPool {
public:
    struct Chunk {
        std::string article_id;
        std::string text;
    };

    void add_passage(const std::string& article_id, std::string_view passage) {
        for (int size : kChunkSizes) {
            for (auto& c : chunk_passage(passage, size)) by_size_[size].push_back({article_id, std::move(c)});
        }
    }

    /// One entry per distinct (article, section) passage, in candidate order.
    static DistractorPool from_candidates(const std::vector<corpus::SentenceCandidate>& cs) {
        DistractorPool pool;
        std::vector<std::pair<std::string, std::size_t>> seen;
        for (const auto& c : cs) {
            std::pair key{c.article_id, c.section_index};
            if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
            seen.push_back(key);
            pool.add_passage(c.article_id, c.passage);
        }
        return pool;
    }

    std::vector<const Chunk*> eligible(int chunk_size, std::string_view exclude_article,
                                       std::string_view exclude_quote) const {
        std::vector<const Chunk*> out;
        auto it = by_size_.find(chunk_size);
        if (it == by_size_.end()) return out;
        for (const auto& c : it->second) {
            if (c.article_id == exclude_article) continue;
            if (!exclude_quote.empty() && c.text.find(exclude_quote) != std::string::npos) continue;
            out.push_back(&c);
        }
        return out;
    }

private:
    std::map<int, std::vector<Chunk>> by_size_;
};

// ---------------------------------------------------------------------------
// Prompt construction

inline std::string render_prompt(TemplateId t, std::string_view question, const std::vector<std::string>& chunks) {
    return templates::render(template_text(t), {{"question", std::string(question)},
                                                {"context", text::join(chunks, kChunkSeparator)}});
}

/// Draws the shared configuration for a question from its keyed random stream.
inline PromptConfig draw_config(KeyedRng& rng, std::uint64_t seed) {
    PromptConfig cfg;
    cfg.template_id = kTemplates[rng.below(3)];
    cfg.chunk_size = kChunkSizes[rng.below(3)];
    cfg.chunks_per_prompt = kChunkCounts[rng.below(3)];
    cfg.rng_seed = seed;
    return cfg;
}

/// Builds the answerable and unanswerable prompt for one question. Both share the
/// drawn template, chunk size and chunk count; the answerable one places the chunk
/// holding the quote at a random position among distractors, the unanswerable one
/// uses distractors only. Everything is a function of (seed, question id).
inline std::pair<RagPrompt, RagPrompt> build_prompt_pair(const qa::QaPair& qa, std::string_view passage,
                                                         const DistractorPool& pool, std::uint64_t seed) {
    KeyedRng rng(seed, qa.candidate_ref);
    PromptConfig cfg = draw_config(rng, seed);
    const auto count = static_cast<std::size_t>(cfg.chunks_per_prompt);

    auto answer = answer_chunk(passage, qa.answer_quote, cfg.chunk_size);
    if (!answer)
        throw Error(fmt::format("{}: answer quote not placeable in a {}-character chunk", qa.candidate_ref,
                                cfg.chunk_size));

    auto eligible = pool.eligible(cfg.chunk_size, qa.article_id, qa.answer_quote);
    if (eligible.size() < count)
        throw Error(fmt::format("{}: distractor pool has {} eligible chunks, need {}", qa.candidate_ref,
                                eligible.size(), count));
    // Partial Fisher-Yates: the first `count` entries become a uniform sample without replacement.
    for (std::size_t i = 0; i < count; ++i) {
        auto j = i + static_cast<std::size_t>(rng.below(eligible.size() - i));
        std::swap(eligible[i], eligible[j]);
    }
    const auto answer_pos = static_cast<std::size_t>(rng.below(count));

    auto make = [&](bool answerable) {
        RagPrompt p;
        p.question_id = qa.candidate_ref;
        p.prompt_id = qa.candidate_ref + (answerable ? "#a" : "#u");
        p.article_id = qa.article_id;
        p.question = qa.question;
        p.answer_quote = qa.answer_quote;
        p.passage = std::string(passage);
        p.config = cfg;
        p.config.answerable = answerable;
        std::size_t d = 0;
        for (std::size_t slot = 0; slot < count; ++slot) {
            if (answerable && slot == answer_pos) {
                p.chunks.push_back(*answer);
                p.chunk_articles.push_back(qa.article_id);
                p.answer_chunk_index = slot;
                continue;
            }
            p.chunks.push_back(eligible[d]->text);
            p.chunk_articles.push_back(eligible[d]->article_id);
            ++d;
        }
        p.rendered = render_prompt(cfg.template_id, qa.question, p.chunks);
        return p;
    };
    return {make(true), make(false)};
}

inline json config_to_json(const PromptConfig& c) {
    return json{{"template_id", to_string(c.template_id)},
                {"chunk_size", c.chunk_size},
                {"chunks_per_prompt", c.chunks_per_prompt},
                {"answerable", c.answerable},
                {"rng_seed", c.rng_seed}};
}

inline PromptConfig config_from_json(const json& j) {
    PromptConfig c;
    c.template_id = template_from_string(j.at("template_id").get<std::string>());
    c.chunk_size = j.at("chunk_size").get<int>();
    c.chunks_per_prompt = j.at("chunks_per_prompt").get<int>();
    c.answerable = j.at("answerable").get<bool>();
    c.rng_seed = j.value("rng_seed", std::uint64_t{0});
    if (!c.valid()) throw Error(fmt::format("invalid prompt config {}", j.dump()));
    return c;
}

inline json to_json(const RagPrompt& p) {
    return json{{"prompt_id", p.prompt_id},
                {"question_id", p.question_id},
                {"article_id", p.article_id},
                {"question", p.question},
                {"answer_quote", p.answer_quote},
                {"passage", p.passage},
                {"config", config_to_json(p.config)},
                {"chunks", p.chunks},
                {"chunk_articles", p.chunk_articles},
                {"answer_chunk_index", p.answer_chunk_index ? json(*p.answer_chunk_index) : json(nullptr)},
                {"rendered", p.rendered}};
}

inline RagPrompt prompt_from_json(const json& j) {
    RagPrompt p;
    p.prompt_id = j.at("prompt_id").get<std::string>();
    p.question_id = j.at("question_id").get<std::string>();
    p.article_id = j.value("article_id", std::string{});
    p.question = j.at("question").get<std::string>();
    p.answer_quote = j.value("answer_quote", std::string{});
    p.passage = j.value("passage", std::string{});
    p.config = config_from_json(j.at("config"));
    p.chunks = j.value("chunks", std::vector<std::string>{});
    p.chunk_articles = j.value("chunk_articles", std::vector<std::string>{});
    if (auto a = j.find("answer_chunk_index"); a != j.end() && !a->is_null())
        p.answer_chunk_index = a->get<std::size_t>();
    p.rendered = j.at("rendered").get<std::string>();
    return p;
}

}  // namespace hallu::prompts
