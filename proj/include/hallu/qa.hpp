#pragma once

#include <optional>
#include <string>
#include <variant>

#include <fmt/format.h>
#include <json.hpp>

#include "hallu/chat.hpp"
#include "hallu/corpus.hpp"
#include "hallu/templates.hpp"
#include "hallu/text.hpp"

namespace hallu::qa {

using json = nlohmann::json;

struct QaPair {
    std::string candidate_ref;
    std::string article_id;
    std::string question;
    std::string answer_quote;
    std::string generator_model;
    std::string raw_response;
};

struct Rejection {
    std::string candidate_ref;
    std::string reason;
};

using Outcome = std::variant<QaPair, Rejection>;

struct Options {
    std::string model = "gpt-4o-2024-05-13";
    double temperature = 0.0;
    int max_tokens = 1024;
    chat::RetryPolicy retry;
};

inline std::string render_qa_prompt(const corpus::SentenceCandidate& c) {
    return templates::render(templates::kQaGeneration, {{"title", c.title},
                                                        {"section_before_passage", c.section_context},
                                                        {"passage_text", c.sentence}});
}

/// Verbatim, case- and whitespace-sensitive containment. Empty inputs never verify.
inline bool verify_quote(std::string_view sentence, std::string_view quote) {
    if (sentence.empty() || quote.empty()) return false;
    return sentence.find(quote) != std::string_view::npos;
}

/// Returns the body of the first ``` fenced block (dropping an info string such as
/// "json"), or the input unchanged when there is no complete fence.
inline std::string strip_code_fences(std::string_view raw) {
    auto open = raw.find("```");
    if (open == std::string_view::npos) return std::string(text::trim(raw));
    auto body_start = raw.find('\n', open);
    if (body_start == std::string_view::npos) return std::string(text::trim(raw));
    auto close = raw.find("```", body_start);
    if (close == std::string_view::npos) return std::string(text::trim(raw));
    return std::string(text::trim(raw.substr(body_start + 1, close - body_start - 1)));
}

struct ParsedQa {
    std::string question;
    std::string answer_quote;
};

inline std::optional<ParsedQa> parse_qa_response(std::string_view raw, std::string& why) {
    json obj;
    try {
        obj = json::parse(strip_code_fences(raw));
    } catch (const json::parse_error& e) {
        why = fmt::format("malformed JSON: {}", e.what());
        return std::nullopt;
    }
    if (!obj.is_object() || !obj.contains("answer_quote") || !obj.contains("question") ||
        !obj["answer_quote"].is_string() || !obj["question"].is_string()) {
        why = "expected string keys answer_quote and question";
        return std::nullopt;
    }
    return ParsedQa{obj["question"].get<std::string>(), obj["answer_quote"].get<std::string>()};
}

inline json to_json(const QaPair& q) {
    return json{{"candidate_id", q.candidate_ref},       {"article_id", q.article_id},
                {"question", q.question},                {"answer_quote", q.answer_quote},
                {"generator_model", q.generator_model}, {"raw_response", q.raw_response}};
}

inline QaPair qa_from_json(const json& j) {
    QaPair q;
    q.candidate_ref = j.at("candidate_id").get<std::string>();
    q.article_id = j.value("article_id", std::string{});
    q.question = j.at("question").get<std::string>();
    q.answer_quote = j.at("answer_quote").get<std::string>();
    q.generator_model = j.value("generator_model", std::string{});
    q.raw_response = j.value("raw_response", std::string{});
    return q;
}

/// Asks the endpoint for a question and a quoted answer, then accepts the pair only if
/// the quote occurs verbatim in the candidate sentence and the question is a real
/// rephrasing.
inline Outcome generate_qa(const corpus::SentenceCandidate& c, chat::Client& client, const Options& opt = {},
                           const chat::Sleeper& sleep = chat::real_sleeper(), chat::TokenBucket* limiter = nullptr) {
    chat::Request req{opt.model, chat::split_sys_tags(render_qa_prompt(c)), opt.temperature, opt.max_tokens};
    std::string failure;
    std::string raw;
    auto parsed = chat::request_with_retry<ParsedQa>(
        client, req, [](const std::string& t, std::string& why) { return parse_qa_response(t, why); }, opt.retry,
        failure, sleep, limiter, &raw);
    if (!parsed) return Rejection{c.candidate_id, failure};
    if (!verify_quote(c.sentence, parsed->answer_quote))
        return Rejection{c.candidate_id, fmt::format("answer_quote '{}' is not a substring of the sentence",
                                                     parsed->answer_quote)};
    if (text::trim(parsed->question).empty()) return Rejection{c.candidate_id, "empty question"};
    if (parsed->question == c.sentence) return Rejection{c.candidate_id, "question repeats the sentence verbatim"};
    return QaPair{c.candidate_id, c.article_id, parsed->question, parsed->answer_quote, opt.model, raw};
}

}  // namespace hallu::qa
