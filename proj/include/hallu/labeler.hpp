#pragma once

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "hallu/chat.hpp"
#include "hallu/templates.hpp"
#include "hallu/error.hpp"
#include "hallu/text.hpp"

namespace hallu::labeler {

using json = nlohmann::json;

enum class Label { grounded = 0, hallucinated = 1, invalid = 2 };

inline std::string_view to_string(Label l) {
    switch (l) {
        case Label::grounded: return "grounded";
        case Label::hallucinated: return "hallucinated";
        case Label::invalid: return "invalid";
    }
    return "?";
}

/// 1, 0 or null, as stored in labeled.jsonl.
inline json label_to_json(Label l) {
    if (l == Label::invalid) return nullptr;
    return l == Label::hallucinated ? 1 : 0;
}

inline Label label_from_json(const json& j) {
    if (j.is_null()) return Label::invalid;
    return j.get<int>() == 1 ? Label::hallucinated : Label::grounded;
}

struct JudgeVerdict {
    bool conflicting = false;              // C
    bool grounded = false;                 // G
    bool has_factual_information = false;  // F
    bool no_clear_answer = false;          // IDK
    std::string rationale;
};

/// The answerability-dependent mapping from (C, G, F, IDK) to a label. `*` matches
/// both values; the first matching row wins.
inline constexpr std::string_view kTruthTable = R"(# answerability  C G F IDK  label
answerable    1 0 * *  1
answerable    1 1 0 *  1
answerable    1 1 1 0  1
answerable    1 1 1 1  None
answerable    0 1 1 1  None
answerable    0 1 1 0  0
answerable    0 1 0 1  1
answerable    0 0 1 1  1
answerable    0 0 0 1  1
answerable    0 0 1 0  1
answerable    0 * 0 0  0
unanswerable  1 0 * *  1
unanswerable  1 1 0 *  1
unanswerable  1 1 1 0  1
unanswerable  0 0 1 *  1
unanswerable  1 1 1 1  None
unanswerable  0 1 1 1  None
unanswerable  0 1 0 1  0
unanswerable  0 0 0 1  0
unanswerable  0 1 1 0  None
unanswerable  0 * 0 0  0
)";

class TruthTable {
public:
    struct Row {
        bool answerable;
        std::array<int, 4> pattern;  // 0, 1, or -1 for '*'
        Label label;
        std::size_t line;
    };

    /// Parses the table and checks it: every one of the 32 inputs must be matched, and
    /// rows that overlap must agree on the label.
    static TruthTable parse(std::string_view source) {
        TruthTable t;
        std::istringstream in{std::string(source)};
        std::string line;
        std::size_t number = 0;
        while (std::getline(in, line)) {
            ++number;
            auto body = text::trim(line);
            if (body.empty() || body.front() == '#') continue;
            std::istringstream fields{std::string(body)};
            std::string ans, c, g, f, idk, out;
            if (!(fields >> ans >> c >> g >> f >> idk >> out))
                throw Error(fmt::format("truth table line {}: expected 6 fields", number));
            Row row{};
            row.line = number;
            if (ans == "answerable") row.answerable = true;
            else if (ans == "unanswerable") row.answerable = false;
            else throw Error(fmt::format("truth table line {}: bad answerability '{}'", number, ans));
            const std::array<std::string*, 4> cells = {&c, &g, &f, &idk};
            for (std::size_t k = 0; k < 4; ++k) {
                const auto& v = *cells[k];
                if (v == "*") row.pattern[k] = -1;
                else if (v == "0" || v == "1") row.pattern[k] = v == "1";
                else throw Error(fmt::format("truth table line {}: bad cell '{}'", number, v));
            }
            if (out == "1") row.label = Label::hallucinated;
            else if (out == "0") row.label = Label::grounded;
            else if (out == "None") row.label = Label::invalid;
            else throw Error(fmt::format("truth table line {}: bad label '{}'", number, out));
            t.rows_.push_back(row);
        }
        t.compile();
        return t;
    }

    static const TruthTable& standard() {
        static const TruthTable table = parse(kTruthTable);
        return table;
    }

    Label lookup(bool answerable, bool c, bool g, bool f, bool idk) const {
        return compiled_[index(answerable, c, g, f, idk)];
    }

    const std::vector<Row>& rows() const { return rows_; }

    static bool matches(const Row& row, bool answerable, const std::array<bool, 4>& bits) {
        if (row.answerable != answerable) return false;
        for (std::size_t k = 0; k < 4; ++k) {
            if (row.pattern[k] != -1 && row.pattern[k] != static_cast<int>(bits[k])) return false;
        }
        return true;
    }

private:
    static std::size_t index(bool answerable, bool c, bool g, bool f, bool idk) {
        return (answerable ? 16u : 0u) | (c ? 8u : 0u) | (g ? 4u : 0u) | (f ? 2u : 0u) | (idk ? 1u : 0u);
    }

    void compile() {
        for (std::size_t i = 0; i < 32; ++i) {
            const bool answerable = i & 16;
            const std::array<bool, 4> bits = {bool(i & 8), bool(i & 4), bool(i & 2), bool(i & 1)};
            const Row* first = nullptr;
            for (const auto& row : rows_) {
                if (!matches(row, answerable, bits)) continue;
                if (!first) {
                    first = &row;
                } else if (row.label != first->label) {
                    throw Error(fmt::format("truth table rows {} and {} disagree on {} C={} G={} F={} IDK={}",
                                            first->line, row.line, answerable ? "answerable" : "unanswerable",
                                            int(bits[0]), int(bits[1]), int(bits[2]), int(bits[3])));
                }
            }
            if (!first)
                throw Error(fmt::format("truth table does not cover {} C={} G={} F={} IDK={}",
                                        answerable ? "answerable" : "unanswerable", int(bits[0]), int(bits[1]),
                                        int(bits[2]), int(bits[3])));
            compiled_[i] = first->label;
        }
    }

    std::vector<Row> rows_;
    std::array<Label, 32> compiled_{};
};

inline Label map_booleans(bool answerable, const JudgeVerdict& v) {
    return TruthTable::standard().lookup(answerable, v.conflicting, v.grounded, v.has_factual_information,
                                         v.no_clear_answer);
}

// ---------------------------------------------------------------------------
// Judge prompt

inline constexpr std::string_view kJudgeSystem =
    "You are a meticulous fact-checking assistant. You decide whether one sentence of an AI assistant's "
    "answer is supported by the context the assistant was given. You reason step by step and you back "
    "every claim with exact substrings copied from the material.";

inline constexpr std::string_view kJudgeUser = R"(### CONTEXT GIVEN TO THE ASSISTANT
{context}

### QUESTION
{question}

### REFERENCE ANSWER QUOTE
{answer_quote}

### ANSWERABILITY
{answerability}

### FULL RESPONSE OF THE ASSISTANT
{response}

### SENTENCE TO JUDGE
{sentence}

### TASK
Judge only the SENTENCE TO JUDGE, reading it in the light of the FULL RESPONSE. Work through the four questions below in order. For each one, quote the exact substrings of the SENTENCE and of the CONTEXT (or the REFERENCE ANSWER QUOTE) that your decision rests on, and state whether each quoted substring really occurs verbatim. Only then decide.
1. conflicting: Does the SENTENCE state anything that contradicts the CONTEXT or the REFERENCE ANSWER QUOTE?
2. grounded: Is every piece of information in the SENTENCE supported by the CONTEXT?
3. has_factual_information: Does the SENTENCE contain any factual claim at all (as opposed to only pleasantries, hedging or meta statements)?
4. no_clear_answer: Does the SENTENCE say or imply that the question cannot be answered or that the information is not available?

End your reply with a single JSON object on its own, exactly in this form:
{"conflicting": true|false, "grounded": true|false, "has_factual_information": true|false, "no_clear_answer": true|false})";

struct JudgeInput {
    std::string sentence;
    std::string full_response;
    std::string context;  // chunks shown to the model (the passage for answerable prompts)
    std::string question;
    std::string answer_quote;
    bool answerable = true;
};

inline chat::Request judge_request(const JudgeInput& in, const std::string& model, int max_tokens = 1024) {
    std::string user = templates::render(
        kJudgeUser, {{"context", in.context},
                     {"question", in.question},
                     {"answer_quote", in.answer_quote},
                     {"answerability",
                      in.answerable ? "The context was meant to contain the answer (answerable prompt)."
                                    : "The context was NOT meant to contain the answer (unanswerable prompt)."},
                     {"response", in.full_response},
                     {"sentence", in.sentence}});
    return chat::Request{model, {{"system", std::string(kJudgeSystem)}, {"user", std::move(user)}}, 0.0, max_tokens};
}

/// Extracts the verdict from the last balanced JSON object in the reply; everything
/// before it is kept as the rationale.
inline std::optional<JudgeVerdict> parse_verdict(std::string_view reply, std::string& why) {
    auto close = reply.rfind('}');
    while (close != std::string_view::npos) {
        int depth = 0;
        std::size_t open = std::string_view::npos;
        for (std::size_t i = close + 1; i-- > 0;) {
            if (reply[i] == '}') ++depth;
            else if (reply[i] == '{' && --depth == 0) {
                open = i;
                break;
            }
        }
        if (open == std::string_view::npos) break;
        try {
            auto obj = json::parse(reply.substr(open, close - open + 1));
            const std::array<const char*, 4> keys = {"conflicting", "grounded", "has_factual_information",
                                                     "no_clear_answer"};
            bool ok = obj.is_object();
            for (auto k : keys) ok = ok && obj.contains(k) && obj[k].is_boolean();
            if (ok) {
                JudgeVerdict v;
                v.conflicting = obj["conflicting"].get<bool>();
                v.grounded = obj["grounded"].get<bool>();
                v.has_factual_information = obj["has_factual_information"].get<bool>();
                v.no_clear_answer = obj["no_clear_answer"].get<bool>();
                v.rationale = std::string(text::trim(reply.substr(0, open)));
                return v;
            }
        } catch (const json::parse_error&) {
        }
        close = open == 0 ? std::string_view::npos : reply.rfind('}', open - 1);
    }
    why = "no JSON object with the four boolean keys";
    return std::nullopt;
}

struct JudgeResult {
    std::optional<JudgeVerdict> verdict;
    std::string failure;
};

inline JudgeResult judge_sentence(const JudgeInput& in, chat::Client& client, const std::string& model,
                                  const chat::RetryPolicy& retry = {}, const chat::Sleeper& sleep = chat::real_sleeper(),
                                  chat::TokenBucket* limiter = nullptr) {
    JudgeResult r;
    r.verdict = chat::request_with_retry<JudgeVerdict>(
        client, judge_request(in, model), [](const std::string& t, std::string& why) { return parse_verdict(t, why); },
        retry, r.failure, sleep, limiter);
    return r;
}

}  // namespace hallu::labeler
