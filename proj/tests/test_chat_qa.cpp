#include <chrono>
#include <filesystem>
#include <fstream>
#include <thread>

#include <gtest/gtest.h>
#include <unistd.h>

#include "hallu/chat.hpp"
#include "hallu/qa.hpp"

using namespace hallu;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

corpus::SentenceCandidate candidate() {
    corpus::SentenceCandidate c;
    c.candidate_id = "a1:0:12";
    c.article_id = "a1";
    c.title = "Harbour Tunnel";
    c.section_context = "Planning began in 2019.";
    c.sentence = "The harbour tunnel opened to traffic on 12 March 2024 after four years of work.";
    c.passage = c.section_context + " " + c.sentence;
    return c;
}

chat::Sleeper recording(std::vector<long long>& delays) {
    return [&delays](std::chrono::milliseconds d) { delays.push_back(d.count()); };
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("hallu_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(Chat, SplitSysTags) {
    auto m = chat::split_sys_tags("<<sys>>be brief<</sys>>\nQuestion?");
    ASSERT_EQ(m.size(), 2u);
    EXPECT_EQ(m[0].role, "system");
    EXPECT_EQ(m[0].content, "be brief");
    EXPECT_EQ(m[1].content, "Question?");
    auto plain = chat::split_sys_tags("no tags");
    ASSERT_EQ(plain.size(), 1u);
    EXPECT_EQ(plain[0].role, "user");
}

TEST(Chat, ExtractTextFromSeveralPayloadShapes) {
    EXPECT_EQ(chat::extract_text(json::parse(R"({"choices":[{"message":{"content":"hi"}}]})")), "hi");
    EXPECT_EQ(chat::extract_text(json::parse(R"({"choices":[{"text":"yo"}]})")), "yo");
    EXPECT_EQ(chat::extract_text(json::parse(R"({"response":"r"})")), "r");
    EXPECT_FALSE(chat::extract_text(json::parse(R"({"other":1})")));
}

TEST(Chat, RequestWireFormatAndDigest) {
    chat::Request r{"m", {{"user", "q"}}, 0.0, 64};
    auto j = chat::to_json(r);
    EXPECT_EQ(j["model"], "m");
    EXPECT_EQ(j["messages"][0]["role"], "user");
    EXPECT_EQ(j["max_tokens"], 64);
    EXPECT_EQ(j["temperature"], 0.0);
    EXPECT_EQ(chat::request_digest(r), chat::request_digest(r));
    r.messages[0].content = "q2";
    EXPECT_NE(chat::request_digest(r), chat::request_digest(chat::Request{"m", {{"user", "q"}}, 0.0, 64}));
}

TEST(Chat, TransportRetriesBackOffExponentially) {
    int calls = 0;
    chat::MockClient client([&](const chat::Request&) -> chat::Response {
        if (++calls < 4) throw TransportError("down");
        return {"ok"};
    });
    std::vector<long long> delays;
    std::string failure;
    auto r = chat::request_with_retry<std::string>(
        client, {}, [](const std::string& t, std::string&) { return std::optional<std::string>(t); }, {}, failure,
        recording(delays));
    ASSERT_TRUE(r);
    EXPECT_EQ(*r, "ok");
    EXPECT_EQ(delays, (std::vector<long long>{500, 1000, 2000}));
}

TEST(Chat, TransportBudgetExhausts) {
    chat::MockClient client([](const chat::Request&) -> chat::Response { throw TransportError("down"); });
    std::vector<long long> delays;
    std::string failure;
    chat::RetryPolicy policy;
    policy.max_transport_retries = 2;
    auto r = chat::request_with_retry<std::string>(
        client, {}, [](const std::string& t, std::string&) { return std::optional<std::string>(t); }, policy, failure,
        recording(delays));
    EXPECT_FALSE(r);
    EXPECT_EQ(client.calls(), 3u);
    EXPECT_NE(failure.find("transport"), std::string::npos);
}

TEST(Chat, BackoffIsCapped) {
    chat::RetryPolicy p;
    EXPECT_EQ(p.delay_for(0).count(), 500);
    EXPECT_EQ(p.delay_for(3).count(), 4000);
    EXPECT_EQ(p.delay_for(20).count(), 30000);
}

TEST(Chat, TokenBucketLimitsRate) {
    chat::TokenBucket bucket(50.0, 1.0);
    auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < 6; ++i) bucket.acquire();
    auto elapsed = std::chrono::steady_clock::now() - start;
    EXPECT_GE(std::chrono::duration<double>(elapsed).count(), 0.08);
}

TEST(Chat, RecordThenReplay) {
    auto dir = temp_dir("replay");
    auto transcript = dir / "t.jsonl";
    auto upstream = std::make_shared<chat::MockClient>(
        [](const chat::Request& r) { return chat::Response{"echo:" + r.messages.back().content}; });
    chat::Request a{"m", {{"user", "a"}}, 0.0, 10};
    chat::Request b{"m", {{"user", "b"}}, 0.0, 10};
    {
        chat::ReplayClient rec(transcript, upstream);
        EXPECT_EQ(rec.complete(a).text, "echo:a");
        EXPECT_EQ(rec.complete(b).text, "echo:b");
        EXPECT_EQ(rec.complete(a).text, "echo:a");
        EXPECT_EQ(upstream->calls(), 2u);
    }
    auto replay = chat::make_client("replay:" + transcript.string());
    EXPECT_EQ(replay->complete(b).text, "echo:b");
    EXPECT_EQ(replay->complete(a).text, "echo:a");
    EXPECT_THROW(replay->complete(chat::Request{"m", {{"user", "c"}}, 0.0, 10}), TransportError);
    EXPECT_THROW(chat::make_client("replay:" + (dir / "missing.jsonl").string()), ConfigError);
    EXPECT_THROW(chat::make_client("ftp://x"), ConfigError);
    fs::remove_all(dir);
}

TEST(Chat, HttpClientSpeaksOpenAiWireFormat) {
    httplib::Server server;
    std::string seen_auth;
    json seen_body;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        seen_body = json::parse(req.body);
        res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"pong"}}]})", "application/json");
    });
    server.Post("/fail", [](const httplib::Request&, httplib::Response& res) { res.status = 503; });
    const int port = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    chat::HttpClient client(fmt::format("http://127.0.0.1:{}/v1/chat/completions", port), "k123");
    auto r = client.complete({"gpt-x", {{"system", "s"}, {"user", "ping"}}, 0.0, 32});
    EXPECT_EQ(r.text, "pong");
    EXPECT_EQ(seen_auth, "Bearer k123");
    EXPECT_EQ(seen_body["model"], "gpt-x");
    EXPECT_EQ(seen_body["messages"][1]["content"], "ping");

    chat::HttpClient failing(fmt::format("http://127.0.0.1:{}/fail", port), "k");
    EXPECT_THROW(failing.complete({"m", {{"user", "x"}}, 0.0, 1}), TransportError);
    server.stop();
    t.join();
}

TEST(Qa, PromptRendersAllPlaceholders) {
    auto p = qa::render_qa_prompt(candidate());
    EXPECT_NE(p.find("Title: 'Harbour Tunnel'\nPlanning began in 2019.\n\n### SENTENCE\nThe harbour tunnel"),
              std::string::npos);
    EXPECT_EQ(p.find("{title}"), std::string::npos);
    EXPECT_EQ(p.find("{passage_text}"), std::string::npos);
    // JSON example braces in the template are not placeholders.
    EXPECT_NE(p.find("\"answer_quote\": <answer copied"), std::string::npos);
}

TEST(Qa, VerifyQuoteIsExactSubstring) {
    const std::string s = "The tunnel opened on 12 March 2024.";
    EXPECT_TRUE(qa::verify_quote(s, "12 March 2024"));
    EXPECT_FALSE(qa::verify_quote(s, "12 march 2024"));
    EXPECT_FALSE(qa::verify_quote(s, "12  March"));
    EXPECT_FALSE(qa::verify_quote(s, ""));
}

TEST(Qa, ParsesFencedAndBareJson) {
    std::string why;
    auto a = qa::parse_qa_response("```json\n{\"answer_quote\": \"x\", \"question\": \"q?\"}\n```", why);
    ASSERT_TRUE(a);
    EXPECT_EQ(a->answer_quote, "x");
    EXPECT_TRUE(qa::parse_qa_response("{\"answer_quote\": \"x\", \"question\": \"q?\"}", why));
    EXPECT_FALSE(qa::parse_qa_response("{\"answer_quote\": 3, \"question\": \"q?\"}", why));
    EXPECT_FALSE(qa::parse_qa_response("not json", why));
}

TEST(Qa, AcceptsVerbatimQuote) {
    chat::MockClient client([](const chat::Request& r) {
        EXPECT_EQ(r.messages.front().role, "system");
        EXPECT_EQ(r.temperature, 0.0);
        return chat::Response{R"({"answer_quote": "12 March 2024", "question": "When did the harbour tunnel open?"})"};
    });
    auto out = qa::generate_qa(candidate(), client);
    ASSERT_TRUE(std::holds_alternative<qa::QaPair>(out));
    const auto& q = std::get<qa::QaPair>(out);
    EXPECT_EQ(q.candidate_ref, "a1:0:12");
    EXPECT_EQ(q.answer_quote, "12 March 2024");
    EXPECT_EQ(q.generator_model, "gpt-4o-2024-05-13");
    auto back = qa::qa_from_json(qa::to_json(q));
    EXPECT_EQ(qa::to_json(back), qa::to_json(q));
}

TEST(Qa, RejectsNonSubstringQuoteWithoutRetry) {
    chat::MockClient client([](const chat::Request&) {
        return chat::Response{R"({"answer_quote": "March 12, 2024", "question": "When did it open?"})"};
    });
    auto out = qa::generate_qa(candidate(), client);
    ASSERT_TRUE(std::holds_alternative<qa::Rejection>(out));
    EXPECT_NE(std::get<qa::Rejection>(out).reason.find("not a substring"), std::string::npos);
    EXPECT_EQ(client.calls(), 1u);
}

TEST(Qa, MalformedJsonRetriesThenRejects) {
    chat::MockClient client([](const chat::Request&) { return chat::Response{"Sure! Here you go: {broken"}; });
    auto out = qa::generate_qa(candidate(), client);
    ASSERT_TRUE(std::holds_alternative<qa::Rejection>(out));
    EXPECT_EQ(client.calls(), 3u);  // one attempt plus two parse retries
}

TEST(Qa, MalformedThenValidSucceeds) {
    int n = 0;
    chat::MockClient client([&](const chat::Request&) {
        return chat::Response{n++ == 0 ? "oops" : R"({"answer_quote": "four years", "question": "How long did building take?"})"};
    });
    auto out = qa::generate_qa(candidate(), client);
    EXPECT_TRUE(std::holds_alternative<qa::QaPair>(out));
}

TEST(Qa, RejectsQuestionThatRepeatsSentence) {
    auto c = candidate();
    chat::MockClient client([&](const chat::Request&) {
        return chat::Response{json{{"answer_quote", "12 March 2024"}, {"question", c.sentence}}.dump()};
    });
    EXPECT_TRUE(std::holds_alternative<qa::Rejection>(qa::generate_qa(c, client)));
}
