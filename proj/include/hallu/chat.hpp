#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <httplib.h>
// resolv.h defines _res as a macro, which breaks Eigen.
#undef _res
#include <json.hpp>

#include "hallu/digest.hpp"
#include "hallu/error.hpp"
#include "hallu/jsonl.hpp"

namespace hallu::chat {

using json = nlohmann::json;

struct Message {
    std::string role;  // "system" | "user" | "assistant"
    std::string content;
};

struct Request {
    std::string model;
    std::vector<Message> messages;
    double temperature = 0.0;
    int max_tokens = 1024;
};

struct Response {
    std::string text;
};

/// Wire body: {model, messages[], temperature, max_tokens}.
inline json to_json(const Request& r) {
    json msgs = json::array();
    for (const auto& m : r.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    return json{{"model", r.model}, {"messages", msgs}, {"temperature", r.temperature}, {"max_tokens", r.max_tokens}};
}

/// Stable key for a request: SHA-256 of its sorted-key JSON encoding.
inline std::string request_digest(const Request& r) { return sha256_hex(to_json(r).dump()); }

/// Splits a rendered prompt of the form "<<sys>>S<</sys>>U" into a system and a user
/// message. Text without the tags becomes a single user message.
inline std::vector<Message> split_sys_tags(std::string_view rendered) {
    constexpr std::string_view open = "<<sys>>";
    constexpr std::string_view close = "<</sys>>";
    auto a = rendered.find(open);
    auto b = rendered.find(close);
    if (a == std::string_view::npos || b == std::string_view::npos || b < a) {
        return {{"user", std::string(rendered)}};
    }
    std::string sys(rendered.substr(a + open.size(), b - a - open.size()));
    std::string user(rendered.substr(0, a));
    user += rendered.substr(b + close.size());
    while (!user.empty() && (user.front() == '\n')) user.erase(user.begin());
    return {{"system", std::move(sys)}, {"user", std::move(user)}};
}

/// Pulls the generated text out of a backend's response body. Chat-style
/// (`choices[0].message.content`), completion-style (`choices[0].text`) and plain
/// (`text` / `response`) payloads are recognised.
inline std::optional<std::string> extract_text(const json& body) {
    if (auto c = body.find("choices"); c != body.end() && c->is_array() && !c->empty()) {
        const auto& first = c->front();
        if (auto m = first.find("message"); m != first.end() && m->contains("content") && (*m)["content"].is_string())
            return (*m)["content"].get<std::string>();
        if (auto t = first.find("text"); t != first.end() && t->is_string()) return t->get<std::string>();
    }
    for (const char* key : {"text", "response", "content"}) {
        if (auto t = body.find(key); t != body.end() && t->is_string()) return t->get<std::string>();
    }
    return std::nullopt;
}

/// A chat-completion backend. Implementations must be safe to call concurrently.
class Client {
public:
    virtual ~Client() = default;
    /// Throws TransportError on network or protocol failure.
    virtual Response complete(const Request& request) = 0;
};

/// Returns whatever the supplied function returns. For tests.
class MockClient final : public Client {
public:
    using Handler = std::function<Response(const Request&)>;
    explicit MockClient(Handler handler) : handler_(std::move(handler)) {}

    Response complete(const Request& request) override {
        {
            std::lock_guard lock(mutex_);
            ++calls_;
        }
        return handler_(request);
    }

    std::size_t calls() const {
        std::lock_guard lock(mutex_);
        return calls_;
    }

private:
    Handler handler_;
    mutable std::mutex mutex_;
    std::size_t calls_ = 0;
};

/// POSTs OpenAI-compatible chat requests over HTTP(S).
class HttpClient final : public Client {
public:
    /// `url` is the full endpoint, e.g. "https://api.openai.com/v1/chat/completions".
    explicit HttpClient(std::string url, std::string api_key = {},
                        std::chrono::seconds timeout = std::chrono::seconds(120))
        : api_key_(std::move(api_key)), timeout_(timeout) {
        auto scheme_end = url.find("://");
        if (scheme_end == std::string::npos) throw ConfigError(fmt::format("endpoint '{}' has no scheme", url));
        auto path_start = url.find('/', scheme_end + 3);
        base_ = url.substr(0, path_start);
        path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
        if (api_key_.empty()) {
            if (const char* env = std::getenv("OPENAI_API_KEY")) api_key_ = env;
        }
    }

    Response complete(const Request& request) override {
        httplib::Client cli(base_);
        cli.set_connection_timeout(timeout_);
        cli.set_read_timeout(timeout_);
        httplib::Headers headers;
        if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
        auto res = cli.Post(path_, headers, to_json(request).dump(), "application/json");
        if (!res) throw TransportError(fmt::format("{}{}: {}", base_, path_, httplib::to_string(res.error())));
        if (res->status < 200 || res->status >= 300)
            throw TransportError(fmt::format("{}{}: HTTP {}: {}", base_, path_, res->status, res->body.substr(0, 200)));
        json body;
        try {
            body = json::parse(res->body);
        } catch (const json::parse_error& e) {
            throw TransportError(fmt::format("unparseable response body: {}", e.what()));
        }
        auto text = extract_text(body);
        if (!text) throw TransportError("response body has no text field");
        return {*text};
    }

private:
    std::string base_;
    std::string path_;
    std::string api_key_;
    std::chrono::seconds timeout_;
};

/// Serves responses from a transcript file of {request_digest, request, response}
/// lines. With an upstream client, misses are forwarded and appended (record mode);
/// without one, a miss is a TransportError.
class ReplayClient final : public Client {
public:
    explicit ReplayClient(std::filesystem::path transcript, std::shared_ptr<Client> upstream = nullptr)
        : path_(std::move(transcript)), upstream_(std::move(upstream)) {
        if (std::filesystem::exists(path_)) {
            Diagnostics ignored;
            jsonl::for_each(
                path_,
                [&](std::size_t, const json& row) {
                    if (row.contains("request_digest") && row.contains("response"))
                        entries_[row["request_digest"].get<std::string>()] = row["response"].get<std::string>();
                },
                ignored);
        } else if (!upstream_) {
            throw ConfigError(fmt::format("replay transcript {} does not exist", path_.string()));
        }
    }

    Response complete(const Request& request) override {
        const auto key = request_digest(request);
        {
            std::lock_guard lock(mutex_);
            if (auto it = entries_.find(key); it != entries_.end()) return {it->second};
        }
        if (!upstream_) throw TransportError(fmt::format("replay miss for request {}", key.substr(0, 12)));
        auto response = upstream_->complete(request);
        std::lock_guard lock(mutex_);
        entries_[key] = response.text;
        std::ofstream out(path_, std::ios::app | std::ios::binary);
        out << json{{"request_digest", key}, {"request", to_json(request)}, {"response", response.text}}.dump() << '\n';
        return response;
    }

    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return entries_.size();
    }

private:
    std::filesystem::path path_;
    std::shared_ptr<Client> upstream_;
    mutable std::mutex mutex_;
    std::map<std::string, std::string> entries_;
};

/// Builds a client from an endpoint string:
///   http(s)://...           live HTTP
///   replay:<file>           offline replay of a recorded transcript
///   record:<file>|<url>     live HTTP, recording every exchange into <file>
inline std::shared_ptr<Client> make_client(const std::string& endpoint) {
    if (endpoint.rfind("replay:", 0) == 0) return std::make_shared<ReplayClient>(endpoint.substr(7));
    if (endpoint.rfind("record:", 0) == 0) {
        auto rest = endpoint.substr(7);
        auto bar = rest.find('|');
        if (bar == std::string::npos) throw ConfigError("record endpoint must be record:<file>|<url>");
        return std::make_shared<ReplayClient>(rest.substr(0, bar), std::make_shared<HttpClient>(rest.substr(bar + 1)));
    }
    if (endpoint.rfind("http://", 0) == 0 || endpoint.rfind("https://", 0) == 0)
        return std::make_shared<HttpClient>(endpoint);
    throw ConfigError(fmt::format("unsupported endpoint '{}'", endpoint));
}

// ---------------------------------------------------------------------------
// Retry and rate limiting

struct RetryPolicy {
    int max_parse_retries = 2;      // extra attempts after an unusable response
    int max_transport_retries = 3;  // extra attempts after a TransportError
    std::chrono::milliseconds initial_delay{500};
    double backoff_factor = 2.0;
    std::chrono::milliseconds max_delay{30'000};

    std::chrono::milliseconds delay_for(int attempt) const {
        double ms = static_cast<double>(initial_delay.count());
        for (int i = 0; i < attempt; ++i) ms *= backoff_factor;
        ms = std::min(ms, static_cast<double>(max_delay.count()));
        return std::chrono::milliseconds(static_cast<long long>(ms));
    }
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline Sleeper real_sleeper() {
    return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

/// Token bucket: `rate` tokens per second, burst capacity `burst`. rate <= 0 disables it.
class TokenBucket {
public:
    TokenBucket(double rate, double burst) : rate_(rate), capacity_(std::max(1.0, burst)), tokens_(capacity_) {}

    void acquire() {
        if (rate_ <= 0) return;
        std::unique_lock lock(mutex_);
        while (true) {
            refill();
            if (tokens_ >= 1.0) {
                tokens_ -= 1.0;
                return;
            }
            auto wait = std::chrono::duration<double>((1.0 - tokens_) / rate_);
            lock.unlock();
            std::this_thread::sleep_for(wait);
            lock.lock();
        }
    }

private:
    void refill() {
        auto now = std::chrono::steady_clock::now();
        tokens_ = std::min(capacity_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_);
        last_ = now;
    }

    double rate_;
    double capacity_;
    double tokens_;
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
    std::mutex mutex_;
};

/// Sends `request` and feeds the text to `parse`, which returns nullopt (with a
/// reason) for unusable output. Transport failures back off exponentially; parse
/// failures retry immediately. Returns nullopt once either budget is exhausted, with
/// the last reason in `failure`.
template <typename T, typename Parse>
std::optional<T> request_with_retry(Client& client, const Request& request, Parse&& parse, const RetryPolicy& policy,
                                    std::string& failure, const Sleeper& sleep = real_sleeper(),
                                    TokenBucket* limiter = nullptr, std::string* raw = nullptr) {
    int transport_failures = 0;
    int parse_failures = 0;
    while (true) {
        Response response;
        try {
            if (limiter) limiter->acquire();
            response = client.complete(request);
        } catch (const TransportError& e) {
            failure = fmt::format("transport: {}", e.what());
            if (transport_failures >= policy.max_transport_retries) return std::nullopt;
            sleep(policy.delay_for(transport_failures));
            ++transport_failures;
            continue;
        }
        if (raw) *raw = response.text;
        std::string why;
        if (auto parsed = parse(response.text, why)) return parsed;
        failure = fmt::format("parse: {}", why);
        if (parse_failures >= policy.max_parse_retries) return std::nullopt;
        ++parse_failures;
    }
}

}  // namespace hallu::chat
