#include "timerag/llmclient.hpp"

#include "timerag/errors.hpp"
#include "timerag/hash.hpp"
#include "timerag/prompt.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cctype>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace timerag {

using nlohmann::json;

void validate_request(const ChatRequest& request) {
    bool has_user = false;
    for (const auto& m : request.messages) {
        if (m.role != "system" && m.role != "user" && m.role != "assistant") {
            throw ArgumentError("invalid chat role '" + m.role + "'");
        }
        has_user = has_user || m.role == "user";
    }
    if (!has_user) throw ArgumentError("chat request needs at least one user message");
}

ChatRequest make_request(std::string system, std::string user) {
    ChatRequest r;
    if (!system.empty()) r.messages.push_back({"system", std::move(system)});
    r.messages.push_back({"user", std::move(user)});
    return r;
}

std::string request_hash(const ChatRequest& request) {
    Fnv1a64 h;
    for (const auto& m : request.messages) {
        h.update(m.role);
        h.update("\n", 1);
        h.update(m.content);
        h.update("\n", 1);
    }
    return to_hex(h.digest());
}

MockScript parse_mock_script(const std::string& json_text) {
    MockScript script;
    try {
        const auto doc = json::parse(json_text);
        if (doc.is_array()) {
            script.ordered = doc.get<std::vector<std::string>>();
        } else {
            if (doc.contains("responses")) script.ordered = doc["responses"].get<std::vector<std::string>>();
            if (doc.contains("keyed")) script.keyed = doc["keyed"].get<std::map<std::string, std::string>>();
            for (const auto& [key, _] : doc.items()) {
                if (key != "responses" && key != "keyed") throw FormatError("unknown mock script key '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("mock script: ") + e.what());
    }
    return script;
}

MockScript load_mock_script(const std::filesystem::path& path) { return parse_mock_script(read_text_file(path)); }

ChatResponse MockChatClient::chat(const ChatRequest& request) {
    validate_request(request);
    std::lock_guard lock(mu_);
    log_.push_back(request);
    if (!script_.keyed.empty()) {
        const auto it = script_.keyed.find(request_hash(request));
        if (it != script_.keyed.end()) return {it->second, "stop"};
    }
    if (cursor_ >= script_.ordered.size()) {
        throw ScriptedError("mock script exhausted after " + std::to_string(script_.ordered.size()) + " responses");
    }
    return {script_.ordered[cursor_++], "stop"};
}

std::vector<ChatRequest> MockChatClient::requests() const {
    std::lock_guard lock(mu_);
    return log_;
}

std::size_t MockChatClient::calls() const {
    std::lock_guard lock(mu_);
    return log_.size();
}

std::size_t MockChatClient::remaining() const {
    std::lock_guard lock(mu_);
    return script_.ordered.size() - cursor_;
}

LlmConfig LlmConfig::from_env() {
    LlmConfig c;
    if (const char* v = std::getenv("TIMERAG_LLM_ENDPOINT")) c.endpoint = v;
    if (const char* v = std::getenv("TIMERAG_LLM_API_KEY")) c.api_key = v;
    if (const char* v = std::getenv("TIMERAG_LLM_MODEL")) c.model = v;
    return c;
}

namespace {

class HttplibTransport final : public Transport {
public:
    explicit HttplibTransport(const LlmConfig& config) : client_(config.endpoint), timeout_(config.timeout) {
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config.timeout);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config.timeout - secs);
        client_.set_read_timeout(secs.count(), usecs.count());
        client_.set_write_timeout(secs.count(), usecs.count());
        client_.set_connection_timeout(secs.count(), usecs.count());
        if (!config.api_key.empty()) client_.set_bearer_token_auth(config.api_key);
    }

    HttpResult post(const std::string& path, const std::string& body) override {
        const auto start = std::chrono::steady_clock::now();
        auto res = client_.Post(path, body, "application/json");
        if (!res) {
            const auto elapsed = std::chrono::steady_clock::now() - start;
            if (res.error() == httplib::Error::Read && elapsed >= timeout_) {
                throw TimeoutError("LLM request timed out after " + std::to_string(timeout_.count()) + " ms");
            }
            return {0, httplib::to_string(res.error())};
        }
        return {res->status, res->body};
    }

private:
    httplib::Client client_;
    std::chrono::milliseconds timeout_;
};

bool transient(int status) { return status == 0 || status == 429 || status >= 500; }

}  // namespace

std::unique_ptr<Transport> make_http_transport(const LlmConfig& config) {
    if (config.endpoint.empty()) throw ConfigError("no LLM endpoint configured (set TIMERAG_LLM_ENDPOINT or use a mock)");
    return std::make_unique<HttplibTransport>(config);
}

RetryingPoster::RetryingPoster(std::unique_ptr<Transport> transport, int max_retries,
                               std::chrono::milliseconds backoff_base, int max_in_flight, Sleeper sleeper)
    : transport_(std::move(transport)),
      max_retries_(max_retries),
      backoff_base_(backoff_base),
      in_flight_(std::clamp(max_in_flight, 1, 64)),
      sleeper_(sleeper ? std::move(sleeper) : Sleeper([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })) {}

HttpResult RetryingPoster::post(const std::string& path, const std::string& body) {
    in_flight_.acquire();
    struct Release {
        std::counting_semaphore<64>& s;
        ~Release() { s.release(); }
    } release{in_flight_};

    HttpResult last;
    int attempt = 0;
    for (;;) {
        ++attempt;
        last = transport_->post(path, body);
        if (!transient(last.status) || attempt > max_retries_) break;
        sleeper_(backoff_base_ * (1 << (attempt - 1)));
    }
    {
        std::lock_guard lock(mu_);
        attempts_.push_back(attempt);
    }
    if (last.status < 200 || last.status >= 300) {
        throw ClientError("LLM endpoint returned status " + std::to_string(last.status) + " after " +
                          std::to_string(attempt) + " attempts: " + last.body.substr(0, 200));
    }
    return last;
}

std::vector<int> RetryingPoster::attempt_log() const {
    std::lock_guard lock(mu_);
    return attempts_;
}

HttpChatClient::HttpChatClient(const LlmConfig& config) : HttpChatClient(config, make_http_transport(config)) {}

HttpChatClient::HttpChatClient(const LlmConfig& config, std::unique_ptr<Transport> transport, Sleeper sleeper)
    : config_(config),
      poster_(std::move(transport), config.max_retries, config.backoff_base, config.max_in_flight, std::move(sleeper)) {}

ChatResponse HttpChatClient::chat(const ChatRequest& request) {
    validate_request(request);
    json messages = json::array();
    for (const auto& m : request.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
    const json body = {{"model", config_.model},
                       {"messages", std::move(messages)},
                       {"temperature", request.temperature},
                       {"max_tokens", request.max_tokens}};
    const auto result = poster_.post(config_.chat_path, body.dump());
    try {
        const auto doc = json::parse(result.body);
        const auto& choice = doc.at("choices").at(0);
        ChatResponse out;
        out.content = choice.at("message").at("content").get<std::string>();
        out.finish_reason = choice.value("finish_reason", std::string("stop"));
        return out;
    } catch (const json::exception& e) {
        throw ClientError(std::string("malformed chat completion response: ") + e.what());
    }
}

HashingEmbedder::HashingEmbedder(int dim) : dim_(dim) {
    if (dim < 1) throw ArgumentError("embedding dimension must be >= 1");
}

VectorXd HashingEmbedder::embed(const std::string& text) const {
    VectorXd v = VectorXd::Zero(dim_);
    std::string token;
    auto flush = [&] {
        if (token.empty()) return;
        const auto h = fnv1a64(token);
        const auto idx = static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(dim_));
        v(idx) += (h & 1u) ? -1.0 : 1.0;
        token.clear();
    };
    for (const char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            flush();
        } else {
            token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    flush();
    const double n = v.norm();
    if (n == 0.0) throw ArgumentError("cannot embed empty text (no tokens, or all buckets cancelled)");
    return v / n;
}

HttpEmbedder::HttpEmbedder(const LlmConfig& config, int dim) : HttpEmbedder(config, dim, make_http_transport(config)) {}

HttpEmbedder::HttpEmbedder(const LlmConfig& config, int dim, std::unique_ptr<Transport> transport)
    : config_(config), dim_(dim), poster_(std::move(transport), config.max_retries, config.backoff_base, config.max_in_flight) {}

VectorXd HttpEmbedder::embed(const std::string& text) const {
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw ArgumentError("cannot embed empty text");
    const json body = {{"model", config_.model}, {"input", text}};
    const auto result = poster_.post(config_.embed_path, body.dump());
    std::vector<double> values;
    try {
        values = json::parse(result.body).at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw ClientError(std::string("malformed embedding response: ") + e.what());
    }
    if (static_cast<int>(values.size()) != dim_) {
        throw ConfigError("embedding endpoint returned dimension " + std::to_string(values.size()) + ", expected " +
                          std::to_string(dim_));
    }
    VectorXd v = Eigen::Map<const VectorXd>(values.data(), dim_);
    const double n = v.norm();
    if (!(n > 0) || !v.allFinite()) throw NumericError("embedding endpoint returned a zero or non-finite vector");
    return v / n;
}

std::optional<bool> parse_yes_no(const std::string& reply) {
    std::size_t i = 0;
    while (i < reply.size() && !std::isalpha(static_cast<unsigned char>(reply[i]))) ++i;
    std::string word;
    while (i < reply.size() && std::isalpha(static_cast<unsigned char>(reply[i]))) {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(reply[i++]))));
    }
    if (word == "yes") return true;
    if (word == "no") return false;
    return std::nullopt;
}

bool classify_binary(ChatClient& client, const std::string& text, const std::string& instruction) {
    auto request = make_request(instruction + "\nAnswer with a single word: yes or no.", text);
    const auto reply = client.chat(request).content;
    const auto verdict = parse_yes_no(reply);
    if (!verdict) throw ClassifierParseError("classifier reply has no leading yes/no: '" + reply.substr(0, 80) + "'");
    return *verdict;
}

}  // namespace timerag
