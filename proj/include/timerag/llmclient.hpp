#pragma once

#include "timerag/math.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <vector>

namespace timerag {

struct ChatMessage {
    std::string role;  // system | user | assistant
    std::string content;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_tokens = 1024;
};

struct ChatResponse {
    std::string content;
    std::string finish_reason = "stop";
};

/// Throws ArgumentError unless roles are valid and at least one user message exists.
void validate_request(const ChatRequest& request);

/// Convenience for the common system + user exchange.
ChatRequest make_request(std::string system, std::string user);

/// FNV-1a over "role\ncontent\n" of every message; keys for scripted mocks.
std::string request_hash(const ChatRequest& request);

class ChatClient {
public:
    virtual ~ChatClient() = default;
    virtual ChatResponse chat(const ChatRequest& request) = 0;
};

/// Canned responses, either consumed in order or looked up by request_hash.
struct MockScript {
    std::vector<std::string> ordered;
    std::map<std::string, std::string> keyed;
};

/// Accepts a bare JSON array, {"responses": [...]}, or {"keyed": {hash: text}}.
MockScript load_mock_script(const std::filesystem::path& path);
MockScript parse_mock_script(const std::string& json_text);

/// Deterministic scripted client. Records every request it sees.
class MockChatClient final : public ChatClient {
public:
    explicit MockChatClient(MockScript script) : script_(std::move(script)) {}
    explicit MockChatClient(std::vector<std::string> ordered) { script_.ordered = std::move(ordered); }

    ChatResponse chat(const ChatRequest& request) override;

    std::vector<ChatRequest> requests() const;
    std::size_t calls() const;
    std::size_t remaining() const;

private:
    mutable std::mutex mu_;
    MockScript script_;
    std::size_t cursor_ = 0;
    std::vector<ChatRequest> log_;
};

/// Client backed by an arbitrary callback; handy for stateful test doubles.
class CallbackChatClient final : public ChatClient {
public:
    using Handler = std::function<std::string(const ChatRequest&)>;
    explicit CallbackChatClient(Handler handler) : handler_(std::move(handler)) {}
    ChatResponse chat(const ChatRequest& request) override {
        validate_request(request);
        ++calls_;
        return {handler_(request), "stop"};
    }
    std::size_t calls() const { return calls_; }

private:
    Handler handler_;
    std::size_t calls_ = 0;
};

struct HttpResult {
    int status = 0;
    std::string body;
};

/// Raw request/response hop. Connection failures surface as status 0;
/// timeouts raise TimeoutError.
class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpResult post(const std::string& path, const std::string& body) = 0;
};

struct LlmConfig {
    std::string endpoint;  // scheme://host[:port]
    std::string api_key;
    std::string model;
    std::string chat_path = "/v1/chat/completions";
    std::string embed_path = "/v1/embeddings";
    std::chrono::milliseconds timeout{60000};
    int max_retries = 3;
    std::chrono::milliseconds backoff_base{500};
    int max_in_flight = 4;

    /// Reads TIMERAG_LLM_ENDPOINT, TIMERAG_LLM_API_KEY and TIMERAG_LLM_MODEL.
    static LlmConfig from_env();
};

/// cpp-httplib transport with bearer authentication.
std::unique_ptr<Transport> make_http_transport(const LlmConfig& config);

using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// Posts through the transport, retrying transient failures (status 0, 429, 5xx)
/// with exponential backoff. Shared by the chat and embedding clients.
class RetryingPoster {
public:
    RetryingPoster(std::unique_ptr<Transport> transport, int max_retries, std::chrono::milliseconds backoff_base,
                   int max_in_flight, Sleeper sleeper = {});

    HttpResult post(const std::string& path, const std::string& body);

    /// Attempt count of every post() so far, in call order.
    std::vector<int> attempt_log() const;

private:
    std::unique_ptr<Transport> transport_;
    int max_retries_;
    std::chrono::milliseconds backoff_base_;
    std::counting_semaphore<64> in_flight_;
    Sleeper sleeper_;
    mutable std::mutex mu_;
    std::vector<int> attempts_;
};

/// OpenAI-style chat-completions client.
class HttpChatClient final : public ChatClient {
public:
    explicit HttpChatClient(const LlmConfig& config);
    HttpChatClient(const LlmConfig& config, std::unique_ptr<Transport> transport, Sleeper sleeper = {});

    ChatResponse chat(const ChatRequest& request) override;
    std::vector<int> attempt_log() const { return poster_.attempt_log(); }

private:
    LlmConfig config_;
    RetryingPoster poster_;
};

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual int dim() const = 0;
    virtual VectorXd embed(const std::string& text) const = 0;
};

/// Signed feature hashing: lowercase, whitespace tokens, FNV-1a 64 bucket
/// h mod d, sign from bit 0, then L2 normalisation.
class HashingEmbedder final : public Embedder {
public:
    explicit HashingEmbedder(int dim);
    int dim() const override { return dim_; }
    VectorXd embed(const std::string& text) const override;

private:
    int dim_;
};

/// Remote embedding endpoint ({"model","input"} -> data[0].embedding).
class HttpEmbedder final : public Embedder {
public:
    HttpEmbedder(const LlmConfig& config, int dim);
    HttpEmbedder(const LlmConfig& config, int dim, std::unique_ptr<Transport> transport);
    int dim() const override { return dim_; }
    VectorXd embed(const std::string& text) const override;

private:
    LlmConfig config_;
    int dim_;
    mutable RetryingPoster poster_;
};

/// Asks the client a yes/no question about `text` and parses the leading
/// "yes" or "no" (case-insensitive). Anything else raises ClassifierParseError.
bool classify_binary(ChatClient& client, const std::string& text, const std::string& instruction);

/// Parses the leading yes/no word of a reply.
std::optional<bool> parse_yes_no(const std::string& reply);

}  // namespace timerag
