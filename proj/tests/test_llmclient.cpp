#include "support.hpp"

#include "timerag/errors.hpp"
#include "timerag/llmclient.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <thread>

using namespace timerag;
using nlohmann::json;

namespace {

std::uint64_t fnv(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

class ScriptedTransport final : public Transport {
public:
    explicit ScriptedTransport(std::vector<HttpResult> replies, int* calls, std::string* last_body = nullptr)
        : replies_(std::move(replies)), calls_(calls), last_body_(last_body) {}
    HttpResult post(const std::string&, const std::string& body) override {
        if (last_body_) *last_body_ = body;
        const auto i = static_cast<std::size_t>((*calls_)++);
        return replies_.at(std::min(i, replies_.size() - 1));
    }

private:
    std::vector<HttpResult> replies_;
    int* calls_;
    std::string* last_body_;
};

class TimingOutTransport final : public Transport {
public:
    explicit TimingOutTransport(int* calls) : calls_(calls) {}
    HttpResult post(const std::string&, const std::string&) override {
        ++*calls_;
        throw TimeoutError("timed out");
    }

private:
    int* calls_;
};

std::string completion(const std::string& content) {
    return json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", "stop"}}}}}.dump();
}

LlmConfig test_config() {
    LlmConfig c;
    c.endpoint = "http://127.0.0.1:1";
    c.model = "m";
    c.backoff_base = std::chrono::milliseconds(10);
    return c;
}

}  // namespace

TEST_CASE("request validation") {
    CHECK_NOTHROW(validate_request(make_request("sys", "hi")));
    ChatRequest only_system{{{"system", "x"}}};
    CHECK_THROWS_AS(validate_request(only_system), ArgumentError);
    ChatRequest bad_role{{{"robot", "x"}, {"user", "y"}}};
    CHECK_THROWS_AS(validate_request(bad_role), ArgumentError);
    CHECK(request_hash(make_request("a", "b")) == request_hash(make_request("a", "b")));
    CHECK(request_hash(make_request("a", "b")) != request_hash(make_request("a", "c")));
}

TEST_CASE("mock chat client") {
    SUBCASE("ordered responses and exhaustion") {
        MockChatClient m(std::vector<std::string>{"one", "two"});
        CHECK(m.chat(make_request("s", "q1")).content == "one");
        CHECK(m.chat(make_request("s", "q2")).content == "two");
        CHECK_THROWS_AS(m.chat(make_request("s", "q3")), ScriptedError);
        CHECK(m.requests().size() == 3);
        CHECK(m.requests()[1].messages[1].content == "q2");
    }
    SUBCASE("keyed responses") {
        const auto req = make_request("s", "hello");
        MockScript script;
        script.keyed[request_hash(req)] = "keyed answer";
        script.ordered = {"fallback"};
        MockChatClient m(script);
        CHECK(m.chat(req).content == "keyed answer");
        CHECK(m.chat(make_request("s", "other")).content == "fallback");
    }
    SUBCASE("script files") {
        CHECK(parse_mock_script(R"(["a","b"])").ordered.size() == 2);
        CHECK(parse_mock_script(R"({"responses":["a"]})").ordered == std::vector<std::string>{"a"});
        CHECK(parse_mock_script(R"({"keyed":{"k":"v"}})").keyed.at("k") == "v");
        CHECK_THROWS_AS(parse_mock_script(R"({"bogus":1})"), FormatError);
        CHECK_THROWS_AS(parse_mock_script("not json"), FormatError);
        testing::TempDir dir;
        testing::write_file(dir / "m.json", R"(["x"])");
        CHECK(load_mock_script(dir / "m.json").ordered == std::vector<std::string>{"x"});
    }
}

TEST_CASE("http chat client retries") {
    SUBCASE("two failures then success takes three attempts with doubling backoff") {
        int calls = 0;
        std::string body;
        std::vector<long> sleeps;
        HttpChatClient client(test_config(),
                              std::make_unique<ScriptedTransport>(
                                  std::vector<HttpResult>{{503, "busy"}, {0, ""}, {200, completion("ok")}}, &calls, &body),
                              [&](std::chrono::milliseconds d) { sleeps.push_back(d.count()); });
        CHECK(client.chat(make_request("s", "q")).content == "ok");
        CHECK(calls == 3);
        CHECK(client.attempt_log() == std::vector<int>{3});
        CHECK(sleeps == std::vector<long>{10, 20});
        const auto sent = json::parse(body);
        CHECK(sent.at("model") == "m");
        CHECK(sent.at("temperature") == 0.0);
        CHECK(sent.at("messages").size() == 2);
    }
    SUBCASE("retries are bounded") {
        int calls = 0;
        HttpChatClient client(test_config(),
                              std::make_unique<ScriptedTransport>(std::vector<HttpResult>{{500, "down"}}, &calls),
                              [](std::chrono::milliseconds) {});
        CHECK_THROWS_AS(client.chat(make_request("s", "q")), ClientError);
        CHECK(calls == 4);
    }
    SUBCASE("client errors are not retried") {
        int calls = 0;
        HttpChatClient client(test_config(),
                              std::make_unique<ScriptedTransport>(std::vector<HttpResult>{{401, "no"}}, &calls),
                              [](std::chrono::milliseconds) {});
        CHECK_THROWS_AS(client.chat(make_request("s", "q")), ClientError);
        CHECK(calls == 1);
    }
    SUBCASE("timeouts propagate") {
        int calls = 0;
        HttpChatClient client(test_config(), std::make_unique<TimingOutTransport>(&calls), [](std::chrono::milliseconds) {});
        CHECK_THROWS_AS(client.chat(make_request("s", "q")), TimeoutError);
        CHECK(calls == 1);
    }
    SUBCASE("malformed completion") {
        int calls = 0;
        HttpChatClient client(test_config(),
                              std::make_unique<ScriptedTransport>(std::vector<HttpResult>{{200, R"({"choices":[]})"}}, &calls));
        CHECK_THROWS_AS(client.chat(make_request("s", "q")), ClientError);
    }
    SUBCASE("missing endpoint") {
        LlmConfig c;
        CHECK_THROWS_AS(HttpChatClient{c}, ConfigError);
    }
}

TEST_CASE("http transport against a local server") {
    httplib::Server server;
    std::string auth;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        auth = req.get_header_value("Authorization");
        const auto body = json::parse(req.body);
        res.set_content(completion("echo: " + body.at("messages").back().at("content").get<std::string>()), "application/json");
    });
    server.Post("/v1/embeddings", [&](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"data":[{"embedding":[3.0,4.0]}]})", "application/json");
    });
    server.Post("/slow", [&](const httplib::Request&, httplib::Response& res) {
        std::this_thread::sleep_for(std::chrono::milliseconds(400));
        res.set_content(completion("late"), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    auto cfg = test_config();
    cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
    cfg.api_key = "secret";
    HttpChatClient chat(cfg);
    CHECK(chat.chat(make_request("s", "ping")).content == "echo: ping");
    CHECK(auth == "Bearer secret");

    HttpEmbedder embed(cfg, 2);
    const auto v = embed.embed("anything");
    CHECK(v(0) == doctest::Approx(0.6));
    CHECK(v(1) == doctest::Approx(0.8));
    CHECK_THROWS_AS(HttpEmbedder(cfg, 3).embed("x"), ConfigError);

    auto slow = cfg;
    slow.chat_path = "/slow";
    slow.timeout = std::chrono::milliseconds(100);
    HttpChatClient impatient(slow);
    CHECK_THROWS_AS(impatient.chat(make_request("s", "q")), TimeoutError);

    server.stop();
    worker.join();
}

TEST_CASE("hashing embedder") {
    const HashingEmbedder e(32);
    SUBCASE("reference vector") {
        VectorXd expect = VectorXd::Zero(32);
        for (const std::string tok : {"packet", "loss", "detected"}) {
            const auto h = fnv(tok);
            expect(static_cast<Eigen::Index>(h % 32)) += (h & 1u) ? -1.0 : 1.0;
        }
        expect /= expect.norm();
        CHECK((e.embed("Packet  loss\tDETECTED") - expect).norm() < 1e-15);
    }
    SUBCASE("unit norm, deterministic, order-free") {
        Rng rng(2);
        const char* words[] = {"cpu", "disk", "pod", "latency", "restart", "oom", "node", "timeout"};
        for (int i = 0; i < 200; ++i) {
            std::string text;
            for (int w = 0; w < 1 + static_cast<int>(rng.index(6)); ++w) text += std::string(words[rng.index(8)]) + " ";
            try {
                const auto v = HashingEmbedder(64).embed(text);
                CHECK(v.norm() == doctest::Approx(1.0).epsilon(1e-12));
                CHECK(v == HashingEmbedder(64).embed(text));
            } catch (const ArgumentError&) {
                // every bucket cancelled; legitimate for signed hashing
            }
        }
        CHECK(e.embed("a b") == e.embed("b a"));
    }
    SUBCASE("empty text") {
        CHECK_THROWS_AS(e.embed("   "), ArgumentError);
        CHECK_THROWS_AS(HashingEmbedder(0), ArgumentError);
    }
}

TEST_CASE("binary classifier") {
    CHECK(parse_yes_no("Yes, it does.") == true);
    CHECK(parse_yes_no("  no") == false);
    CHECK(parse_yes_no("**NO**") == false);
    CHECK_FALSE(parse_yes_no("yesterday").has_value());
    CHECK_FALSE(parse_yes_no("maybe yes").has_value());

    MockChatClient client(std::vector<std::string>{"yes", "No.", "perhaps"});
    CHECK(classify_binary(client, "text", "Is it?"));
    CHECK_FALSE(classify_binary(client, "text", "Is it?"));
    CHECK_THROWS_AS(classify_binary(client, "text", "Is it?"), ClassifierParseError);
    CHECK(client.requests()[0].messages.back().content == "text");
}
