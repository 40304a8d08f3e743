#include "support.hpp"

#include "timerag/agent.hpp"
#include "timerag/errors.hpp"

#include <doctest.h>
#include <json.hpp>

#include <set>

using namespace timerag;
using nlohmann::json;

namespace {

// Fixed vectors for known texts, hashing for everything else.
class TableEmbedder final : public Embedder {
public:
    explicit TableEmbedder(int d) : hashing_(d) {}
    int dim() const override { return hashing_.dim(); }
    VectorXd embed(const std::string& text) const override {
        const auto it = fixed.find(text);
        return it != fixed.end() ? it->second : hashing_.embed(text);
    }
    std::map<std::string, VectorXd> fixed;

private:
    HashingEmbedder hashing_;
};

Chunk chunk_with(const std::string& id, const VectorXd& v) {
    Chunk c;
    c.id = id;
    c.doc_id = id.substr(0, id.find('#'));
    c.text = "incident text " + id;
    c.embedding = v;
    return c;
}

VectorStore numbered_store(int n, int d = 16) {
    VectorStore store(d);
    Rng rng(17);
    for (int i = 0; i < n; ++i) store.upsert(chunk_with("doc" + std::to_string(i) + "#0", testing::random_matrix(d, 1, rng)));
    return store;
}

DiagnosticQuery plain_query(int d = 16) {
    DiagnosticQuery q;
    q.narrative = "cpu rising on sample s";
    q.embedding = VectorXd::Ones(d);
    return q;
}

std::string report_json(const std::vector<std::string>& evidence, const std::string& cause = "cpu hog") {
    return json{{"root_cause", cause},
                {"candidate_causes", {cause, "memory leak"}},
                {"evidence", evidence},
                {"remediation_steps", {"throttle the offending job"}}}
        .dump();
}

std::string eval_json(bool a, bool b, bool c, std::vector<std::string> deficiencies = {}) {
    return json{{"patterns_addressed", a}, {"causes_align_history", b}, {"actions_feasible", c}, {"deficiencies", deficiencies}}
        .dump();
}

std::vector<std::string> ids_of(const std::vector<ScoredChunk>& v) {
    std::vector<std::string> out;
    for (const auto& sc : v) out.push_back(sc.chunk.id);
    return out;
}

}  // namespace

TEST_CASE("compose_query") {
    const HashingEmbedder embedder(64);

    SUBCASE("constant metric") {
        const auto s = testing::make_sample("flat", MatrixXd::Constant(90, 1, 0.25));
        const auto meta = describe_metrics(s);
        REQUIRE(meta.size() == 1);
        CHECK(meta[0].raw_min == meta[0].raw_max);
        const auto q = compose_query({{"stable", "stable", "stable"}}, {s}, embedder);
        CHECK(q.narrative.find("stable stable stable") != std::string::npos);
        CHECK(q.narrative.find("min 0.25") != std::string::npos);
        CHECK(q.narrative.find("max 0.25") != std::string::npos);
        CHECK(q.embedding.norm() == doctest::Approx(1.0));
        CHECK(q.embedding == embedder.embed(q.narrative));
    }
    SUBCASE("normalised samples report their raw range") {
        MatrixXd v(60, 2);
        for (int t = 0; t < 60; ++t) {
            v(t, 0) = 10 + t;
            v(t, 1) = 500 - 2 * t;
        }
        auto s = testing::make_sample("n", v);
        s.metric_names = {"cpu_usage_pct", "memory_used_mb"};
        s = normalize_minmax(s);
        const auto meta = describe_metrics(s);
        CHECK(meta[0].raw_min == 10);
        CHECK(meta[0].raw_max == 69);
        CHECK(meta[1].raw_min == 382);
        CHECK(meta[1].raw_max == 500);
        const auto q = compose_query({{"rising", "rising"}}, {s}, embedder);
        for (const auto& field : std::vector<std::string>{"cpu_usage_pct", "memory_used_mb", s.period_start, s.period_end, "min", "max"}) {
            CHECK(q.narrative.find(field) != std::string::npos);
        }
    }
    SUBCASE("golden render") {
        MatrixXd v(90, 2);
        for (int t = 0; t < 90; ++t) {
            v(t, 0) = 20 + 0.5 * t;
            v(t, 1) = 100 - t / 3.0;
        }
        auto a = testing::make_sample("alpha", v);
        a.metric_names = {"cpu_usage_pct", "latency_ms"};
        a.frequency_seconds = 60;
        auto b = testing::make_sample("beta", MatrixXd::Constant(90, 1, 3.0));
        const auto q = compose_query({{"rising", "rising", "spike"}, {"stable", "stable", "stable"}}, {a, b}, embedder);
        CHECK(q.narrative == testing::golden("query_narrative.txt", q.narrative));
    }
    SUBCASE("template errors and shape checks") {
        const auto s = testing::make_sample("x", MatrixXd::Zero(30, 1));
        CHECK_THROWS_AS(compose_query({{"stable"}}, {s}, embedder, "{{unknown}}"), TemplateError);
        CHECK_THROWS_AS(compose_query({{"stable"}, {"stable"}}, {s}, embedder), ArgumentError);
    }
}

TEST_CASE("report schema") {
    DiagnosisReport r{"cause", {"cause", "other"}, {"a#0"}, {"fix"}, 2};
    const auto back = report_from_json(to_json(r));
    CHECK(back.root_cause == "cause");
    CHECK(back.candidate_causes == r.candidate_causes);
    CHECK(back.iteration == 2);
    CHECK_THROWS_AS(report_from_json(json{{"candidate_causes", json::array()}}), FormatError);
    CHECK_THROWS_AS(report_from_json(json{{"root_cause", "x"}, {"evidence", "a#0"}}), FormatError);
    CHECK(extract_json_object("Sure!\n```json\n{\"a\": 1}\n```").value().at("a") == 1);
    CHECK_FALSE(extract_json_object("no braces").has_value());
    CHECK_FALSE(extract_json_object("{broken").has_value());
}

TEST_CASE("diagnose_once") {
    const auto store = numbered_store(8);
    const auto q = plain_query();
    const auto top = store.retrieve_topk(q.embedding, 5);

    SUBCASE("scripted report") {
        MockChatClient llm(std::vector<std::string>{"Here you go: " + report_json({top[0].chunk.id, top[1].chunk.id})});
        const auto r = diagnose_once(q, store, llm);
        CHECK(r.report.root_cause == "cpu hog");
        CHECK(r.report.iteration == 1);
        CHECK(r.report.evidence == std::vector<std::string>{top[0].chunk.id, top[1].chunk.id});
        CHECK(r.warnings.empty());
        CHECK(r.llm_calls == 1);
    }
    SUBCASE("evidence outside the retrieved set is dropped") {
        std::set<std::string> retrieved;
        for (const auto& sc : top) retrieved.insert(sc.chunk.id);
        std::string outsider;
        for (const auto& c : store.chunks()) {
            if (!retrieved.count(c.id)) outsider = c.id;
        }
        MockChatClient llm(std::vector<std::string>{report_json({top[0].chunk.id, outsider, "made-up#7"})});
        const auto r = diagnose_once(q, store, llm);
        CHECK(r.report.evidence == std::vector<std::string>{top[0].chunk.id});
        CHECK(r.warnings.size() == 2);
    }
    SUBCASE("prompt carries exactly five chunk texts") {
        MockChatClient llm(std::vector<std::string>{report_json({})});
        diagnose_once(q, store, llm);
        const auto prompt = llm.requests()[0].messages.back().content;
        int found = 0;
        for (const auto& c : store.chunks()) found += prompt.find(c.text) != std::string::npos;
        CHECK(found == 5);
        CHECK(prompt.find(q.narrative) != std::string::npos);
    }
    SUBCASE("recovers after one bad reply") {
        MockChatClient llm(std::vector<std::string>{"I think it is the CPU.", report_json({})});
        const auto r = diagnose_once(q, store, llm);
        CHECK(r.llm_calls == 2);
        CHECK(llm.requests()[1].messages.size() > llm.requests()[0].messages.size());
    }
    SUBCASE("agent error after two re-prompts") {
        MockChatClient llm(std::vector<std::string>{"nope", "{\"root_cause\": 3}", "still nope"});
        try {
            diagnose_once(q, store, llm);
            FAIL("expected AgentError");
        } catch (const AgentError& e) {
            CHECK(llm.calls() == 3);
            CHECK(e.transcript().find("still nope") != std::string::npos);
            CHECK(e.transcript().find("{\"root_cause\": 3}") != std::string::npos);
        }
    }
    SUBCASE("empty store") {
        MockChatClient llm(std::vector<std::string>{});
        CHECK_THROWS_AS(diagnose_once(q, VectorStore(16), llm), ArgumentError);
    }
}

TEST_CASE("self_evaluate") {
    const auto store = numbered_store(6);
    const auto q = plain_query();
    const auto retrieved = store.retrieve_topk(q.embedding, 5);
    const DiagnosisReport report{"cpu hog", {"cpu hog"}, {}, {"scale out"}, 1};

    SUBCASE("all yes") {
        MockChatClient llm(std::vector<std::string>{eval_json(true, true, true)});
        CHECK(self_evaluate(report, q, retrieved, llm).passed());
        const auto prompt = llm.requests()[0].messages.back().content;
        REQUIRE(evaluation_criteria().size() == 3);
        for (const auto& c : evaluation_criteria()) CHECK(prompt.find(c) != std::string::npos);
        CHECK(evaluation_criteria()[0].find("all anomalous patterns in the time-series") != std::string::npos);
        CHECK(evaluation_criteria()[1].find("align with the retrieved historical cases") != std::string::npos);
        CHECK(evaluation_criteria()[2].find("feasible given the system constraints") != std::string::npos);
    }
    SUBCASE("one no with deficiency") {
        MockChatClient llm(std::vector<std::string>{eval_json(false, true, true, {"the latency spike is unexplained"})});
        const auto e = self_evaluate(report, q, retrieved, llm);
        CHECK_FALSE(e.passed());
        CHECK_FALSE(e.patterns_addressed);
        CHECK(e.deficiencies == std::vector<std::string>{"the latency spike is unexplained"});
    }
    SUBCASE("unparseable") {
        for (const std::string reply : {"looks fine to me", "{\"patterns_addressed\": \"yes\"}"}) {
            MockChatClient llm(std::vector<std::string>{reply});
            const auto e = self_evaluate(report, q, retrieved, llm);
            CHECK_FALSE(e.passed());
            CHECK(e.deficiencies == std::vector<std::string>{"evaluation unparseable"});
        }
    }
}

TEST_CASE("reflection loop") {
    const auto store = numbered_store(12);
    const auto q = plain_query();
    const HashingEmbedder embedder(16);

    SUBCASE("passing evaluation stops after one iteration") {
        MockChatClient llm(std::vector<std::string>{report_json({}), eval_json(true, true, true)});
        ReflectionTrace trace;
        const auto r = reflect_loop(q, store, llm, embedder, trace);
        CHECK(trace.iterations.size() == 1);
        CHECK(trace.passed);
        CHECK(r.iteration == 1);
        CHECK(llm.remaining() == 0);
    }
    SUBCASE("failing evaluation stops at five iterations") {
        std::vector<std::string> script;
        for (int i = 0; i < 5; ++i) {
            script.push_back(report_json({}, "cause " + std::to_string(i)));
            script.push_back(eval_json(false, false, true, {"missing disk evidence"}));
        }
        MockChatClient llm(script);
        ReflectionTrace trace;
        const auto r = reflect_loop(q, store, llm, embedder, trace);
        REQUIRE(trace.iterations.size() == 5);
        CHECK_FALSE(trace.passed);
        CHECK(r.root_cause == "cause 4");
        CHECK(r.iteration == 5);
        int diagnosis_calls = 0;
        for (std::size_t i = 0; i < 5; ++i) {
            const auto& it = trace.iterations[i];
            CHECK(it.iteration == static_cast<int>(i) + 1);
            CHECK(it.retrieved.size() == 5);
            CHECK(it.evaluation.has_value());
            diagnosis_calls += it.diagnosis_calls;
        }
        CHECK(diagnosis_calls == 5);
        // deficiencies are fed back into the next diagnosis prompt
        CHECK(llm.requests()[2].messages.back().content.find("missing disk evidence") != std::string::npos);
        const auto j = to_json(trace);
        CHECK(j.at("iterations").size() == 5);
    }
    SUBCASE("errors propagate with a partial trace") {
        MockChatClient llm(std::vector<std::string>{report_json({}), eval_json(false, true, true, {"x"})});
        ReflectionTrace trace;
        CHECK_THROWS_AS(reflect_loop(q, store, llm, embedder, trace), ScriptedError);
        CHECK(trace.iterations.size() == 2);
        CHECK_FALSE(trace.error.empty());
    }
    SUBCASE("bad options") {
        MockChatClient llm(std::vector<std::string>{});
        ReflectionTrace trace;
        ReflectionOptions opts;
        opts.max_iterations = 0;
        CHECK_THROWS_AS(reflect_loop(q, store, llm, embedder, trace, opts), ArgumentError);
    }
}

TEST_CASE("gap retrieval replaces the lowest-similarity chunks") {
    // Originals o0..o4 sit along e0 with falling similarity to the query; the
    // gap chunks g0..g2 sit along e1, which is where the deficiency text points.
    const int d = 8;
    VectorStore store(d);
    for (int i = 0; i < 5; ++i) {
        VectorXd v = VectorXd::Unit(d, 0);
        v(2 + i) = 0.1 * (i + 1);
        store.upsert(chunk_with("o" + std::to_string(i) + "#0", v));
    }
    for (int i = 0; i < 3; ++i) {
        VectorXd v = VectorXd::Unit(d, 1);
        v(2 + i) = 0.01 * (i + 1);
        store.upsert(chunk_with("g" + std::to_string(i) + "#0", v));
    }
    TableEmbedder embedder(d);
    embedder.fixed["disk pressure not covered\n"] = VectorXd::Unit(d, 1);

    DiagnosticQuery q;
    q.narrative = "query";
    q.embedding = VectorXd::Unit(d, 0);

    MockChatClient llm(std::vector<std::string>{report_json({"o0#0"}), eval_json(true, false, true, {"disk pressure not covered"}),
                                                report_json({"g0#0", "o4#0"}), eval_json(true, true, true)});
    ReflectionTrace trace;
    ReflectionOptions opts;
    opts.k_gap = 3;
    const auto r = reflect_loop(q, store, llm, embedder, trace, opts);
    REQUIRE(trace.iterations.size() == 2);
    CHECK(ids_of(trace.iterations[0].retrieved) == std::vector<std::string>{"o0#0", "o1#0", "o2#0", "o3#0", "o4#0"});
    const auto second = ids_of(trace.iterations[1].retrieved);
    CHECK(std::set<std::string>(second.begin(), second.end()) ==
          std::set<std::string>{"o0#0", "o1#0", "g0#0", "g1#0", "g2#0"});
    // o4 was swapped out, so citing it is unsound
    CHECK(r.evidence == std::vector<std::string>{"g0#0"});
    CHECK(trace.iterations[1].warnings.size() == 1);

    SUBCASE("merge keeps the set size and prefers fresh chunks") {
        const auto& current = trace.iterations[0].retrieved;
        const auto gap = store.retrieve_topk(VectorXd::Unit(d, 1), 8);
        CHECK(merge_gap_chunks(current, gap, 3).size() == 5);
        CHECK(merge_gap_chunks(current, current, 3) .size() == 5);
        CHECK(ids_of(merge_gap_chunks(current, current, 3)) == ids_of(current));
        const auto one = ids_of(merge_gap_chunks(current, gap, 1));
        CHECK(std::set<std::string>(one.begin(), one.end()) == std::set<std::string>{"o0#0", "o1#0", "o2#0", "o3#0", "g0#0"});
    }
}

TEST_CASE("reflection invariants over random scripts") {
    Rng rng(44);
    const HashingEmbedder embedder(16);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 1 + static_cast<int>(rng.index(9));
        const auto store = numbered_store(n);
        std::vector<std::string> script;
        std::vector<std::string> all_ids;
        for (const auto& c : store.chunks()) all_ids.push_back(c.id);
        for (int i = 0; i < 5; ++i) {
            std::vector<std::string> ev;
            for (int e = 0; e < 3; ++e) ev.push_back(all_ids[rng.index(all_ids.size())]);
            if (rng.bernoulli(0.2)) script.push_back("garbage");
            script.push_back(report_json(ev));
            const bool pass = rng.bernoulli(0.25);
            script.push_back(eval_json(pass, pass, true, pass ? std::vector<std::string>{} : std::vector<std::string>{"gap"}));
        }
        MockChatClient llm(script);
        ReflectionTrace trace;
        reflect_loop(plain_query(), store, llm, embedder, trace);
        CHECK(trace.iterations.size() >= 1);
        CHECK(trace.iterations.size() <= 5);
        for (const auto& it : trace.iterations) {
            CHECK(it.retrieved.size() == static_cast<std::size_t>(std::min(5, n)));
            std::set<std::string> ids;
            for (const auto& sc : it.retrieved) ids.insert(sc.chunk.id);
            CHECK(ids.size() == it.retrieved.size());
            for (const auto& e : it.report.evidence) CHECK(ids.count(e) == 1);
            CHECK(it.report.iteration == it.iteration);
        }
    }
}
