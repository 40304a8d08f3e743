#include "timerag/agent.hpp"

#include "timerag/errors.hpp"
#include "timerag/prompt.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace timerag {

using nlohmann::json;

const std::string& default_query_template() {
    static const std::string tpl =
        "Diagnostic query for {{n_samples}} performance metric window(s).\n"
        "\n"
        "System metadata (metric type, observation period, sampling frequency, minimum and maximum raw values):\n"
        "{{metadata}}"
        "\n"
        "Temporal pattern of each consecutive patch, in time order:\n"
        "{{patterns}}"
        "\n"
        "Identify the anomalous behaviour, its most likely root cause and the remediation.\n";
    return tpl;
}

std::vector<MetricMetadata> describe_metrics(const MetricSample& sample) {
    std::vector<MetricMetadata> out;
    for (Eigen::Index f = 0; f < sample.features(); ++f) {
        MetricMetadata m;
        m.sample_id = sample.id;
        m.name = sample.metric_names.at(static_cast<std::size_t>(f));
        m.period_start = sample.period_start;
        m.period_end = sample.period_end;
        m.frequency_seconds = sample.frequency_seconds;
        if (sample.normalized()) {
            m.raw_min = sample.raw_min(f);
            m.raw_max = sample.raw_max(f);
        } else {
            m.raw_min = sample.values.col(f).minCoeff();
            m.raw_max = sample.values.col(f).maxCoeff();
        }
        out.push_back(std::move(m));
    }
    return out;
}

DiagnosticQuery compose_query(const std::vector<std::vector<std::string>>& patch_tokens,
                              const std::vector<MetricSample>& samples, const Embedder& embedder,
                              const std::string& tpl) {
    if (samples.empty()) throw ArgumentError("compose_query needs at least one sample");
    if (patch_tokens.size() != samples.size()) throw ArgumentError("one token list per sample is required");

    DiagnosticQuery q;
    q.patch_tokens = patch_tokens;
    std::ostringstream meta, patterns;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        if (patch_tokens[s].empty()) throw ArgumentError("sample " + samples[s].id + " has no decoded patch tokens");
        for (auto& m : describe_metrics(samples[s])) {
            meta << "- sample " << m.sample_id << ", metric " << m.name << ": period " << m.period_start << " to "
                 << m.period_end << ", frequency " << format_fixed(m.frequency_seconds, 2) << " s, min "
                 << format_fixed(m.raw_min) << ", max " << format_fixed(m.raw_max) << "\n";
            q.metadata.push_back(std::move(m));
        }
        patterns << "- sample " << samples[s].id << ":";
        for (const auto& t : patch_tokens[s]) patterns << ' ' << t;
        patterns << "\n";
    }
    q.narrative = render_template(
        tpl, {{"metadata", meta.str()}, {"patterns", patterns.str()}, {"n_samples", std::to_string(samples.size())}});
    q.embedding = embedder.embed(q.narrative);
    return q;
}

DiagnosticQuery compose_query(const AlignedRepresentation& aligned, const EmbeddingTable& table,
                              const std::vector<MetricSample>& samples, const Embedder& embedder,
                              const std::string& tpl) {
    if (static_cast<std::size_t>(aligned.batch) != samples.size()) {
        throw ArgumentError("aligned batch size does not match the number of samples");
    }
    if (aligned.decoded_tokens.size() != static_cast<std::size_t>(aligned.batch * aligned.length)) {
        throw ArgumentError("decoded tokens missing from the aligned representation");
    }
    std::vector<std::vector<std::string>> tokens(samples.size());
    for (int b = 0; b < aligned.batch; ++b) {
        for (int l = 0; l < aligned.length; ++l) tokens[static_cast<std::size_t>(b)].push_back(table.token_of(aligned.token(b, l)));
    }
    return compose_query(tokens, samples, embedder, tpl);
}

json to_json(const DiagnosisReport& r) {
    return {{"root_cause", r.root_cause},
            {"candidate_causes", r.candidate_causes},
            {"evidence", r.evidence},
            {"remediation_steps", r.remediation_steps},
            {"iteration", r.iteration}};
}

namespace {

std::vector<std::string> string_list(const json& j, const char* key) {
    if (!j.contains(key)) throw FormatError(std::string("report is missing \"") + key + "\"");
    const auto& v = j.at(key);
    if (!v.is_array()) throw FormatError(std::string("\"") + key + "\" must be an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
        if (!e.is_string()) throw FormatError(std::string("\"") + key + "\" must be an array of strings");
        out.push_back(e.get<std::string>());
    }
    return out;
}

}  // namespace

DiagnosisReport report_from_json(const json& j) {
    if (!j.is_object()) throw FormatError("report must be a JSON object");
    if (!j.contains("root_cause") || !j["root_cause"].is_string()) throw FormatError("report needs a string \"root_cause\"");
    DiagnosisReport r;
    r.root_cause = j["root_cause"].get<std::string>();
    r.candidate_causes = string_list(j, "candidate_causes");
    r.evidence = string_list(j, "evidence");
    r.remediation_steps = string_list(j, "remediation_steps");
    if (j.contains("iteration")) {
        if (!j["iteration"].is_number_integer()) throw FormatError("\"iteration\" must be an integer");
        r.iteration = j["iteration"].get<int>();
    }
    return r;
}

json to_json(const Evaluation& e) {
    return {{"patterns_addressed", e.patterns_addressed},
            {"causes_align_history", e.causes_align_history},
            {"actions_feasible", e.actions_feasible},
            {"deficiencies", e.deficiencies},
            {"passed", e.passed()}};
}

std::optional<json> extract_json_object(const std::string& text) {
    const auto open = text.find('{');
    const auto close = text.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open) return std::nullopt;
    try {
        auto j = json::parse(text.substr(open, close - open + 1));
        if (!j.is_object()) return std::nullopt;
        return j;
    } catch (const json::exception&) {
        return std::nullopt;
    }
}

namespace {

const char* kDiagnosisSystem =
    "You are a site reliability engineer performing root cause analysis of an incident. "
    "Use the diagnostic query and the retrieved historical incident chunks. "
    "Reply with a single JSON object and nothing else, with keys: "
    "\"root_cause\" (string), \"candidate_causes\" (array of strings, most likely first), "
    "\"evidence\" (array of chunk ids you relied on), \"remediation_steps\" (array of strings).";

const char* kEvaluationSystem =
    "You review a root cause analysis report. Answer each question with true or false and list the deficiencies. "
    "Reply with a single JSON object and nothing else, with keys: \"patterns_addressed\", "
    "\"causes_align_history\", \"actions_feasible\" (booleans) and \"deficiencies\" (array of strings).";

std::string render_chunks(const std::vector<ScoredChunk>& retrieved) {
    std::ostringstream out;
    for (const auto& sc : retrieved) out << "[chunk " << sc.chunk.id << "]\n" << sc.chunk.text << "\n\n";
    return out.str();
}

std::string transcript_text(const std::vector<ChatMessage>& messages) {
    std::ostringstream out;
    for (const auto& m : messages) out << "### " << m.role << "\n" << m.content << "\n";
    return out.str();
}

}  // namespace

std::string render_diagnosis_prompt(const DiagnosticQuery& query, const std::vector<ScoredChunk>& retrieved,
                                    const std::vector<std::string>& feedback) {
    std::ostringstream out;
    out << "## Diagnostic query\n" << query.narrative << "\n## Retrieved historical incidents\n" << render_chunks(retrieved);
    if (!feedback.empty()) {
        out << "## Deficiencies found in the previous analysis\n";
        for (const auto& d : feedback) out << "- " << d << "\n";
        out << "\nRevise the analysis to resolve them.\n";
    }
    return out.str();
}

DiagnosisResult generate_report(const DiagnosticQuery& query, const std::vector<ScoredChunk>& retrieved,
                                ChatClient& llm, int iteration, const std::vector<std::string>& feedback) {
    DiagnosisResult result;
    result.retrieved = retrieved;
    ChatRequest request = make_request(kDiagnosisSystem, render_diagnosis_prompt(query, retrieved, feedback));

    for (int attempt = 0;; ++attempt) {
        const auto reply = llm.chat(request).content;
        ++result.llm_calls;
        request.messages.push_back({"assistant", reply});
        std::string problem;
        if (const auto j = extract_json_object(reply)) {
            try {
                result.report = report_from_json(*j);
            } catch (const FormatError& e) {
                problem = e.what();
            }
        } else {
            problem = "no JSON object found";
        }
        if (problem.empty()) break;
        if (attempt == kMaxDiagnosisReprompts) {
            throw AgentError("diagnosis reply unparseable after " + std::to_string(kMaxDiagnosisReprompts) +
                                 " re-prompts: " + problem,
                             transcript_text(request.messages));
        }
        request.messages.push_back(
            {"user", "Your reply could not be used (" + problem + "). Reply with only the JSON object described."});
    }

    std::set<std::string> ids;
    for (const auto& sc : retrieved) ids.insert(sc.chunk.id);
    std::vector<std::string> evidence;
    for (auto& id : result.report.evidence) {
        if (ids.count(id)) {
            evidence.push_back(std::move(id));
        } else {
            result.warnings.push_back("dropped evidence \"" + id + "\": not among the retrieved chunks");
        }
    }
    result.report.evidence = std::move(evidence);
    result.report.iteration = iteration;
    return result;
}

DiagnosisResult diagnose_once(const DiagnosticQuery& query, const VectorStore& store, ChatClient& llm, int k) {
    return generate_report(query, store.retrieve_topk(query.embedding, k), llm, 1);
}

const std::vector<std::string>& evaluation_criteria() {
    static const std::vector<std::string> questions = {
        "Have all anomalous patterns in the time-series been addressed?",
        "Do the proposed root causes align with the retrieved historical cases?",
        "Are the recommended actions feasible given the system constraints?",
    };
    return questions;
}

Evaluation self_evaluate(const DiagnosisReport& report, const DiagnosticQuery& query,
                         const std::vector<ScoredChunk>& retrieved, ChatClient& llm) {
    const auto& q = evaluation_criteria();
    std::ostringstream prompt;
    prompt << "## Diagnostic query\n"
           << query.narrative << "\n## Retrieved historical incidents\n"
           << render_chunks(retrieved) << "## Report under review\n"
           << to_json(report).dump(2) << "\n\n## Questions\n"
           << "1. " << q[0] << " (patterns_addressed)\n"
           << "2. " << q[1] << " (causes_align_history)\n"
           << "3. " << q[2] << " (actions_feasible)\n";
    const auto reply = llm.chat(make_request(kEvaluationSystem, prompt.str())).content;

    Evaluation unparseable;
    unparseable.deficiencies = {"evaluation unparseable"};
    const auto j = extract_json_object(reply);
    if (!j) return unparseable;
    Evaluation e;
    for (auto [key, field] : {std::pair{"patterns_addressed", &e.patterns_addressed},
                              std::pair{"causes_align_history", &e.causes_align_history},
                              std::pair{"actions_feasible", &e.actions_feasible}}) {
        if (!j->contains(key) || !(*j)[key].is_boolean()) return unparseable;
        *field = (*j)[key].get<bool>();
    }
    if (j->contains("deficiencies")) {
        const auto& d = (*j)["deficiencies"];
        if (!d.is_array()) return unparseable;
        for (const auto& s : d) {
            if (!s.is_string()) return unparseable;
            e.deficiencies.push_back(s.get<std::string>());
        }
    }
    return e;
}

json to_json(const ReflectionTrace& t) {
    json iterations = json::array();
    for (const auto& it : t.iterations) {
        json retrieved = json::array();
        for (const auto& sc : it.retrieved) retrieved.push_back({{"id", sc.chunk.id}, {"similarity", sc.similarity}});
        iterations.push_back({{"iteration", it.iteration},
                              {"retrieved", retrieved},
                              {"report", to_json(it.report)},
                              {"evaluation", it.evaluation ? to_json(*it.evaluation) : json(nullptr)},
                              {"warnings", it.warnings},
                              {"diagnosis_calls", it.diagnosis_calls}});
    }
    json out = {{"iterations", iterations}, {"passed", t.passed}};
    if (!t.error.empty()) out["error"] = t.error;
    return out;
}

namespace {

bool by_similarity(const ScoredChunk& a, const ScoredChunk& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.chunk.id < b.chunk.id;
}

}  // namespace

std::vector<ScoredChunk> merge_gap_chunks(const std::vector<ScoredChunk>& current, const std::vector<ScoredChunk>& gap,
                                          int k_gap) {
    std::set<std::string> present;
    for (const auto& sc : current) present.insert(sc.chunk.id);
    std::vector<ScoredChunk> fresh;
    for (const auto& sc : gap) {
        if (static_cast<int>(fresh.size()) >= k_gap || fresh.size() >= current.size()) break;
        if (present.insert(sc.chunk.id).second) fresh.push_back(sc);
    }
    auto kept = current;
    std::sort(kept.begin(), kept.end(), by_similarity);
    kept.resize(current.size() - fresh.size());
    kept.insert(kept.end(), fresh.begin(), fresh.end());
    std::sort(kept.begin(), kept.end(), by_similarity);
    return kept;
}

DiagnosisReport reflect_loop(const DiagnosticQuery& query, const VectorStore& store, ChatClient& llm,
                             const Embedder& embedder, ReflectionTrace& trace, const ReflectionOptions& opts) {
    if (opts.max_iterations < 1) throw ArgumentError("max_iterations must be >= 1");
    if (opts.k < 1 || opts.k_gap < 1) throw ArgumentError("k and k_gap must be >= 1");
    trace = {};
    try {
        auto retrieved = store.retrieve_topk(query.embedding, opts.k);
        std::vector<std::string> feedback;
        for (int iteration = 1;; ++iteration) {
            IterationRecord record;
            record.iteration = iteration;
            record.retrieved = retrieved;
            trace.iterations.push_back(record);
            auto& rec = trace.iterations.back();

            auto result = generate_report(query, retrieved, llm, iteration, feedback);
            rec.report = result.report;
            rec.warnings = result.warnings;
            rec.diagnosis_calls = result.llm_calls;

            const auto evaluation = self_evaluate(result.report, query, retrieved, llm);
            rec.evaluation = evaluation;
            if (evaluation.passed()) {
                trace.passed = true;
                return result.report;
            }
            if (iteration >= opts.max_iterations) return result.report;

            feedback = evaluation.deficiencies;
            std::string gap_text;
            for (const auto& d : feedback) gap_text += d + "\n";
            if (gap_text.find_first_not_of(" \t\r\n") == std::string::npos) gap_text = query.narrative;
            const int depth = std::min<int>(static_cast<int>(store.size()), opts.k_gap + static_cast<int>(retrieved.size()));
            const auto gap = store.retrieve_topk(embedder.embed(gap_text), depth);
            retrieved = merge_gap_chunks(retrieved, gap, opts.k_gap);
        }
    } catch (const std::exception& e) {
        trace.error = e.what();
        throw;
    }
}

}  // namespace timerag
