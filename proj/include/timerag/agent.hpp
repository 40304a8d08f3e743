#pragma once

#include "timerag/encoder.hpp"
#include "timerag/llmclient.hpp"
#include "timerag/metrics.hpp"
#include "timerag/ragstore.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace timerag {

struct MetricMetadata {
    std::string sample_id;
    std::string name;
    std::string period_start;
    std::string period_end;
    double frequency_seconds = 1.0;
    double raw_min = 0;
    double raw_max = 0;
};

struct DiagnosticQuery {
    std::string narrative;
    std::vector<MetricMetadata> metadata;
    std::vector<std::vector<std::string>> patch_tokens;  // per sample, time order
    VectorXd embedding;
};

/// Placeholders: {{metadata}}, {{patterns}}, {{n_samples}}.
const std::string& default_query_template();

/// Per-metric metadata; raw range comes from raw_min/raw_max when the sample
/// is normalised, otherwise from its values.
std::vector<MetricMetadata> describe_metrics(const MetricSample& sample);

/// Renders tokens and metadata into a narrative and embeds it.
DiagnosticQuery compose_query(const std::vector<std::vector<std::string>>& patch_tokens,
                              const std::vector<MetricSample>& samples, const Embedder& embedder,
                              const std::string& tpl = default_query_template());

/// Same, taking greedy-decoded tokens of an aligned batch (row b = samples[b]).
DiagnosticQuery compose_query(const AlignedRepresentation& aligned, const EmbeddingTable& table,
                              const std::vector<MetricSample>& samples, const Embedder& embedder,
                              const std::string& tpl = default_query_template());

struct DiagnosisReport {
    std::string root_cause;
    std::vector<std::string> candidate_causes;
    std::vector<std::string> evidence;
    std::vector<std::string> remediation_steps;
    int iteration = 1;
};

nlohmann::json to_json(const DiagnosisReport& r);
/// Strict schema check; throws FormatError on a missing or mistyped field.
DiagnosisReport report_from_json(const nlohmann::json& j);

struct Evaluation {
    bool patterns_addressed = false;
    bool causes_align_history = false;
    bool actions_feasible = false;
    std::vector<std::string> deficiencies;

    bool passed() const { return patterns_addressed && causes_align_history && actions_feasible; }
};

nlohmann::json to_json(const Evaluation& e);

/// Extracts the outermost {...} of a reply and parses it; nullopt when absent or invalid.
std::optional<nlohmann::json> extract_json_object(const std::string& text);

struct DiagnosisResult {
    DiagnosisReport report;
    std::vector<ScoredChunk> retrieved;
    std::vector<std::string> warnings;
    int llm_calls = 0;
};

inline constexpr int kMaxDiagnosisReprompts = 2;

/// Prompt for one report over a fixed chunk set. `feedback` lists deficiencies
/// from a previous evaluation, if any.
std::string render_diagnosis_prompt(const DiagnosticQuery& query, const std::vector<ScoredChunk>& retrieved,
                                    const std::vector<std::string>& feedback = {});

/// Generates a report over the given chunks. Evidence outside them is dropped
/// with a warning. After kMaxDiagnosisReprompts failed re-prompts raises AgentError.
DiagnosisResult generate_report(const DiagnosticQuery& query, const std::vector<ScoredChunk>& retrieved,
                                ChatClient& llm, int iteration, const std::vector<std::string>& feedback = {});

/// Retrieves the top k chunks for the query and generates the first report.
DiagnosisResult diagnose_once(const DiagnosticQuery& query, const VectorStore& store, ChatClient& llm,
                              int k = kDefaultTopK);

/// The three criteria, phrased as questions.
const std::vector<std::string>& evaluation_criteria();

/// Asks the model to grade the report. An unparseable reply is a failed
/// evaluation with the deficiency "evaluation unparseable".
Evaluation self_evaluate(const DiagnosisReport& report, const DiagnosticQuery& query,
                         const std::vector<ScoredChunk>& retrieved, ChatClient& llm);

struct ReflectionOptions {
    int max_iterations = 5;
    int k = kDefaultTopK;
    int k_gap = 3;
};

struct IterationRecord {
    int iteration = 0;
    std::vector<ScoredChunk> retrieved;
    DiagnosisReport report;
    std::optional<Evaluation> evaluation;
    std::vector<std::string> warnings;
    int diagnosis_calls = 0;
};

struct ReflectionTrace {
    std::vector<IterationRecord> iterations;
    bool passed = false;
    std::string error;
};

nlohmann::json to_json(const ReflectionTrace& t);

/// Keeps the current set size: the n lowest-similarity entries give way to the
/// first n gap chunks not already present (n <= k_gap).
std::vector<ScoredChunk> merge_gap_chunks(const std::vector<ScoredChunk>& current, const std::vector<ScoredChunk>& gap,
                                          int k_gap);

/// diagnose -> evaluate -> (gap retrieval, regenerate) until the evaluation
/// passes or max_iterations reports exist. `trace` is filled even when an
/// exception propagates.
DiagnosisReport reflect_loop(const DiagnosticQuery& query, const VectorStore& store, ChatClient& llm,
                             const Embedder& embedder, ReflectionTrace& trace, const ReflectionOptions& opts = {});

}  // namespace timerag
