#pragma once

#include "timerag/llmclient.hpp"
#include "timerag/metrics.hpp"
#include "timerag/random.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace timerag {

enum class Shape { Flat, RampUp, RampDown, Spike, Oscillation, Noise };

const std::string& shape_name(Shape s);
/// Rule-abstractor token the shape is built to produce.
const std::string& expected_token(Shape s);

inline constexpr int kNumFailureClasses = 5;

/// cpu hog, memory leak, network delay, packet loss, pod failure.
const std::vector<std::string>& failure_class_names();
/// Anomalous shape that defines each class.
Shape class_shape(int failure_class);

struct SyntheticConfig {
    int length = kStandardLength;
    int patch_len = kDefaultPatchLen;
    int min_anomalous = 4;
    int max_anomalous = 10;
    double distractor_probability = 0.5;
    double jitter = 0.004;  // per-feature noise, fraction of the feature's amplitude
    double frequency_seconds = 60.0;
    std::string start = "2024-01-01T00:00:00Z";

    void validate() const;
};

struct SyntheticScenario {
    MetricSample sample;  // raw units, failure_label set
    std::vector<Shape> shapes;  // one per patch slot
    int failure_class = 0;
    std::uint64_t seed = 0;
};

/// Normalised shape of one slot, values near [0, 1].
VectorXd render_shape(Shape shape, int len, Rng& rng);

/// Deterministic in (n, cfg, seed).
std::vector<SyntheticScenario> generate_synthetic(int n, const SyntheticConfig& cfg = {}, std::uint64_t seed = 0);

struct MCQItem {
    std::string scenario_id;
    MetricSample sample;
    std::vector<std::string> choices;
    int gold_index = 0;
};

/// Gold class plus n_choices - 1 distinct distractors, shuffled with `seed`.
MCQItem build_mcq(const SyntheticScenario& scenario, int n_choices, std::uint64_t seed);
MCQItem build_mcq(const MetricSample& sample, int n_choices, std::uint64_t seed);

/// Last "answer: <letter>" wins; a reply that is a lone letter is accepted.
/// nullopt means abstain.
std::optional<int> parse_answer(const std::string& text, int n_choices);

std::string answer_letter(int index);

/// Question text with lettered choices; `context` is prepended when non-empty.
std::string render_mcq_prompt(const MCQItem& item, const std::string& context);

struct PipelineAnswer {
    std::string prompt;
    std::string raw;
};

using McqPipeline = std::function<PipelineAnswer(const MCQItem&)>;

McqPipeline oracle_pipeline();
McqPipeline random_pipeline(std::uint64_t seed);
/// Asks a chat model; `context` supplies per-item diagnostic context.
McqPipeline llm_pipeline(ChatClient& client, std::function<std::string(const MCQItem&)> context = {});

struct ItemRecord {
    std::string scenario_id;
    std::vector<std::string> choices;
    std::string prompt;
    std::string raw_answer;
    std::optional<int> parsed;
    int gold = 0;
    bool correct = false;
};

struct AccuracyReport {
    double accuracy = 0;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::vector<ItemRecord> records;
};

/// correct / total with abstentions counted wrong. Empty input raises ArgumentError.
AccuracyReport evaluate_accuracy(const std::vector<MCQItem>& items, const McqPipeline& pipeline, std::uint64_t seed);

/// JSONL, one record per item, then {"accuracy","n","seed"}.
void write_results(const std::filesystem::path& path, const AccuracyReport& report);

nlohmann::json to_json(const ItemRecord& r);

}  // namespace timerag
