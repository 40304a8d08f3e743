#pragma once

#include "timerag/llmclient.hpp"
#include "timerag/metrics.hpp"
#include "timerag/vocab.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace timerag {

/// Closed set of pattern tokens together with their ids in the embedding table.
class LabelVocabulary {
public:
    static const std::vector<std::string>& default_tokens();

    /// Binds tokens to their rows in `table`; every token must exist there.
    static LabelVocabulary from_table(const EmbeddingTable& table,
                                      const std::vector<std::string>& tokens = default_tokens());
    /// Ids equal positions; for use without an embedding table.
    static LabelVocabulary positional(const std::vector<std::string>& tokens = default_tokens());

    const std::vector<std::string>& tokens() const { return tokens_; }
    int size() const { return static_cast<int>(tokens_.size()); }
    bool contains(const std::string& token) const;
    int id_of(const std::string& token) const;
    const std::string& token_of(int id) const;

private:
    LabelVocabulary(std::vector<std::string> tokens, std::vector<int> ids);
    std::vector<std::string> tokens_;
    std::vector<int> ids_;
};

struct PatchLabel {
    std::string sample_id;
    int patch_index = 0;
    std::string token;
    int token_id = 0;
    std::string provenance = "rule";  // rule | llm | fallback
};

/// Thresholds of the rule abstractor, applied to the feature-averaged series.
struct RuleThresholds {
    double outlier_sigmas = 4.0;
    double saturated_min = 0.95;
    double trend = 0.2;       // |slope * patch_len|
    double noisy_sigma = 0.1;
    int oscillation_sign_changes = 3;
    double oscillation_range = 0.2;
    // Test noisy before oscillating. Otherwise broadband noise, which always
    // has many sign changes, is reported as oscillating.
    bool noisy_first = true;
};

/// Summary statistics of the feature-averaged series of a patch.
struct PatchStats {
    double mean = 0;
    double stddev = 0;
    double min = 0;
    double max = 0;
    double slope = 0;  // least-squares, per step
    int sign_changes = 0;
};

PatchStats patch_stats(const Patch& patch);

class PatchAbstractor {
public:
    virtual ~PatchAbstractor() = default;
    virtual PatchLabel label(const Patch& patch) = 0;
    /// Number of label() calls that may run concurrently.
    virtual int max_in_flight() const { return 1; }
};

/// Deterministic threshold rules. Order: spike, drop, saturated, rising,
/// falling, noisy, oscillating, else stable.
PatchLabel abstract_patch_rule(const Patch& patch, const LabelVocabulary& vocab, const RuleThresholds& t = {});

class RuleAbstractor final : public PatchAbstractor {
public:
    explicit RuleAbstractor(LabelVocabulary vocab, RuleThresholds thresholds = {})
        : vocab_(std::move(vocab)), thresholds_(thresholds) {}
    PatchLabel label(const Patch& patch) override { return abstract_patch_rule(patch, vocab_, thresholds_); }

private:
    LabelVocabulary vocab_;
    RuleThresholds thresholds_;
};

/// Default prompt for the LLM abstractor. Placeholders: vocabulary, rows,
/// features, mean, stddev, min, max, slope, values.
const std::string& default_abstraction_template();

std::string render_abstraction_prompt(const Patch& patch, const LabelVocabulary& vocab, const std::string& tpl);

/// Asks the client for one token; out-of-vocabulary answers are re-asked until
/// `attempts` replies have been seen, then the rule label is used with
/// provenance "fallback".
PatchLabel abstract_patch_llm(const Patch& patch, const LabelVocabulary& vocab, ChatClient& client,
                              const std::string& tpl = default_abstraction_template(), int attempts = 2,
                              const RuleThresholds& fallback = {});

class LlmAbstractor final : public PatchAbstractor {
public:
    LlmAbstractor(LabelVocabulary vocab, ChatClient& client, std::string tpl = default_abstraction_template(),
                  int max_in_flight = 4)
        : vocab_(std::move(vocab)), client_(client), tpl_(std::move(tpl)), max_in_flight_(max_in_flight) {}
    PatchLabel label(const Patch& patch) override { return abstract_patch_llm(patch, vocab_, client_, tpl_); }
    int max_in_flight() const override { return max_in_flight_; }

private:
    LabelVocabulary vocab_;
    ChatClient& client_;
    std::string tpl_;
    int max_in_flight_;
};

struct LabeledPatch {
    Patch patch;
    PatchLabel label;
};

/// One label per patch, ordered by (sample, patch index).
std::vector<LabeledPatch> label_dataset(const std::vector<MetricSample>& samples, PatchAbstractor& abstractor,
                                        int patch_len = kDefaultPatchLen);

void save_labels(const std::filesystem::path& path, const std::vector<PatchLabel>& labels);
std::vector<PatchLabel> load_labels(const std::filesystem::path& path);

}  // namespace timerag
