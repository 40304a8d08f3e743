#pragma once

#include "timerag/abstraction.hpp"
#include "timerag/encoder.hpp"
#include "timerag/random.hpp"

#include <filesystem>
#include <functional>
#include <set>
#include <span>
#include <vector>

namespace timerag {

struct TrainConfig {
    int epochs = 50;
    int batch_size = 16;
    double lr_max = 1e-2;
    double lr_min = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    double mask_top_fraction = 0.01;
    double mask_probability = 0.3;

    void validate() const;
};

/// Token ids whose alignment logits are excluded for the current epoch.
struct TokenMask {
    std::set<int> masked_ids;
    int epoch_built = 0;
    std::vector<long> histogram;  // predicted-token counts the mask was built from

    bool contains(int id) const { return masked_ids.count(id) > 0; }
};

/// One training sample: its patches in time order, per-patch token targets
/// (embedding-table ids) and the failure class.
struct TrainingExample {
    std::string sample_id;
    std::vector<Patch> patches;
    std::vector<int> token_targets;
    int class_label = 0;
};

/// Joins labels back onto the patches of normalised samples. Samples without
/// a failure label or without labels for every patch raise DataError.
std::vector<TrainingExample> build_examples(const std::vector<MetricSample>& samples,
                                            const std::vector<PatchLabel>& labels, int patch_len);

struct LossAndGrad {
    double loss = 0;
    MatrixXd grad;  // gradient w.r.t. the input of the loss
};

/// Mean cross-entropy of logits E * h against target ids. Masked ids get a
/// logit of -inf except where they are the row's own target.
double alignment_loss(const MatrixXd& h_align, std::span<const int> targets, const EmbeddingTable& table,
                      const TokenMask& mask = {});
LossAndGrad alignment_loss_grad(const MatrixXd& h_align, std::span<const int> targets, const EmbeddingTable& table,
                                const TokenMask& mask = {});

/// Mean categorical cross-entropy; labels outside [0, C) raise ArgumentError.
double classification_loss(const MatrixXd& h_clf, std::span<const int> labels);
LossAndGrad classification_loss_grad(const MatrixXd& h_clf, std::span<const int> labels);

struct LossParts {
    double total = 0;
    double align = 0;
    double clf = 0;
};

/// Unweighted sum of the two losses.
LossParts total_loss(const MatrixXd& h_align, const MatrixXd& h_clf, std::span<const int> token_targets,
                     std::span<const int> class_labels, const EmbeddingTable& table, const TokenMask& mask = {});

struct GradientResult {
    LossParts loss;
    Model grad;
    AlignedRepresentation output;  // decoded_tokens left empty
};

/// Exact reverse-mode gradients of the total loss for every trainable tensor.
GradientResult compute_gradients(const Model& model, const PatchBatch& batch, std::span<const int> token_targets,
                                 std::span<const int> class_labels, const EmbeddingTable& table,
                                 const TokenMask& mask = {});

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total_steps)) / 2
double cosine_lr(long step, long total_steps, const TrainConfig& cfg);

/// Empty before epoch 2. Otherwise each of the top ceil(mask_top_fraction * V)
/// tokens whose share of predictions exceeds 2/S is masked with probability
/// mask_probability.
TokenMask update_token_mask(std::span<const long> predicted_counts, int epoch, int n_prototypes,
                            const TrainConfig& cfg, Rng& rng);

/// Adam moments for every trainable tensor.
class AdamOptimizer {
public:
    AdamOptimizer(const Model& like, const TrainConfig& cfg);
    /// Applies one step in place and refreshes the prototype cache.
    void step(Model& model, const Model& grad, double lr, const EmbeddingTable& table);
    long steps() const { return t_; }

private:
    Model m_;
    Model v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

struct EpochMetrics {
    int epoch = 0;
    double loss = 0;
    double loss_align = 0;
    double loss_clf = 0;
    double token_acc = 0;
    double class_acc = 0;
    double lr = 0;
    std::vector<int> masked_tokens;
};

struct DatasetScore {
    LossParts loss;
    double token_acc = 0;
    double class_acc = 0;
};

/// Unmasked loss and greedy-decode accuracies of a model over a dataset.
DatasetScore score_dataset(const Model& model, const std::vector<TrainingExample>& data, const EmbeddingTable& table,
                           int batch_size = 64);

struct TrainResult {
    Model model;
    std::vector<EpochMetrics> metrics;
    bool diverged = false;
    std::string divergence_reason;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Shuffled mini-batch Adam with cosine annealing over all trainable tensors.
/// The embedding table is read-only throughout. On a non-finite loss the run
/// stops and returns the model as of the last completed epoch.
TrainResult train(const std::vector<TrainingExample>& data, const EmbeddingTable& table, Model model,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

PatchBatch batch_of(const std::vector<TrainingExample>& data, std::span<const std::size_t> indices);

nlohmann::json to_json(const EpochMetrics& m);
void write_metrics_log(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics);

}  // namespace timerag
