#include "timerag/training.hpp"

#include "timerag/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>

namespace timerag {

using nlohmann::json;

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr_min > 0) || !(lr_max > 0) || lr_min > lr_max) throw ConfigError("need 0 < lr_min <= lr_max");
    if (mask_top_fraction < 0 || mask_top_fraction > 1) throw ConfigError("mask_top_fraction must lie in [0,1]");
    if (mask_probability < 0 || mask_probability > 1) throw ConfigError("mask_probability must lie in [0,1]");
}

std::vector<TrainingExample> build_examples(const std::vector<MetricSample>& samples,
                                            const std::vector<PatchLabel>& labels, int patch_len) {
    std::map<std::pair<std::string, int>, int> by_patch;
    for (const auto& l : labels) by_patch[{l.sample_id, l.patch_index}] = l.token_id;
    std::vector<TrainingExample> out;
    for (const auto& s : samples) {
        if (!s.failure_label) throw DataError("sample '" + s.id + "' has no failure label");
        TrainingExample ex;
        ex.sample_id = s.id;
        ex.patches = segment_into_patches(s, patch_len);
        ex.class_label = *s.failure_label;
        for (const auto& p : ex.patches) {
            const auto it = by_patch.find({s.id, p.index});
            if (it == by_patch.end()) {
                throw DataError("no label for patch " + std::to_string(p.index) + " of sample '" + s.id + "'");
            }
            ex.token_targets.push_back(it->second);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

namespace {

MatrixXd masked_logits(const MatrixXd& h_align, std::span<const int> targets, const EmbeddingTable& table,
                       const TokenMask& mask) {
    if (static_cast<Eigen::Index>(targets.size()) != h_align.rows()) {
        throw ArgumentError("alignment targets do not match the number of patches");
    }
    MatrixXd logits = h_align * table.vectors().transpose();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const int target = targets[static_cast<std::size_t>(r)];
        if (target < 0 || target >= table.size()) throw ArgumentError("token target " + std::to_string(target) + " out of range");
        for (int id : mask.masked_ids) {
            if (id != target) logits(r, id) = -std::numeric_limits<double>::infinity();
        }
    }
    return logits;
}

void check_labels(const MatrixXd& h_clf, std::span<const int> labels) {
    if (static_cast<Eigen::Index>(labels.size()) != h_clf.rows()) {
        throw ArgumentError("class labels do not match the batch size");
    }
    for (int y : labels) {
        if (y < 0 || y >= h_clf.cols()) {
            throw ArgumentError("class label " + std::to_string(y) + " outside [0, " + std::to_string(h_clf.cols()) + ")");
        }
    }
}

LossAndGrad softmax_ce_grad(const MatrixXd& logits, std::span<const int> targets) {
    LossAndGrad out;
    out.loss = mean_cross_entropy(logits, targets);
    out.grad = softmax_rows(logits);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) out.grad(r, targets[static_cast<std::size_t>(r)]) -= 1.0;
    out.grad /= static_cast<double>(std::max<Eigen::Index>(1, logits.rows()));
    return out;
}

}  // namespace

double alignment_loss(const MatrixXd& h_align, std::span<const int> targets, const EmbeddingTable& table,
                      const TokenMask& mask) {
    return mean_cross_entropy(masked_logits(h_align, targets, table, mask), targets);
}

LossAndGrad alignment_loss_grad(const MatrixXd& h_align, std::span<const int> targets, const EmbeddingTable& table,
                                const TokenMask& mask) {
    auto out = softmax_ce_grad(masked_logits(h_align, targets, table, mask), targets);
    out.grad = out.grad * table.vectors();
    return out;
}

double classification_loss(const MatrixXd& h_clf, std::span<const int> labels) {
    check_labels(h_clf, labels);
    return mean_cross_entropy(h_clf, labels);
}

LossAndGrad classification_loss_grad(const MatrixXd& h_clf, std::span<const int> labels) {
    check_labels(h_clf, labels);
    return softmax_ce_grad(h_clf, labels);
}

LossParts total_loss(const MatrixXd& h_align, const MatrixXd& h_clf, std::span<const int> token_targets,
                     std::span<const int> class_labels, const EmbeddingTable& table, const TokenMask& mask) {
    LossParts p;
    p.align = alignment_loss(h_align, token_targets, table, mask);
    p.clf = classification_loss(h_clf, class_labels);
    p.total = p.align + p.clf;
    return p;
}

GradientResult compute_gradients(const Model& model, const PatchBatch& batch, std::span<const int> token_targets,
                                 std::span<const int> class_labels, const EmbeddingTable& table, const TokenMask& mask) {
    ForwardCache cache;
    GradientResult out;
    out.output = forward(batch, model, table, &cache, /*decode=*/false);
    const auto align = alignment_loss_grad(cache.h_align, token_targets, table, mask);
    const auto clf = classification_loss_grad(cache.h_clf, class_labels);
    out.loss.align = align.loss;
    out.loss.clf = clf.loss;
    out.loss.total = align.loss + clf.loss;
    if (!std::isfinite(out.loss.total)) throw NumericError("non-finite loss");
    out.grad = backward(model, cache, table, align.grad, clf.grad);
    return out;
}

double cosine_lr(long step, long total_steps, const TrainConfig& cfg) {
    if (total_steps <= 0) return cfg.lr_max;
    const double progress = static_cast<double>(std::clamp(step, 0L, total_steps)) / static_cast<double>(total_steps);
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

TokenMask update_token_mask(std::span<const long> predicted_counts, int epoch, int n_prototypes, const TrainConfig& cfg,
                            Rng& rng) {
    TokenMask mask;
    mask.epoch_built = epoch;
    mask.histogram.assign(predicted_counts.begin(), predicted_counts.end());
    if (epoch < 2 || predicted_counts.empty() || n_prototypes < 1) return mask;
    const long total = std::accumulate(predicted_counts.begin(), predicted_counts.end(), 0L);
    if (total == 0) return mask;

    std::vector<int> order(predicted_counts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return predicted_counts[static_cast<std::size_t>(a)] > predicted_counts[static_cast<std::size_t>(b)];
    });
    const auto top = static_cast<std::size_t>(
        std::ceil(cfg.mask_top_fraction * static_cast<double>(predicted_counts.size())));
    const double share_floor = 2.0 / static_cast<double>(n_prototypes);
    for (std::size_t i = 0; i < std::min(top, order.size()); ++i) {
        const int id = order[i];
        const double share = static_cast<double>(predicted_counts[static_cast<std::size_t>(id)]) / static_cast<double>(total);
        if (share <= share_floor) break;
        if (rng.bernoulli(cfg.mask_probability)) mask.masked_ids.insert(id);
    }
    return mask;
}

namespace {

std::vector<std::span<double>> spans_of(Model& m) {
    std::vector<std::span<double>> out;
    for_each_tensor(m, [&](std::string_view, std::span<double> t) { out.push_back(t); });
    return out;
}

std::vector<std::span<const double>> spans_of(const Model& m) {
    std::vector<std::span<const double>> out;
    for_each_tensor(m, [&](std::string_view, std::span<const double> t) { out.push_back(t); });
    return out;
}

}  // namespace

AdamOptimizer::AdamOptimizer(const Model& like, const TrainConfig& cfg)
    : m_(zeros_like(like)), v_(zeros_like(like)), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps) {}

void AdamOptimizer::step(Model& model, const Model& grad, double lr, const EmbeddingTable& table) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto params = spans_of(model);
    auto grads = spans_of(grad);
    auto ms = spans_of(m_);
    auto vs = spans_of(v_);
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (std::size_t i = 0; i < params[k].size(); ++i) {
            const double g = grads[k][i];
            ms[k][i] = beta1_ * ms[k][i] + (1.0 - beta1_) * g;
            vs[k][i] = beta2_ * vs[k][i] + (1.0 - beta2_) * g * g;
            params[k][i] -= lr * (ms[k][i] / c1) / (std::sqrt(vs[k][i] / c2) + eps_);
        }
    }
    model.prototypes.refresh(table);
}

PatchBatch batch_of(const std::vector<TrainingExample>& data, std::span<const std::size_t> indices) {
    std::vector<std::vector<Patch>> samples;
    samples.reserve(indices.size());
    for (auto i : indices) samples.push_back(data[i].patches);
    return make_batch(samples);
}

namespace {

struct BatchTargets {
    std::vector<int> tokens;
    std::vector<int> classes;
};

BatchTargets targets_of(const std::vector<TrainingExample>& data, std::span<const std::size_t> indices) {
    BatchTargets t;
    for (auto i : indices) {
        t.tokens.insert(t.tokens.end(), data[i].token_targets.begin(), data[i].token_targets.end());
        t.classes.push_back(data[i].class_label);
    }
    return t;
}

int argmax_row(const MatrixXd& m, Eigen::Index r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c) {
        if (m(r, c) > m(r, best)) best = c;
    }
    return static_cast<int>(best);
}

}  // namespace

DatasetScore score_dataset(const Model& model, const std::vector<TrainingExample>& data, const EmbeddingTable& table,
                           int batch_size) {
    DatasetScore score;
    if (data.empty()) return score;
    long tokens = 0, token_hits = 0, class_hits = 0;
    double align_sum = 0, clf_sum = 0;
    for (std::size_t begin = 0; begin < data.size(); begin += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(data.size(), begin + static_cast<std::size_t>(batch_size));
        std::vector<std::size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        const auto batch = batch_of(data, idx);
        const auto t = targets_of(data, idx);
        const auto out = forward(batch, model, table, nullptr, /*decode=*/true);
        const auto parts = total_loss(out.h_align, out.h_clf, t.tokens, t.classes, table);
        align_sum += parts.align * static_cast<double>(t.tokens.size());
        clf_sum += parts.clf * static_cast<double>(t.classes.size());
        for (std::size_t i = 0; i < t.tokens.size(); ++i) token_hits += out.decoded_tokens[i] == t.tokens[i];
        for (std::size_t b = 0; b < t.classes.size(); ++b) {
            class_hits += argmax_row(out.h_clf, static_cast<Eigen::Index>(b)) == t.classes[b];
        }
        tokens += static_cast<long>(t.tokens.size());
    }
    score.loss.align = align_sum / static_cast<double>(tokens);
    score.loss.clf = clf_sum / static_cast<double>(data.size());
    score.loss.total = score.loss.align + score.loss.clf;
    score.token_acc = static_cast<double>(token_hits) / static_cast<double>(tokens);
    score.class_acc = static_cast<double>(class_hits) / static_cast<double>(data.size());
    return score;
}

TrainResult train(const std::vector<TrainingExample>& data, const EmbeddingTable& table, Model model,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    TrainResult result;
    if (cfg.epochs == 0) {
        result.model = std::move(model);
        return result;
    }
    if (data.empty()) throw ArgumentError("training set is empty");

    Rng shuffle_rng(cfg.seed);
    Rng mask_rng(cfg.seed ^ 0x6d61736bull);
    AdamOptimizer adam(model, cfg);
    const auto batch_size = static_cast<std::size_t>(cfg.batch_size);
    const long batches_per_epoch = static_cast<long>((data.size() + batch_size - 1) / batch_size);
    const long total_steps = batches_per_epoch * cfg.epochs;
    const int n_prototypes = model.prototypes.size();

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<long> predicted(static_cast<std::size_t>(table.size()), 0);
    TokenMask mask;
    Model last_good = model;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        mask = update_token_mask(predicted, epoch, n_prototypes, cfg, mask_rng);
        std::fill(predicted.begin(), predicted.end(), 0);
        shuffle_rng.shuffle(order.begin(), order.end());

        EpochMetrics em;
        em.epoch = epoch;
        em.masked_tokens.assign(mask.masked_ids.begin(), mask.masked_ids.end());
        double align_sum = 0, clf_sum = 0;
        long tokens = 0, token_hits = 0, class_hits = 0;
        try {
            for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
                const auto end = std::min(order.size(), begin + batch_size);
                const std::span<const std::size_t> idx(order.data() + begin, end - begin);
                const auto batch = batch_of(data, idx);
                const auto t = targets_of(data, idx);
                auto g = compute_gradients(model, batch, t.tokens, t.classes, table, mask);

                const MatrixXd logits = g.output.h_align * table.vectors().transpose();
                for (Eigen::Index r = 0; r < logits.rows(); ++r) {
                    const int pred = argmax_row(logits, r);
                    ++predicted[static_cast<std::size_t>(pred)];
                    token_hits += pred == t.tokens[static_cast<std::size_t>(r)];
                }
                for (std::size_t b = 0; b < t.classes.size(); ++b) {
                    class_hits += argmax_row(g.output.h_clf, static_cast<Eigen::Index>(b)) == t.classes[b];
                }
                align_sum += g.loss.align * static_cast<double>(t.tokens.size());
                clf_sum += g.loss.clf * static_cast<double>(t.classes.size());
                tokens += static_cast<long>(t.tokens.size());

                em.lr = cosine_lr(adam.steps(), total_steps, cfg);
                adam.step(model, g.grad, em.lr, table);
            }
        } catch (const NumericError& e) {
            result.model = std::move(last_good);
            result.diverged = true;
            result.divergence_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
            return result;
        }
        em.loss_align = align_sum / static_cast<double>(tokens);
        em.loss_clf = clf_sum / static_cast<double>(data.size());
        em.loss = em.loss_align + em.loss_clf;
        em.token_acc = static_cast<double>(token_hits) / static_cast<double>(tokens);
        em.class_acc = static_cast<double>(class_hits) / static_cast<double>(data.size());
        result.metrics.push_back(em);
        if (on_epoch) on_epoch(em);
        last_good = model;
    }
    result.model = std::move(model);
    return result;
}

json to_json(const EpochMetrics& m) {
    return {{"epoch", m.epoch},       {"loss", m.loss},           {"loss_align", m.loss_align},
            {"loss_clf", m.loss_clf}, {"token_acc", m.token_acc}, {"class_acc", m.class_acc},
            {"lr", m.lr},             {"masked_tokens", m.masked_tokens}};
}

void write_metrics_log(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path.string());
    for (const auto& m : metrics) out << to_json(m).dump() << '\n';
}

}  // namespace timerag
