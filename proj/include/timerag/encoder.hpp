#pragma once

#include "timerag/math.hpp"
#include "timerag/metrics.hpp"
#include "timerag/vocab.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace timerag {

struct EncoderConfig {
    int patch_len = kDefaultPatchLen;
    int n_features = 3;
    int d_model = 32;
    int n_heads = 4;
    int d_llm = 32;
    int n_classes = 5;
    double lambda_init = 0.8;
    double rms_eps = 1e-6;

    int d_keys() const { return d_model / n_heads; }
    int patch_dim() const { return patch_len * n_features; }
    void validate() const;
};

/// Trainable parameters of the time-series encoder. Linear maps are stored
/// input x output and applied as x * W + b.
struct EncoderParams {
    MatrixXd w_embed;  // patch_len*F x d_model
    VectorXd b_embed;
    MatrixXd w_q;  // d_model x H*d_k
    VectorXd b_q;
    MatrixXd w_k;  // d_llm x H*d_k
    VectorXd b_k;
    MatrixXd w_v;  // d_llm x H*d_k
    VectorXd b_v;
    MatrixXd w_out;  // H*d_k x d_llm
    VectorXd b_out;
    double temperature = 1.0;
    double gate_raw = 0.0;  // effective gate = sigmoid(gate_raw)
    VectorXd lambda_q1, lambda_k1, lambda_q2, lambda_k2;  // d_k each
    VectorXd rms_gain;                                     // d_k

    int n_heads = 1;
    int d_keys = 1;
    double lambda_init = 0.8;
    double rms_eps = 1e-6;

    double gate() const { return sigmoid(gate_raw); }
    /// exp(<q1,k1>) - exp(<q2,k2>) + lambda_init
    double lambda_full() const;
};

/// Single fully-connected layer over the mean-pooled aligned embeddings.
struct ClassifierHead {
    MatrixXd weight;  // d_llm x n_classes
    VectorXd bias;
};

/// Everything the optimiser updates. The same type doubles as a gradient
/// container; in that role `prototypes.prototypes` is unused.
struct Model {
    EncoderParams encoder;
    PrototypePool prototypes;
    ClassifierHead classifier;
};

/// Default initialisation: linear layers U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// lambda vectors N(0, 0.1), temperature 1, gate_raw 0, unit RMSNorm gain.
Model init_model(const EncoderConfig& config, const EmbeddingTable& table, int n_prototypes, std::uint64_t seed);

/// Same shapes as `like`, all zeros.
Model zeros_like(const Model& like);

/// Visits every trainable tensor in declaration order as (name, contiguous data).
/// Scalars are visited as length-1 spans.
template <class ModelT, class F>
void for_each_tensor(ModelT& m, F&& f) {
    auto& e = m.encoder;
    f("encoder.w_embed", std::span(e.w_embed.data(), static_cast<std::size_t>(e.w_embed.size())));
    f("encoder.b_embed", std::span(e.b_embed.data(), static_cast<std::size_t>(e.b_embed.size())));
    f("encoder.w_q", std::span(e.w_q.data(), static_cast<std::size_t>(e.w_q.size())));
    f("encoder.b_q", std::span(e.b_q.data(), static_cast<std::size_t>(e.b_q.size())));
    f("encoder.w_k", std::span(e.w_k.data(), static_cast<std::size_t>(e.w_k.size())));
    f("encoder.b_k", std::span(e.b_k.data(), static_cast<std::size_t>(e.b_k.size())));
    f("encoder.w_v", std::span(e.w_v.data(), static_cast<std::size_t>(e.w_v.size())));
    f("encoder.b_v", std::span(e.b_v.data(), static_cast<std::size_t>(e.b_v.size())));
    f("encoder.w_out", std::span(e.w_out.data(), static_cast<std::size_t>(e.w_out.size())));
    f("encoder.b_out", std::span(e.b_out.data(), static_cast<std::size_t>(e.b_out.size())));
    f("encoder.temperature", std::span(&e.temperature, 1));
    f("encoder.gate_raw", std::span(&e.gate_raw, 1));
    f("encoder.lambda_q1", std::span(e.lambda_q1.data(), static_cast<std::size_t>(e.lambda_q1.size())));
    f("encoder.lambda_k1", std::span(e.lambda_k1.data(), static_cast<std::size_t>(e.lambda_k1.size())));
    f("encoder.lambda_q2", std::span(e.lambda_q2.data(), static_cast<std::size_t>(e.lambda_q2.size())));
    f("encoder.lambda_k2", std::span(e.lambda_k2.data(), static_cast<std::size_t>(e.lambda_k2.size())));
    f("encoder.rms_gain", std::span(e.rms_gain.data(), static_cast<std::size_t>(e.rms_gain.size())));
    f("prototypes.projection",
      std::span(m.prototypes.projection.data(), static_cast<std::size_t>(m.prototypes.projection.size())));
    f("classifier.weight", std::span(m.classifier.weight.data(), static_cast<std::size_t>(m.classifier.weight.size())));
    f("classifier.bias", std::span(m.classifier.bias.data(), static_cast<std::size_t>(m.classifier.bias.size())));
}

/// B samples x L patches, flattened row-major: row b*L + l holds patch l of sample b.
struct PatchBatch {
    int batch = 0;
    int length = 0;
    MatrixXd flat;  // B*L x patch_len*F

    int rows() const { return batch * length; }
};

/// Flattens patches; every sample needs the same count and every patch the same shape.
PatchBatch make_batch(const std::vector<std::vector<Patch>>& samples);

/// target = flatten(P) * W_embed + b_embed, one row per patch.
MatrixXd embed_patches(const PatchBatch& patches, const EncoderParams& params);

/// Intermediates kept for inspection and for the reverse pass.
struct AttentionTrace {
    MatrixXd q;                  // N x H*d_k
    MatrixXd k;                  // S x H*d_k
    MatrixXd v;                  // S x H*d_k
    std::vector<MatrixXd> attn;  // per head, N x S, rows sum to 1 (before the lambda rescale)
    double scale = 0;
    double lambda_full = 0;
    MatrixXd context;  // N x H*d_k, (1 - lambda_full) * A V, the RMSNorm input
    MatrixXd rms;      // N x H, sqrt(mean(context^2) + eps) per head
    MatrixXd normed;   // N x H*d_k, context / rms (before gain)
    MatrixXd r;        // N x H*d_k, RMSNorm output * (1 - lambda_init)
    MatrixXd o;        // N x H*d_k, gate blend
};

/// Gated cross-attention of patch embeddings (N x d_model) onto source/value
/// rows (S x d_llm). Returns N x d_llm.
MatrixXd gated_cross_attention(const MatrixXd& target, const MatrixXd& source, const MatrixXd& value,
                               const EncoderParams& params, AttentionTrace* trace = nullptr);

struct AlignedRepresentation {
    int batch = 0;
    int length = 0;
    MatrixXd h_align;                 // B*L x d_llm
    MatrixXd h_clf;                   // B x n_classes
    std::vector<int> decoded_tokens;  // B*L, greedy decode of each h_align row

    int token(int b, int l) const { return decoded_tokens[static_cast<std::size_t>(b * length + l)]; }
};

struct ForwardCache {
    PatchBatch input;
    MatrixXd target;
    AttentionTrace attention;
    MatrixXd h_align;
    MatrixXd pooled;  // B x d_llm
    MatrixXd h_clf;
};

/// Runs the encoder and classifier. Uses model.prototypes.prototypes as both
/// attention source and value. Decodes tokens only when `decode` is set.
AlignedRepresentation forward(const PatchBatch& patches, const Model& model, const EmbeddingTable& table,
                              ForwardCache* cache = nullptr, bool decode = true);

/// Reverse pass given upstream gradients of h_align (N x d_llm) and h_clf (B x C).
/// Returns gradients for every trainable tensor; the embedding table is frozen
/// and receives none.
Model backward(const Model& model, const ForwardCache& cache, const EmbeddingTable& table, const MatrixXd& d_h_align,
               const MatrixXd& d_h_clf);

struct CheckpointInfo {
    EncoderConfig config;
    int n_prototypes = 0;
    nlohmann::json extra;  // free-form metadata: seeds, hyperparameters, table checksum
};

/// Writes manifest.json and params.bin (little-endian float64, declaration order).
void save_checkpoint(const std::filesystem::path& dir, const Model& model, const CheckpointInfo& info);

/// Reads a checkpoint; the prototype cache is recomputed from `table`.
Model load_checkpoint(const std::filesystem::path& dir, const EmbeddingTable& table, CheckpointInfo* info = nullptr);

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

}  // namespace timerag
