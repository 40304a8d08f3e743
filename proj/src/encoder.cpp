#include "timerag/encoder.hpp"

#include "timerag/errors.hpp"
#include "timerag/random.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace timerag {

using nlohmann::json;

void EncoderConfig::validate() const {
    if (patch_len < 1 || n_features < 1) throw ConfigError("patch_len and n_features must be positive");
    if (d_model < 1 || d_llm < 1 || n_heads < 1) throw ConfigError("d_model, d_llm and n_heads must be positive");
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model=" + std::to_string(d_model) + " is not divisible by n_heads=" + std::to_string(n_heads));
    }
    if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    if (!(rms_eps > 0)) throw ConfigError("rms_eps must be positive");
}

double EncoderParams::lambda_full() const {
    return std::exp(lambda_q1.dot(lambda_k1)) - std::exp(lambda_q2.dot(lambda_k2)) + lambda_init;
}

namespace {

void init_linear(MatrixXd& w, VectorXd& b, int fan_in, int fan_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    w.resize(fan_in, fan_out);
    b.resize(fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(-bound, bound);
}

VectorXd normal_vector(int n, double stddev, Rng& rng) {
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v(i) = rng.normal(0.0, stddev);
    return v;
}

void check_finite(const MatrixXd& m, const char* stage) {
    if (!m.allFinite()) throw NumericError(std::string("non-finite values after ") + stage);
}

}  // namespace

Model init_model(const EncoderConfig& config, const EmbeddingTable& table, int n_prototypes, std::uint64_t seed) {
    config.validate();
    if (table.dim() != config.d_llm) {
        throw ConfigError("embedding table dimension " + std::to_string(table.dim()) + " != d_llm " +
                          std::to_string(config.d_llm));
    }
    Rng rng(seed);
    Model m;
    auto& e = m.encoder;
    const int hd = config.n_heads * config.d_keys();
    init_linear(e.w_embed, e.b_embed, config.patch_dim(), config.d_model, rng);
    init_linear(e.w_q, e.b_q, config.d_model, hd, rng);
    init_linear(e.w_k, e.b_k, config.d_llm, hd, rng);
    init_linear(e.w_v, e.b_v, config.d_llm, hd, rng);
    init_linear(e.w_out, e.b_out, hd, config.d_llm, rng);
    e.temperature = 1.0;
    e.gate_raw = 0.0;
    e.lambda_q1 = normal_vector(config.d_keys(), 0.1, rng);
    e.lambda_k1 = normal_vector(config.d_keys(), 0.1, rng);
    e.lambda_q2 = normal_vector(config.d_keys(), 0.1, rng);
    e.lambda_k2 = normal_vector(config.d_keys(), 0.1, rng);
    e.rms_gain = VectorXd::Ones(config.d_keys());
    e.n_heads = config.n_heads;
    e.d_keys = config.d_keys();
    e.lambda_init = config.lambda_init;
    e.rms_eps = config.rms_eps;
    init_linear(m.classifier.weight, m.classifier.bias, config.d_llm, config.n_classes, rng);
    m.prototypes = build_prototypes(table, n_prototypes, rng.next_u64());
    return m;
}

Model zeros_like(const Model& like) {
    Model z = like;
    for_each_tensor(z, [](std::string_view, std::span<double> t) { std::fill(t.begin(), t.end(), 0.0); });
    z.prototypes.prototypes.resize(0, 0);
    return z;
}

PatchBatch make_batch(const std::vector<std::vector<Patch>>& samples) {
    PatchBatch out;
    out.batch = static_cast<int>(samples.size());
    if (samples.empty()) return out;
    out.length = static_cast<int>(samples.front().size());
    if (out.length == 0) throw ArgumentError("sample without patches");
    const auto& first = samples.front().front().values;
    const Eigen::Index rows = first.rows(), cols = first.cols();
    out.flat.resize(out.rows(), rows * cols);
    for (int b = 0; b < out.batch; ++b) {
        if (static_cast<int>(samples[static_cast<std::size_t>(b)].size()) != out.length) {
            throw ArgumentError("ragged batch: sample " + std::to_string(b) + " has " +
                                std::to_string(samples[static_cast<std::size_t>(b)].size()) + " patches, expected " +
                                std::to_string(out.length));
        }
        for (int l = 0; l < out.length; ++l) {
            const auto& p = samples[static_cast<std::size_t>(b)][static_cast<std::size_t>(l)].values;
            if (p.rows() != rows || p.cols() != cols) {
                throw ArgumentError("ragged batch: patch shape " + std::to_string(p.rows()) + "x" +
                                    std::to_string(p.cols()) + " differs from " + std::to_string(rows) + "x" +
                                    std::to_string(cols));
            }
            // Row-major flatten: time step major, feature minor.
            out.flat.row(b * out.length + l) = Eigen::Map<const RowVectorXd>(p.data(), p.size());
        }
    }
    return out;
}

MatrixXd embed_patches(const PatchBatch& patches, const EncoderParams& params) {
    if (patches.flat.cols() != params.w_embed.rows()) {
        throw ArgumentError("patch size " + std::to_string(patches.flat.cols()) + " does not match embedding input " +
                            std::to_string(params.w_embed.rows()));
    }
    MatrixXd target = patches.flat * params.w_embed;
    target.rowwise() += params.b_embed.transpose();
    return target;
}

MatrixXd gated_cross_attention(const MatrixXd& target, const MatrixXd& source, const MatrixXd& value,
                               const EncoderParams& params, AttentionTrace* trace) {
    const int h_count = params.n_heads;
    const int dk = params.d_keys;
    const int hd = h_count * dk;
    if (target.cols() != hd) {
        throw ArgumentError("target width " + std::to_string(target.cols()) + " must equal n_heads*d_keys=" +
                            std::to_string(hd));
    }
    if (source.rows() != value.rows()) throw ArgumentError("source and value row counts differ");

    AttentionTrace local;
    AttentionTrace& t = trace ? *trace : local;
    const Eigen::Index n = target.rows();
    const Eigen::Index s = source.rows();

    t.q = target * params.w_q;
    t.q.rowwise() += params.b_q.transpose();
    t.k = source * params.w_k;
    t.k.rowwise() += params.b_k.transpose();
    t.v = value * params.w_v;
    t.v.rowwise() += params.b_v.transpose();
    check_finite(t.q, "query projection");
    check_finite(t.k, "key projection");
    check_finite(t.v, "value projection");

    t.scale = params.temperature / std::sqrt(static_cast<double>(dk));
    t.lambda_full = params.lambda_full();
    if (!std::isfinite(t.lambda_full)) throw NumericError("non-finite lambda_full");
    const double keep = 1.0 - t.lambda_full;

    t.attn.assign(static_cast<std::size_t>(h_count), MatrixXd());
    t.context.resize(n, hd);
    for (int h = 0; h < h_count; ++h) {
        const MatrixXd scores = t.scale * (t.q.middleCols(h * dk, dk) * t.k.middleCols(h * dk, dk).transpose());
        auto& a = t.attn[static_cast<std::size_t>(h)];
        a = softmax_rows(scores);
        check_finite(a, "attention softmax");
        t.context.middleCols(h * dk, dk).noalias() = keep * (a * t.v.middleCols(h * dk, dk));
    }
    check_finite(t.context, "attention context");

    t.rms.resize(n, h_count);
    t.normed.resize(n, hd);
    t.r.resize(n, hd);
    const double post = 1.0 - params.lambda_init;
    for (Eigen::Index row = 0; row < n; ++row) {
        for (int h = 0; h < h_count; ++h) {
            const auto c = t.context.row(row).segment(h * dk, dk);
            const double rms = std::sqrt(c.squaredNorm() / dk + params.rms_eps);
            t.rms(row, h) = rms;
            t.normed.row(row).segment(h * dk, dk) = c / rms;
            t.r.row(row).segment(h * dk, dk) =
                post * t.normed.row(row).segment(h * dk, dk).cwiseProduct(params.rms_gain.transpose());
        }
    }
    check_finite(t.r, "RMSNorm");

    const double gate = params.gate();
    t.o = gate * t.r + (1.0 - gate) * target;
    MatrixXd out = t.o * params.w_out;
    out.rowwise() += params.b_out.transpose();
    check_finite(out, "output projection");
    (void)s;
    return out;
}

AlignedRepresentation forward(const PatchBatch& patches, const Model& model, const EmbeddingTable& table,
                              ForwardCache* cache, bool decode) {
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.input = patches;
    c.target = embed_patches(patches, model.encoder);
    check_finite(c.target, "patch embedding");
    const auto& protos = model.prototypes.prototypes;
    c.h_align = gated_cross_attention(c.target, protos, protos, model.encoder, &c.attention);

    c.pooled.resize(patches.batch, c.h_align.cols());
    for (int b = 0; b < patches.batch; ++b) {
        c.pooled.row(b) = c.h_align.middleRows(b * patches.length, patches.length).colwise().mean();
    }
    c.h_clf = c.pooled * model.classifier.weight;
    c.h_clf.rowwise() += model.classifier.bias.transpose();
    check_finite(c.h_clf, "classifier head");

    AlignedRepresentation out;
    out.batch = patches.batch;
    out.length = patches.length;
    out.h_align = c.h_align;
    out.h_clf = c.h_clf;
    if (decode) out.decoded_tokens = decode_greedy_rows(c.h_align, table);
    return out;
}

Model backward(const Model& model, const ForwardCache& cache, const EmbeddingTable& table, const MatrixXd& d_h_align,
               const MatrixXd& d_h_clf) {
    const auto& p = model.encoder;
    const auto& t = cache.attention;
    const int h_count = p.n_heads;
    const int dk = p.d_keys;
    const int batch = cache.input.batch;
    const int length = cache.input.length;
    const Eigen::Index n = cache.h_align.rows();

    Model g = zeros_like(model);
    auto& ge = g.encoder;

    // Classifier head and mean pooling.
    g.classifier.weight.noalias() = cache.pooled.transpose() * d_h_clf;
    g.classifier.bias = d_h_clf.colwise().sum().transpose();
    const MatrixXd d_pooled = d_h_clf * model.classifier.weight.transpose();
    MatrixXd d_h = d_h_align;
    for (int b = 0; b < batch; ++b) {
        d_h.middleRows(b * length, length).rowwise() += d_pooled.row(b) / static_cast<double>(length);
    }

    // Output projection.
    ge.w_out.noalias() = t.o.transpose() * d_h;
    ge.b_out = d_h.colwise().sum().transpose();
    const MatrixXd d_o = d_h * p.w_out.transpose();

    // Gate blend.
    const double gate = p.gate();
    const MatrixXd d_r = gate * d_o;
    MatrixXd d_target = (1.0 - gate) * d_o;
    ge.gate_raw = gate * (1.0 - gate) * ((t.r - cache.target).cwiseProduct(d_o)).sum();

    // RMSNorm with gain, scaled by (1 - lambda_init).
    const double post = 1.0 - p.lambda_init;
    MatrixXd d_context(n, h_count * dk);
    ge.rms_gain.setZero();
    for (Eigen::Index row = 0; row < n; ++row) {
        for (int h = 0; h < h_count; ++h) {
            const auto u = t.normed.row(row).segment(h * dk, dk);
            const auto dr = d_r.row(row).segment(h * dk, dk);
            ge.rms_gain += post * dr.cwiseProduct(u).transpose();
            const RowVectorXd du = post * dr.cwiseProduct(p.rms_gain.transpose());
            d_context.row(row).segment(h * dk, dk) = (du - u * (u.dot(du) / dk)) / t.rms(row, h);
        }
    }

    // Lambda rescale: context = keep * A V with keep = 1 - lambda_full.
    const double keep = 1.0 - t.lambda_full;
    MatrixXd d_q(n, h_count * dk);
    MatrixXd d_k = MatrixXd::Zero(t.k.rows(), h_count * dk);
    MatrixXd d_v = MatrixXd::Zero(t.v.rows(), h_count * dk);
    double d_keep = 0;
    double d_scale = 0;
    for (int h = 0; h < h_count; ++h) {
        const auto& a = t.attn[static_cast<std::size_t>(h)];
        const auto vh = t.v.middleCols(h * dk, dk);
        const auto kh = t.k.middleCols(h * dk, dk);
        const auto qh = t.q.middleCols(h * dk, dk);
        const MatrixXd av = a * vh;
        const auto dc = d_context.middleCols(h * dk, dk);
        d_keep += dc.cwiseProduct(av).sum();
        const MatrixXd d_av = keep * dc;
        d_v.middleCols(h * dk, dk).noalias() = a.transpose() * d_av;
        const MatrixXd d_a = d_av * vh.transpose();
        // softmax: dS = A .* (dA - rowsum(dA .* A))
        const VectorXd inner = d_a.cwiseProduct(a).rowwise().sum();
        const MatrixXd d_s = a.cwiseProduct(d_a - inner.replicate(1, a.cols()));
        const MatrixXd raw = qh * kh.transpose();
        d_scale += d_s.cwiseProduct(raw).sum();
        d_q.middleCols(h * dk, dk).noalias() = t.scale * (d_s * kh);
        d_k.middleCols(h * dk, dk).noalias() = t.scale * (d_s.transpose() * qh);
    }
    ge.temperature = d_scale / std::sqrt(static_cast<double>(dk));

    const double d_lambda_full = -d_keep;
    const double e1 = std::exp(p.lambda_q1.dot(p.lambda_k1));
    const double e2 = std::exp(p.lambda_q2.dot(p.lambda_k2));
    ge.lambda_q1 = d_lambda_full * e1 * p.lambda_k1;
    ge.lambda_k1 = d_lambda_full * e1 * p.lambda_q1;
    ge.lambda_q2 = -d_lambda_full * e2 * p.lambda_k2;
    ge.lambda_k2 = -d_lambda_full * e2 * p.lambda_q2;

    // Projections.
    const auto& protos = model.prototypes.prototypes;
    ge.w_q.noalias() = cache.target.transpose() * d_q;
    ge.b_q = d_q.colwise().sum().transpose();
    d_target.noalias() += d_q * p.w_q.transpose();
    ge.w_k.noalias() = protos.transpose() * d_k;
    ge.b_k = d_k.colwise().sum().transpose();
    ge.w_v.noalias() = protos.transpose() * d_v;
    ge.b_v = d_v.colwise().sum().transpose();
    MatrixXd d_protos = d_k * p.w_k.transpose();
    d_protos.noalias() += d_v * p.w_v.transpose();
    g.prototypes.projection.noalias() = d_protos * table.vectors().transpose();

    // Patch embedding.
    ge.w_embed.noalias() = cache.input.flat.transpose() * d_target;
    ge.b_embed = d_target.colwise().sum().transpose();

    bool finite = true;
    for_each_tensor(g, [&](std::string_view, std::span<double> s) {
        for (double x : s) finite = finite && std::isfinite(x);
    });
    if (!finite) throw NumericError("non-finite gradient");
    return g;
}

json to_json(const EncoderConfig& c) {
    return {{"patch_len", c.patch_len}, {"n_features", c.n_features}, {"d_model", c.d_model},
            {"n_heads", c.n_heads},     {"d_llm", c.d_llm},           {"n_classes", c.n_classes},
            {"lambda_init", c.lambda_init}, {"rms_eps", c.rms_eps}};
}

EncoderConfig encoder_config_from_json(const json& j) {
    EncoderConfig c;
    c.patch_len = j.at("patch_len").get<int>();
    c.n_features = j.at("n_features").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_llm = j.at("d_llm").get<int>();
    c.n_classes = j.at("n_classes").get<int>();
    c.lambda_init = j.at("lambda_init").get<double>();
    c.rms_eps = j.at("rms_eps").get<double>();
    c.validate();
    return c;
}

namespace {

Model shaped_model(const EncoderConfig& c, int n_prototypes, int vocab_size) {
    const int hd = c.n_heads * c.d_keys();
    Model m;
    auto& e = m.encoder;
    e.w_embed.resize(c.patch_dim(), c.d_model);
    e.b_embed.resize(c.d_model);
    e.w_q.resize(c.d_model, hd);
    e.b_q.resize(hd);
    e.w_k.resize(c.d_llm, hd);
    e.b_k.resize(hd);
    e.w_v.resize(c.d_llm, hd);
    e.b_v.resize(hd);
    e.w_out.resize(hd, c.d_llm);
    e.b_out.resize(c.d_llm);
    e.lambda_q1.resize(c.d_keys());
    e.lambda_k1.resize(c.d_keys());
    e.lambda_q2.resize(c.d_keys());
    e.lambda_k2.resize(c.d_keys());
    e.rms_gain.resize(c.d_keys());
    e.n_heads = c.n_heads;
    e.d_keys = c.d_keys();
    e.lambda_init = c.lambda_init;
    e.rms_eps = c.rms_eps;
    m.prototypes.projection.resize(n_prototypes, vocab_size);
    m.classifier.weight.resize(c.d_llm, c.n_classes);
    m.classifier.bias.resize(c.n_classes);
    return m;
}

void write_le(std::ostream& out, double x) {
    auto bits = std::bit_cast<std::uint64_t>(x);
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

double read_le(const unsigned char* buf) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const CheckpointInfo& info) {
    std::filesystem::create_directories(dir);
    json tensors = json::array();
    std::size_t total = 0;
    for_each_tensor(model, [&](std::string_view name, std::span<const double> t) {
        tensors.push_back({{"name", std::string(name)}, {"size", t.size()}});
        total += t.size();
    });
    const json manifest = {{"format", "timerag-checkpoint"},
                           {"version", 1},
                           {"encoder", to_json(info.config)},
                           {"n_prototypes", info.n_prototypes},
                           {"vocab_size", model.prototypes.projection.cols()},
                           {"dtype", "float64-le"},
                           {"tensors", tensors},
                           {"total_values", total},
                           {"extra", info.extra}};
    {
        std::ofstream out(dir / "manifest.json");
        if (!out) throw ArgumentError("cannot write checkpoint manifest in " + dir.string());
        out << manifest.dump(2) << '\n';
    }
    std::ofstream blob(dir / "params.bin", std::ios::binary);
    if (!blob) throw ArgumentError("cannot write checkpoint blob in " + dir.string());
    for_each_tensor(model, [&](std::string_view, std::span<const double> t) {
        for (double x : t) write_le(blob, x);
    });
}

Model load_checkpoint(const std::filesystem::path& dir, const EmbeddingTable& table, CheckpointInfo* info) {
    json manifest;
    try {
        std::ifstream in(dir / "manifest.json");
        if (!in) throw FormatError("missing " + (dir / "manifest.json").string());
        manifest = json::parse(in);
        if (manifest.at("format") != "timerag-checkpoint" || manifest.at("version") != 1) {
            throw FormatError("unsupported checkpoint format/version");
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad checkpoint manifest: ") + e.what());
    }
    CheckpointInfo local;
    CheckpointInfo& ci = info ? *info : local;
    ci.config = encoder_config_from_json(manifest.at("encoder"));
    ci.n_prototypes = manifest.at("n_prototypes").get<int>();
    ci.extra = manifest.value("extra", json::object());
    const int vocab_size = manifest.at("vocab_size").get<int>();
    if (vocab_size != table.size()) {
        throw FormatError("checkpoint expects a vocabulary of " + std::to_string(vocab_size) + " tokens, table has " +
                          std::to_string(table.size()));
    }
    if (ci.config.d_llm != table.dim()) throw FormatError("checkpoint d_llm does not match the embedding table");

    Model m = shaped_model(ci.config, ci.n_prototypes, vocab_size);
    std::ifstream blob(dir / "params.bin", std::ios::binary);
    if (!blob) throw FormatError("missing " + (dir / "params.bin").string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
    std::size_t expected = 0;
    for_each_tensor(m, [&](std::string_view, std::span<double> t) { expected += t.size(); });
    if (bytes.size() != expected * 8) {
        throw FormatError("params.bin holds " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(expected * 8));
    }
    std::size_t offset = 0;
    std::size_t index = 0;
    const auto& listed = manifest.at("tensors");
    for_each_tensor(m, [&](std::string_view name, std::span<double> t) {
        if (index >= listed.size() || listed[index].at("name") != std::string(name) ||
            listed[index].at("size").get<std::size_t>() != t.size()) {
            throw FormatError("checkpoint tensor list does not match tensor '" + std::string(name) + "'");
        }
        ++index;
        for (double& x : t) {
            x = read_le(bytes.data() + offset);
            offset += 8;
        }
    });
    m.prototypes.refresh(table);
    return m;
}

}  // namespace timerag
