#pragma once

// Independent reference computations shared by the unit and acceptance tests.

#include "timerag/encoder.hpp"
#include "timerag/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace oracle {

using timerag::MatrixXd;
using timerag::VectorXd;

/// Straight-line forward for one patch with H = 1 and d_k = d_model = 2.
/// Returns h_align (d_llm) and h_clf (n_classes) of a single-patch sample.
struct ScalarResult {
    std::vector<double> target, q, attn, context, r, o, h_align, h_clf;
    double lambda_full = 0;
};

inline ScalarResult scalar_forward(const std::vector<double>& x, const timerag::Model& m) {
    const auto& e = m.encoder;
    const auto& src = m.prototypes.prototypes;
    const int in = static_cast<int>(e.w_embed.rows());
    const int d_llm = static_cast<int>(e.w_out.cols());
    const int s_count = static_cast<int>(src.rows());
    ScalarResult out;

    for (int j = 0; j < 2; ++j) {
        double acc = e.b_embed(j);
        for (int i = 0; i < in; ++i) acc += x[static_cast<std::size_t>(i)] * e.w_embed(i, j);
        out.target.push_back(acc);
    }
    for (int j = 0; j < 2; ++j) {
        out.q.push_back(out.target[0] * e.w_q(0, j) + out.target[1] * e.w_q(1, j) + e.b_q(j));
    }
    std::vector<std::vector<double>> k(static_cast<std::size_t>(s_count)), v(static_cast<std::size_t>(s_count));
    for (int s = 0; s < s_count; ++s) {
        for (int j = 0; j < 2; ++j) {
            double kk = e.b_k(j), vv = e.b_v(j);
            for (int i = 0; i < src.cols(); ++i) {
                kk += src(s, i) * e.w_k(i, j);
                vv += src(s, i) * e.w_v(i, j);
            }
            k[static_cast<std::size_t>(s)].push_back(kk);
            v[static_cast<std::size_t>(s)].push_back(vv);
        }
    }
    const double scale = e.temperature / std::sqrt(2.0);
    std::vector<double> score;
    double top = -1e300;
    for (int s = 0; s < s_count; ++s) {
        score.push_back(scale * (out.q[0] * k[static_cast<std::size_t>(s)][0] + out.q[1] * k[static_cast<std::size_t>(s)][1]));
        top = std::max(top, score.back());
    }
    double denom = 0;
    for (double sc : score) denom += std::exp(sc - top);
    for (double sc : score) out.attn.push_back(std::exp(sc - top) / denom);

    const double d1 = e.lambda_q1(0) * e.lambda_k1(0) + e.lambda_q1(1) * e.lambda_k1(1);
    const double d2 = e.lambda_q2(0) * e.lambda_k2(0) + e.lambda_q2(1) * e.lambda_k2(1);
    out.lambda_full = std::exp(d1) - std::exp(d2) + e.lambda_init;

    for (int j = 0; j < 2; ++j) {
        double acc = 0;
        for (int s = 0; s < s_count; ++s) acc += (1.0 - out.lambda_full) * out.attn[static_cast<std::size_t>(s)] * v[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)];
        out.context.push_back(acc);
    }
    const double rms = std::sqrt((out.context[0] * out.context[0] + out.context[1] * out.context[1]) / 2.0 + e.rms_eps);
    const double g = 1.0 / (1.0 + std::exp(-e.gate_raw));
    for (int j = 0; j < 2; ++j) {
        out.r.push_back(out.context[static_cast<std::size_t>(j)] / rms * e.rms_gain(j) * (1.0 - e.lambda_init));
        out.o.push_back(g * out.r.back() + (1.0 - g) * out.target[static_cast<std::size_t>(j)]);
    }
    for (int mcol = 0; mcol < d_llm; ++mcol) {
        out.h_align.push_back(out.o[0] * e.w_out(0, mcol) + out.o[1] * e.w_out(1, mcol) + e.b_out(mcol));
    }
    const auto& c = m.classifier;
    for (int cls = 0; cls < c.weight.cols(); ++cls) {
        double acc = c.bias(cls);
        for (int d = 0; d < d_llm; ++d) acc += out.h_align[static_cast<std::size_t>(d)] * c.weight(d, cls);
        out.h_clf.push_back(acc);
    }
    return out;
}

/// Total loss as a plain function of the parameters, for finite differences.
inline double loss_at(const timerag::Model& model, const timerag::PatchBatch& batch, const std::vector<int>& tokens,
                      const std::vector<int>& classes, const timerag::EmbeddingTable& table,
                      const timerag::TokenMask& mask) {
    const auto out = timerag::forward(batch, model, table, nullptr, false);
    return timerag::total_loss(out.h_align, out.h_clf, tokens, classes, table, mask).total;
}

struct TensorCheck {
    int coordinates = 0;
    int size = 0;
    double max_rel_error = 0;
};

/// Central differences against the reverse-mode gradient on `per_tensor`
/// random coordinates of every trainable tensor. Relative error uses
/// max(|fd|, |analytic|, floor) as denominator. Many components are around
/// 1e-5, so a step of 1e-4 keeps rounding error well below truncation error.
inline std::map<std::string, TensorCheck> finite_difference_check(const timerag::Model& model,
                                                                 const timerag::PatchBatch& batch,
                                                                 const std::vector<int>& tokens,
                                                                 const std::vector<int>& classes,
                                                                 const timerag::EmbeddingTable& table,
                                                                 const timerag::TokenMask& mask, int per_tensor,
                                                                 timerag::Rng& rng, double step = 1e-4,
                                                                 double floor = 1e-6) {
    const auto analytic = timerag::compute_gradients(model, batch, tokens, classes, table, mask).grad;
    std::vector<std::vector<double>> grads;
    timerag::for_each_tensor(analytic, [&](const char*, std::span<const double> g) { grads.emplace_back(g.begin(), g.end()); });

    std::map<std::string, TensorCheck> result;
    std::vector<std::string> names;
    std::vector<std::size_t> sizes;
    timerag::Model probe = model;
    timerag::for_each_tensor(probe, [&](const char* name, std::span<double> t) {
        names.emplace_back(name);
        sizes.push_back(t.size());
    });
    for (std::size_t ti = 0; ti < names.size(); ++ti) {
        auto& check = result[names[ti]];
        check.size = static_cast<int>(sizes[ti]);
        const int n = std::min<int>(per_tensor, static_cast<int>(sizes[ti]));
        std::vector<std::size_t> picks(sizes[ti]);
        for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = i;
        rng.shuffle(picks.begin(), picks.end());
        for (int c = 0; c < n; ++c) {
            const auto idx = picks[static_cast<std::size_t>(c)];
            auto evaluate = [&](double delta) {
                timerag::Model m = model;
                std::size_t seen = 0;
                timerag::for_each_tensor(m, [&](const char*, std::span<double> t) {
                    if (seen++ == ti) t[idx] += delta;
                });
                m.prototypes.refresh(table);
                return loss_at(m, batch, tokens, classes, table, mask);
            };
            const double fd = (evaluate(step) - evaluate(-step)) / (2 * step);
            const double an = grads[ti][idx];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor});
            check.max_rel_error = std::max(check.max_rel_error, rel);
            ++check.coordinates;
        }
    }
    return result;
}

}  // namespace oracle
