#include "oracles.hpp"
#include "support.hpp"

#include "timerag/errors.hpp"
#include "timerag/training.hpp"
#include "timerag/vocab.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace timerag;

namespace {

EmbeddingTable identity_table(int n) {
    std::vector<std::string> tokens;
    for (int i = 0; i < n; ++i) tokens.push_back("t" + std::to_string(i));
    return EmbeddingTable(tokens, MatrixXd::Identity(n, n));
}

EncoderConfig small_config() {
    EncoderConfig c;
    c.patch_len = 4;
    c.n_features = 2;
    c.d_model = 6;
    c.n_heads = 2;
    c.d_llm = 5;
    c.n_classes = 3;
    return c;
}

// Patches whose level decides the token and whose overall level decides the class.
std::vector<TrainingExample> toy_examples(int n, const EncoderConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TrainingExample> out;
    for (int i = 0; i < n; ++i) {
        TrainingExample ex;
        ex.sample_id = "x" + std::to_string(i);
        ex.class_label = static_cast<int>(rng.index(3));
        for (int l = 0; l < 5; ++l) {
            const int tok = static_cast<int>(rng.index(4));
            Patch p;
            p.sample_id = ex.sample_id;
            p.index = l;
            p.values = testing::random_matrix(c.patch_len, c.n_features, rng, 0, 0.05);
            p.values.array() += 0.25 * tok + 0.1 * ex.class_label;
            ex.patches.push_back(p);
            ex.token_targets.push_back(tok);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace

TEST_CASE("alignment loss closed forms") {
    SUBCASE("zero representation gives ln V") {
        const auto t = identity_table(128);
        const MatrixXd h = MatrixXd::Zero(3, 128);
        const std::vector<int> targets = {0, 5, 127};
        CHECK(alignment_loss(h, targets, t) == doctest::Approx(std::log(128.0)).epsilon(1e-12));
    }
    SUBCASE("saturated target") {
        const auto t = identity_table(4);
        MatrixXd h = MatrixXd::Zero(1, 4);
        h(0, 2) = 1000;
        const std::vector<int> targets = {2};
        CHECK(alignment_loss(h, targets, t) < 1e-300);
        const auto lg = alignment_loss_grad(h, targets, t);
        CHECK(lg.grad.cwiseAbs().maxCoeff() < 1e-300);
    }
    SUBCASE("two tokens with logit gap one") {
        const auto t = identity_table(2);
        MatrixXd h(1, 2);
        h << 1, 0;
        const std::vector<int> targets = {0};
        CHECK(alignment_loss(h, targets, t) == doctest::Approx(0.31326168751822286).epsilon(1e-12));
    }
    SUBCASE("masked competitor is removed, masked target is kept") {
        const auto t = identity_table(3);
        MatrixXd h(1, 3);
        h << 0, 0, 5;
        TokenMask mask;
        mask.masked_ids = {2};
        const std::vector<int> to0 = {0}, to2 = {2};
        CHECK(alignment_loss(h, to0, t, mask) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        CHECK(alignment_loss(h, to2, t, mask) == doctest::Approx(alignment_loss(h, to2, t)).epsilon(1e-12));
        CHECK(std::isfinite(alignment_loss(h, to2, t, mask)));
    }
    SUBCASE("bad targets") {
        const auto t = identity_table(3);
        const MatrixXd h = MatrixXd::Zero(2, 3);
        const std::vector<int> short_targets = {0}, bad = {0, 3};
        CHECK_THROWS_AS(alignment_loss(h, short_targets, t), ArgumentError);
        CHECK_THROWS_AS(alignment_loss(h, bad, t), ArgumentError);
    }
}

TEST_CASE("classification loss closed forms") {
    const MatrixXd zeros = MatrixXd::Zero(4, 5);
    const std::vector<int> labels = {0, 1, 2, 4};
    CHECK(classification_loss(zeros, labels) == doctest::Approx(std::log(5.0)).epsilon(1e-12));

    // two rows: one uniform over 5 classes, one with gap 1 over 2 equal losers
    MatrixXd mixed = MatrixXd::Zero(2, 3);
    mixed(1, 1) = 1;
    const std::vector<int> l2 = {0, 1};
    const double row1 = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
    CHECK(classification_loss(mixed, l2) == doctest::Approx((std::log(3.0) + row1) / 2).epsilon(1e-12));

    const std::vector<int> out_of_range = {5, 0, 0, 0};
    CHECK_THROWS_AS(classification_loss(zeros, out_of_range), ArgumentError);

    SUBCASE("total is the unweighted sum") {
        const auto t = identity_table(4);
        Rng rng(1);
        const MatrixXd h = testing::random_matrix(6, 4, rng);
        const MatrixXd c = testing::random_matrix(2, 3, rng);
        const std::vector<int> tok = {0, 1, 2, 3, 0, 1}, cls = {2, 0};
        const auto parts = total_loss(h, c, tok, cls, t);
        CHECK(parts.align == doctest::Approx(alignment_loss(h, tok, t)).epsilon(1e-14));
        CHECK(parts.clf == doctest::Approx(classification_loss(c, cls)).epsilon(1e-14));
        CHECK(parts.total == doctest::Approx(parts.align + parts.clf).epsilon(1e-14));
    }
}

TEST_CASE("reverse-mode gradients match central differences") {
    const auto c = small_config();
    const auto table = make_synthetic_table(12, c.d_llm, 3);
    Rng rng(8);
    PatchBatch batch;
    batch.batch = 2;
    batch.length = 3;
    batch.flat = testing::random_matrix(6, c.patch_dim(), rng, 0, 1);
    const std::vector<int> tokens = {1, 4, 4, 0, 11, 7}, classes = {2, 0};

    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto model = init_model(c, table, 6, seed);
        model.encoder.gate_raw = 0.3;
        TokenMask mask;
        if (seed == 3) mask.masked_ids = {4, 5, 9};
        Rng pick(seed);
        const auto checks = oracle::finite_difference_check(model, batch, tokens, classes, table, mask, 8, pick);
        CHECK(checks.size() == 20);
        for (const auto& [name, chk] : checks) {
            INFO(name << " seed " << seed);
            CHECK(chk.coordinates > 0);
            CHECK(chk.max_rel_error < 1e-5);
        }
    }

    SUBCASE("directional derivative along the full gradient") {
        const auto model = init_model(c, table, 6, 4);
        const auto g = compute_gradients(model, batch, tokens, classes, table);
        double sq = 0;
        for_each_tensor(g.grad, [&](const char*, std::span<const double> t) {
            for (double x : t) sq += x * x;
        });
        const double h = 1e-6;
        auto shifted = [&](double sign) {
            Model m = model;
            std::vector<std::span<const double>> gs;
            for_each_tensor(g.grad, [&](const char*, std::span<const double> t) { gs.push_back(t); });
            std::size_t i = 0;
            for_each_tensor(m, [&](const char*, std::span<double> t) {
                for (std::size_t j = 0; j < t.size(); ++j) t[j] += sign * h * gs[i][j];
                ++i;
            });
            m.prototypes.refresh(table);
            return oracle::loss_at(m, batch, tokens, classes, table, {});
        };
        const double fd = (shifted(1) - shifted(-1)) / (2 * h);
        CHECK(fd == doctest::Approx(sq).epsilon(1e-6));
        CHECK(g.loss.total == doctest::Approx(oracle::loss_at(model, batch, tokens, classes, table, {})).epsilon(1e-14));
    }
}

TEST_CASE("cosine learning rate") {
    TrainConfig cfg;
    cfg.lr_max = 1e-2;
    cfg.lr_min = 1e-4;
    CHECK(cosine_lr(0, 100, cfg) == doctest::Approx(1e-2).epsilon(1e-14));
    CHECK(cosine_lr(100, 100, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(cosine_lr(50, 100, cfg) == doctest::Approx((1e-2 + 1e-4) / 2).epsilon(1e-12));
    CHECK(cosine_lr(25, 100, cfg) == doctest::Approx(1e-4 + (1e-2 - 1e-4) * (1 + std::cos(std::numbers::pi / 4)) / 2));
    for (long s = 1; s <= 100; ++s) CHECK(cosine_lr(s, 100, cfg) <= cosine_lr(s - 1, 100, cfg));
}

TEST_CASE("dynamic token mask") {
    TrainConfig cfg;
    Rng rng(1);
    std::vector<long> counts(2000, 1);
    counts[7] = 100000;

    CHECK(update_token_mask(counts, 1, 128, cfg, rng).masked_ids.empty());

    SUBCASE("uniform predictions are never masked") {
        const std::vector<long> uniform(2000, 5);
        for (int e = 2; e < 50; ++e) CHECK(update_token_mask(uniform, e, 128, cfg, rng).masked_ids.empty());
    }
    SUBCASE("a dominant token is masked with the configured probability") {
        cfg.mask_probability = 1.0;
        const auto m = update_token_mask(counts, 2, 128, cfg, rng);
        CHECK(m.masked_ids == std::set<int>{7});
        CHECK(m.epoch_built == 2);
        CHECK(m.histogram == counts);
        cfg.mask_probability = 0.0;
        CHECK(update_token_mask(counts, 2, 128, cfg, rng).masked_ids.empty());
        cfg.mask_probability = 0.3;
        int hits = 0;
        for (int i = 0; i < 2000; ++i) hits += update_token_mask(counts, 3, 128, cfg, rng).contains(7);
        CHECK(hits / 2000.0 == doctest::Approx(0.3).epsilon(0.15));
    }
    SUBCASE("only the top fraction of the vocabulary is eligible") {
        cfg.mask_probability = 1.0;
        std::vector<long> many(100, 0);
        for (int i = 0; i < 10; ++i) many[static_cast<std::size_t>(i)] = 1000;
        // each share is 0.1 > 2/40; ceil(0.01 * 100) = 1 eligible token
        CHECK(update_token_mask(many, 2, 40, cfg, rng).masked_ids.size() == 1);
        cfg.mask_top_fraction = 0.05;
        CHECK(update_token_mask(many, 2, 40, cfg, rng).masked_ids.size() == 5);
    }
}

TEST_CASE("training") {
    const auto c = small_config();
    const auto table = make_synthetic_table(12, c.d_llm, 3);
    const auto data = toy_examples(24, c, 2);
    const auto checksum = table_checksum(table);
    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.batch_size = 8;
    cfg.seed = 5;

    const auto a = train(data, table, init_model(c, table, 6, 1), cfg);
    const auto b = train(data, table, init_model(c, table, 6, 1), cfg);
    REQUIRE(a.metrics.size() == 6);
    CHECK_FALSE(a.diverged);
    CHECK(table_checksum(table) == checksum);

    SUBCASE("bit-identical reruns") {
        for (std::size_t i = 0; i < a.metrics.size(); ++i) CHECK(a.metrics[i].loss == b.metrics[i].loss);
        CHECK(a.model.encoder.w_q == b.model.encoder.w_q);
        CHECK(a.model.prototypes.projection == b.model.prototypes.projection);
    }
    SUBCASE("loss decreases") {
        const auto before = score_dataset(init_model(c, table, 6, 1), data, table);
        const auto after = score_dataset(a.model, data, table);
        CHECK(after.loss.total < before.loss.total);
        CHECK(a.metrics.back().loss < a.metrics.front().loss);
    }
    SUBCASE("per-epoch metrics") {
        int seen = 0;
        train(data, table, init_model(c, table, 6, 1), cfg, [&](const EpochMetrics& m) { CHECK(m.epoch == ++seen); });
        CHECK(seen == 6);
        CHECK(a.metrics.front().lr <= cfg.lr_max);
        CHECK(to_json(a.metrics.front()).contains("token_acc"));
    }
    SUBCASE("zero epochs returns the model untouched") {
        cfg.epochs = 0;
        const auto init = init_model(c, table, 6, 1);
        const auto r = train({}, table, init, cfg);
        CHECK(r.metrics.empty());
        CHECK(r.model.encoder.w_embed == init.encoder.w_embed);
    }
    SUBCASE("empty data and bad config") {
        CHECK_THROWS_AS(train({}, table, init_model(c, table, 6, 1), cfg), ArgumentError);
        cfg.batch_size = 0;
        CHECK_THROWS_AS(train(data, table, init_model(c, table, 6, 1), cfg), ConfigError);
    }
    SUBCASE("divergence returns the last good model") {
        cfg.lr_max = 1e200;
        cfg.lr_min = 1e200;
        const auto r = train(data, table, init_model(c, table, 6, 1), cfg);
        CHECK(r.diverged);
        CHECK_FALSE(r.divergence_reason.empty());
        bool finite = true;
        for_each_tensor(r.model, [&](const char*, std::span<const double> t) {
            for (double x : t) finite = finite && std::isfinite(x);
        });
        CHECK(finite);
    }
}

TEST_CASE("build_examples") {
    Rng rng(3);
    auto s = testing::make_sample("a", testing::random_matrix(60, 2, rng, 0, 1));
    std::vector<PatchLabel> labels = {{"a", 0, "stable", 0, "rule"}, {"a", 1, "spike", 3, "rule"}};
    CHECK_THROWS_AS(build_examples({s}, labels, 30), DataError);
    s.failure_label = 2;
    const auto ex = build_examples({s}, labels, 30);
    REQUIRE(ex.size() == 1);
    CHECK(ex[0].token_targets == std::vector<int>{0, 3});
    CHECK(ex[0].class_label == 2);
    labels.pop_back();
    CHECK_THROWS_AS(build_examples({s}, labels, 30), DataError);
}
