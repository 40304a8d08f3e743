#include "timerag/cli.hpp"

#include "timerag/abstraction.hpp"
#include "timerag/agent.hpp"
#include "timerag/config.hpp"
#include "timerag/errors.hpp"
#include "timerag/evalharness.hpp"
#include "timerag/hash.hpp"
#include "timerag/prompt.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <array>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

namespace timerag::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    int k = 0;
    int patch_len = 0;
    int max_iterations = 0;
    std::string mock_llm;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* k_opt = nullptr;
    CLI::Option* patch_len_opt = nullptr;
    CLI::Option* max_iterations_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    c.seed_opt = sub->add_option("--seed", c.seed, "Seed for every random choice");
    c.k_opt = sub->add_option("--k", c.k, "Chunks retrieved per query")->check(CLI::PositiveNumber);
    c.patch_len_opt = sub->add_option("--patch-len", c.patch_len, "Time steps per patch")->check(CLI::PositiveNumber);
    c.max_iterations_opt =
        sub->add_option("--max-iterations", c.max_iterations, "Reflection iterations")->check(CLI::Range(1, 5));
    sub->add_option("--mock-llm", c.mock_llm, "Scripted responses replacing the chat endpoint")
        ->check(CLI::ExistingFile);
}

RunConfig resolve_config(const Common& c) {
    RunConfig cfg = c.config.empty() ? config_from_json(json::object()) : load_config(c.config);
    if (c.seed_opt->count()) {
        cfg.seed = c.seed;
        cfg.train.seed = c.seed;
    }
    if (c.k_opt->count()) cfg.agent.k = c.k;
    if (c.patch_len_opt->count()) cfg.data.patch_len = c.patch_len;
    if (c.max_iterations_opt->count()) cfg.agent.max_iterations = c.max_iterations;
    cfg.validate();
    return cfg;
}

std::unique_ptr<ChatClient> make_client(const Common& c, const RunConfig& cfg) {
    if (!c.mock_llm.empty()) return std::make_unique<MockChatClient>(load_mock_script(c.mock_llm));
    return std::make_unique<HttpChatClient>(cfg.llm_config());
}

EmbeddingTable make_table(const RunConfig& cfg) {
    EmbeddingTable table = cfg.vocab.table.empty()
                               ? make_synthetic_table(cfg.vocab.size, cfg.model.d_llm, cfg.vocab.seed,
                                                      LabelVocabulary::default_tokens())
                               : load_embedding_table(cfg.vocab.table);
    if (table.dim() != cfg.model.d_llm) {
        throw ConfigError("embedding table dimension " + std::to_string(table.dim()) + " differs from model.d_llm " +
                          std::to_string(cfg.model.d_llm));
    }
    return table;
}

/// Standardised and normalised copies; already normalised samples pass through.
std::vector<MetricSample> prepare(const std::vector<MetricSample>& raw, const RunConfig& cfg) {
    std::vector<MetricSample> out;
    for (const auto& s : raw) {
        if (s.normalized() && s.length() == cfg.data.length) {
            out.push_back(s);
            continue;
        }
        for (const auto& w : standardize_length(s, cfg.data.length)) out.push_back(normalize_minmax(w));
    }
    return out;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::vector<std::vector<std::string>> rule_tokens(const std::vector<MetricSample>& samples, int patch_len) {
    RuleAbstractor abstractor(LabelVocabulary::positional());
    std::vector<std::vector<std::string>> tokens;
    for (const auto& s : samples) {
        auto& row = tokens.emplace_back();
        for (const auto& p : segment_into_patches(s, patch_len)) row.push_back(abstractor.label(p).token);
    }
    return tokens;
}

struct LoadedModel {
    EmbeddingTable table;
    Model model;
    CheckpointInfo info;
};

LoadedModel load_model(const fs::path& dir, const RunConfig& cfg) {
    LoadedModel m{make_table(cfg), {}, {}};
    m.model = load_checkpoint(dir, m.table, &m.info);
    if (m.info.extra.contains("table_checksum") &&
        m.info.extra["table_checksum"].get<std::string>() != to_hex(table_checksum(m.table))) {
        throw ConfigError("checkpoint was trained against a different embedding table");
    }
    return m;
}

/// Decoded patch tokens from a checkpoint when given, otherwise from the rule abstractor.
std::vector<std::vector<std::string>> patch_tokens(const std::vector<MetricSample>& samples,
                                                   const std::optional<LoadedModel>& lm, const RunConfig& cfg,
                                                   std::ostream* err) {
    if (!lm) {
        if (err) *err << "warning: no checkpoint given; using rule-abstractor tokens for the query\n";
        return rule_tokens(samples, cfg.data.patch_len);
    }
    std::vector<std::vector<Patch>> patches;
    for (const auto& s : samples) patches.push_back(segment_into_patches(s, lm->info.config.patch_len));
    const auto aligned = forward(make_batch(patches), lm->model, lm->table);
    std::vector<std::vector<std::string>> tokens(samples.size());
    for (int b = 0; b < aligned.batch; ++b) {
        for (int l = 0; l < aligned.length; ++l) tokens[static_cast<std::size_t>(b)].push_back(lm->table.token_of(aligned.token(b, l)));
    }
    return tokens;
}

int cmd_gen_synth(const Common& c, int n, const std::string& out_path, const std::string& shapes_path,
                  std::ostream& out) {
    const auto cfg = resolve_config(c);
    SyntheticConfig sc;
    sc.length = cfg.data.length;
    sc.patch_len = cfg.data.patch_len;
    const auto scenarios = generate_synthetic(n, sc, cfg.seed);
    std::vector<MetricSample> samples;
    for (const auto& s : scenarios) samples.push_back(s.sample);
    save_samples(out_path, samples);
    if (!shapes_path.empty()) {
        std::ofstream shapes(shapes_path);
        if (!shapes) throw ArgumentError("cannot write " + shapes_path);
        for (const auto& s : scenarios) {
            json names = json::array();
            for (auto shape : s.shapes) names.push_back(shape_name(shape));
            shapes << json{{"id", s.sample.id}, {"failure_class", s.failure_class}, {"shapes", names}}.dump() << '\n';
        }
    }
    out << "wrote " << samples.size() << " scenarios to " << out_path << '\n';
    return 0;
}

int cmd_preprocess(const Common& c, const std::string& in, const std::string& format, const std::string& out_path,
                   std::ostream& out) {
    const auto cfg = resolve_config(c);
    const auto raw = load_samples(in, parse_sample_format(format.empty() ? cfg.data.format : format));
    std::vector<MetricSample> prepared;
    for (const auto& s : raw) {
        for (const auto& w : standardize_length(s, cfg.data.length)) prepared.push_back(normalize_minmax(w));
    }
    save_samples(out_path, prepared);
    out << "preprocessed " << raw.size() << " samples into " << prepared.size() << " windows of "
        << cfg.data.length << " steps\n";
    return 0;
}

int cmd_label(const Common& c, const std::string& in, const std::string& out_path, const std::string& abstractor_name,
              std::ostream& out) {
    const auto cfg = resolve_config(c);
    const auto samples = load_samples(in, SampleFormat::Jsonl);
    for (const auto& s : samples) {
        if (!s.normalized()) throw DataError("sample " + s.id + " is not normalised; run preprocess first");
    }
    const auto table = make_table(cfg);
    auto vocab = LabelVocabulary::from_table(table);
    std::vector<LabeledPatch> labeled;
    if (abstractor_name == "rule") {
        RuleAbstractor abstractor(vocab);
        labeled = label_dataset(samples, abstractor, cfg.data.patch_len);
    } else {
        auto client = make_client(c, cfg);
        LlmAbstractor abstractor(vocab, *client, default_abstraction_template(), c.mock_llm.empty() ? cfg.llm.max_in_flight : 1);
        labeled = label_dataset(samples, abstractor, cfg.data.patch_len);
    }
    std::vector<PatchLabel> labels;
    for (auto& lp : labeled) labels.push_back(std::move(lp.label));
    save_labels(out_path, labels);
    out << "labelled " << labels.size() << " patches\n";
    return 0;
}

int cmd_train(const Common& c, std::string samples_path, const std::string& labels_path, const std::string& out_dir,
              double holdout, std::ostream& out) {
    auto cfg = resolve_config(c);
    if (samples_path.empty()) samples_path = cfg.paths.samples;
    if (samples_path.empty()) throw ArgumentError("train needs --samples or paths.samples in the config");
    const auto samples = load_samples(samples_path, SampleFormat::Jsonl);
    if (samples.empty()) throw DataError("no samples in " + samples_path);
    const auto labels = load_labels(labels_path);
    auto examples = build_examples(samples, labels, cfg.data.patch_len);

    std::vector<TrainingExample> held;
    if (holdout > 0) {
        Rng rng(cfg.seed);
        rng.shuffle(examples.begin(), examples.end());
        const auto n_held = static_cast<std::size_t>(holdout * static_cast<double>(examples.size()));
        held.assign(examples.end() - static_cast<std::ptrdiff_t>(n_held), examples.end());
        examples.resize(examples.size() - n_held);
    }

    const auto table = make_table(cfg);
    const auto enc = cfg.encoder(static_cast<int>(samples.front().features()));
    Model model = init_model(enc, table, cfg.model.n_prototypes, cfg.seed);
    const auto result = train(examples, table, std::move(model), cfg.train);

    fs::create_directories(out_dir);
    CheckpointInfo info;
    info.config = enc;
    info.n_prototypes = cfg.model.n_prototypes;
    info.extra = {{"seed", cfg.seed},
                  {"table_checksum", to_hex(table_checksum(table))},
                  {"train", to_json(cfg)["train"]},
                  {"diverged", result.diverged}};
    save_checkpoint(out_dir, result.model, info);
    write_metrics_log(fs::path(out_dir) / "metrics.jsonl", result.metrics);

    if (result.diverged) out << "warning: training diverged (" << result.divergence_reason << "); kept last good epoch\n";
    if (!result.metrics.empty()) {
        const auto& last = result.metrics.back();
        out << "epochs " << result.metrics.size() << ", loss " << format_fixed(last.loss) << ", token_acc "
            << format_fixed(last.token_acc) << ", class_acc " << format_fixed(last.class_acc) << '\n';
    }
    if (!held.empty()) {
        const auto score = score_dataset(result.model, held, table);
        out << "holdout " << held.size() << ": loss " << format_fixed(score.loss.total) << ", token_acc "
            << format_fixed(score.token_acc) << ", class_acc " << format_fixed(score.class_acc) << '\n';
    }
    out << "checkpoint written to " << out_dir << '\n';
    return 0;
}

int cmd_ingest(const Common& c, const std::string& docs_path, std::string store_path, bool no_filter,
               std::ostream& out, std::ostream& err) {
    const auto cfg = resolve_config(c);
    if (store_path.empty()) store_path = cfg.store.path;
    const auto docs = load_documents(docs_path);
    VectorStore store = fs::exists(store_path) ? load_store(store_path) : VectorStore(cfg.store.embed_dim);
    HashingEmbedder embedder(cfg.store.embed_dim);

    std::unique_ptr<ChatClient> client;
    std::unique_ptr<ChunkClassifier> classifier;
    if (no_filter) {
        classifier = std::make_unique<PredicateClassifier>([](const Chunk&) { return true; });
    } else {
        client = make_client(c, cfg);
        classifier = std::make_unique<LlmChunkClassifier>(*client);
    }
    const auto report = ingest(docs, embedder, *classifier, store, cfg.store.max_chunk_tokens);
    for (const auto& w : report.warnings) err << "warning: " << w << '\n';
    save_store(store, store_path);
    out << json{{"docs", report.docs}, {"chunks", report.chunks}, {"kept", report.kept}, {"embedded", report.embedded},
                {"store_size", store.size()}}
               .dump()
        << '\n';
    return 0;
}

int cmd_diagnose(const Common& c, const std::string& sample_path, std::string store_path, const std::string& ckpt,
                 const std::string& out_path, const std::string& trace_path, std::ostream& out, std::ostream& err) {
    const auto cfg = resolve_config(c);
    if (store_path.empty()) store_path = cfg.store.path;
    const auto samples = prepare(load_samples(sample_path, parse_sample_format(cfg.data.format)), cfg);
    if (samples.empty()) throw DataError("no usable samples in " + sample_path);
    std::optional<LoadedModel> lm;
    if (!ckpt.empty()) lm = load_model(ckpt, cfg);

    const auto store = load_store(store_path);
    if (store.empty()) throw DataError("vector store " + store_path + " is empty");
    HashingEmbedder embedder(store.dim());
    const auto query = compose_query(patch_tokens(samples, lm, cfg, &err), samples, embedder);

    auto client = make_client(c, cfg);
    ReflectionTrace trace;
    ReflectionOptions opts{cfg.agent.max_iterations, cfg.agent.k, cfg.agent.k_gap};
    DiagnosisReport report;
    try {
        report = reflect_loop(query, store, *client, embedder, trace, opts);
    } catch (const AgentError& e) {
        if (!trace_path.empty()) write_json(trace_path, to_json(trace));
        err << "transcript:\n" << e.transcript();
        throw;
    } catch (const std::exception&) {
        if (!trace_path.empty()) write_json(trace_path, to_json(trace));
        throw;
    }
    for (const auto& it : trace.iterations) {
        for (const auto& w : it.warnings) err << "warning: iteration " << it.iteration << ": " << w << '\n';
    }
    if (!trace_path.empty()) write_json(trace_path, to_json(trace));
    if (out_path.empty()) {
        out << to_json(report).dump(2) << '\n';
    } else {
        write_json(out_path, to_json(report));
    }
    return 0;
}

int cmd_eval(const Common& c, const std::string& samples_path, const std::string& pipeline, int n_choices,
             const std::string& ckpt, const std::string& store_path, const std::string& out_path, std::ostream& out,
             std::ostream& err) {
    auto cfg = resolve_config(c);
    if (n_choices) cfg.eval.n_choices = n_choices;
    cfg.validate();
    const auto samples = prepare(load_samples(samples_path, parse_sample_format(cfg.data.format)), cfg);
    std::vector<MCQItem> items;
    for (std::size_t i = 0; i < samples.size(); ++i) items.push_back(build_mcq(samples[i], cfg.eval.n_choices, cfg.seed + i));

    std::unique_ptr<ChatClient> client;
    std::optional<LoadedModel> lm;
    std::optional<VectorStore> store;
    McqPipeline run;
    if (pipeline == "oracle") {
        run = oracle_pipeline();
    } else if (pipeline == "random") {
        run = random_pipeline(cfg.seed);
    } else {
        client = make_client(c, cfg);
        if (!ckpt.empty()) {
            lm = load_model(ckpt, cfg);
        } else {
            err << "warning: no checkpoint given; using rule-abstractor tokens for the query\n";
        }
        if (!store_path.empty()) store = load_store(store_path);
        const int dim = store ? store->dim() : cfg.store.embed_dim;
        run = llm_pipeline(*client, [&, dim](const MCQItem& item) {
            HashingEmbedder embedder(dim);
            const std::vector<MetricSample> one = {item.sample};
            const auto query = compose_query(patch_tokens(one, lm, cfg, nullptr), one, embedder);
            std::string context = query.narrative;
            if (store && !store->empty()) {
                context += "\nRelevant historical incidents:\n";
                for (const auto& sc : store->retrieve_topk(query.embedding, cfg.agent.k)) {
                    context += "[chunk " + sc.chunk.id + "]\n" + sc.chunk.text + "\n";
                }
            }
            return context;
        });
    }
    const auto report = evaluate_accuracy(items, run, cfg.seed);
    if (!out_path.empty()) write_results(out_path, report);
    out << json{{"accuracy", report.accuracy}, {"n", report.n}, {"seed", report.seed}}.dump() << '\n';
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Time-series aligned retrieval-augmented root cause analysis", "timerag"};
    app.require_subcommand(1, 1);

    std::array<Common, 7> commons;
    int n = 0;
    std::string in, out_path, format, shapes, samples, labels, docs, store, ckpt, trace, abstractor = "rule",
                                                                                     pipeline = "oracle";
    double holdout = 0;
    bool no_filter = false;
    int n_choices = 0;

    auto* gen = app.add_subcommand("gen-synth", "Generate synthetic labelled scenarios");
    gen->add_option("--n", n, "Number of scenarios")->required()->check(CLI::PositiveNumber);
    gen->add_option("--out", out_path, "Output samples JSONL")->required();
    gen->add_option("--shapes", shapes, "Optional JSONL record of per-slot shapes");

    auto* pre = app.add_subcommand("preprocess", "Standardise length and min-max normalise samples");
    pre->add_option("--in", in, "Input samples (JSONL file or CSV directory)")->required();
    pre->add_option("--format", format, "jsonl or csv-dir")->check(CLI::IsMember({"jsonl", "csv-dir"}));
    pre->add_option("--out", out_path, "Output samples JSONL")->required();

    auto* lab = app.add_subcommand("label", "Assign one vocabulary token per patch");
    lab->add_option("--in", in, "Preprocessed samples JSONL")->required()->check(CLI::ExistingFile);
    lab->add_option("--out", out_path, "Output labels JSONL")->required();
    lab->add_option("--abstractor", abstractor, "rule or llm")->check(CLI::IsMember({"rule", "llm"}));

    auto* tr = app.add_subcommand("train", "Train the alignment encoder");
    tr->add_option("--samples", samples, "Preprocessed samples JSONL (default: paths.samples)");
    tr->add_option("--data", labels, "Patch labels JSONL")->required()->check(CLI::ExistingFile);
    tr->add_option("--out", out_path, "Checkpoint directory")->required();
    tr->add_option("--holdout", holdout, "Fraction held out for scoring")->check(CLI::Range(0.0, 0.9));

    auto* ing = app.add_subcommand("ingest", "Chunk, filter, embed and index incident documents");
    ing->add_option("--docs", docs, "Documents JSONL")->required()->check(CLI::ExistingFile);
    ing->add_option("--store", store, "Store file (default: store.path)");
    ing->add_flag("--no-filter", no_filter, "Keep every chunk without asking the classifier");

    auto* dia = app.add_subcommand("diagnose", "Run retrieval-augmented diagnosis with reflection");
    dia->add_option("--sample", in, "Samples JSONL to diagnose")->required()->check(CLI::ExistingFile);
    dia->add_option("--store", store, "Store file (default: store.path)");
    dia->add_option("--ckpt", ckpt, "Encoder checkpoint directory")->check(CLI::ExistingDirectory);
    dia->add_option("--out", out_path, "Report JSON (default: stdout)");
    dia->add_option("--trace", trace, "Reflection trace JSON");

    auto* ev = app.add_subcommand("eval", "Multiple-choice failure-type accuracy");
    ev->add_option("--samples", samples, "Labelled samples JSONL")->required()->check(CLI::ExistingFile);
    ev->add_option("--pipeline", pipeline, "oracle, random or llm")->check(CLI::IsMember({"oracle", "random", "llm"}));
    ev->add_option("--n-choices", n_choices, "4 or 5 choices")->check(CLI::IsMember({4, 5}));
    ev->add_option("--ckpt", ckpt, "Encoder checkpoint directory")->check(CLI::ExistingDirectory);
    ev->add_option("--store", store, "Store file for retrieved context");
    ev->add_option("--out", out_path, "Per-item results JSONL");

    const std::array<CLI::App*, 7> subs = {gen, pre, lab, tr, ing, dia, ev};
    for (std::size_t i = 0; i < subs.size(); ++i) add_common(subs[i], commons[i]);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return 1;
    }

    try {
        if (*gen) return cmd_gen_synth(commons[0], n, out_path, shapes, out);
        if (*pre) return cmd_preprocess(commons[1], in, format, out_path, out);
        if (*lab) return cmd_label(commons[2], in, out_path, abstractor, out);
        if (*tr) return cmd_train(commons[3], samples, labels, out_path, holdout, out);
        if (*ing) return cmd_ingest(commons[4], docs, store, no_filter, out, err);
        if (*dia) return cmd_diagnose(commons[5], in, store, ckpt, out_path, trace, out, err);
        if (*ev) return cmd_eval(commons[6], samples, pipeline, n_choices, ckpt, store, out_path, out, err);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace timerag::cli
