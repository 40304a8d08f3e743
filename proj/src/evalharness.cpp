#include "timerag/evalharness.hpp"

#include "timerag/errors.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <regex>

namespace timerag {

using nlohmann::json;

const std::string& shape_name(Shape s) {
    static const std::array<std::string, 6> names = {"flat", "ramp_up", "ramp_down", "spike", "oscillation", "noise"};
    return names[static_cast<std::size_t>(s)];
}

const std::string& expected_token(Shape s) {
    static const std::array<std::string, 6> tokens = {"stable", "rising", "falling", "spike", "oscillating", "noisy"};
    return tokens[static_cast<std::size_t>(s)];
}

const std::vector<std::string>& failure_class_names() {
    static const std::vector<std::string> names = {"cpu hog", "memory leak", "network delay", "packet loss",
                                                   "pod failure"};
    return names;
}

Shape class_shape(int failure_class) {
    static const std::array<Shape, kNumFailureClasses> table = {Shape::Spike, Shape::RampUp, Shape::Oscillation,
                                                                Shape::Noise, Shape::RampDown};
    if (failure_class < 0 || failure_class >= kNumFailureClasses) {
        throw ArgumentError("failure class out of range: " + std::to_string(failure_class));
    }
    return table[static_cast<std::size_t>(failure_class)];
}

void SyntheticConfig::validate() const {
    if (patch_len < 10 || length < patch_len || length % patch_len != 0) {
        throw ConfigError("synthetic length must be a positive multiple of patch_len (>= 10)");
    }
    const int slots = length / patch_len;
    if (min_anomalous < 1 || max_anomalous < min_anomalous || max_anomalous + 1 > slots) {
        throw ConfigError("anomalous segment bounds do not fit the slot count");
    }
    if (distractor_probability < 0 || distractor_probability > 1) throw ConfigError("distractor_probability must be in [0, 1]");
    if (jitter < 0 || jitter > 0.01) throw ConfigError("jitter must be in [0, 0.01]");
    if (!(frequency_seconds > 0)) throw ConfigError("frequency_seconds must be positive");
}

namespace {

void detrend(VectorXd& x) {
    const auto n = x.size();
    const double t_mean = static_cast<double>(n - 1) / 2.0;
    const double mean = x.mean();
    double sxx = 0, sxy = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double dt = static_cast<double>(i) - t_mean;
        sxx += dt * dt;
        sxy += dt * (x(i) - mean);
    }
    const double slope = sxy / sxx;
    for (Eigen::Index i = 0; i < n; ++i) x(i) -= slope * (static_cast<double>(i) - t_mean);
}

struct FeatureSpec {
    const char* name;
    double base;
    double amplitude;
};

constexpr std::array<FeatureSpec, 3> kFeatures = {{
    {"cpu_usage_pct", 15.0, 70.0},
    {"memory_used_mb", 800.0, 2400.0},
    {"latency_ms", 4.0, 120.0},
}};

}  // namespace

VectorXd render_shape(Shape shape, int len, Rng& rng) {
    VectorXd x(len);
    switch (shape) {
        case Shape::Flat:
            for (int i = 0; i < len; ++i) x(i) = rng.uniform(0.0, 0.005);
            break;
        case Shape::RampUp:
        case Shape::RampDown:
            for (int i = 0; i < len; ++i) {
                const double t = static_cast<double>(i) / (len - 1);
                x(i) = (shape == Shape::RampUp ? t : 1.0 - t) + rng.uniform(0.0, 0.005);
            }
            break;
        case Shape::Spike:
            for (int i = 0; i < len; ++i) x(i) = rng.uniform(0.0, 0.005);
            x(3 + static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(len - 6)))) = 1.0;
            break;
        case Shape::Oscillation: {
            const double amp = 0.12, phase = rng.uniform(0.0, 2 * std::numbers::pi);
            for (int i = 0; i < len; ++i) x(i) = 1.0 - amp + amp * std::sin(2 * std::numbers::pi * i / 10.0 + phase);
            detrend(x);
            break;
        }
        case Shape::Noise:
            for (int i = 0; i < len; ++i) x(i) = rng.uniform(0.2, 1.0);
            detrend(x);
            break;
    }
    return x;
}

std::vector<SyntheticScenario> generate_synthetic(int n, const SyntheticConfig& cfg, std::uint64_t seed) {
    if (n <= 0) throw ArgumentError("n must be positive");
    cfg.validate();
    Rng rng(seed);
    const int slots = cfg.length / cfg.patch_len;
    const auto F = static_cast<Eigen::Index>(kFeatures.size());
    std::vector<SyntheticScenario> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        SyntheticScenario sc;
        sc.seed = seed;
        sc.failure_class = static_cast<int>(rng.index(kNumFailureClasses));
        const Shape anomaly = class_shape(sc.failure_class);

        const int seg = cfg.min_anomalous + static_cast<int>(rng.index(static_cast<std::uint64_t>(cfg.max_anomalous - cfg.min_anomalous + 1)));
        const int start = static_cast<int>(rng.index(static_cast<std::uint64_t>(slots - seg + 1)));
        sc.shapes.assign(static_cast<std::size_t>(slots), Shape::Flat);
        for (int s = start; s < start + seg; ++s) sc.shapes[static_cast<std::size_t>(s)] = anomaly;
        if (rng.bernoulli(cfg.distractor_probability)) {
            std::vector<int> free;
            for (int s = 0; s < slots; ++s) {
                if (s < start - 1 || s > start + seg) free.push_back(s);
            }
            if (!free.empty()) {
                auto other = static_cast<int>(rng.index(kNumFailureClasses - 1));
                if (other >= sc.failure_class) ++other;
                sc.shapes[static_cast<std::size_t>(free[rng.index(free.size())])] = class_shape(other);
            }
        }

        VectorXd s(cfg.length);
        for (int slot = 0; slot < slots; ++slot) {
            s.segment(slot * cfg.patch_len, cfg.patch_len) =
                render_shape(sc.shapes[static_cast<std::size_t>(slot)], cfg.patch_len, rng);
        }
        s /= s.maxCoeff();

        MetricSample& m = sc.sample;
        m.id = "synth-" + std::to_string(seed) + "-" + std::to_string(i);
        m.values.resize(cfg.length, F);
        for (Eigen::Index f = 0; f < F; ++f) {
            const auto& spec = kFeatures[static_cast<std::size_t>(f)];
            m.metric_names.emplace_back(spec.name);
            for (int t = 0; t < cfg.length; ++t) m.values(t, f) = spec.base + spec.amplitude * (s(t) + rng.uniform(0.0, cfg.jitter));
        }
        m.frequency_seconds = cfg.frequency_seconds;
        const double span = static_cast<double>(cfg.length) * cfg.frequency_seconds;
        const auto begin = shift_timestamp(cfg.start, span * i);
        const auto end = shift_timestamp(cfg.start, span * i + (cfg.length - 1) * cfg.frequency_seconds);
        if (!begin || !end) throw ConfigError("bad synthetic start timestamp: " + cfg.start);
        m.period_start = *begin;
        m.period_end = *end;
        m.failure_label = sc.failure_class;
        out.push_back(std::move(sc));
    }
    return out;
}

MCQItem build_mcq(const MetricSample& sample, int n_choices, std::uint64_t seed) {
    if (n_choices < 2 || n_choices > kNumFailureClasses) {
        throw ArgumentError("n_choices must be in [2, " + std::to_string(kNumFailureClasses) + "]");
    }
    if (!sample.failure_label) throw DataError("sample " + sample.id + " has no failure label");
    const int gold = *sample.failure_label;
    if (gold < 0 || gold >= kNumFailureClasses) throw DataError("sample " + sample.id + " has an unknown failure label");

    Rng rng(seed);
    std::vector<int> others;
    for (int c = 0; c < kNumFailureClasses; ++c) {
        if (c != gold) others.push_back(c);
    }
    rng.shuffle(others.begin(), others.end());
    others.resize(static_cast<std::size_t>(n_choices - 1));
    std::vector<int> classes = {gold};
    classes.insert(classes.end(), others.begin(), others.end());
    rng.shuffle(classes.begin(), classes.end());

    MCQItem item;
    item.scenario_id = sample.id;
    item.sample = sample;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        item.choices.push_back(failure_class_names()[static_cast<std::size_t>(classes[i])]);
        if (classes[i] == gold) item.gold_index = static_cast<int>(i);
    }
    return item;
}

MCQItem build_mcq(const SyntheticScenario& scenario, int n_choices, std::uint64_t seed) {
    return build_mcq(scenario.sample, n_choices, seed);
}

std::string answer_letter(int index) { return std::string(1, static_cast<char>('A' + index)); }

std::optional<int> parse_answer(const std::string& text, int n_choices) {
    static const std::regex pattern(R"(answer\s*[:\-]?\s*\(?([a-z])\b)", std::regex::icase);
    std::optional<int> found;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), pattern); it != std::sregex_iterator(); ++it) {
        found = std::tolower(static_cast<unsigned char>((*it)[1].str()[0])) - 'a';
    }
    if (!found) {
        static const std::regex bare(R"(^\s*\(?([a-z])[\).]?\s*$)", std::regex::icase);
        std::smatch m;
        if (std::regex_match(text, m, bare)) found = std::tolower(static_cast<unsigned char>(m[1].str()[0])) - 'a';
    }
    if (found && (*found < 0 || *found >= n_choices)) return std::nullopt;
    return found;
}

std::string render_mcq_prompt(const MCQItem& item, const std::string& context) {
    std::string out;
    if (!context.empty()) out += context + "\n";
    out += "Question: which failure type caused the anomaly in sample " + item.scenario_id + "?\n";
    for (std::size_t i = 0; i < item.choices.size(); ++i) {
        out += answer_letter(static_cast<int>(i)) + ". " + item.choices[i] + "\n";
    }
    out += "End your reply with a line of the form \"Answer: <letter>\".\n";
    return out;
}

McqPipeline oracle_pipeline() {
    return [](const MCQItem& item) {
        return PipelineAnswer{render_mcq_prompt(item, ""), "Answer: " + answer_letter(item.gold_index)};
    };
}

McqPipeline random_pipeline(std::uint64_t seed) {
    auto rng = std::make_shared<Rng>(seed);
    return [rng](const MCQItem& item) {
        const auto pick = static_cast<int>(rng->index(item.choices.size()));
        return PipelineAnswer{render_mcq_prompt(item, ""), "Answer: " + answer_letter(pick)};
    };
}

McqPipeline llm_pipeline(ChatClient& client, std::function<std::string(const MCQItem&)> context) {
    return [&client, context = std::move(context)](const MCQItem& item) {
        PipelineAnswer a;
        a.prompt = render_mcq_prompt(item, context ? context(item) : std::string{});
        a.raw = client.chat(make_request("You are a site reliability engineer diagnosing incidents.", a.prompt)).content;
        return a;
    };
}

AccuracyReport evaluate_accuracy(const std::vector<MCQItem>& items, const McqPipeline& pipeline, std::uint64_t seed) {
    if (items.empty()) throw ArgumentError("accuracy is undefined for an empty item list");
    AccuracyReport report;
    report.seed = seed;
    report.n = items.size();
    std::size_t correct = 0;
    for (const auto& item : items) {
        auto answer = pipeline(item);
        ItemRecord r;
        r.scenario_id = item.scenario_id;
        r.choices = item.choices;
        r.prompt = std::move(answer.prompt);
        r.raw_answer = std::move(answer.raw);
        r.parsed = parse_answer(r.raw_answer, static_cast<int>(item.choices.size()));
        r.gold = item.gold_index;
        r.correct = r.parsed && *r.parsed == r.gold;
        correct += r.correct;
        report.records.push_back(std::move(r));
    }
    report.accuracy = static_cast<double>(correct) / static_cast<double>(items.size());
    return report;
}

json to_json(const ItemRecord& r) {
    return {{"scenario_id", r.scenario_id},
            {"choices", r.choices},
            {"prompt", r.prompt},
            {"raw_answer", r.raw_answer},
            {"parsed", r.parsed ? json(*r.parsed) : json(nullptr)},
            {"gold", r.gold},
            {"correct", r.correct}};
}

void write_results(const std::filesystem::path& path, const AccuracyReport& report) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path.string());
    for (const auto& r : report.records) out << to_json(r).dump() << '\n';
    out << json{{"accuracy", report.accuracy}, {"n", report.n}, {"seed", report.seed}}.dump() << '\n';
}

}  // namespace timerag
