#include "timerag/abstraction.hpp"

#include "timerag/errors.hpp"
#include "timerag/prompt.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <future>

namespace timerag {

const std::vector<std::string>& LabelVocabulary::default_tokens() {
    static const std::vector<std::string> tokens = {"stable", "rising", "falling", "spike",
                                                    "drop",   "oscillating", "noisy", "saturated"};
    return tokens;
}

LabelVocabulary::LabelVocabulary(std::vector<std::string> tokens, std::vector<int> ids)
    : tokens_(std::move(tokens)), ids_(std::move(ids)) {
    if (tokens_.empty()) throw ArgumentError("label vocabulary is empty");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        for (std::size_t j = i + 1; j < tokens_.size(); ++j) {
            if (tokens_[i] == tokens_[j]) throw ConflictError("duplicate label token '" + tokens_[i] + "'");
        }
    }
}

LabelVocabulary LabelVocabulary::from_table(const EmbeddingTable& table, const std::vector<std::string>& tokens) {
    std::vector<int> ids;
    for (const auto& t : tokens) {
        const auto id = table.id_of(t);
        if (!id) throw ArgumentError("label token '" + t + "' is not in the embedding table");
        ids.push_back(*id);
    }
    return LabelVocabulary(tokens, std::move(ids));
}

LabelVocabulary LabelVocabulary::positional(const std::vector<std::string>& tokens) {
    std::vector<int> ids(tokens.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    return LabelVocabulary(tokens, std::move(ids));
}

bool LabelVocabulary::contains(const std::string& token) const {
    return std::find(tokens_.begin(), tokens_.end(), token) != tokens_.end();
}

int LabelVocabulary::id_of(const std::string& token) const {
    const auto it = std::find(tokens_.begin(), tokens_.end(), token);
    if (it == tokens_.end()) throw ArgumentError("'" + token + "' is not a label token");
    return ids_[static_cast<std::size_t>(it - tokens_.begin())];
}

const std::string& LabelVocabulary::token_of(int id) const {
    const auto it = std::find(ids_.begin(), ids_.end(), id);
    if (it == ids_.end()) throw ArgumentError("token id " + std::to_string(id) + " is not a label id");
    return tokens_[static_cast<std::size_t>(it - ids_.begin())];
}

namespace {

VectorXd feature_mean(const Patch& patch) {
    if (patch.values.rows() == 0 || patch.values.cols() == 0) throw ArgumentError("empty patch");
    return patch.values.rowwise().mean();
}

}  // namespace

PatchStats patch_stats(const Patch& patch) {
    const VectorXd m = feature_mean(patch);
    const auto n = m.size();
    PatchStats s;
    s.mean = m.mean();
    s.stddev = std::sqrt((m.array() - s.mean).square().mean());
    s.min = m.minCoeff();
    s.max = m.maxCoeff();
    if (n > 1) {
        const double t_mean = static_cast<double>(n - 1) / 2.0;
        double sxx = 0, sxy = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double dt = static_cast<double>(i) - t_mean;
            sxx += dt * dt;
            sxy += dt * (m(i) - s.mean);
        }
        s.slope = sxy / sxx;
    }
    int prev_sign = 0;
    for (Eigen::Index i = 1; i < n; ++i) {
        const double d = m(i) - m(i - 1);
        const int sign = (d > 0) - (d < 0);
        if (sign == 0) continue;
        if (prev_sign != 0 && sign != prev_sign) ++s.sign_changes;
        prev_sign = sign;
    }
    return s;
}

PatchLabel abstract_patch_rule(const Patch& patch, const LabelVocabulary& vocab, const RuleThresholds& t) {
    const VectorXd m = feature_mean(patch);
    const PatchStats s = patch_stats(patch);
    const double len = static_cast<double>(m.size());
    const double range = s.max - s.min;

    std::string token = "stable";
    if (s.stddev > 0 && s.max > s.mean + t.outlier_sigmas * s.stddev) {
        token = "spike";
    } else if (s.stddev > 0 && s.min < s.mean - t.outlier_sigmas * s.stddev) {
        token = "drop";
    } else if (s.min >= t.saturated_min) {
        token = "saturated";
    } else if (s.slope * len > t.trend) {
        token = "rising";
    } else if (s.slope * len < -t.trend) {
        token = "falling";
    } else {
        const bool noisy = s.stddev > t.noisy_sigma;
        const bool oscillating = s.sign_changes >= t.oscillation_sign_changes && range > t.oscillation_range;
        if (t.noisy_first ? noisy : (noisy && !oscillating)) {
            token = "noisy";
        } else if (oscillating) {
            token = "oscillating";
        }
    }
    return {patch.sample_id, patch.index, token, vocab.id_of(token), "rule"};
}

const std::string& default_abstraction_template() {
    static const std::string tpl =
        "You label segments of cloud performance metrics.\n"
        "Reply with exactly one word from this list: {{vocabulary}}.\n"
        "\n"
        "Segment: {{rows}} time steps x {{features}} metrics, values min-max normalised to [0, 1].\n"
        "Feature-averaged series statistics:\n"
        "- mean: {{mean}}\n"
        "- stddev: {{stddev}}\n"
        "- min: {{min}}\n"
        "- max: {{max}}\n"
        "- slope per step: {{slope}}\n"
        "Downsampled series: {{values}}\n"
        "\n"
        "Word:";
    return tpl;
}

std::string render_abstraction_prompt(const Patch& patch, const LabelVocabulary& vocab, const std::string& tpl) {
    const VectorXd m = feature_mean(patch);
    const PatchStats s = patch_stats(patch);
    constexpr Eigen::Index kPoints = 10;
    const Eigen::Index bins = std::min<Eigen::Index>(kPoints, m.size());
    std::string values;
    for (Eigen::Index b = 0; b < bins; ++b) {
        const Eigen::Index lo = b * m.size() / bins;
        const Eigen::Index hi = (b + 1) * m.size() / bins;
        if (b) values += ", ";
        values += format_fixed(m.segment(lo, hi - lo).mean());
    }
    std::string vocab_list;
    for (std::size_t i = 0; i < vocab.tokens().size(); ++i) {
        if (i) vocab_list += ", ";
        vocab_list += vocab.tokens()[i];
    }
    return render_template(tpl, {{"vocabulary", vocab_list},
                                 {"rows", std::to_string(patch.values.rows())},
                                 {"features", std::to_string(patch.values.cols())},
                                 {"mean", format_fixed(s.mean)},
                                 {"stddev", format_fixed(s.stddev)},
                                 {"min", format_fixed(s.min)},
                                 {"max", format_fixed(s.max)},
                                 {"slope", format_fixed(s.slope, 6)},
                                 {"values", values}});
}

namespace {

std::string normalise_answer(const std::string& reply) {
    std::size_t i = 0;
    while (i < reply.size() && !std::isalpha(static_cast<unsigned char>(reply[i]))) ++i;
    std::string word;
    while (i < reply.size() && std::isalpha(static_cast<unsigned char>(reply[i]))) {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(reply[i++]))));
    }
    return word;
}

}  // namespace

PatchLabel abstract_patch_llm(const Patch& patch, const LabelVocabulary& vocab, ChatClient& client,
                              const std::string& tpl, int attempts, const RuleThresholds& fallback) {
    const std::string prompt = render_abstraction_prompt(patch, vocab, tpl);
    for (int a = 0; a < attempts; ++a) {
        ChatRequest req;
        req.messages.push_back({"user", prompt});
        if (a > 0) {
            req.messages.push_back({"user", "Your previous answer was not in the list. Answer with one listed word."});
        }
        req.max_tokens = 8;
        const auto token = normalise_answer(client.chat(req).content);
        if (vocab.contains(token)) return {patch.sample_id, patch.index, token, vocab.id_of(token), "llm"};
    }
    auto label = abstract_patch_rule(patch, vocab, fallback);
    label.provenance = "fallback";
    return label;
}

std::vector<LabeledPatch> label_dataset(const std::vector<MetricSample>& samples, PatchAbstractor& abstractor,
                                        int patch_len) {
    std::vector<Patch> patches;
    for (const auto& s : samples) {
        auto p = segment_into_patches(s, patch_len);
        std::move(p.begin(), p.end(), std::back_inserter(patches));
    }
    std::vector<LabeledPatch> out(patches.size());
    const auto width = static_cast<std::size_t>(std::max(1, abstractor.max_in_flight()));
    for (std::size_t begin = 0; begin < patches.size(); begin += width) {
        const auto end = std::min(patches.size(), begin + width);
        if (width == 1) {
            out[begin] = {patches[begin], abstractor.label(patches[begin])};
            continue;
        }
        std::vector<std::future<PatchLabel>> pending;
        for (auto i = begin; i < end; ++i) {
            pending.push_back(std::async(std::launch::async, [&, i] { return abstractor.label(patches[i]); }));
        }
        for (auto i = begin; i < end; ++i) out[i] = {patches[i], pending[i - begin].get()};
    }
    return out;
}

void save_labels(const std::filesystem::path& path, const std::vector<PatchLabel>& labels) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path.string());
    for (const auto& l : labels) {
        out << nlohmann::json{{"sample_id", l.sample_id},
                              {"patch_index", l.patch_index},
                              {"token", l.token},
                              {"token_id", l.token_id},
                              {"provenance", l.provenance}}
                   .dump()
            << '\n';
    }
}

std::vector<PatchLabel> load_labels(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open " + path.string());
    std::vector<PatchLabel> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto rec = nlohmann::json::parse(line);
            out.push_back({rec.at("sample_id").get<std::string>(), rec.at("patch_index").get<int>(),
                           rec.at("token").get<std::string>(), rec.at("token_id").get<int>(),
                           rec.value("provenance", std::string("rule"))});
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace timerag
