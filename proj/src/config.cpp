#include "timerag/config.hpp"

#include "timerag/errors.hpp"

#include <fstream>

namespace timerag {

using nlohmann::json;

EncoderConfig RunConfig::encoder(int n_features) const {
    EncoderConfig e;
    e.patch_len = data.patch_len;
    e.n_features = n_features;
    e.d_model = model.d_model;
    e.n_heads = model.n_heads;
    e.d_llm = model.d_llm;
    e.n_classes = model.n_classes;
    e.lambda_init = model.lambda_init;
    return e;
}

LlmConfig RunConfig::llm_config() const {
    LlmConfig c = LlmConfig::from_env();
    if (!llm.endpoint.empty()) c.endpoint = llm.endpoint;
    if (!llm.model.empty()) c.model = llm.model;
    c.chat_path = llm.chat_path;
    c.embed_path = llm.embed_path;
    c.timeout = std::chrono::milliseconds(llm.timeout_ms);
    c.max_retries = llm.max_retries;
    c.backoff_base = std::chrono::milliseconds(llm.backoff_ms);
    c.max_in_flight = llm.max_in_flight;
    return c;
}

void RunConfig::validate() const {
    if (data.length < 1 || data.patch_len < 1 || data.patch_len > data.length) {
        throw ConfigError("data.length and data.patch_len must satisfy 1 <= patch_len <= length");
    }
    if (data.format != "jsonl" && data.format != "csv-dir") throw ConfigError("data.format must be jsonl or csv-dir");
    encoder(1).validate();
    if (model.n_prototypes < 2 || model.n_prototypes >= vocab.size) {
        throw ConfigError("model.n_prototypes must be in [2, vocab.size)");
    }
    if (vocab.table.empty() && vocab.size < 16) throw ConfigError("vocab.size must be >= 16");
    train.validate();
    if (store.embed_dim < 1) throw ConfigError("store.embed_dim must be >= 1");
    if (store.max_chunk_tokens < 1) throw ConfigError("store.max_chunk_tokens must be >= 1");
    if (agent.k < 1 || agent.k_gap < 1) throw ConfigError("agent.k and agent.k_gap must be >= 1");
    if (agent.max_iterations < 1 || agent.max_iterations > 5) throw ConfigError("agent.max_iterations must be in [1, 5]");
    if (llm.timeout_ms < 1 || llm.max_retries < 0 || llm.backoff_ms < 0 || llm.max_in_flight < 1 || llm.max_in_flight > 64) {
        throw ConfigError("llm timeouts, retries and in-flight cap out of range");
    }
    if (eval.n_choices != 4 && eval.n_choices != 5) throw ConfigError("eval.n_choices must be 4 or 5");
}

json to_json(const RunConfig& c) {
    const auto& t = c.train;
    return {
        {"seed", c.seed},
        {"data", {{"length", c.data.length}, {"patch_len", c.data.patch_len}, {"format", c.data.format}}},
        {"model",
         {{"d_model", c.model.d_model},
          {"n_heads", c.model.n_heads},
          {"d_llm", c.model.d_llm},
          {"n_classes", c.model.n_classes},
          {"n_prototypes", c.model.n_prototypes},
          {"lambda_init", c.model.lambda_init}}},
        {"vocab", {{"table", c.vocab.table}, {"size", c.vocab.size}, {"seed", c.vocab.seed}}},
        {"train",
         {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr_max", t.lr_max},
          {"lr_min", t.lr_min},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps},
          {"seed", t.seed},
          {"mask_top_fraction", t.mask_top_fraction},
          {"mask_probability", t.mask_probability}}},
        {"store",
         {{"path", c.store.path}, {"embed_dim", c.store.embed_dim}, {"max_chunk_tokens", c.store.max_chunk_tokens}}},
        {"agent", {{"k", c.agent.k}, {"k_gap", c.agent.k_gap}, {"max_iterations", c.agent.max_iterations}}},
        {"llm",
         {{"endpoint", c.llm.endpoint},
          {"model", c.llm.model},
          {"chat_path", c.llm.chat_path},
          {"embed_path", c.llm.embed_path},
          {"timeout_ms", c.llm.timeout_ms},
          {"max_retries", c.llm.max_retries},
          {"backoff_ms", c.llm.backoff_ms},
          {"max_in_flight", c.llm.max_in_flight}}},
        {"eval", {{"n_choices", c.eval.n_choices}}},
        {"paths", {{"samples", c.paths.samples}}},
    };
}

namespace {

void overlay(json& base, const json& over, const std::string& where) {
    if (!over.is_object()) throw ConfigError((where.empty() ? "config" : where) + " must be an object");
    for (const auto& [key, value] : over.items()) {
        const auto name = where.empty() ? key : where + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key: " + name);
        auto& slot = base[key];
        if (slot.is_object()) {
            overlay(slot, value, name);
        } else if (slot.is_number_integer() || slot.is_number_unsigned()) {
            if (!value.is_number_integer()) throw ConfigError(name + " must be an integer");
            slot = value;
        } else if (slot.is_number()) {
            if (!value.is_number()) throw ConfigError(name + " must be a number");
            slot = value.get<double>();
        } else if (slot.is_string()) {
            if (!value.is_string()) throw ConfigError(name + " must be a string");
            slot = value;
        } else if (slot.is_boolean()) {
            if (!value.is_boolean()) throw ConfigError(name + " must be a boolean");
            slot = value;
        }
    }
}

}  // namespace

RunConfig config_from_json(const json& overrides) {
    json merged = to_json(RunConfig{});
    overlay(merged, overrides, "");
    RunConfig c;
    try {
        c.seed = merged["seed"].get<std::uint64_t>();
        const auto& d = merged["data"];
        c.data.length = d["length"];
        c.data.patch_len = d["patch_len"];
        c.data.format = d["format"];
        const auto& m = merged["model"];
        c.model.d_model = m["d_model"];
        c.model.n_heads = m["n_heads"];
        c.model.d_llm = m["d_llm"];
        c.model.n_classes = m["n_classes"];
        c.model.n_prototypes = m["n_prototypes"];
        c.model.lambda_init = m["lambda_init"];
        const auto& v = merged["vocab"];
        c.vocab.table = v["table"];
        c.vocab.size = v["size"];
        c.vocab.seed = v["seed"].get<std::uint64_t>();
        const auto& t = merged["train"];
        c.train.epochs = t["epochs"];
        c.train.batch_size = t["batch_size"];
        c.train.lr_max = t["lr_max"];
        c.train.lr_min = t["lr_min"];
        c.train.beta1 = t["beta1"];
        c.train.beta2 = t["beta2"];
        c.train.adam_eps = t["adam_eps"];
        c.train.seed = t["seed"].get<std::uint64_t>();
        c.train.mask_top_fraction = t["mask_top_fraction"];
        c.train.mask_probability = t["mask_probability"];
        const auto& s = merged["store"];
        c.store.path = s["path"];
        c.store.embed_dim = s["embed_dim"];
        c.store.max_chunk_tokens = s["max_chunk_tokens"];
        const auto& a = merged["agent"];
        c.agent.k = a["k"];
        c.agent.k_gap = a["k_gap"];
        c.agent.max_iterations = a["max_iterations"];
        const auto& l = merged["llm"];
        c.llm.endpoint = l["endpoint"];
        c.llm.model = l["model"];
        c.llm.chat_path = l["chat_path"];
        c.llm.embed_path = l["embed_path"];
        c.llm.timeout_ms = l["timeout_ms"];
        c.llm.max_retries = l["max_retries"];
        c.llm.backoff_ms = l["backoff_ms"];
        c.llm.max_in_flight = l["max_in_flight"];
        c.eval.n_choices = merged["eval"]["n_choices"];
        c.paths.samples = merged["paths"]["samples"];
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

}  // namespace timerag
