#pragma once

#include "timerag/encoder.hpp"
#include "timerag/llmclient.hpp"
#include "timerag/ragstore.hpp"
#include "timerag/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace timerag {

struct RunConfig {
    std::uint64_t seed = 0;

    struct Data {
        int length = kStandardLength;
        int patch_len = kDefaultPatchLen;
        std::string format = "jsonl";
    } data;

    struct ModelDims {
        int d_model = 32;
        int n_heads = 4;
        int d_llm = 32;
        int n_classes = 5;
        int n_prototypes = 128;
        double lambda_init = 0.8;
    } model;

    struct Vocab {
        std::string table;  // empty: synthetic table from size and seed
        int size = 2000;
        std::uint64_t seed = 0;
    } vocab;

    TrainConfig train;

    struct Store {
        std::string path = "store.jsonl";
        int embed_dim = 256;
        int max_chunk_tokens = kMaxChunkTokens;
    } store;

    struct Agent {
        int k = 5;
        int k_gap = 3;
        int max_iterations = 5;
    } agent;

    struct Llm {
        std::string endpoint;  // empty: TIMERAG_LLM_ENDPOINT
        std::string model;     // empty: TIMERAG_LLM_MODEL
        std::string chat_path = "/v1/chat/completions";
        std::string embed_path = "/v1/embeddings";
        int timeout_ms = 60000;
        int max_retries = 3;
        int backoff_ms = 500;
        int max_in_flight = 4;
    } llm;

    struct Eval {
        int n_choices = 5;
    } eval;

    struct Paths {
        std::string samples;
    } paths;

    /// Encoder shape implied by the data and model sections; n_features from the data.
    EncoderConfig encoder(int n_features) const;
    /// Environment first, then any non-empty config value.
    LlmConfig llm_config() const;
    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);

/// Overlays `overrides` onto the defaults. Unknown keys and mistyped values raise ConfigError.
RunConfig config_from_json(const nlohmann::json& overrides);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace timerag
