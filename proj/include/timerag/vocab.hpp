#pragma once

#include "timerag/math.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace timerag {

/// Frozen language-model vocabulary embeddings, V rows x d_llm columns.
/// Values are held in double but are float32-representable, which is what
/// the on-disk format preserves exactly.
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(std::vector<std::string> tokens, MatrixXd vectors);

    const std::vector<std::string>& tokens() const { return tokens_; }
    const MatrixXd& vectors() const { return vectors_; }
    int size() const { return static_cast<int>(tokens_.size()); }
    int dim() const { return static_cast<int>(vectors_.cols()); }

    std::optional<int> id_of(const std::string& token) const;
    const std::string& token_of(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

private:
    std::vector<std::string> tokens_;
    MatrixXd vectors_;
    std::unordered_map<std::string, int> index_;
};

EmbeddingTable load_embedding_table(const std::filesystem::path& path);
void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path);

/// Deterministic random table. `leading_tokens` occupy the first rows; the
/// rest are named "w<index>". Entries are N(0, 1/d) rounded to float32.
EmbeddingTable make_synthetic_table(int v, int d, std::uint64_t seed,
                                    const std::vector<std::string>& leading_tokens = {});

/// FNV-1a over token bytes and the raw IEEE-754 bytes of every entry.
std::uint64_t table_checksum(const EmbeddingTable& table);

/// Trainable S x V projection of the full vocabulary and its cached product
/// with the table (the S x d_llm prototypes used as attention source/value).
struct PrototypePool {
    MatrixXd projection;
    MatrixXd prototypes;

    int size() const { return static_cast<int>(projection.rows()); }
    void refresh(const EmbeddingTable& table) { prototypes.noalias() = projection * table.vectors(); }
};

/// Projection initialised from uniform(-1/V, 1/V); requires 2 <= S < V.
PrototypePool build_prototypes(const EmbeddingTable& table, int s, std::uint64_t init_seed);

struct DecodedToken {
    std::string token;
    int token_id = 0;
};

/// argmax over E * h; ties go to the lowest index.
DecodedToken decode_greedy(const VectorXd& h, const EmbeddingTable& table);

/// Row-wise greedy decode of an N x d_llm matrix.
std::vector<int> decode_greedy_rows(const MatrixXd& h, const EmbeddingTable& table);

}  // namespace timerag
