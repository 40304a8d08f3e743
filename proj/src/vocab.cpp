#include "timerag/vocab.hpp"

#include "timerag/errors.hpp"
#include "timerag/hash.hpp"
#include "timerag/random.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>

namespace timerag {

EmbeddingTable::EmbeddingTable(std::vector<std::string> tokens, MatrixXd vectors)
    : tokens_(std::move(tokens)), vectors_(std::move(vectors)) {
    if (static_cast<Eigen::Index>(tokens_.size()) != vectors_.rows()) {
        throw FormatError("embedding table has " + std::to_string(tokens_.size()) + " tokens but " +
                          std::to_string(vectors_.rows()) + " vectors");
    }
    if (tokens_.size() < 2) throw FormatError("embedding table needs at least 2 tokens");
    if (!vectors_.allFinite()) throw FormatError("embedding table contains non-finite values");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw ConflictError("duplicate token '" + tokens_[i] + "' in embedding table");
        }
    }
}

std::optional<int> EmbeddingTable::id_of(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open embedding table " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
    long v = 0, d = 0;
    try {
        const auto header = nlohmann::json::parse(line);
        v = header.at("v").get<long>();
        d = header.at("d").get<long>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ":1: bad header: " + e.what());
    }
    if (v < 2 || d < 1) throw FormatError(path.string() + ": header declares v=" + std::to_string(v) + ", d=" + std::to_string(d));

    std::vector<std::string> tokens;
    tokens.reserve(static_cast<std::size_t>(v));
    MatrixXd vectors(v, d);
    for (long row = 0; row < v; ++row) {
        const std::string where = path.string() + ":" + std::to_string(row + 2);
        if (!std::getline(in, line)) throw FormatError(where + ": expected " + std::to_string(v) + " rows");
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError(where + ": missing tab separator");
        tokens.push_back(line.substr(0, tab));
        const char* p = line.data() + tab + 1;
        const char* end = line.data() + line.size();
        long col = 0;
        while (p < end) {
            while (p < end && (*p == ' ' || *p == '\r')) ++p;
            if (p >= end) break;
            // Parse at single precision so the 9-digit text maps back to the exact stored float.
            float value = 0;
            auto [next, ec] = std::from_chars(p, end, value);
            if (ec != std::errc{}) throw FormatError(where + ": bad number");
            if (col >= d) throw FormatError(where + ": more than d=" + std::to_string(d) + " values");
            vectors(row, col++) = static_cast<double>(value);
            p = next;
        }
        if (col != d) {
            throw FormatError(where + ": row has " + std::to_string(col) + " values, header declares d=" + std::to_string(d));
        }
    }
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") != std::string::npos) throw FormatError(path.string() + ": more rows than v");
    }
    return EmbeddingTable(std::move(tokens), std::move(vectors));
}

void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path.string());
    out << nlohmann::json{{"v", table.size()}, {"d", table.dim()}}.dump() << '\n';
    char buf[32];
    for (int r = 0; r < table.size(); ++r) {
        out << table.token_of(r) << '\t';
        for (int c = 0; c < table.dim(); ++c) {
            std::snprintf(buf, sizeof buf, "%.9g", table.vectors()(r, c));
            if (c) out << ' ';
            out << buf;
        }
        out << '\n';
    }
}

EmbeddingTable make_synthetic_table(int v, int d, std::uint64_t seed, const std::vector<std::string>& leading_tokens) {
    if (v < 2 || d < 1) throw ArgumentError("synthetic table needs v >= 2 and d >= 1");
    if (static_cast<int>(leading_tokens.size()) > v) throw ArgumentError("more leading tokens than table rows");
    Rng rng(seed);
    std::vector<std::string> tokens(leading_tokens);
    for (int i = static_cast<int>(tokens.size()); i < v; ++i) tokens.push_back("w" + std::to_string(i));
    MatrixXd vectors(v, d);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
    for (int r = 0; r < v; ++r) {
        for (int c = 0; c < d; ++c) vectors(r, c) = static_cast<double>(static_cast<float>(rng.normal(0.0, stddev)));
    }
    return EmbeddingTable(std::move(tokens), std::move(vectors));
}

std::uint64_t table_checksum(const EmbeddingTable& table) {
    Fnv1a64 h;
    for (const auto& t : table.tokens()) {
        h.update(t);
        h.update("\0", 1);
    }
    for (Eigen::Index r = 0; r < table.vectors().rows(); ++r) {
        for (Eigen::Index c = 0; c < table.vectors().cols(); ++c) {
            const double x = table.vectors()(r, c);
            h.update(&x, sizeof x);
        }
    }
    return h.digest();
}

PrototypePool build_prototypes(const EmbeddingTable& table, int s, std::uint64_t init_seed) {
    const int v = table.size();
    if (s < 2 || s >= v) {
        throw ArgumentError("prototype count S=" + std::to_string(s) + " must satisfy 2 <= S < V=" + std::to_string(v));
    }
    Rng rng(init_seed);
    PrototypePool pool;
    pool.projection.resize(s, v);
    const double bound = 1.0 / static_cast<double>(v);
    for (int r = 0; r < s; ++r) {
        for (int c = 0; c < v; ++c) pool.projection(r, c) = rng.uniform(-bound, bound);
    }
    pool.refresh(table);
    return pool;
}

DecodedToken decode_greedy(const VectorXd& h, const EmbeddingTable& table) {
    const VectorXd logits = table.vectors() * h;
    int best = 0;
    for (int i = 1; i < logits.size(); ++i) {
        if (logits(i) > logits(best)) best = i;
    }
    return {table.token_of(best), best};
}

std::vector<int> decode_greedy_rows(const MatrixXd& h, const EmbeddingTable& table) {
    // Same matrix-vector path as decode_greedy so near-ties resolve identically.
    std::vector<int> out(static_cast<std::size_t>(h.rows()));
    for (Eigen::Index r = 0; r < h.rows(); ++r) {
        out[static_cast<std::size_t>(r)] = decode_greedy(h.row(r).transpose(), table).token_id;
    }
    return out;
}

}  // namespace timerag
