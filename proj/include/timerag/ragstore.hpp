#pragma once

#include "timerag/llmclient.hpp"
#include "timerag/math.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

namespace timerag {

struct IncidentDocument {
    std::string id;
    std::string title;
    std::string body;
    std::string source;
    std::map<std::string, std::string> metadata;
};

struct Chunk {
    std::string id;  // "<doc_id>#<seq>"
    std::string doc_id;
    int seq = 0;
    std::string text;
    int token_count = 0;
    std::optional<VectorXd> embedding;
    std::map<std::string, std::string> metadata;
};

using TokenCounter = std::function<int(const std::string&)>;

/// Whitespace token count; the reference tokenizer.
int whitespace_token_count(const std::string& text);

inline constexpr int kMaxChunkTokens = 512;
inline constexpr int kDefaultTopK = 5;

/// Greedy packing of blank-line separated paragraphs into chunks of at most
/// max_tokens. Oversized paragraphs are split at sentence ends, then hard-split
/// on token boundaries. Every body character lands in exactly one chunk.
std::vector<Chunk> chunk_document(const IncidentDocument& doc, int max_tokens = kMaxChunkTokens,
                                  const TokenCounter& count = whitespace_token_count);

class ChunkClassifier {
public:
    virtual ~ChunkClassifier() = default;
    virtual bool keep(const Chunk& chunk) = 0;
};

/// Wraps a predicate, for tests and rule-based filtering.
class PredicateClassifier final : public ChunkClassifier {
public:
    explicit PredicateClassifier(std::function<bool(const Chunk&)> pred) : pred_(std::move(pred)) {}
    bool keep(const Chunk& chunk) override { return pred_(chunk); }

private:
    std::function<bool(const Chunk&)> pred_;
};

/// Yes/no question to a chat model: does the chunk describe incident symptoms
/// together with their resolution?
class LlmChunkClassifier final : public ChunkClassifier {
public:
    explicit LlmChunkClassifier(ChatClient& client);
    bool keep(const Chunk& chunk) override;
    static const std::string& instruction();

private:
    ChatClient& client_;
};

struct FilterResult {
    std::vector<Chunk> kept;
    std::vector<std::string> warnings;
};

/// Keeps chunks the classifier accepts, in order. Blank chunks are dropped
/// without consulting it. Classifier failures are re-thrown with the chunk id.
FilterResult filter_chunks(const std::vector<Chunk>& chunks, ChunkClassifier& classifier);

struct ScoredChunk {
    Chunk chunk;
    double similarity = 0;
};

/// Flat cosine-similarity index. Reads may run concurrently; mutations take
/// an exclusive lock.
class VectorStore {
public:
    explicit VectorStore(int dim);
    VectorStore(const VectorStore& other);
    VectorStore& operator=(const VectorStore& other);

    int dim() const { return dim_; }
    std::size_t size() const;
    bool empty() const { return size() == 0; }

    /// Inserts or replaces by chunk id. Embedding must be set, finite, non-zero and of size dim().
    void upsert(const Chunk& chunk);
    /// Atomically replaces every chunk of `doc_id` with `chunks`.
    void replace_document(const std::string& doc_id, const std::vector<Chunk>& chunks);
    std::optional<Chunk> get(const std::string& id) const;
    std::vector<Chunk> chunks() const;  // ordered by id

    /// Descending cosine similarity, ties by ascending id; min(k, size()) results.
    std::vector<ScoredChunk> retrieve_topk(const VectorXd& query, int k = kDefaultTopK) const;

private:
    void check(const Chunk& chunk) const;
    int dim_;
    mutable std::shared_mutex mu_;
    std::map<std::string, Chunk> chunks_;
};

struct IngestReport {
    int docs = 0;
    int chunks = 0;
    int kept = 0;
    int embedded = 0;
    std::vector<std::string> warnings;
};

/// chunk -> filter -> embed -> index, per document. Re-ingesting a document id
/// replaces its previous chunks.
IngestReport ingest(const std::vector<IncidentDocument>& docs, const Embedder& embedder, ChunkClassifier& classifier,
                    VectorStore& store, int max_tokens = kMaxChunkTokens,
                    const TokenCounter& count = whitespace_token_count);

void save_store(const VectorStore& store, const std::filesystem::path& path);
VectorStore load_store(const std::filesystem::path& path);

std::vector<IncidentDocument> load_documents(const std::filesystem::path& path);
void save_documents(const std::filesystem::path& path, const std::vector<IncidentDocument>& docs);

}  // namespace timerag
