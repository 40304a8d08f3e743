#include "timerag/ragstore.hpp"

#include "timerag/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <mutex>

namespace timerag {

using nlohmann::json;

int whitespace_token_count(const std::string& text) {
    int n = 0;
    bool in_token = false;
    for (const char c : text) {
        const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!space && !in_token) ++n;
        in_token = !space;
    }
    return n;
}

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

bool blank(const std::string& s) {
    return std::all_of(s.begin(), s.end(), [](char c) { return is_space(c); });
}

/// Splits after every run of whitespace that contains a blank line.
std::vector<std::string> split_paragraphs(const std::string& body) {
    std::vector<std::string> out;
    std::size_t start = 0, i = 0;
    while (i < body.size()) {
        if (body[i] != '\n') {
            ++i;
            continue;
        }
        std::size_t j = i;
        int newlines = 0;
        while (j < body.size() && is_space(body[j])) {
            newlines += body[j] == '\n';
            ++j;
        }
        if (newlines >= 2 && j < body.size()) {
            out.push_back(body.substr(start, j - start));
            start = j;
        }
        i = j;
    }
    if (start < body.size()) out.push_back(body.substr(start));
    return out;
}

/// Splits after sentence punctuation followed by whitespace (the whitespace stays with the sentence).
std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if ((c == '.' || c == '!' || c == '?') && i + 1 < text.size() && is_space(text[i + 1])) {
            std::size_t j = i + 1;
            while (j < text.size() && is_space(text[j])) ++j;
            if (j < text.size()) {
                out.push_back(text.substr(start, j - start));
                start = j;
            }
            i = j - 1;
        }
    }
    if (start < text.size()) out.push_back(text.substr(start));
    return out;
}

/// Cuts at whitespace boundaries so each piece counts at most max_tokens.
std::vector<std::string> hard_split(const std::string& text, int max_tokens, const TokenCounter& count) {
    std::vector<std::size_t> cuts;  // candidate cut positions: end of each whitespace run
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (is_space(text[i]) && (i + 1 == text.size() || !is_space(text[i + 1]))) cuts.push_back(i + 1);
    }
    if (cuts.empty() || cuts.back() != text.size()) cuts.push_back(text.size());

    std::vector<std::string> out;
    std::size_t start = 0, last_fit = 0;
    for (std::size_t c = 0; c < cuts.size(); ++c) {
        if (count(text.substr(start, cuts[c] - start)) <= max_tokens) {
            last_fit = cuts[c];
            continue;
        }
        if (last_fit == start) {
            // a single token over budget; emit it alone
            out.push_back(text.substr(start, cuts[c] - start));
            start = last_fit = cuts[c];
        } else {
            out.push_back(text.substr(start, last_fit - start));
            start = last_fit;
            --c;
        }
    }
    if (start < text.size()) out.push_back(text.substr(start));
    return out;
}

}  // namespace

std::vector<Chunk> chunk_document(const IncidentDocument& doc, int max_tokens, const TokenCounter& count) {
    if (max_tokens < 1) throw ArgumentError("max_tokens must be >= 1");
    if (blank(doc.body)) return {};

    std::vector<std::string> units;
    for (auto& para : split_paragraphs(doc.body)) {
        if (count(para) <= max_tokens) {
            units.push_back(std::move(para));
            continue;
        }
        for (auto& sentence : split_sentences(para)) {
            if (count(sentence) <= max_tokens) {
                units.push_back(std::move(sentence));
            } else {
                for (auto& piece : hard_split(sentence, max_tokens, count)) units.push_back(std::move(piece));
            }
        }
    }

    std::vector<std::string> texts;
    std::string current;
    for (auto& u : units) {
        if (current.empty()) {
            current = std::move(u);
        } else if (count(current + u) <= max_tokens) {
            current += u;
        } else {
            texts.push_back(std::move(current));
            current = std::move(u);
        }
    }
    if (!current.empty()) texts.push_back(std::move(current));

    std::vector<Chunk> out;
    for (auto& text : texts) {
        Chunk c;
        c.doc_id = doc.id;
        c.seq = static_cast<int>(out.size());
        c.id = doc.id + "#" + std::to_string(c.seq);
        c.token_count = count(text);
        c.text = std::move(text);
        c.metadata = doc.metadata;
        if (!doc.title.empty()) c.metadata["title"] = doc.title;
        if (!doc.source.empty()) c.metadata["source"] = doc.source;
        out.push_back(std::move(c));
    }
    return out;
}

LlmChunkClassifier::LlmChunkClassifier(ChatClient& client) : client_(client) {}

const std::string& LlmChunkClassifier::instruction() {
    static const std::string text =
        "You screen historical incident documentation for a root cause analysis knowledge base. "
        "Does the following text describe incident symptoms together with the corresponding resolution?";
    return text;
}

bool LlmChunkClassifier::keep(const Chunk& chunk) { return classify_binary(client_, chunk.text, instruction()); }

FilterResult filter_chunks(const std::vector<Chunk>& chunks, ChunkClassifier& classifier) {
    FilterResult out;
    for (const auto& c : chunks) {
        if (blank(c.text)) continue;
        bool keep = false;
        try {
            keep = classifier.keep(c);
        } catch (const ClassifierParseError& e) {
            throw ClassifierParseError("chunk " + c.id + ": " + e.what());
        } catch (const ClientError& e) {
            throw ClientError("chunk " + c.id + ": " + e.what());
        } catch (const TimeoutError& e) {
            throw TimeoutError("chunk " + c.id + ": " + e.what());
        } catch (const ScriptedError& e) {
            throw ScriptedError("chunk " + c.id + ": " + e.what());
        }
        if (keep) out.kept.push_back(c);
    }
    if (out.kept.empty() && !chunks.empty()) {
        out.warnings.push_back("classifier rejected all " + std::to_string(chunks.size()) + " chunks");
    }
    return out;
}

VectorStore::VectorStore(int dim) : dim_(dim) {
    if (dim < 1) throw ArgumentError("store dimension must be >= 1");
}

VectorStore::VectorStore(const VectorStore& other) : dim_(other.dim_) {
    std::shared_lock lock(other.mu_);
    chunks_ = other.chunks_;
}

VectorStore& VectorStore::operator=(const VectorStore& other) {
    if (this == &other) return *this;
    std::scoped_lock lock(mu_, other.mu_);
    dim_ = other.dim_;
    chunks_ = other.chunks_;
    return *this;
}

std::size_t VectorStore::size() const {
    std::shared_lock lock(mu_);
    return chunks_.size();
}

void VectorStore::check(const Chunk& chunk) const {
    if (chunk.id.empty()) throw ArgumentError("chunk without id");
    if (!chunk.embedding) throw ArgumentError("chunk " + chunk.id + " has no embedding");
    if (chunk.embedding->size() != dim_) {
        throw ConfigError("chunk " + chunk.id + " embedding has dimension " + std::to_string(chunk.embedding->size()) +
                          ", store expects " + std::to_string(dim_));
    }
    const double n = chunk.embedding->norm();
    if (!std::isfinite(n) || n <= 0) throw ArgumentError("chunk " + chunk.id + " embedding has zero or non-finite norm");
}

void VectorStore::upsert(const Chunk& chunk) {
    check(chunk);
    std::unique_lock lock(mu_);
    chunks_[chunk.id] = chunk;
}

void VectorStore::replace_document(const std::string& doc_id, const std::vector<Chunk>& chunks) {
    for (const auto& c : chunks) check(c);
    std::unique_lock lock(mu_);
    std::erase_if(chunks_, [&](const auto& kv) { return kv.second.doc_id == doc_id; });
    for (const auto& c : chunks) chunks_[c.id] = c;
}

std::optional<Chunk> VectorStore::get(const std::string& id) const {
    std::shared_lock lock(mu_);
    const auto it = chunks_.find(id);
    if (it == chunks_.end()) return std::nullopt;
    return it->second;
}

std::vector<Chunk> VectorStore::chunks() const {
    std::shared_lock lock(mu_);
    std::vector<Chunk> out;
    out.reserve(chunks_.size());
    for (const auto& [_, c] : chunks_) out.push_back(c);
    return out;
}

std::vector<ScoredChunk> VectorStore::retrieve_topk(const VectorXd& query, int k) const {
    if (k < 1) throw ArgumentError("k must be >= 1");
    if (query.size() != dim_) throw ArgumentError("query dimension does not match the store");
    const double qn = query.norm();
    if (!(qn > 0) || !std::isfinite(qn)) throw ArgumentError("query embedding has zero or non-finite norm");
    std::shared_lock lock(mu_);
    if (chunks_.empty()) throw ArgumentError("vector store is empty");
    std::vector<std::pair<double, const Chunk*>> scored;
    scored.reserve(chunks_.size());
    for (const auto& [_, c] : chunks_) scored.emplace_back(query.dot(*c.embedding) / (qn * c.embedding->norm()), &c);
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                      [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second->id < b.second->id;
                      });
    std::vector<ScoredChunk> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back({*scored[i].second, scored[i].first});
    return out;
}

IngestReport ingest(const std::vector<IncidentDocument>& docs, const Embedder& embedder, ChunkClassifier& classifier,
                    VectorStore& store, int max_tokens, const TokenCounter& count) {
    if (embedder.dim() != store.dim()) {
        throw ConfigError("embedder dimension " + std::to_string(embedder.dim()) + " does not match store dimension " +
                          std::to_string(store.dim()));
    }
    IngestReport report;
    for (const auto& doc : docs) {
        if (doc.id.empty()) throw ArgumentError("document without id");
        ++report.docs;
        auto chunks = chunk_document(doc, max_tokens, count);
        report.chunks += static_cast<int>(chunks.size());
        auto filtered = filter_chunks(chunks, classifier);
        for (auto& w : filtered.warnings) report.warnings.push_back(doc.id + ": " + w);
        report.kept += static_cast<int>(filtered.kept.size());
        for (auto& c : filtered.kept) {
            c.embedding = embedder.embed(c.text);
            ++report.embedded;
        }
        store.replace_document(doc.id, filtered.kept);
    }
    if (report.kept == 0 && report.chunks > 0) report.warnings.push_back("no chunks survived filtering; store is empty");
    return report;
}

namespace {

json chunk_to_json(const Chunk& c) {
    const auto& e = *c.embedding;
    return {{"id", c.id},
            {"doc_id", c.doc_id},
            {"seq", c.seq},
            {"text", c.text},
            {"token_count", c.token_count},
            {"embedding", std::vector<double>(e.data(), e.data() + e.size())},
            {"metadata", c.metadata}};
}

}  // namespace

void save_store(const VectorStore& store, const std::filesystem::path& path) {
    const auto chunks = store.chunks();
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path.string());
    out << json{{"format", "timerag-store"}, {"version", 1}, {"d_e", store.dim()}, {"count", chunks.size()}}.dump()
        << '\n';
    for (const auto& c : chunks) out << chunk_to_json(c).dump() << '\n';
}

VectorStore load_store(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open store " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty store file");
    int dim = 0;
    std::optional<std::size_t> count;
    try {
        const auto header = json::parse(line);
        if (header.at("format") != "timerag-store") throw FormatError(path.string() + ": not a timerag store");
        const int version = header.at("version").get<int>();
        if (version != 1) throw FormatError(path.string() + ": unsupported store version " + std::to_string(version));
        dim = header.at("d_e").get<int>();
        if (header.contains("count")) count = header["count"].get<std::size_t>();
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ":1: bad header: " + e.what());
    }
    VectorStore store(dim);
    std::size_t line_no = 1, loaded = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto rec = json::parse(line);
            Chunk c;
            c.id = rec.at("id").get<std::string>();
            c.doc_id = rec.at("doc_id").get<std::string>();
            c.seq = rec.at("seq").get<int>();
            c.text = rec.at("text").get<std::string>();
            c.token_count = rec.at("token_count").get<int>();
            const auto e = rec.at("embedding").get<std::vector<double>>();
            c.embedding = Eigen::Map<const VectorXd>(e.data(), static_cast<Eigen::Index>(e.size()));
            c.metadata = rec.value("metadata", std::map<std::string, std::string>{});
            store.upsert(c);
            ++loaded;
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (count && *count != loaded) {
        throw FormatError(path.string() + ": header announces " + std::to_string(*count) + " chunks, found " +
                          std::to_string(loaded) + " (truncated?)");
    }
    return store;
}

std::vector<IncidentDocument> load_documents(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open " + path.string());
    std::vector<IncidentDocument> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto rec = json::parse(line);
            IncidentDocument d;
            d.id = rec.at("id").get<std::string>();
            d.title = rec.value("title", std::string{});
            d.body = rec.at("body").get<std::string>();
            d.source = rec.value("source", std::string{});
            d.metadata = rec.value("metadata", std::map<std::string, std::string>{});
            if (blank(d.body)) throw ParseError(path.string() + ":" + std::to_string(line_no) + ": empty body");
            out.push_back(std::move(d));
        } catch (const json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void save_documents(const std::filesystem::path& path, const std::vector<IncidentDocument>& docs) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path.string());
    for (const auto& d : docs) {
        out << json{{"id", d.id}, {"title", d.title}, {"body", d.body}, {"source", d.source}, {"metadata", d.metadata}}.dump()
            << '\n';
    }
}

}  // namespace timerag
