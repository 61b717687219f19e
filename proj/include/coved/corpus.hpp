#pragma once

// Dialogue corpus ingestion: one dialogue per line, turns separated by the
// literal token __eou__. Tokenization is lowercasing plus whitespace
// splitting. Also holds the vocabulary, slicing into fixed-length word
// windows, batching with masks, word drop-out, and pretrained embedding
// files for the evaluation metrics.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "coved/rng.hpp"
#include "coved/tensor.hpp"

namespace coved {

inline constexpr const char* kEouText = "__eou__";

struct Dialogue {
    std::vector<std::vector<std::string>> turns;
    std::string source_id;
};

struct CorpusLoadStats {
    std::size_t loaded = 0;
    std::size_t skipped = 0;  // empty lines and lines with fewer than 2 turns
};

inline std::string lowercase(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline std::vector<std::string> whitespace_tokens(const std::string& text) {
    std::istringstream ss(text);
    std::vector<std::string> out;
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

inline std::optional<Dialogue> parse_dialogue_line(const std::string& line,
                                                   const std::string& source_id) {
    Dialogue d;
    d.source_id = source_id;
    std::vector<std::string> current;
    for (const std::string& tok : whitespace_tokens(lowercase(line))) {
        if (tok == kEouText) {
            if (!current.empty()) d.turns.push_back(std::move(current));
            current.clear();
        } else {
            current.push_back(tok);
        }
    }
    if (!current.empty()) d.turns.push_back(std::move(current));
    if (d.turns.size() < 2) return std::nullopt;
    return d;
}

inline std::vector<Dialogue> load_corpus(const std::filesystem::path& path,
                                         CorpusLoadStats* stats = nullptr) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path.string());
    std::vector<Dialogue> out;
    CorpusLoadStats local;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto d = parse_dialogue_line(line, "d" + std::to_string(line_no));
        if (!d) {
            ++local.skipped;
            continue;
        }
        out.push_back(std::move(*d));
        ++local.loaded;
    }
    if (stats) *stats = local;
    return out;
}

// Token ids 0..3 are reserved and never evicted.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kEou = 2;
    static constexpr int kSos = 3;
    static constexpr int kReserved = 4;

    Vocab() {
        for (int i = 0; i < kReserved; ++i) {
            tokens_.push_back(reserved_token(i));
            ids_[tokens_.back()] = i;
        }
    }

    static std::string reserved_token(int id) {
        switch (id) {
            case kPad: return "<pad>";
            case kUnk: return "<unk>";
            case kEou: return kEouText;
            case kSos: return "<sos>";
        }
        throw ConfigError("not a reserved id: " + std::to_string(id));
    }

    static bool is_reserved(int id) { return id >= 0 && id < kReserved; }

    std::size_t size() const { return tokens_.size(); }

    int id_of(const std::string& tok) const {
        auto it = ids_.find(tok);
        return it == ids_.end() ? kUnk : it->second;
    }

    const std::string& token_of(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw DimensionError("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }

    void add(const std::string& tok) {
        if (ids_.count(tok)) throw DataError("duplicate vocabulary token: " + tok);
        ids_[tok] = static_cast<int>(tokens_.size());
        tokens_.push_back(tok);
    }

    // Token-id stream of a dialogue with an end-of-utterance id closing each turn.
    std::vector<int> encode(const Dialogue& d) const {
        std::vector<int> out;
        for (const auto& turn : d.turns) {
            for (const auto& tok : turn) out.push_back(id_of(tok));
            out.push_back(kEou);
        }
        return out;
    }

    std::string decode(std::span<const int> ids) const {
        std::string out;
        for (int id : ids) {
            if (!out.empty()) out += " ";
            out += token_of(id);
        }
        return out;
    }

    // One token per line including the four reserved tokens, so the 0-based
    // line number equals the id.
    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw DataError("cannot write vocab file: " + path.string());
        for (const auto& t : tokens_) out << t << "\n";
    }

    static Vocab load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open vocab file: " + path.string());
        Vocab v;
        std::string line;
        int id = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (id < kReserved) {
                if (line != reserved_token(id))
                    throw DataError("vocab file line " + std::to_string(id + 1) +
                                    " must be the reserved token " + reserved_token(id));
            } else {
                v.add(line);
            }
            ++id;
        }
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

// Keeps the (max_size - 4) most frequent tokens; ties broken by earliest
// first occurrence in the corpus.
inline Vocab build_vocab(const std::vector<Dialogue>& dialogues, std::size_t max_size = 20000) {
    if (dialogues.empty()) throw DataError("build_vocab: empty corpus");
    if (max_size <= Vocab::kReserved)
        throw ConfigError("vocab size must exceed the reserved count");
    std::unordered_map<std::string, std::size_t> count;
    std::unordered_map<std::string, std::size_t> first_seen;
    std::size_t position = 0;
    for (const auto& d : dialogues)
        for (const auto& turn : d.turns)
            for (const auto& tok : turn) {
                ++count[tok];
                first_seen.emplace(tok, position++);
            }

    std::vector<const std::string*> order;
    order.reserve(count.size());
    for (const auto& [tok, _] : count) order.push_back(&tok);
    std::sort(order.begin(), order.end(), [&](const std::string* a, const std::string* b) {
        const std::size_t ca = count[*a], cb = count[*b];
        if (ca != cb) return ca > cb;
        return first_seen[*a] < first_seen[*b];
    });

    Vocab v;
    const std::size_t keep = std::min(order.size(), max_size - Vocab::kReserved);
    for (std::size_t i = 0; i < keep; ++i) v.add(*order[i]);
    return v;
}

struct CorpusSplit {
    std::vector<std::size_t> train, valid, test;
};

// Deterministic shuffled split with proportions 10:1:1.
inline CorpusSplit split_corpus(const std::vector<Dialogue>& dialogues, std::uint64_t seed) {
    const std::size_t n = dialogues.size();
    if (n < 12) throw DataError("split_corpus: need at least 12 dialogues, got " +
                                std::to_string(n));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng = Rng(seed).fork("split");
    for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i + 1));
        std::swap(idx[i], idx[j]);
    }
    const std::size_t n_valid = n / 12;
    const std::size_t n_test = n / 12;
    const std::size_t n_train = n - n_valid - n_test;
    CorpusSplit split;
    split.train.assign(idx.begin(), idx.begin() + n_train);
    split.valid.assign(idx.begin() + n_train, idx.begin() + n_train + n_valid);
    split.test.assign(idx.begin() + n_train + n_valid, idx.end());
    return split;
}

struct Slice {
    std::size_t dialogue_index = 0;
    std::vector<int> ids;
};

// Cuts each id stream into consecutive windows of at most slice_len tokens.
// The final partial window is kept; padding happens at batch time.
inline std::vector<Slice> make_slices(const std::vector<std::vector<int>>& streams,
                                      std::size_t slice_len = 80) {
    if (slice_len == 0) throw ConfigError("slice_len must be positive");
    std::vector<Slice> out;
    for (std::size_t d = 0; d < streams.size(); ++d) {
        const auto& stream = streams[d];
        for (std::size_t start = 0; start < stream.size(); start += slice_len) {
            Slice s;
            s.dialogue_index = d;
            const std::size_t end = std::min(stream.size(), start + slice_len);
            s.ids.assign(stream.begin() + start, stream.begin() + end);
            out.push_back(std::move(s));
        }
    }
    return out;
}

enum class WordDropoutMode { kUnk, kRandom };

// Each non-reserved token is independently replaced with probability rate,
// by <unk> or by a random non-reserved vocabulary token.
inline void word_dropout(std::span<int> tokens, double rate, Rng& rng,
                         WordDropoutMode mode = WordDropoutMode::kUnk,
                         std::size_t vocab_size = 0) {
    if (rate < 0.0 || rate > 1.0) throw ConfigError("word drop-out rate must be in [0,1]");
    if (rate == 0.0) return;
    if (mode == WordDropoutMode::kRandom && vocab_size <= Vocab::kReserved)
        throw ConfigError("random word drop-out needs the vocabulary size");
    for (int& tok : tokens) {
        if (Vocab::is_reserved(tok)) continue;
        if (!rng.bernoulli(rate)) continue;
        if (mode == WordDropoutMode::kUnk) {
            tok = Vocab::kUnk;
        } else {
            tok = Vocab::kReserved +
                  static_cast<int>(rng.below(vocab_size - Vocab::kReserved));
        }
    }
}

// A padded batch of slices. mask is 1 exactly where a real token sits, and
// turn_ends lists, per row, the index one past each utterance segment (a
// segment closes at an end-of-utterance token or at the end of the slice).
struct SliceBatch {
    std::size_t batch = 0;
    std::size_t slice_len = 0;
    std::vector<int> ids;
    std::vector<unsigned char> mask;
    std::vector<std::vector<std::size_t>> turn_ends;
    std::vector<std::size_t> dialogue_index;

    std::span<const int> row(std::size_t r) const {
        return std::span<const int>(ids).subspan(r * slice_len, slice_len);
    }

    std::size_t row_length(std::size_t r) const {
        std::size_t len = 0;
        for (std::size_t i = 0; i < slice_len; ++i)
            if (mask[r * slice_len + i]) ++len;
        return len;
    }

    // (start, end) token spans of the utterance segments in a row
    std::vector<std::pair<std::size_t, std::size_t>> segments(std::size_t r) const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        std::size_t start = 0;
        for (std::size_t end : turn_ends[r]) {
            out.emplace_back(start, end);
            start = end;
        }
        return out;
    }
};

inline SliceBatch make_batch(std::span<const Slice> slices, std::size_t slice_len) {
    SliceBatch b;
    b.batch = slices.size();
    b.slice_len = slice_len;
    b.ids.assign(b.batch * slice_len, Vocab::kPad);
    b.mask.assign(b.batch * slice_len, 0);
    b.turn_ends.resize(b.batch);
    b.dialogue_index.resize(b.batch);
    for (std::size_t r = 0; r < b.batch; ++r) {
        const Slice& s = slices[r];
        if (s.ids.size() > slice_len)
            throw DimensionError("slice longer than slice_len");
        b.dialogue_index[r] = s.dialogue_index;
        for (std::size_t i = 0; i < s.ids.size(); ++i) {
            b.ids[r * slice_len + i] = s.ids[i];
            b.mask[r * slice_len + i] = 1;
            if (s.ids[i] == Vocab::kEou) b.turn_ends[r].push_back(i + 1);
        }
        if (b.turn_ends[r].empty() || b.turn_ends[r].back() != s.ids.size())
            b.turn_ends[r].push_back(s.ids.size());
    }
    return b;
}

// Pretrained word vectors restricted to a vocabulary. Lookup of a token
// absent from the file reports a miss instead of a zero vector.
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return vecs_.size(); }

    void insert(const std::string& tok, std::vector<double> v) {
        if (v.size() != dim_) throw DimensionError("embedding dimension mismatch for " + tok);
        vecs_[tok] = std::move(v);
    }

    const std::vector<double>* find(const std::string& tok) const {
        auto it = vecs_.find(tok);
        return it == vecs_.end() ? nullptr : &it->second;
    }

private:
    std::size_t dim_ = 0;
    std::unordered_map<std::string, std::vector<double>> vecs_;
};

struct EmbeddingLoadStats {
    std::size_t file_lines = 0;
    std::size_t matched = 0;  // in-vocab tokens found in the file
};

inline EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocab& vocab,
                                      EmbeddingLoadStats* stats = nullptr) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embedding file: " + path.string());
    EmbeddingTable table;
    EmbeddingLoadStats local;
    std::string line;
    std::size_t line_no = 0;
    std::size_t dim = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ++local.file_lines;
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        std::vector<double> v;
        double x;
        while (ss >> x) v.push_back(x);
        if (v.empty())
            throw DataError("embedding file line " + std::to_string(line_no) + ": no values");
        if (dim == 0) {
            dim = v.size();
            table = EmbeddingTable(dim);
        } else if (v.size() != dim) {
            throw DataError("embedding file line " + std::to_string(line_no) + ": dimension " +
                            std::to_string(v.size()) + " != " + std::to_string(dim));
        }
        if (vocab.id_of(tok) != Vocab::kUnk || tok == Vocab::reserved_token(Vocab::kUnk)) {
            table.insert(tok, std::move(v));
            ++local.matched;
        }
    }
    if (stats) *stats = local;
    return table;
}

}  // namespace coved
