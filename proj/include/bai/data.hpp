#pragma once

// Vocabulary, synthetic sequence tasks, tab-separated parallel corpora and
// padded batching.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "bai/errors.hpp"
#include "bai/ops.hpp"

namespace bai {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kFirstToken = 4;

class Vocabulary {
public:
    explicit Vocabulary(std::size_t capacity = 1u << 20) : capacity_(capacity) {
        for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) push(t);
    }

    // Returns the id of `token`, adding it while capacity remains; unk after.
    TokenId add(const std::string& token) {
        if (auto it = ids_.find(token); it != ids_.end()) return it->second;
        if (tokens_.size() >= capacity_) return kUnk;
        return push(token);
    }
    TokenId id(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kUnk : it->second;
    }
    const std::string& token(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw IndexError("vocabulary has no id " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::vector<TokenId> encode(const std::string& text) const {
        std::vector<TokenId> out;
        std::istringstream is(text);
        for (std::string w; is >> w;) out.push_back(id(w));
        return out;
    }
    // Space-joined tokens; special ids are skipped.
    std::string decode(const std::vector<TokenId>& ids) const {
        std::string out;
        for (auto i : ids) {
            if (i < kFirstToken) continue;
            if (!out.empty()) out += ' ';
            out += token(i);
        }
        return out;
    }

private:
    TokenId push(const std::string& t) {
        const auto id = static_cast<TokenId>(tokens_.size());
        tokens_.push_back(t);
        ids_.emplace(t, id);
        return id;
    }
    std::size_t capacity_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
};

inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    for (std::string w; is >> w;) out.push_back(w);
    return out;
}

inline std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    for (const auto& t : tokens) {
        if (!out.empty()) out += ' ';
        out += t;
    }
    return out;
}

struct Sample {
    std::vector<TokenId> src;
    std::vector<TokenId> tgt;
    bool operator<(const Sample& o) const { return std::tie(src, tgt) < std::tie(o.src, o.tgt); }
    bool operator==(const Sample& o) const = default;
};

enum class TaskKind { copy, reverse, sort, arith_translate, parallel_file };

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::copy: return "copy";
        case TaskKind::reverse: return "reverse";
        case TaskKind::sort: return "sort";
        case TaskKind::arith_translate: return "arith_translate";
        case TaskKind::parallel_file: return "parallel_file";
    }
    return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
    for (auto k : {TaskKind::copy, TaskKind::reverse, TaskKind::sort, TaskKind::arith_translate, TaskKind::parallel_file})
        if (s == to_string(k)) return k;
    throw ConfigError("task.kind: unknown task '" + s + "' (copy|reverse|sort|arith_translate|parallel_file)");
}

struct TaskSpec {
    TaskKind kind = TaskKind::copy;
    std::size_t vocab = 20;
    std::size_t min_len = 3;
    std::size_t max_len = 12;
    std::size_t train_count = 10000;
    std::size_t valid_count = 1000;
    std::uint64_t seed = 1;
    std::string path;             // parallel_file only
    double valid_fraction = 0.1;  // parallel_file only
};

struct Dataset {
    Vocabulary vocab;
    std::vector<Sample> train;
    std::vector<Sample> valid;
};

namespace detail {

inline std::string symbol_name(std::size_t k) {
    if (k < 26) return std::string(1, static_cast<char>('a' + k));
    return "s" + std::to_string(k);
}

inline std::vector<TokenId> digits_of(unsigned long long v, TokenId zero) {
    std::string s = std::to_string(v);
    std::vector<TokenId> out;
    for (char c : s) out.push_back(zero + (c - '0'));
    return out;
}

}  // namespace detail

// Draws distinct train and valid samples; valid never repeats a train sample.
inline Dataset generate(const TaskSpec& task) {
    if (task.kind == TaskKind::parallel_file) throw ConfigError("generate: parallel_file tasks are loaded, not generated");
    if (task.min_len < 1 || task.min_len > task.max_len)
        throw ConfigError("task length range [" + std::to_string(task.min_len) + "," + std::to_string(task.max_len) + "] is empty");
    Dataset ds{Vocabulary(task.vocab), {}, {}};
    const std::size_t needed = task.kind == TaskKind::arith_translate ? 11 : 2;
    if (task.vocab < kFirstToken + needed)
        throw ConfigError("task.vocab=" + std::to_string(task.vocab) + " too small for the " + to_string(task.kind) +
                          " alphabet (needs " + std::to_string(kFirstToken + needed) + ")");

    TokenId zero = 0;
    std::size_t symbols = 0;
    if (task.kind == TaskKind::arith_translate) {
        for (int d = 0; d < 10; ++d) ds.vocab.add(std::to_string(d));
        ds.vocab.add("+");
        zero = ds.vocab.id("0");
    } else {
        symbols = task.vocab - kFirstToken;
        for (std::size_t k = 0; k < symbols; ++k) ds.vocab.add(detail::symbol_name(k));
    }
    const TokenId plus = ds.vocab.id("+");

    Rng rng(task.seed);
    auto draw = [&]() -> Sample {
        Sample s;
        if (task.kind == TaskKind::arith_translate) {
            const std::size_t max_digits = std::min<std::size_t>(9, (task.max_len - 1) / 2);
            if (max_digits < 1) throw ConfigError("arith_translate needs task.max_len >= 3");
            std::uniform_int_distribution<std::size_t> nd(1, max_digits);
            for (;;) {
                const std::size_t da = nd(rng), db = nd(rng);
                if (da + db + 1 < task.min_len) continue;
                auto number = [&](std::size_t digits) {
                    unsigned long long lo = digits == 1 ? 0 : 1, v = 0;
                    std::uniform_int_distribution<unsigned long long> first(lo, 9), rest(0, 9);
                    v = first(rng);
                    for (std::size_t i = 1; i < digits; ++i) v = v * 10 + rest(rng);
                    return v;
                };
                const auto a = number(da), b = number(db);
                s.src = detail::digits_of(a, zero);
                s.src.push_back(plus);
                for (auto t : detail::digits_of(b, zero)) s.src.push_back(t);
                s.tgt = detail::digits_of(a + b, zero);
                return s;
            }
        }
        std::uniform_int_distribution<std::size_t> len(task.min_len, task.max_len);
        std::uniform_int_distribution<TokenId> tok(kFirstToken, static_cast<TokenId>(kFirstToken + symbols - 1));
        const std::size_t n = len(rng);
        for (std::size_t i = 0; i < n; ++i) s.src.push_back(tok(rng));
        s.tgt = s.src;
        if (task.kind == TaskKind::reverse) std::reverse(s.tgt.begin(), s.tgt.end());
        if (task.kind == TaskKind::sort) std::sort(s.tgt.begin(), s.tgt.end());
        return s;
    };

    std::set<Sample> seen;
    auto fill = [&](std::vector<Sample>& out, std::size_t count, const char* split) {
        std::size_t attempts = 0;
        while (out.size() < count) {
            if (++attempts > 100 * count + 1000)
                throw ConfigError(std::string("could not draw ") + std::to_string(count) + " distinct " + split +
                                  " samples; widen the vocabulary or length range");
            auto s = draw();
            if (seen.insert(s).second) out.push_back(std::move(s));
        }
    };
    fill(ds.train, task.train_count, "train");
    fill(ds.valid, task.valid_count, "valid");
    return ds;
}

// Reads "source<TAB>target" lines into a shared vocabulary. Pairs with a side
// longer than max_len tokens are dropped; empty lines are skipped.
inline std::vector<Sample> load_parallel(const std::string& path, Vocabulary& vocab, std::size_t max_len) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open parallel corpus '" + path + "'");
    std::vector<Sample> pairs;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
            throw InputError(path + ":" + std::to_string(lineno) + ": expected exactly one tab separating source and target");
        auto src = tokenize(line.substr(0, tab));
        auto tgt = tokenize(line.substr(tab + 1));
        if (src.empty() || tgt.empty()) throw InputError(path + ":" + std::to_string(lineno) + ": empty source or target");
        if (src.size() > max_len || tgt.size() > max_len) continue;
        Sample s;
        for (const auto& w : src) s.src.push_back(vocab.add(w));
        for (const auto& w : tgt) s.tgt.push_back(vocab.add(w));
        pairs.push_back(std::move(s));
    }
    return pairs;
}

// Loads a corpus and splits it: the last valid_fraction of lines become the
// validation set, minus any pair that also occurs in training.
inline Dataset load_parallel_task(const TaskSpec& task) {
    Dataset ds{Vocabulary(task.vocab), {}, {}};
    auto pairs = load_parallel(task.path, ds.vocab, task.max_len);
    const auto n_valid = static_cast<std::size_t>(static_cast<double>(pairs.size()) * task.valid_fraction);
    const std::size_t n_train = pairs.size() - n_valid;
    ds.train.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::set<Sample> train_set(ds.train.begin(), ds.train.end());
    for (std::size_t i = n_train; i < pairs.size(); ++i)
        if (!train_set.count(pairs[i])) ds.valid.push_back(pairs[i]);
    if (ds.train.empty()) throw InputError("parallel corpus '" + task.path + "' has no usable training pairs");
    return ds;
}

inline Dataset make_dataset(const TaskSpec& task) {
    return task.kind == TaskKind::parallel_file ? load_parallel_task(task) : generate(task);
}

// Padded token matrices, row-major. tgt_in = [bos, y...], tgt_out = [y..., eos].
struct Batch {
    std::size_t size = 0;     // B
    std::size_t src_len = 0;  // N (padded)
    std::size_t tgt_len = 0;  // M (padded)
    std::vector<TokenId> src;
    std::vector<TokenId> tgt_in;
    std::vector<TokenId> tgt_out;
    std::vector<std::size_t> src_lengths;
    std::vector<std::size_t> tgt_lengths;  // valid positions in tgt_in / tgt_out

    std::vector<std::uint8_t> src_mask() const { return mask(src_lengths, src_len); }
    std::vector<std::uint8_t> tgt_mask() const { return mask(tgt_lengths, tgt_len); }

    static std::vector<std::uint8_t> mask(const std::vector<std::size_t>& lengths, std::size_t width) {
        std::vector<std::uint8_t> m(lengths.size() * width, 0);
        for (std::size_t b = 0; b < lengths.size(); ++b)
            for (std::size_t j = 0; j < std::min(lengths[b], width); ++j) m[b * width + j] = 1;
        return m;
    }
};

inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("make_batch: empty index list");
    Batch b;
    b.size = indices.size();
    for (auto i : indices) {
        b.src_len = std::max(b.src_len, samples.at(i).src.size());
        b.tgt_len = std::max(b.tgt_len, samples[i].tgt.size() + 1);
    }
    b.src_len = std::max<std::size_t>(b.src_len, 1);
    b.src.assign(b.size * b.src_len, kPad);
    b.tgt_in.assign(b.size * b.tgt_len, kPad);
    b.tgt_out.assign(b.size * b.tgt_len, kPad);
    for (std::size_t r = 0; r < b.size; ++r) {
        const auto& s = samples[indices[r]];
        std::copy(s.src.begin(), s.src.end(), b.src.begin() + static_cast<std::ptrdiff_t>(r * b.src_len));
        b.tgt_in[r * b.tgt_len] = kBos;
        std::copy(s.tgt.begin(), s.tgt.end(), b.tgt_in.begin() + static_cast<std::ptrdiff_t>(r * b.tgt_len + 1));
        std::copy(s.tgt.begin(), s.tgt.end(), b.tgt_out.begin() + static_cast<std::ptrdiff_t>(r * b.tgt_len));
        b.tgt_out[r * b.tgt_len + s.tgt.size()] = kEos;
        b.src_lengths.push_back(s.src.size());
        b.tgt_lengths.push_back(s.tgt.size() + 1);
    }
    return b;
}

enum class BatchingKind { random, length_bucketed };

inline BatchingKind parse_batching(const std::string& s) {
    if (s == "random") return BatchingKind::random;
    if (s == "length_bucketed") return BatchingKind::length_bucketed;
    throw ConfigError("train.batching: unknown policy '" + s + "' (random|length_bucketed)");
}
inline const char* to_string(BatchingKind k) { return k == BatchingKind::random ? "random" : "length_bucketed"; }

struct BatchPolicy {
    BatchingKind kind = BatchingKind::random;
    std::size_t batch_size = 32;       // sequences per batch; 0 when token-based
    std::size_t token_batch_size = 0;  // padded source+target tokens per batch; 0 when sequence-based
    std::size_t bucket_width = 2;      // source-length bucket width (length_bucketed)
};

// Index lists, one per batch, covering every sample exactly once. The order
// depends only on (samples, policy, seed).
inline std::vector<std::vector<std::size_t>> plan_batches(const std::vector<Sample>& samples, const BatchPolicy& policy,
                                                          std::uint64_t seed) {
    if ((policy.batch_size == 0) == (policy.token_batch_size == 0))
        throw ConfigError("exactly one of train.batch_size / train.token_batch_size must be set");
    Rng rng(seed);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    auto chunk = [&](const std::vector<std::size_t>& idx, std::vector<std::vector<std::size_t>>& out) {
        std::vector<std::size_t> cur;
        std::size_t max_src = 0, max_tgt = 0;
        for (auto i : idx) {
            if (policy.token_batch_size) {
                const auto ms = std::max(max_src, samples[i].src.size()), mt = std::max(max_tgt, samples[i].tgt.size() + 1);
                if (!cur.empty() && (cur.size() + 1) * (ms + mt) > policy.token_batch_size) {
                    out.push_back(std::move(cur));
                    cur.clear();
                    max_src = max_tgt = 0;
                }
                max_src = std::max(max_src, samples[i].src.size());
                max_tgt = std::max(max_tgt, samples[i].tgt.size() + 1);
            }
            cur.push_back(i);
            if (policy.batch_size && cur.size() == policy.batch_size) {
                out.push_back(std::move(cur));
                cur.clear();
            }
        }
        if (!cur.empty()) out.push_back(std::move(cur));
    };

    std::vector<std::vector<std::size_t>> batches;
    if (policy.kind == BatchingKind::random) {
        chunk(order, batches);
        return batches;
    }
    if (policy.bucket_width == 0) throw ConfigError("train.bucket_width must be >= 1");
    std::map<std::size_t, std::vector<std::size_t>> buckets;
    for (auto i : order) buckets[samples[i].src.size() / policy.bucket_width].push_back(i);
    for (auto& [_, idx] : buckets) chunk(idx, batches);
    std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
}

}  // namespace bai
