#pragma once

// Sequence-to-sequence models whose pivots feed the BAI loss:
//   transformer   - post-norm encoder-decoder; pivots are the encoder output.
//   expansion     - encoder layers with static expansion (forward expansion
//                   into groups of g vectors, parameter-less backward
//                   expansion plus a learned projection); pivots are the
//                   per-group layer sums of the two expansion paths.
//   decoder_only  - causal decoder over [prompt ; continuation]; pivots are
//                   the last-layer prompt states.

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "bai/data.hpp"
#include "bai/equalize.hpp"
#include "bai/nn.hpp"

namespace bai {

enum class Arch { transformer, expansion, decoder_only };

inline const char* to_string(Arch a) {
    switch (a) {
        case Arch::transformer: return "transformer";
        case Arch::expansion: return "expansion";
        case Arch::decoder_only: return "decoder_only";
    }
    return "?";
}

inline Arch parse_arch(const std::string& s) {
    for (auto a : {Arch::transformer, Arch::expansion, Arch::decoder_only})
        if (s == to_string(a)) return a;
    throw ConfigError("model.arch: unknown architecture '" + s + "' (transformer|expansion|decoder_only)");
}

struct ModelConfig {
    Arch arch = Arch::transformer;
    std::size_t layers = 2;
    std::size_t hidden = 64;
    std::size_t ff_size = 256;
    std::size_t heads = 4;
    std::size_t vocab = 20;
    std::vector<std::size_t> groups{4, 8};  // expansion arch only
    std::size_t max_len = 32;
    double dropout = 0.1;
    bool scale_embedding = false;  // multiply token embeddings by sqrt(H)
    bool tie_embeddings = false;   // output projection reuses the embedding table
    bool d_positional = false;     // BAI targets D include positional encodings
    bool d_scaled = false;         // BAI targets D include the sqrt(H) scale

    void validate() const {
        auto positive = [](std::size_t v, const char* key) {
            if (v < 1) throw ConfigError(std::string(key) + " must be >= 1");
        };
        positive(layers, "model.layers");
        positive(hidden, "model.hidden");
        positive(ff_size, "model.ff");
        positive(heads, "model.heads");
        positive(max_len, "model.max_len");
        if (vocab <= static_cast<std::size_t>(kFirstToken)) throw ConfigError("model.vocab must exceed the 4 reserved ids");
        if (hidden % heads != 0)
            throw ConfigError("model.hidden=" + std::to_string(hidden) + " is not divisible by model.heads=" + std::to_string(heads));
        if (arch == Arch::expansion) {
            if (groups.empty()) throw ConfigError("model.groups must be non-empty for the expansion architecture");
            for (auto g : groups) positive(g, "model.groups entries");
            for (std::size_t i = 0; i < groups.size(); ++i)
                for (std::size_t j = 0; j < i; ++j)
                    if (groups[i] == groups[j]) throw ConfigError("model.groups entries must be distinct, " + std::to_string(groups[i]) + " repeats");
        }
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0, 1)");
    }
};

enum class PivotKind { encoder_final, expansion_intermediate, prompt_final };

inline const char* to_string(PivotKind k) {
    switch (k) {
        case PivotKind::encoder_final: return "encoder_final";
        case PivotKind::expansion_intermediate: return "expansion_intermediate";
        case PivotKind::prompt_final: return "prompt_final";
    }
    return "?";
}

template <class T>
struct PivotSet {
    PivotKind kind = PivotKind::encoder_final;
    Tensor<T> states;                          // encoder_final [B x N x H] or prompt_final [B x P x H]
    std::vector<ExpansionPivot<T>> expansion;  // expansion_intermediate, one entry per g
    std::vector<std::uint8_t> mask;            // validity of `states` rows [B*N] / [B*P]
};

template <class T>
struct ForwardOutput {
    Tensor<T> logits;  // [B x M x V]
    PivotSet<T> pivots;
    Tensor<T> targets_embedded;            // D: [B x M x H]
    std::vector<TokenId> targets;          // tgt_out, flattened [B*M]
    std::vector<std::uint8_t> target_mask;  // [B*M]
    // expansion arch: per-layer, per-group A^g_l (instrumentation)
    std::vector<std::vector<Tensor<T>>> expansion_trace;
};

template <class T>
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        init(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    // Teacher-forced forward pass over a batch. For decoder_only the batch
    // source is the prompt and the target is the continuation.
    ForwardOutput<T> forward(const Batch& batch, const ForwardContext& ctx = {}) const {
        check_lengths(batch);
        switch (cfg_.arch) {
            case Arch::transformer:
            case Arch::expansion: return encoder_decoder_forward(batch, ctx);
            case Arch::decoder_only: return decoder_only_forward(batch, ctx);
        }
        throw ContractError("unreachable architecture");
    }

    // Longest target (bos-prefixed) the model accepts for a source of this
    // length; bounds the number of decoding steps.
    std::size_t target_capacity(std::size_t src_len) const {
        if (cfg_.arch != Arch::decoder_only) return cfg_.max_len;
        return cfg_.max_len > src_len ? cfg_.max_len - src_len : 0;
    }

    // Log-probabilities (double) of the next token after `prefix`
    // (bos implied) for a single source; dropout off, no graph.
    std::vector<double> next_log_probs(const std::vector<TokenId>& src, const std::vector<TokenId>& prefix) const {
        NoGradScope<T> no_grad;
        Batch b;
        b.size = 1;
        b.src = src.empty() ? std::vector<TokenId>{kPad} : src;
        b.src_len = b.src.size();
        b.src_lengths = {src.size()};
        b.tgt_len = prefix.size() + 1;
        b.tgt_in = {kBos};
        b.tgt_in.insert(b.tgt_in.end(), prefix.begin(), prefix.end());
        b.tgt_out.assign(b.tgt_len, kPad);
        b.tgt_lengths = {b.tgt_len};
        auto out = forward(b);
        const std::size_t v = cfg_.vocab;
        const T* row = out.logits.values().data() + (b.tgt_len - 1) * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        const double lz = mx + std::log(z);
        std::vector<double> lp(v);
        for (std::size_t j = 0; j < v; ++j) lp[j] = static_cast<double>(row[j]) - lz;
        return lp;
    }

private:
    void init(Rng& rng) {
        const std::size_t h = cfg_.hidden, v = cfg_.vocab;
        params_.add("embed.table", normal_init<T>({v, h}, 1.0 / std::sqrt(static_cast<double>(h)), rng));
        const bool encoder = cfg_.arch != Arch::decoder_only;
        if (encoder) {
            for (std::size_t l = 0; l < cfg_.layers; ++l) {
                const auto p = "enc." + std::to_string(l);
                if (cfg_.arch == Arch::transformer) {
                    add_attention(params_, p + ".self", h, rng);
                } else {
                    for (auto g : cfg_.groups)
                        params_.add(p + ".expand.g" + std::to_string(g) + ".query",
                                    normal_init<T>({g, h}, 1.0 / std::sqrt(static_cast<double>(h)), rng));
                    add_linear(params_, p + ".expand.out", h, h, rng);
                }
                add_layer_norm(params_, p + ".norm1", h);
                add_feed_forward(params_, p + ".ff", h, cfg_.ff_size, rng);
                add_layer_norm(params_, p + ".norm2", h);
            }
        }
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const auto p = "dec." + std::to_string(l);
            add_attention(params_, p + ".self", h, rng);
            add_layer_norm(params_, p + ".norm1", h);
            if (encoder) {
                add_attention(params_, p + ".cross", h, rng);
                add_layer_norm(params_, p + ".norm_cross", h);
            }
            add_feed_forward(params_, p + ".ff", h, cfg_.ff_size, rng);
            add_layer_norm(params_, p + ".norm2", h);
        }
        if (cfg_.tie_embeddings)
            params_.add("out.bias", Tensor<T>::zeros({v}));
        else
            add_linear(params_, "out", h, v, rng);
    }

    void check_lengths(const Batch& b) const {
        if (b.size == 0) throw InputError("empty batch");
        if (cfg_.arch == Arch::decoder_only) {
            for (auto len : b.src_lengths)
                if (len == 0) throw InputError("decoder_only: empty prompt");
            if (b.src_len + b.tgt_len > cfg_.max_len)
                throw InputError("decoder_only: prompt+continuation length " + std::to_string(b.src_len + b.tgt_len) +
                                 " exceeds max_len " + std::to_string(cfg_.max_len));
            return;
        }
        if (b.src_len > cfg_.max_len || b.tgt_len > cfg_.max_len)
            throw InputError("sequence length (src " + std::to_string(b.src_len) + ", tgt " + std::to_string(b.tgt_len) +
                             ") exceeds max_len " + std::to_string(cfg_.max_len));
        for (auto len : b.src_lengths)
            if (len == 0) throw InputError("empty source sequence");
    }

    Tensor<T> embed_tokens(const std::vector<TokenId>& ids, std::size_t batch, std::size_t len, std::size_t pos_offset,
                           const ForwardContext& ctx) const {
        auto e = embed(ids, batch, len, params_.at("embed.table"), cfg_.scale_embedding);
        return dropout(add_positions(e, pos_offset), ctx);
    }

    // D: embeddings of tgt_out, raw unless the d_* flags ask otherwise.
    Tensor<T> target_embeddings(const std::vector<TokenId>& ids, std::size_t batch, std::size_t len) const {
        auto d = embed(ids, batch, len, params_.at("embed.table"), cfg_.d_scaled);
        return cfg_.d_positional ? add_positions(d) : d;
    }

    Tensor<T> project_out(const Tensor<T>& x) const {
        if (!cfg_.tie_embeddings) return linear(x, params_, "out");
        const auto& s = x.shape();
        const std::size_t rows = x.numel() / s.back();
        auto y = matmul(reshape(x, {rows, s.back()}), transpose(params_.at("embed.table")));
        return reshape(add_bias(y, params_.at("out.bias")), {s[0], s[1], cfg_.vocab});
    }

    // Forward expansion of one layer, then the parameter-less backward
    // expansion and a learned projection. Returns the layer's mixing output
    // and records A^g_l, B^g_l.
    Tensor<T> expansion_mixing(const Tensor<T>& x, const std::vector<std::uint8_t>& src_mask, const std::string& prefix,
                               std::vector<ExpansionPivot<T>>& per_group) const {
        const std::size_t b = x.dim(0), n = x.dim(1), h = x.dim(2);
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(h));
        auto flat = reshape(x, {b * n, h});
        per_group.clear();
        for (auto g : cfg_.groups) {
            const auto& query = params_.at(prefix + ".expand.g" + std::to_string(g) + ".query");
            // scores [B x g x N] = P E^T / sqrt(H)
            auto s = transpose(reshape(matmul(flat, transpose(query)), {b, n, g}));
            s = scale(s, inv_sqrt);
            std::vector<T> m(b * g * n);
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t i = 0; i < g; ++i)
                    for (std::size_t j = 0; j < n; ++j) m[(bi * g + i) * n + j] = T(src_mask[bi * n + j]);
            Tensor<T> mask({b, g, n}, std::move(m));
            auto wa = row_normalize(mul(relu(s), mask), T(kPhiEps));
            auto wb = row_normalize(mul(neg_relu(s), mask), T(kPhiEps));
            per_group.push_back({g, matmul(wa, x), matmul(wb, x)});
        }
        auto back = equalize_expansion(per_group, x, {});
        return linear(back, params_, prefix + ".expand.out");
    }

    ForwardOutput<T> encoder_decoder_forward(const Batch& batch, const ForwardContext& ctx) const {
        const std::size_t b = batch.size, n = batch.src_len, m = batch.tgt_len;
        const auto src_mask = batch.src_mask();
        const auto pad = AttentionMask::from_lengths(batch.src_lengths, n, false);
        ForwardOutput<T> out;

        auto x = embed_tokens(batch.src, b, n, 0, ctx);
        std::vector<ExpansionPivot<T>> sums;
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const auto p = "enc." + std::to_string(l);
            if (cfg_.arch == Arch::transformer) {
                x = residual_norm(x, multi_head_attention(x, x, pad, params_, p + ".self", cfg_.heads), params_, p + ".norm1", ctx);
            } else {
                std::vector<ExpansionPivot<T>> layer;
                auto mixed = expansion_mixing(x, src_mask, p, layer);
                std::vector<Tensor<T>> trace;
                for (std::size_t gi = 0; gi < layer.size(); ++gi) {
                    trace.push_back(layer[gi].a);
                    if (l == 0) {
                        sums.push_back(layer[gi]);
                    } else {
                        sums[gi].a = add(sums[gi].a, layer[gi].a);
                        sums[gi].b = add(sums[gi].b, layer[gi].b);
                    }
                }
                out.expansion_trace.push_back(std::move(trace));
                x = residual_norm(x, mixed, params_, p + ".norm1", ctx);
            }
            x = residual_norm(x, feed_forward(x, params_, p + ".ff", ctx), params_, p + ".norm2", ctx);
        }
        if (cfg_.arch == Arch::transformer) {
            out.pivots.kind = PivotKind::encoder_final;
            out.pivots.states = x;
        } else {
            out.pivots.kind = PivotKind::expansion_intermediate;
            out.pivots.expansion = std::move(sums);
            out.pivots.states = x;
        }
        out.pivots.mask = src_mask;

        const auto self = AttentionMask::from_lengths(batch.tgt_lengths, m, true);
        auto y = embed_tokens(batch.tgt_in, b, m, 0, ctx);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const auto p = "dec." + std::to_string(l);
            y = residual_norm(y, multi_head_attention(y, y, self, params_, p + ".self", cfg_.heads), params_, p + ".norm1", ctx);
            y = residual_norm(y, multi_head_attention(y, x, pad, params_, p + ".cross", cfg_.heads), params_, p + ".norm_cross", ctx);
            y = residual_norm(y, feed_forward(y, params_, p + ".ff", ctx), params_, p + ".norm2", ctx);
        }
        out.logits = project_out(y);
        out.targets = batch.tgt_out;
        out.target_mask = batch.tgt_mask();
        out.targets_embedded = target_embeddings(batch.tgt_out, b, m);
        return out;
    }

    ForwardOutput<T> decoder_only_forward(const Batch& batch, const ForwardContext& ctx) const {
        const std::size_t b = batch.size, p = batch.src_len, m = batch.tgt_len, len = p + m;
        std::vector<TokenId> ids(b * len, kPad);
        AttentionMask mask;
        mask.causal = true;
        for (std::size_t bi = 0; bi < b; ++bi) {
            std::copy_n(batch.src.begin() + static_cast<std::ptrdiff_t>(bi * p), p, ids.begin() + static_cast<std::ptrdiff_t>(bi * len));
            std::copy_n(batch.tgt_in.begin() + static_cast<std::ptrdiff_t>(bi * m), m,
                        ids.begin() + static_cast<std::ptrdiff_t>(bi * len + p));
            std::vector<std::uint8_t> valid(len, 0);
            for (std::size_t j = 0; j < batch.src_lengths[bi]; ++j) valid[j] = 1;
            for (std::size_t j = 0; j < batch.tgt_lengths[bi]; ++j) valid[p + j] = 1;
            mask.key_valid.push_back(std::move(valid));
        }
        auto y = embed_tokens(ids, b, len, 0, ctx);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const auto pre = "dec." + std::to_string(l);
            y = residual_norm(y, multi_head_attention(y, y, mask, params_, pre + ".self", cfg_.heads), params_, pre + ".norm1", ctx);
            y = residual_norm(y, feed_forward(y, params_, pre + ".ff", ctx), params_, pre + ".norm2", ctx);
        }
        ForwardOutput<T> out;
        out.pivots.kind = PivotKind::prompt_final;
        out.pivots.states = slice(y, 1, 0, p);
        out.pivots.mask = batch.src_mask();
        out.logits = project_out(slice(y, 1, p, len));
        out.targets = batch.tgt_out;
        out.target_mask = batch.tgt_mask();
        out.targets_embedded = target_embeddings(batch.tgt_out, b, m);
        return out;
    }

    ModelConfig cfg_;
    ParamStore<T> params_;
};

}  // namespace bai
