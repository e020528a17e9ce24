#pragma once

// Layers built from bai ops: parameter store and initializers, linear maps,
// post-norm residual blocks, multi-head attention with causal / padding
// masks, and sinusoidal positions.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "bai/ops.hpp"

namespace bai {

// Named parameters. std::map keeps iteration order stable by path, which is
// the order used for checkpoints and optimizer state.
template <class T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& path, Tensor<T> t) {
        if (params_.count(path)) throw ConfigError("duplicate parameter path '" + path + "'");
        t.set_requires_grad(true);
        return params_.emplace(path, std::move(t)).first->second;
    }
    const Tensor<T>& at(const std::string& path) const {
        auto it = params_.find(path);
        if (it == params_.end()) throw ContractError("unknown parameter '" + path + "'");
        return it->second;
    }
    Tensor<T>& at(const std::string& path) {
        return const_cast<Tensor<T>&>(static_cast<const ParamStore&>(*this).at(path));
    }
    bool contains(const std::string& path) const { return params_.count(path) > 0; }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.numel();
        return n;
    }
    void zero_grad() {
        for (auto& [_, t] : params_) t.zero_grad();
    }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Tensor<T>> params_;
};

template <class T>
Tensor<T> glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<T> v(fan_in * fan_out);
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>({fan_in, fan_out}, std::move(v));
}

template <class T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
}

// Registers `prefix.weight` [in x out] and `prefix.bias` [out].
template <class T>
void add_linear(ParamStore<T>& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
    ps.add(prefix + ".weight", glorot_uniform<T>(in, out, rng));
    ps.add(prefix + ".bias", Tensor<T>::zeros({out}));
}

template <class T>
void add_layer_norm(ParamStore<T>& ps, const std::string& prefix, std::size_t h) {
    ps.add(prefix + ".gain", Tensor<T>::full({h}, T(1)));
    ps.add(prefix + ".bias", Tensor<T>::zeros({h}));
}

// x[..., in] W + b over the last axis.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const ParamStore<T>& ps, const std::string& prefix) {
    const auto& w = ps.at(prefix + ".weight");
    const auto& s = x.shape();
    if (s.back() != w.dim(0))
        throw DimensionError("linear '" + prefix + "': input " + shape_str(s) + " vs weight " + shape_str(w.shape()));
    const std::size_t rows = x.numel() / s.back();
    auto y = matmul(reshape(x, {rows, s.back()}), w);
    Shape os = s;
    os.back() = w.dim(1);
    return reshape(add_bias(y, ps.at(prefix + ".bias")), os);
}

template <class T>
Tensor<T> apply_layer_norm(const Tensor<T>& x, const ParamStore<T>& ps, const std::string& prefix) {
    return layer_norm(x, ps.at(prefix + ".gain"), ps.at(prefix + ".bias"), T(1e-5));
}

// Per-forward-pass state: dropout randomness. A null rng disables dropout.
struct ForwardContext {
    Rng* rng = nullptr;
    double dropout = 0.0;
};

template <class T>
Tensor<T> dropout(const Tensor<T>& x, const ForwardContext& ctx) {
    if (!ctx.rng || ctx.dropout <= 0.0) return x;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const T keep_scale = T(1.0 / (1.0 - ctx.dropout));
    std::vector<T> m(x.numel());
    for (auto& v : m) v = u(*ctx.rng) < ctx.dropout ? T(0) : keep_scale;
    return mul(x, Tensor<T>(x.shape(), std::move(m)));
}

// Which key positions each query may attend to. Padding is given as
// per-sequence key validity; causal additionally forbids keys j > i.
struct AttentionMask {
    bool causal = false;
    std::vector<std::vector<std::uint8_t>> key_valid;  // [B][Lk]; empty = all valid

    static AttentionMask none() { return {}; }
    static AttentionMask from_lengths(const std::vector<std::size_t>& lengths, std::size_t lk, bool causal) {
        AttentionMask m;
        m.causal = causal;
        for (auto len : lengths) {
            std::vector<std::uint8_t> row(lk, 0);
            for (std::size_t j = 0; j < std::min(len, lk); ++j) row[j] = 1;
            m.key_valid.push_back(std::move(row));
        }
        return m;
    }
    bool allows(std::size_t b, std::size_t i, std::size_t j) const {
        if (causal && j > i) return false;
        return key_valid.empty() || key_valid.at(b).at(j);
    }
};

// Additive mask [B*heads x Lq x Lk]: 0 where allowed, -inf elsewhere.
template <class T>
Tensor<T> additive_mask(const AttentionMask& mask, std::size_t batch, std::size_t heads, std::size_t lq, std::size_t lk) {
    if (!mask.key_valid.empty() && mask.key_valid.size() != batch)
        throw DimensionError("attention mask covers " + std::to_string(mask.key_valid.size()) + " sequences, batch is " +
                             std::to_string(batch));
    const T ninf = -std::numeric_limits<T>::infinity();
    std::vector<T> v(batch * heads * lq * lk);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < lq; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < lk; ++j) {
                const bool ok = mask.allows(b, i, j);
                any = any || ok;
                for (std::size_t h = 0; h < heads; ++h) v[((b * heads + h) * lq + i) * lk + j] = ok ? T(0) : ninf;
            }
            if (!any) throw ContractError("attention: query " + std::to_string(i) + " of sequence " + std::to_string(b) +
                                          " has no visible key");
        }
    }
    return Tensor<T>({batch * heads, lq, lk}, std::move(v));
}

template <class T>
void add_attention(ParamStore<T>& ps, const std::string& prefix, std::size_t h, Rng& rng) {
    for (const char* p : {"q", "k", "v", "o"}) add_linear(ps, prefix + "." + p, h, h, rng);
}

// Scaled dot-product attention over `heads` heads.
// query: [B x Lq x H], memory: [B x Lk x H].
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& query, const Tensor<T>& memory, const AttentionMask& mask,
                               const ParamStore<T>& ps, const std::string& prefix, std::size_t heads) {
    const std::size_t h = query.dim(2);
    if (heads == 0 || h % heads != 0)
        throw ConfigError("attention: hidden size " + std::to_string(h) + " not divisible by " + std::to_string(heads) +
                          " heads");
    const std::size_t b = query.dim(0), lq = query.dim(1), lk = memory.dim(1);
    auto q = split_heads(linear(query, ps, prefix + ".q"), heads);
    auto k = split_heads(linear(memory, ps, prefix + ".k"), heads);
    auto v = split_heads(linear(memory, ps, prefix + ".v"), heads);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(h / heads));
    auto scores = add(scale(matmul(q, transpose(k)), inv_sqrt), additive_mask<T>(mask, b, heads, lq, lk));
    auto ctx = merge_heads(matmul(softmax_rows(scores), v), heads);
    return linear(ctx, ps, prefix + ".o");
}

template <class T>
void add_feed_forward(ParamStore<T>& ps, const std::string& prefix, std::size_t h, std::size_t ff, Rng& rng) {
    add_linear(ps, prefix + ".in", h, ff, rng);
    add_linear(ps, prefix + ".out", ff, h, rng);
}

template <class T>
Tensor<T> feed_forward(const Tensor<T>& x, const ParamStore<T>& ps, const std::string& prefix, const ForwardContext& ctx) {
    return linear(dropout(relu(linear(x, ps, prefix + ".in")), ctx), ps, prefix + ".out");
}

// Post-norm residual: LayerNorm(x + Dropout(sublayer)).
template <class T>
Tensor<T> residual_norm(const Tensor<T>& x, const Tensor<T>& sublayer, const ParamStore<T>& ps, const std::string& norm,
                        const ForwardContext& ctx) {
    return apply_layer_norm(add(x, dropout(sublayer, ctx)), ps, norm);
}

// Fixed sinusoidal table [len x H].
template <class T>
std::vector<T> sinusoidal_positions(std::size_t len, std::size_t h) {
    std::vector<T> pe(len * h);
    for (std::size_t pos = 0; pos < len; ++pos)
        for (std::size_t i = 0; i < h; ++i) {
            const double rate = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(h));
            const double a = static_cast<double>(pos) / rate;
            pe[pos * h + i] = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
        }
    return pe;
}

// ids [B x L] (row-major) -> [B x L x H], optionally times sqrt(H).
template <class T>
Tensor<T> embed(const std::vector<TokenId>& ids, std::size_t batch, std::size_t len, const Tensor<T>& table, bool scale_sqrt_h) {
    auto e = embedding_lookup(table, ids, {batch, len});
    if (!scale_sqrt_h) return e;
    return scale(e, std::sqrt(static_cast<T>(table.dim(1))));
}

// x [B x L x H] + positions[offset .. offset+L).
template <class T>
Tensor<T> add_positions(const Tensor<T>& x, std::size_t offset = 0) {
    const std::size_t b = x.dim(0), l = x.dim(1), h = x.dim(2);
    auto pe = sinusoidal_positions<T>(offset + l, h);
    std::vector<T> v(x.numel());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < l * h; ++i) v[bi * l * h + i] = pe[offset * h + i];
    return add(x, Tensor<T>(x.shape(), std::move(v)));
}

}  // namespace bai
