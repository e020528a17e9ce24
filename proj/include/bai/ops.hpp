#pragma once

// Differentiable operations over bai::Tensor.
//
// Only explicit shapes are accepted: no implicit broadcasting apart from
// scale() by a host scalar and the last-axis bias of add_bias().

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "bai/tensor.hpp"

namespace bai {

using TokenId = std::int32_t;

namespace detail {

template <class T>
bool records(std::initializer_list<const Tensor<T>*> inputs) {
    if (!active_graph<T>()) return false;
    for (auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class T, class F>
void attach(const char* op, Tensor<T>& out, F&& backward) {
    out.set_requires_grad(true);
    active_graph<T>()->record(op, out.impl(), std::forward<F>(backward));
}

// C[m x n] (+)= op(A) op(B) where op transposes when the flag is set.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto am = static_cast<Eigen::Index>(m), an = static_cast<Eigen::Index>(n),
               ak = static_cast<Eigen::Index>(k);
    Eigen::Map<const Mat> A(a, trans_a ? ak : am, trans_a ? am : ak);
    Eigen::Map<const Mat> B(b, trans_b ? an : ak, trans_b ? ak : an);
    Eigen::Map<Mat> C(c, am, an);
    if (!accumulate) C.setZero();
    if (!trans_a && !trans_b)
        C.noalias() += A * B;
    else if (!trans_a && trans_b)
        C.noalias() += A * B.transpose();
    else if (trans_a && !trans_b)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() += A.transpose() * B.transpose();
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
    if (a != b) throw DimensionError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

inline std::size_t last_axis(const Shape& s) { return s.back(); }

}  // namespace detail

// [m x k] . [k x n] or batched [B x m x k] . [B x k x n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    std::size_t batch = 1, m, k, n;
    Shape out_shape;
    if (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) {
        m = sa[0], k = sa[1], n = sb[1];
        out_shape = {m, n};
    } else if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) {
        batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
        out_shape = {batch, m, n};
    } else {
        throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    }
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i)
        detail::gemm<T>(false, false, m, n, k, a.values().data() + i * m * k, b.values().data() + i * k * n,
                        out.data() + i * m * n, false);
    Tensor<T> c(out_shape, std::move(out));
    if (detail::records<T>({&a, &b})) {
        detail::attach(
            "matmul", c, [ad = a.impl(), bd = b.impl(), cd = c.impl(), batch, m, n, k] {
                for (std::size_t i = 0; i < batch; ++i) {
                    const T* dc = cd->grad.data() + i * m * n;
                    if (ad->requires_grad)
                        detail::gemm<T>(false, true, m, k, n, dc, bd->value.data() + i * k * n,
                                        ad->grad_buffer().data() + i * m * k, true);
                    if (bd->requires_grad)
                        detail::gemm<T>(true, false, k, n, m, ad->value.data() + i * m * k, dc,
                                        bd->grad_buffer().data() + i * k * n, true);
                }
            });
    }
    return c;
}

// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 2 && s.size() != 3) throw DimensionError("transpose: needs rank 2 or 3, got " + shape_str(s));
    const std::size_t batch = s.size() == 3 ? s[0] : 1, r = s[s.size() - 2], c = s.back();
    std::vector<T> out(x.numel());
    const T* in = x.values().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = in[b * r * c + i * c + j];
    Shape os = s;
    std::swap(os[os.size() - 1], os[os.size() - 2]);
    Tensor<T> y(os, std::move(out));
    if (detail::records<T>({&x})) {
        detail::attach("transpose", y, [xd = x.impl(), yd = y.impl(), batch, r, c] {
            auto& g = xd->grad_buffer();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += yd->grad[b * r * c + j * r + i];
        });
    }
    return y;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tensor<T> c(a.shape(), std::move(out));
    if (detail::records<T>({&a, &b})) {
        detail::attach("add", c, [ad = a.impl(), bd = b.impl(), cd = c.impl()] {
            for (auto* d : {ad.get(), bd.get()}) {
                if (!d->requires_grad) continue;
                auto& g = d->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i];
            }
        });
    }
    return c;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    Tensor<T> c(a.shape(), std::move(out));
    if (detail::records<T>({&a, &b})) {
        detail::attach("sub", c, [ad = a.impl(), bd = b.impl(), cd = c.impl()] {
            if (ad->requires_grad) {
                auto& g = ad->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i];
            }
            if (bd->requires_grad) {
                auto& g = bd->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= cd->grad[i];
            }
        });
    }
    return c;
}

// Elementwise (Hadamard) product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("mul", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor<T> c(a.shape(), std::move(out));
    if (detail::records<T>({&a, &b})) {
        detail::attach("mul", c, [ad = a.impl(), bd = b.impl(), cd = c.impl()] {
            if (ad->requires_grad) {
                auto& g = ad->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i] * bd->value[i];
            }
            if (bd->requires_grad) {
                auto& g = bd->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i] * ad->value[i];
            }
        });
    }
    return c;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::records<T>({&x})) {
        detail::attach("scale", y, [xd = x.impl(), yd = y.impl(), s] {
            auto& g = xd->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += yd->grad[i] * s;
        });
    }
    return y;
}

namespace detail {
template <class T>
Tensor<T> relu_impl(const Tensor<T>& x, bool negate, const char* name) {
    const T sign = negate ? T(-1) : T(1);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(T(0), sign * x[i]);
    Tensor<T> y(x.shape(), std::move(out));
    if (records<T>({&x})) {
        attach(name, y, [xd = x.impl(), yd = y.impl(), sign] {
            auto& g = xd->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (sign * xd->value[i] > T(0)) g[i] += sign * yd->grad[i];
        });
    }
    return y;
}
}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::relu_impl(x, false, "relu");
}

// relu(-x)
template <class T>
Tensor<T> neg_relu(const Tensor<T>& x) {
    return detail::relu_impl(x, true, "neg_relu");
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (auto v : x.values()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc);
    if (detail::records<T>({&x})) {
        detail::attach("sum", y, [xd = x.impl(), yd = y.impl()] {
            auto& g = xd->grad_buffer();
            const T d = yd->grad[0];
            for (auto& v : g) v += d;
        });
    }
    return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    T acc = 0;
    for (auto v : x.values()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc * inv);
    if (detail::records<T>({&x})) {
        detail::attach("mean", y, [xd = x.impl(), yd = y.impl(), inv] {
            auto& g = xd->grad_buffer();
            const T d = yd->grad[0] * inv;
            for (auto& v : g) v += d;
        });
    }
    return y;
}

// Joins tensors along `axis`; every other extent must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
    if (xs.empty()) throw ContractError("concat: no inputs");
    const Shape& s0 = xs[0].shape();
    if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
    Shape os = s0;
    os[axis] = 0;
    for (const auto& x : xs) {
        const auto& s = x.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
        if (!ok) throw DimensionError("concat: shape " + shape_str(s) + " vs " + shape_str(s0));
        os[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
    const std::size_t out_row = os[axis] * inner;
    std::vector<T> out(numel_of(os));
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& x : xs) {
        const std::size_t w = x.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(x.values().data() + o * w, w, out.data() + o * out_row + offset);
        offsets.push_back(offset);
        offset += w;
    }
    Tensor<T> y(os, std::move(out));
    bool any = false;
    if (active_graph<T>())
        for (const auto& x : xs) any = any || x.requires_grad();
    if (any) {
        std::vector<std::shared_ptr<TensorData<T>>> ins;
        for (const auto& x : xs) ins.push_back(x.impl());
        detail::attach("concat", y, [ins, offsets, yd = y.impl(), outer, inner, out_row, axis] {
            for (std::size_t i = 0; i < ins.size(); ++i) {
                if (!ins[i]->requires_grad) continue;
                const std::size_t w = ins[i]->shape[axis] * inner;
                auto& g = ins[i]->grad_buffer();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < w; ++j) g[o * w + j] += yd->grad[o * out_row + offsets[i] + j];
            }
        });
    }
    return y;
}

// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto& s = x.shape();
    if (axis >= s.size() || begin >= end || end > s[axis])
        throw IndexError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t in_row = s[axis] * inner, w = (end - begin) * inner, off = begin * inner;
    Shape os = s;
    os[axis] = end - begin;
    std::vector<T> out(numel_of(os));
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.values().data() + o * in_row + off, w, out.data() + o * w);
    Tensor<T> y(os, std::move(out));
    if (detail::records<T>({&x})) {
        detail::attach("slice", y, [xd = x.impl(), yd = y.impl(), outer, in_row, w, off] {
            auto& g = xd->grad_buffer();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < w; ++j) g[o * in_row + off + j] += yd->grad[o * w + j];
        });
    }
    return y;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    Tensor<T> y(std::move(shape), x.values());
    if (detail::records<T>({&x})) {
        detail::attach("reshape", y, [xd = x.impl(), yd = y.impl()] {
            auto& g = xd->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += yd->grad[i];
        });
    }
    return y;
}

// Gathers rows of `table` [V x H]; output shape is prefix + [H].
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<TokenId>& ids, Shape prefix) {
    if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
    if (numel_of(prefix) != ids.size())
        throw DimensionError("embedding_lookup: " + std::to_string(ids.size()) + " ids for shape " + shape_str(prefix));
    const std::size_t vocab = table.dim(0), h = table.dim(1);
    std::vector<T> out(ids.size() * h);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                             std::to_string(vocab));
        std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * h, h, out.data() + i * h);
    }
    prefix.push_back(h);
    Tensor<T> y(std::move(prefix), std::move(out));
    if (detail::records<T>({&table})) {
        detail::attach("embedding_lookup", y, [td = table.impl(), yd = y.impl(), ids, h] {
            auto& g = td->grad_buffer();
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < h; ++j) g[static_cast<std::size_t>(ids[i]) * h + j] += yd->grad[i * h + j];
        });
    }
    return y;
}

// x[..., n] + bias[n]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    const std::size_t n = detail::last_axis(x.shape());
    if (bias.rank() != 1 || bias.dim(0) != n)
        throw DimensionError("add_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::records<T>({&x, &bias})) {
        detail::attach("add_bias", y, [xd = x.impl(), bd = bias.impl(), yd = y.impl(), n] {
            if (xd->requires_grad) {
                auto& g = xd->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += yd->grad[i];
            }
            if (bd->requires_grad) {
                auto& g = bd->grad_buffer();
                for (std::size_t i = 0; i < yd->grad.size(); ++i) g[i % n] += yd->grad[i];
            }
        });
    }
    return y;
}

// Softmax over the last axis with row-max subtraction. -inf entries are
// allowed (masking) as long as each row keeps one finite entry.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    const std::size_t n = detail::last_axis(x.shape()), rows = x.numel() / n;
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.values().data() + r * n;
        T* o = out.data() + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (std::isnan(in[j])) throw NumericError("softmax_rows: NaN input in row " + std::to_string(r));
            mx = std::max(mx, in[j]);
        }
        if (!std::isfinite(mx)) throw NumericError("softmax_rows: row " + std::to_string(r) + " has no finite entry");
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < n; ++j) o[j] /= z;
    }
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::records<T>({&x})) {
        detail::attach("softmax_rows", y, [xd = x.impl(), yd = y.impl(), n, rows] {
            auto& g = xd->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* p = yd->value.data() + r * n;
                const T* dy = yd->grad.data() + r * n;
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += dy[j] * p[j];
                for (std::size_t j = 0; j < n; ++j) g[r * n + j] += p[j] * (dy[j] - dot);
            }
        });
    }
    return y;
}

// Normalizes the last axis to zero mean / unit variance, then gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    const std::size_t n = detail::last_axis(x.shape()), rows = x.numel() / n;
    if (gain.numel() != n || bias.numel() != n)
        throw DimensionError("layer_norm: " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()) +
                             " bias " + shape_str(bias.shape()));
    std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.values().data() + r * n;
        T mu = 0, var = 0;
        for (std::size_t j = 0; j < n; ++j) mu += in[j];
        mu /= static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<T>(n);
        inv_std[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[r * n + j] = (in[j] - mu) * inv_std[r];
            out[r * n + j] = xhat[r * n + j] * gain[j] + bias[j];
        }
    }
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::records<T>({&x, &gain, &bias})) {
        detail::attach("layer_norm", y,
                       [xd = x.impl(), gd = gain.impl(), bd = bias.impl(), yd = y.impl(), xhat = std::move(xhat),
                        inv_std = std::move(inv_std), n, rows] {
                           const auto& dy = yd->grad;
                           if (gd->requires_grad) {
                               auto& g = gd->grad_buffer();
                               for (std::size_t i = 0; i < dy.size(); ++i) g[i % n] += dy[i] * xhat[i];
                           }
                           if (bd->requires_grad) {
                               auto& g = bd->grad_buffer();
                               for (std::size_t i = 0; i < dy.size(); ++i) g[i % n] += dy[i];
                           }
                           if (!xd->requires_grad) return;
                           auto& g = xd->grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r) {
                               T m1 = 0, m2 = 0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const T dxh = dy[r * n + j] * gd->value[j];
                                   m1 += dxh;
                                   m2 += dxh * xhat[r * n + j];
                               }
                               m1 /= static_cast<T>(n);
                               m2 /= static_cast<T>(n);
                               for (std::size_t j = 0; j < n; ++j) {
                                   const T dxh = dy[r * n + j] * gd->value[j];
                                   g[r * n + j] += inv_std[r] * (dxh - m1 - xhat[r * n + j] * m2);
                               }
                           }
                       });
    }
    return y;
}

// Row-wise x_i / (sum_j x_j + eps) over the last axis; all-zero rows stay zero.
template <class T>
Tensor<T> row_normalize(const Tensor<T>& x, T eps = T(1e-9)) {
    const std::size_t n = detail::last_axis(x.shape()), rows = x.numel() / n;
    std::vector<T> out(x.numel()), denom(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += x[r * n + j];
        denom[r] = s + eps;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] / denom[r];
    }
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::records<T>({&x})) {
        detail::attach("row_normalize", y, [xd = x.impl(), yd = y.impl(), denom = std::move(denom), n, rows] {
            auto& g = xd->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += yd->grad[r * n + j] * yd->value[r * n + j];
                for (std::size_t j = 0; j < n; ++j) g[r * n + j] += (yd->grad[r * n + j] - dot) / denom[r];
            }
        });
    }
    return y;
}

// Multiplies each last-axis row by a constant weight (masks, per-row averaging).
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, const std::vector<T>& weights) {
    const std::size_t n = detail::last_axis(x.shape()), rows = x.numel() / n;
    if (weights.size() != rows)
        throw DimensionError("scale_rows: " + std::to_string(weights.size()) + " weights for " + shape_str(x.shape()));
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * weights[i / n];
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::records<T>({&x})) {
        detail::attach("scale_rows", y, [xd = x.impl(), yd = y.impl(), weights, n] {
            auto& g = xd->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += yd->grad[i] * weights[i / n];
        });
    }
    return y;
}

// [B x L x H] -> [B*heads x L x H/heads]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.rank() != 3 || x.dim(2) % heads != 0)
        throw DimensionError("split_heads: " + shape_str(x.shape()) + " into " + std::to_string(heads) + " heads");
    const std::size_t b = x.dim(0), l = x.dim(1), h = x.dim(2), dh = h / heads;
    auto src = [=](std::size_t bi, std::size_t hi, std::size_t li, std::size_t j) { return (bi * l + li) * h + hi * dh + j; };
    auto dst = [=](std::size_t bi, std::size_t hi, std::size_t li, std::size_t j) { return ((bi * heads + hi) * l + li) * dh + j; };
    std::vector<T> out(x.numel());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t hi = 0; hi < heads; ++hi)
            for (std::size_t li = 0; li < l; ++li)
                for (std::size_t j = 0; j < dh; ++j) out[dst(bi, hi, li, j)] = x[src(bi, hi, li, j)];
    Tensor<T> y({b * heads, l, dh}, std::move(out));
    if (detail::records<T>({&x})) {
        detail::attach("split_heads", y, [xd = x.impl(), yd = y.impl(), b, heads, l, dh, src, dst] {
            auto& g = xd->grad_buffer();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t hi = 0; hi < heads; ++hi)
                    for (std::size_t li = 0; li < l; ++li)
                        for (std::size_t j = 0; j < dh; ++j) g[src(bi, hi, li, j)] += yd->grad[dst(bi, hi, li, j)];
        });
    }
    return y;
}

// Inverse of split_heads.
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.rank() != 3 || x.dim(0) % heads != 0)
        throw DimensionError("merge_heads: " + shape_str(x.shape()) + " from " + std::to_string(heads) + " heads");
    const std::size_t b = x.dim(0) / heads, l = x.dim(1), dh = x.dim(2), h = dh * heads;
    auto src = [=](std::size_t bi, std::size_t hi, std::size_t li, std::size_t j) { return ((bi * heads + hi) * l + li) * dh + j; };
    auto dst = [=](std::size_t bi, std::size_t hi, std::size_t li, std::size_t j) { return (bi * l + li) * h + hi * dh + j; };
    std::vector<T> out(x.numel());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t hi = 0; hi < heads; ++hi)
            for (std::size_t li = 0; li < l; ++li)
                for (std::size_t j = 0; j < dh; ++j) out[dst(bi, hi, li, j)] = x[src(bi, hi, li, j)];
    Tensor<T> y({b, l, h}, std::move(out));
    if (detail::records<T>({&x})) {
        detail::attach("merge_heads", y, [xd = x.impl(), yd = y.impl(), b, heads, l, dh, src, dst] {
            auto& g = xd->grad_buffer();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t hi = 0; hi < heads; ++hi)
                    for (std::size_t li = 0; li < l; ++li)
                        for (std::size_t j = 0; j < dh; ++j) g[src(bi, hi, li, j)] += yd->grad[dst(bi, hi, li, j)];
        });
    }
    return y;
}

// Mean negative log-likelihood of `targets` under softmax(logits) over rows
// whose mask entry is non-zero. logits: [..., V]; one target per row.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<TokenId>& targets, const std::vector<std::uint8_t>& mask) {
    const std::size_t v = detail::last_axis(logits.shape()), rows = logits.numel() / v;
    if (targets.size() != rows || mask.size() != rows)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                             std::to_string(mask.size()) + " mask entries for logits " + shape_str(logits.shape()));
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        ++count;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
            throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary of " +
                             std::to_string(v));
    }
    if (count == 0) throw ContractError("cross_entropy: every target position is padding");
    std::vector<T> probs(logits.numel(), T(0));
    T loss = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        const T* in = logits.values().data() + r * v;
        T mx = *std::max_element(in, in + v);
        if (std::isnan(mx)) throw NumericError("cross_entropy: NaN logits");
        T z = 0;
        for (std::size_t j = 0; j < v; ++j) z += (probs[r * v + j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
        loss += (mx + std::log(z)) - in[targets[r]];
    }
    const T inv = T(1) / static_cast<T>(count);
    Tensor<T> y = Tensor<T>::scalar(loss * inv);
    if (detail::records<T>({&logits})) {
        detail::attach("cross_entropy", y, [ld = logits.impl(), yd = y.impl(), probs = std::move(probs), targets, mask, v, rows, inv] {
            auto& g = ld->grad_buffer();
            const T d = yd->grad[0] * inv;
            for (std::size_t r = 0; r < rows; ++r) {
                if (!mask[r]) continue;
                for (std::size_t j = 0; j < v; ++j) g[r * v + j] += d * probs[r * v + j];
                g[r * v + targets[r]] -= d;
            }
        });
    }
    return y;
}

}  // namespace bai
