#pragma once

// Length equalization of pivots onto a target-length query sequence.
//
// Two readouts map a pivot set to M rows, one per target position:
//   * attention readout: softmax(D E^T / sqrt(H)) E, for a flat pivot
//     sequence E (encoder output or prompt states);
//   * expansion readout: the parameter-less backward expansion over groups
//     of (A^g, B^g) pairs, with the two ReLU(+/-) paths and row-wise
//     normalization phi(x) = x / (sum x + eps).

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "bai/ops.hpp"

namespace bai {

inline constexpr double kPhiEps = 1e-9;

// One static-expansion group: A^g and B^g, each [B x g x H].
template <class T>
struct ExpansionPivot {
    std::size_t group = 0;
    Tensor<T> a;
    Tensor<T> b;
};

namespace detail {
template <class T>
std::vector<T> mask_weights(const std::vector<std::uint8_t>& mask, std::size_t rows) {
    if (mask.empty()) return std::vector<T>(rows, T(1));
    if (mask.size() != rows) throw DimensionError("mask of " + std::to_string(mask.size()) + " entries for " + std::to_string(rows) + " rows");
    return std::vector<T>(mask.begin(), mask.end());
}
}  // namespace detail

// R = softmax(D E^T / sqrt(H)) E with masked pivot columns and zeroed padded
// query rows. pivots: [B x N x H], queries: [B x M x H]; masks are [B*N] and
// [B*M] (empty = all valid).
template <class T>
Tensor<T> equalize_transformer(const Tensor<T>& pivots, const Tensor<T>& queries, const std::vector<std::uint8_t>& pivot_mask,
                               const std::vector<std::uint8_t>& query_mask) {
    if (pivots.rank() != 3 || queries.rank() != 3 || pivots.dim(0) != queries.dim(0) || pivots.dim(2) != queries.dim(2))
        throw DimensionError("equalize_transformer: pivots " + shape_str(pivots.shape()) + " vs queries " +
                             shape_str(queries.shape()));
    const std::size_t b = pivots.dim(0), n = pivots.dim(1), m = queries.dim(1), h = pivots.dim(2);
    if (!pivot_mask.empty() && pivot_mask.size() != b * n)
        throw DimensionError("equalize_transformer: pivot mask has " + std::to_string(pivot_mask.size()) + " entries, expected " +
                             std::to_string(b * n));
    const T ninf = -std::numeric_limits<T>::infinity();
    std::vector<T> add_mask(b * m * n, T(0));
    for (std::size_t bi = 0; bi < b; ++bi) {
        bool any = pivot_mask.empty();
        for (std::size_t j = 0; j < n && !any; ++j) any = pivot_mask[bi * n + j] != 0;
        if (!any) throw ContractError("equalize_transformer: every pivot of sequence " + std::to_string(bi) + " is masked");
        if (pivot_mask.empty()) continue;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (!pivot_mask[bi * n + j]) add_mask[(bi * m + i) * n + j] = ninf;
    }
    auto scores = scale(matmul(queries, transpose(pivots)), T(1) / std::sqrt(static_cast<T>(h)));
    auto weights = softmax_rows(add(scores, Tensor<T>({b, m, n}, std::move(add_mask))));
    auto r = matmul(weights, pivots);
    if (query_mask.empty()) return r;
    return scale_rows(r, detail::mask_weights<T>(query_mask, b * m));
}

// Parameter-less backward expansion of grouped pivots onto `queries`
// [B x M x H]:
//   S^g  = queries ((A^g + B^g)/2)^T / sqrt(H)
//   R1^g = phi(ReLU(S^g)),  R2^g = phi(ReLU(-S^g))
//   R    = (R1 Ahat / |G| + R2 Bhat / |G|) / 2
// with R1, R2 concatenated over columns and Ahat, Bhat over rows.
template <class T>
Tensor<T> equalize_expansion(const std::vector<ExpansionPivot<T>>& groups, const Tensor<T>& queries,
                             const std::vector<std::uint8_t>& query_mask) {
    if (groups.empty()) throw ContractError("equalize_expansion: no expansion groups");
    if (queries.rank() != 3) throw DimensionError("equalize_expansion: queries must be rank 3, got " + shape_str(queries.shape()));
    const std::size_t b = queries.dim(0), m = queries.dim(1), h = queries.dim(2);
    std::vector<Tensor<T>> r1, r2, as, bs;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(h));
    for (const auto& g : groups) {
        if (g.a.shape() != g.b.shape())
            throw ContractError("equalize_expansion: A " + shape_str(g.a.shape()) + " and B " + shape_str(g.b.shape()) + " differ");
        if (g.a.rank() != 3 || g.a.dim(0) != b || g.a.dim(2) != h)
            throw ContractError("equalize_expansion: group of shape " + shape_str(g.a.shape()) +
                                " inconsistent with queries " + shape_str(queries.shape()));
        auto mid = scale(add(g.a, g.b), T(0.5));
        auto s = scale(matmul(queries, transpose(mid)), inv_sqrt);
        r1.push_back(row_normalize(relu(s), T(kPhiEps)));
        r2.push_back(row_normalize(neg_relu(s), T(kPhiEps)));
        as.push_back(g.a);
        bs.push_back(g.b);
    }
    const T inv_groups = T(1) / static_cast<T>(groups.size());
    auto ra = scale(matmul(concat(r1, 2), concat(as, 1)), inv_groups);
    auto rb = scale(matmul(concat(r2, 2), concat(bs, 1)), inv_groups);
    auto r = scale(add(ra, rb), T(0.5));
    if (query_mask.empty()) return r;
    return scale_rows(r, detail::mask_weights<T>(query_mask, b * m));
}

}  // namespace bai
