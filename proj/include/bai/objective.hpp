#pragma once

// Pivot reconstruction loss and the joint CE + lambda * beta objective.

#include <cstdint>
#include <vector>

#include "bai/equalize.hpp"
#include "bai/models.hpp"

namespace bai {

// beta = mean over sequences of (1/M_b) sum_t (1/H) |r_t - d_t|^2 over the
// valid target positions t of each sequence. Sequences with no valid
// position are left out of the batch mean.
template <class T>
Tensor<T> bai_mse(const Tensor<T>& r, const Tensor<T>& d, const std::vector<std::uint8_t>& mask) {
    if (r.shape() != d.shape() || r.rank() != 3)
        throw DimensionError("bai_mse: R " + shape_str(r.shape()) + " vs D " + shape_str(d.shape()));
    const std::size_t b = r.dim(0), m = r.dim(1), h = r.dim(2);
    if (!mask.empty() && mask.size() != b * m)
        throw DimensionError("bai_mse: mask of " + std::to_string(mask.size()) + " entries for " + std::to_string(b * m) + " rows");
    std::vector<std::size_t> counts(b, 0);
    std::size_t live = 0;
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t t = 0; t < m; ++t) counts[bi] += mask.empty() || mask[bi * m + t];
        live += counts[bi] > 0;
    }
    if (live == 0) throw ContractError("bai_mse: every target position is padding");
    std::vector<T> w(b * m, T(0));
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t t = 0; t < m; ++t)
            if (mask.empty() || mask[bi * m + t])
                w[bi * m + t] = T(1) / (static_cast<T>(h) * static_cast<T>(counts[bi]) * static_cast<T>(live));
    auto diff = sub(r, d);
    return sum(scale_rows(mul(diff, diff), w));
}

// Routes a pivot set to its equalizer and returns R [B x M x H] for the
// target embeddings `d`. The pivot kind must match the architecture.
template <class T>
Tensor<T> reconstruct(Arch arch, const PivotSet<T>& pivots, const Tensor<T>& d, const std::vector<std::uint8_t>& target_mask) {
    const PivotKind expected = arch == Arch::transformer ? PivotKind::encoder_final
                               : arch == Arch::expansion ? PivotKind::expansion_intermediate
                                                         : PivotKind::prompt_final;
    if (pivots.kind != expected)
        throw ContractError(std::string("pivot kind ") + to_string(pivots.kind) + " does not match architecture " + to_string(arch));
    if (pivots.kind == PivotKind::expansion_intermediate) return equalize_expansion(pivots.expansion, d, target_mask);
    return equalize_transformer(pivots.states, d, pivots.mask, target_mask);
}

template <class T>
struct BaiLossReport {
    Tensor<T> beta;
    T lambda = 0;
    Tensor<T> ce;
    Tensor<T> total;
    Tensor<T> reconstruction;  // R
};

// Minimized objective: total = lambda * beta + CE, CE being the mean
// negative log-likelihood over valid target positions. With detach_d the
// reconstruction targets carry no gradient into the embedding table.
template <class T>
BaiLossReport<T> joint_loss(Arch arch, const ForwardOutput<T>& out, T lambda, bool detach_d = false) {
    if (!(lambda >= T(0) && lambda <= T(1))) throw ContractError("joint_loss: lambda must be in [0, 1]");
    BaiLossReport<T> rep;
    rep.lambda = lambda;
    rep.ce = cross_entropy(out.logits, out.targets, out.target_mask);
    const Tensor<T> d = detach_d ? out.targets_embedded.detach() : out.targets_embedded;
    rep.reconstruction = reconstruct(arch, out.pivots, d, out.target_mask);
    rep.beta = bai_mse(rep.reconstruction, d, out.target_mask);
    rep.total = add(scale(rep.beta, lambda), rep.ce);
    return rep;
}

}  // namespace bai
