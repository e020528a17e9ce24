#include <gtest/gtest.h>

#include "bai/objective.hpp"

using namespace bai;

namespace {

ModelConfig tiny(Arch arch) {
    ModelConfig c;
    c.arch = arch;
    c.layers = 1;
    c.hidden = 8;
    c.ff_size = 16;
    c.heads = 2;
    c.vocab = 10;
    c.groups = {2};
    c.max_len = 16;
    c.dropout = 0.0;
    return c;
}

Batch toy_batch() {
    std::vector<Sample> s{{{4, 5, 6}, {6, 5, 4}}, {{7, 8}, {8, 7}}};
    return make_batch(s, {0, 1});
}

}  // namespace

TEST(BaiMse, ZeroIffEqualOnValidPositions) {
    Rng rng(1);
    std::normal_distribution<double> n(0, 1);
    std::vector<double> v(2 * 3 * 4);
    for (auto& x : v) x = n(rng);
    Tensor<double> r({2, 3, 4}, v);
    EXPECT_EQ(bai_mse(r, r, {1, 1, 1, 1, 0, 0}).item(), 0.0);
    auto w = v;
    w[5] += 1e-3;
    EXPECT_GT(bai_mse(r, Tensor<double>({2, 3, 4}, w), {1, 1, 1, 1, 0, 0}).item(), 0.0);
}

TEST(BaiMse, ZeroPaddedExtraDimsHalveBeta) {
    Rng rng(2);
    std::normal_distribution<double> n(0, 1);
    std::vector<double> rv(12), dv(12), rw(24, 0.0), dw(24, 0.0);
    for (std::size_t i = 0; i < 12; ++i) {
        rv[i] = n(rng);
        dv[i] = n(rng);
        rw[(i / 4) * 8 + i % 4] = rv[i];
        dw[(i / 4) * 8 + i % 4] = dv[i];
    }
    const double b1 = bai_mse(Tensor<double>({1, 3, 4}, rv), Tensor<double>({1, 3, 4}, dv), {}).item();
    const double b2 = bai_mse(Tensor<double>({1, 3, 8}, rw), Tensor<double>({1, 3, 8}, dw), {}).item();
    EXPECT_NEAR(b2, b1 / 2, 1e-15);
}

TEST(JointLoss, LambdaZeroGivesCrossEntropyExactly) {
    Model<double> model(tiny(Arch::transformer), 3);
    auto out = model.forward(toy_batch());
    auto rep = joint_loss(Arch::transformer, out, 0.0);
    EXPECT_EQ(rep.total.item(), rep.ce.item());
    EXPECT_GT(rep.beta.item(), 0.0);
}

TEST(JointLoss, TotalIsLambdaBetaPlusCe) {
    for (auto arch : {Arch::transformer, Arch::expansion, Arch::decoder_only}) {
        Model<double> model(tiny(arch), 4);
        auto out = model.forward(toy_batch());
        for (double lambda : {0.25, 0.5, 1.0}) {
            auto rep = joint_loss(arch, out, lambda);
            EXPECT_EQ(rep.total.item(), lambda * rep.beta.item() + rep.ce.item());
        }
    }
}

TEST(JointLoss, LambdaOutsideUnitIntervalRejected) {
    Model<double> model(tiny(Arch::transformer), 5);
    auto out = model.forward(toy_batch());
    EXPECT_THROW(joint_loss(Arch::transformer, out, -0.1), ContractError);
    EXPECT_THROW(joint_loss(Arch::transformer, out, 1.5), ContractError);
}

TEST(Reconstruct, RoutesByArchitecture) {
    Model<double> tr(tiny(Arch::transformer), 6), ex(tiny(Arch::expansion), 6), dec(tiny(Arch::decoder_only), 6);
    auto b = toy_batch();
    auto o1 = tr.forward(b), o2 = ex.forward(b), o3 = dec.forward(b);

    auto r1 = reconstruct(Arch::transformer, o1.pivots, o1.targets_embedded, o1.target_mask);
    auto e1 = equalize_transformer(o1.pivots.states, o1.targets_embedded, o1.pivots.mask, o1.target_mask);
    EXPECT_EQ(r1.values(), e1.values());

    auto r2 = reconstruct(Arch::expansion, o2.pivots, o2.targets_embedded, o2.target_mask);
    auto e2 = equalize_expansion(o2.pivots.expansion, o2.targets_embedded, o2.target_mask);
    EXPECT_EQ(r2.values(), e2.values());

    auto r3 = reconstruct(Arch::decoder_only, o3.pivots, o3.targets_embedded, o3.target_mask);
    auto e3 = equalize_transformer(o3.pivots.states, o3.targets_embedded, o3.pivots.mask, o3.target_mask);
    EXPECT_EQ(r3.values(), e3.values());

    EXPECT_THROW(reconstruct(Arch::expansion, o1.pivots, o1.targets_embedded, o1.target_mask), ContractError);
    EXPECT_THROW(reconstruct(Arch::transformer, o3.pivots, o3.targets_embedded, o3.target_mask), ContractError);
}

TEST(JointLoss, DetachDStopsEmbeddingGradientFromBeta) {
    Model<double> model(tiny(Arch::transformer), 7);
    auto grad_of = [&](bool detach) {
        Graph<double> graph;
        GraphScope<double> scope(graph);
        model.params().zero_grad();
        auto out = model.forward(toy_batch());
        auto rep = joint_loss(Arch::transformer, out, 1.0, detach);
        graph.backward(rep.beta);
        auto g = model.params().at("embed.table").grad();
        return std::vector<double>(g.begin(), g.end());
    };
    const auto attached = grad_of(false), detached = grad_of(true);
    // eos is never an input token, so its embedding row is reached only through D.
    const std::size_t eos_row = static_cast<std::size_t>(kEos) * 8;
    double a = 0, d = 0;
    for (std::size_t k = 0; k < 8; ++k) {
        a += std::abs(attached[eos_row + k]);
        d += std::abs(detached[eos_row + k]);
    }
    EXPECT_GT(a, 0.0);
    EXPECT_EQ(d, 0.0);
}
