#include <gtest/gtest.h>

#include <cmath>

#include "bai/gradcheck.hpp"

using namespace bai;

namespace {

Tensor<double> randn(Shape s, Rng& rng) {
    std::normal_distribution<double> n;
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = n(rng);
    return Tensor<double>(std::move(s), std::move(v));
}

void set(ParamStore<double>& ps, const std::string& path, std::vector<double> v) {
    auto d = ps.at(path).data();
    ASSERT_EQ(d.size(), v.size()) << path;
    std::copy(v.begin(), v.end(), d.begin());
}

}  // namespace

TEST(ParamStore, PathsUniqueAndTrainable) {
    ParamStore<double> ps;
    Rng rng(1);
    add_linear(ps, "lin", 3, 2, rng);
    EXPECT_TRUE(ps.at("lin.weight").requires_grad());
    EXPECT_EQ(ps.at("lin.weight").shape(), (Shape{3, 2}));
    EXPECT_THROW(add_linear(ps, "lin", 3, 2, rng), ConfigError);
    EXPECT_THROW(ps.at("nope"), ContractError);
    EXPECT_EQ(ps.scalar_count(), 8u);
}

TEST(Init, GlorotBounds) {
    Rng rng(2);
    auto w = glorot_uniform<double>(30, 50, rng);
    const double limit = std::sqrt(6.0 / 80.0);
    for (auto v : w.values()) EXPECT_LE(std::abs(v), limit);
}

TEST(Embed, ScalingOffAndOn) {
    Tensor<double> table({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto e = embed<double>({0}, 1, 1, table, false);
    EXPECT_EQ(e.values(), (std::vector<double>{1, 2, 3, 4}));
    auto s = embed<double>({0}, 1, 1, table, true);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(s[i], 2.0 * e[i]);
    EXPECT_THROW(embed<double>({2}, 1, 1, table, false), IndexError);
}

TEST(Positions, SinusoidTable) {
    auto pe = sinusoidal_positions<double>(3, 4);
    EXPECT_DOUBLE_EQ(pe[0], 0.0);
    EXPECT_DOUBLE_EQ(pe[1], 1.0);
    EXPECT_DOUBLE_EQ(pe[4], std::sin(1.0));
    EXPECT_DOUBLE_EQ(pe[7], std::cos(1.0 / 100.0));
}

TEST(Attention, HeadsMustDivideHidden) {
    ParamStore<double> ps;
    Rng rng(3);
    add_attention(ps, "a", 6, rng);
    auto x = randn({1, 2, 6}, rng);
    EXPECT_THROW(multi_head_attention(x, x, AttentionMask::none(), ps, "a", 4), ConfigError);
}

TEST(Attention, SinglePositionReturnsValueProjection) {
    ParamStore<double> ps;
    Rng rng(4);
    add_attention(ps, "a", 4, rng);
    auto x = randn({1, 1, 4}, rng);
    auto y = multi_head_attention(x, x, AttentionMask::none(), ps, "a", 2);
    auto ref = linear(linear(x, ps, "a.v"), ps, "a.o");
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);
}

TEST(Attention, CausalFirstPositionSeesOnlyItself) {
    ParamStore<double> ps;
    Rng rng(5);
    add_attention(ps, "a", 4, rng);
    auto x = randn({1, 3, 4}, rng);
    auto y = multi_head_attention(x, x, AttentionMask{true, {}}, ps, "a", 2);
    auto first = slice(x, 1, 0, 1);
    auto ref = linear(linear(first, ps, "a.v"), ps, "a.o");
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);
}

// One head, H=2, identity projections except q scaled by 2:
// scores = 2 x x^T / sqrt(2).
TEST(Attention, HandComputedTwoTokenTable) {
    ParamStore<double> ps;
    Rng rng(6);
    add_attention(ps, "a", 2, rng);
    set(ps, "a.q.weight", {2, 0, 0, 2});
    for (const char* p : {"a.k.weight", "a.v.weight", "a.o.weight"}) set(ps, p, {1, 0, 0, 1});
    Tensor<double> x({1, 2, 2}, {1, 0, 0, 1});
    auto y = multi_head_attention(x, x, AttentionMask::none(), ps, "a", 1);
    const double s = 2.0 / std::sqrt(2.0);
    const double p_hi = std::exp(s) / (std::exp(s) + 1.0), p_lo = 1.0 - p_hi;
    EXPECT_NEAR(y[0], p_hi, 1e-14);
    EXPECT_NEAR(y[1], p_lo, 1e-14);
    EXPECT_NEAR(y[2], p_lo, 1e-14);
    EXPECT_NEAR(y[3], p_hi, 1e-14);
}

TEST(Attention, CausalityByForwardDifferencing) {
    ParamStore<double> ps;
    Rng rng(7);
    add_attention(ps, "a", 8, rng);
    auto x = randn({2, 6, 8}, rng);
    const auto mask = AttentionMask{true, {}};
    auto base = multi_head_attention(x, x, mask, ps, "a", 2);
    for (std::size_t j = 0; j < 6; ++j) {
        auto xp = x.detach();
        for (std::size_t b = 0; b < 2; ++b) xp.data()[(b * 6 + j) * 8 + 3] += 0.5;
        auto y = multi_head_attention(xp, xp, mask, ps, "a", 2);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 6; ++i) {
                bool same = true;
                for (std::size_t k = 0; k < 8; ++k) same = same && y[(b * 6 + i) * 8 + k] == base[(b * 6 + i) * 8 + k];
                if (i < j) EXPECT_TRUE(same) << "position " << i << " changed after editing " << j;
                else EXPECT_FALSE(same);
            }
    }
}

TEST(Attention, PaddedKeysNeverInfluenceOutputs) {
    ParamStore<double> ps;
    Rng rng(8);
    add_attention(ps, "a", 4, rng);
    auto q = randn({2, 3, 4}, rng), mem = randn({2, 5, 4}, rng);
    const auto mask = AttentionMask::from_lengths({5, 2}, 5, false);
    auto base = multi_head_attention(q, mem, mask, ps, "a", 2);
    auto mp = mem.detach();
    for (std::size_t j = 2; j < 5; ++j)
        for (std::size_t k = 0; k < 4; ++k) mp.data()[(5 + j) * 4 + k] = 100.0;
    auto y = multi_head_attention(q, mp, mask, ps, "a", 2);
    for (std::size_t i = 12; i < 24; ++i) EXPECT_EQ(y[i], base[i]);
}

TEST(Attention, QueryWithoutVisibleKeyIsAContractError) {
    AttentionMask m = AttentionMask::from_lengths({0}, 3, false);
    EXPECT_THROW(additive_mask<double>(m, 1, 1, 2, 3), ContractError);
}

TEST(Dropout, DeterministicGivenSeedAndIdentityWhenOff) {
    Tensor<double> x({100}, std::vector<double>(100, 1.0));
    Rng r1(3), r2(3);
    auto a = dropout(x, ForwardContext{&r1, 0.5});
    auto b = dropout(x, ForwardContext{&r2, 0.5});
    EXPECT_EQ(a.values(), b.values());
    for (auto v : a.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);
    EXPECT_TRUE(dropout(x, ForwardContext{}).same_storage(x));
}

TEST(FeedForward, GradientCheck) {
    ParamStore<double> ps;
    Rng rng(9);
    add_feed_forward(ps, "ff", 4, 6, rng);
    add_layer_norm(ps, "ln", 4);
    GradInputs in{randn({2, 3, 4}, rng)};
    for (auto& [_, p] : ps) in.push_back(p);
    auto row = check_gradient(
        "ff", [ps](const GradInputs& x) { return detail::probe(residual_norm(x[0], feed_forward(x[0], ps, "ff", {}), ps, "ln", {})); },
        in, GradcheckOptions{});
    EXPECT_LT(row.max_rel_err, 1e-4);
}
