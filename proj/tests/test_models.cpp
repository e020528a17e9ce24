#include <gtest/gtest.h>

#include "bai/decode.hpp"
#include "bai/objective.hpp"

using namespace bai;

namespace {

ModelConfig small(Arch arch) {
    ModelConfig c;
    c.arch = arch;
    c.layers = 2;
    c.hidden = 8;
    c.ff_size = 16;
    c.heads = 2;
    c.vocab = 12;
    c.groups = {2, 3};
    c.max_len = 16;
    c.dropout = 0.0;
    return c;
}

std::vector<Sample> samples() {
    return {{{4, 5, 6, 7}, {7, 6, 5}}, {{8, 9}, {9, 8, 10, 11}}, {{5}, {6}}};
}

Batch batch_of(const std::vector<Sample>& s) {
    std::vector<std::size_t> idx(s.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return make_batch(s, idx);
}

const Arch kArchs[] = {Arch::transformer, Arch::expansion, Arch::decoder_only};

}  // namespace

TEST(Models, ShapeLaw) {
    for (auto arch : kArchs) {
        Model<double> model(small(arch), 3);
        auto b = batch_of(samples());
        auto out = model.forward(b);
        EXPECT_EQ(out.logits.shape(), (Shape{3, b.tgt_len, 12})) << to_string(arch);
        EXPECT_EQ(out.targets_embedded.shape(), (Shape{3, b.tgt_len, 8}));
        if (arch == Arch::expansion) {
            ASSERT_EQ(out.pivots.kind, PivotKind::expansion_intermediate);
            ASSERT_EQ(out.pivots.expansion.size(), 2u);
            EXPECT_EQ(out.pivots.expansion[0].a.shape(), (Shape{3, 2, 8}));
            EXPECT_EQ(out.pivots.expansion[1].b.shape(), (Shape{3, 3, 8}));
        } else {
            EXPECT_EQ(out.pivots.kind, arch == Arch::transformer ? PivotKind::encoder_final : PivotKind::prompt_final);
            EXPECT_EQ(out.pivots.states.shape(), (Shape{3, b.src_len, 8}));
        }
    }
}

TEST(Models, ZeroParametersExceptOutputBiasGiveBiasRows) {
    Model<double> model(small(Arch::transformer), 4);
    for (auto& [path, t] : model.params())
        for (auto& x : t.data()) x = 0.0;
    auto& bias = model.params().at("out.bias");
    for (std::size_t i = 0; i < bias.numel(); ++i) bias.data()[i] = 0.1 * static_cast<double>(i) - 0.3;
    auto out = model.forward(batch_of(samples()));
    for (std::size_t r = 0; r < out.logits.numel() / 12; ++r)
        for (std::size_t j = 0; j < 12; ++j) ASSERT_DOUBLE_EQ(out.logits[r * 12 + j], bias[j]);
}

TEST(Models, CausalityProbe) {
    for (auto arch : kArchs) {
        Model<double> model(small(arch), 5);
        std::vector<Sample> s{{{4, 5, 6}, {7, 8, 9, 10, 11}}};
        auto base = model.forward(batch_of(s));
        for (std::size_t t = 0; t + 1 < 5; ++t) {
            auto edited = s;
            edited[0].tgt[t] = edited[0].tgt[t] == 4 ? 5 : 4;  // tgt_in position t+1
            auto out = model.forward(batch_of(edited));
            for (std::size_t row = 0; row <= t; ++row)
                for (std::size_t j = 0; j < 12; ++j)
                    ASSERT_EQ(out.logits[row * 12 + j], base.logits[row * 12 + j]) << to_string(arch) << " t=" << t;
        }
    }
}

TEST(Models, PivotsIndependentOfTargetTokens) {
    for (auto arch : kArchs) {
        Model<double> model(small(arch), 6);
        auto s = samples();
        auto base = model.forward(batch_of(s));
        for (auto& x : s)
            for (auto& t : x.tgt) t = t == 11 ? 4 : t + 1;
        auto out = model.forward(batch_of(s));
        EXPECT_EQ(out.pivots.states.values(), base.pivots.states.values()) << to_string(arch);
        for (std::size_t g = 0; g < base.pivots.expansion.size(); ++g) {
            EXPECT_EQ(out.pivots.expansion[g].a.values(), base.pivots.expansion[g].a.values());
            EXPECT_EQ(out.pivots.expansion[g].b.values(), base.pivots.expansion[g].b.values());
        }
    }
}

TEST(Models, ExpansionPivotsAreLayerSumsOfTrace) {
    Model<double> model(small(Arch::expansion), 7);
    auto out = model.forward(batch_of(samples()));
    ASSERT_EQ(out.expansion_trace.size(), 2u);
    for (std::size_t g = 0; g < 2; ++g) {
        const auto& a = out.pivots.expansion[g].a;
        for (std::size_t i = 0; i < a.numel(); ++i)
            EXPECT_NEAR(a[i], out.expansion_trace[0][g][i] + out.expansion_trace[1][g][i], 1e-15);
    }
}

// With orthogonal layer inputs and queries aligned to them, the forward
// expansion routes each input row to its own slot: A = E, B = 0.
TEST(Models, ExpansionIdentityRouting) {
    auto cfg = small(Arch::expansion);
    cfg.layers = 1;
    cfg.groups = {2};
    Model<double> model(cfg, 8);
    const auto pos = add_positions(Tensor<double>::zeros({1, 2, 8}));
    const double s = 2.0, c = 50.0;
    auto& table = model.params().at("embed.table");
    auto& query = model.params().at("enc.0.expand.g2.query");
    for (std::size_t k = 0; k < 8; ++k) {
        table.data()[4 * 8 + k] = (k == 0 ? s : 0.0) - pos[k];
        table.data()[5 * 8 + k] = (k == 1 ? s : 0.0) - pos[8 + k];
        query.data()[k] = k == 0 ? c : 0.0;
        query.data()[8 + k] = k == 1 ? c : 0.0;
    }
    auto out = model.forward(batch_of({{{4, 5}, {6}}}));
    const auto& a = out.expansion_trace[0][0];
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(a[i * 8 + k], (k == i ? s : 0.0), 1e-9);
    for (auto v : out.pivots.expansion[0].b.values()) EXPECT_EQ(v, 0.0);
}

TEST(Models, InferenceIdenticalWithBaiOnOrOff) {
    for (auto arch : kArchs) {
        Model<double> model(small(arch), 9);
        const std::vector<TokenId> src{4, 5, 6};
        auto before = greedy_decode(model, src, 6);
        auto beam_before = beam_search(model, src, {3, 6, 0.0}).tokens;
        auto out = model.forward(batch_of(samples()));
        auto rep = joint_loss(arch, out, 1.0);
        EXPECT_GE(rep.beta.item(), 0.0);
        EXPECT_EQ(greedy_decode(model, src, 6), before);
        EXPECT_EQ(beam_search(model, src, {3, 6, 0.0}).tokens, beam_before);
        auto plain = model.forward(batch_of(samples()));
        EXPECT_EQ(plain.logits.values(), out.logits.values());
    }
}

TEST(Models, DecoderOnlyAllPadContinuationRejected) {
    Model<double> model(small(Arch::decoder_only), 10);
    auto b = batch_of({{{4, 5}, {6}}});
    std::fill(b.tgt_lengths.begin(), b.tgt_lengths.end(), 0);
    auto out = model.forward(b);
    EXPECT_THROW(joint_loss(Arch::decoder_only, out, 0.5), ContractError);
}

TEST(Models, LengthAndInputErrors) {
    for (auto arch : kArchs) {
        Model<double> model(small(arch), 11);
        std::vector<Sample> s{{std::vector<TokenId>(12, 4), std::vector<TokenId>(12, 5)}};
        if (arch == Arch::decoder_only)
            EXPECT_THROW(model.forward(batch_of(s)), InputError);
        else
            EXPECT_NO_THROW(model.forward(batch_of(s)));
        s[0].src.assign(17, 4);
        EXPECT_THROW(model.forward(batch_of(s)), InputError) << to_string(arch);
    }
}

TEST(Models, ConfigValidation) {
    auto c = small(Arch::transformer);
    c.heads = 3;
    EXPECT_THROW(Model<double>(c, 1), ConfigError);
    c = small(Arch::expansion);
    c.groups.clear();
    EXPECT_THROW(Model<double>(c, 1), ConfigError);
    c.groups = {4, 4};
    EXPECT_THROW(Model<double>(c, 1), ConfigError);
    EXPECT_THROW(parse_arch("lstm"), ConfigError);
}

TEST(Models, SameSeedSameParameters) {
    Model<double> a(small(Arch::expansion), 12), b(small(Arch::expansion), 12), c(small(Arch::expansion), 13);
    bool differs = false;
    for (const auto& [path, t] : a.params()) {
        EXPECT_EQ(t.values(), b.params().at(path).values());
        differs |= t.values() != c.params().at(path).values();
    }
    EXPECT_TRUE(differs);
}
