#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "bai/decode.hpp"

using namespace bai;

namespace {

// Next-token table keyed by prefix, a fixed random distribution per prefix.
struct OracleTable {
    std::size_t vocab;
    std::uint64_t seed;
    mutable std::map<std::vector<TokenId>, std::vector<double>> cache;

    std::vector<double> operator()(const std::vector<TokenId>& prefix) const {
        auto it = cache.find(prefix);
        if (it != cache.end()) return it->second;
        std::uint64_t h = seed;
        for (auto t : prefix) h = h * 1000003u + static_cast<std::uint64_t>(t) + 17;
        std::mt19937_64 rng(h);
        std::uniform_real_distribution<double> u(-3.0, 3.0);
        std::vector<double> logits(vocab);
        for (auto& x : logits) x = u(rng);
        double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
        for (auto x : logits) z += std::exp(x - mx);
        for (auto& x : logits) x = x - mx - std::log(z);
        return cache[prefix] = logits;
    }
};

// Best finished or max-length sequence by exhaustive enumeration.
void enumerate(const OracleTable& table, std::vector<TokenId>& prefix, double lp, std::size_t max_steps, double& best,
               std::vector<TokenId>& best_tokens) {
    const auto dist = table(prefix);
    for (std::size_t t = 0; t < dist.size(); ++t) {
        const double s = lp + dist[t];
        if (static_cast<TokenId>(t) == kEos || prefix.size() + 1 == max_steps) {
            if (s > best) {
                best = s;
                best_tokens = prefix;
                if (static_cast<TokenId>(t) != kEos) best_tokens.push_back(static_cast<TokenId>(t));
            }
            continue;
        }
        prefix.push_back(static_cast<TokenId>(t));
        enumerate(table, prefix, s, max_steps, best, best_tokens);
        prefix.pop_back();
    }
}

}  // namespace

TEST(Greedy, StopsAtEosAndRespectsMaxSteps) {
    NextLogProbs next = [](const std::vector<TokenId>& p) {
        std::vector<double> lp(6, -5.0);
        lp[p.size() < 3 ? 4 + p.size() % 2 : kEos] = -0.1;
        return lp;
    };
    EXPECT_EQ(greedy_decode(next, 10), (std::vector<TokenId>{4, 5, 4}));
    EXPECT_EQ(greedy_decode(next, 2), (std::vector<TokenId>{4, 5}));
    EXPECT_TRUE(greedy_decode(next, 0).empty());
}

TEST(Greedy, TiesResolveToLowestId) {
    NextLogProbs next = [](const std::vector<TokenId>& p) {
        std::vector<double> lp(6, -2.0);
        if (p.size() == 2) lp[kEos] = 0.0;
        return lp;
    };
    EXPECT_EQ(greedy_decode(next, 5), (std::vector<TokenId>{0, 0}));
}

TEST(Beam, WidthOneEqualsGreedy) {
    for (std::uint64_t seed = 1; seed <= 30; ++seed) {
        OracleTable table{7, seed, {}};
        NextLogProbs next = std::cref(table);
        auto g = greedy_decode(next, 6);
        auto b = beam_search(next, {1, 6, 0.0});
        EXPECT_EQ(b.tokens, g) << seed;
    }
}

TEST(Beam, WideBeamMatchesExhaustiveSearch) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        OracleTable table{4, seed, {}};
        NextLogProbs next = std::cref(table);
        std::vector<TokenId> prefix, best_tokens;
        double best = -1e300;
        enumerate(table, prefix, 0.0, 4, best, best_tokens);
        // width >= V^(steps-1) keeps every hypothesis alive
        auto h = beam_search(next, {64, 4, 0.0});
        EXPECT_NEAR(h.log_prob, best, 1e-12) << seed;
        EXPECT_EQ(h.tokens, best_tokens) << seed;
    }
}

TEST(Beam, WiderBeamNeverScoresWorseOnTable) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        OracleTable table{5, seed, {}};
        NextLogProbs next = std::cref(table);
        double prev = -1e300;
        for (std::size_t w : {1u, 5u, 25u, 125u}) {
            auto h = beam_search(next, {w, 4, 0.0});
            EXPECT_GE(h.log_prob, prev - 1e-12) << "seed " << seed << " width " << w;
            prev = h.log_prob;
        }
    }
}

TEST(Beam, LengthNormalization) {
    Hypothesis h{{4, 5, 6}, -3.0, true};
    EXPECT_EQ(h.length(), 4u);
    EXPECT_DOUBLE_EQ(h.score(0.0), -3.0);
    EXPECT_DOUBLE_EQ(h.score(1.0), -0.75);
    EXPECT_THROW(beam_search([](const std::vector<TokenId>&) { return std::vector<double>(3, -1.0); }, {0, 3, 0.0}), ConfigError);
}

TEST(Bleu, IdenticalCorpusScoresOne) {
    std::vector<std::vector<int>> c{{1, 2, 3, 4, 5}, {6, 7, 8, 9}};
    EXPECT_DOUBLE_EQ(bleu(c, c), 1.0);
}

TEST(Bleu, HandComputedTwoSentenceCorpus) {
    // cand1 = a b c d e, ref1 = a b c d f; cand2 = a b c d, ref2 = a b c d
    std::vector<std::vector<char>> cand{{'a', 'b', 'c', 'd', 'e'}, {'a', 'b', 'c', 'd'}};
    std::vector<std::vector<char>> ref{{'a', 'b', 'c', 'd', 'f'}, {'a', 'b', 'c', 'd'}};
    // p1 = 8/9, p2 = 6/7, p3 = 4/5, p4 = 2/3, lengths equal so BP = 1
    const long double expect = std::pow((8.0L / 9) * (6.0L / 7) * (4.0L / 5) * (2.0L / 3), 0.25L);
    auto st = bleu_stats(cand, ref);
    EXPECT_NEAR(st.bleu, static_cast<double>(expect), 1e-14);
    EXPECT_DOUBLE_EQ(st.brevity_penalty, 1.0);
    EXPECT_DOUBLE_EQ(st.precisions[0], 8.0 / 9.0);
}

TEST(Bleu, BrevityPenaltyAndClipping) {
    std::vector<std::vector<int>> cand{{1, 2, 3, 4}}, ref{{1, 2, 3, 4, 5, 6}};
    auto st = bleu_stats(cand, ref);
    EXPECT_NEAR(st.brevity_penalty, std::exp(1.0 - 6.0 / 4.0), 1e-15);
    EXPECT_NEAR(st.bleu, st.brevity_penalty, 1e-15);
    std::vector<std::vector<int>> rep{{7, 7, 7, 7}}, ref7{{7, 1, 2, 3}};
    EXPECT_DOUBLE_EQ(bleu_stats(rep, ref7).precisions[0], 0.25);
}

TEST(Bleu, ZeroFourGramOverlapGivesZero) {
    std::vector<std::vector<int>> cand{{1, 2, 3, 9, 4}}, ref{{1, 2, 3, 4, 5}};
    EXPECT_EQ(bleu(cand, ref), 0.0);
    std::vector<std::vector<int>> shortc{{1, 2, 3}};
    EXPECT_EQ(bleu(shortc, std::vector<std::vector<int>>{{1, 2, 3}}), 0.0);
}

TEST(Bleu, PermutationInvariantOverSentencePairs) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> tok(1, 5), len(2, 9);
    std::vector<std::vector<int>> cand(30), ref(30);
    for (std::size_t i = 0; i < 30; ++i) {
        cand[i].resize(static_cast<std::size_t>(len(rng)));
        ref[i].resize(static_cast<std::size_t>(len(rng)));
        for (auto& t : cand[i]) t = tok(rng);
        for (auto& t : ref[i]) t = tok(rng);
    }
    const double base = bleu(cand, ref);
    std::vector<std::size_t> perm(30);
    for (std::size_t i = 0; i < 30; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<int>> pc, pr;
    for (auto i : perm) {
        pc.push_back(cand[i]);
        pr.push_back(ref[i]);
    }
    EXPECT_DOUBLE_EQ(bleu(pc, pr), base);
}

TEST(Bleu, Errors) {
    std::vector<std::vector<int>> a{{1}}, none;
    EXPECT_THROW(bleu(none, none), ContractError);
    EXPECT_THROW(bleu(a, none), ContractError);
}

TEST(TokenAccuracy, CountsValidPositionsOnly) {
    // 5 rows, 3 classes; row 4 is padding
    Tensor<double> logits({1, 5, 3}, {3, 1, 0, 0, 2, 1, 0, 0, 5, 1, 1, 0, 0, 9, 0});
    std::vector<TokenId> targets{0, 1, 1, 0, 0};
    std::vector<std::uint8_t> mask{1, 1, 1, 1, 0};
    EXPECT_DOUBLE_EQ(token_accuracy(logits, targets, mask), 0.75);
    auto [hit, total] = token_hits(logits, targets, mask);
    EXPECT_EQ(hit, 3u);
    EXPECT_EQ(total, 4u);
    EXPECT_THROW(token_accuracy(logits, {0, 1}, mask), DimensionError);
}
