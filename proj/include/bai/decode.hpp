#pragma once

// Greedy and beam-search decoding over a next-token scorer, corpus BLEU and
// token accuracy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <utility>
#include <vector>

#include "bai/data.hpp"
#include "bai/models.hpp"

namespace bai {

// Log-probabilities over the vocabulary for the token following `prefix`.
using NextLogProbs = std::function<std::vector<double>(const std::vector<TokenId>& prefix)>;

template <class T>
NextLogProbs model_scorer(const Model<T>& model, const std::vector<TokenId>& src) {
    return [&model, src](const std::vector<TokenId>& prefix) { return model.next_log_probs(src, prefix); };
}

// Argmax per step (lowest id on ties) until eos or max_steps. The eos token
// is not part of the result.
inline std::vector<TokenId> greedy_decode(const NextLogProbs& next, std::size_t max_steps, TokenId eos = kEos) {
    std::vector<TokenId> out;
    for (std::size_t step = 0; step < max_steps; ++step) {
        const auto lp = next(out);
        const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
        if (best == eos) break;
        out.push_back(best);
    }
    return out;
}

template <class T>
std::vector<TokenId> greedy_decode(const Model<T>& model, const std::vector<TokenId>& src, std::size_t max_steps) {
    return greedy_decode(model_scorer(model, src), std::min(max_steps, model.target_capacity(src.size())));
}

struct BeamConfig {
    std::size_t width = 4;
    std::size_t max_steps = 32;
    double alpha = 0.0;  // length normalization exponent
};

struct Hypothesis {
    std::vector<TokenId> tokens;  // without the terminating eos
    double log_prob = 0.0;
    bool finished = false;

    std::size_t length() const { return tokens.size() + (finished ? 1 : 0); }
    double score(double alpha) const {
        if (alpha == 0.0) return log_prob;
        return log_prob / std::pow(static_cast<double>(std::max<std::size_t>(length(), 1)), alpha);
    }
};

// Keeps the `width` best partial hypotheses per step; candidates ending in
// eos move to the finished pool. Candidate order: cumulative log-prob, then
// parent rank, then the step log-prob, then token id, so width 1 reproduces
// greedy_decode exactly.
inline Hypothesis beam_search(const NextLogProbs& next, const BeamConfig& cfg, TokenId eos = kEos) {
    if (cfg.width == 0) throw ConfigError("beam width must be >= 1");
    struct Candidate {
        double score;
        std::size_t parent;
        double step;
        TokenId token;
    };
    std::vector<Hypothesis> alive{Hypothesis{}}, finished;
    for (std::size_t step = 0; step < cfg.max_steps && !alive.empty(); ++step) {
        std::vector<Candidate> cands;
        for (std::size_t p = 0; p < alive.size(); ++p) {
            const auto lp = next(alive[p].tokens);
            for (std::size_t t = 0; t < lp.size(); ++t)
                cands.push_back({alive[p].log_prob + lp[t], p, lp[t], static_cast<TokenId>(t)});
        }
        const std::size_t keep = std::min(cfg.width, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Candidate& a, const Candidate& b) {
                              if (a.score != b.score) return a.score > b.score;
                              if (a.parent != b.parent) return a.parent < b.parent;
                              if (a.step != b.step) return a.step > b.step;
                              return a.token < b.token;
                          });
        std::vector<Hypothesis> next_alive;
        for (std::size_t i = 0; i < keep; ++i) {
            Hypothesis h = alive[cands[i].parent];
            h.log_prob = cands[i].score;
            if (cands[i].token == eos) {
                h.finished = true;
                finished.push_back(std::move(h));
            } else {
                h.tokens.push_back(cands[i].token);
                next_alive.push_back(std::move(h));
            }
        }
        alive = std::move(next_alive);
    }
    const Hypothesis* best = nullptr;
    for (const auto* pool : {&finished, &alive})
        for (const auto& h : *pool)
            if (!best || h.score(cfg.alpha) > best->score(cfg.alpha)) best = &h;
    return best ? *best : Hypothesis{};
}

template <class T>
Hypothesis beam_search(const Model<T>& model, const std::vector<TokenId>& src, const BeamConfig& cfg) {
    BeamConfig c = cfg;
    c.max_steps = std::min(c.max_steps, model.target_capacity(src.size()));
    return beam_search(model_scorer(model, src), c);
}

struct BleuStats {
    double bleu = 0.0;
    double brevity_penalty = 0.0;
    std::vector<double> precisions;
    std::size_t candidate_length = 0;
    std::size_t reference_length = 0;
};

// Corpus BLEU with clipped n-gram counts, no smoothing, single reference per
// candidate.
template <class Tok>
BleuStats bleu_stats(const std::vector<std::vector<Tok>>& candidates, const std::vector<std::vector<Tok>>& references,
                     std::size_t max_n = 4) {
    if (candidates.empty()) throw ContractError("bleu: empty candidate set");
    if (candidates.size() != references.size())
        throw ContractError("bleu: " + std::to_string(candidates.size()) + " candidates vs " + std::to_string(references.size()) +
                            " references");
    std::vector<std::size_t> matches(max_n, 0), totals(max_n, 0);
    BleuStats st;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        const auto& c = candidates[s];
        const auto& r = references[s];
        st.candidate_length += c.size();
        st.reference_length += r.size();
        for (std::size_t n = 1; n <= max_n; ++n) {
            std::map<std::vector<Tok>, std::size_t> ref_counts, cand_counts;
            for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[std::vector<Tok>(r.begin() + i, r.begin() + i + n)];
            for (std::size_t i = 0; i + n <= c.size(); ++i) ++cand_counts[std::vector<Tok>(c.begin() + i, c.begin() + i + n)];
            for (const auto& [gram, count] : cand_counts) {
                auto it = ref_counts.find(gram);
                matches[n - 1] += std::min(count, it == ref_counts.end() ? std::size_t{0} : it->second);
                totals[n - 1] += count;
            }
        }
    }
    double log_sum = 0.0;
    bool zero = st.candidate_length == 0;
    for (std::size_t n = 0; n < max_n; ++n) {
        const double p = totals[n] ? static_cast<double>(matches[n]) / static_cast<double>(totals[n]) : 0.0;
        st.precisions.push_back(p);
        if (p == 0.0)
            zero = true;
        else
            log_sum += std::log(p);
    }
    if (st.candidate_length > 0)
        st.brevity_penalty = st.candidate_length > st.reference_length
                                 ? 1.0
                                 : std::exp(1.0 - static_cast<double>(st.reference_length) / static_cast<double>(st.candidate_length));
    st.bleu = zero ? 0.0 : st.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
    return st;
}

template <class Tok>
double bleu(const std::vector<std::vector<Tok>>& candidates, const std::vector<std::vector<Tok>>& references, std::size_t max_n = 4) {
    return bleu_stats(candidates, references, max_n).bleu;
}

// Number of valid rows whose argmax (lowest id on ties) equals the target,
// and the number of valid rows.
template <class T>
std::pair<std::size_t, std::size_t> token_hits(const Tensor<T>& logits, const std::vector<TokenId>& targets,
                                               const std::vector<std::uint8_t>& mask) {
    const std::size_t v = logits.shape().back(), rows = logits.numel() / v;
    if (targets.size() != rows || mask.size() != rows)
        throw DimensionError("token_accuracy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
    std::size_t hit = 0, total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        const T* row = logits.values().data() + r * v;
        const auto best = static_cast<TokenId>(std::max_element(row, row + v) - row);
        hit += best == targets[r];
        ++total;
    }
    return {hit, total};
}

template <class T>
double token_accuracy(const Tensor<T>& logits, const std::vector<TokenId>& targets, const std::vector<std::uint8_t>& mask) {
    const auto [hit, total] = token_hits(logits, targets, mask);
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace bai
