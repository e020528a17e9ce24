#pragma once

// Central finite-difference checks of every differentiable op, the
// attention layer, both equalizers, beta, and the full CE + lambda * beta
// objective of each architecture, in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "bai/objective.hpp"

namespace bai {

struct GradcheckRow {
    std::string op;
    double max_rel_err = 0.0;
    std::size_t checked = 0;  // gradient entries compared
    bool passed = false;
};

struct GradcheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
    // near-zero entries from turning round-off into large ratios.
    double floor = 1e-5;
    std::size_t max_entries = 24;  // per input tensor; larger tensors are sampled
    std::uint64_t seed = 7;
};

using GradInputs = std::vector<Tensor<double>>;
using GradFn = std::function<Tensor<double>(const GradInputs&)>;

namespace detail {

// sum(x * W) for a fixed, shape-determined W, so every output entry gets a
// distinct nonzero weight.
inline Tensor<double> probe(const Tensor<double>& x) {
    std::vector<double> w(x.numel());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.37 * static_cast<double>(i) + 0.11) + 0.05;
    return sum(mul(x, Tensor<double>(x.shape(), std::move(w))));
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = u(rng);
    return Tensor<double>(std::move(s), std::move(v));
}

// Values with |x| in [0.1, 1], away from the ReLU kink.
inline Tensor<double> kink_free_tensor(Shape s, Rng& rng) {
    std::uniform_real_distribution<double> u(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
    return Tensor<double>(std::move(s), std::move(v));
}

}  // namespace detail

// Compares the taped gradient of f with central differences for every
// input (or a random sample of `max_entries` entries of large inputs).
inline GradcheckRow check_gradient(const std::string& name, const GradFn& f, GradInputs inputs, const GradcheckOptions& opt) {
    GradcheckRow row;
    row.op = name;
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Graph<double> g;
        GraphScope<double> scope(g);
        auto loss = f(inputs);
        g.backward(loss);
        for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
    }
    Rng rng(opt.seed);
    NoGradScope<double> no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].data();
        std::vector<std::size_t> entries(data.size());
        for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
        if (entries.size() > opt.max_entries) {
            std::shuffle(entries.begin(), entries.end(), rng);
            entries.resize(opt.max_entries);
        }
        for (auto i : entries) {
            const double saved = data[i];
            data[i] = saved + opt.step;
            const double fp = f(inputs).item();
            data[i] = saved - opt.step;
            const double fm = f(inputs).item();
            data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * opt.step);
            const double a = analytic[k][i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
            row.max_rel_err = std::max(row.max_rel_err, err);
            ++row.checked;
        }
    }
    for (auto& t : inputs) t.zero_grad();
    row.passed = row.max_rel_err < opt.tolerance;
    return row;
}

// Tiny double-precision config used by the objective checks.
inline ModelConfig gradcheck_model_config(Arch arch) {
    ModelConfig c;
    c.arch = arch;
    c.layers = 2;
    c.hidden = 8;
    c.ff_size = 16;
    c.heads = 2;
    c.vocab = 9;
    c.groups = {2, 3};
    c.max_len = 16;
    c.dropout = 0.0;
    return c;
}

// Two sequences of different source and target lengths, so padding masks
// are exercised on both sides.
inline Batch gradcheck_batch() {
    std::vector<Sample> s{{{4, 5, 6}, {7, 8, 4, 5}}, {{8, 7, 6, 5, 4}, {6, 6}}};
    return make_batch(s, {0, 1});
}

inline std::vector<std::string> gradcheck_op_names() {
    return {"matmul",      "matmul_batched", "transpose",    "add",          "sub",         "mul",
            "scale",       "relu",           "neg_relu",     "sum",          "mean",        "concat",
            "slice",       "reshape",        "embedding_lookup", "add_bias", "softmax_rows", "softmax_rows_masked",
            "layer_norm",  "row_normalize",  "scale_rows",   "split_heads",  "merge_heads", "cross_entropy",
            "multi_head_attention", "equalize_transformer", "equalize_expansion", "bai_mse"};
}

// Runs one registered op check by name.
inline GradcheckRow gradcheck_op(const std::string& name, const GradcheckOptions& opt = {}) {
    using detail::probe;
    using detail::random_tensor;
    Rng rng(opt.seed ^ std::hash<std::string>{}(name));
    auto r = [&](Shape s) { return random_tensor(std::move(s), rng); };
    auto chk = [&](const GradFn& f, GradInputs in) { return check_gradient(name, f, std::move(in), opt); };

    if (name == "matmul") return chk([](const GradInputs& x) { return probe(matmul(x[0], x[1])); }, {r({3, 4}), r({4, 5})});
    if (name == "matmul_batched")
        return chk([](const GradInputs& x) { return probe(matmul(x[0], x[1])); }, {r({2, 3, 4}), r({2, 4, 5})});
    if (name == "transpose") return chk([](const GradInputs& x) { return probe(transpose(x[0])); }, {r({2, 3, 4})});
    if (name == "add") return chk([](const GradInputs& x) { return probe(add(x[0], x[1])); }, {r({3, 4}), r({3, 4})});
    if (name == "sub") return chk([](const GradInputs& x) { return probe(sub(x[0], x[1])); }, {r({3, 4}), r({3, 4})});
    if (name == "mul") return chk([](const GradInputs& x) { return probe(mul(x[0], x[1])); }, {r({3, 4}), r({3, 4})});
    if (name == "scale") return chk([](const GradInputs& x) { return probe(scale(x[0], 1.7)); }, {r({3, 4})});
    if (name == "relu")
        return chk([](const GradInputs& x) { return probe(relu(x[0])); }, {detail::kink_free_tensor({4, 5}, rng)});
    if (name == "neg_relu")
        return chk([](const GradInputs& x) { return probe(neg_relu(x[0])); }, {detail::kink_free_tensor({4, 5}, rng)});
    if (name == "sum") return chk([](const GradInputs& x) { return scale(sum(x[0]), 0.5); }, {r({3, 4})});
    if (name == "mean") return chk([](const GradInputs& x) { return scale(mean(x[0]), 2.0); }, {r({3, 4})});
    if (name == "concat")
        return chk([](const GradInputs& x) { return probe(concat<double>({x[0], x[1]}, 1)); }, {r({2, 3, 4}), r({2, 2, 4})});
    if (name == "slice") return chk([](const GradInputs& x) { return probe(slice(x[0], 1, 1, 3)); }, {r({2, 4, 3})});
    if (name == "reshape") return chk([](const GradInputs& x) { return probe(reshape(x[0], {4, 3})); }, {r({2, 6})});
    if (name == "embedding_lookup")
        return chk([](const GradInputs& x) { return probe(embedding_lookup(x[0], {1, 3, 3, 0, 2, 1}, {2, 3})); }, {r({5, 4})});
    if (name == "add_bias") return chk([](const GradInputs& x) { return probe(add_bias(x[0], x[1])); }, {r({2, 3, 4}), r({4})});
    if (name == "softmax_rows") return chk([](const GradInputs& x) { return probe(softmax_rows(x[0])); }, {r({3, 5})});
    if (name == "softmax_rows_masked") {
        const double ninf = -std::numeric_limits<double>::infinity();
        Tensor<double> mask({3, 4}, {0, 0, ninf, 0, ninf, 0, 0, ninf, 0, ninf, ninf, 0});
        return chk([mask](const GradInputs& x) { return probe(softmax_rows(add(x[0], mask))); }, {r({3, 4})});
    }
    if (name == "layer_norm")
        return chk([](const GradInputs& x) { return probe(layer_norm(x[0], x[1], x[2])); }, {r({3, 6}), r({6}), r({6})});
    if (name == "row_normalize")
        return chk([](const GradInputs& x) { return probe(row_normalize(x[0])); }, {random_tensor({3, 4}, rng, 0.1, 1.0)});
    if (name == "scale_rows")
        return chk([](const GradInputs& x) { return probe(scale_rows(x[0], std::vector<double>{0.5, 0.0, 2.0})); }, {r({3, 4})});
    if (name == "split_heads") return chk([](const GradInputs& x) { return probe(split_heads(x[0], 2)); }, {r({2, 3, 4})});
    if (name == "merge_heads") return chk([](const GradInputs& x) { return probe(merge_heads(x[0], 2)); }, {r({4, 3, 2})});
    if (name == "cross_entropy")
        return chk([](const GradInputs& x) { return cross_entropy(x[0], {1, 4, 0, 2}, {1, 1, 0, 1}); }, {r({2, 2, 5})});
    if (name == "multi_head_attention") {
        ParamStore<double> ps;
        Rng init(opt.seed);
        add_attention(ps, "att", 4, init);
        GradInputs in{r({2, 3, 4}), r({2, 5, 4})};
        for (const char* p : {"q", "k", "v", "o"}) {
            in.push_back(ps.at(std::string("att.") + p + ".weight"));
            in.push_back(ps.at(std::string("att.") + p + ".bias"));
        }
        const auto mask = AttentionMask::from_lengths({5, 2}, 5, false);
        return chk([ps, mask](const GradInputs& x) { return probe(multi_head_attention(x[0], x[1], mask, ps, "att", 2)); }, in);
    }
    if (name == "equalize_transformer")
        return chk([](const GradInputs& x) { return probe(equalize_transformer(x[0], x[1], {1, 1, 1, 1, 1, 1, 0, 0}, {1, 1, 1, 1, 1, 0})); },
                   {r({2, 4, 5}), r({2, 3, 5})});
    if (name == "equalize_expansion")
        return chk(
            [](const GradInputs& x) {
                std::vector<ExpansionPivot<double>> g{{2, x[0], x[1]}, {3, x[2], x[3]}};
                return probe(equalize_expansion(g, x[4], {1, 1, 1, 1, 1, 0}));
            },
            {r({2, 2, 5}), r({2, 2, 5}), r({2, 3, 5}), r({2, 3, 5}), r({2, 3, 5})});
    if (name == "bai_mse")
        return chk([](const GradInputs& x) { return bai_mse(x[0], x[1], {1, 1, 0, 1, 0, 0}); }, {r({2, 3, 4}), r({2, 3, 4})});
    throw ConfigError("unknown gradcheck op '" + name + "'");
}

// Full lambda * beta + CE objective of one architecture with respect to
// every model parameter.
inline GradcheckRow gradcheck_objective(Arch arch, const GradcheckOptions& opt = {}, double lambda = 0.7) {
    auto model = std::make_shared<Model<double>>(gradcheck_model_config(arch), opt.seed);
    const auto batch = gradcheck_batch();
    GradInputs params;
    for (auto& [_, p] : model->params()) params.push_back(p);
    GradcheckOptions o = opt;
    o.max_entries = std::min<std::size_t>(opt.max_entries, 6);
    return check_gradient(std::string("objective.") + to_string(arch),
                          [model, batch, arch, lambda](const GradInputs&) {
                              return joint_loss(arch, model->forward(batch), lambda).total;
                          },
                          params, o);
}

// Every op check followed by the objective of `arch`.
inline std::vector<GradcheckRow> run_gradcheck(Arch arch, const GradcheckOptions& opt = {}) {
    std::vector<GradcheckRow> rows;
    for (const auto& n : gradcheck_op_names()) rows.push_back(gradcheck_op(n, opt));
    rows.push_back(gradcheck_objective(arch, opt));
    return rows;
}

}  // namespace bai
