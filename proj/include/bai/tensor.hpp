#pragma once

// Dense row-major tensors with a define-by-run reverse-mode tape.
//
// A Graph is opened for one forward pass with GraphScope. Every op executed
// while a scope is active, and having at least one input that requires a
// gradient, appends one record to the graph. Graph::backward walks those
// records once, newest first. Without an active scope ops are plain
// numerical functions (inference path).

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bai/errors.hpp"

namespace bai {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

template <class T>
class Graph;

template <class T>
struct TensorData {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    Graph<T>* graph = nullptr;
    std::size_t node = 0;

    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <class T>
class Tensor {
public:
    Tensor() : d_(std::make_shared<TensorData<T>>()) { d_->shape = {1}; d_->value.assign(1, T(0)); }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : d_(std::make_shared<TensorData<T>>()) {
        for (auto e : shape)
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        if (shape.empty()) shape = {1};
        if (numel_of(shape) != values.size())
            throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                                 std::to_string(values.size()) + " values");
        d_->shape = std::move(shape);
        d_->value = std::move(values);
        d_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }
    static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
    std::size_t numel() const { return d_->value.size(); }

    std::span<T> data() { return d_->value; }
    std::span<const T> data() const { return d_->value; }
    const std::vector<T>& values() const { return d_->value; }
    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return d_->value[0];
    }
    T operator[](std::size_t i) const { return d_->value[i]; }

    bool has_grad() const { return !d_->grad.empty(); }
    // Gradient buffer; zero-filled if nothing has been accumulated yet.
    std::span<const T> grad() const { return d_->grad_buffer(); }
    std::span<T> grad_mut() { return d_->grad_buffer(); }
    void zero_grad() { d_->grad.clear(); }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }

    bool on_graph() const { return d_->graph != nullptr; }

    // Copy of the values with no graph attachment and no gradient requirement.
    Tensor detach() const { return Tensor(d_->shape, d_->value, false); }

    // Same storage, new handle; used by parameter maps.
    bool same_storage(const Tensor& o) const { return d_ == o.d_; }

    std::shared_ptr<TensorData<T>> impl() const { return d_; }

private:
    std::shared_ptr<TensorData<T>> d_;
};

template <class T>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::size_t size() const { return records_.size(); }
    std::size_t last_visit_count() const { return visits_; }
    const std::string& op_name(std::size_t i) const { return records_.at(i).op; }

    void record(std::string op, const std::shared_ptr<TensorData<T>>& out, std::function<void()> backward) {
        out->graph = this;
        out->node = records_.size();
        records_.push_back({std::move(op), out, std::move(backward)});
    }

    // Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
    // Leaf gradients accumulate across calls; intermediate ones are reset.
    void backward(const Tensor<T>& loss) {
        auto d = loss.impl();
        if (d->value.size() != 1)
            throw ContractError("backward() needs a scalar loss, got shape " + shape_str(d->shape));
        if (d->graph != this) throw ContractError("backward() on a tensor that is not recorded on this graph");
        for (auto& r : records_) r.out->grad.clear();
        d->grad_buffer()[0] = T(1);
        visits_ = 0;
        for (std::size_t i = d->node + 1; i-- > 0;) {
            ++visits_;
            if (records_[i].out->grad.empty()) continue;
            records_[i].backward();
        }
    }

private:
    struct Record {
        std::string op;
        std::shared_ptr<TensorData<T>> out;
        std::function<void()> backward;
    };
    std::vector<Record> records_;
    std::size_t visits_ = 0;
};

namespace detail {
template <class T>
inline thread_local Graph<T>* active_graph_v = nullptr;
}

template <class T>
Graph<T>* active_graph() {
    return detail::active_graph_v<T>;
}

// Makes `g` the recording target for ops on this thread until destruction.
template <class T>
class GraphScope {
public:
    explicit GraphScope(Graph<T>& g) : prev_(detail::active_graph_v<T>) { detail::active_graph_v<T> = &g; }
    ~GraphScope() { detail::active_graph_v<T> = prev_; }
    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

private:
    Graph<T>* prev_;
};

// Suspends recording (e.g. validation inside a training step).
template <class T>
class NoGradScope {
public:
    NoGradScope() : prev_(detail::active_graph_v<T>) { detail::active_graph_v<T> = nullptr; }
    ~NoGradScope() { detail::active_graph_v<T> = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Graph<T>* prev_;
};

template <class T>
void backward(const Tensor<T>& loss) {
    auto* g = loss.impl()->graph;
    if (!g) throw ContractError("backward() on a tensor that is not part of a graph");
    g->backward(loss);
}

}  // namespace bai
