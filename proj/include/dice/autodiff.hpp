#pragma once

#include "dice/params.hpp"
#include "dice/tensor.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace dice::ad {

class Graph;

/// Handle to a node recorded on a Graph. Cheap to copy; valid while the
/// owning Graph is alive.
class Var {
public:
    Var() = default;
    Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    bool requires_grad() const;
    Graph& graph() const { return *graph_; }
    std::size_t id() const { return id_; }

private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Dynamic reverse-mode tape. Every operation appends a node; backward()
/// walks the nodes in reverse recording order.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self, const Matrix& grad_out)>;

    Var constant(Tensor value);
    /// Leaf bound to a trainable parameter; backward() reports its gradient.
    Var param(const ParamSet& params, std::size_t index);
    Var param(const ParamSet& params, std::string_view name) { return param(params, params.index(name)); }
    /// Parameter value copied in as a constant: no gradient flows to it.
    Var frozen(const ParamSet& params, std::string_view name) { return constant(params.value(name)); }

    /// Records a derived node. `backward` is only invoked when the node
    /// requires a gradient.
    Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

    /// Adds `g` to the gradient of node `id` (no-op for nodes that do not
    /// require a gradient).
    void accumulate(std::size_t id, const Matrix& g);

    /// Reverse pass from a 1x1 loss. Returns gradients for every parameter
    /// of `params` bound into this graph (zeros for unused parameters).
    /// Throws ShapeError for a non-scalar loss and NumericError when any
    /// recorded value is non-finite.
    Gradients backward(Var loss, const ParamSet& params);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
        const ParamSet* params = nullptr;
        std::size_t param_index = 0;
    };
    std::vector<Node> nodes_;
    std::vector<Matrix> grads_;
    std::vector<bool> has_grad_;
};

// Dense algebra
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// a (n x m) + row vector b (1 x m) broadcast over rows.
Var add_row(Var a, Var row);
/// a (n x m) * column vector c (n x 1) broadcast over columns.
Var mul_col(Var a, Var col);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var neg(Var a);

// Elementwise nonlinearities
Var square(Var a);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var relu(Var a);
Var leaky_relu(Var a, double slope);

// Reductions
Var sum(Var a);
Var mean(Var a);
/// Row sums as an n x 1 column.
Var row_sum(Var a);
/// log(sum(exp(a))) over all entries, as 1 x 1.
Var logsumexp(Var a);
/// Row-wise log-softmax.
Var log_softmax(Var a);

// Indexing and layout
/// Picks a(r, index[r]) for each row, returning an n x 1 column.
Var pick(Var a, std::span<const int> index);
/// Rows table(index[r], :) stacked, e.g. an embedding lookup.
Var gather_rows(Var table, std::span<const int> index);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t start, std::size_t count);
/// Same value, no gradient to the input.
Var stop_gradient(Var a);

} // namespace dice::ad
