#include "dice/autodiff.hpp"

#include "dice/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dice::ad {

namespace {

Graph& graph_of(Var a, Var b) {
    if (&a.graph() != &b.graph())
        throw std::invalid_argument("operands recorded on different graphs");
    return a.graph();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_scalar(double x) {
    if (x >= 0.0)
        return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

template <typename F>
Tensor map(const Tensor& t, F f) {
    Tensor out(t.rows(), t.cols());
    auto in = t.values();
    auto o = out.values();
    for (std::size_t i = 0; i < in.size(); ++i)
        o[i] = f(in[i]);
    return out;
}

} // namespace

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::param(const ParamSet& params, std::size_t index) {
    Node n;
    n.value = params.at(index).value;
    n.requires_grad = true;
    n.params = &params;
    n.param_index = index;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = std::any_of(parents.begin(), parents.end(), [&](std::size_t p) { return nodes_[p].requires_grad; });
    if (n.requires_grad)
        n.backward = std::move(backward);
    n.parents = std::move(parents);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

void Graph::accumulate(std::size_t id, const Matrix& g) {
    if (!nodes_[id].requires_grad)
        return;
    if (!has_grad_[id]) {
        grads_[id] = g;
        has_grad_[id] = true;
    } else {
        grads_[id] += g;
    }
}

Gradients Graph::backward(Var loss, const ParamSet& params) {
    if (&loss.graph() != this)
        throw std::invalid_argument("loss belongs to another graph");
    if (loss.value().size() != 1)
        throw ShapeError("backward() needs a scalar loss, got " + loss.value().shape_string());
    for (std::size_t i = 0; i <= loss.id(); ++i) {
        if (!nodes_[i].value.all_finite())
            throw NumericError("non-finite value in recorded node " + std::to_string(i));
    }

    grads_.assign(nodes_.size(), Matrix());
    has_grad_.assign(nodes_.size(), false);
    Gradients out(params);
    if (!nodes_[loss.id()].requires_grad)
        return out;

    grads_[loss.id()] = Matrix::Ones(1, 1);
    has_grad_[loss.id()] = true;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        if (!has_grad_[i])
            continue;
        Node& n = nodes_[i];
        if (n.backward) {
            n.backward(*this, i, grads_[i]);
        } else if (n.params == &params) {
            out[n.param_index].mat() += grads_[i];
        }
    }
    grads_.clear();
    has_grad_.clear();
    return out;
}

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + a.value().shape_string() + " x " + b.value().shape_string());
    Tensor out(Matrix(a.value().mat() * b.value().mat()));
    auto ia = a.id(), ib = b.id();
    return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t, const Matrix& go) {
        if (gr.requires_grad(ia))
            gr.accumulate(ia, go * gr.value(ib).mat().transpose());
        if (gr.requires_grad(ib))
            gr.accumulate(ib, gr.value(ia).mat().transpose() * go);
    });
}

Var add(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out(Matrix(a.value().mat() + b.value().mat()));
    auto ia = a.id(), ib = b.id();
    return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t, const Matrix& go) {
        gr.accumulate(ia, go);
        gr.accumulate(ib, go);
    });
}

Var sub(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out(Matrix(a.value().mat() - b.value().mat()));
    auto ia = a.id(), ib = b.id();
    return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t, const Matrix& go) {
        gr.accumulate(ia, go);
        gr.accumulate(ib, -go);
    });
}

Var mul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out(Matrix(a.value().mat().cwiseProduct(b.value().mat())));
    auto ia = a.id(), ib = b.id();
    return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t, const Matrix& go) {
        if (gr.requires_grad(ia))
            gr.accumulate(ia, go.cwiseProduct(gr.value(ib).mat()));
        if (gr.requires_grad(ib))
            gr.accumulate(ib, go.cwiseProduct(gr.value(ia).mat()));
    });
}

Var add_row(Var a, Var row) {
    Graph& g = graph_of(a, row);
    if (row.rows() != 1 || row.cols() != a.cols())
        throw ShapeError("add_row: " + a.value().shape_string() + " + " + row.value().shape_string());
    Matrix m = a.value().mat();
    m.rowwise() += row.value().mat().row(0);
    auto ia = a.id(), ir = row.id();
    return g.record(Tensor(std::move(m)), {ia, ir}, [ia, ir](Graph& gr, std::size_t, const Matrix& go) {
        gr.accumulate(ia, go);
        if (gr.requires_grad(ir))
            gr.accumulate(ir, go.colwise().sum());
    });
}

Var mul_col(Var a, Var col) {
    Graph& g = graph_of(a, col);
    if (col.cols() != 1 || col.rows() != a.rows())
        throw ShapeError("mul_col: " + a.value().shape_string() + " * " + col.value().shape_string());
    Matrix m = a.value().mat().array().colwise() * col.value().mat().col(0).array();
    auto ia = a.id(), ic = col.id();
    return g.record(Tensor(std::move(m)), {ia, ic}, [ia, ic](Graph& gr, std::size_t, const Matrix& go) {
        if (gr.requires_grad(ia)) {
            Matrix ga = go.array().colwise() * gr.value(ic).mat().col(0).array();
            gr.accumulate(ia, ga);
        }
        if (gr.requires_grad(ic))
            gr.accumulate(ic, go.cwiseProduct(gr.value(ia).mat()).rowwise().sum());
    });
}

Var scale(Var a, double c) {
    auto ia = a.id();
    return a.graph().record(Tensor(Matrix(a.value().mat() * c)), {ia},
                            [ia, c](Graph& gr, std::size_t, const Matrix& go) { gr.accumulate(ia, go * c); });
}

Var add_scalar(Var a, double c) {
    auto ia = a.id();
    Matrix m = a.value().mat().array() + c;
    return a.graph().record(Tensor(std::move(m)), {ia}, [ia](Graph& gr, std::size_t, const Matrix& go) { gr.accumulate(ia, go); });
}

Var neg(Var a) { return scale(a, -1.0); }

Var square(Var a) {
    auto ia = a.id();
    return a.graph().record(Tensor(Matrix(a.value().mat().cwiseAbs2())), {ia}, [ia](Graph& gr, std::size_t, const Matrix& go) {
        gr.accumulate(ia, 2.0 * go.cwiseProduct(gr.value(ia).mat()));
    });
}

Var exp(Var a) {
    auto ia = a.id();
    return a.graph().record(map(a.value(), [](double x) { return std::exp(x); }), {ia},
                            [ia](Graph& gr, std::size_t self, const Matrix& go) {
                                gr.accumulate(ia, go.cwiseProduct(gr.value(self).mat()));
                            });
}

Var log(Var a) {
    auto ia = a.id();
    return a.graph().record(map(a.value(), [](double x) { return std::log(x); }), {ia}, [ia](Graph& gr, std::size_t, const Matrix& go) {
        gr.accumulate(ia, go.cwiseQuotient(gr.value(ia).mat()));
    });
}

Var tanh(Var a) {
    auto ia = a.id();
    return a.graph().record(map(a.value(), [](double x) { return std::tanh(x); }), {ia}, [ia](Graph& gr, std::size_t, const Matrix& go) {
        Matrix t = gr.value(ia).mat().array().tanh();
        gr.accumulate(ia, go.cwiseProduct((1.0 - t.array().square()).matrix()));
    });
}

Var sigmoid(Var a) {
    auto ia = a.id();
    return a.graph().record(map(a.value(), sigmoid_scalar), {ia}, [ia](Graph& gr, std::size_t, const Matrix& go) {
        Tensor s = map(gr.value(ia), sigmoid_scalar);
        gr.accumulate(ia, go.cwiseProduct((s.mat().array() * (1.0 - s.mat().array())).matrix()));
    });
}

Var softplus(Var a) {
    auto ia = a.id();
    return a.graph().record(map(a.value(), softplus_scalar), {ia}, [ia](Graph& gr, std::size_t, const Matrix& go) {
        gr.accumulate(ia, go.cwiseProduct(map(gr.value(ia), sigmoid_scalar).mat()));
    });
}

Var relu(Var a) { return leaky_relu(a, 0.0); }

Var leaky_relu(Var a, double slope) {
    auto ia = a.id();
    auto f = [slope](double x) { return x > 0.0 ? x : slope * x; };
    return a.graph().record(map(a.value(), f), {ia}, [ia, slope](Graph& gr, std::size_t, const Matrix& go) {
        Tensor d = map(gr.value(ia), [slope](double x) { return x > 0.0 ? 1.0 : slope; });
        gr.accumulate(ia, go.cwiseProduct(d.mat()));
    });
}

Var sum(Var a) {
    auto ia = a.id();
    auto r = a.rows(), c = a.cols();
    return a.graph().record(Tensor::scalar(a.value().mat().sum()), {ia}, [ia, r, c](Graph& gr, std::size_t, const Matrix& go) {
        gr.accumulate(ia, Matrix::Constant(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c), go(0, 0)));
    });
}

Var mean(Var a) {
    if (a.value().size() == 0)
        throw ShapeError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(Var a) {
    auto ia = a.id();
    auto c = a.cols();
    return a.graph().record(Tensor(Matrix(a.value().mat().rowwise().sum())), {ia}, [ia, c](Graph& gr, std::size_t, const Matrix& go) {
        gr.accumulate(ia, go.replicate(1, static_cast<Eigen::Index>(c)));
    });
}

Var logsumexp(Var a) {
    if (a.value().size() == 0)
        throw ShapeError("logsumexp of empty tensor");
    auto ia = a.id();
    double mx = a.value().mat().maxCoeff();
    double lse = mx + std::log((a.value().mat().array() - mx).exp().sum());
    return a.graph().record(Tensor::scalar(lse), {ia}, [ia, lse](Graph& gr, std::size_t, const Matrix& go) {
        Matrix w = (gr.value(ia).mat().array() - lse).exp();
        gr.accumulate(ia, w * go(0, 0));
    });
}

Var log_softmax(Var a) {
    auto ia = a.id();
    const Matrix& x = a.value().mat();
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mx = x.row(r).maxCoeff();
        double lse = mx + std::log((x.row(r).array() - mx).exp().sum());
        out.row(r) = x.row(r).array() - lse;
    }
    return a.graph().record(Tensor(std::move(out)), {ia}, [ia](Graph& gr, std::size_t self, const Matrix& go) {
        Matrix p = gr.value(self).mat().array().exp();
        Matrix gi = go - (p.array().colwise() * go.rowwise().sum().array()).matrix();
        gr.accumulate(ia, gi);
    });
}

Var pick(Var a, std::span<const int> index) {
    if (index.size() != a.rows())
        throw ShapeError("pick: index count does not match rows");
    const Matrix& x = a.value().mat();
    Matrix out(x.rows(), 1);
    std::vector<int> idx(index.begin(), index.end());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        int c = idx[static_cast<std::size_t>(r)];
        if (c < 0 || c >= x.cols())
            throw std::out_of_range("pick: column index out of range");
        out(r, 0) = x(r, c);
    }
    auto ia = a.id();
    auto cols = a.cols();
    return a.graph().record(Tensor(std::move(out)), {ia}, [ia, cols, idx = std::move(idx)](Graph& gr, std::size_t, const Matrix& go) {
        Matrix gi = Matrix::Zero(go.rows(), static_cast<Eigen::Index>(cols));
        for (Eigen::Index r = 0; r < go.rows(); ++r)
            gi(r, idx[static_cast<std::size_t>(r)]) = go(r, 0);
        gr.accumulate(ia, gi);
    });
}

Var gather_rows(Var table, std::span<const int> index) {
    const Matrix& t = table.value().mat();
    std::vector<int> idx(index.begin(), index.end());
    Matrix out(static_cast<Eigen::Index>(idx.size()), t.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= t.rows())
            throw std::out_of_range("gather_rows: row index out of range");
        out.row(static_cast<Eigen::Index>(r)) = t.row(idx[r]);
    }
    auto it = table.id();
    auto trows = table.rows();
    return table.graph().record(Tensor(std::move(out)), {it}, [it, trows, idx = std::move(idx)](Graph& gr, std::size_t, const Matrix& go) {
        Matrix gt = Matrix::Zero(static_cast<Eigen::Index>(trows), go.cols());
        for (std::size_t r = 0; r < idx.size(); ++r)
            gt.row(idx[r]) += go.row(static_cast<Eigen::Index>(r));
        gr.accumulate(it, gt);
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty())
        throw ShapeError("concat_cols of nothing");
    Graph& g = parts[0].graph();
    auto rows = parts[0].rows();
    Eigen::Index total = 0;
    std::vector<std::size_t> ids;
    std::vector<Eigen::Index> widths;
    for (const Var& p : parts) {
        if (&p.graph() != &g)
            throw std::invalid_argument("concat_cols across graphs");
        if (p.rows() != rows)
            throw ShapeError("concat_cols: row counts differ");
        ids.push_back(p.id());
        widths.push_back(static_cast<Eigen::Index>(p.cols()));
        total += widths.back();
    }
    Matrix out(static_cast<Eigen::Index>(rows), total);
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        out.middleCols(off, widths[k]) = parts[k].value().mat();
        off += widths[k];
    }
    return g.record(Tensor(std::move(out)), ids, [ids, widths](Graph& gr, std::size_t, const Matrix& go) {
        Eigen::Index o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (gr.requires_grad(ids[k]))
                gr.accumulate(ids[k], go.middleCols(o, widths[k]));
            o += widths[k];
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty())
        throw ShapeError("concat_rows of nothing");
    Graph& g = parts[0].graph();
    auto cols = parts[0].cols();
    Eigen::Index total = 0;
    std::vector<std::size_t> ids;
    std::vector<Eigen::Index> heights;
    for (const Var& p : parts) {
        if (&p.graph() != &g)
            throw std::invalid_argument("concat_rows across graphs");
        if (p.cols() != cols)
            throw ShapeError("concat_rows: column counts differ");
        ids.push_back(p.id());
        heights.push_back(static_cast<Eigen::Index>(p.rows()));
        total += heights.back();
    }
    Matrix out(total, static_cast<Eigen::Index>(cols));
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        out.middleRows(off, heights[k]) = parts[k].value().mat();
        off += heights[k];
    }
    return g.record(Tensor(std::move(out)), ids, [ids, heights](Graph& gr, std::size_t, const Matrix& go) {
        Eigen::Index o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (gr.requires_grad(ids[k]))
                gr.accumulate(ids[k], go.middleRows(o, heights[k]));
            o += heights[k];
        }
    });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
    if (start + count > a.rows())
        throw ShapeError("slice_rows out of range");
    auto ia = a.id();
    auto rows = a.rows();
    Matrix out = a.value().mat().middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count));
    return a.graph().record(Tensor(std::move(out)), {ia}, [ia, rows, start, count](Graph& gr, std::size_t, const Matrix& go) {
        Matrix gi = Matrix::Zero(static_cast<Eigen::Index>(rows), go.cols());
        gi.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) = go;
        gr.accumulate(ia, gi);
    });
}

Var stop_gradient(Var a) { return a.graph().constant(a.value()); }

} // namespace dice::ad
