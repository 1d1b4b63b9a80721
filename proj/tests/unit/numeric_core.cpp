#include "dice/autodiff.hpp"
#include "dice/error.hpp"
#include "dice/optim.hpp"
#include "dice/oracles.hpp"
#include "dice/random.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace dice;

TEST_SUITE("numeric_core") {

TEST_CASE("gradient of a quadratic") {
    ParamSet ps;
    ps.add("w", Tensor::row({1.0, 2.0}));
    ad::Graph g;
    auto w = g.param(ps, "w");
    auto grads = g.backward(ad::sum(ad::mul(w, w)), ps);
    CHECK(grads[0](0, 0) == 2.0);
    CHECK(grads[0](0, 1) == 4.0);
}

TEST_CASE("unused parameter gets a zero gradient") {
    ParamSet ps;
    ps.add("w", Tensor::row({1.0, 2.0}));
    ps.add("p", Tensor::row({3.0}));
    ad::Graph g;
    auto w = g.param(ps, "w");
    auto grads = g.backward(ad::sum(w), ps);
    CHECK(grads.of(ps, "p")(0, 0) == 0.0);
}

TEST_CASE("backward rejects non-scalar losses and non-finite graphs") {
    ParamSet ps;
    ps.add("w", Tensor::row({1.0, -1.0}));
    ad::Graph g;
    auto w = g.param(ps, "w");
    CHECK_THROWS_AS(g.backward(w, ps), ShapeError);
    auto bad = ad::sum(ad::log(w));
    CHECK_THROWS_AS(g.backward(bad, ps), NumericError);
}

TEST_CASE("two-layer network matches finite differences") {
    Rng rng(11);
    ParamSet ps;
    ps.add("W1", rng.normal_tensor(3, 5));
    ps.add("b1", rng.normal_tensor(1, 5));
    ps.add("W2", rng.normal_tensor(5, 2));
    ps.add("b2", rng.normal_tensor(1, 2));
    Tensor x = rng.normal_tensor(4, 3);
    const int labels[] = {0, 1, 1, 0};
    auto forward = [&](ad::Graph& g, bool train) {
        auto p = [&](const char* n) { return train ? g.param(ps, n) : g.frozen(ps, n); };
        auto h = ad::tanh(ad::add_row(ad::matmul(g.constant(x), p("W1")), p("b1")));
        auto logits = ad::add_row(ad::matmul(h, p("W2")), p("b2"));
        return ad::mean(ad::neg(ad::pick(ad::log_softmax(logits), labels)));
    };
    ad::Graph g;
    auto grads = g.backward(forward(g, true), ps);
    std::vector<Tensor> analytic;
    for (std::size_t i = 0; i < grads.size(); ++i)
        analytic.push_back(grads[i]);
    auto numeric = oracle::finite_difference(
        [&] {
            ad::Graph h;
            return forward(h, false).value().item();
        },
        ps, 1e-5);
    CHECK(oracle::relative_error(analytic, numeric) < 1e-4);
}

TEST_CASE("nesterov reduces to gradient descent without momentum") {
    ParamSet ps;
    ps.add("p", Tensor::row({1.0, -2.0}));
    Gradients g(ps);
    g[0] = Tensor::row({0.5, 1.0});
    sgd_nesterov_step(ps, g, 0.1, 0.0, 0.0);
    CHECK(ps.value("p")(0, 0) == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(ps.value("p")(0, 1) == doctest::Approx(-2.1).epsilon(1e-15));
}

TEST_CASE("zero gradient leaves parameters unchanged") {
    ParamSet ps;
    ps.add("p", Tensor::row({1.0, -2.0}));
    Gradients g(ps);
    sgd_nesterov_step(ps, g, 0.1, 0.9, 0.0);
    rmsprop_step(ps, g, 0.1, 0.9);
    CHECK(ps.value("p")(0, 0) == 1.0);
    CHECK(ps.value("p")(0, 1) == -2.0);
}

TEST_CASE("two nesterov steps follow the scalar recurrence") {
    ParamSet ps;
    ps.add("p", Tensor::scalar(0.0));
    Gradients g(ps);
    g[0] = Tensor::scalar(1.0);
    double p = 0.0, v = 0.0;
    for (int t = 0; t < 2; ++t) {
        sgd_nesterov_step(ps, g, 0.1, 0.9, 0.0);
        v = 0.9 * v + 1.0;
        p -= 0.1 * (1.0 + 0.9 * v);
    }
    CHECK(ps.value("p").item() == doctest::Approx(p).epsilon(1e-15));
    CHECK(p == doctest::Approx(-0.461));
}

TEST_CASE("weight decay enters the gradient") {
    ParamSet ps;
    ps.add("p", Tensor::scalar(2.0));
    Gradients g(ps);
    sgd_nesterov_step(ps, g, 0.1, 0.0, 0.5);
    CHECK(ps.value("p").item() == doctest::Approx(1.9));
}

TEST_CASE("rmsprop single step closed form") {
    ParamSet ps;
    ps.add("p", Tensor::scalar(0.0));
    Gradients g(ps);
    g[0] = Tensor::scalar(1.0);
    rmsprop_step(ps, g, 0.01, 0.9);
    CHECK(ps.value("p").item() == doctest::Approx(-0.01 / std::sqrt(0.1 + kRmsPropEpsilon)).epsilon(1e-14));
}

TEST_CASE("rmsprop step size approaches lr * sign(g)") {
    ParamSet ps;
    ps.add("p", Tensor::scalar(0.0));
    Gradients g(ps);
    g[0] = Tensor::scalar(-3.0);
    double prev = 0.0, step = 0.0;
    for (int t = 0; t < 500; ++t) {
        rmsprop_step(ps, g, 0.01, 0.9);
        step = ps.value("p").item() - prev;
        prev = ps.value("p").item();
    }
    CHECK(step == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("optimizers reject mismatched gradient shapes") {
    ParamSet ps;
    ps.add("p", Tensor::row({1.0, 2.0}));
    Gradients g(ps);
    g[0] = Tensor::scalar(1.0);
    CHECK_THROWS_AS(sgd_nesterov_step(ps, g, 0.1, 0.9, 0.0), ShapeError);
    CHECK_THROWS_AS(rmsprop_step(ps, g, 0.1, 0.9), ShapeError);
}

TEST_CASE("optimizer state shapes follow parameter shapes") {
    ParamSet ps;
    ps.add("W", Tensor(3, 4));
    CHECK(ps.at(0).velocity.same_shape(ps.at(0).value));
    CHECK(ps.at(0).sq_avg.same_shape(ps.at(0).value));
}

TEST_CASE("tensor construction checks the shape") {
    std::vector<double> v{1, 2, 3, 4, 5, 6};
    Tensor t = Tensor::from({2, 3}, v);
    CHECK(t(1, 0) == 4.0);
    CHECK_THROWS(Tensor::from({4, 2}, v));
}

TEST_CASE("streams are reproducible and independent") {
    Rng a = Rng::stream(5, Stream::MemberNoise), b = Rng::stream(5, Stream::MemberNoise);
    Rng c = Rng::stream(5, Stream::RedundancyNoise);
    double x = a.normal();
    CHECK(x == b.normal());
    CHECK(x != c.normal());
}

} // TEST_SUITE
