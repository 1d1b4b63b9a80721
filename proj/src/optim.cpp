#include "dice/optim.hpp"

#include "dice/error.hpp"

#include <stdexcept>

namespace dice {

namespace {

void check_grads(const ParamSet& params, const Gradients& grads) {
    if (grads.size() != params.size())
        throw ShapeError("gradient count does not match parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads[i].same_shape(params.at(i).value))
            throw ShapeError("gradient shape mismatch for " + params.at(i).name);
    }
}

} // namespace

void sgd_nesterov_step(ParamSet& params, const Gradients& grads, double lr, double momentum, double weight_decay) {
    if (!(lr > 0.0))
        throw std::invalid_argument("learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("momentum must lie in [0, 1)");
    check_grads(params, grads);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params.at(i);
        Matrix g = grads[i].mat();
        if (weight_decay != 0.0)
            g += weight_decay * p.value.mat();
        p.velocity.mat() = momentum * p.velocity.mat() + g;
        p.value.mat() -= lr * (g + momentum * p.velocity.mat());
    }
}

void rmsprop_step(ParamSet& params, const Gradients& grads, double lr, double decay_rate) {
    if (!(lr > 0.0))
        throw std::invalid_argument("learning rate must be positive");
    if (!(decay_rate > 0.0 && decay_rate < 1.0))
        throw std::invalid_argument("decay rate must lie in (0, 1)");
    check_grads(params, grads);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params.at(i);
        const Matrix& g = grads[i].mat();
        p.sq_avg.mat() = decay_rate * p.sq_avg.mat() + (1.0 - decay_rate) * g.cwiseAbs2();
        p.value.mat().array() -= lr * g.array() / (p.sq_avg.mat().array() + kRmsPropEpsilon).sqrt();
    }
}

} // namespace dice
