#pragma once

#include "dice/params.hpp"

namespace dice {

/// Denominator stabilizer for RMSProp, added inside the square root.
inline constexpr double kRmsPropEpsilon = 1e-8;

/// Nesterov SGD with L2 weight decay folded into the gradient:
///   g' = g + wd * p;  v = mu * v + g';  p -= lr * (g' + mu * v)
void sgd_nesterov_step(ParamSet& params, const Gradients& grads, double lr, double momentum, double weight_decay);

/// RMSProp:  s = rho * s + (1 - rho) * g^2;  p -= lr * g / sqrt(s + eps)
void rmsprop_step(ParamSet& params, const Gradients& grads, double lr, double decay_rate);

} // namespace dice
