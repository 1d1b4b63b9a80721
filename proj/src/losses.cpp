#include "dice/losses.hpp"

#include "dice/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dice {

using ad::Var;

double kl_diag_gaussian_to_unit_class(const GaussianFeatures& g, std::span<const double> class_mean) {
    if (g.mean.size() != g.scale.size() || g.mean.size() != class_mean.size())
        throw ShapeError("KL: dimension mismatch");
    double kl = 0.0;
    for (std::size_t k = 0; k < g.mean.size(); ++k) {
        double s = g.scale[k];
        if (!(s > 0.0))
            throw std::invalid_argument("KL: scale must be positive");
        double var = s * s;
        double diff = g.mean[k] - class_mean[k];
        kl += 0.5 * (var - std::log(var) - 1.0 + diff * diff);
    }
    return kl;
}

Var kl_to_unit_gaussian(Var mean, Var scale, Var class_mean) {
    // 1/2 [s^2 - log s^2 - 1 + (mu - b)^2], summed over features
    Var var = ad::square(scale);
    Var per_dim = ad::add_scalar(ad::sub(var, ad::log(var)), -1.0);
    per_dim = ad::add(per_dim, ad::square(ad::sub(mean, class_mean)));
    return ad::scale(ad::row_sum(per_dim), 0.5);
}

double cross_entropy(std::span<const double> logits, int y) {
    if (y < 0 || static_cast<std::size_t>(y) >= logits.size())
        throw std::out_of_range("cross_entropy: class index out of range");
    double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double l : logits)
        total += std::exp(l - mx);
    return mx + std::log(total) - logits[static_cast<std::size_t>(y)];
}

Var cross_entropy_rows(Var logits, std::span<const int> labels) {
    return ad::neg(ad::pick(ad::log_softmax(logits), labels));
}

BottleneckTerms bottleneck_loss(ad::Graph& g, const EnsembleModel& model, std::size_t member, const EncodedVars& enc,
                                std::span<const int> labels, double beta, const Tensor& noise, Bottleneck kind,
                                Grad mode) {
    if (labels.empty())
        throw std::invalid_argument("bottleneck loss on an empty batch");
    if (!(beta > 0.0))
        throw std::invalid_argument("beta must be positive");
    BottleneckTerms t;
    if (kind == Bottleneck::None) {
        t.ce = ad::mean(cross_entropy_rows(model.classify(g, member, enc.mean, mode), labels));
        t.kl = g.constant(Tensor::scalar(0.0));
        t.total = t.ce;
        return t;
    }
    Var target = kind == Bottleneck::VCEB ? model.backward_means(g, member, labels, mode)
                                          : model.marginal_means(g, member, labels.size(), mode);
    t.kl = ad::mean(kl_to_unit_gaussian(enc.mean, enc.scale, target));
    Var z = sample_features(enc.mean, enc.scale, noise, ScaleMode::Predicted, 1.0, false);
    t.ce = ad::mean(cross_entropy_rows(model.classify(g, member, z, mode), labels));
    t.total = std::isinf(beta) ? t.ce : ad::add(ad::scale(t.kl, 1.0 / beta), t.ce);
    return t;
}

namespace {

double plain_bottleneck(const EnsembleModel& model, std::size_t member, const Batch& batch, double beta,
                        const Tensor& noise, Bottleneck kind) {
    if (batch.empty())
        throw std::invalid_argument("bottleneck loss on an empty batch");
    ad::Graph g;
    auto enc = model.encode(g, member, g.constant(batch.inputs), Grad::Frozen);
    return bottleneck_loss(g, model, member, enc, batch.labels, beta, noise, kind, Grad::Frozen).total.value().item();
}

} // namespace

double vceb_loss(const EnsembleModel& model, std::size_t member, const Batch& batch, double beta, const Tensor& noise) {
    return plain_bottleneck(model, member, batch, beta, noise, Bottleneck::VCEB);
}

double vib_loss(const EnsembleModel& model, std::size_t member, const Batch& batch, double beta, const Tensor& noise) {
    return plain_bottleneck(model, member, batch, beta, noise, Bottleneck::VIB);
}

} // namespace dice
