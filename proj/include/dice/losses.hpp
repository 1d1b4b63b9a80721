#pragma once

#include "dice/autodiff.hpp"
#include "dice/batch.hpp"
#include "dice/models.hpp"

#include <span>

namespace dice {

/// Which classification objective a member optimizes.
enum class Bottleneck {
    None, // deterministic encoder, plain cross-entropy on the feature mean
    VIB,  // KL towards one class-agnostic learned Gaussian
    VCEB, // KL towards the class-conditional backward Gaussian
};

/// Exact KL( N(mean, diag scale^2) || N(class_mean, I) ).
/// Throws std::invalid_argument on a nonpositive scale.
double kl_diag_gaussian_to_unit_class(const GaussianFeatures& g, std::span<const double> class_mean);

/// Row-wise KL of N(mean, diag scale^2) from N(class_mean, I), as n x 1.
ad::Var kl_to_unit_gaussian(ad::Var mean, ad::Var scale, ad::Var class_mean);

/// -log softmax(logits)[y].
double cross_entropy(std::span<const double> logits, int y);
/// Row-wise cross-entropy, n x 1.
ad::Var cross_entropy_rows(ad::Var logits, std::span<const int> labels);

struct BottleneckTerms {
    ad::Var kl;    // batch mean KL (zero constant for Bottleneck::None)
    ad::Var ce;    // batch mean cross-entropy
    ad::Var total; // kl / beta + ce
};

/// Member classification loss on an already-encoded batch. `noise` is the
/// single reparameterization draw (B x d); unused for Bottleneck::None.
/// `beta` may be +infinity, which removes the compression term.
BottleneckTerms bottleneck_loss(ad::Graph& g, const EnsembleModel& model, std::size_t member, const EncodedVars& enc,
                                std::span<const int> labels, double beta, const Tensor& noise, Bottleneck kind,
                                Grad mode = Grad::Train);

/// Batch-mean VCEB objective: KL(e(z|x) || b(z|y)) / beta - log c(y|z).
double vceb_loss(const EnsembleModel& model, std::size_t member, const Batch& batch, double beta, const Tensor& noise);
/// As vceb_loss with the shared class-agnostic target b(z).
double vib_loss(const EnsembleModel& model, std::size_t member, const Batch& batch, double beta, const Tensor& noise);

} // namespace dice
