#pragma once

#include "dice/autodiff.hpp"
#include "dice/params.hpp"
#include "dice/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dice {

/// Diagonal Gaussian emitted by a member encoder.
struct GaussianFeatures {
    std::vector<double> mean;
    std::vector<double> scale; // strictly positive
};

enum class Structure { Independent, SharedTrunk };

/// How the feature scale enters a sample z = mean + noise * s.
enum class ScaleMode {
    None,      // z = mean
    Unit,      // s = 1
    Predicted, // s = predicted scale
    Ramped,    // s = (1 - a) + a * predicted scale, a in [0, 1]
};

enum class Combine { Probabilities, Logits };

struct DiscriminatorConfig {
    std::vector<std::size_t> hidden{256, 256, 100};
    std::size_t class_embedding = 64;
    double leaky_slope = 0.2;
    /// Class-conditioned (K outputs, select y) vs unconditional (1 output).
    bool conditional = true;
};

struct ModelConfig {
    std::size_t input_dim = 0;
    std::size_t hidden = 64;
    std::size_t hidden_layers = 2;
    std::size_t feature_dim = 16;
    std::size_t num_classes = 4;
    std::size_t members = 2;
    Structure structure = Structure::Independent;
    Combine combine = Combine::Probabilities;
    DiscriminatorConfig discriminator;
};

/// Parameter gradient policy for a forward pass.
enum class Grad { Train, Frozen };

/// Mean/scale pair recorded on a graph.
struct EncodedVars {
    ad::Var mean;
    ad::Var scale;
};

/// M members plus one shared discriminator. Member parameters and
/// discriminator parameters live in separate ParamSets so each optimizer
/// only ever touches its own side.
class EnsembleModel {
public:
    EnsembleModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::size_t members() const { return config_.members; }

    ParamSet& member_params() { return member_params_; }
    const ParamSet& member_params() const { return member_params_; }
    ParamSet& disc_params() { return disc_params_; }
    const ParamSet& disc_params() const { return disc_params_; }

    /// Names of the parameters owned (or used) by member `i`, in forward order.
    std::vector<std::string> member_param_names(std::size_t i) const;

    // Recorded forwards ----------------------------------------------------
    EncodedVars encode(ad::Graph& g, std::size_t member, ad::Var x, Grad mode) const;
    ad::Var classify(ad::Graph& g, std::size_t member, ad::Var z, Grad mode) const;
    /// Class-conditional backward means b(y) gathered per label.
    ad::Var backward_means(ad::Graph& g, std::size_t member, std::span<const int> labels, Grad mode) const;
    /// Class-agnostic learned mean b, repeated for `rows` rows.
    ad::Var marginal_means(ad::Graph& g, std::size_t member, std::size_t rows, Grad mode) const;
    /// Discriminator pre-sigmoid output per row of `input` (rows x M*d).
    /// For a conditional discriminator the y-th of K outputs is selected.
    ad::Var discriminate_logits(ad::Graph& g, ad::Var input, std::span<const int> labels, Grad mode) const;

    // Plain-value API ----------------------------------------------------------
    GaussianFeatures encode(std::size_t member, std::span<const double> x) const;
    std::vector<double> classify(std::size_t member, std::span<const double> z) const;
    /// Sigmoid output for the pair (z_i in slot i, z_j in slot j), class y.
    double discriminate(std::size_t slot_i, std::span<const double> z_i, std::size_t slot_j,
                        std::span<const double> z_j, int y) const;
    /// Averaged member prediction from feature means (no sampling).
    std::vector<double> ensemble_predict(std::span<const double> x) const;

private:
    ad::Var bind(ad::Graph& g, const ParamSet& ps, const std::string& name, Grad mode) const;
    ad::Var dense(ad::Graph& g, const ParamSet& ps, const std::string& prefix, ad::Var x, Grad mode) const;

    ModelConfig config_;
    ParamSet member_params_;
    ParamSet disc_params_;
};

/// z = mean + noise * s with s chosen by `mode`. `ramp` is the covariance
/// ramp position in [0, 1] (only used by ScaleMode::Ramped). When
/// `block_scale_grad` is set, no gradient reaches the scale head.
ad::Var sample_features(ad::Var mean, ad::Var scale, const Tensor& noise, ScaleMode mode, double ramp,
                        bool block_scale_grad);
std::vector<double> sample_features(const GaussianFeatures& g, std::span<const double> noise, ScaleMode mode,
                                    double ramp = 1.0);

/// Discriminator input rows with z_i in member slot i, z_j in slot j and
/// every other slot zero-filled.
ad::Var slot_layout(ad::Graph& g, std::size_t members, std::size_t slot_i, ad::Var z_i, std::size_t slot_j,
                    ad::Var z_j);

/// Per-member and combined predictions for a batch of inputs, from means.
struct EnsembleOutputs {
    std::vector<Tensor> member_logits; // M x (N x K)
    std::vector<Tensor> member_probs;  // M x (N x K)
    std::vector<Tensor> member_means;  // M x (N x d)
    Tensor ensemble_probs;             // N x K
    Tensor ensemble_logits;            // N x K; log of the combined prediction
};

EnsembleOutputs predict_batch(const EnsembleModel& model, const Tensor& inputs);

std::vector<double> softmax(std::span<const double> logits);

} // namespace dice
