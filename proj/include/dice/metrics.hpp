#pragma once

#include "dice/models.hpp"
#include "dice/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace dice {

/// Per-member hard predictions and the combined prediction for N inputs.
struct PredictionMatrix {
    std::vector<std::vector<int>> member_pred; // [member][input]
    std::vector<int> labels;
    Tensor ensemble_probs;  // N x K (may be empty for diversity-only use)
    Tensor ensemble_logits; // N x K, argmax-consistent with ensemble_probs

    std::size_t members() const { return member_pred.size(); }
    std::size_t size() const { return labels.size(); }

    static PredictionMatrix from_outputs(const EnsembleOutputs& out, std::span<const int> labels);
    /// Diversity-only matrix from hard predictions.
    static PredictionMatrix from_predictions(std::vector<std::vector<int>> member_pred, std::vector<int> labels);

    void validate() const;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

// Diversity ------------------------------------------------------------------

/// Mean over member pairs of N_single / N_shared (+inf when a pair never errs together).
double ratio_error(const PredictionMatrix& pm);
/// Mean over pairs of Yule's Q on correctness indicators (0/0 counts as 0).
double q_statistic(const PredictionMatrix& pm);
/// Mean over pairs of the fraction of inputs with identical predicted class.
double agreement(const PredictionMatrix& pm);
double kohavi_wolpert_variance(const PredictionMatrix& pm);
double entropy_diversity(const PredictionMatrix& pm);

double ensemble_accuracy(const PredictionMatrix& pm);
double mean_member_accuracy(const PredictionMatrix& pm);

// Uncertainty and calibration -------------------------------------------------

double nll(const Tensor& probs, std::span<const int> labels);
/// Mean over inputs of sum_k (p_k - onehot_k)^2, divided by K.
double brier(const Tensor& probs, std::span<const int> labels);
/// Equal-width confidence bins over the max probability, bins (lo, hi].
double ece(const Tensor& probs, std::span<const int> labels, std::size_t bins = 15);
/// Thresholded adaptive calibration error: per class, probabilities above
/// `threshold` are split into `bins` equal-mass bins; the mean absolute
/// bin gap is averaged over classes and bins.
double tace(const Tensor& probs, std::span<const int> labels, std::size_t bins = 15, double threshold = 1e-3);
double accuracy(const Tensor& probs, std::span<const int> labels);

Tensor softmax_rows(const Tensor& logits, double temperature = 1.0);
double nll_at_temperature(const Tensor& logits, std::span<const int> labels, double temperature);
/// Temperature minimizing NLL: golden-section search over log T in [-3, 3].
double fit_temperature(const Tensor& logits, std::span<const int> labels);

struct CalibrationScores {
    double nll = 0.0;
    double brier = 0.0;
    double ece = 0.0;
    double tace = 0.0;
    double accuracy = 0.0;
};

/// Two-fold temperature-scaling protocol: a random half split, T fitted on
/// each half and applied to the other; scores are averaged over halves.
struct TwoFoldCalibration {
    CalibrationScores before;
    CalibrationScores after;
    double temperature_a = 1.0; // fitted on half A, applied to half B
    double temperature_b = 1.0;
    double temperature() const { return 0.5 * (temperature_a + temperature_b); }
};

TwoFoldCalibration two_fold_temperature_scaling(const Tensor& logits, std::span<const int> labels,
                                                std::uint64_t seed, std::size_t bins = 15);

// Out-of-distribution -------------------------------------------------------------

struct OodScores {
    double auroc = 0.0;
    double aupr_in = 0.0;
    double aupr_out = 0.0;
    double fpr_at_95_tpr = 0.0;
    double detection_error = 0.0;
};

/// Higher score means more in-distribution. In-distribution is the positive
/// class for AUROC, AUPR-in and FPR@95TPR.
OodScores ood_scores(std::span<const double> in_scores, std::span<const double> out_scores);

/// Max ensemble probability per input.
std::vector<double> max_softmax_confidence(const EnsembleModel& model, const Tensor& inputs);
/// Max softmax of the averaged logits rescaled by the mean over member pairs
/// of 1 - w(z_i, z_j, y_hat), with feature means and the predicted class.
std::vector<double> dice_times_w_confidence(const EnsembleModel& model, const Tensor& inputs);

// Bias / variance / covariance -------------------------------------------------------

struct BvcTerms {
    double bias = 0.0;  // mean over members of (E f_i - t)
    double var = 0.0;   // mean over members of E (f_i - E f_i)^2
    double covar = 0.0; // mean over ordered pairs of E (f_i - E f_i)(f_j - E f_j)
    double lhs = 0.0;   // E (fbar - t)^2
    double rhs = 0.0;   // bias^2 + var / M + (1 - 1/M) covar
};

/// `outputs` is R x M: member outputs over R resamples, for one target.
BvcTerms bvc_decomposition(const Tensor& outputs, double target);
/// Averages the per-target terms over several targets.
BvcTerms bvc_decomposition(std::span<const Tensor> outputs, std::span<const double> targets);

// Report --------------------------------------------------------------------------

struct MetricsReport {
    double ensemble_accuracy = 0.0;
    double mean_member_accuracy = 0.0;
    double ratio_error = 0.0;
    double q_statistic = 0.0;
    double agreement = 0.0;
    double kw_variance = 0.0;
    double entropy_diversity = 0.0;
    CalibrationScores before_ts;
    std::optional<CalibrationScores> after_ts;
    std::optional<double> temperature;
    std::optional<OodScores> ood_max_softmax;
    std::optional<OodScores> ood_dice_w;
};

struct ReportOptions {
    bool temperature_scaling = true;
    bool dice_w = false;
    std::uint64_t seed = 0;
    std::size_t bins = 15;
};

MetricsReport evaluate(const EnsembleModel& model, const Tensor& inputs, std::span<const int> labels,
                       const Tensor* ood_inputs, const ReportOptions& options);

} // namespace dice
