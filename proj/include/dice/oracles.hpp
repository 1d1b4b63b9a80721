#pragma once

// Reference computations that share no code with the library routines they
// check: brute-force sweeps, enumeration, sampling and finite differences.

#include "dice/params.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace dice::oracle {

/// Central finite differences of `loss` with respect to every entry of `params`.
std::vector<Tensor> finite_difference(const std::function<double()>& loss, ParamSet& params, double eps = 1e-6);

/// ||a - b|| / max(||a||, ||b||) over all entries together (0 when both vanish).
double relative_error(std::span<const Tensor> a, std::span<const Tensor> b);

struct McEstimate {
    double mean = 0.0;
    double std_error = 0.0;
};

/// Monte-Carlo KL( N(mean, diag scale^2) || N(class_mean, I) ) from `samples` draws.
McEstimate mc_kl(std::span<const double> mean, std::span<const double> scale, std::span<const double> class_mean,
                 std::size_t samples, std::uint64_t seed);

/// I(Z1; Z2 | Y) in nats for a pmf p[z1][z2][y] over finite alphabets.
double enumerated_cmi(const std::vector<std::vector<std::vector<double>>>& p);

/// I(Z1; Z2 | Y) for jointly Gaussian scalars with conditional correlation rho.
double gaussian_cmi(double rho);

struct SweepScores {
    double auroc = 0.0;
    double aupr_in = 0.0;
    double aupr_out = 0.0;
    double fpr_at_95_tpr = 0.0;
    double detection_error = 0.0;
};

/// Every quantity recomputed from scratch at every candidate threshold.
SweepScores brute_force_sweep(std::span<const double> in_scores, std::span<const double> out_scores);

/// Hard predictions [member][input] and labels.
struct DiversityOracle {
    double ratio_error = 0.0;
    double q_statistic = 0.0;
    double agreement = 0.0;
    double kw_variance = 0.0;
    double entropy = 0.0;
};

/// Pairwise measures by set enumeration; KW through its pairwise-disagreement identity.
DiversityOracle enumerate_diversity(const std::vector<std::vector<int>>& pred, const std::vector<int>& labels);

/// ECE recomputed bin by bin with a full scan per bin.
double brute_force_ece(const Tensor& probs, std::span<const int> labels, std::size_t bins);

/// Temperature minimizing NLL on a log-spaced grid over [e^-3, e^3].
double grid_temperature(const Tensor& logits, std::span<const int> labels, std::size_t points = 6001);

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

/// Analytic gradients of every loss against finite differences on random tiny models.
CheckResult check_gradients(std::uint64_t seed, double tolerance = 1e-4);
/// Closed-form KL against Monte-Carlo estimates within `sigmas` standard errors.
CheckResult check_kl_monte_carlo(std::uint64_t seed, std::size_t pairs = 20, std::size_t samples = 1000000,
                                 double sigmas = 3.0);
/// DV estimate with the exact likelihood ratio against enumerated CMI.
CheckResult check_discrete_cmi(std::uint64_t seed, std::size_t distributions = 20, double tolerance = 1e-6);
/// Both sides of the bias-variance-covariance identity on random ensembles.
CheckResult check_bvc_identity(std::uint64_t seed, std::size_t ensembles = 100, double tolerance = 1e-9);
/// OOD scores against brute-force threshold sweeps.
CheckResult check_ood_sweeps(std::uint64_t seed, std::size_t sets = 50, double tolerance = 1e-9);
/// Diversity measures against enumeration on random correctness matrices.
CheckResult check_diversity(std::uint64_t seed, std::size_t matrices = 50, double tolerance = 1e-12);
/// ECE against a per-bin scan and fitted temperatures against a grid search.
CheckResult check_calibration(std::uint64_t seed, std::size_t sets = 20);

/// Runs every check and prints one line each. Returns true when all pass.
bool run_suite(std::ostream& out, std::uint64_t seed);

} // namespace dice::oracle
