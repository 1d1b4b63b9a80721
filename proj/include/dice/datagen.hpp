#pragma once

#include "dice/batch.hpp"
#include "dice/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace dice {

/// Gaussian class clusters in `core_dim` coordinates, followed by
/// `nuisance_dim` coordinates driven by one label-independent latent:
/// u_j = sqrt(rho) * s + sqrt(1 - rho) * e_j.
struct SpuriousTaskConfig {
    std::size_t classes = 4;
    std::size_t core_dim = 8;
    std::size_t nuisance_dim = 4;
    double nuisance_strength = 0.9; // rho in [0, 1]
    double nuisance_scale = 1.0;
    double class_separation = 1.0; // std of the random class-mean coordinates
    double core_noise = 1.0;       // std of the within-class core noise
    double label_noise = 0.0;      // probability of replacing a label by a uniform draw
    std::size_t samples = 2000;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t input_dim() const { return core_dim + nuisance_dim; }
};

/// Everything needed to regenerate or analyse a task.
struct GenerativeRecord {
    SpuriousTaskConfig config;
    std::vector<std::vector<double>> class_means; // K x core_dim
    std::vector<bool> nuisance_mask;              // per input coordinate
    std::vector<int> clean_labels;
};

struct SyntheticTask {
    Dataset data;
    GenerativeRecord record;
};

SyntheticTask make_spurious_clusters(const SpuriousTaskConfig& cfg);

/// Inputs from the same generator with every class mean translated by
/// `shift` along one random unit direction of the core space. Labels are
/// the generating clusters (bookkeeping only). `seed` selects the draw.
Dataset make_ood_shift(const GenerativeRecord& record, double shift, std::size_t samples, std::uint64_t seed);

/// Random split: round(frac * N) rows go to the first part.
std::pair<Dataset, Dataset> split_train_val(const Dataset& data, double frac, std::uint64_t seed);

/// Bayes-optimal accuracy of a task with a 2-D core space, by integration
/// on a `grid` x `grid` lattice covering every class mean +- 8 sigma.
double bayes_accuracy_2d(const GenerativeRecord& record, std::size_t grid = 600);

} // namespace dice
