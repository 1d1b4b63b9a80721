#pragma once

#include "dice/batch.hpp"
#include "dice/error.hpp"
#include "dice/losses.hpp"
#include "dice/metrics.hpp"
#include "dice/models.hpp"
#include "dice/random.hpp"
#include "dice/redundancy.hpp"
#include "dice/schedule.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dice {

enum class Variant { Ind, IB, CEB, IBR, CEBR, DICE };

std::string_view to_string(Variant v);
/// Throws std::invalid_argument for an unknown name.
Variant parse_variant(std::string_view name);

Bottleneck bottleneck_of(Variant v);
bool has_redundancy(Variant v);
/// Class-conditioned redundancy (DICE) versus unconditional (IBR, CEBR).
bool conditional_redundancy(Variant v);

struct OptimConfig {
    Schedule lr = Schedule::constant(0.05); // over epochs
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double disc_lr = 0.003;
    double disc_decay = 0.9;
};

struct TrainConfig {
    Variant variant = Variant::DICE;
    ModelConfig model;
    /// log(beta_ceb) over epochs. IB variants use beta_ceb + 1.
    Schedule log_beta = Schedule::constant(2.0);
    /// Redundancy coefficient (delta_cr or delta_r) over epochs.
    Schedule delta = Schedule::ramp(0.0, 80.0, 0.0, 0.2);
    /// Covariance ramp position over epochs: 0 samples with unit scale,
    /// 1 with the predicted scale.
    Schedule cov_ramp = Schedule::ramp(100.0, 250.0, 0.0, 1.0);
    ScaleMode sampling = ScaleMode::Ramped;
    CrConfig cr;
    OptimConfig optim;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument on inconsistent settings.
    void validate() const;

    /// Desk-scale defaults: small networks, schedules compressed to `epochs`.
    static TrainConfig desk(Variant v, std::size_t input_dim, std::size_t classes, std::size_t members,
                            std::size_t epochs = 30);
    /// The published CIFAR-10 style settings (batch 128, 300 epochs, full discriminator).
    static TrainConfig paper(Variant v, std::size_t input_dim, std::size_t classes, std::size_t members);
};

/// Redundancy coefficient used by the published M-member runs.
double default_delta_cr(std::size_t members);

/// Position in epochs of batch `batch_index` out of `batches` within `epoch`.
double training_position(std::size_t epoch, std::size_t batch_index, std::size_t batches);

/// Effective beta at a training position (+inf when the variant has no bottleneck).
double beta_at(const TrainConfig& c, double position);

/// Random draws entering one member objective evaluation.
struct ObjectiveNoise {
    std::vector<Tensor> bottleneck;              // [member] B x d
    std::vector<std::vector<Tensor>> redundancy; // [member][k] B x d
};

ObjectiveNoise draw_objective_noise(const TrainConfig& c, std::size_t batch_rows, Rng& member_rng, Rng& cr_rng);

struct ObjectiveTerms {
    std::vector<double> kl;
    std::vector<double> ce;
    std::vector<double> bottleneck;  // kl / beta + ce per member
    std::vector<double> pair_cr;     // member-side redundancy loss per pair (i < j)
    double redundancy = 0.0;         // delta / (M - 1) * sum over pairs
    double total = 0.0;
};

/// Member objective at `position` with the given draws. The product batch is
/// only consulted when `cr.include_rhs` is set.
ObjectiveTerms member_objective(const EnsembleModel& model, const Batch& batch, const TrainConfig& c,
                                double position, const ObjectiveNoise& noise, const ClassMemoryBank* bank = nullptr,
                                Rng* bank_rng = nullptr);

struct StepReport {
    std::size_t step = 0;
    double position = 0.0;
    double beta = 0.0;
    double delta = 0.0;
    double cov_ramp = 0.0;
    ObjectiveTerms terms;
    std::optional<double> disc_loss; // last discriminator step
    std::optional<double> cr_estimate;
    std::size_t disc_steps = 0;
    std::size_t skipped_product = 0;
};

struct NumericAbort : NumericError {
    NumericAbort(const std::string& what, StepReport snapshot) : NumericError(what), snapshot(std::move(snapshot)) {}
    StepReport snapshot;
};

/// Owns the model, the class memory bank and the random streams of one run.
class Trainer {
public:
    explicit Trainer(TrainConfig config);

    /// Steps 1-3 of one training iteration on `batch` at `position`.
    StepReport train_step(const Batch& batch, double position);

    const TrainConfig& config() const { return config_; }
    EnsembleModel& model() { return model_; }
    const EnsembleModel& model() const { return model_; }
    const ClassMemoryBank& bank() const { return bank_; }
    std::size_t steps() const { return step_; }
    /// Draws used by the most recent member update.
    const ObjectiveNoise& last_noise() const { return last_noise_; }

    /// Member update only (Steps 1 and 2).
    StepReport member_step(const Batch& batch, double position);
    /// `nstep_d` discriminator updates on fresh samples (Step 3).
    void discriminator_steps(const Batch& batch, double position, StepReport& report);
    void update_bank(const Batch& batch, double position);

private:
    TrainConfig config_;
    EnsembleModel model_;
    ClassMemoryBank bank_;
    Rng member_rng_;
    Rng cr_rng_;
    Rng bank_rng_;
    std::size_t step_ = 0;
    ObjectiveNoise last_noise_;
};

struct EpochReport {
    std::size_t epoch = 0;
    double mean_total = 0.0;
    double mean_redundancy = 0.0;
    std::optional<double> mean_disc_loss;
    std::optional<double> mean_cr_estimate;
    std::optional<MetricsReport> validation; // absent for an empty validation split
};

struct RunCallbacks {
    std::function<void(const StepReport&)> on_step;
    std::function<void(const EpochReport&)> on_epoch;
};

struct RunResult {
    EnsembleModel model;
    std::vector<EpochReport> epochs;
};

/// Full training loop: per-epoch shuffle, train_step per batch, validation
/// metrics after every epoch. Deterministic given the config seed.
RunResult train_run(const TrainConfig& config, const Dataset& train, const Dataset& val,
                    const RunCallbacks& callbacks = {},
                    const ReportOptions& eval = {.temperature_scaling = false});

} // namespace dice
