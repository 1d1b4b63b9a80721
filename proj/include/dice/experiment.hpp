#pragma once

#include "dice/datagen.hpp"
#include "dice/metrics.hpp"
#include "dice/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dice {

constexpr int kSpecVersion = 1;
constexpr const char* kOutputRootEnv = "DICE_LAB_OUT";

/// Malformed or inconsistent experiment spec.
struct SpecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataSpec {
    std::string kind = "spurious"; // "spurious" or "file"
    SpuriousTaskConfig task;
    std::string path;              // for kind == "file"
    std::size_t test_samples = 1000;
    double val_fraction = 0.05;
    std::uint64_t seed = 0;
    bool vary_with_run_seed = true; // task seed = seed + run seed
};

struct OodSpec {
    double shift = 4.0;
    std::size_t samples = 1000;
    std::uint64_t seed = 1; // added to the task seed
    std::string path;       // dataset file instead of a shifted draw
};

struct ExperimentSpec {
    std::string name = "run";
    std::string preset = "desk";
    TrainConfig train;     // seed is set per run
    DataSpec data;
    std::optional<OodSpec> ood;
    ReportOptions metrics; // seed is set per run
    bool log_steps = true;
    std::vector<std::uint64_t> seeds{0};
    std::string output;    // empty: --out, then $DICE_LAB_OUT, then ./runs
};

/// Parses a spec document; every default is materialized from the preset.
/// Unknown keys, a missing or wrong "version" and invalid values throw SpecError.
ExperimentSpec parse_spec(const nlohmann::json& doc);
ExperimentSpec load_spec(const std::filesystem::path& path);
/// The fully resolved spec, suitable for exact replay.
nlohmann::json to_json(const ExperimentSpec& spec);

/// Sets a dotted key (e.g. "redundancy.delta") in a spec document.
void set_path(nlohmann::json& doc, const std::string& dotted, const nlohmann::json& value);

struct GridAxis {
    std::string key;
    std::vector<nlohmann::json> values;
};

/// "key=v1,v2,..."; values parsed as JSON where possible, else as strings.
GridAxis parse_grid_axis(const std::string& text);
/// Cartesian product in axis order (last axis fastest). Each point lists (key, value).
std::vector<std::vector<std::pair<std::string, nlohmann::json>>> expand_grid(const std::vector<GridAxis>& axes);

struct PreparedData {
    Dataset train;
    Dataset val;
    Dataset test;
    std::optional<Dataset> ood;
};

PreparedData prepare_data(const ExperimentSpec& spec, std::uint64_t run_seed);

/// Writes spec.json, seed.txt, metrics.jsonl and checkpoint.bin into `dir`.
/// Throws NumericAbort after writing the partial metrics and an abort record.
void run_experiment(const ExperimentSpec& spec, std::uint64_t seed, const std::filesystem::path& dir);

/// Output root: explicit value, then the spec, then $DICE_LAB_OUT, then "runs".
std::filesystem::path output_root(const std::string& flag, const ExperimentSpec& spec);

enum class RunStatus { Ok, Aborted, Failed };

struct RunOutcome {
    std::filesystem::path dir;
    std::uint64_t seed = 0;
    std::size_t point = 0;
    RunStatus status = RunStatus::Ok;
    std::string message;
};

/// One run per seed into <root>/<name>/seed-<s>. Errors propagate.
std::vector<RunOutcome> run_train(const ExperimentSpec& spec, const std::filesystem::path& root);

/// Every grid point x seed into <root>/<name>/p<idx>/seed-<s>. A failing run
/// is recorded and the sweep moves on. Writes grid.json and summary.csv
/// (medians per grid point) next to the point directories. Invalid grid
/// values throw SpecError before anything runs.
std::vector<RunOutcome> run_sweep(const nlohmann::json& doc, const std::vector<GridAxis>& axes,
                                  const std::string& out_flag, std::ostream* log = nullptr);

/// JSON encoding of doubles: non-finite values become "inf", "-inf" or null.
nlohmann::json number(double v);
nlohmann::json to_json(const MetricsReport& m);

struct ReportOutput {
    std::size_t runs = 0;
    std::vector<std::filesystem::path> files;
};

/// Collects every run directory below `inputs` and writes runs.csv,
/// tradeoff.csv and dynamics.csv into `out`. With `dice_w_scoring`, DICE x w
/// OOD scores are recomputed from the checkpoints. Throws when no run is found.
ReportOutput write_report(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out,
                          bool dice_w_scoring);

/// Renders a cell: "inf" for +inf, empty for NaN or missing values.
std::string csv_cell(const nlohmann::json& v);

} // namespace dice
