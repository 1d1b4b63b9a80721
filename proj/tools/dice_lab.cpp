#include "dice/experiment.hpp"
#include "dice/oracles.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace {

using nlohmann::json;

json read_doc(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw dice::SpecError("cannot open spec file " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw dice::SpecError(path + ": " + e.what());
    }
}

// Flags that override the document before it is resolved.
void apply_overrides(json& doc, const std::string& preset, const std::vector<std::uint64_t>& seeds) {
    if (!preset.empty())
        doc["preset"] = preset;
    if (!seeds.empty())
        doc["seeds"] = seeds;
}

} // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Keep freed tensor buffers in the heap instead of returning them to the kernel.
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    CLI::App app{"dice-lab: train, sweep and report diverse deep ensembles"};
    app.require_subcommand(1);

    std::string spec_path, out, preset;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> grid;
    std::vector<std::string> report_inputs;
    bool dice_w = false;
    std::uint64_t oracle_seed = 7;

    auto* train = app.add_subcommand("train", "Train one run per seed");
    train->add_option("--spec", spec_path, "Experiment spec (JSON)")->required();
    train->add_option("--out", out, "Output root (default: spec, then $DICE_LAB_OUT, then ./runs)");
    train->add_option("--seed", seeds, "Seed(s) replacing the spec's seed list");
    train->add_option("--preset", preset, "desk or paper");

    auto* sweep = app.add_subcommand("sweep", "Train every grid point for every seed");
    sweep->add_option("--spec", spec_path, "Experiment spec (JSON)")->required();
    sweep->add_option("--out", out, "Output root");
    sweep->add_option("--seed", seeds, "Seed(s) replacing the spec's seed list");
    sweep->add_option("--preset", preset, "desk or paper");
    sweep->add_option("--grid", grid, "Axis as key=v1,v2 (repeatable)");

    auto* report = app.add_subcommand("report", "Write CSV tables from run directories");
    report->add_option("runs", report_inputs, "Run directories or roots")->required();
    report->add_option("--out", out, "Directory for the CSV files")->required();
    report->add_flag("--dice-w-scoring", dice_w, "Recompute DICE x w OOD scores from checkpoints");

    auto* oracle = app.add_subcommand("oracle", "Run the reference-oracle suite");
    oracle->add_option("--seed", oracle_seed, "Seed for the randomized checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (*train) {
            json doc = read_doc(spec_path);
            apply_overrides(doc, preset, seeds);
            dice::ExperimentSpec spec = dice::parse_spec(doc);
            auto runs = dice::run_train(spec, dice::output_root(out, spec));
            for (const auto& r : runs)
                std::cout << r.dir.string() << '\n';
            return 0;
        }
        if (*sweep) {
            json doc = read_doc(spec_path);
            apply_overrides(doc, preset, seeds);
            std::vector<dice::GridAxis> axes;
            for (const auto& g : grid)
                axes.push_back(dice::parse_grid_axis(g));
            auto runs = dice::run_sweep(doc, axes, out, &std::cout);
            int code = 0;
            for (const auto& r : runs) {
                if (r.status == dice::RunStatus::Aborted)
                    code = 3;
                else if (r.status == dice::RunStatus::Failed && code == 0)
                    code = 1;
            }
            return code;
        }
        if (*report) {
            std::vector<std::filesystem::path> inputs(report_inputs.begin(), report_inputs.end());
            auto r = dice::write_report(inputs, out, dice_w);
            std::cout << r.runs << " runs\n";
            for (const auto& f : r.files)
                std::cout << f.string() << '\n';
            return 0;
        }
        if (*oracle)
            return dice::oracle::run_suite(std::cout, oracle_seed) ? 0 : 1;
    } catch (const dice::SpecError& e) {
        std::cerr << "spec error: " << e.what() << '\n';
        return 2;
    } catch (const dice::NumericAbort& e) {
        std::cerr << "numeric abort at step " << e.snapshot.step << ": " << e.what() << '\n';
        return 3;
    } catch (const dice::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
