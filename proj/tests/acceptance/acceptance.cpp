// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance [--only N[,N...]] [--work DIR] [--seed S]

#include "dice/datagen.hpp"
#include "dice/experiment.hpp"
#include "dice/optim.hpp"
#include "dice/oracles.hpp"
#include "dice/training.hpp"

#include <CLI11.hpp>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace dice;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v) {
    std::string s;
    for (double x : v)
        s += (s.empty() ? "" : " ") + fmt(x, 3);
    return "[" + s + "]";
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

json final_record(const fs::path& dir) {
    std::ifstream in(dir / "metrics.jsonl");
    json last;
    for (std::string line; std::getline(in, line);)
        if (!line.empty())
            last = json::parse(line);
    if (last.value("type", "") != "final")
        throw std::runtime_error("no final record in " + dir.string());
    return last["test"];
}

Outcome from_check(const oracle::CheckResult& r) { return {r.pass, r.detail}; }

// --- shared training runs ------------------------------------------------------

struct TrendRuns {
    fs::path root;
    std::vector<std::uint64_t> seeds;
    std::map<std::string, std::vector<fs::path>> dirs; // arm -> run directory per seed
};

const std::vector<std::pair<std::string, json>>& trend_arms() {
    static const std::vector<std::pair<std::string, json>> arms = {
        {"dice_pos", {{"variant", "DICE"}, {"redundancy.delta", 0.2}}},
        {"ceb", {{"variant", "CEB"}}},
        {"dice_neg", {{"variant", "DICE"}, {"redundancy.delta", -0.2}}},
    };
    return arms;
}

TrendRuns& trend_runs(const fs::path& work) {
    static std::optional<TrendRuns> runs;
    if (runs)
        return *runs;
    json doc = json::parse(std::ifstream(fs::path(DICE_SPECS_DIR) / "diversity_trend.json"));
    TrendRuns r;
    r.root = work / "trend";
    for (const auto& s : doc.at("seeds"))
        r.seeds.push_back(s.get<std::uint64_t>());
    for (const auto& [arm, settings] : trend_arms()) {
        json d = doc;
        for (const auto& [key, value] : settings.items())
            set_path(d, key, value);
        ExperimentSpec spec = parse_spec(d);
        for (std::uint64_t seed : r.seeds) {
            fs::path dir = r.root / arm / ("seed-" + std::to_string(seed));
            fs::remove_all(dir);
            run_experiment(spec, seed, dir);
            r.dirs[arm].push_back(dir);
        }
    }
    runs = std::move(r);
    return *runs;
}

std::vector<double> trend_metric(const TrendRuns& r, const std::string& arm,
                                 const std::function<double(const json&)>& get) {
    std::vector<double> out;
    for (const auto& dir : r.dirs.at(arm))
        out.push_back(get(final_record(dir)));
    return out;
}

// --- criterion 3: estimator fidelity on Gaussian pairs --------------------------

struct PairSampler {
    double rho;
    Rng rng;

    // Rows (z1, z2) sharing a class mean; z2 is correlated with z1 given y
    // for the joint draw and independent of it for the product draw.
    void draw(std::size_t n, Tensor& joint, Tensor& product, std::vector<int>& labels) {
        joint = Tensor(n, 2);
        product = Tensor(n, 2);
        labels.resize(n);
        const double s = std::sqrt(1.0 - rho * rho);
        for (std::size_t r = 0; r < n; ++r) {
            int y = rng.uniform() < 0.5 ? 0 : 1;
            double mu = y == 0 ? -1.0 : 1.0;
            double e1 = rng.normal(), e2 = rng.normal();
            labels[r] = y;
            joint(r, 0) = mu + e1;
            joint(r, 1) = mu + rho * e1 + s * e2;
            product(r, 0) = mu + e1;
            product(r, 1) = mu + rng.normal();
        }
    }
};

double trained_estimate(double rho, std::uint64_t seed) {
    TrainConfig c = TrainConfig::desk(Variant::DICE, 1, 2, 2);
    c.model.feature_dim = 1;
    EnsembleModel model(c.model, seed);
    PairSampler sampler{rho, Rng::stream(seed, Stream::Data)};
    Tensor joint, product;
    std::vector<int> labels;
    const std::size_t steps = 3000, batch = 256;
    for (std::size_t step = 0; step < steps; ++step) {
        sampler.draw(batch, joint, product, labels);
        ad::Graph g;
        auto jl = model.discriminate_logits(g, g.constant(joint), labels, Grad::Train);
        auto pl = model.discriminate_logits(g, g.constant(product), labels, Grad::Train);
        auto loss = discriminator_loss(jl, pl);
        auto grads = g.backward(loss, model.disc_params());
        rmsprop_step(model.disc_params(), grads, 1e-3, c.optim.disc_decay);
    }
    sampler.draw(50000, joint, product, labels);
    ad::Graph g;
    auto jw = ad::sigmoid(model.discriminate_logits(g, g.constant(joint), labels, Grad::Frozen));
    auto pw = ad::sigmoid(model.discriminate_logits(g, g.constant(product), labels, Grad::Frozen));
    auto jv = jw.value().values(), pv = pw.value().values();
    return cr_estimate(std::vector<double>(jv.begin(), jv.end()), std::vector<double>(pv.begin(), pv.end()),
                       c.cr.tau);
}

Outcome criterion_cmi_fidelity() {
    const double truth = oracle::gaussian_cmi(0.8);
    std::vector<double> corr, indep;
    double slowest = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        for (auto [rho, out] : {std::pair{0.8, &corr}, std::pair{0.0, &indep}}) {
            auto t0 = std::chrono::steady_clock::now();
            out->push_back(trained_estimate(rho, seed));
            slowest = std::max(slowest, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        }
    }
    double mc = median(corr), mi = median(indep);
    bool pass = std::abs(mc - truth) <= 0.1 && std::abs(mi) < 0.05 && slowest < 120.0;
    return {pass, "rho=0.8 median " + fmt(mc) + " vs " + fmt(truth) + " " + list(corr) + "; independent median " +
                      fmt(mi) + " " + list(indep) + "; slowest run " + fmt(slowest, 3) + " s"};
}

// --- criterion 5 -----------------------------------------------------------------

Outcome criterion_diversity_trend(const fs::path& work) {
    auto& r = trend_runs(work);
    auto ratio = [](const json& t) { return t.at("ratio_error").is_string() ? kInf : t.at("ratio_error").get<double>(); };
    auto acc = [](const json& t) { return t.at("ensemble_accuracy").get<double>(); };
    auto pos = trend_metric(r, "dice_pos", ratio), ceb = trend_metric(r, "ceb", ratio),
         neg = trend_metric(r, "dice_neg", ratio);
    double acc_pos = median(trend_metric(r, "dice_pos", acc)), acc_ceb = median(trend_metric(r, "ceb", acc));
    bool order = median(pos) > median(ceb) && median(ceb) > median(neg);
    bool accuracy = acc_pos >= acc_ceb - 0.005;
    return {order && accuracy, "median r: DICE(+0.2) " + fmt(median(pos)) + " " + list(pos) + ", CEB " +
                                   fmt(median(ceb)) + " " + list(ceb) + ", DICE(-0.2) " + fmt(median(neg)) + " " +
                                   list(neg) + "; median accuracy DICE " + fmt(acc_pos) + " vs CEB " + fmt(acc_ceb)};
}

// --- criterion 6 -----------------------------------------------------------------

SyntheticTask lattice_task() {
    SpuriousTaskConfig t;
    t.samples = 256;
    t.seed = 11;
    return make_spurious_clusters(t);
}

Outcome criterion_lattice() {
    auto task = lattice_task();
    const auto& d = task.data;
    std::size_t steps = 0;
    std::vector<std::string> failures;
    const std::pair<Variant, Variant> pairs[] = {
        {Variant::DICE, Variant::CEB}, {Variant::CEBR, Variant::CEB}, {Variant::IBR, Variant::IB}};
    for (auto [with, without] : pairs) {
        TrainConfig a = TrainConfig::desk(with, d.inputs.cols(), 4, 4, 4), b = TrainConfig::desk(without, d.inputs.cols(), 4, 4, 4);
        a.seed = b.seed = 3;
        a.delta = Schedule::constant(0.0);
        Trainer ta(a), tb(b);
        const std::size_t batches = d.labels.size() / a.batch_size;
        bool same = true;
        for (std::size_t e = 0; e < a.epochs && same; ++e) {
            for (std::size_t k = 0; k < batches && same; ++k) {
                std::vector<std::size_t> rows(a.batch_size);
                for (std::size_t i = 0; i < rows.size(); ++i)
                    rows[i] = (k * a.batch_size + i * 7 + e) % d.labels.size();
                Batch batch = d.batch(rows);
                double pos = training_position(e, k, batches);
                ta.train_step(batch, pos);
                tb.train_step(batch, pos);
                same = ta.model().member_params().values_bit_equal(tb.model().member_params());
                ++steps;
            }
        }
        if (!same)
            failures.push_back(std::string(to_string(with)) + " vs " + std::string(to_string(without)));
    }
    return {failures.empty(), failures.empty() ? "bit-identical member parameters after every one of " +
                                                     std::to_string(steps) + " steps (DICE, CEBR vs CEB; IBR vs IB)"
                                               : "diverged: " + failures.front()};
}

// --- criterion 8 -----------------------------------------------------------------

std::vector<fs::path>& calibration_runs(const fs::path& work) {
    static std::optional<std::vector<fs::path>> dirs;
    if (dirs)
        return *dirs;
    ExperimentSpec spec = load_spec(fs::path(DICE_SPECS_DIR) / "calibration.json");
    dirs.emplace();
    for (std::uint64_t seed : spec.seeds) {
        fs::path dir = work / "calibration" / ("seed-" + std::to_string(seed));
        fs::remove_all(dir);
        run_experiment(spec, seed, dir);
        dirs->push_back(dir);
    }
    return *dirs;
}

Outcome criterion_calibration(const fs::path& work) {
    std::vector<double> before, after;
    for (const auto& dir : calibration_runs(work)) {
        json t = final_record(dir);
        before.push_back(t["before_ts"]["ece"].get<double>());
        after.push_back(t["after_ts"]["ece"].get<double>());
    }
    // Accuracy must be untouched on every trained model, including the trend runs.
    std::vector<fs::path> all = calibration_runs(work);
    for (const auto& [arm, dirs] : trend_runs(work).dirs)
        all.insert(all.end(), dirs.begin(), dirs.end());
    std::size_t changed = 0;
    for (const auto& dir : all) {
        json t = final_record(dir);
        if (t["before_ts"]["accuracy"] != t["after_ts"]["accuracy"])
            ++changed;
    }
    bool pass = changed == 0 && median(after) <= median(before);
    return {pass, "accuracy changed in " + std::to_string(changed) + "/" + std::to_string(all.size()) +
                      " runs; median ECE before " + fmt(median(before)) + " " + list(before) + ", after " +
                      fmt(median(after)) + " " + list(after)};
}

// --- criterion 10 ----------------------------------------------------------------

Outcome criterion_dice_w(const fs::path& work) {
    auto& r = trend_runs(work);
    auto dicew = trend_metric(r, "dice_pos", [](const json& t) { return t["ood_dice_w"]["auroc"].get<double>(); });
    auto softmax = trend_metric(r, "dice_pos", [](const json& t) { return t["ood_max_softmax"]["auroc"].get<double>(); });
    bool pass = median(dicew) >= median(softmax);
    return {pass, "median AUROC DICE x w " + fmt(median(dicew)) + " " + list(dicew) + " vs max softmax " +
                      fmt(median(softmax)) + " " + list(softmax)};
}

// --- criterion 11 ----------------------------------------------------------------

Outcome criterion_isolation() {
    auto task = lattice_task();
    const auto& d = task.data;
    TrainConfig c = TrainConfig::desk(Variant::DICE, d.inputs.cols(), 4, 4, 10);
    c.delta = Schedule::constant(0.2);
    c.cr.include_rhs = true;
    c.sampling = ScaleMode::Predicted;
    Trainer t(c);
    auto batch_at = [&](std::size_t k) {
        std::vector<std::size_t> rows(c.batch_size);
        for (std::size_t i = 0; i < rows.size(); ++i)
            rows[i] = (k * c.batch_size + i) % d.labels.size();
        return d.batch(rows);
    };
    for (std::size_t k = 0; k < 8; ++k)
        t.train_step(batch_at(k), 5.0);

    std::size_t checks = 0, broken = 0;
    for (std::size_t k = 8; k < 12; ++k) {
        Batch b = batch_at(k);
        ParamSet members = t.model().member_params();
        StepReport rep;
        t.discriminator_steps(b, 5.0, rep);
        broken += t.model().member_params().values_bit_equal(members) ? 0 : 1;
        ParamSet disc = t.model().disc_params();
        t.member_step(b, 5.0);
        broken += t.model().disc_params().values_bit_equal(disc) ? 0 : 1;
        t.update_bank(b, 5.0);
        checks += 2;
    }

    // Gradient of the redundancy term alone, with and without the product term.
    double worst_scale = 0.0, mean_norm = 0.0;
    Batch b = batch_at(12);
    for (bool rhs : {false, true}) {
        ad::Graph g;
        Rng rng(5), bank_rng(6);
        auto x = g.constant(b.inputs);
        MemberSamples f(c.model.members);
        for (std::size_t i = 0; i < c.model.members; ++i) {
            auto enc = t.model().encode(g, i, x, Grad::Train);
            for (std::size_t k = 0; k < c.cr.num_s; ++k)
                f[i].push_back(sample_features(enc.mean, enc.scale, rng.normal_tensor(b.size(), c.model.feature_dim),
                                               ScaleMode::Predicted, 1.0, true));
        }
        auto joint = sample_joint_batch(g, f, b.labels, b.ids);
        auto jl = discriminator_logits(t.model(), g, joint, Grad::Frozen);
        ad::Var loss;
        if (rhs) {
            auto product = sample_product_batch(g, t.bank(), f, b.labels, b.ids, c.cr.neg_per_pos, true, bank_rng);
            auto pl = discriminator_logits(t.model(), g, product, Grad::Frozen);
            loss = cr_member_loss(jl, &pl, c.cr.tau);
        } else {
            loss = cr_member_loss(jl, nullptr, c.cr.tau);
        }
        auto grads = g.backward(loss, t.model().member_params());
        const auto& ps = t.model().member_params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const auto& name = ps.at(i).name;
            if (name.find("/scale/") != std::string::npos)
                worst_scale = std::max(worst_scale, grads[i].mat().cwiseAbs().maxCoeff());
            if (name.find("/mean/") != std::string::npos)
                mean_norm += grads[i].mat().norm();
        }
    }
    bool pass = broken == 0 && worst_scale == 0.0 && mean_norm > 0.0;
    return {pass, std::to_string(checks - broken) + "/" + std::to_string(checks) +
                      " step checks bit-identical; max |scale-head gradient| " + fmt(worst_scale) +
                      ", mean-head gradient norm " + fmt(mean_norm)};
}

// --- criterion 12 ----------------------------------------------------------------

Outcome criterion_replay(const fs::path& work) {
    auto& r = trend_runs(work);
    std::size_t ok = 0, total = 0;
    for (const auto& arm : {"dice_pos", "ceb"}) {
        const fs::path& dir = r.dirs.at(arm).front();
        ExperimentSpec spec = load_spec(dir / "spec.json");
        fs::path again = work / "replay" / arm;
        fs::remove_all(again);
        run_experiment(spec, spec.seeds.front(), again);
        for (const char* f : {"metrics.jsonl", "checkpoint.bin", "spec.json"}) {
            ++total;
            ok += slurp(dir / f) == slurp(again / f) ? 1 : 0;
        }
    }
    return {ok == total, std::to_string(ok) + "/" + std::to_string(total) + " files byte-identical after replay"};
}

} // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    CLI::App app{"acceptance criteria"};
    std::vector<int> only;
    std::string work = "acceptance_work";
    std::uint64_t seed = 7;
    app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
    app.add_option("--work", work, "scratch directory for training runs");
    app.add_option("--seed", seed, "seed for the randomized oracle checks");
    CLI11_PARSE(app, argc, argv);
    const fs::path dir = fs::absolute(work);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient correctness",
         [&] {
             auto t0 = std::chrono::steady_clock::now();
             auto r = from_check(oracle::check_gradients(seed, 1e-4));
             double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
             r.pass = r.pass && secs < 30.0;
             r.detail += "; " + fmt(secs, 3) + " s";
             return r;
         }},
        {"KL oracle", [&] { return from_check(oracle::check_kl_monte_carlo(seed, 20, 1000000, 3.0)); }},
        {"CMI estimator fidelity", [] { return criterion_cmi_fidelity(); }},
        {"discrete enumeration oracle", [&] { return from_check(oracle::check_discrete_cmi(seed, 20, 1e-6)); }},
        {"diversity trend", [&] { return criterion_diversity_trend(dir); }},
        {"variant lattice", [] { return criterion_lattice(); }},
        {"BVC identity", [&] { return from_check(oracle::check_bvc_identity(seed, 100, 1e-9)); }},
        {"calibration protocol", [&] { return criterion_calibration(dir); }},
        {"metric oracles",
         [&] {
             auto a = oracle::check_ood_sweeps(seed, 50, 1e-9), b = oracle::check_diversity(seed, 50, 1e-12);
             return Outcome{a.pass && b.pass, "OOD sweeps: " + a.detail + "; diversity: " + b.detail};
         }},
        {"DICE x w ordering", [&] { return criterion_dice_w(dir); }},
        {"gradient isolation", [] { return criterion_isolation(); }},
        {"replay", [&] { return criterion_replay(dir); }},
    };

    std::set<int> chosen(only.begin(), only.end());
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int number = static_cast<int>(i + 1);
        if (!chosen.empty() && !chosen.count(number))
            continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << number << "] " << criteria[i].first << ": " << o.detail
                  << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
