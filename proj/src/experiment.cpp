#include "dice/experiment.hpp"

#include "dice/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace dice {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Object reader that remembers which keys were consumed, so leftovers can be
// reported as unknown.
class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object())
            throw SpecError(where_ + ": expected an object");
    }
    ~Section() = default;

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }
    const json& at(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }
    std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!has(key))
            return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw SpecError(path(key) + ": wrong type");
        }
    }
    void get_size(const std::string& key, std::size_t& out) {
        if (!has(key))
            return;
        const json& v = j_.at(key);
        if (!v.is_number_integer() || v.get<long long>() < 0)
            throw SpecError(path(key) + ": expected a non-negative integer");
        out = v.get<std::size_t>();
    }
    void get_number(const std::string& key, double& out) {
        if (!has(key))
            return;
        const json& v = j_.at(key);
        if (!v.is_number())
            throw SpecError(path(key) + ": expected a number");
        out = v.get<double>();
    }
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw SpecError("unknown key '" + path(it.key()) + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

Schedule parse_schedule(const json& j, const std::string& where) {
    if (j.is_number())
        return Schedule::constant(j.get<double>());
    Section s(j, where);
    std::string mode = "step";
    s.get("mode", mode);
    Schedule::Mode m;
    if (mode == "step")
        m = Schedule::Mode::StepHold;
    else if (mode == "linear")
        m = Schedule::Mode::Linear;
    else
        throw SpecError(where + ".mode: expected 'step' or 'linear'");
    if (!s.has("anchors"))
        throw SpecError(where + ": missing anchors");
    std::vector<Schedule::Anchor> anchors;
    for (const auto& a : s.at("anchors")) {
        if (!a.is_array() || a.size() != 2 || !a[0].is_number() || !a[1].is_number())
            throw SpecError(where + ".anchors: expected [position, value] pairs");
        anchors.emplace_back(a[0].get<double>(), a[1].get<double>());
    }
    s.finish();
    try {
        return Schedule(std::move(anchors), m);
    } catch (const std::invalid_argument& e) {
        throw SpecError(where + ": " + e.what());
    }
}

json schedule_json(const Schedule& s) {
    json anchors = json::array();
    for (const auto& [p, v] : s.anchors())
        anchors.push_back({p, v});
    return {{"mode", s.mode() == Schedule::Mode::Linear ? "linear" : "step"}, {"anchors", anchors}};
}

const char* structure_name(Structure s) { return s == Structure::SharedTrunk ? "shared_trunk" : "independent"; }
const char* combine_name(Combine c) { return c == Combine::Logits ? "logits" : "probabilities"; }

const char* sampling_name(ScaleMode m) {
    switch (m) {
    case ScaleMode::None: return "none";
    case ScaleMode::Unit: return "unit";
    case ScaleMode::Predicted: return "predicted";
    case ScaleMode::Ramped: return "ramped";
    }
    return "?";
}

ScaleMode parse_sampling(const std::string& s) {
    for (ScaleMode m : {ScaleMode::None, ScaleMode::Unit, ScaleMode::Predicted, ScaleMode::Ramped})
        if (s == sampling_name(m))
            return m;
    throw SpecError("training.sampling: unknown mode '" + s + "'");
}

void parse_model(const json& j, ModelConfig& m) {
    Section s(j, "model");
    s.get_size("hidden", m.hidden);
    s.get_size("hidden_layers", m.hidden_layers);
    s.get_size("feature_dim", m.feature_dim);
    if (s.has("structure")) {
        std::string v;
        s.get("structure", v);
        if (v == "independent")
            m.structure = Structure::Independent;
        else if (v == "shared_trunk")
            m.structure = Structure::SharedTrunk;
        else
            throw SpecError("model.structure: expected 'independent' or 'shared_trunk'");
    }
    if (s.has("combine")) {
        std::string v;
        s.get("combine", v);
        if (v == "logits")
            m.combine = Combine::Logits;
        else if (v == "probabilities")
            m.combine = Combine::Probabilities;
        else
            throw SpecError("model.combine: expected 'logits' or 'probabilities'");
    }
    if (s.has("discriminator")) {
        Section d(s.at("discriminator"), "model.discriminator");
        if (d.has("hidden")) {
            m.discriminator.hidden.clear();
            const json& h = d.at("hidden");
            if (!h.is_array())
                throw SpecError("model.discriminator.hidden: expected a list");
            for (const auto& w : h) {
                if (!w.is_number_integer() || w.get<long long>() < 1)
                    throw SpecError("model.discriminator.hidden: expected positive widths");
                m.discriminator.hidden.push_back(w.get<std::size_t>());
            }
        }
        d.get_size("class_embedding", m.discriminator.class_embedding);
        d.get_number("leaky_slope", m.discriminator.leaky_slope);
        d.finish();
    }
    s.finish();
}

void parse_task(Section& s, SpuriousTaskConfig& t) {
    s.get_size("classes", t.classes);
    s.get_size("core_dim", t.core_dim);
    s.get_size("nuisance_dim", t.nuisance_dim);
    s.get_number("nuisance_strength", t.nuisance_strength);
    s.get_number("nuisance_scale", t.nuisance_scale);
    s.get_number("class_separation", t.class_separation);
    s.get_number("core_noise", t.core_noise);
    s.get_number("label_noise", t.label_noise);
    s.get_size("samples", t.samples);
}

} // namespace

ExperimentSpec parse_spec(const json& doc) {
    Section top(doc, "");
    if (!top.has("version"))
        throw SpecError("missing 'version'");
    if (!top.at("version").is_number_integer() || top.at("version").get<int>() != kSpecVersion)
        throw SpecError("unsupported spec version (expected " + std::to_string(kSpecVersion) + ")");

    ExperimentSpec spec;
    top.get("name", spec.name);
    top.get("preset", spec.preset);
    if (spec.preset != "desk" && spec.preset != "paper")
        throw SpecError("preset: expected 'desk' or 'paper'");
    std::string variant_name = "DICE";
    top.get("variant", variant_name);
    Variant variant;
    try {
        variant = parse_variant(variant_name);
    } catch (const std::invalid_argument& e) {
        throw SpecError(std::string("variant: ") + e.what());
    }
    std::size_t members = 4;
    top.get_size("members", members);
    if (top.has("seeds")) {
        spec.seeds.clear();
        const json& s = top.at("seeds");
        if (!s.is_array() || s.empty())
            throw SpecError("seeds: expected a non-empty list");
        for (const auto& v : s) {
            if (!v.is_number_unsigned())
                throw SpecError("seeds: expected non-negative integers");
            spec.seeds.push_back(v.get<std::uint64_t>());
        }
    }
    if (std::set<std::uint64_t>(spec.seeds.begin(), spec.seeds.end()).size() != spec.seeds.size())
        throw SpecError("seeds must be distinct");
    top.get("output", spec.output);

    // Data first: the preset needs the input shape.
    std::size_t input_dim = 0, classes = 0;
    if (top.has("data")) {
        Section d(top.at("data"), "data");
        d.get("kind", spec.data.kind);
        d.get("path", spec.data.path);
        d.get_size("test_samples", spec.data.test_samples);
        d.get_number("val_fraction", spec.data.val_fraction);
        d.get("seed", spec.data.seed);
        d.get("vary_with_run_seed", spec.data.vary_with_run_seed);
        parse_task(d, spec.data.task);
        d.finish();
    }
    if (!(spec.data.val_fraction >= 0.0 && spec.data.val_fraction < 1.0))
        throw SpecError("data.val_fraction must lie in [0, 1)");
    if (spec.data.kind == "spurious") {
        try {
            spec.data.task.validate();
        } catch (const std::invalid_argument& e) {
            throw SpecError(std::string("data: ") + e.what());
        }
        input_dim = spec.data.task.input_dim();
        classes = spec.data.task.classes;
    } else if (spec.data.kind == "file") {
        if (spec.data.path.empty())
            throw SpecError("data.path is required for kind 'file'");
        try {
            DatasetFile f = load_dataset(spec.data.path);
            input_dim = f.data.inputs.cols();
            classes = f.classes;
            if (spec.data.test_samples >= f.data.size())
                throw SpecError("data.test_samples leaves no training rows");
        } catch (const FormatError& e) {
            throw SpecError(std::string("data.path: ") + e.what());
        }
    } else {
        throw SpecError("data.kind: expected 'spurious' or 'file'");
    }

    if (top.has("ood")) {
        Section o(top.at("ood"), "ood");
        OodSpec ood;
        o.get_number("shift", ood.shift);
        o.get_size("samples", ood.samples);
        o.get("seed", ood.seed);
        o.get("path", ood.path);
        o.finish();
        if (ood.path.empty() && spec.data.kind != "spurious")
            throw SpecError("ood.path is required unless the data are generated");
        if (ood.samples == 0 && ood.path.empty())
            throw SpecError("ood.samples must be positive");
        spec.ood = ood;
    }

    std::size_t epochs = 30;
    std::size_t batch = 0;
    bool has_batch = false;
    std::string sampling;
    if (top.has("training")) {
        Section t(top.at("training"), "training");
        t.get_size("epochs", epochs);
        has_batch = t.has("batch_size");
        t.get_size("batch_size", batch);
        t.get("sampling", sampling);
        t.finish();
    }

    TrainConfig& c = spec.train;
    c = spec.preset == "desk" ? TrainConfig::desk(variant, input_dim, classes, members, epochs)
                              : TrainConfig::paper(variant, input_dim, classes, members);
    c.epochs = epochs;
    if (has_batch)
        c.batch_size = batch;
    if (!sampling.empty())
        c.sampling = parse_sampling(sampling);

    if (top.has("model"))
        parse_model(top.at("model"), c.model);

    if (top.has("optim")) {
        Section o(top.at("optim"), "optim");
        if (o.has("lr"))
            c.optim.lr = parse_schedule(o.at("lr"), "optim.lr");
        o.get_number("momentum", c.optim.momentum);
        o.get_number("weight_decay", c.optim.weight_decay);
        o.get_number("disc_lr", c.optim.disc_lr);
        o.get_number("disc_decay", c.optim.disc_decay);
        o.finish();
    }

    std::optional<double> delta_value;
    if (top.has("redundancy")) {
        Section r(top.at("redundancy"), "redundancy");
        if (r.has("delta")) {
            double d = 0.0;
            r.get_number("delta", d);
            delta_value = d;
        }
        r.get_number("tau", c.cr.tau);
        r.get_size("num_s", c.cr.num_s);
        r.get_size("neg_per_pos", c.cr.neg_per_pos);
        r.get_size("nstep_d", c.cr.nstep_d);
        r.get("include_rhs", c.cr.include_rhs);
        r.finish();
    }

    if (top.has("schedules")) {
        Section s(top.at("schedules"), "schedules");
        if (s.has("log_beta"))
            c.log_beta = parse_schedule(s.at("log_beta"), "schedules.log_beta");
        if (s.has("delta")) {
            if (delta_value)
                throw SpecError("give either redundancy.delta or schedules.delta, not both");
            c.delta = parse_schedule(s.at("delta"), "schedules.delta");
        }
        if (s.has("cov_ramp"))
            c.cov_ramp = parse_schedule(s.at("cov_ramp"), "schedules.cov_ramp");
        s.finish();
    }
    if (delta_value) {
        // Keep the preset ramp shape, change its final value.
        auto anchors = c.delta.anchors();
        const double end = anchors.back().second;
        if (end != 0.0) {
            c.delta = c.delta.scaled_values(*delta_value / end);
        } else {
            for (std::size_t i = 0; i + 1 < anchors.size(); ++i)
                anchors[i].second = 0.0;
            anchors.back().second = *delta_value;
            c.delta = Schedule(std::move(anchors), c.delta.mode());
        }
    }

    if (top.has("metrics")) {
        Section m(top.at("metrics"), "metrics");
        m.get("temperature_scaling", spec.metrics.temperature_scaling);
        m.get("dice_w", spec.metrics.dice_w);
        m.get_size("bins", spec.metrics.bins);
        m.get("log_steps", spec.log_steps);
        m.finish();
    }
    if (spec.metrics.dice_w && !spec.ood)
        throw SpecError("metrics.dice_w needs an ood section");
    top.finish();

    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw SpecError(e.what());
    }
    return spec;
}

ExperimentSpec load_spec(const fs::path& path) {
    std::ifstream in(path);
    if (!in)
        throw SpecError("cannot open spec file " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SpecError(path.string() + ": " + e.what());
    }
    return parse_spec(doc);
}

json to_json(const ExperimentSpec& spec) {
    const TrainConfig& c = spec.train;
    const ModelConfig& m = c.model;
    const SpuriousTaskConfig& t = spec.data.task;
    json doc;
    doc["version"] = kSpecVersion;
    doc["name"] = spec.name;
    doc["preset"] = spec.preset;
    doc["variant"] = std::string(to_string(c.variant));
    doc["members"] = m.members;
    doc["seeds"] = spec.seeds;
    doc["output"] = spec.output;
    json data = {{"kind", spec.data.kind},
                 {"test_samples", spec.data.test_samples},
                 {"val_fraction", spec.data.val_fraction},
                 {"seed", spec.data.seed},
                 {"vary_with_run_seed", spec.data.vary_with_run_seed}};
    if (spec.data.kind == "file") {
        data["path"] = spec.data.path;
    } else {
        data["classes"] = t.classes;
        data["core_dim"] = t.core_dim;
        data["nuisance_dim"] = t.nuisance_dim;
        data["nuisance_strength"] = t.nuisance_strength;
        data["nuisance_scale"] = t.nuisance_scale;
        data["class_separation"] = t.class_separation;
        data["core_noise"] = t.core_noise;
        data["label_noise"] = t.label_noise;
        data["samples"] = t.samples;
    }
    doc["data"] = data;
    if (spec.ood) {
        json o = {{"shift", spec.ood->shift}, {"samples", spec.ood->samples}, {"seed", spec.ood->seed}};
        if (!spec.ood->path.empty())
            o["path"] = spec.ood->path;
        doc["ood"] = o;
    }
    doc["model"] = {{"hidden", m.hidden},
                    {"hidden_layers", m.hidden_layers},
                    {"feature_dim", m.feature_dim},
                    {"structure", structure_name(m.structure)},
                    {"combine", combine_name(m.combine)},
                    {"discriminator",
                     {{"hidden", m.discriminator.hidden},
                      {"class_embedding", m.discriminator.class_embedding},
                      {"leaky_slope", m.discriminator.leaky_slope}}}};
    doc["optim"] = {{"lr", schedule_json(c.optim.lr)},
                    {"momentum", c.optim.momentum},
                    {"weight_decay", c.optim.weight_decay},
                    {"disc_lr", c.optim.disc_lr},
                    {"disc_decay", c.optim.disc_decay}};
    doc["redundancy"] = {{"tau", number(c.cr.tau)},
                         {"num_s", c.cr.num_s},
                         {"neg_per_pos", c.cr.neg_per_pos},
                         {"nstep_d", c.cr.nstep_d},
                         {"include_rhs", c.cr.include_rhs}};
    doc["schedules"] = {{"log_beta", schedule_json(c.log_beta)},
                        {"delta", schedule_json(c.delta)},
                        {"cov_ramp", schedule_json(c.cov_ramp)}};
    doc["training"] = {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"sampling", sampling_name(c.sampling)}};
    doc["metrics"] = {{"temperature_scaling", spec.metrics.temperature_scaling},
                      {"dice_w", spec.metrics.dice_w},
                      {"bins", spec.metrics.bins},
                      {"log_steps", spec.log_steps}};
    return doc;
}

void set_path(json& doc, const std::string& dotted, const json& value) {
    if (dotted.empty())
        throw SpecError("empty grid key");
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = dotted.find('.', start);
        std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty())
            throw SpecError("bad grid key '" + dotted + "'");
        if (!node->is_object())
            throw SpecError("grid key '" + dotted + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null())
            *node = json::object();
        start = dot + 1;
    }
}

GridAxis parse_grid_axis(const std::string& text) {
    auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == text.size())
        throw SpecError("grid axis must look like key=v1,v2: '" + text + "'");
    GridAxis axis;
    axis.key = text.substr(0, eq);
    std::stringstream rest(text.substr(eq + 1));
    std::string item;
    while (std::getline(rest, item, ',')) {
        if (item.empty())
            throw SpecError("empty value in grid axis '" + text + "'");
        json v = json::parse(item, nullptr, false);
        axis.values.push_back(v.is_discarded() ? json(item) : v);
    }
    return axis;
}

std::vector<std::vector<std::pair<std::string, json>>> expand_grid(const std::vector<GridAxis>& axes) {
    std::vector<std::vector<std::pair<std::string, json>>> points{{}};
    for (const auto& axis : axes) {
        if (axis.values.empty())
            throw SpecError("grid axis '" + axis.key + "' has no values");
        std::vector<std::vector<std::pair<std::string, json>>> next;
        for (const auto& p : points)
            for (const auto& v : axis.values) {
                auto q = p;
                q.emplace_back(axis.key, v);
                next.push_back(std::move(q));
            }
        points = std::move(next);
    }
    return points;
}

PreparedData prepare_data(const ExperimentSpec& spec, std::uint64_t run_seed) {
    const std::uint64_t data_seed = spec.data.seed + (spec.data.vary_with_run_seed ? run_seed : 0);
    PreparedData out;
    Dataset pool;
    std::optional<GenerativeRecord> record;
    std::size_t test_rows = spec.data.test_samples;
    if (spec.data.kind == "spurious") {
        SpuriousTaskConfig cfg = spec.data.task;
        cfg.samples += test_rows;
        cfg.seed = data_seed;
        SyntheticTask task = make_spurious_clusters(cfg);
        pool = std::move(task.data);
        record = std::move(task.record);
    } else {
        pool = load_dataset(spec.data.path).data;
    }
    // Generated rows are exchangeable, so the leading rows serve as the test set.
    std::vector<std::size_t> head(test_rows), tail(pool.size() - test_rows);
    for (std::size_t i = 0; i < head.size(); ++i)
        head[i] = i;
    for (std::size_t i = 0; i < tail.size(); ++i)
        tail[i] = test_rows + i;
    Batch tb = pool.batch(head), rb = pool.batch(tail);
    out.test = Dataset{std::move(tb.inputs), std::move(tb.labels)};
    Dataset rest{std::move(rb.inputs), std::move(rb.labels)};
    auto [train, val] = split_train_val(rest, 1.0 - spec.data.val_fraction, data_seed);
    out.train = std::move(train);
    out.val = std::move(val);
    if (spec.ood) {
        if (!spec.ood->path.empty())
            out.ood = load_dataset(spec.ood->path).data;
        else
            out.ood = make_ood_shift(*record, spec.ood->shift, spec.ood->samples, spec.ood->seed + data_seed);
    }
    return out;
}

json number(double v) {
    if (std::isnan(v))
        return nullptr;
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    return v;
}

namespace {

json optional_number(const std::optional<double>& v) { return v ? number(*v) : json(nullptr); }

json to_json(const CalibrationScores& c) {
    return {{"nll", number(c.nll)},
            {"brier", number(c.brier)},
            {"ece", number(c.ece)},
            {"tace", number(c.tace)},
            {"accuracy", number(c.accuracy)}};
}

json to_json(const OodScores& o) {
    return {{"auroc", number(o.auroc)},
            {"aupr_in", number(o.aupr_in)},
            {"aupr_out", number(o.aupr_out)},
            {"fpr_at_95_tpr", number(o.fpr_at_95_tpr)},
            {"detection_error", number(o.detection_error)}};
}

json numbers(const std::vector<double>& v) {
    json a = json::array();
    for (double x : v)
        a.push_back(number(x));
    return a;
}

json step_json(const StepReport& r, std::size_t epoch) {
    return {{"type", "step"},
            {"step", r.step},
            {"epoch", epoch},
            {"position", number(r.position)},
            {"beta", number(r.beta)},
            {"delta", number(r.delta)},
            {"cov_ramp", number(r.cov_ramp)},
            {"total", number(r.terms.total)},
            {"kl", numbers(r.terms.kl)},
            {"ce", numbers(r.terms.ce)},
            {"bottleneck", numbers(r.terms.bottleneck)},
            {"pair_cr", numbers(r.terms.pair_cr)},
            {"redundancy", number(r.terms.redundancy)},
            {"disc_loss", optional_number(r.disc_loss)},
            {"cr_estimate", optional_number(r.cr_estimate)},
            {"disc_steps", r.disc_steps},
            {"skipped_product", r.skipped_product}};
}

void write_line(std::ofstream& out, const json& j) {
    out << j.dump() << '\n';
    out.flush();
}

} // namespace

json to_json(const MetricsReport& m) {
    json j = {{"ensemble_accuracy", number(m.ensemble_accuracy)},
              {"mean_member_accuracy", number(m.mean_member_accuracy)},
              {"ratio_error", number(m.ratio_error)},
              {"q_statistic", number(m.q_statistic)},
              {"agreement", number(m.agreement)},
              {"kw_variance", number(m.kw_variance)},
              {"entropy_diversity", number(m.entropy_diversity)},
              {"before_ts", to_json(m.before_ts)}};
    j["after_ts"] = m.after_ts ? to_json(*m.after_ts) : json(nullptr);
    j["temperature"] = optional_number(m.temperature);
    j["ood_max_softmax"] = m.ood_max_softmax ? to_json(*m.ood_max_softmax) : json(nullptr);
    j["ood_dice_w"] = m.ood_dice_w ? to_json(*m.ood_dice_w) : json(nullptr);
    return j;
}

void run_experiment(const ExperimentSpec& spec, std::uint64_t seed, const fs::path& dir) {
    fs::create_directories(dir);
    ExperimentSpec resolved = spec;
    resolved.seeds = {seed};
    {
        std::ofstream s(dir / "spec.json");
        s << to_json(resolved).dump(2) << '\n';
        std::ofstream sd(dir / "seed.txt");
        sd << seed << '\n';
    }
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics)
        throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());

    PreparedData data = prepare_data(spec, seed);
    TrainConfig config = spec.train;
    config.seed = seed;
    ReportOptions eval = spec.metrics;
    eval.seed = seed;

    std::size_t epoch = 0;
    RunCallbacks callbacks;
    if (spec.log_steps)
        callbacks.on_step = [&](const StepReport& r) { write_line(metrics, step_json(r, epoch)); };
    callbacks.on_epoch = [&](const EpochReport& e) {
        write_line(metrics, {{"type", "epoch"},
                             {"epoch", e.epoch},
                             {"mean_total", number(e.mean_total)},
                             {"mean_redundancy", number(e.mean_redundancy)},
                             {"mean_disc_loss", optional_number(e.mean_disc_loss)},
                             {"mean_cr_estimate", optional_number(e.mean_cr_estimate)},
                             {"validation", e.validation ? to_json(*e.validation) : json(nullptr)}});
        epoch = e.epoch + 1;
    };

    ReportOptions val_eval = eval;
    val_eval.temperature_scaling = false;
    val_eval.dice_w = false;
    try {
        RunResult result = train_run(config, data.train, data.val, callbacks, val_eval);
        const Tensor* ood = data.ood ? &data.ood->inputs : nullptr;
        MetricsReport test = evaluate(result.model, data.test.inputs, data.test.labels, ood, eval);
        write_line(metrics, {{"type", "final"},
                             {"seed", seed},
                             {"variant", std::string(to_string(config.variant))},
                             {"epochs", config.epochs},
                             {"test", to_json(test)}});
        save_checkpoint(dir / "checkpoint.bin", result.model);
    } catch (const NumericAbort& a) {
        write_line(metrics, {{"type", "abort"}, {"message", a.what()}, {"at", step_json(a.snapshot, epoch)}});
        throw;
    }
}

fs::path output_root(const std::string& flag, const ExperimentSpec& spec) {
    if (!flag.empty())
        return flag;
    if (!spec.output.empty())
        return spec.output;
    if (const char* env = std::getenv(kOutputRootEnv); env && *env)
        return env;
    return "runs";
}

std::vector<RunOutcome> run_train(const ExperimentSpec& spec, const fs::path& root) {
    std::vector<RunOutcome> out;
    for (std::uint64_t seed : spec.seeds) {
        fs::path dir = root / spec.name / ("seed-" + std::to_string(seed));
        run_experiment(spec, seed, dir);
        out.push_back({dir, seed, 0, RunStatus::Ok, ""});
    }
    return out;
}

namespace {

json final_test(const fs::path& dir) {
    std::ifstream m(dir / "metrics.jsonl");
    std::string line;
    json test;
    while (std::getline(m, line)) {
        json j = json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.value("type", "") == "final")
            test = j.at("test");
    }
    return test;
}

double as_double(const json& v);
json median(std::vector<double> v);

} // namespace

std::vector<RunOutcome> run_sweep(const json& doc, const std::vector<GridAxis>& axes, const std::string& out_flag,
                                  std::ostream* log) {
    auto points = expand_grid(axes);
    std::vector<ExperimentSpec> specs;
    for (const auto& p : points) {
        json d = doc;
        for (const auto& [key, value] : p)
            set_path(d, key, value);
        specs.push_back(parse_spec(d));
    }
    const fs::path base = output_root(out_flag, specs.front()) / specs.front().name;
    fs::create_directories(base);

    json grid = json::array();
    for (std::size_t i = 0; i < points.size(); ++i) {
        json values = json::object();
        for (const auto& [key, value] : points[i])
            values[key] = value;
        grid.push_back({{"point", i}, {"dir", "p" + std::to_string(i)}, {"values", values}});
    }
    {
        std::ofstream g(base / "grid.json");
        g << grid.dump(2) << '\n';
    }

    std::vector<RunOutcome> outcomes;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        for (std::uint64_t seed : specs[i].seeds) {
            RunOutcome o;
            o.point = i;
            o.seed = seed;
            o.dir = base / ("p" + std::to_string(i)) / ("seed-" + std::to_string(seed));
            try {
                run_experiment(specs[i], seed, o.dir);
            } catch (const NumericAbort& e) {
                o.status = RunStatus::Aborted;
                o.message = e.what();
            } catch (const std::exception& e) {
                o.status = RunStatus::Failed;
                o.message = e.what();
            }
            if (log)
                *log << "point " << i << " " << grid[i]["values"].dump() << " seed " << seed << ": "
                     << (o.status == RunStatus::Ok ? "ok" : o.status == RunStatus::Aborted ? "aborted" : "failed")
                     << (o.message.empty() ? "" : " (" + o.message + ")") << '\n';
            outcomes.push_back(std::move(o));
        }
    }

    static const char* metrics[] = {"ensemble_accuracy", "mean_member_accuracy", "ratio_error", "q_statistic",
                                    "agreement"};
    std::ofstream summary(base / "summary.csv");
    summary << "point";
    for (const auto& a : axes)
        summary << ',' << csv_cell(a.key);
    summary << ",runs,failed";
    for (const char* m : metrics)
        summary << ",median_" << m;
    summary << '\n';
    for (std::size_t i = 0; i < points.size(); ++i) {
        summary << i;
        for (const auto& [key, value] : points[i])
            summary << ',' << csv_cell(value);
        std::size_t ok = 0, failed = 0;
        std::map<std::string, std::vector<double>> values;
        for (const auto& o : outcomes) {
            if (o.point != i)
                continue;
            if (o.status != RunStatus::Ok) {
                ++failed;
                continue;
            }
            ++ok;
            json test = final_test(o.dir);
            for (const char* m : metrics)
                values[m].push_back(as_double(test.value(m, json())));
        }
        summary << ',' << ok << ',' << failed;
        for (const char* m : metrics)
            summary << ',' << csv_cell(median(values[m]));
        summary << '\n';
    }
    return outcomes;
}

// Report ----------------------------------------------------------------------

std::string csv_cell(const json& v) {
    if (v.is_null())
        return "";
    if (v.is_string()) {
        std::string s = v.get<std::string>();
        if (s.find_first_of(",\"\n") == std::string::npos)
            return s;
        std::string q = "\"";
        for (char ch : s) {
            if (ch == '"')
                q += '"';
            q += ch;
        }
        return q + "\"";
    }
    if (v.is_boolean())
        return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer() || v.is_number_unsigned())
        return v.dump();
    if (v.is_number_float()) {
        double d = v.get<double>();
        if (std::isnan(d))
            return "";
        if (std::isinf(d))
            return d > 0 ? "inf" : "-inf";
        return v.dump();
    }
    return "";
}

namespace {

struct RunRecord {
    fs::path dir;
    json spec;
    std::vector<json> epochs;
    std::optional<json> final_record;
    std::optional<json> abort_record;
};

std::vector<fs::path> find_runs(const std::vector<fs::path>& inputs) {
    std::vector<fs::path> runs;
    for (const auto& in : inputs) {
        if (!fs::exists(in))
            throw std::runtime_error("no such run directory: " + in.string());
        if (fs::exists(in / "metrics.jsonl")) {
            runs.push_back(in);
            continue;
        }
        for (const auto& e : fs::recursive_directory_iterator(in))
            if (e.is_regular_file() && e.path().filename() == "metrics.jsonl")
                runs.push_back(e.path().parent_path());
    }
    std::sort(runs.begin(), runs.end());
    runs.erase(std::unique(runs.begin(), runs.end()), runs.end());
    return runs;
}

RunRecord read_run(const fs::path& dir) {
    RunRecord r;
    r.dir = dir;
    std::ifstream s(dir / "spec.json");
    if (s)
        r.spec = json::parse(s);
    std::ifstream m(dir / "metrics.jsonl");
    std::string line;
    while (std::getline(m, line)) {
        if (line.empty())
            continue;
        json j = json::parse(line);
        std::string type = j.value("type", "");
        if (type == "epoch")
            r.epochs.push_back(std::move(j));
        else if (type == "final")
            r.final_record = std::move(j);
        else if (type == "abort")
            r.abort_record = std::move(j);
    }
    return r;
}

// Missing keys at any depth read as null.
json dig(const json& j, std::initializer_list<const char*> keys) {
    const json* node = &j;
    for (const char* k : keys) {
        if (!node->is_object() || !node->contains(k))
            return nullptr;
        node = &node->at(k);
    }
    return *node;
}

double final_delta(const json& spec) {
    json variant = dig(spec, {"variant"});
    if (!variant.is_string() || !has_redundancy(parse_variant(variant.get<std::string>())))
        return 0.0;
    json anchors = dig(spec, {"schedules", "delta", "anchors"});
    if (!anchors.is_array() || anchors.empty())
        return 0.0;
    return anchors.back()[1].get<double>();
}

double as_double(const json& v) {
    if (v.is_number())
        return v.get<double>();
    if (v.is_string()) {
        std::string s = v.get<std::string>();
        if (s == "inf")
            return kInf;
        if (s == "-inf")
            return -kInf;
    }
    return std::nan("");
}

json median(std::vector<double> v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
    if (v.empty())
        return nullptr;
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    double m = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    if (std::isinf(m))
        return m > 0 ? "inf" : "-inf";
    return m;
}

const std::vector<std::pair<std::string, std::vector<const char*>>>& test_columns() {
    static const std::vector<std::pair<std::string, std::vector<const char*>>> cols = {
        {"ensemble_accuracy", {"ensemble_accuracy"}},
        {"mean_member_accuracy", {"mean_member_accuracy"}},
        {"ratio_error", {"ratio_error"}},
        {"q_statistic", {"q_statistic"}},
        {"agreement", {"agreement"}},
        {"kw_variance", {"kw_variance"}},
        {"entropy_diversity", {"entropy_diversity"}},
        {"nll", {"before_ts", "nll"}},
        {"brier", {"before_ts", "brier"}},
        {"ece", {"before_ts", "ece"}},
        {"tace", {"before_ts", "tace"}},
        {"nll_ts", {"after_ts", "nll"}},
        {"brier_ts", {"after_ts", "brier"}},
        {"ece_ts", {"after_ts", "ece"}},
        {"tace_ts", {"after_ts", "tace"}},
        {"accuracy_ts", {"after_ts", "accuracy"}},
        {"temperature", {"temperature"}},
        {"ood_msp_auroc", {"ood_max_softmax", "auroc"}},
        {"ood_msp_aupr_in", {"ood_max_softmax", "aupr_in"}},
        {"ood_msp_aupr_out", {"ood_max_softmax", "aupr_out"}},
        {"ood_msp_fpr95", {"ood_max_softmax", "fpr_at_95_tpr"}},
        {"ood_msp_detection_error", {"ood_max_softmax", "detection_error"}},
        {"ood_dicew_auroc", {"ood_dice_w", "auroc"}},
        {"ood_dicew_aupr_in", {"ood_dice_w", "aupr_in"}},
        {"ood_dicew_aupr_out", {"ood_dice_w", "aupr_out"}},
        {"ood_dicew_fpr95", {"ood_dice_w", "fpr_at_95_tpr"}},
        {"ood_dicew_detection_error", {"ood_dice_w", "detection_error"}},
    };
    return cols;
}

json dig_path(const json& j, const std::vector<const char*>& path) {
    const json* node = &j;
    for (const char* k : path) {
        if (!node->is_object() || !node->contains(k))
            return nullptr;
        node = &node->at(k);
    }
    return *node;
}

json rescore_dice_w(const RunRecord& r) {
    ExperimentSpec spec = parse_spec(r.spec);
    if (!spec.ood || !fs::exists(r.dir / "checkpoint.bin"))
        return nullptr;
    const std::uint64_t seed = spec.seeds.front();
    PreparedData data = prepare_data(spec, seed);
    EnsembleModel model(spec.train.model, seed);
    load_checkpoint(r.dir / "checkpoint.bin", model);
    auto in = dice_times_w_confidence(model, data.test.inputs);
    auto out = dice_times_w_confidence(model, data.ood->inputs);
    OodScores s = ood_scores(in, out);
    return to_json(s);
}

void write_csv_row(std::ofstream& out, const std::vector<json>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i)
        out << (i ? "," : "") << csv_cell(cells[i]);
    out << '\n';
}

} // namespace

ReportOutput write_report(const std::vector<fs::path>& inputs, const fs::path& out, bool dice_w_scoring) {
    std::vector<RunRecord> runs;
    for (const auto& dir : find_runs(inputs))
        runs.push_back(read_run(dir));
    if (runs.empty())
        throw std::runtime_error("no run directories found");
    fs::create_directories(out);
    ReportOutput result;
    result.runs = runs.size();

    if (dice_w_scoring)
        for (auto& r : runs)
            if (r.final_record)
                if (json s = rescore_dice_w(r); !s.is_null())
                    (*r.final_record)["test"]["ood_dice_w"] = s;

    const auto& cols = test_columns();
    {
        fs::path p = out / "runs.csv";
        std::ofstream f(p);
        std::vector<json> header{"run", "name", "variant", "members", "seed", "delta", "epochs", "status"};
        for (const auto& c : cols)
            header.push_back(c.first);
        write_csv_row(f, header);
        for (const auto& r : runs) {
            const json test = r.final_record ? r.final_record->at("test") : json(nullptr);
            std::vector<json> row{r.dir.string(),
                                  dig(r.spec, {"name"}),
                                  dig(r.spec, {"variant"}),
                                  dig(r.spec, {"members"}),
                                  dig(r.spec, {"seeds"}).is_array() ? dig(r.spec, {"seeds"}).at(0) : json(nullptr),
                                  r.spec.is_null() ? json(nullptr) : json(final_delta(r.spec)),
                                  dig(r.spec, {"training", "epochs"}),
                                  json(r.final_record ? "ok" : (r.abort_record ? "aborted" : "incomplete"))};
            for (const auto& c : cols)
                row.push_back(dig_path(test, c.second));
            write_csv_row(f, row);
        }
        result.files.push_back(p);
    }
    {
        // One point per (variant, delta): medians over the completed runs.
        std::map<std::pair<std::string, double>, std::vector<const RunRecord*>> groups;
        for (const auto& r : runs)
            if (r.final_record)
                groups[{dig(r.spec, {"variant"}).get<std::string>(), final_delta(r.spec)}].push_back(&r);
        fs::path p = out / "tradeoff.csv";
        std::ofstream f(p);
        write_csv_row(f, {"variant", "delta", "runs", "mean_member_accuracy", "ratio_error", "ensemble_accuracy",
                          "q_statistic", "agreement"});
        for (const auto& [key, members] : groups) {
            std::vector<json> row{key.first, key.second, members.size()};
            for (const char* metric :
                 {"mean_member_accuracy", "ratio_error", "ensemble_accuracy", "q_statistic", "agreement"}) {
                std::vector<double> v;
                for (const RunRecord* r : members)
                    v.push_back(as_double(r->final_record->at("test").value(metric, json())));
                row.push_back(median(v));
            }
            write_csv_row(f, row);
        }
        result.files.push_back(p);
    }
    {
        fs::path p = out / "dynamics.csv";
        std::ofstream f(p);
        write_csv_row(f, {"run", "variant", "delta", "epoch", "mean_total", "mean_redundancy", "mean_disc_loss",
                          "mean_cr_estimate", "val_ensemble_accuracy", "val_mean_member_accuracy", "val_ratio_error",
                          "val_q_statistic"});
        for (const auto& r : runs)
            for (const auto& e : r.epochs)
                write_csv_row(f, {r.dir.string(), dig(r.spec, {"variant"}),
                                  r.spec.is_null() ? json(nullptr) : json(final_delta(r.spec)), e.at("epoch"),
                                  e.value("mean_total", json()), e.value("mean_redundancy", json()),
                                  e.value("mean_disc_loss", json()), e.value("mean_cr_estimate", json()),
                                  dig(e, {"validation", "ensemble_accuracy"}),
                                  dig(e, {"validation", "mean_member_accuracy"}), dig(e, {"validation", "ratio_error"}),
                                  dig(e, {"validation", "q_statistic"})});
        result.files.push_back(p);
    }
    return result;
}

} // namespace dice
