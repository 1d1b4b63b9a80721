#include "dice/training.hpp"

#include "dice/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dice {

using ad::Var;

namespace {

constexpr Variant kVariants[] = {Variant::Ind, Variant::IB, Variant::CEB, Variant::IBR, Variant::CEBR, Variant::DICE};

} // namespace

std::string_view to_string(Variant v) {
    switch (v) {
    case Variant::Ind: return "Ind";
    case Variant::IB: return "IB";
    case Variant::CEB: return "CEB";
    case Variant::IBR: return "IBR";
    case Variant::CEBR: return "CEBR";
    case Variant::DICE: return "DICE";
    }
    return "?";
}

Variant parse_variant(std::string_view name) {
    for (Variant v : kVariants) {
        if (to_string(v) == name)
            return v;
    }
    throw std::invalid_argument("unknown variant '" + std::string(name) + "'");
}

Bottleneck bottleneck_of(Variant v) {
    switch (v) {
    case Variant::Ind: return Bottleneck::None;
    case Variant::IB:
    case Variant::IBR: return Bottleneck::VIB;
    default: return Bottleneck::VCEB;
    }
}

bool has_redundancy(Variant v) { return v == Variant::IBR || v == Variant::CEBR || v == Variant::DICE; }

bool conditional_redundancy(Variant v) { return v == Variant::DICE; }

double default_delta_cr(std::size_t members) {
    static constexpr double table[] = {0.1, 0.15, 0.2, 0.22, 0.25};
    if (members < 2)
        return 0.0;
    return table[std::min<std::size_t>(members - 2, 4)];
}

void TrainConfig::validate() const {
    const auto& m = model;
    if (m.input_dim < 1 || m.feature_dim < 1 || m.num_classes < 2 || m.members < 1)
        throw std::invalid_argument("model needs input_dim, feature_dim >= 1, at least 2 classes and 1 member");
    if (batch_size < 1)
        throw std::invalid_argument("batch size must be positive");
    if (log_beta.empty() || delta.empty() || cov_ramp.empty() || optim.lr.empty())
        throw std::invalid_argument("schedules must not be empty");
    if (has_redundancy(variant)) {
        if (m.members < 2)
            throw std::invalid_argument("redundancy variants need at least two members");
        if (m.discriminator.conditional != conditional_redundancy(variant))
            throw std::invalid_argument("discriminator conditioning does not match the variant");
        cr.validate();
    }
    if (!(optim.momentum >= 0.0 && optim.momentum < 1.0))
        throw std::invalid_argument("momentum must lie in [0, 1)");
    if (!(optim.disc_lr > 0.0) || !(optim.disc_decay > 0.0 && optim.disc_decay < 1.0))
        throw std::invalid_argument("invalid discriminator optimizer settings");
}

namespace {

Schedule cifar_log_beta(std::size_t classes) {
    if (classes <= 10)
        return Schedule({{0.0, 100.0}, {5.0, 10.0}, {100.0, 2.0}}, Schedule::Mode::StepHold);
    return Schedule({{0.0, 100.0}, {8.0, 10.0}, {175.0, 2.0}, {250.0, 1.5}, {300.0, 1.0}}, Schedule::Mode::StepHold);
}

double variant_delta(Variant v, std::size_t members) {
    if (!has_redundancy(v))
        return 0.0;
    double d = default_delta_cr(members);
    return v == Variant::DICE ? d : 0.5 * d;
}

TrainConfig common(Variant v, std::size_t input_dim, std::size_t classes, std::size_t members) {
    TrainConfig c;
    c.variant = v;
    c.model.input_dim = input_dim;
    c.model.num_classes = classes;
    c.model.members = members;
    c.model.discriminator.conditional = conditional_redundancy(v);
    c.delta = Schedule::ramp(0.0, 80.0, 0.0, variant_delta(v, members));
    c.cov_ramp = Schedule::ramp(100.0, 250.0, 0.0, 1.0);
    c.log_beta = cifar_log_beta(classes);
    return c;
}

} // namespace

TrainConfig TrainConfig::desk(Variant v, std::size_t input_dim, std::size_t classes, std::size_t members,
                              std::size_t epochs) {
    TrainConfig c = common(v, input_dim, classes, members);
    c.model.hidden = 64;
    c.model.hidden_layers = 2;
    c.model.feature_dim = 16;
    c.model.discriminator.hidden = {64, 64, 32};
    c.model.discriminator.class_embedding = 16;
    c.cr.neg_per_pos = 2;
    c.epochs = epochs;
    c.batch_size = 32;
    double f = static_cast<double>(std::max<std::size_t>(epochs, 1)) / 300.0;
    c.log_beta = c.log_beta.rescaled(f);
    c.delta = c.delta.rescaled(f);
    c.cov_ramp = c.cov_ramp.rescaled(f);
    c.optim.lr = Schedule({{0.0, 0.05}, {150.0 * f, 0.005}, {225.0 * f, 0.0005}}, Schedule::Mode::StepHold);
    return c;
}

TrainConfig TrainConfig::paper(Variant v, std::size_t input_dim, std::size_t classes, std::size_t members) {
    TrainConfig c = common(v, input_dim, classes, members);
    c.model.hidden = 256;
    c.model.feature_dim = 64;
    c.model.discriminator = DiscriminatorConfig{};
    c.model.discriminator.conditional = conditional_redundancy(v);
    c.epochs = 300;
    c.batch_size = 128;
    std::vector<Schedule::Anchor> lr{{0.0, 0.1}, {150.0, 0.001}, {225.0, 0.0001}};
    if (classes > 10)
        lr.emplace_back(250.0, 0.00001);
    c.optim.lr = Schedule(std::move(lr), Schedule::Mode::StepHold);
    c.optim.disc_lr = classes > 10 ? 0.005 : 0.003;
    return c;
}

double training_position(std::size_t epoch, std::size_t batch_index, std::size_t batches) {
    if (batches == 0)
        return static_cast<double>(epoch);
    return static_cast<double>(epoch) + static_cast<double>(batch_index) / static_cast<double>(batches);
}

double beta_at(const TrainConfig& c, double position) {
    Bottleneck b = bottleneck_of(c.variant);
    if (b == Bottleneck::None)
        return kInf;
    double beta = std::exp(c.log_beta.value(position));
    return b == Bottleneck::VIB ? beta + 1.0 : beta;
}

ObjectiveNoise draw_objective_noise(const TrainConfig& c, std::size_t batch_rows, Rng& member_rng, Rng& cr_rng) {
    const std::size_t m = c.model.members, d = c.model.feature_dim;
    ObjectiveNoise n;
    for (std::size_t i = 0; i < m; ++i)
        n.bottleneck.push_back(member_rng.normal_tensor(batch_rows, d));
    if (has_redundancy(c.variant)) {
        n.redundancy.resize(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t k = 0; k < c.cr.num_s; ++k)
                n.redundancy[i].push_back(cr_rng.normal_tensor(batch_rows, d));
    }
    return n;
}

namespace {

struct RecordedObjective {
    std::vector<BottleneckTerms> bottleneck;
    std::vector<Var> pair_cr;
    Var redundancy;
    Var total;
    bool has_redundancy = false;
};

// Contiguous row ranges per pair in a pair-major triple batch.
std::vector<std::pair<std::size_t, std::size_t>> pair_ranges(const TripleBatch& b, std::size_t pairs) {
    std::vector<std::pair<std::size_t, std::size_t>> r(pairs, {0, 0});
    std::vector<std::size_t> count(pairs, 0);
    for (auto p : b.pair)
        ++count[p];
    std::size_t start = 0;
    for (std::size_t p = 0; p < pairs; ++p) {
        r[p] = {start, count[p]};
        start += count[p];
    }
    return r;
}

RecordedObjective record_objective(ad::Graph& g, const EnsembleModel& model, const Batch& batch, const TrainConfig& c,
                                   double position, const ObjectiveNoise& noise, const ClassMemoryBank* bank,
                                   Rng* bank_rng, Grad mode) {
    const std::size_t m = model.members();
    if (noise.bottleneck.size() != m)
        throw std::invalid_argument("one bottleneck draw per member required");
    RecordedObjective out;
    Var x = g.constant(batch.inputs);
    double beta = beta_at(c, position);
    Bottleneck kind = bottleneck_of(c.variant);
    std::vector<EncodedVars> enc;
    for (std::size_t i = 0; i < m; ++i) {
        enc.push_back(model.encode(g, i, x, mode));
        out.bottleneck.push_back(
            bottleneck_loss(g, model, i, enc.back(), batch.labels, beta, noise.bottleneck[i], kind, mode));
        out.total = i == 0 ? out.bottleneck.back().total : ad::add(out.total, out.bottleneck.back().total);
    }

    double delta = has_redundancy(c.variant) ? c.delta.value(position) : 0.0;
    if (delta == 0.0)
        return out;
    if (noise.redundancy.size() != m)
        throw std::invalid_argument("redundancy draws missing");

    double ramp = c.cov_ramp.value(position);
    MemberSamples features(m);
    for (std::size_t i = 0; i < m; ++i)
        for (const auto& eps : noise.redundancy[i])
            features[i].push_back(sample_features(enc[i].mean, enc[i].scale, eps, c.sampling, ramp, true));

    const std::size_t pairs = m * (m - 1) / 2;
    TripleBatch joint = sample_joint_batch(g, features, batch.labels, batch.ids);
    Var joint_logits = discriminator_logits(model, g, joint, Grad::Frozen);
    auto joint_rows = pair_ranges(joint, pairs);

    std::optional<TripleBatch> product;
    std::optional<Var> product_logits;
    std::vector<std::pair<std::size_t, std::size_t>> product_rows;
    if (c.cr.include_rhs) {
        if (bank == nullptr || bank_rng == nullptr)
            throw std::invalid_argument("the product term needs a memory bank");
        product = sample_product_batch(g, *bank, features, batch.labels, batch.ids, c.cr.neg_per_pos,
                                       conditional_redundancy(c.variant), *bank_rng);
        if (!product->empty()) {
            product_logits = discriminator_logits(model, g, *product, Grad::Frozen);
            product_rows = pair_ranges(*product, pairs);
        }
    }

    Var sum;
    for (std::size_t p = 0; p < pairs; ++p) {
        Var jl = ad::slice_rows(joint_logits, joint_rows[p].first, joint_rows[p].second);
        Var loss;
        if (product_logits && product_rows[p].second > 0) {
            Var pl = ad::slice_rows(*product_logits, product_rows[p].first, product_rows[p].second);
            loss = cr_member_loss(jl, &pl, c.cr.tau);
        } else {
            loss = cr_member_loss(jl, nullptr, c.cr.tau);
        }
        out.pair_cr.push_back(loss);
        sum = p == 0 ? loss : ad::add(sum, loss);
    }
    out.redundancy = ad::scale(sum, delta / static_cast<double>(m - 1));
    out.total = ad::add(out.total, out.redundancy);
    out.has_redundancy = true;
    return out;
}

ObjectiveTerms to_terms(const RecordedObjective& r) {
    ObjectiveTerms t;
    for (const auto& b : r.bottleneck) {
        t.kl.push_back(b.kl.value().item());
        t.ce.push_back(b.ce.value().item());
        t.bottleneck.push_back(b.total.value().item());
    }
    for (const auto& p : r.pair_cr)
        t.pair_cr.push_back(p.value().item());
    t.redundancy = r.has_redundancy ? r.redundancy.value().item() : 0.0;
    t.total = r.total.value().item();
    return t;
}

std::string describe(const StepReport& r) {
    std::ostringstream os;
    os << "non-finite loss at step " << r.step << " (position " << r.position << ", beta " << r.beta << ", delta "
       << r.delta << ")";
    return os.str();
}

} // namespace

ObjectiveTerms member_objective(const EnsembleModel& model, const Batch& batch, const TrainConfig& c, double position,
                                const ObjectiveNoise& noise, const ClassMemoryBank* bank, Rng* bank_rng) {
    if (batch.empty())
        throw std::invalid_argument("member objective on an empty batch");
    ad::Graph g;
    return to_terms(record_objective(g, model, batch, c, position, noise, bank, bank_rng, Grad::Frozen));
}

Trainer::Trainer(TrainConfig config)
    : config_(std::move(config)), model_((config_.validate(), config_.model), config_.seed),
      bank_(config_.model.members, config_.model.num_classes, config_.model.feature_dim),
      member_rng_(Rng::stream(config_.seed, Stream::MemberNoise)),
      cr_rng_(Rng::stream(config_.seed, Stream::RedundancyNoise)),
      bank_rng_(Rng::stream(config_.seed, Stream::BankSampling)) {}

StepReport Trainer::member_step(const Batch& batch, double position) {
    if (batch.empty())
        throw std::invalid_argument("training step on an empty batch");
    StepReport report;
    report.step = step_;
    report.position = position;
    report.beta = beta_at(config_, position);
    report.delta = has_redundancy(config_.variant) ? config_.delta.value(position) : 0.0;
    report.cov_ramp = config_.cov_ramp.value(position);

    last_noise_ = draw_objective_noise(config_, batch.size(), member_rng_, cr_rng_);
    ad::Graph g;
    auto rec = record_objective(g, model_, batch, config_, position, last_noise_, &bank_, &bank_rng_, Grad::Train);
    report.terms = to_terms(rec);
    if (!std::isfinite(report.terms.total))
        throw NumericAbort(describe(report), report);
    Gradients grads = [&] {
        try {
            return g.backward(rec.total, model_.member_params());
        } catch (const NumericError&) {
            throw NumericAbort(describe(report), report);
        }
    }();
    sgd_nesterov_step(model_.member_params(), grads, config_.optim.lr.value(position), config_.optim.momentum,
                      config_.optim.weight_decay);
    return report;
}

void Trainer::discriminator_steps(const Batch& batch, double position, StepReport& report) {
    if (!has_redundancy(config_.variant))
        return;
    const std::size_t m = config_.model.members, d = config_.model.feature_dim;
    std::vector<Tensor> means, scales;
    {
        ad::Graph g;
        Var x = g.constant(batch.inputs);
        for (std::size_t i = 0; i < m; ++i) {
            auto enc = model_.encode(g, i, x, Grad::Frozen);
            means.push_back(enc.mean.value());
            scales.push_back(enc.scale.value());
        }
    }
    double ramp = config_.cov_ramp.value(position);
    bool conditional = conditional_redundancy(config_.variant);
    for (std::size_t t = 0; t < config_.cr.nstep_d; ++t) {
        ad::Graph g;
        MemberSamples features(m);
        for (std::size_t i = 0; i < m; ++i) {
            Var mean = g.constant(means[i]), scale = g.constant(scales[i]);
            for (std::size_t k = 0; k < config_.cr.num_s; ++k)
                features[i].push_back(sample_features(mean, scale, cr_rng_.normal_tensor(batch.size(), d),
                                                      config_.sampling, ramp, true));
        }
        TripleBatch joint = sample_joint_batch(g, features, batch.labels, batch.ids);
        TripleBatch product = sample_product_batch(g, bank_, features, batch.labels, batch.ids,
                                                   config_.cr.neg_per_pos, conditional, bank_rng_);
        report.skipped_product += product.skipped;
        if (product.empty())
            continue;
        Var jl = discriminator_logits(model_, g, joint, Grad::Train);
        Var pl = discriminator_logits(model_, g, product, Grad::Train);
        Var loss = discriminator_loss(jl, pl);
        report.disc_loss = loss.value().item();
        report.cr_estimate = cr_estimate(ad::stop_gradient(jl), ad::stop_gradient(pl), config_.cr.tau).value().item();
        Gradients grads = [&] {
            try {
                return g.backward(loss, model_.disc_params());
            } catch (const NumericError&) {
                throw NumericAbort(describe(report), report);
            }
        }();
        rmsprop_step(model_.disc_params(), grads, config_.optim.disc_lr, config_.optim.disc_decay);
        ++report.disc_steps;
    }
}

void Trainer::update_bank(const Batch& batch, double position) {
    if (!has_redundancy(config_.variant))
        return;
    const std::size_t m = config_.model.members, d = config_.model.feature_dim;
    ad::Graph g;
    Var x = g.constant(batch.inputs);
    double ramp = config_.cov_ramp.value(position);
    for (std::size_t i = 0; i < m; ++i) {
        auto enc = model_.encode(g, i, x, Grad::Frozen);
        Var z = sample_features(enc.mean, enc.scale, cr_rng_.normal_tensor(batch.size(), d), config_.sampling, ramp,
                                true);
        for (std::size_t n = 0; n < batch.size(); ++n)
            bank_.push(i, batch.labels[n], z.value().row_span(n), batch.ids[n]);
    }
}

StepReport Trainer::train_step(const Batch& batch, double position) {
    StepReport report = member_step(batch, position);
    discriminator_steps(batch, position, report);
    update_bank(batch, position);
    ++step_;
    return report;
}

RunResult train_run(const TrainConfig& config, const Dataset& train, const Dataset& val,
                    const RunCallbacks& callbacks, const ReportOptions& eval) {
    if (train.size() == 0 && config.epochs > 0)
        throw std::invalid_argument("empty training split");
    Trainer trainer(config);
    Rng shuffle = Rng::stream(config.seed, Stream::Shuffle);
    std::vector<EpochReport> history;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t batches = (train.size() + config.batch_size - 1) / config.batch_size;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.index(i)]);
        EpochReport er;
        er.epoch = epoch;
        double disc_sum = 0.0, est_sum = 0.0;
        std::size_t disc_n = 0;
        for (std::size_t b = 0; b < batches; ++b) {
            std::size_t start = b * config.batch_size;
            std::size_t len = std::min(config.batch_size, order.size() - start);
            Batch batch = train.batch(std::span<const std::size_t>(order.data() + start, len));
            StepReport r = trainer.train_step(batch, training_position(epoch, b, batches));
            er.mean_total += r.terms.total / static_cast<double>(batches);
            er.mean_redundancy += r.terms.redundancy / static_cast<double>(batches);
            if (r.disc_loss) {
                disc_sum += *r.disc_loss;
                est_sum += *r.cr_estimate;
                ++disc_n;
            }
            if (callbacks.on_step)
                callbacks.on_step(r);
        }
        if (disc_n > 0) {
            er.mean_disc_loss = disc_sum / static_cast<double>(disc_n);
            er.mean_cr_estimate = est_sum / static_cast<double>(disc_n);
        }
        if (val.size() > 0)
            er.validation = evaluate(trainer.model(), val.inputs, val.labels, nullptr, eval);
        if (callbacks.on_epoch)
            callbacks.on_epoch(er);
        history.push_back(std::move(er));
    }
    return RunResult{trainer.model(), std::move(history)};
}

} // namespace dice
