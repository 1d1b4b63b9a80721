#include "dice/training.hpp"

#include <doctest.h>

#include <cmath>

using namespace dice;

namespace {

TrainConfig small(Variant v, std::size_t members = 2, std::size_t epochs = 2) {
    TrainConfig c = TrainConfig::desk(v, 5, 3, members, epochs);
    c.model.hidden = 8;
    c.model.feature_dim = 3;
    c.model.discriminator.hidden = {8, 6};
    c.model.discriminator.class_embedding = 4;
    c.cr.num_s = 2;
    c.cr.nstep_d = 2;
    c.batch_size = 8;
    c.seed = 17;
    return c;
}

Dataset blobs(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d{rng.normal_tensor(n, 5), {}};
    for (std::size_t i = 0; i < n; ++i) {
        int y = static_cast<int>(i % 3);
        d.labels.push_back(y);
        d.inputs(i, static_cast<std::size_t>(y)) += 2.0;
    }
    return d;
}

Batch rows(const Dataset& d, std::size_t start, std::size_t count) {
    std::vector<std::size_t> r(count);
    for (std::size_t i = 0; i < count; ++i)
        r[i] = start + i;
    return d.batch(r);
}

} // namespace

TEST_SUITE("schedule") {

TEST_CASE("anchor values and step hold") {
    Schedule s({{0.0, 100.0}, {5.0, 10.0}, {100.0, 2.0}}, Schedule::Mode::StepHold);
    CHECK(s.value(0.0) == 100.0);
    CHECK(s.value(5.0) == 10.0);
    CHECK(s.value(4.999) == 100.0);
    CHECK(s.value(50.0) == 10.0);
    CHECK(s.value(1e6) == 2.0);
    Schedule h({{0.0, 1.0}, {10.0, 3.0}}, Schedule::Mode::StepHold);
    CHECK(h.value(5.0) == 1.0);
}

TEST_CASE("linear ramp") {
    Schedule r = Schedule::ramp(0.0, 80.0, 0.0, 0.2);
    CHECK(r.value(40.0) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(r.value(80.0) == 0.2);
    CHECK(r.value(300.0) == 0.2);
    Schedule late = Schedule::ramp(100.0, 250.0, 0.0, 1.0);
    CHECK(late.value(50.0) == 0.0);
    CHECK(late.value(175.0) == doctest::Approx(0.5));
}

TEST_CASE("invalid schedules") {
    CHECK_THROWS(Schedule({}, Schedule::Mode::Linear));
    CHECK_THROWS(Schedule({{1.0, 0.0}, {1.0, 2.0}}, Schedule::Mode::Linear));
    CHECK_THROWS(Schedule::constant(1.0).value(-1.0));
}

TEST_CASE("rescaling positions and values") {
    Schedule r = Schedule::ramp(0.0, 80.0, 0.0, 0.2).rescaled(0.1);
    CHECK(r.value(4.0) == doctest::Approx(0.1));
    CHECK(r.scaled_values(-1.0).value(8.0) == doctest::Approx(-0.2));
}

} // TEST_SUITE

TEST_SUITE("training") {

TEST_CASE("variant lattice") {
    CHECK(bottleneck_of(Variant::Ind) == Bottleneck::None);
    CHECK(bottleneck_of(Variant::IBR) == Bottleneck::VIB);
    CHECK(bottleneck_of(Variant::DICE) == Bottleneck::VCEB);
    CHECK(has_redundancy(Variant::CEBR));
    CHECK_FALSE(has_redundancy(Variant::CEB));
    CHECK(conditional_redundancy(Variant::DICE));
    CHECK_FALSE(conditional_redundancy(Variant::IBR));
    CHECK(parse_variant("CEBR") == Variant::CEBR);
    CHECK_THROWS(parse_variant("dice"));
}

TEST_CASE("beta per variant") {
    TrainConfig c = small(Variant::CEB);
    c.log_beta = Schedule::constant(std::log(4.0));
    CHECK(beta_at(c, 0.0) == doctest::Approx(4.0));
    c.variant = Variant::IB;
    CHECK(beta_at(c, 0.0) == doctest::Approx(5.0));
    c.variant = Variant::Ind;
    CHECK(std::isinf(beta_at(c, 0.0)));
}

TEST_CASE("published redundancy coefficients") {
    CHECK(default_delta_cr(2) == 0.1);
    CHECK(default_delta_cr(4) == 0.2);
    CHECK(default_delta_cr(6) == 0.25);
    CHECK(small(Variant::CEBR, 4).delta.anchors().back().second == doctest::Approx(0.1));
}

TEST_CASE("config validation") {
    TrainConfig c = small(Variant::DICE);
    c.model.discriminator.conditional = false;
    CHECK_THROWS(c.validate());
    TrainConfig one = small(Variant::DICE, 1);
    CHECK_THROWS(one.validate());
    CHECK_NOTHROW(small(Variant::IBR).validate());
}

TEST_CASE("Ind skips the redundancy steps") {
    Dataset d = blobs(24, 1);
    Trainer t(small(Variant::Ind));
    auto r = t.train_step(rows(d, 0, 8), 0.0);
    CHECK(r.disc_steps == 0);
    CHECK_FALSE(r.disc_loss.has_value());
    CHECK(t.bank().stored_scalars() == 0);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(r.terms.kl[i] == 0.0);
        CHECK(r.terms.bottleneck[i] == r.terms.ce[i]);
    }
}

TEST_CASE("zero redundancy coefficient reproduces the bottleneck-only trajectory") {
    Dataset d = blobs(40, 2);
    auto pairs = {std::pair{Variant::DICE, Variant::CEB}, std::pair{Variant::CEBR, Variant::CEB},
                  std::pair{Variant::IBR, Variant::IB}};
    for (auto [with, without] : pairs) {
        TrainConfig a = small(with, 3), b = small(without, 3);
        a.delta = Schedule::constant(0.0);
        Trainer ta(a), tb(b);
        for (std::size_t step = 0; step < 10; ++step) {
            Batch batch = rows(d, (step % 5) * 8, 8);
            double pos = 0.1 * static_cast<double>(step);
            ta.train_step(batch, pos);
            tb.train_step(batch, pos);
            REQUIRE(ta.model().member_params().values_bit_equal(tb.model().member_params()));
        }
        CHECK(ta.bank().stored_scalars() > 0);
    }
}

TEST_CASE("the first ramp step matches CEB bit for bit") {
    Dataset d = blobs(16, 3);
    Trainer ta(small(Variant::DICE)), tb(small(Variant::CEB));
    ta.train_step(rows(d, 0, 8), 0.0);
    tb.train_step(rows(d, 0, 8), 0.0);
    CHECK(ta.model().member_params().values_bit_equal(tb.model().member_params()));
}

namespace {

double hand_objective(const EnsembleModel& m, const Batch& b, const TrainConfig& c, double pos,
                      const ObjectiveNoise& noise) {
    const double beta = beta_at(c, pos);
    double total = 0.0;
    for (std::size_t i = 0; i < m.members(); ++i)
        total += vceb_loss(m, i, b, beta, noise.bottleneck[i]);
    const double ramp = c.cov_ramp.value(pos);
    double pair_sum = 0.0;
    for (auto [i, j] : member_pairs(m.members())) {
        std::vector<double> w;
        for (std::size_t k = 0; k < c.cr.num_s; ++k)
            for (std::size_t n = 0; n < b.size(); ++n) {
                auto fi = m.encode(i, b.inputs.row_span(n)), fj = m.encode(j, b.inputs.row_span(n));
                auto zi = sample_features(fi, noise.redundancy[i][k].row_span(n), c.sampling, ramp);
                auto zj = sample_features(fj, noise.redundancy[j][k].row_span(n), c.sampling, ramp);
                w.push_back(m.discriminate(i, zi, j, zj, b.labels[n]));
            }
        pair_sum += cr_member_loss(w, {}, c.cr.tau, false);
    }
    return total + c.delta.value(pos) / static_cast<double>(m.members() - 1) * pair_sum;
}

} // namespace

TEST_CASE("member objective matches the hand-composed loss") {
    Dataset d = blobs(12, 4);
    for (ScaleMode mode : {ScaleMode::Unit, ScaleMode::Predicted, ScaleMode::Ramped}) {
        for (std::size_t members : {2, 3}) {
            TrainConfig c = small(Variant::DICE, members, 30);
            c.sampling = mode;
            EnsembleModel model(c.model, 5);
            Batch b = rows(d, 2, 6);
            Rng mr(1), cr(2);
            auto noise = draw_objective_noise(c, b.size(), mr, cr);
            const double pos = 20.0;
            auto terms = member_objective(model, b, c, pos, noise);
            double hand = hand_objective(model, b, c, pos, noise);
            CHECK(std::abs(terms.total - hand) < 1e-12);
            CHECK(terms.pair_cr.size() == members * (members - 1) / 2);
        }
    }
}

TEST_CASE("discriminator steps leave members untouched and vice versa") {
    Dataset d = blobs(48, 5);
    TrainConfig c = small(Variant::DICE, 3);
    c.delta = Schedule::constant(0.5);
    c.cr.include_rhs = true;
    Trainer t(c);
    for (std::size_t s = 0; s < 3; ++s)
        t.train_step(rows(d, s * 8, 8), 0.5);
    Batch b = rows(d, 24, 8);

    ParamSet members = t.model().member_params(), disc = t.model().disc_params();
    StepReport report;
    t.discriminator_steps(b, 0.5, report);
    CHECK(report.disc_steps == 2);
    CHECK(t.model().member_params().values_bit_equal(members));
    CHECK_FALSE(t.model().disc_params().values_bit_equal(disc));

    members = t.model().member_params();
    disc = t.model().disc_params();
    auto r = t.member_step(b, 0.5);
    CHECK(r.terms.redundancy != 0.0);
    CHECK(t.model().disc_params().values_bit_equal(disc));
    CHECK_FALSE(t.model().member_params().values_bit_equal(members));
}

namespace {

// Gradient of the redundancy term alone with respect to the member parameters.
Gradients redundancy_gradient(const EnsembleModel& model, const Batch& b, const TrainConfig& c,
                              const ClassMemoryBank* bank) {
    ad::Graph g;
    Rng rng(9), bank_rng(10);
    auto x = g.constant(b.inputs);
    MemberSamples f(model.members());
    for (std::size_t i = 0; i < model.members(); ++i) {
        auto enc = model.encode(g, i, x, Grad::Train);
        for (std::size_t k = 0; k < c.cr.num_s; ++k)
            f[i].push_back(sample_features(enc.mean, enc.scale, rng.normal_tensor(b.size(), c.model.feature_dim),
                                           ScaleMode::Predicted, 1.0, true));
    }
    auto joint = sample_joint_batch(g, f, b.labels, b.ids);
    auto jl = discriminator_logits(model, g, joint, Grad::Frozen);
    ad::Var loss;
    if (bank) {
        auto product = sample_product_batch(g, *bank, f, b.labels, b.ids, 2, true, bank_rng);
        REQUIRE_FALSE(product.empty());
        auto pl = discriminator_logits(model, g, product, Grad::Frozen);
        loss = cr_member_loss(jl, &pl, c.cr.tau);
    } else {
        loss = cr_member_loss(jl, nullptr, c.cr.tau);
    }
    return g.backward(loss, model.member_params());
}

} // namespace

TEST_CASE("redundancy gradients never reach the scale head") {
    Dataset d = blobs(32, 6);
    TrainConfig c = small(Variant::DICE, 3);
    c.delta = Schedule::constant(0.5);
    Trainer t(c);
    for (std::size_t s = 0; s < 3; ++s)
        t.train_step(rows(d, s * 8, 8), 0.5);
    Batch b = rows(d, 24, 8);
    for (const ClassMemoryBank* bank : {static_cast<const ClassMemoryBank*>(nullptr), &t.bank()}) {
        Gradients g = redundancy_gradient(t.model(), b, c, bank);
        const ParamSet& ps = t.model().member_params();
        bool mean_moves = false;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (ps.at(i).name.find("/scale/") != std::string::npos)
                CHECK(g[i].mat().isZero(0.0));
            if (ps.at(i).name.find("/mean/") != std::string::npos && !g[i].mat().isZero(0.0))
                mean_moves = true;
        }
        CHECK(mean_moves);
    }
}

TEST_CASE("a constant discriminator exerts no force on the members") {
    Dataset d = blobs(8, 7);
    TrainConfig c = small(Variant::DICE, 2);
    EnsembleModel model(c.model, 3);
    for (auto& p : model.disc_params())
        p.value.mat().setZero();
    Gradients g = redundancy_gradient(model, d.all(), c, nullptr);
    for (std::size_t i = 0; i < g.size(); ++i)
        CHECK(g[i].mat().isZero(0.0));
}

TEST_CASE("zero epochs return the initialization") {
    TrainConfig c = small(Variant::DICE);
    c.epochs = 0;
    Dataset d = blobs(16, 8);
    auto r = train_run(c, d, d);
    EnsembleModel init(c.model, c.seed);
    CHECK(r.model.member_params().values_bit_equal(init.member_params()));
    CHECK(r.model.disc_params().values_bit_equal(init.disc_params()));
    CHECK(r.epochs.empty());
}

TEST_CASE("runs are deterministic given the seed") {
    TrainConfig c = small(Variant::DICE, 2, 3);
    Dataset train = blobs(30, 9), val = blobs(12, 10);
    std::vector<double> totals[2];
    EnsembleModel* models[2] = {nullptr, nullptr};
    std::optional<RunResult> runs[2];
    for (int k = 0; k < 2; ++k) {
        runs[k] = train_run(c, train, val, {.on_step = [&](const StepReport& s) { totals[k].push_back(s.terms.total); }});
        models[k] = &runs[k]->model;
    }
    CHECK(totals[0] == totals[1]);
    CHECK(totals[0].size() == 3 * 4);
    CHECK(models[0]->member_params().values_bit_equal(models[1]->member_params()));
    CHECK(runs[0]->epochs.back().validation->ensemble_accuracy ==
          runs[1]->epochs.back().validation->ensemble_accuracy);
}

TEST_CASE("non-finite losses abort with a snapshot") {
    Dataset d = blobs(8, 11);
    d.inputs(3, 1) = std::numeric_limits<double>::infinity();
    Trainer t(small(Variant::DICE));
    try {
        t.train_step(d.all(), 0.25);
        FAIL("expected an abort");
    } catch (const NumericAbort& e) {
        CHECK(e.snapshot.step == 0);
        CHECK(e.snapshot.position == 0.25);
    }
}

} // TEST_SUITE
