#include "dice/oracles.hpp"

#include "dice/losses.hpp"
#include "dice/metrics.hpp"
#include "dice/random.hpp"
#include "dice/redundancy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

namespace dice::oracle {

namespace {

using ad::Var;

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

bool close(double a, double b, double tol) {
    if (std::isinf(a) || std::isinf(b))
        return a == b;
    return std::abs(a - b) <= tol * std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

ModelConfig tiny_config(std::size_t members) {
    ModelConfig c;
    c.input_dim = 3;
    c.hidden = 4;
    c.hidden_layers = 1;
    c.feature_dim = 2;
    c.num_classes = 3;
    c.members = members;
    c.discriminator.hidden = {5, 4};
    c.discriminator.class_embedding = 3;
    return c;
}

Batch random_batch(Rng& rng, std::size_t rows, std::size_t dim, std::size_t classes) {
    Batch b;
    b.inputs = rng.normal_tensor(rows, dim);
    for (std::size_t n = 0; n < rows; ++n) {
        b.labels.push_back(static_cast<int>(n % classes));
        b.ids.push_back(n);
    }
    return b;
}

// Compares autodiff against finite differences for `build` over `params`.
double gradient_error(const std::function<Var(ad::Graph&, Grad)>& build, ParamSet& params) {
    ad::Graph g;
    Var loss = build(g, Grad::Train);
    Gradients grads = g.backward(loss, params);
    std::vector<Tensor> analytic;
    for (std::size_t i = 0; i < grads.size(); ++i)
        analytic.push_back(grads[i]);
    auto numeric = finite_difference(
        [&] {
            ad::Graph h;
            return build(h, Grad::Frozen).value().item();
        },
        params);
    return relative_error(analytic, numeric);
}

} // namespace

CheckResult check_gradients(std::uint64_t seed, double tolerance) {
    CheckResult r{"gradients", true, ""};
    double worst = 0.0;
    std::string worst_name;
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
        Rng rng(seed * 31 + trial);
        EnsembleModel model(tiny_config(3), seed + trial);
        const std::size_t m = model.members(), d = model.config().feature_dim;
        Batch batch = random_batch(rng, 6, 3, 3);
        std::vector<Tensor> noise;
        for (std::size_t i = 0; i < m; ++i)
            noise.push_back(rng.normal_tensor(batch.size(), d));

        ClassMemoryBank bank(m, 3, d);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t n = 0; n < 9; ++n) {
                auto z = rng.normal_tensor(1, d);
                bank.push(i, static_cast<int>(n % 3), z.values(), 100 + n);
            }
        const Rng bank_rng = rng;

        auto bottleneck = [&](Bottleneck kind) {
            return [&, kind](ad::Graph& g, Grad mode) {
                Var x = g.constant(batch.inputs);
                Var total;
                for (std::size_t i = 0; i < m; ++i) {
                    auto enc = model.encode(g, i, x, mode);
                    Var t = bottleneck_loss(g, model, i, enc, batch.labels, 2.5, noise[i], kind, mode).total;
                    total = i == 0 ? t : ad::add(total, t);
                }
                return total;
            };
        };
        auto redundancy = [&](bool rhs, Grad disc_mode) {
            return [&, rhs, disc_mode](ad::Graph& g, Grad mode) {
                Grad member_mode = disc_mode == Grad::Train ? Grad::Frozen : mode;
                Grad dmode = disc_mode == Grad::Train ? mode : Grad::Frozen;
                Var x = g.constant(batch.inputs);
                MemberSamples features(m);
                for (std::size_t i = 0; i < m; ++i) {
                    auto enc = model.encode(g, i, x, member_mode);
                    features[i].push_back(sample_features(enc.mean, enc.scale, noise[i], ScaleMode::Unit, 1.0, true));
                }
                TripleBatch joint = sample_joint_batch(g, features, batch.labels, batch.ids);
                Var jl = model.discriminate_logits(g, joint.input, joint.labels, dmode);
                Rng br = bank_rng;
                TripleBatch product = sample_product_batch(g, bank, features, batch.labels, batch.ids, 2, true, br);
                Var pl = model.discriminate_logits(g, product.input, product.labels, dmode);
                if (disc_mode == Grad::Train)
                    return discriminator_loss(jl, pl);
                return cr_member_loss(jl, rhs ? &pl : nullptr, 10.0);
            };
        };

        struct Case {
            const char* name;
            std::function<Var(ad::Graph&, Grad)> build;
            ParamSet* params;
        };
        Case cases[] = {
            {"cross-entropy", bottleneck(Bottleneck::None), &model.member_params()},
            {"VIB", bottleneck(Bottleneck::VIB), &model.member_params()},
            {"VCEB", bottleneck(Bottleneck::VCEB), &model.member_params()},
            {"cr_member_loss", redundancy(false, Grad::Frozen), &model.member_params()},
            {"cr_member_loss+rhs", redundancy(true, Grad::Frozen), &model.member_params()},
            {"discriminator_loss", redundancy(false, Grad::Train), &model.disc_params()},
        };
        for (auto& c : cases) {
            double err = gradient_error(c.build, *c.params);
            if (!(err < tolerance))
                r.pass = false;
            if (!(err <= worst)) {
                worst = err;
                worst_name = c.name;
            }
        }
    }
    r.detail = "worst relative error " + fmt(worst) + " (" + worst_name + ")";
    return r;
}

CheckResult check_kl_monte_carlo(std::uint64_t seed, std::size_t pairs, std::size_t samples, double sigmas) {
    CheckResult r{"kl_monte_carlo", true, ""};
    Rng rng(seed);
    double worst = 0.0;
    const std::size_t d = 3;
    for (std::size_t p = 0; p < pairs; ++p) {
        GaussianFeatures g;
        std::vector<double> b;
        for (std::size_t k = 0; k < d; ++k) {
            g.mean.push_back(rng.normal());
            g.scale.push_back(0.5 + 1.5 * rng.uniform());
            b.push_back(rng.normal());
        }
        double exact = kl_diag_gaussian_to_unit_class(g, b);
        auto mc = mc_kl(g.mean, g.scale, b, samples, seed * 1000 + p);
        double z = std::abs(exact - mc.mean) / mc.std_error;
        worst = std::max(worst, z);
        if (!(z <= sigmas))
            r.pass = false;
    }
    GaussianFeatures unit{{0.3, -1.2, 2.0}, {1.0, 1.0, 1.0}};
    double at_identity = kl_diag_gaussian_to_unit_class(unit, unit.mean);
    if (at_identity != 0.0)
        r.pass = false;
    r.detail = "worst deviation " + fmt(worst) + " standard errors; KL at identity " + fmt(at_identity);
    return r;
}

CheckResult check_discrete_cmi(std::uint64_t seed, std::size_t distributions, double tolerance) {
    CheckResult r{"discrete_cmi", true, ""};
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t t = 0; t < distributions; ++t) {
        const std::size_t classes = 2 + t % 2;
        std::vector<std::vector<std::vector<long>>> n(2, std::vector<std::vector<long>>(2, std::vector<long>(classes)));
        std::vector<std::vector<std::vector<double>>> p(2, std::vector<std::vector<double>>(2, std::vector<double>(classes)));
        long total = 0;
        for (auto& a : n)
            for (auto& b : a)
                for (auto& c : b) {
                    c = 1 + static_cast<long>(rng.index(9));
                    total += c;
                }
        std::vector<long> ny(classes, 0);
        std::vector<std::vector<long>> n1(2, std::vector<long>(classes, 0)), n2 = n1;
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j)
                for (std::size_t y = 0; y < classes; ++y) {
                    p[i][j][y] = static_cast<double>(n[i][j][y]) / static_cast<double>(total);
                    ny[y] += n[i][j][y];
                    n1[i][y] += n[i][j][y];
                    n2[j][y] += n[i][j][y];
                }
        long l = 1;
        for (long v : ny)
            l = std::lcm(l, v);

        // Triples with exact multiplicities; the discriminator is the true ratio.
        std::vector<double> joint_w, product_w, joint_logit, product_logit;
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j)
                for (std::size_t y = 0; y < classes; ++y) {
                    double f = static_cast<double>(n[i][j][y]) * static_cast<double>(ny[y]) /
                               (static_cast<double>(n1[i][y]) * static_cast<double>(n2[j][y]));
                    double w = f / (1.0 + f);
                    for (long k = 0; k < n[i][j][y]; ++k) {
                        joint_w.push_back(w);
                        joint_logit.push_back(std::log(f));
                    }
                    long prod = n1[i][y] * n2[j][y] * (l / ny[y]);
                    for (long k = 0; k < prod; ++k) {
                        product_w.push_back(w);
                        product_logit.push_back(std::log(f));
                    }
                }
        double expected = enumerated_cmi(p);
        double from_w = cr_estimate(joint_w, product_w, kInf);
        ad::Graph g;
        Var jl = g.constant(Tensor::from({joint_logit.size(), 1}, joint_logit));
        Var pl = g.constant(Tensor::from({product_logit.size(), 1}, product_logit));
        double from_logits = cr_estimate(jl, pl, kInf).value().item();
        double err = std::max(std::abs(from_w - expected), std::abs(from_logits - expected));
        worst = std::max(worst, err);
        if (!(err < tolerance))
            r.pass = false;
    }
    r.detail = "worst absolute error " + fmt(worst) + " nats";
    return r;
}

CheckResult check_bvc_identity(std::uint64_t seed, std::size_t ensembles, double tolerance) {
    CheckResult r{"bvc_identity", true, ""};
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t e = 0; e < ensembles; ++e) {
        std::size_t reps = 2 + rng.index(30), m = 1 + rng.index(6);
        Tensor out = rng.normal_tensor(reps, m);
        // correlated members around a shared offset
        for (std::size_t s = 0; s < reps; ++s) {
            double shared = rng.normal();
            for (std::size_t i = 0; i < m; ++i)
                out(s, i) += 0.7 * shared + 0.3 * static_cast<double>(i);
        }
        double target = rng.normal();
        auto t = bvc_decomposition(out, target);
        double direct = 0.0;
        for (std::size_t s = 0; s < reps; ++s) {
            double avg = 0.0;
            for (std::size_t i = 0; i < m; ++i)
                avg += out(s, i);
            avg /= static_cast<double>(m);
            direct += (avg - target) * (avg - target);
        }
        direct /= static_cast<double>(reps);
        double scale = std::max(std::abs(direct), 1e-300);
        double err = std::max(std::abs(t.lhs - t.rhs), std::abs(direct - t.rhs)) / scale;
        worst = std::max(worst, err);
        if (!(err < tolerance))
            r.pass = false;
    }
    r.detail = "worst relative gap " + fmt(worst);
    return r;
}

CheckResult check_ood_sweeps(std::uint64_t seed, std::size_t sets, double tolerance) {
    CheckResult r{"ood_sweeps", true, ""};
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t s = 0; s < sets; ++s) {
        std::size_t ni = 1 + rng.index(40), no = 1 + rng.index(40);
        bool ties = s % 2 == 0;
        auto draw = [&](double shift) {
            double v = rng.normal() + shift;
            return ties ? std::round(v * 4.0) / 4.0 : v;
        };
        std::vector<double> in, out;
        for (std::size_t i = 0; i < ni; ++i)
            in.push_back(draw(0.8));
        for (std::size_t i = 0; i < no; ++i)
            out.push_back(draw(0.0));
        auto a = ood_scores(in, out);
        auto b = brute_force_sweep(in, out);
        double err = std::max({std::abs(a.auroc - b.auroc), std::abs(a.aupr_in - b.aupr_in),
                               std::abs(a.aupr_out - b.aupr_out), std::abs(a.fpr_at_95_tpr - b.fpr_at_95_tpr),
                               std::abs(a.detection_error - b.detection_error)});
        worst = std::max(worst, err);
        if (!(err <= tolerance))
            r.pass = false;
    }
    r.detail = "worst absolute difference " + fmt(worst);
    return r;
}

CheckResult check_diversity(std::uint64_t seed, std::size_t matrices, double tolerance) {
    CheckResult r{"diversity_enumeration", true, ""};
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t t = 0; t < matrices; ++t) {
        std::size_t m = 2 + rng.index(4), n = 1 + rng.index(30), k = 2 + rng.index(3);
        std::vector<int> labels(n);
        for (int& y : labels)
            y = static_cast<int>(rng.index(k));
        std::vector<std::vector<int>> pred(m, std::vector<int>(n));
        for (auto& p : pred)
            for (std::size_t i = 0; i < n; ++i)
                p[i] = rng.uniform() < 0.6 ? labels[i] : static_cast<int>(rng.index(k));
        auto pm = PredictionMatrix::from_predictions(pred, labels);
        auto o = enumerate_diversity(pred, labels);
        double got[] = {ratio_error(pm), q_statistic(pm), agreement(pm), kohavi_wolpert_variance(pm),
                        entropy_diversity(pm)};
        double want[] = {o.ratio_error, o.q_statistic, o.agreement, o.kw_variance, o.entropy};
        for (std::size_t i = 0; i < 5; ++i) {
            if (!close(got[i], want[i], tolerance)) {
                r.pass = false;
                worst = std::max(worst, std::isinf(got[i]) || std::isinf(want[i]) ? kInf : std::abs(got[i] - want[i]));
            } else if (!std::isinf(got[i])) {
                worst = std::max(worst, std::abs(got[i] - want[i]));
            }
        }
    }
    r.detail = "worst absolute difference " + fmt(worst);
    return r;
}

CheckResult check_calibration(std::uint64_t seed, std::size_t sets) {
    CheckResult r{"calibration", true, ""};
    Rng rng(seed);
    double worst_ece = 0.0, worst_t = 0.0;
    for (std::size_t s = 0; s < sets; ++s) {
        std::size_t n = 20 + rng.index(200), k = 2 + rng.index(4);
        Tensor logits = rng.normal_tensor(n, k);
        double sharp = 0.5 + 3.0 * rng.uniform();
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j)
                logits(i, j) *= sharp;
            auto p = softmax(logits.row_span(i));
            double u = rng.uniform(), acc = 0.0;
            labels[i] = static_cast<int>(k - 1);
            for (std::size_t j = 0; j < k; ++j) {
                acc += p[j];
                if (u < acc) {
                    labels[i] = static_cast<int>(j);
                    break;
                }
            }
        }
        // keep the optimum inside the searched range
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j)
                logits(i, j) *= 1.0 + 0.5 * rng.uniform();
        Tensor probs = softmax_rows(logits);
        double e1 = ece(probs, labels, 15), e2 = brute_force_ece(probs, labels, 15);
        worst_ece = std::max(worst_ece, std::abs(e1 - e2));
        double t1 = fit_temperature(logits, labels), t2 = grid_temperature(logits, labels);
        double rel = std::abs(std::log(t1) - std::log(t2));
        if (t2 > std::exp(-2.99) && t2 < std::exp(2.99))
            worst_t = std::max(worst_t, rel);
    }
    if (!(worst_ece < 1e-12) || !(worst_t < 2e-3))
        r.pass = false;
    r.detail = "ECE gap " + fmt(worst_ece) + ", log-temperature gap " + fmt(worst_t);
    return r;
}

bool run_suite(std::ostream& out, std::uint64_t seed) {
    CheckResult results[] = {
        check_gradients(seed),        check_kl_monte_carlo(seed, 20, 200000, 4.0),
        check_discrete_cmi(seed),     check_bvc_identity(seed),
        check_ood_sweeps(seed),       check_diversity(seed),
        check_calibration(seed),
    };
    bool all = true;
    for (const auto& r : results) {
        out << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
        all = all && r.pass;
    }
    return all;
}

} // namespace dice::oracle
