#include "dice/metrics.hpp"

#include "dice/autodiff.hpp"
#include "dice/error.hpp"
#include "dice/random.hpp"
#include "dice/redundancy.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dice {

namespace {

int argmax_row(const Tensor& t, std::size_t r) {
    auto row = t.row_span(r);
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

void require_members(const PredictionMatrix& pm, std::size_t at_least) {
    pm.validate();
    if (pm.members() < at_least)
        throw std::invalid_argument("diversity measure needs at least " + std::to_string(at_least) + " members");
}

void check_probs(const Tensor& probs, std::span<const int> labels) {
    if (labels.empty())
        throw std::invalid_argument("empty evaluation set");
    if (probs.rows() != labels.size())
        throw ShapeError("one probability row per label required");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= probs.cols())
            throw std::out_of_range("label out of range");
    }
}

struct PairCounts {
    std::size_t n11 = 0, n10 = 0, n01 = 0, n00 = 0, same_pred = 0;
};

PairCounts count_pair(const PredictionMatrix& pm, std::size_t a, std::size_t b) {
    PairCounts c;
    for (std::size_t n = 0; n < pm.size(); ++n) {
        bool ca = pm.member_pred[a][n] == pm.labels[n];
        bool cb = pm.member_pred[b][n] == pm.labels[n];
        if (ca && cb)
            ++c.n11;
        else if (ca)
            ++c.n10;
        else if (cb)
            ++c.n01;
        else
            ++c.n00;
        if (pm.member_pred[a][n] == pm.member_pred[b][n])
            ++c.same_pred;
    }
    return c;
}

template <typename F>
double pair_mean(const PredictionMatrix& pm, F f) {
    require_members(pm, 2);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < pm.members(); ++a) {
        for (std::size_t b = a + 1; b < pm.members(); ++b) {
            total += f(count_pair(pm, a, b));
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

std::vector<std::size_t> correct_counts(const PredictionMatrix& pm) {
    std::vector<std::size_t> l(pm.size(), 0);
    for (const auto& preds : pm.member_pred)
        for (std::size_t n = 0; n < pm.size(); ++n)
            l[n] += preds[n] == pm.labels[n] ? 1 : 0;
    return l;
}

} // namespace

PredictionMatrix PredictionMatrix::from_outputs(const EnsembleOutputs& out, std::span<const int> labels) {
    PredictionMatrix pm;
    pm.labels.assign(labels.begin(), labels.end());
    for (const auto& logits : out.member_logits) {
        std::vector<int> pred(logits.rows());
        for (std::size_t n = 0; n < logits.rows(); ++n)
            pred[n] = argmax_row(logits, n);
        pm.member_pred.push_back(std::move(pred));
    }
    pm.ensemble_probs = out.ensemble_probs;
    pm.ensemble_logits = out.ensemble_logits;
    pm.validate();
    return pm;
}

PredictionMatrix PredictionMatrix::from_predictions(std::vector<std::vector<int>> member_pred, std::vector<int> labels) {
    PredictionMatrix pm;
    pm.member_pred = std::move(member_pred);
    pm.labels = std::move(labels);
    pm.validate();
    return pm;
}

void PredictionMatrix::validate() const {
    for (const auto& p : member_pred) {
        if (p.size() != labels.size())
            throw ShapeError("prediction and label counts differ");
    }
    if (ensemble_probs.size() != 0) {
        if (ensemble_probs.rows() != labels.size())
            throw ShapeError("ensemble probability rows differ from label count");
        for (std::size_t n = 0; n < ensemble_probs.rows(); ++n) {
            auto row = ensemble_probs.row_span(n);
            double s = std::accumulate(row.begin(), row.end(), 0.0);
            if (std::abs(s - 1.0) > 1e-6)
                throw std::invalid_argument("probability rows must sum to 1");
        }
    }
}

double ratio_error(const PredictionMatrix& pm) {
    return pair_mean(pm, [](const PairCounts& c) {
        std::size_t single = c.n10 + c.n01;
        if (c.n00 == 0)
            return kInf;
        return static_cast<double>(single) / static_cast<double>(c.n00);
    });
}

double q_statistic(const PredictionMatrix& pm) {
    return pair_mean(pm, [](const PairCounts& c) {
        double same = static_cast<double>(c.n11) * static_cast<double>(c.n00);
        double diff = static_cast<double>(c.n01) * static_cast<double>(c.n10);
        if (same + diff == 0.0)
            return 0.0;
        return (same - diff) / (same + diff);
    });
}

double agreement(const PredictionMatrix& pm) {
    if (pm.size() == 0)
        throw std::invalid_argument("empty evaluation set");
    return pair_mean(pm, [&](const PairCounts& c) {
        return static_cast<double>(c.same_pred) / static_cast<double>(pm.size());
    });
}

double kohavi_wolpert_variance(const PredictionMatrix& pm) {
    require_members(pm, 1);
    if (pm.size() == 0)
        throw std::invalid_argument("empty evaluation set");
    double m = static_cast<double>(pm.members());
    double total = 0.0;
    for (std::size_t l : correct_counts(pm))
        total += static_cast<double>(l) * (m - static_cast<double>(l));
    return total / (static_cast<double>(pm.size()) * m * m);
}

double entropy_diversity(const PredictionMatrix& pm) {
    require_members(pm, 2);
    if (pm.size() == 0)
        throw std::invalid_argument("empty evaluation set");
    std::size_t m = pm.members();
    double norm = static_cast<double>(m - (m + 1) / 2);
    double total = 0.0;
    for (std::size_t l : correct_counts(pm))
        total += static_cast<double>(std::min(l, m - l)) / norm;
    return total / static_cast<double>(pm.size());
}

double ensemble_accuracy(const PredictionMatrix& pm) {
    pm.validate();
    if (pm.ensemble_probs.size() == 0)
        throw std::invalid_argument("prediction matrix has no ensemble probabilities");
    return accuracy(pm.ensemble_probs, pm.labels);
}

double mean_member_accuracy(const PredictionMatrix& pm) {
    require_members(pm, 1);
    if (pm.size() == 0)
        throw std::invalid_argument("empty evaluation set");
    auto l = correct_counts(pm);
    double total = std::accumulate(l.begin(), l.end(), 0.0);
    return total / (static_cast<double>(pm.size()) * static_cast<double>(pm.members()));
}

double accuracy(const Tensor& probs, std::span<const int> labels) {
    check_probs(probs, labels);
    std::size_t hits = 0;
    for (std::size_t n = 0; n < labels.size(); ++n)
        hits += argmax_row(probs, n) == labels[n] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double nll(const Tensor& probs, std::span<const int> labels) {
    check_probs(probs, labels);
    double total = 0.0;
    for (std::size_t n = 0; n < labels.size(); ++n)
        total -= std::log(std::max(probs(n, static_cast<std::size_t>(labels[n])), DBL_MIN));
    return total / static_cast<double>(labels.size());
}

double brier(const Tensor& probs, std::span<const int> labels) {
    check_probs(probs, labels);
    double total = 0.0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        for (std::size_t k = 0; k < probs.cols(); ++k) {
            double target = static_cast<int>(k) == labels[n] ? 1.0 : 0.0;
            double diff = probs(n, k) - target;
            total += diff * diff;
        }
    }
    return total / (static_cast<double>(labels.size()) * static_cast<double>(probs.cols()));
}

double ece(const Tensor& probs, std::span<const int> labels, std::size_t bins) {
    check_probs(probs, labels);
    if (bins < 1)
        throw std::invalid_argument("need at least one bin");
    std::vector<double> conf_sum(bins, 0.0), hit_sum(bins, 0.0);
    std::vector<std::size_t> count(bins, 0);
    for (std::size_t n = 0; n < labels.size(); ++n) {
        int pred = argmax_row(probs, n);
        double conf = probs(n, static_cast<std::size_t>(pred));
        auto b = static_cast<long>(std::ceil(conf * static_cast<double>(bins))) - 1;
        b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
        conf_sum[static_cast<std::size_t>(b)] += conf;
        hit_sum[static_cast<std::size_t>(b)] += pred == labels[n] ? 1.0 : 0.0;
        ++count[static_cast<std::size_t>(b)];
    }
    double total = 0.0;
    double n = static_cast<double>(labels.size());
    for (std::size_t b = 0; b < bins; ++b) {
        if (count[b] == 0)
            continue;
        double c = static_cast<double>(count[b]);
        total += (c / n) * std::abs(hit_sum[b] / c - conf_sum[b] / c);
    }
    return total;
}

double tace(const Tensor& probs, std::span<const int> labels, std::size_t bins, double threshold) {
    check_probs(probs, labels);
    if (bins < 1)
        throw std::invalid_argument("need at least one bin");
    const std::size_t classes = probs.cols();
    double total = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
        std::vector<std::pair<double, double>> items; // (probability, is class k)
        for (std::size_t n = 0; n < labels.size(); ++n) {
            double p = probs(n, k);
            if (p > threshold)
                items.emplace_back(p, labels[n] == static_cast<int>(k) ? 1.0 : 0.0);
        }
        std::sort(items.begin(), items.end());
        // Equal-mass split: the first (size % bins) chunks hold one extra item.
        std::size_t base = items.size() / bins, extra = items.size() % bins, pos = 0;
        for (std::size_t b = 0; b < bins; ++b) {
            std::size_t len = base + (b < extra ? 1 : 0);
            if (len == 0)
                continue;
            double conf = 0.0, hit = 0.0;
            for (std::size_t i = pos; i < pos + len; ++i) {
                conf += items[i].first;
                hit += items[i].second;
            }
            total += std::abs(hit - conf) / static_cast<double>(len);
            pos += len;
        }
    }
    return total / (static_cast<double>(classes) * static_cast<double>(bins));
}

Tensor softmax_rows(const Tensor& logits, double temperature) {
    if (!(temperature > 0.0))
        throw std::invalid_argument("temperature must be positive");
    Tensor out(logits.rows(), logits.cols());
    for (std::size_t n = 0; n < logits.rows(); ++n) {
        auto row = logits.row_span(n);
        double mx = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        auto o = out.row_span(n);
        for (std::size_t k = 0; k < row.size(); ++k) {
            o[k] = std::exp((row[k] - mx) / temperature);
            total += o[k];
        }
        for (double& v : o)
            v /= total;
    }
    return out;
}

double nll_at_temperature(const Tensor& logits, std::span<const int> labels, double temperature) {
    if (labels.empty() || logits.rows() != labels.size())
        throw std::invalid_argument("need one logit row per label");
    double total = 0.0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        auto row = logits.row_span(n);
        double mx = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double l : row)
            s += std::exp((l - mx) / temperature);
        total += std::log(s) - (row[static_cast<std::size_t>(labels[n])] - mx) / temperature;
    }
    return total / static_cast<double>(labels.size());
}

double fit_temperature(const Tensor& logits, std::span<const int> labels) {
    if (labels.empty())
        throw std::invalid_argument("cannot fit a temperature on an empty set");
    auto f = [&](double log_t) { return nll_at_temperature(logits, labels, std::exp(log_t)); };
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = -3.0, hi = 3.0;
    double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    while (hi - lo > 1e-10) {
        if (f1 <= f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    return std::exp(0.5 * (lo + hi));
}

namespace {

CalibrationScores scores_at(const Tensor& logits, std::span<const int> labels, double temperature, std::size_t bins) {
    Tensor probs = softmax_rows(logits, temperature);
    return {nll(probs, labels), brier(probs, labels), ece(probs, labels, bins), tace(probs, labels, bins),
            accuracy(probs, labels)};
}

CalibrationScores average(const CalibrationScores& a, const CalibrationScores& b) {
    return {0.5 * (a.nll + b.nll), 0.5 * (a.brier + b.brier), 0.5 * (a.ece + b.ece), 0.5 * (a.tace + b.tace),
            0.5 * (a.accuracy + b.accuracy)};
}

Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows) {
    Tensor out(rows.size(), t.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        auto src = t.row_span(rows[r]);
        std::copy(src.begin(), src.end(), out.row_span(r).begin());
    }
    return out;
}

} // namespace

TwoFoldCalibration two_fold_temperature_scaling(const Tensor& logits, std::span<const int> labels,
                                                std::uint64_t seed, std::size_t bins) {
    if (logits.rows() != labels.size())
        throw ShapeError("need one logit row per label");
    if (labels.size() < 2)
        throw std::invalid_argument("two-fold calibration needs at least two inputs");
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::stream(seed, Stream::Evaluation);
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::size_t half = labels.size() / 2;
    std::span<const std::size_t> rows_a(order.data(), half), rows_b(order.data() + half, order.size() - half);

    auto labels_of = [&](std::span<const std::size_t> rows) {
        std::vector<int> out;
        for (auto r : rows)
            out.push_back(labels[r]);
        return out;
    };
    Tensor la = take_rows(logits, rows_a), lb = take_rows(logits, rows_b);
    auto ya = labels_of(rows_a), yb = labels_of(rows_b);
    for (const auto* y : {&ya, &yb}) {
        if (std::adjacent_find(y->begin(), y->end(), std::not_equal_to<>()) == y->end())
            throw std::invalid_argument("degenerate half: a single class");
    }

    TwoFoldCalibration out;
    out.temperature_a = fit_temperature(la, ya);
    out.temperature_b = fit_temperature(lb, yb);
    out.before = average(scores_at(la, ya, 1.0, bins), scores_at(lb, yb, 1.0, bins));
    out.after = average(scores_at(lb, yb, out.temperature_a, bins), scores_at(la, ya, out.temperature_b, bins));
    return out;
}

OodScores ood_scores(std::span<const double> in_scores, std::span<const double> out_scores) {
    if (in_scores.empty() || out_scores.empty())
        throw std::invalid_argument("OOD scoring needs in- and out-of-distribution scores");
    struct Item {
        double score;
        bool positive;
    };
    std::vector<Item> items;
    for (double s : in_scores)
        items.push_back({s, true});
    for (double s : out_scores)
        items.push_back({s, false});
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });

    const double np = static_cast<double>(in_scores.size());
    const double nn = static_cast<double>(out_scores.size());
    OodScores r;
    r.detection_error = 0.5; // threshold above every score
    bool fpr_found = false;
    double tp = 0, fp = 0, prev_tpr = 0, prev_fpr = 0;
    double auroc = 0.0, ap_in = 0.0;
    for (std::size_t i = 0; i < items.size();) {
        std::size_t j = i;
        while (j < items.size() && items[j].score == items[i].score) {
            (items[j].positive ? tp : fp) += 1;
            ++j;
        }
        double tpr = tp / np, fpr = fp / nn;
        auroc += (fpr - prev_fpr) * 0.5 * (tpr + prev_tpr);
        ap_in += (tpr - prev_tpr) * tp / (tp + fp);
        if (!fpr_found && tpr >= 0.95) {
            r.fpr_at_95_tpr = fpr;
            fpr_found = true;
        }
        r.detection_error = std::min(r.detection_error, 0.5 * (1.0 - tpr) + 0.5 * fpr);
        prev_tpr = tpr;
        prev_fpr = fpr;
        i = j;
    }
    r.auroc = auroc;
    r.aupr_in = ap_in;

    // AUPR-out: out-of-distribution as positives, ranked by ascending score.
    double tp_o = 0, fp_o = 0, prev_rec = 0, ap_out = 0;
    for (std::size_t i = items.size(); i > 0;) {
        std::size_t j = i;
        double s = items[i - 1].score;
        while (j > 0 && items[j - 1].score == s) {
            (items[j - 1].positive ? fp_o : tp_o) += 1;
            --j;
        }
        double rec = tp_o / nn;
        ap_out += (rec - prev_rec) * tp_o / (tp_o + fp_o);
        prev_rec = rec;
        i = j;
    }
    r.aupr_out = ap_out;
    return r;
}

std::vector<double> max_softmax_confidence(const EnsembleModel& model, const Tensor& inputs) {
    auto out = predict_batch(model, inputs);
    std::vector<double> conf(inputs.rows());
    for (std::size_t n = 0; n < inputs.rows(); ++n) {
        auto row = out.ensemble_probs.row_span(n);
        conf[n] = *std::max_element(row.begin(), row.end());
    }
    return conf;
}

std::vector<double> dice_times_w_confidence(const EnsembleModel& model, const Tensor& inputs) {
    const std::size_t m = model.members();
    if (m < 2)
        throw std::invalid_argument("DICE x w needs at least two members");
    auto out = predict_batch(model, inputs);
    const std::size_t n = inputs.rows();
    std::vector<int> y_hat(n);
    for (std::size_t r = 0; r < n; ++r)
        y_hat[r] = argmax_row(out.ensemble_probs, r);

    std::vector<double> scale(n, 0.0);
    const auto pairs = member_pairs(m);
    ad::Graph g;
    for (auto [i, j] : pairs) {
        ad::Var in = slot_layout(g, m, i, g.constant(out.member_means[i]), j, g.constant(out.member_means[j]));
        ad::Var w = ad::sigmoid(model.discriminate_logits(g, in, y_hat, Grad::Frozen));
        for (std::size_t r = 0; r < n; ++r)
            scale[r] += 1.0 - w.value()(r, 0);
    }
    Matrix avg_logits = Matrix::Zero(static_cast<Eigen::Index>(n), out.member_logits[0].mat().cols());
    for (const auto& l : out.member_logits)
        avg_logits += l.mat();
    avg_logits /= static_cast<double>(m);

    std::vector<double> conf(n);
    for (std::size_t r = 0; r < n; ++r) {
        double s = scale[r] / static_cast<double>(pairs.size());
        std::vector<double> scaled(static_cast<std::size_t>(avg_logits.cols()));
        for (std::size_t k = 0; k < scaled.size(); ++k)
            scaled[k] = s * avg_logits(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
        auto p = softmax(scaled);
        conf[r] = *std::max_element(p.begin(), p.end());
    }
    return conf;
}

BvcTerms bvc_decomposition(const Tensor& outputs, double target) {
    const std::size_t reps = outputs.rows(), m = outputs.cols();
    if (m < 1)
        throw std::invalid_argument("BVC needs at least one member");
    if (reps < 2)
        throw std::invalid_argument("BVC needs at least two resamples");
    const double r = static_cast<double>(reps), md = static_cast<double>(m);
    std::vector<double> expect(m, 0.0);
    for (std::size_t s = 0; s < reps; ++s)
        for (std::size_t i = 0; i < m; ++i)
            expect[i] += outputs(s, i) / r;

    BvcTerms t;
    for (std::size_t i = 0; i < m; ++i)
        t.bias += (expect[i] - target) / md;
    for (std::size_t i = 0; i < m; ++i) {
        double v = 0.0;
        for (std::size_t s = 0; s < reps; ++s)
            v += (outputs(s, i) - expect[i]) * (outputs(s, i) - expect[i]) / r;
        t.var += v / md;
    }
    if (m > 1) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                if (i == j)
                    continue;
                double c = 0.0;
                for (std::size_t s = 0; s < reps; ++s)
                    c += (outputs(s, i) - expect[i]) * (outputs(s, j) - expect[j]) / r;
                t.covar += c / (md * (md - 1.0));
            }
        }
    }
    for (std::size_t s = 0; s < reps; ++s) {
        double fbar = 0.0;
        for (std::size_t i = 0; i < m; ++i)
            fbar += outputs(s, i) / md;
        t.lhs += (fbar - target) * (fbar - target) / r;
    }
    t.rhs = t.bias * t.bias + t.var / md + (1.0 - 1.0 / md) * t.covar;
    return t;
}

BvcTerms bvc_decomposition(std::span<const Tensor> outputs, std::span<const double> targets) {
    if (outputs.empty() || outputs.size() != targets.size())
        throw std::invalid_argument("one output table per target required");
    BvcTerms avg;
    double n = static_cast<double>(outputs.size());
    for (std::size_t p = 0; p < outputs.size(); ++p) {
        auto t = bvc_decomposition(outputs[p], targets[p]);
        avg.bias += t.bias / n;
        avg.var += t.var / n;
        avg.covar += t.covar / n;
        avg.lhs += t.lhs / n;
        avg.rhs += t.rhs / n;
    }
    return avg;
}

MetricsReport evaluate(const EnsembleModel& model, const Tensor& inputs, std::span<const int> labels,
                       const Tensor* ood_inputs, const ReportOptions& options) {
    auto out = predict_batch(model, inputs);
    auto pm = PredictionMatrix::from_outputs(out, labels);
    MetricsReport r;
    r.ensemble_accuracy = ensemble_accuracy(pm);
    r.mean_member_accuracy = mean_member_accuracy(pm);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.kw_variance = kohavi_wolpert_variance(pm);
    if (pm.members() >= 2) {
        r.ratio_error = ratio_error(pm);
        r.q_statistic = q_statistic(pm);
        r.agreement = agreement(pm);
        r.entropy_diversity = entropy_diversity(pm);
    } else {
        r.ratio_error = r.q_statistic = r.agreement = r.entropy_diversity = nan;
    }
    r.before_ts = {nll(out.ensemble_probs, labels), brier(out.ensemble_probs, labels),
                   ece(out.ensemble_probs, labels, options.bins), tace(out.ensemble_probs, labels, options.bins),
                   r.ensemble_accuracy};
    if (options.temperature_scaling) {
        auto ts = two_fold_temperature_scaling(out.ensemble_logits, labels, options.seed, options.bins);
        r.before_ts = ts.before;
        r.after_ts = ts.after;
        r.temperature = ts.temperature();
    }
    if (ood_inputs != nullptr) {
        auto in_conf = max_softmax_confidence(model, inputs);
        auto out_conf = max_softmax_confidence(model, *ood_inputs);
        r.ood_max_softmax = ood_scores(in_conf, out_conf);
        if (options.dice_w && model.members() >= 2)
            r.ood_dice_w = ood_scores(dice_times_w_confidence(model, inputs), dice_times_w_confidence(model, *ood_inputs));
    }
    return r;
}

} // namespace dice
