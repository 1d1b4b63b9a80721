#include "dice/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <random>
#include <set>
#include <stdexcept>

namespace dice::oracle {

std::vector<Tensor> finite_difference(const std::function<double()>& loss, ParamSet& params, double eps) {
    std::vector<Tensor> out;
    for (auto& p : params) {
        Tensor g(p.value.rows(), p.value.cols());
        auto v = p.value.values();
        auto gv = g.values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double keep = v[i];
            v[i] = keep + eps;
            double up = loss();
            v[i] = keep - eps;
            double down = loss();
            v[i] = keep;
            gv[i] = (up - down) / (2.0 * eps);
        }
        out.push_back(std::move(g));
    }
    return out;
}

double relative_error(std::span<const Tensor> a, std::span<const Tensor> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("gradient lists differ in length");
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) {
        auto va = a[t].values(), vb = b[t].values();
        if (va.size() != vb.size())
            throw std::invalid_argument("gradient shapes differ");
        for (std::size_t i = 0; i < va.size(); ++i) {
            diff += (va[i] - vb[i]) * (va[i] - vb[i]);
            na += va[i] * va[i];
            nb += vb[i] * vb[i];
        }
    }
    double denom = std::sqrt(std::max(na, nb));
    return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

McEstimate mc_kl(std::span<const double> mean, std::span<const double> scale, std::span<const double> class_mean,
                 std::size_t samples, std::uint64_t seed) {
    if (samples < 2 || mean.size() != scale.size() || mean.size() != class_mean.size())
        throw std::invalid_argument("bad Monte-Carlo KL arguments");
    std::mt19937_64 eng(seed);
    std::normal_distribution<double> normal;
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        // log q(z) - log p(z); the 2 pi terms cancel
        double term = 0.0;
        for (std::size_t k = 0; k < mean.size(); ++k) {
            double e = normal(eng);
            double z = mean[k] + scale[k] * e;
            double dz = z - class_mean[k];
            term += -0.5 * e * e - std::log(scale[k]) + 0.5 * dz * dz;
        }
        sum += term;
        sum_sq += term * term;
    }
    double n = static_cast<double>(samples);
    double m = sum / n;
    double var = (sum_sq - n * m * m) / (n - 1.0);
    return {m, std::sqrt(std::max(var, 0.0) / n)};
}

double enumerated_cmi(const std::vector<std::vector<std::vector<double>>>& p) {
    const std::size_t a = p.size();
    if (a == 0 || p[0].empty() || p[0][0].empty())
        throw std::invalid_argument("empty pmf");
    const std::size_t b = p[0].size(), c = p[0][0].size();
    std::vector<double> py(c, 0.0);
    std::vector<std::vector<double>> p1y(a, std::vector<double>(c, 0.0)), p2y(b, std::vector<double>(c, 0.0));
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j)
            for (std::size_t y = 0; y < c; ++y) {
                py[y] += p[i][j][y];
                p1y[i][y] += p[i][j][y];
                p2y[j][y] += p[i][j][y];
            }
    double cmi = 0.0;
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j)
            for (std::size_t y = 0; y < c; ++y) {
                double pj = p[i][j][y];
                if (pj > 0.0)
                    cmi += pj * std::log(pj * py[y] / (p1y[i][y] * p2y[j][y]));
            }
    return cmi;
}

double gaussian_cmi(double rho) {
    if (!(std::abs(rho) < 1.0))
        throw std::invalid_argument("correlation must lie in (-1, 1)");
    return -0.5 * std::log(1.0 - rho * rho);
}

namespace {

struct Counts {
    double tp = 0, fp = 0;
};

// Inputs with score >= t are called in-distribution.
Counts count_at(std::span<const double> pos, std::span<const double> neg, double t) {
    Counts c;
    for (double s : pos)
        c.tp += s >= t ? 1 : 0;
    for (double s : neg)
        c.fp += s >= t ? 1 : 0;
    return c;
}

double average_precision(std::span<const double> pos, std::span<const double> neg) {
    std::set<double, std::greater<>> thresholds(pos.begin(), pos.end());
    thresholds.insert(neg.begin(), neg.end());
    double ap = 0.0, prev_recall = 0.0;
    for (double t : thresholds) {
        Counts c = count_at(pos, neg, t);
        double recall = c.tp / static_cast<double>(pos.size());
        double precision = c.tp + c.fp > 0 ? c.tp / (c.tp + c.fp) : 1.0;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

} // namespace

SweepScores brute_force_sweep(std::span<const double> in_scores, std::span<const double> out_scores) {
    if (in_scores.empty() || out_scores.empty())
        throw std::invalid_argument("empty score list");
    SweepScores r;
    const double np = static_cast<double>(in_scores.size()), nn = static_cast<double>(out_scores.size());

    double wins = 0.0;
    for (double a : in_scores)
        for (double b : out_scores)
            wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
    r.auroc = wins / (np * nn);

    r.aupr_in = average_precision(in_scores, out_scores);
    std::vector<double> neg_in, neg_out;
    std::transform(in_scores.begin(), in_scores.end(), std::back_inserter(neg_in), [](double s) { return -s; });
    std::transform(out_scores.begin(), out_scores.end(), std::back_inserter(neg_out), [](double s) { return -s; });
    r.aupr_out = average_precision(neg_out, neg_in);

    std::set<double, std::greater<>> thresholds(in_scores.begin(), in_scores.end());
    thresholds.insert(out_scores.begin(), out_scores.end());
    thresholds.insert(std::numeric_limits<double>::infinity());
    r.detection_error = 1.0;
    bool found = false;
    for (double t : thresholds) {
        Counts c = count_at(in_scores, out_scores, t);
        double tpr = c.tp / np, fpr = c.fp / nn;
        r.detection_error = std::min(r.detection_error, 0.5 * (1.0 - tpr) + 0.5 * fpr);
        if (!found && tpr >= 0.95) {
            r.fpr_at_95_tpr = fpr;
            found = true;
        }
    }
    return r;
}

DiversityOracle enumerate_diversity(const std::vector<std::vector<int>>& pred, const std::vector<int>& labels) {
    const std::size_t m = pred.size(), n = labels.size();
    if (m < 2 || n == 0)
        throw std::invalid_argument("need two members and one input");
    std::vector<std::set<std::size_t>> wrong(m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k)
            if (pred[i][k] != labels[k])
                wrong[i].insert(k);

    DiversityOracle d;
    double pairs = 0.0, disagreement = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a + 1; b < m; ++b) {
            std::vector<std::size_t> both, either_one;
            std::set_intersection(wrong[a].begin(), wrong[a].end(), wrong[b].begin(), wrong[b].end(),
                                  std::back_inserter(both));
            std::set_symmetric_difference(wrong[a].begin(), wrong[a].end(), wrong[b].begin(), wrong[b].end(),
                                          std::back_inserter(either_one));
            d.ratio_error += both.empty() ? std::numeric_limits<double>::infinity()
                                          : static_cast<double>(either_one.size()) / static_cast<double>(both.size());
            double n00 = static_cast<double>(both.size());
            double n11 = static_cast<double>(n) - static_cast<double>(wrong[a].size() + wrong[b].size()) + n00;
            double n10 = static_cast<double>(wrong[b].size()) - n00; // a right, b wrong
            double n01 = static_cast<double>(wrong[a].size()) - n00;
            double den = n11 * n00 + n01 * n10;
            d.q_statistic += den == 0.0 ? 0.0 : (n11 * n00 - n01 * n10) / den;
            double same = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                same += pred[a][k] == pred[b][k] ? 1.0 : 0.0;
            d.agreement += same / static_cast<double>(n);
            disagreement += static_cast<double>(either_one.size()) / static_cast<double>(n);
            pairs += 1.0;
        }
    }
    d.ratio_error /= pairs;
    d.q_statistic /= pairs;
    d.agreement /= pairs;
    // KW equals (M - 1) / (2M) times the mean pairwise disagreement.
    double md = static_cast<double>(m);
    d.kw_variance = (md - 1.0) / (2.0 * md) * (disagreement / pairs);

    double entropy = 0.0;
    const double half_up = std::ceil(md / 2.0);
    for (std::size_t k = 0; k < n; ++k) {
        double correct = 0.0;
        for (std::size_t i = 0; i < m; ++i)
            correct += wrong[i].count(k) ? 0.0 : 1.0;
        entropy += std::min(correct, md - correct) / (md - half_up);
    }
    d.entropy = entropy / static_cast<double>(n);
    return d;
}

double brute_force_ece(const Tensor& probs, std::span<const int> labels, std::size_t bins) {
    const std::size_t n = labels.size();
    double ece = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        double lo = static_cast<double>(b) / static_cast<double>(bins);
        double hi = static_cast<double>(b + 1) / static_cast<double>(bins);
        double count = 0.0, conf = 0.0, hit = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < probs.cols(); ++j)
                if (probs(k, j) > probs(k, best))
                    best = j;
            double c = probs(k, best);
            bool inside = (b == 0 ? c >= 0.0 : c > lo) && c <= hi;
            if (!inside)
                continue;
            count += 1.0;
            conf += c;
            hit += static_cast<int>(best) == labels[k] ? 1.0 : 0.0;
        }
        if (count > 0.0)
            ece += count / static_cast<double>(n) * std::abs(hit / count - conf / count);
    }
    return ece;
}

double grid_temperature(const Tensor& logits, std::span<const int> labels, std::size_t points) {
    double best_t = 1.0, best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points; ++i) {
        double t = std::exp(-3.0 + 6.0 * static_cast<double>(i) / static_cast<double>(points - 1));
        double total = 0.0;
        for (std::size_t k = 0; k < labels.size(); ++k) {
            double z = 0.0;
            for (std::size_t j = 0; j < logits.cols(); ++j)
                z += std::exp(logits(k, j) / t);
            total += std::log(z) - logits(k, static_cast<std::size_t>(labels[k])) / t;
        }
        if (total < best) {
            best = total;
            best_t = t;
        }
    }
    return best_t;
}

} // namespace dice::oracle
