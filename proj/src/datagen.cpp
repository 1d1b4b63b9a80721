#include "dice/datagen.hpp"

#include "dice/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dice {

void SpuriousTaskConfig::validate() const {
    if (classes < 2)
        throw std::invalid_argument("need at least two classes");
    if (core_dim < 1)
        throw std::invalid_argument("core dimension must be at least 1");
    if (!(nuisance_strength >= 0.0 && nuisance_strength <= 1.0))
        throw std::invalid_argument("nuisance strength must lie in [0, 1]");
    if (!(label_noise >= 0.0 && label_noise <= 1.0))
        throw std::invalid_argument("label noise must lie in [0, 1]");
    if (samples < 1)
        throw std::invalid_argument("sample count must be positive");
    if (!(core_noise > 0.0) || !(class_separation >= 0.0) || !(nuisance_scale >= 0.0))
        throw std::invalid_argument("noise and scale parameters must be nonnegative (core noise positive)");
}

namespace {

// Fills rows [0, n) of `out` for the given cluster means; returns clean labels.
std::vector<int> draw_inputs(const SpuriousTaskConfig& c, const std::vector<std::vector<double>>& means,
                             Tensor& out, Rng& rng) {
    const std::size_t n = out.rows();
    std::vector<int> labels(n);
    const double a = std::sqrt(c.nuisance_strength), b = std::sqrt(1.0 - c.nuisance_strength);
    for (std::size_t r = 0; r < n; ++r) {
        int y = static_cast<int>(rng.index(c.classes));
        labels[r] = y;
        auto row = out.row_span(r);
        for (std::size_t j = 0; j < c.core_dim; ++j)
            row[j] = means[static_cast<std::size_t>(y)][j] + c.core_noise * rng.normal();
        double s = rng.normal();
        for (std::size_t j = 0; j < c.nuisance_dim; ++j)
            row[c.core_dim + j] = c.nuisance_scale * (a * s + b * rng.normal());
    }
    return labels;
}

} // namespace

SyntheticTask make_spurious_clusters(const SpuriousTaskConfig& cfg) {
    cfg.validate();
    Rng rng = Rng::stream(cfg.seed, Stream::Data);
    SyntheticTask t;
    t.record.config = cfg;
    t.record.class_means.assign(cfg.classes, std::vector<double>(cfg.core_dim));
    for (auto& m : t.record.class_means)
        for (double& v : m)
            v = cfg.class_separation * rng.normal();
    t.record.nuisance_mask.assign(cfg.input_dim(), false);
    std::fill(t.record.nuisance_mask.begin() + static_cast<long>(cfg.core_dim), t.record.nuisance_mask.end(), true);

    t.data.inputs = Tensor(cfg.samples, cfg.input_dim());
    t.record.clean_labels = draw_inputs(cfg, t.record.class_means, t.data.inputs, rng);
    t.data.labels = t.record.clean_labels;
    for (int& y : t.data.labels) {
        if (cfg.label_noise > 0.0 && rng.uniform() < cfg.label_noise)
            y = static_cast<int>(rng.index(cfg.classes));
    }
    return t;
}

Dataset make_ood_shift(const GenerativeRecord& record, double shift, std::size_t samples, std::uint64_t seed) {
    const auto& cfg = record.config;
    cfg.validate();
    if (samples < 1)
        throw std::invalid_argument("sample count must be positive");
    Rng rng = Rng::stream(seed, Stream::Evaluation);
    std::vector<double> dir(cfg.core_dim);
    double norm = 0.0;
    while (norm == 0.0) {
        norm = 0.0;
        for (double& v : dir) {
            v = rng.normal();
            norm += v * v;
        }
    }
    norm = std::sqrt(norm);
    auto means = record.class_means;
    for (auto& m : means)
        for (std::size_t j = 0; j < cfg.core_dim; ++j)
            m[j] += shift * dir[j] / norm;
    Dataset d;
    d.inputs = Tensor(samples, cfg.input_dim());
    d.labels = draw_inputs(cfg, means, d.inputs, rng);
    return d;
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& data, double frac, std::uint64_t seed) {
    if (!(frac >= 0.0 && frac <= 1.0))
        throw std::invalid_argument("split fraction must lie in [0, 1]");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::stream(seed, Stream::Shuffle);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.index(i)]);
    auto cut = static_cast<std::size_t>(std::llround(frac * static_cast<double>(data.size())));
    std::vector<std::size_t> first(order.begin(), order.begin() + static_cast<long>(cut));
    std::vector<std::size_t> second(order.begin() + static_cast<long>(cut), order.end());
    std::sort(first.begin(), first.end());
    std::sort(second.begin(), second.end());
    auto take = [&](const std::vector<std::size_t>& rows) {
        Batch b = data.batch(rows);
        return Dataset{std::move(b.inputs), std::move(b.labels)};
    };
    return {take(first), take(second)};
}

double bayes_accuracy_2d(const GenerativeRecord& record, std::size_t grid) {
    const auto& cfg = record.config;
    if (cfg.core_dim != 2)
        throw std::invalid_argument("Bayes accuracy integration needs a 2-D core space");
    if (grid < 2)
        throw std::invalid_argument("grid too coarse");
    const double sigma = cfg.core_noise;
    double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
    for (const auto& m : record.class_means) {
        for (int j = 0; j < 2; ++j) {
            lo[j] = std::min(lo[j], m[static_cast<std::size_t>(j)] - 8.0 * sigma);
            hi[j] = std::max(hi[j], m[static_cast<std::size_t>(j)] + 8.0 * sigma);
        }
    }
    const double hx = (hi[0] - lo[0]) / static_cast<double>(grid), hy = (hi[1] - lo[1]) / static_cast<double>(grid);
    const double k = static_cast<double>(cfg.classes);
    const double norm = 1.0 / (2.0 * M_PI * sigma * sigma);
    double correct = 0.0;
    for (std::size_t a = 0; a < grid; ++a) {
        double x = lo[0] + (static_cast<double>(a) + 0.5) * hx;
        for (std::size_t b = 0; b < grid; ++b) {
            double y = lo[1] + (static_cast<double>(b) + 0.5) * hy;
            double best = 0.0;
            for (const auto& m : record.class_means) {
                double dx = x - m[0], dy = y - m[1];
                best = std::max(best, norm * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
            }
            correct += best / k * hx * hy;
        }
    }
    // A noisy label is uniform over classes, so it matches any prediction with probability 1/K.
    return (1.0 - cfg.label_noise) * correct + cfg.label_noise / k;
}

} // namespace dice
