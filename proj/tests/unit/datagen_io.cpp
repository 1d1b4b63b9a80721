#include "dice/datagen.hpp"
#include "dice/io.hpp"
#include "dice/random.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

using namespace dice;
namespace fs = std::filesystem;

namespace {

// Plug-in mutual information (nats) between a coordinate cut into
// equal-mass bins and the label.
double binned_mi(const Dataset& d, std::size_t col, std::size_t classes, std::size_t bins = 10) {
    const std::size_t n = d.labels.size();
    std::vector<std::pair<double, int>> v(n);
    for (std::size_t r = 0; r < n; ++r)
        v[r] = {d.inputs(r, col), d.labels[r]};
    std::sort(v.begin(), v.end());
    std::vector<std::vector<double>> joint(bins, std::vector<double>(classes, 0.0));
    for (std::size_t r = 0; r < n; ++r)
        joint[r * bins / n][static_cast<std::size_t>(v[r].second)] += 1.0 / static_cast<double>(n);
    std::vector<double> pb(bins, 0.0), py(classes, 0.0);
    for (std::size_t b = 0; b < bins; ++b)
        for (std::size_t k = 0; k < classes; ++k) {
            pb[b] += joint[b][k];
            py[k] += joint[b][k];
        }
    double mi = 0.0;
    for (std::size_t b = 0; b < bins; ++b)
        for (std::size_t k = 0; k < classes; ++k)
            if (joint[b][k] > 0.0)
                mi += joint[b][k] * std::log(joint[b][k] / (pb[b] * py[k]));
    return mi;
}

double correlation(const Dataset& d, std::size_t a, std::size_t b) {
    const double n = static_cast<double>(d.labels.size());
    double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
    for (std::size_t r = 0; r < d.labels.size(); ++r) {
        ma += d.inputs(r, a) / n;
        mb += d.inputs(r, b) / n;
    }
    for (std::size_t r = 0; r < d.labels.size(); ++r) {
        double x = d.inputs(r, a) - ma, y = d.inputs(r, b) - mb;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    return sab / std::sqrt(saa * sbb);
}

std::vector<double> column_means(const Tensor& x) {
    std::vector<double> m(x.cols(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c)
            m[c] += x(r, c) / static_cast<double>(x.rows());
    return m;
}

fs::path scratch(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "dice_unit_io";
    fs::create_directories(dir);
    return dir / name;
}

} // namespace

TEST_SUITE("datagen") {

TEST_CASE("nuisance coordinates carry no label information") {
    SpuriousTaskConfig c;
    c.samples = 20000;
    c.nuisance_dim = 4;
    c.nuisance_strength = 0.95;
    c.nuisance_scale = 3.0;
    c.seed = 1;
    auto t = make_spurious_clusters(c);
    for (std::size_t j = 0; j < c.input_dim(); ++j) {
        CHECK(t.record.nuisance_mask[j] == (j >= c.core_dim));
        double mi = binned_mi(t.data, j, c.classes);
        if (j >= c.core_dim)
            CHECK(mi < 0.02);
    }
    double core_mi = 0.0;
    for (std::size_t j = 0; j < c.core_dim; ++j)
        core_mi += binned_mi(t.data, j, c.classes);
    CHECK(core_mi > 0.1);
}

TEST_CASE("nuisance correlation follows the strength") {
    SpuriousTaskConfig c;
    c.samples = 20000;
    c.seed = 2;
    c.nuisance_strength = 0.0;
    auto t0 = make_spurious_clusters(c);
    CHECK(std::abs(correlation(t0.data, c.core_dim, c.core_dim + 1)) < 0.05);
    c.nuisance_strength = 0.9;
    auto t9 = make_spurious_clusters(c);
    CHECK(correlation(t9.data, c.core_dim, c.core_dim + 1) == doctest::Approx(0.9).epsilon(0.03));
    c.nuisance_dim = 0;
    auto none = make_spurious_clusters(c);
    CHECK(none.data.inputs.cols() == c.core_dim);
}

TEST_CASE("labels are balanced and label noise flips the expected share") {
    SpuriousTaskConfig c;
    c.samples = 40000;
    c.seed = 3;
    c.label_noise = 0.2;
    auto t = make_spurious_clusters(c);
    std::map<int, double> hist;
    double flipped = 0.0;
    for (std::size_t r = 0; r < c.samples; ++r) {
        hist[t.record.clean_labels[r]] += 1.0;
        flipped += t.data.labels[r] != t.record.clean_labels[r] ? 1.0 : 0.0;
    }
    const double expect = static_cast<double>(c.samples) / 4.0;
    for (auto [k, count] : hist)
        CHECK(std::abs(count - expect) < 4.0 * std::sqrt(expect));
    CHECK(flipped / static_cast<double>(c.samples) == doctest::Approx(0.2 * 0.75).epsilon(0.05));
}

TEST_CASE("generation is deterministic in the seed") {
    SpuriousTaskConfig c;
    c.samples = 50;
    auto a = make_spurious_clusters(c), b = make_spurious_clusters(c);
    CHECK(a.data.inputs.mat() == b.data.inputs.mat());
    CHECK(a.data.labels == b.data.labels);
    c.seed = 9;
    CHECK_FALSE(make_spurious_clusters(c).data.inputs.mat() == a.data.inputs.mat());
}

TEST_CASE("invalid task settings") {
    SpuriousTaskConfig c;
    c.nuisance_strength = 1.5;
    CHECK_THROWS(make_spurious_clusters(c));
    c = {};
    c.classes = 1;
    CHECK_THROWS(make_spurious_clusters(c));
}

TEST_CASE("train/validation split partitions the rows") {
    SpuriousTaskConfig c;
    c.samples = 101;
    auto t = make_spurious_clusters(c);
    auto [a, b] = split_train_val(t.data, 0.8, 4);
    CHECK(a.labels.size() == 81);
    CHECK(b.labels.size() == 20);
    std::vector<double> all, parts;
    for (std::size_t r = 0; r < 101; ++r)
        all.push_back(t.data.inputs(r, 0));
    for (const Dataset* d : {&a, &b})
        for (std::size_t r = 0; r < d->labels.size(); ++r)
            parts.push_back(d->inputs(r, 0));
    std::sort(all.begin(), all.end());
    std::sort(parts.begin(), parts.end());
    CHECK(all == parts);
    auto [a2, b2] = split_train_val(t.data, 0.8, 4);
    CHECK(a2.inputs.mat() == a.inputs.mat());
    auto [full, empty] = split_train_val(t.data, 1.0, 4);
    CHECK(empty.labels.empty());
}

TEST_CASE("shifted inputs move the core means by the shift") {
    SpuriousTaskConfig c;
    c.samples = 20000;
    c.seed = 5;
    auto t = make_spurious_clusters(c);
    auto base = column_means(t.data.inputs);
    for (double shift : {0.0, 2.0, 50.0}) {
        Dataset o = make_ood_shift(t.record, shift, 20000, 6);
        auto m = column_means(o.inputs);
        double core = 0.0;
        for (std::size_t j = 0; j < c.core_dim; ++j)
            core += (m[j] - base[j]) * (m[j] - base[j]);
        CHECK(std::sqrt(core) == doctest::Approx(shift).epsilon(0.05).scale(1.0));
        for (std::size_t j = c.core_dim; j < c.input_dim(); ++j)
            CHECK(std::abs(m[j] - base[j]) < 0.1);
    }
}

TEST_CASE("Bayes accuracy agrees with Monte Carlo") {
    SpuriousTaskConfig c;
    c.core_dim = 2;
    c.nuisance_dim = 2;
    c.classes = 3;
    c.class_separation = 1.0;
    c.samples = 40000;
    c.seed = 7;
    auto t = make_spurious_clusters(c);
    double hits = 0.0;
    for (std::size_t r = 0; r < c.samples; ++r) {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t k = 0; k < c.classes; ++k) {
            double dx = t.data.inputs(r, 0) - t.record.class_means[k][0];
            double dy = t.data.inputs(r, 1) - t.record.class_means[k][1];
            if (dx * dx + dy * dy < best_d) {
                best_d = dx * dx + dy * dy;
                best = k;
            }
        }
        hits += static_cast<int>(best) == t.data.labels[r] ? 1.0 : 0.0;
    }
    double mc = hits / static_cast<double>(c.samples);
    double se = std::sqrt(mc * (1.0 - mc) / static_cast<double>(c.samples));
    CHECK(std::abs(bayes_accuracy_2d(t.record) - mc) < 4.0 * se);
    c.core_dim = 3;
    CHECK_THROWS(bayes_accuracy_2d(make_spurious_clusters(c).record));
}

} // TEST_SUITE

TEST_SUITE("io") {

namespace {

ModelConfig io_model() {
    ModelConfig c;
    c.input_dim = 4;
    c.hidden = 5;
    c.feature_dim = 2;
    c.num_classes = 3;
    c.members = 2;
    c.discriminator.hidden = {4, 3};
    c.discriminator.class_embedding = 2;
    return c;
}

} // namespace

TEST_CASE("checkpoint round trip") {
    EnsembleModel a(io_model(), 1), b(io_model(), 2);
    a.member_params().at(0).velocity.mat().setConstant(0.25);
    auto path = scratch("model.bin");
    save_checkpoint(path, a);
    load_checkpoint(path, b);
    CHECK(b.member_params().values_bit_equal(a.member_params()));
    CHECK(b.disc_params().values_bit_equal(a.disc_params()));
    CHECK(b.member_params().at(0).velocity.mat() == a.member_params().at(0).velocity.mat());
}

TEST_CASE("checkpoint layout mismatch and corruption") {
    EnsembleModel a(io_model(), 1);
    auto path = scratch("model2.bin");
    save_checkpoint(path, a);
    ModelConfig other = io_model();
    other.hidden = 6;
    EnsembleModel b(other, 1);
    CHECK_THROWS_AS(load_checkpoint(path, b), FormatError);

    auto size = fs::file_size(path);
    fs::resize_file(path, size / 2);
    EnsembleModel c(io_model(), 1);
    CHECK_THROWS_AS(load_checkpoint(path, c), FormatError);

    std::ofstream(path, std::ios::binary) << "not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint(path, c), FormatError);
    CHECK_THROWS_AS(load_checkpoint(scratch("missing.bin"), c), FormatError);
}

TEST_CASE("dataset round trip") {
    SpuriousTaskConfig c;
    c.samples = 30;
    auto t = make_spurious_clusters(c);
    DatasetFile f{t.data, c.classes, 42, t.record.nuisance_mask};
    auto path = scratch("data.bin");
    save_dataset(path, f);
    auto g = load_dataset(path);
    CHECK(g.data.inputs.mat() == f.data.inputs.mat());
    CHECK(g.data.labels == f.data.labels);
    CHECK(g.classes == 4);
    CHECK(g.seed == 42);
    CHECK(g.nuisance_mask == f.nuisance_mask);

    fs::resize_file(path, fs::file_size(path) - 3);
    CHECK_THROWS_AS(load_dataset(path), FormatError);
}

TEST_CASE("dataset files with out-of-range labels are rejected") {
    Dataset d{Tensor(2, 1), {0, 3}};
    auto path = scratch("bad.bin");
    DatasetFile f{d, 2, 0, {false}};
    bool rejected_on_save = false;
    try {
        save_dataset(path, f);
    } catch (const std::exception&) {
        rejected_on_save = true;
    }
    if (!rejected_on_save)
        CHECK_THROWS_AS(load_dataset(path), FormatError);
}

} // TEST_SUITE
