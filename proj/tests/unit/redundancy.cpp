#include "dice/redundancy.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace dice;

namespace {

MemberSamples random_features(ad::Graph& g, std::size_t members, std::size_t samples, std::size_t rows,
                              std::size_t d, Rng& rng) {
    MemberSamples f(members);
    for (auto& per_member : f)
        for (std::size_t k = 0; k < samples; ++k)
            per_member.push_back(g.constant(rng.normal_tensor(rows, d)));
    return f;
}

std::vector<double> logits_of(std::span<const double> w) {
    std::vector<double> a;
    for (double x : w)
        a.push_back(std::log(x / (1.0 - x)));
    return a;
}

} // namespace

TEST_SUITE("redundancy") {

TEST_CASE("clipped ratio") {
    CHECK(clipped_ratio(0.5, 10.0) == 1.0);
    CHECK(clipped_ratio(0.9, 10.0) == doctest::Approx(std::exp(10.0 * std::tanh(std::log(9.0) / 10.0))));
    CHECK(clipped_ratio(0.9, 10.0) == doctest::Approx(std::exp(10.0 * std::tanh(std::log(9.0) / 10.0))).epsilon(1e-12));
    double near_one = clipped_ratio(1.0 - 1e-15, 10.0);
    CHECK(near_one < std::exp(10.0));
    CHECK(near_one > std::exp(9.9));
    CHECK(clipped_ratio(0.9, std::numeric_limits<double>::infinity()) == doctest::Approx(9.0));
    CHECK_THROWS(clipped_ratio(0.0, 10.0));
    CHECK_THROWS(clipped_ratio(1.0, 10.0));
}

TEST_CASE("discriminator loss examples") {
    std::vector<double> half{0.5}, j{0.8}, p{0.3};
    CHECK(discriminator_loss(half, half) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(discriminator_loss(j, p) == doctest::Approx(-0.5 * (std::log(0.8) + std::log(0.7))).epsilon(1e-15));
    CHECK(discriminator_loss(j, p) == doctest::Approx(0.2899).epsilon(1e-4));
    std::vector<double> sure_j{1.0 - 1e-12}, sure_p{1e-12};
    CHECK(discriminator_loss(sure_j, sure_p) < 1e-11);
    std::vector<double> empty;
    CHECK_THROWS(discriminator_loss(empty, p));
}

TEST_CASE("recorded discriminator loss agrees with the plain one") {
    std::vector<double> jw{0.8, 0.6, 0.55}, pw{0.3, 0.45, 0.2, 0.7, 0.5, 0.1};
    ad::Graph g;
    auto jl = logits_of(jw), pl = logits_of(pw);
    auto loss = discriminator_loss(g.constant(Tensor::from({3, 1}, jl)), g.constant(Tensor::from({6, 1}, pl)));
    CHECK(loss.value().item() == doctest::Approx(discriminator_loss(jw, pw)).epsilon(1e-14));
}

TEST_CASE("constant one-half discriminator gives a zero estimate and a zero member loss") {
    std::vector<double> half(5, 0.5);
    CHECK(cr_estimate(half, half, 10.0) == 0.0);
    CHECK(cr_member_loss(half, half, 10.0, false) == 0.0);
    CHECK(cr_member_loss(half, half, 10.0, true) == 0.0);
    CHECK(r_estimate(half, half, 10.0) == 0.0);
}

TEST_CASE("member loss without the product term is the mean log ratio") {
    std::vector<double> jw{0.8, 0.6, 0.3}, pw{0.4, 0.2};
    double expected = 0.0;
    for (double w : jw)
        expected += std::log(clipped_ratio(w, 10.0));
    expected /= 3.0;
    CHECK(cr_member_loss(jw, pw, 10.0, false) == doctest::Approx(expected).epsilon(1e-14));
    double rhs = 0.0;
    for (double w : pw)
        rhs += clipped_ratio(w, 10.0);
    CHECK(cr_member_loss(jw, pw, 10.0, true) == doctest::Approx(expected - std::log(rhs / 2.0)).epsilon(1e-14));
    CHECK(cr_estimate(jw, pw, 10.0) == doctest::Approx(expected - std::log(rhs / 2.0)).epsilon(1e-14));
}

TEST_CASE("joint batch counts and provenance") {
    Rng rng(1);
    {
        ad::Graph g;
        auto f = random_features(g, 2, 1, 1, 3, rng);
        std::vector<int> y{1};
        std::vector<std::size_t> ids{7};
        CHECK(sample_joint_batch(g, f, y, ids).size() == 1);
    }
    {
        ad::Graph g;
        auto f = random_features(g, 3, 1, 1, 3, rng);
        std::vector<int> y{0};
        std::vector<std::size_t> ids{0};
        auto b = sample_joint_batch(g, f, y, ids);
        CHECK(b.size() == 3);
        CHECK(std::set<std::size_t>(b.pair.begin(), b.pair.end()).size() == 3);
    }
    {
        ad::Graph g;
        auto f = random_features(g, 2, 4, 6, 3, rng);
        std::vector<int> y{0, 1, 2, 0, 1, 2};
        std::vector<std::size_t> ids{10, 11, 12, 13, 14, 15};
        auto b = sample_joint_batch(g, f, y, ids);
        CHECK(b.size() == 24);
        for (std::size_t r = 0; r < b.size(); ++r)
            CHECK(b.source[r] == b.partner[r]);
        CHECK(b.input.cols() == 6);
    }
    CHECK(member_pairs(4).size() == 6);
}

TEST_CASE("product batch draws different same-class partners") {
    Rng rng(2), bank_rng(3);
    const std::size_t m = 2, d = 3;
    ClassMemoryBank bank(m, 3, d, 4);
    for (std::size_t id = 100; id < 112; ++id) {
        std::vector<double> z(d, static_cast<double>(id));
        for (std::size_t i = 0; i < m; ++i)
            bank.push(i, static_cast<int>(id % 3), z, id);
    }
    ad::Graph g;
    auto f = random_features(g, m, 4, 5, d, rng);
    std::vector<int> y{0, 1, 2, 0, 1};
    std::vector<std::size_t> ids{103, 200, 201, 202, 203};
    auto b = sample_product_batch(g, bank, f, y, ids, 4, true, bank_rng);
    CHECK(b.size() + b.skipped == 4 * 5 * 4);
    CHECK(b.skipped == 0);
    for (std::size_t r = 0; r < b.size(); ++r) {
        CHECK(b.source[r] != b.partner[r]);
        CHECK(static_cast<int>(b.partner[r] % 3) == b.labels[r]);
        // The partner sits in slot j of the layout: its value encodes its id.
        CHECK(b.input.value()(r, d) == static_cast<double>(b.partner[r]));
    }
}

TEST_CASE("a single stored item is always the partner") {
    Rng rng(4), bank_rng(5);
    ClassMemoryBank bank(2, 2, 2, 4);
    std::vector<double> z{9.0, 9.0};
    bank.push(1, 0, z, 42);
    ad::Graph g;
    auto f = random_features(g, 2, 2, 3, 2, rng);
    std::vector<int> y{0, 0, 1};
    std::vector<std::size_t> ids{1, 2, 3};
    auto b = sample_product_batch(g, bank, f, y, ids, 2, true, bank_rng);
    CHECK(b.size() == 2 * 2 * 2);
    CHECK(b.skipped == 2 * 2);
    for (std::size_t r = 0; r < b.size(); ++r)
        CHECK(b.partner[r] == 42);
}

TEST_CASE("the input itself is never its own partner") {
    Rng rng(6), bank_rng(7);
    ClassMemoryBank bank(2, 1, 2, 4);
    std::vector<double> z{1.0, 1.0};
    bank.push(1, 0, z, 5);
    ad::Graph g;
    auto f = random_features(g, 2, 1, 1, 2, rng);
    std::vector<int> y{0};
    std::vector<std::size_t> ids{5};
    auto b = sample_product_batch(g, bank, f, y, ids, 3, true, bank_rng);
    CHECK(b.empty());
    CHECK(b.skipped == 3);
}

TEST_CASE("unconditional sampling may cross classes") {
    Rng rng(8), bank_rng(9);
    ClassMemoryBank bank(2, 2, 1, 4);
    std::vector<double> z{1.0};
    bank.push(1, 1, z, 50);
    ad::Graph g;
    auto f = random_features(g, 2, 1, 2, 1, rng);
    std::vector<int> y{0, 0};
    std::vector<std::size_t> ids{1, 2};
    CHECK(sample_product_batch(g, bank, f, y, ids, 1, true, bank_rng).empty());
    CHECK(sample_product_batch(g, bank, f, y, ids, 1, false, bank_rng).size() == 2);
}

TEST_CASE("the bank is a bounded ring buffer") {
    ClassMemoryBank bank(3, 4, 5, 2);
    std::vector<double> z(5, 0.0);
    for (std::size_t id = 0; id < 100; ++id)
        for (std::size_t i = 0; i < 3; ++i)
            bank.push(i, static_cast<int>(id % 4), z, id);
    CHECK(bank.stored_scalars() == 3 * 4 * 5 * 2);
    auto e = bank.entries(0, 1);
    CHECK(e.size() == 2);
    CHECK(std::set<std::size_t>{e[0].input_id, e[1].input_id} == std::set<std::size_t>{93, 97});
}

} // TEST_SUITE
