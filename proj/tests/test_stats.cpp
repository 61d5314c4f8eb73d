#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dcbm/rng.hpp"
#include "dcbm/stats.hpp"
#include "oracles.hpp"

TEST_CASE("pearson on identical and negated vectors", "[stats]") {
    std::vector<double> a{0.5, 1.0, -2.0, 3.5};
    std::vector<double> na{-0.5, -1.0, 2.0, -3.5};
    CHECK(dcbm::pearson(a, a) == Catch::Approx(1.0).margin(1e-15));
    CHECK(dcbm::pearson(a, na) == Catch::Approx(-1.0).margin(1e-15));
}

TEST_CASE("pearson matches covariance-formula oracle", "[stats]") {
    std::vector<double> a{1, 2, 3};
    std::vector<double> b{1, 2, 4};
    CHECK(dcbm::pearson(a, b) ==
          Catch::Approx(oracle::covariance_pearson(a, b)).margin(1e-15));
}

TEST_CASE("pearson rejects zero-variance input", "[stats]") {
    std::vector<double> a{1, 1, 1};
    std::vector<double> b{1, 2, 3};
    CHECK_THROWS_AS(dcbm::pearson(a, b), dcbm::NumericError);
    CHECK_THROWS_AS(dcbm::pearson(b, a), dcbm::NumericError);
}

TEST_CASE("spearman on identical, reversed, and the classic 5-point example",
          "[stats]") {
    std::vector<double> a{1, 2, 3, 4, 5};
    std::vector<double> rev{5, 4, 3, 2, 1};
    std::vector<double> b{2, 1, 4, 3, 5};
    CHECK(dcbm::spearman(a, a) == Catch::Approx(1.0).margin(1e-15));
    CHECK(dcbm::spearman(a, rev) == Catch::Approx(-1.0).margin(1e-15));
    // No ties: 1 - 6*sum(d^2)/(n(n^2-1)) = 1 - 24/120 = 0.8
    CHECK(dcbm::spearman(a, b) == Catch::Approx(0.8).margin(1e-15));
}

TEST_CASE("spearman matches rank-then-pearson oracle on tied data", "[stats]") {
    dcbm::RngStream rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> a(25), b(25);
        for (auto& v : a) v = std::floor(rng.uniform(0, 7)) / 6.0; // heavy ties
        for (auto& v : b) v = rng.normal();
        double got = dcbm::spearman(a, b);
        double want = oracle::rank_then_pearson_spearman(a, b);
        CHECK(std::abs(got - want) < 1e-12);
    }
}

TEST_CASE("spearman is invariant under strictly monotone transforms", "[stats]") {
    dcbm::RngStream rng(18);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> a(40), b(40);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        double base = dcbm::spearman(a, b);
        std::vector<double> ta(40), tb(40);
        for (std::size_t i = 0; i < 40; ++i) {
            ta[i] = std::exp(a[i]);           // strictly increasing
            tb[i] = b[i] * 3.0 - 7.0;         // strictly increasing affine
        }
        CHECK(dcbm::spearman(ta, tb) == base); // ranks unchanged, exact
    }
}

TEST_CASE("spearman rejects constant input", "[stats]") {
    std::vector<double> a{2, 2, 2, 2};
    std::vector<double> b{1, 2, 3, 4};
    CHECK_THROWS_AS(dcbm::spearman(a, b), dcbm::NumericError);
}

TEST_CASE("midranks average over tie groups", "[stats]") {
    std::vector<double> v{3.0, 1.0, 3.0, 2.0, 3.0};
    auto r = dcbm::midranks(v);
    CHECK(r[1] == 1.0);
    CHECK(r[3] == 2.0);
    CHECK(r[0] == 4.0);
    CHECK(r[2] == 4.0);
    CHECK(r[4] == 4.0);
}

TEST_CASE("finite difference gradient on simple functions", "[stats]") {
    auto square = [](const std::vector<double>& x) { return x[0] * x[0]; };
    auto g = dcbm::finite_diff_gradient(square, {3.0}, 1e-5);
    CHECK(std::abs(g[0] - 6.0) < 1e-6);

    auto constant = [](const std::vector<double>&) { return 4.2; };
    auto gc = dcbm::finite_diff_gradient(constant, {1.0, -2.0, 0.5}, 1e-5);
    for (double v : gc) CHECK(v == 0.0);

    auto sine = [](const std::vector<double>& x) { return std::sin(x[0]); };
    auto gs = dcbm::finite_diff_gradient(sine, {0.0}, 1e-5);
    CHECK(std::abs(gs[0] - 1.0) < 1e-8);
}

TEST_CASE("finite difference propagates non-finite evaluations", "[stats]") {
    auto bad = [](const std::vector<double>& x) { return std::log(x[0]); };
    CHECK_THROWS_AS(dcbm::finite_diff_gradient(bad, {0.0}, 1e-3), dcbm::NumericError);
}
