#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "dcbm/cbm.hpp"
#include "dcbm/stats.hpp"
#include "dcbm/synth.hpp"

using dcbm::Matrix;

namespace {

dcbm::MlpSpec spec_of(std::vector<std::size_t> sizes) {
    dcbm::MlpSpec s;
    s.layer_sizes = std::move(sizes);
    return s;
}

double column_pearson(const Matrix& a, std::size_t ca, const Matrix& b, std::size_t cb) {
    return dcbm::pearson(a.col(ca), b.col(cb));
}

} // namespace

// ---------------------------------------------------------------------------
// fit_debiaser
// ---------------------------------------------------------------------------

TEST_CASE("class-mean debiaser stores exact per-class means", "[cbm]") {
    Matrix C{{1}, {0}, {1}};
    std::vector<int> classes{0, 0, 1};
    auto d = dcbm::fit_debiaser_class_mean(C, classes, 2);
    Matrix pred = d.predict_classes({0, 1});
    CHECK(pred(0, 0) == 0.5);
    CHECK(pred(1, 0) == 1.0);
}

TEST_CASE("class-mean debiaser rejects unseen classes at predict time", "[cbm]") {
    Matrix C{{1.0}, {2.0}};
    auto d = dcbm::fit_debiaser_class_mean(C, {0, 0}, 3); // class 1, 2 unseen
    CHECK_THROWS_AS(d.predict_classes({1}), dcbm::ConfigError);
    CHECK_THROWS_AS(d.predict_classes({7}), dcbm::ConfigError);
}

TEST_CASE("linear debiaser on label-independent concepts shrinks to the mean",
          "[cbm]") {
    dcbm::RngStream rng(41);
    const std::size_t n = 2000;
    Matrix Y = dcbm::random_gaussian(rng, n, 2, 1.0);
    Matrix C = dcbm::random_gaussian(rng, n, 3, 1.0); // independent of Y
    auto d = dcbm::fit_debiaser_linear(C, Y);
    const double se = 1.0 / std::sqrt(static_cast<double>(n));
    CHECK(dcbm::max_abs(d.linear.weights) < 3.0 * se);
    Matrix pred = d.predict(Y);
    auto c_mean = dcbm::col_means(C);
    auto p_mean = dcbm::col_means(pred);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(p_mean[c] - c_mean[c]) < 0.01);
}

TEST_CASE("linear debiaser recovers W1 from noiseless concepts", "[cbm]") {
    dcbm::RngStream rng(42);
    Matrix W1 = dcbm::random_gaussian(rng, 4, 4, 0.5);
    Matrix Y = dcbm::random_gaussian(rng, 300, 4, 1.0);
    Matrix C = dcbm::mat_mul(Y, dcbm::transpose(W1));
    auto d = dcbm::fit_debiaser_linear(C, Y);
    CHECK(dcbm::max_abs(dcbm::sub(d.linear.weights, W1)) < 1e-6);
}

TEST_CASE("debiased concepts stay inside the observed concept range", "[cbm]") {
    dcbm::RngStream rng(43);
    Matrix Y = dcbm::random_gaussian(rng, 100, 3, 1.0);
    Matrix C = dcbm::random_gaussian(rng, 100, 2, 1.0);
    auto d = dcbm::fit_debiaser_linear(C, Y);
    // Probe far outside the training label range to force the clamp.
    Matrix probe = dcbm::scale(dcbm::random_gaussian(rng, 50, 3, 1.0), 50.0);
    Matrix pred = d.predict(probe);
    for (std::size_t r = 0; r < pred.rows; ++r)
        for (std::size_t c = 0; c < pred.cols; ++c) {
            CHECK(pred(r, c) >= d.clamp_lo[c]);
            CHECK(pred(r, c) <= d.clamp_hi[c]);
        }
}

TEST_CASE("mlp debiaser fits a linear map", "[cbm]") {
    dcbm::RngStream rng(44);
    Matrix Y = dcbm::random_gaussian(rng, 400, 2, 1.0);
    Matrix C(400, 1);
    for (std::size_t i = 0; i < 400; ++i) C(i, 0) = 0.7 * Y(i, 0) - 0.2 * Y(i, 1);
    dcbm::TrainConfig cfg;
    cfg.epochs = 300;
    cfg.learning_rate = 5e-3;
    cfg.seed = 45;
    auto d = dcbm::fit_debiaser_mlp(C, Y, spec_of({2, 16, 1}), cfg);
    Matrix pred = d.predict(Y);
    double err = 0.0;
    for (std::size_t i = 0; i < 400; ++i) err = std::max(err, std::abs(pred(i, 0) - C(i, 0)));
    CHECK(err < 0.15);
}

// ---------------------------------------------------------------------------
// fit_concept_distribution
// ---------------------------------------------------------------------------

TEST_CASE("perfectly linear targets leave near-zero variance", "[cbm]") {
    dcbm::RngStream rng(46);
    Matrix X = dcbm::random_gaussian(rng, 200, 5, 1.0);
    Matrix W = dcbm::random_gaussian(rng, 3, 5, 1.0);
    Matrix D = dcbm::mat_mul(X, dcbm::transpose(W));
    auto g = dcbm::fit_concept_distribution(X, D, {});
    for (double v : g.variance) CHECK(v < 1e-8);
}

TEST_CASE("feature-independent targets give the sample variance per concept",
          "[cbm]") {
    dcbm::RngStream rng(47);
    Matrix X = dcbm::random_gaussian(rng, 5000, 4, 1.0);
    Matrix D(5000, 2);
    for (std::size_t i = 0; i < 5000; ++i) {
        D(i, 0) = rng.normal(0.8);
        D(i, 1) = rng.normal(2.5);
    }
    auto g = dcbm::fit_concept_distribution(X, D, {});
    // Direct per-column variance as the reference.
    for (std::size_t c = 0; c < 2; ++c) {
        auto col = D.col(c);
        double mean = 0.0;
        for (double v : col) mean += v;
        mean /= static_cast<double>(col.size());
        double var = 0.0;
        for (double v : col) var += (v - mean) * (v - mean);
        var /= static_cast<double>(col.size());
        CHECK(g.variance[c] == Catch::Approx(var).epsilon(0.05));
    }
}

TEST_CASE("probability targets are clamped then mapped to logits", "[cbm]") {
    // A saturated target trains against exactly the logit of the clamp bound.
    CHECK(dcbm::clamped_logit(0.999) == dcbm::clamped_logit(0.95));
    CHECK(dcbm::clamped_logit(0.999) == std::log(0.95 / (1.0 - 0.95)));
    CHECK(dcbm::clamped_logit(0.001) == dcbm::clamped_logit(0.05));
    CHECK(dcbm::clamped_logit(0.5) == Catch::Approx(0.0).margin(1e-15));

    dcbm::RngStream rng(48);
    Matrix X = dcbm::random_gaussian(rng, 100, 2, 1.0);
    Matrix D(100, 1, 0.999); // saturated probability targets
    dcbm::ConceptDistOptions opt;
    opt.logit_space = true;
    auto g = dcbm::fit_concept_distribution(X, D, opt);
    Matrix pred = g.predict_mean(X);
    const double expect = std::log(0.95 / 0.05);
    for (std::size_t i = 0; i < pred.rows; ++i)
        CHECK(pred(i, 0) == Catch::Approx(expect).margin(1e-6));
}

// ---------------------------------------------------------------------------
// fit_label_head_mc
// ---------------------------------------------------------------------------

namespace {

dcbm::GaussianConceptModel toy_dist(const Matrix& X, const Matrix& D, double var) {
    auto g = dcbm::fit_concept_distribution(X, D, {});
    for (double& v : g.variance) v = var;
    return g;
}

} // namespace

TEST_CASE("zero variance makes MC fitting identical to mean fitting", "[cbm]") {
    dcbm::RngStream rng(49);
    Matrix X = dcbm::random_gaussian(rng, 120, 3, 1.0);
    Matrix W = dcbm::random_gaussian(rng, 2, 3, 1.0);
    Matrix D = dcbm::mat_mul(X, dcbm::transpose(W));
    Matrix Y(120, 1);
    for (std::size_t i = 0; i < 120; ++i) Y(i, 0) = D(i, 0) + 0.5 * D(i, 1);

    auto dist = toy_dist(X, D, 0.0);
    dcbm::HeadFitOptions mc;
    mc.spec = spec_of({2, 1});
    mc.train.epochs = 30;
    mc.train.seed = 50;
    mc.mc_samples = 25;
    auto head_mc = dcbm::fit_label_head_mc(dist, X, Y, mc);

    dcbm::HeadFitOptions mean = mc;
    mean.mc_samples = 0;
    auto head_mean = dcbm::fit_label_head_mc(dist, X, Y, mean);

    for (std::size_t l = 0; l < head_mc.weights.size(); ++l) {
        CHECK(head_mc.weights[l].data == head_mean.weights[l].data);
        CHECK(head_mc.biases[l] == head_mean.biases[l]);
    }
}

TEST_CASE("mc_samples=1 and mc_samples=25 agree on a linear-Gaussian instance",
          "[cbm]") {
    // Averaging inside the loss acts like a ridge of strength var/S on the
    // head, so sample counts only agree when the concept distribution is
    // sharp; the unconfounded instance keeps the residual variance tiny.
    dcbm::SynthConfig cfg;
    cfg.n = 600;
    cfg.dim = 6;
    cfg.seed = 51;
    cfg.confounding_scale = 0.0;
    cfg.noise_sigma = 1e-3;
    auto ds = dcbm::generate(cfg);
    auto split = dcbm::make_split(cfg.n);
    Matrix Xtr = dcbm::take_rows(ds.X, split.train);
    Matrix Ctr = dcbm::take_rows(ds.C, split.train);
    Matrix Ytr = dcbm::take_rows(ds.Y, split.train);
    Matrix Xte = dcbm::take_rows(ds.X, split.test);

    auto debiaser = dcbm::fit_debiaser_linear(Ctr, Ytr);
    Matrix d_hat = debiaser.predict(Ytr);
    auto dist = dcbm::fit_concept_distribution(Xtr, d_hat, {});

    auto fit_with = [&](std::size_t S) {
        dcbm::HeadFitOptions opt;
        opt.spec = spec_of({6, 6});
        opt.train.epochs = 200;
        opt.train.learning_rate = 2e-2;
        opt.train.lr_decay = 0.97; // anneal the S=1 gradient-noise ball away
        opt.train.batch_size = 64;
        opt.train.seed = 52;
        opt.mc_samples = S;
        auto head = dcbm::fit_label_head_mc(dist, Xtr, Ytr, opt);
        return dcbm::predict_labels_mc(dist, head, Xte, S, 53);
    };
    Matrix p1 = fit_with(1);
    Matrix p25 = fit_with(25);
    CHECK(dcbm::pearson(p1.data, p25.data) > 0.99);
}

TEST_CASE("label head fitting is deterministic for a fixed seed", "[cbm]") {
    dcbm::RngStream rng(54);
    Matrix X = dcbm::random_gaussian(rng, 80, 3, 1.0);
    Matrix D = dcbm::random_gaussian(rng, 80, 2, 1.0);
    Matrix Y = dcbm::random_gaussian(rng, 80, 1, 1.0);
    auto dist = toy_dist(X, D, 0.05);
    dcbm::HeadFitOptions opt;
    opt.spec = spec_of({2, 4, 1});
    opt.train.epochs = 20;
    opt.train.seed = 55;
    auto h1 = dcbm::fit_label_head_mc(dist, X, Y, opt);
    auto h2 = dcbm::fit_label_head_mc(dist, X, Y, opt);
    for (std::size_t l = 0; l < h1.weights.size(); ++l)
        CHECK(h1.weights[l].data == h2.weights[l].data);
}

// ---------------------------------------------------------------------------
// explanations and ranking
// ---------------------------------------------------------------------------

TEST_CASE("explanation scores are centered on the training set", "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 400;
    cfg.dim = 8;
    cfg.seed = 56;
    auto ds = dcbm::generate(cfg);
    auto split = dcbm::make_split(cfg.n);
    Matrix Xtr = dcbm::take_rows(ds.X, split.train);
    auto cbm = dcbm::fit_linear_gaussian(Xtr, dcbm::take_rows(ds.C, split.train),
                                         dcbm::take_rows(ds.Y, split.train));
    Matrix scores = cbm.explanation_scores(Xtr);
    auto mu = dcbm::col_means(scores);
    for (double v : mu) CHECK(std::abs(v) < 1e-8);

    // Identical inputs produce identical score rows.
    Matrix two(2, ds.X.cols);
    for (std::size_t c = 0; c < ds.X.cols; ++c) two(0, c) = two(1, c) = ds.X(0, c);
    Matrix s2 = cbm.explanation_scores(two);
    for (std::size_t c = 0; c < s2.cols; ++c) CHECK(s2(0, c) == s2(1, c));
}

TEST_CASE("linear mean model gives score differences w (x - x')", "[cbm]") {
    dcbm::DebiasedCbm cbm;
    cbm.concept_dist.use_mlp = false;
    cbm.concept_dist.linear_mean.weights = Matrix{{3.0}};
    cbm.concept_dist.linear_mean.intercept = {1.0};
    cbm.concept_dist.variance = {0.0};
    cbm.explanation_center = {0.4};
    Matrix xa{{2.0}}, xb{{-1.5}};
    double diff = cbm.explanation_scores(xa)(0, 0) - cbm.explanation_scores(xb)(0, 0);
    CHECK(diff == Catch::Approx(3.0 * (2.0 - -1.5)).margin(1e-12));
}

TEST_CASE("an identically zero score column ranks least explanatory", "[cbm]") {
    dcbm::RngStream rng(57);
    Matrix scores = dcbm::random_gaussian(rng, 30, 5, 1.0);
    for (std::size_t r = 0; r < 30; ++r) scores(r, 2) = 0.0;
    auto ranking = dcbm::rank_concepts(scores);
    CHECK(ranking.global_ascending.front() == 2);
}

TEST_CASE("permuting concept columns permutes the ranking identically", "[cbm]") {
    dcbm::RngStream rng(58);
    Matrix scores = dcbm::random_gaussian(rng, 25, 6, 1.0);
    auto base = dcbm::rank_concepts(scores);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2}; // new column j = old perm[j]
    Matrix permuted(25, 6);
    for (std::size_t r = 0; r < 25; ++r)
        for (std::size_t c = 0; c < 6; ++c) permuted(r, c) = scores(r, perm[c]);
    auto shuffled = dcbm::rank_concepts(permuted);
    std::vector<std::size_t> inverse(6);
    for (std::size_t c = 0; c < 6; ++c) inverse[perm[c]] = c;
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(shuffled.global_ascending[i] == inverse[base.global_ascending[i]]);
}

TEST_CASE("global ranking agrees with an independent re-sort", "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 300;
    cfg.dim = 10;
    cfg.seed = 59;
    auto ds = dcbm::generate(cfg);
    auto cbm = dcbm::fit_linear_gaussian(ds.X, ds.C, ds.Y);
    Matrix scores = cbm.explanation_scores(ds.X);
    auto ranking = dcbm::rank_concepts(scores);

    // Oracle: recompute mean |score| and selection-sort the indices.
    std::vector<double> mean_abs(10, 0.0);
    for (std::size_t r = 0; r < scores.rows; ++r)
        for (std::size_t c = 0; c < 10; ++c) mean_abs[c] += std::abs(scores(r, c));
    std::vector<std::size_t> expect;
    std::vector<bool> used(10, false);
    for (std::size_t k = 0; k < 10; ++k) {
        std::size_t arg = 10;
        for (std::size_t c = 0; c < 10; ++c)
            if (!used[c] && (arg == 10 || mean_abs[c] < mean_abs[arg])) arg = c;
        used[arg] = true;
        expect.push_back(arg);
    }
    CHECK(ranking.global_ascending == expect);
}

TEST_CASE("mask_least_explanatory drops the requested fraction", "[cbm]") {
    Matrix scores{{1.0, 0.1, 0.5, 2.0}};
    auto ranking = dcbm::rank_concepts(scores);
    auto mask = dcbm::mask_least_explanatory(ranking, 0.5);
    CHECK(mask == std::vector<std::uint8_t>{1, 0, 0, 1});
    CHECK(dcbm::mask_least_explanatory(ranking, 0.0) ==
          std::vector<std::uint8_t>{1, 1, 1, 1});
    CHECK(dcbm::mask_least_explanatory(ranking, 1.0) ==
          std::vector<std::uint8_t>{0, 0, 0, 0});
}

// ---------------------------------------------------------------------------
// linear-Gaussian pipelines
// ---------------------------------------------------------------------------

TEST_CASE("with nothing to debias both pipelines match the direct regression",
          "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 400;
    cfg.dim = 8;
    cfg.noise_sigma = 0.0;
    cfg.confounding_scale = 0.0;
    cfg.seed = 60;
    auto ds = dcbm::generate(cfg);
    auto split = dcbm::make_split(cfg.n);
    Matrix Xtr = dcbm::take_rows(ds.X, split.train);
    Matrix Ctr = dcbm::take_rows(ds.C, split.train);
    Matrix Ytr = dcbm::take_rows(ds.Y, split.train);
    // lambda = 0: the identity under test is about plain least squares, and
    // any ridge perturbs the weakly excited directions of each stage
    // differently.
    auto deb = dcbm::fit_linear_gaussian(Xtr, Ctr, Ytr, 0.0);
    auto reg = dcbm::fit_regular_linear(Xtr, Ctr, Ytr, 0.0);
    auto direct = dcbm::solve_least_squares(Xtr, Ytr, 0.0);

    // Compare on held-out generator samples: off-distribution probes would
    // expose only how the ridge treats directions the data never excites.
    Matrix probe = dcbm::take_rows(ds.X, split.test);
    Matrix p_deb = deb.predict_labels(probe);
    Matrix p_reg = reg.predict_labels(probe);
    Matrix p_dir = direct.predict(probe);
    CHECK(dcbm::max_abs(dcbm::sub(p_deb, p_dir)) < 1e-6);
    CHECK(dcbm::max_abs(dcbm::sub(p_reg, p_dir)) < 1e-6);
    CHECK(dcbm::max_abs(dcbm::sub(p_deb, p_reg)) < 1e-6);
}

TEST_CASE("debiased concept predictions track D_true better than regular ones",
          "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 10000;
    cfg.dim = 20;
    cfg.seed = 62;
    auto ds = dcbm::generate(cfg);
    auto split = dcbm::make_split(cfg.n);
    Matrix Xtr = dcbm::take_rows(ds.X, split.train);
    Matrix Ctr = dcbm::take_rows(ds.C, split.train);
    Matrix Ytr = dcbm::take_rows(ds.Y, split.train);
    Matrix Xte = dcbm::take_rows(ds.X, split.test);
    Matrix Dte = dcbm::take_rows(ds.D_true, split.test);

    auto deb = dcbm::fit_linear_gaussian(Xtr, Ctr, Ytr);
    auto reg = dcbm::fit_regular_linear(Xtr, Ctr, Ytr);
    Matrix p_deb = deb.expected_concepts(Xte);
    Matrix p_reg = reg.expected_concepts(Xte);
    double corr_deb = 0.0, corr_reg = 0.0;
    for (std::size_t c = 0; c < 20; ++c) {
        corr_deb += column_pearson(p_deb, c, Dte, c);
        corr_reg += column_pearson(p_reg, c, Dte, c);
    }
    CHECK(corr_deb / 20.0 > corr_reg / 20.0);
}

TEST_CASE("sample order does not change the fitted linear pipelines", "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 200;
    cfg.dim = 6;
    cfg.seed = 63;
    auto ds = dcbm::generate(cfg);
    std::vector<std::size_t> perm(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) perm[i] = (i * 13 + 7) % cfg.n;
    auto a = dcbm::fit_linear_gaussian(ds.X, ds.C, ds.Y);
    auto b = dcbm::fit_linear_gaussian(dcbm::take_rows(ds.X, perm),
                                       dcbm::take_rows(ds.C, perm),
                                       dcbm::take_rows(ds.Y, perm));
    CHECK(dcbm::max_abs(dcbm::sub(a.linear_head.weights, b.linear_head.weights)) < 1e-9);
    CHECK(dcbm::max_abs(dcbm::sub(a.concept_dist.linear_mean.weights,
                                  b.concept_dist.linear_mean.weights)) < 1e-9);
}

TEST_CASE("regular predictions carry confounder correlation, debiased do not",
          "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 6000;
    cfg.dim = 20;
    cfg.design = dcbm::Design::OrthogonalConfounding;
    cfg.seed = 64;
    auto ds = dcbm::generate(cfg);
    auto split = dcbm::make_split(cfg.n);
    Matrix Xtr = dcbm::take_rows(ds.X, split.train);
    Matrix Ctr = dcbm::take_rows(ds.C, split.train);
    Matrix Ytr = dcbm::take_rows(ds.Y, split.train);

    auto deb = dcbm::fit_linear_gaussian(Xtr, Ctr, Ytr);
    auto reg = dcbm::fit_regular_linear(Xtr, Ctr, Ytr);
    Matrix p_deb = deb.expected_concepts(ds.X);
    Matrix p_reg = reg.expected_concepts(ds.X);

    const double bound = 4.0 / std::sqrt(static_cast<double>(cfg.n));
    std::size_t deb_ok = 0, reg_violations = 0;
    for (std::size_t c = 0; c < 20; ++c) {
        if (std::abs(column_pearson(p_deb, c, ds.U, c)) < bound) ++deb_ok;
        if (std::abs(column_pearson(p_reg, c, ds.U, c)) >= bound) ++reg_violations;
    }
    CHECK(deb_ok >= 19); // >= 95% of coordinates
    CHECK(reg_violations >= 4); // >= 20% of coordinates
}

// ---------------------------------------------------------------------------
// completeness
// ---------------------------------------------------------------------------

TEST_CASE("completeness gap is small when concepts carry all label information",
          "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 3000;
    cfg.dim = 10;
    cfg.seed = 65;
    auto ds = dcbm::generate(cfg);
    auto cbm = dcbm::fit_linear_gaussian(ds.X, ds.C, ds.Y);
    dcbm::TrainConfig tc;
    tc.epochs = 60;
    tc.seed = 66;
    tc.batch_size = 64;
    auto report = dcbm::measure_completeness(cbm, ds.X, ds.Y, nullptr,
                                             spec_of({10, 32, 10}), tc);
    CHECK(report.completeness_gap < 0.02);
    CHECK(report.completeness_gap >= -0.005);
}

TEST_CASE("a direct feature-to-label path shows up as a positive gap", "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 3000;
    cfg.dim = 10;
    cfg.seed = 67;
    auto ds = dcbm::generate(cfg);
    // Augmented-generator oracle: a nonlinear x -> y component that bypasses
    // the concepts. A linear bypass would not do: estimation noise in the
    // first-stage fit leaves full-rank carriers that the linear pipeline
    // rescales into a complete recovery of any linear x -> y signal.
    dcbm::RngStream brng(671);
    Matrix v = dcbm::random_gaussian(brng, 10, 1, 1.0 / std::sqrt(10.0));
    Matrix w = dcbm::random_gaussian(brng, 1, 10, 1.0);
    Matrix t = dcbm::mat_mul(ds.X, v);
    double t_var = 0.0;
    for (std::size_t i = 0; i < t.rows; ++i) t_var += t(i, 0) * t(i, 0);
    const double t_std = std::sqrt(t_var / static_cast<double>(t.rows));
    Matrix Y_aug = ds.Y;
    for (std::size_t i = 0; i < Y_aug.rows; ++i) {
        // Saturated tanh of the standardized projection: mostly outside the
        // linear range, so the linear pipeline cannot absorb it.
        const double h = std::tanh(2.0 * t(i, 0) / t_std);
        for (std::size_t c = 0; c < Y_aug.cols; ++c) Y_aug(i, c) += 2.0 * h * w(0, c);
    }
    auto cbm = dcbm::fit_linear_gaussian(ds.X, ds.C, Y_aug);
    dcbm::TrainConfig tc;
    tc.epochs = 300;
    tc.seed = 68;
    tc.batch_size = 64;
    tc.learning_rate = 3e-3;
    auto report = dcbm::measure_completeness(cbm, ds.X, Y_aug, nullptr,
                                             spec_of({10, 32, 10}), tc);
    CHECK(report.completeness_gap > 0.0);
}

TEST_CASE("zero training epochs give exactly zero gap", "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 500;
    cfg.dim = 6;
    cfg.seed = 69;
    auto ds = dcbm::generate(cfg);
    auto cbm = dcbm::fit_linear_gaussian(ds.X, ds.C, ds.Y);
    dcbm::TrainConfig tc;
    tc.epochs = 0;
    auto report = dcbm::measure_completeness(cbm, ds.X, ds.Y, nullptr,
                                             spec_of({6, 8, 6}), tc);
    CHECK(report.completeness_gap == 0.0);
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

TEST_CASE("cbm bundle save/load reproduces predictions bit-exactly", "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 300;
    cfg.dim = 6;
    cfg.seed = 70;
    auto ds = dcbm::generate(cfg);
    auto cbm = dcbm::fit_linear_gaussian(ds.X, ds.C, ds.Y);
    cbm.mc_samples = 25;
    cbm.inference_seed = 71;

    auto dir = std::filesystem::temp_directory_path() / "dcbm_model_bundle_test";
    std::filesystem::remove_all(dir);
    dcbm::save_cbm(cbm, dir);
    auto loaded = dcbm::load_cbm(dir);

    dcbm::RngStream rng(72);
    Matrix probe = dcbm::random_gaussian(rng, 20, 6, 1.0);
    Matrix p1 = cbm.predict_labels(probe);
    Matrix p2 = loaded.predict_labels(probe);
    CHECK(p1.data == p2.data);
    Matrix s1 = cbm.explanation_scores(probe);
    Matrix s2 = loaded.explanation_scores(probe);
    CHECK(s1.data == s2.data);
    std::filesystem::remove_all(dir);
}

TEST_CASE("cbm bundle with mlp head and class-mean debiaser round-trips", "[cbm]") {
    dcbm::SynthConfig cfg;
    cfg.n = 400;
    cfg.dim = 6;
    cfg.num_classes = 4;
    cfg.seed = 73;
    auto ds = dcbm::generate_classification(cfg);

    dcbm::DebiasedCbm cbm;
    cbm.classification = true;
    cbm.debiaser = dcbm::fit_debiaser_class_mean(ds.C, ds.classes, 4);
    Matrix d_hat = cbm.debiaser->predict_classes(ds.classes);
    cbm.concept_dist = dcbm::fit_concept_distribution(ds.X, d_hat, {});
    dcbm::HeadFitOptions opt;
    opt.spec = spec_of({6, 8, 4});
    opt.train.loss = dcbm::Loss::SoftmaxCrossEntropy;
    opt.train.epochs = 10;
    opt.train.seed = 74;
    cbm.head_is_linear = false;
    cbm.mlp_head = dcbm::fit_label_head_mc(cbm.concept_dist, ds.X,
                                           dcbm::one_hot(ds.classes, 4), opt);
    cbm.explanation_center = dcbm::col_means(cbm.expected_concepts(ds.X));
    cbm.mc_samples = 5;
    cbm.inference_seed = 75;

    auto dir = std::filesystem::temp_directory_path() / "dcbm_model_bundle_test2";
    std::filesystem::remove_all(dir);
    dcbm::save_cbm(cbm, dir);
    auto loaded = dcbm::load_cbm(dir);
    Matrix p1 = cbm.predict_labels(ds.X);
    Matrix p2 = loaded.predict_labels(ds.X);
    CHECK(p1.data == p2.data);
    CHECK(loaded.debiaser->predict_classes({2})(0, 0) ==
          cbm.debiaser->predict_classes({2})(0, 0));
    std::filesystem::remove_all(dir);
}
