#pragma once

// Debiased concept bottleneck models.
//
// The estimator treats the label as an instrument for the concept/feature
// relationship: conditioning the observed concepts on the label averages the
// confounder and annotation noise out to constants, so a model fitted to
// d_hat(y) = E[c|y] learns the label-driven part of the concepts only. The
// full pipeline is
//
//   1. fit d_hat(y) = E[c|y] on (c_i, y_i)          (ConceptDebiaser)
//   2. fit p(d|x) as N(mean(x), diag var) on (x_i, d_hat_i)
//   3. fit the label head g by matching the Monte Carlo average of g over
//      p(d|x) samples to y_i
//   4. explanation scores are E[d|x] minus their training mean
//
// The regular (undebiased) baseline runs the same machinery with the raw
// observed concepts in place of d_hat. When everything is linear-Gaussian the
// three steps collapse to three ridge regressions; that closed form doubles
// as the oracle for the Monte Carlo path.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcbm/errors.hpp"
#include "dcbm/io.hpp"
#include "dcbm/linalg.hpp"
#include "dcbm/matrix.hpp"
#include "dcbm/nnet.hpp"
#include "dcbm/rng.hpp"

namespace dcbm {

enum class DebiaserVariant { ClassMean, Linear, Mlp };

inline std::string to_string(DebiaserVariant v) {
    switch (v) {
        case DebiaserVariant::ClassMean: return "class_mean";
        case DebiaserVariant::Linear: return "linear";
        case DebiaserVariant::Mlp: return "mlp";
    }
    throw ConfigError("bad DebiaserVariant");
}

/// Probability clamped into [0.05, 0.95] and mapped to log-odds. Guards the
/// logit-space training mode against saturated annotation scores.
inline double clamped_logit(double p) {
    const double q = std::clamp(p, 0.05, 0.95);
    return std::log(q / (1.0 - q));
}

/// Zero out masked columns (mask entry 0 = drop, 1 = keep).
inline void apply_concept_mask(Matrix& m, const std::vector<std::uint8_t>& mask) {
    if (mask.empty()) return;
    if (mask.size() != m.cols) throw ShapeError("concept mask width mismatch");
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c)
            if (!mask[c]) m(r, c) = 0.0;
}

// ---------------------------------------------------------------------------
// First stage: d_hat(y) = E[c|y]
// ---------------------------------------------------------------------------

class ConceptDebiaser {
  public:
    DebiaserVariant variant = DebiaserVariant::Linear;
    // ClassMean state: one row per class; counts track which classes were seen.
    Matrix class_means;
    std::vector<std::size_t> class_counts;
    // Linear / Mlp state plus the observed-concept range used for clamping.
    LinearModel linear;
    MlpModel mlp;
    std::vector<double> clamp_lo, clamp_hi;

    std::size_t concept_dim() const {
        switch (variant) {
            case DebiaserVariant::ClassMean: return class_means.cols;
            case DebiaserVariant::Linear: return linear.out_dim();
            case DebiaserVariant::Mlp: return mlp.spec.output_dim();
        }
        throw ConfigError("bad DebiaserVariant");
    }

    /// Debiased concepts for real-valued label vectors (Linear / Mlp).
    Matrix predict(const Matrix& Y) const {
        if (variant == DebiaserVariant::ClassMean)
            throw ConfigError("ClassMean debiaser predicts from class ids");
        Matrix out = variant == DebiaserVariant::Linear ? linear.predict(Y)
                                                        : forward(mlp, Y);
        for (std::size_t r = 0; r < out.rows; ++r)
            for (std::size_t c = 0; c < out.cols; ++c)
                out(r, c) = std::clamp(out(r, c), clamp_lo[c], clamp_hi[c]);
        return out;
    }

    /// Debiased concepts for categorical labels (ClassMean).
    Matrix predict_classes(const std::vector<int>& classes) const {
        if (variant != DebiaserVariant::ClassMean)
            throw ConfigError("predict_classes requires the ClassMean variant");
        Matrix out(classes.size(), class_means.cols);
        for (std::size_t i = 0; i < classes.size(); ++i) {
            const int k = classes[i];
            if (k < 0 || static_cast<std::size_t>(k) >= class_counts.size() ||
                class_counts[static_cast<std::size_t>(k)] == 0)
                throw ConfigError("ClassMean debiaser: unknown class " +
                                  std::to_string(k));
            for (std::size_t c = 0; c < class_means.cols; ++c)
                out(i, c) = class_means(static_cast<std::size_t>(k), c);
        }
        return out;
    }
};

/// Per-class arithmetic means of the training concept vectors.
inline ConceptDebiaser fit_debiaser_class_mean(const Matrix& C,
                                               const std::vector<int>& classes,
                                               std::size_t num_classes) {
    if (C.rows != classes.size())
        throw ShapeError("fit_debiaser_class_mean: row counts disagree");
    ConceptDebiaser d;
    d.variant = DebiaserVariant::ClassMean;
    d.class_means = Matrix(num_classes, C.cols, 0.0);
    d.class_counts.assign(num_classes, 0);
    for (std::size_t i = 0; i < C.rows; ++i) {
        const int k = classes[i];
        if (k < 0 || static_cast<std::size_t>(k) >= num_classes)
            throw ConfigError("fit_debiaser_class_mean: class id out of range");
        d.class_counts[static_cast<std::size_t>(k)]++;
        for (std::size_t c = 0; c < C.cols; ++c)
            d.class_means(static_cast<std::size_t>(k), c) += C(i, c);
    }
    for (std::size_t k = 0; k < num_classes; ++k)
        if (d.class_counts[k] > 0)
            for (std::size_t c = 0; c < C.cols; ++c)
                d.class_means(k, c) /= static_cast<double>(d.class_counts[k]);
    return d;
}

namespace detail {

inline void record_clamp_range(ConceptDebiaser& d, const Matrix& C) {
    d.clamp_lo.assign(C.cols, std::numeric_limits<double>::infinity());
    d.clamp_hi.assign(C.cols, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < C.rows; ++r)
        for (std::size_t c = 0; c < C.cols; ++c) {
            d.clamp_lo[c] = std::min(d.clamp_lo[c], C(r, c));
            d.clamp_hi[c] = std::max(d.clamp_hi[c], C(r, c));
        }
}

} // namespace detail

/// Ridge regression of concepts on real-valued labels; outputs clamped into
/// the observed per-concept range.
inline ConceptDebiaser fit_debiaser_linear(const Matrix& C, const Matrix& Y,
                                           double ridge_lambda = 1e-6) {
    if (C.rows != Y.rows) throw ShapeError("fit_debiaser_linear: row counts disagree");
    ConceptDebiaser d;
    d.variant = DebiaserVariant::Linear;
    d.linear = solve_least_squares(Y, C, ridge_lambda);
    detail::record_clamp_range(d, C);
    return d;
}

/// Small network regression of concepts on labels; clamped like the linear fit.
inline ConceptDebiaser fit_debiaser_mlp(const Matrix& C, const Matrix& Y,
                                        const MlpSpec& spec, const TrainConfig& cfg) {
    if (C.rows != Y.rows) throw ShapeError("fit_debiaser_mlp: row counts disagree");
    if (spec.input_dim() != Y.cols || spec.output_dim() != C.cols)
        throw ShapeError("fit_debiaser_mlp: spec does not match data");
    ConceptDebiaser d;
    d.variant = DebiaserVariant::Mlp;
    d.mlp = init_mlp(spec, derive_seed(cfg.seed, "debiaser-init"));
    TrainConfig tc = cfg;
    tc.loss = Loss::MSE;
    auto result = train(d.mlp, Y, C, tc);
    if (result.diverged) throw TrainingError("fit_debiaser_mlp: training diverged");
    detail::record_clamp_range(d, C);
    return d;
}

// ---------------------------------------------------------------------------
// Second stage: p(d|x) = N(mean(x), diag variance)
// ---------------------------------------------------------------------------

struct GaussianConceptModel {
    bool use_mlp = false;
    LinearModel linear_mean;
    MlpModel mlp_mean;
    std::vector<double> variance; // per concept; 0 collapses sampling onto the mean
    bool logit_space = false;     // mean model fitted to clamped logits of targets

    std::size_t concept_dim() const {
        return use_mlp ? mlp_mean.spec.output_dim() : linear_mean.out_dim();
    }

    Matrix predict_mean(const Matrix& X) const {
        return use_mlp ? forward(mlp_mean, X) : linear_mean.predict(X);
    }

    bool variance_is_zero() const {
        for (double v : variance)
            if (v != 0.0) return false;
        return true;
    }

    /// S blocks of `means.rows` sampled rows stacked vertically: block s holds
    /// mean + sqrt(var) * z for every example. Zero variance returns the mean
    /// exactly. The noise layout is a fixed 16-way chunking of the rows, each
    /// chunk with its own stream derived from `seed`, so the draws do not
    /// depend on how many threads fill them.
    Matrix sample_stacked(const Matrix& means, std::size_t S, std::uint64_t seed,
                          std::size_t fill_threads = 1) const {
        static constexpr std::size_t kChunks = 16;
        Matrix out(means.rows * S, means.cols);
        std::vector<double> sd(variance.size());
        for (std::size_t c = 0; c < variance.size(); ++c) sd[c] = std::sqrt(variance[c]);
        const std::size_t total = means.rows * S;
        const std::size_t per_chunk = (total + kChunks - 1) / kChunks;
        auto fill_chunk = [&](std::size_t chunk) {
            const std::size_t begin = chunk * per_chunk;
            const std::size_t end = std::min(total, begin + per_chunk);
            if (begin >= end) return;
            RngStream rng(derive_seed(seed, "mc-chunk/" + std::to_string(chunk)));
            for (std::size_t row = begin; row < end; ++row) {
                const std::size_t r = row % means.rows;
                for (std::size_t c = 0; c < means.cols; ++c) {
                    const double noise = sd[c] == 0.0 ? 0.0 : sd[c] * rng.normal();
                    out(row, c) = means(r, c) + noise;
                }
            }
        };
        if (fill_threads <= 1) {
            for (std::size_t chunk = 0; chunk < kChunks; ++chunk) fill_chunk(chunk);
        } else {
            std::vector<std::thread> workers;
            std::atomic<std::size_t> next{0};
            const std::size_t nworkers = std::min<std::size_t>(fill_threads, kChunks);
            for (std::size_t w = 0; w < nworkers; ++w)
                workers.emplace_back([&] {
                    for (;;) {
                        const std::size_t chunk = next.fetch_add(1);
                        if (chunk >= kChunks) return;
                        fill_chunk(chunk);
                    }
                });
            for (auto& t : workers) t.join();
        }
        return out;
    }
};

struct ConceptDistOptions {
    bool use_mlp = false;
    MlpSpec mlp_spec;   // consulted when use_mlp
    TrainConfig train;  // consulted when use_mlp (loss forced to MSE)
    double ridge_lambda = 1e-6;
    bool logit_space = false;       // probability targets: clamp + logit first
    double variance_floor_std = 1e-6; // floor on the per-concept std
};

/// Mean model fitted with MSE on (x_i, d_hat_i); per-concept variance is the
/// mean squared training residual (the Gaussian MLE given the fitted mean),
/// floored at variance_floor_std^2.
inline GaussianConceptModel
fit_concept_distribution(const Matrix& X, const Matrix& D_hat,
                         const ConceptDistOptions& opt, const Matrix* X_val = nullptr,
                         const Matrix* D_val = nullptr) {
    if (X.rows != D_hat.rows)
        throw ShapeError("fit_concept_distribution: row counts disagree");
    GaussianConceptModel g;
    g.use_mlp = opt.use_mlp;
    g.logit_space = opt.logit_space;

    Matrix T = D_hat;
    if (opt.logit_space)
        for (double& v : T.data) v = clamped_logit(v);
    std::optional<Matrix> T_val;
    if (D_val != nullptr) {
        T_val = *D_val;
        if (opt.logit_space)
            for (double& v : T_val->data) v = clamped_logit(v);
    }

    if (opt.use_mlp) {
        if (opt.mlp_spec.input_dim() != X.cols || opt.mlp_spec.output_dim() != T.cols)
            throw ShapeError("fit_concept_distribution: spec does not match data");
        g.mlp_mean = init_mlp(opt.mlp_spec, derive_seed(opt.train.seed, "dist-init"));
        TrainConfig tc = opt.train;
        tc.loss = Loss::MSE;
        auto result = train(g.mlp_mean, X, T, tc,
                            X_val != nullptr ? X_val : nullptr,
                            T_val ? &*T_val : nullptr);
        if (result.diverged)
            throw TrainingError("fit_concept_distribution: training diverged");
    } else {
        g.linear_mean = solve_least_squares(X, T, opt.ridge_lambda);
    }

    Matrix pred = g.predict_mean(X);
    g.variance.assign(T.cols, 0.0);
    for (std::size_t r = 0; r < T.rows; ++r)
        for (std::size_t c = 0; c < T.cols; ++c) {
            const double resid = T(r, c) - pred(r, c);
            g.variance[c] += resid * resid;
        }
    const double floor = opt.variance_floor_std * opt.variance_floor_std;
    for (double& v : g.variance)
        v = std::max(v / static_cast<double>(T.rows), floor);
    return g;
}

// ---------------------------------------------------------------------------
// Third stage: label head fitted through the Monte Carlo average
// ---------------------------------------------------------------------------

struct HeadFitOptions {
    MlpSpec spec;
    TrainConfig train;
    std::size_t mc_samples = 25; // 0 = fit on the mean predictions directly
    std::vector<std::uint8_t> concept_mask; // empty = keep all concepts
    std::size_t sampling_threads = 1; // fill threads; draws are thread-count invariant
};

/// Fits g by matching (1/S) sum_s g(d_s), d_s ~ p(d|x), to the targets under
/// the configured loss. The concept distribution stays frozen; only g trains.
/// All-zero variances degenerate to fitting g on the means, exactly.
inline MlpModel fit_label_head_mc(const GaussianConceptModel& dist, const Matrix& X,
                                  const Matrix& targets, const HeadFitOptions& opt,
                                  const Matrix* X_val = nullptr,
                                  const Matrix* Y_val = nullptr) {
    opt.train.validate();
    if (X.rows != targets.rows) throw ShapeError("fit_label_head_mc: row mismatch");
    if (opt.spec.input_dim() != dist.concept_dim())
        throw ShapeError("fit_label_head_mc: head input does not match concept dim");
    if ((X_val == nullptr) != (Y_val == nullptr))
        throw ConfigError("fit_label_head_mc: validation needs X and Y");

    const std::size_t S_cfg = opt.mc_samples;
    const bool mean_path = S_cfg == 0 || dist.variance_is_zero();
    const std::size_t S = mean_path ? 1 : S_cfg;

    MlpModel head = init_mlp(opt.spec, derive_seed(opt.train.seed, "head-init"));
    RngStream shuffle_rng(derive_seed(opt.train.seed, "head-shuffle"));
    const std::uint64_t mc_base = derive_seed(opt.train.seed, "head-mc");

    Matrix means = dist.predict_mean(X);
    apply_concept_mask(means, opt.concept_mask);

    // Fixed validation noise so the early-stopping signal is deterministic.
    std::optional<Matrix> val_stacked;
    if (X_val != nullptr) {
        Matrix vmeans = dist.predict_mean(*X_val);
        apply_concept_mask(vmeans, opt.concept_mask);
        if (mean_path)
            val_stacked = std::move(vmeans);
        else
            val_stacked = dist.sample_stacked(vmeans, S,
                                              derive_seed(opt.train.seed, "head-mc-val"),
                                              opt.sampling_threads);
    }

    MlpModel best = head;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    std::vector<std::size_t> order(X.rows);
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::size_t batch_counter = 0;
    for (std::size_t epoch = 0; epoch < opt.train.epochs; ++epoch) {
        if (opt.train.shuffle) shuffle_rng.shuffle(order);
        TrainConfig step_cfg = opt.train;
        step_cfg.learning_rate = opt.train.lr_at(epoch);
        bool diverged = false;
        for (std::size_t start = 0; start < order.size();
             start += opt.train.batch_size) {
            const std::size_t stop =
                std::min(order.size(), start + opt.train.batch_size);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
            const std::size_t B = idx.size();
            Matrix mb = take_rows(means, idx);
            Matrix tb = take_rows(targets, idx);
            const std::uint64_t batch_seed =
                derive_seed(mc_base, "batch/" + std::to_string(batch_counter++));
            Matrix stacked = mean_path ? std::move(mb)
                                       : dist.sample_stacked(mb, S, batch_seed,
                                                             opt.sampling_threads);
            if (!mean_path) apply_concept_mask(stacked, opt.concept_mask);

            detail::ForwardCache cache = detail::forward_cached(head, stacked);
            // Average the S blocks into per-example outputs.
            Matrix avg(B, cache.output.cols, 0.0);
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t r = 0; r < B; ++r)
                    for (std::size_t c = 0; c < avg.cols; ++c)
                        avg(r, c) += cache.output(s * B + r, c);
            const double inv_s = 1.0 / static_cast<double>(S);
            for (double& v : avg.data) v *= inv_s;

            double value;
            Matrix d_avg;
            try {
                std::tie(value, d_avg) = loss_and_grad(avg, tb, opt.train.loss);
            } catch (const TrainingError&) {
                diverged = true;
                break;
            }
            (void)value;
            Matrix d_stacked(S * B, d_avg.cols);
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t r = 0; r < B; ++r)
                    for (std::size_t c = 0; c < d_avg.cols; ++c)
                        d_stacked(s * B + r, c) = d_avg(r, c) * inv_s;
            Gradients grads = backward_from_output_grad(head, cache, d_stacked);
            adam_step(head, grads, step_cfg);
        }
        if (diverged) throw TrainingError("fit_label_head_mc: non-finite loss");

        if (X_val != nullptr) {
            Matrix vout = forward(head, *val_stacked);
            const std::size_t nv = X_val->rows;
            Matrix vavg(nv, vout.cols, 0.0);
            const std::size_t SV = vout.rows / nv;
            for (std::size_t s = 0; s < SV; ++s)
                for (std::size_t r = 0; r < nv; ++r)
                    for (std::size_t c = 0; c < vavg.cols; ++c)
                        vavg(r, c) += vout(s * nv + r, c);
            for (double& v : vavg.data) v /= static_cast<double>(SV);
            double vloss;
            try {
                vloss = loss_value(vavg, *Y_val, opt.train.loss);
            } catch (const TrainingError&) {
                throw TrainingError("fit_label_head_mc: non-finite validation loss");
            }
            if (vloss < best_val) {
                best_val = vloss;
                best = head;
                since_best = 0;
            } else if (++since_best >= opt.train.patience) {
                break;
            }
        }
    }
    if (X_val != nullptr && std::isfinite(best_val)) head = best;
    return head;
}

/// Monte Carlo label prediction: average of head outputs over S samples from
/// p(d|x), deterministic in (seed). Masked concepts are zeroed before the head.
inline Matrix predict_labels_mc(const GaussianConceptModel& dist, const MlpModel& head,
                                const Matrix& X, std::size_t S, std::uint64_t seed,
                                const std::vector<std::uint8_t>& mask = {},
                                std::size_t sampling_threads = 1) {
    Matrix means = dist.predict_mean(X);
    apply_concept_mask(means, mask);
    if (S == 0 || dist.variance_is_zero()) return forward(head, means);
    Matrix stacked = dist.sample_stacked(means, S, derive_seed(seed, "predict-mc"),
                                         sampling_threads);
    apply_concept_mask(stacked, mask);
    Matrix out = forward(head, stacked);
    Matrix avg(X.rows, out.cols, 0.0);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t r = 0; r < X.rows; ++r)
            for (std::size_t c = 0; c < avg.cols; ++c)
                avg(r, c) += out(s * X.rows + r, c);
    for (double& v : avg.data) v /= static_cast<double>(S);
    return avg;
}

// ---------------------------------------------------------------------------
// The assembled model
// ---------------------------------------------------------------------------

struct DebiasedCbm {
    std::optional<ConceptDebiaser> debiaser; // absent for the regular baseline
    GaussianConceptModel concept_dist;
    bool head_is_linear = true;
    LinearModel linear_head;
    MlpModel mlp_head;
    std::vector<double> explanation_center; // training mean of E[d|x]
    std::size_t mc_samples = 25;
    std::uint64_t inference_seed = 0;
    bool classification = false;

    Matrix expected_concepts(const Matrix& X) const {
        return concept_dist.predict_mean(X);
    }

    /// E[d|x_i] minus the stored training mean; removes the constant offset
    /// that confounding and noise contribute.
    Matrix explanation_scores(const Matrix& X) const {
        Matrix s = expected_concepts(X);
        if (explanation_center.size() != s.cols)
            throw ShapeError("explanation_scores: center not fitted");
        for (std::size_t r = 0; r < s.rows; ++r)
            for (std::size_t c = 0; c < s.cols; ++c)
                s(r, c) -= explanation_center[c];
        return s;
    }

    /// Label scores through the Monte Carlo average (stored sample count and
    /// seed, so repeated calls agree bit-for-bit). Exact for linear heads.
    Matrix predict_labels(const Matrix& X) const {
        if (head_is_linear) return linear_head.predict(expected_concepts(X));
        return predict_labels_mc(concept_dist, mlp_head, X, mc_samples, inference_seed);
    }

    /// Fast approximate path: head applied to the mean concept vector alone.
    /// Coincides with predict_labels for linear heads or zero variance.
    Matrix predict_labels_mean(const Matrix& X) const {
        if (head_is_linear) return linear_head.predict(expected_concepts(X));
        return forward(mlp_head, expected_concepts(X));
    }
};

// ---------------------------------------------------------------------------
// Concept ranking for explanations and ROAR
// ---------------------------------------------------------------------------

struct ConceptRanking {
    // Per example: concept indices by |score| descending (display order).
    std::vector<std::vector<std::size_t>> per_example;
    // Global: by mean |score| ascending, i.e. least explanatory first.
    std::vector<std::size_t> global_ascending;
    std::vector<double> global_mean_abs;
};

inline ConceptRanking rank_concepts(const Matrix& scores) {
    require_finite(scores, "rank_concepts");
    ConceptRanking r;
    r.global_mean_abs.assign(scores.cols, 0.0);
    for (std::size_t i = 0; i < scores.rows; ++i)
        for (std::size_t c = 0; c < scores.cols; ++c)
            r.global_mean_abs[c] += std::abs(scores(i, c));
    for (double& v : r.global_mean_abs)
        v /= static_cast<double>(std::max<std::size_t>(scores.rows, 1));

    r.global_ascending.resize(scores.cols);
    std::iota(r.global_ascending.begin(), r.global_ascending.end(), std::size_t{0});
    std::sort(r.global_ascending.begin(), r.global_ascending.end(),
              [&](std::size_t a, std::size_t b) {
                  if (r.global_mean_abs[a] != r.global_mean_abs[b])
                      return r.global_mean_abs[a] < r.global_mean_abs[b];
                  return a < b; // deterministic tie-break
              });

    r.per_example.resize(scores.rows);
    for (std::size_t i = 0; i < scores.rows; ++i) {
        auto& ord = r.per_example[i];
        ord.resize(scores.cols);
        std::iota(ord.begin(), ord.end(), std::size_t{0});
        std::sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) {
            const double va = std::abs(scores(i, a));
            const double vb = std::abs(scores(i, b));
            if (va != vb) return va > vb;
            return a < b;
        });
    }
    return r;
}

/// Mask dropping the least-explanatory `floor(fraction * dim)` concepts.
inline std::vector<std::uint8_t> mask_least_explanatory(const ConceptRanking& ranking,
                                                        double fraction) {
    const std::size_t dim = ranking.global_ascending.size();
    const std::size_t drop = std::min(
        dim, static_cast<std::size_t>(fraction * static_cast<double>(dim) + 1e-9));
    std::vector<std::uint8_t> mask(dim, 1);
    for (std::size_t i = 0; i < drop; ++i) mask[ranking.global_ascending[i]] = 0;
    return mask;
}

// ---------------------------------------------------------------------------
// Linear-Gaussian closed form and the regular baseline
// ---------------------------------------------------------------------------

/// Three ridge regressions: y -> c (debias), x -> d_hat, d_hat_hat -> y.
/// Equivalent to sequential bottleneck training on the debiased concepts.
inline DebiasedCbm fit_linear_gaussian(const Matrix& X, const Matrix& C, const Matrix& Y,
                                       double ridge_lambda = 1e-6) {
    DebiasedCbm cbm;
    cbm.debiaser = fit_debiaser_linear(C, Y, ridge_lambda);
    Matrix d_hat = cbm.debiaser->predict(Y);

    cbm.concept_dist.use_mlp = false;
    cbm.concept_dist.linear_mean = solve_least_squares(X, d_hat, ridge_lambda);
    Matrix d_hat_hat = cbm.concept_dist.linear_mean.predict(X);
    // Isotropic variance: one shared mean-squared residual.
    double mse = 0.0;
    for (std::size_t i = 0; i < d_hat.data.size(); ++i) {
        const double r = d_hat.data[i] - d_hat_hat.data[i];
        mse += r * r;
    }
    mse /= static_cast<double>(d_hat.data.size());
    cbm.concept_dist.variance.assign(d_hat.cols, mse);

    cbm.head_is_linear = true;
    cbm.linear_head = solve_least_squares(d_hat_hat, Y, ridge_lambda);
    cbm.explanation_center = col_means(d_hat_hat);
    return cbm;
}

/// Undebiased baseline: identical pipeline trained on the raw observed
/// concepts (the comparison arm in every experiment).
inline DebiasedCbm fit_regular_linear(const Matrix& X, const Matrix& C, const Matrix& Y,
                                      double ridge_lambda = 1e-6) {
    DebiasedCbm cbm;
    cbm.concept_dist.use_mlp = false;
    cbm.concept_dist.linear_mean = solve_least_squares(X, C, ridge_lambda);
    Matrix c_hat = cbm.concept_dist.linear_mean.predict(X);
    double mse = 0.0;
    for (std::size_t i = 0; i < C.data.size(); ++i) {
        const double r = C.data[i] - c_hat.data[i];
        mse += r * r;
    }
    mse /= static_cast<double>(C.data.size());
    cbm.concept_dist.variance.assign(C.cols, mse);

    cbm.head_is_linear = true;
    cbm.linear_head = solve_least_squares(c_hat, Y, ridge_lambda);
    cbm.explanation_center = col_means(c_hat);
    return cbm;
}

// ---------------------------------------------------------------------------
// Completeness: residual predictive information in the features
// ---------------------------------------------------------------------------

struct CompletenessReport {
    double cbm_only_metric = 0.0;  // R^2 (regression) or accuracy (classification)
    double combined_metric = 0.0;  // same metric with the residual model added
    double completeness_gap = 0.0; // combined - cbm_only
};

namespace detail {

inline double r_squared(const Matrix& truth, const Matrix& pred) {
    auto mu = col_means(truth);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t r = 0; r < truth.rows; ++r)
        for (std::size_t c = 0; c < truth.cols; ++c) {
            const double dr = truth(r, c) - pred(r, c);
            const double dt = truth(r, c) - mu[c];
            ss_res += dr * dr;
            ss_tot += dt * dt;
        }
    if (ss_tot == 0.0) throw NumericError("r_squared: constant targets");
    return 1.0 - ss_res / ss_tot;
}

inline double top1_accuracy(const Matrix& logits, const std::vector<int>& classes) {
    std::size_t hits = 0;
    for (std::size_t r = 0; r < logits.rows; ++r) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < logits.cols; ++c)
            if (logits(r, c) > logits(r, arg)) arg = c;
        if (static_cast<int>(arg) == classes[r]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(logits.rows);
}

inline void zero_output_layer(MlpModel& m) {
    for (double& v : m.weights.back().data) v = 0.0;
    for (double& v : m.biases.back()) v = 0.0;
}

} // namespace detail

/// Fits an unrestricted network q(x) to what the CBM leaves unexplained and
/// reports the held-out improvement. q's output layer starts at zero, so an
/// untrained q changes nothing and the gap can only reflect learned signal.
/// Classification combines as softmax(g_logits + q_logits).
inline CompletenessReport
measure_completeness(const DebiasedCbm& cbm, const Matrix& X, const Matrix& Y,
                     const std::vector<int>* classes, const MlpSpec& q_spec,
                     const TrainConfig& cfg) {
    const std::size_t n = X.rows;
    if (n < 10) throw ConfigError("measure_completeness: too few rows");
    // Internal split: train q on 70%, early-stop on 15%, report on 15%.
    const std::size_t n_train = (n * 70) / 100;
    const std::size_t n_val = (n * 15) / 100;
    std::vector<std::size_t> itr(n_train), iva(n_val), ite(n - n_train - n_val);
    std::iota(itr.begin(), itr.end(), std::size_t{0});
    std::iota(iva.begin(), iva.end(), n_train);
    std::iota(ite.begin(), ite.end(), n_train + n_val);

    Matrix base = cbm.predict_labels(X); // frozen CBM predictions / logits
    MlpModel q = init_mlp(q_spec, derive_seed(cfg.seed, "q-init"));
    detail::zero_output_layer(q);

    Matrix Xtr = take_rows(X, itr), Xva = take_rows(X, iva), Xte = take_rows(X, ite);
    Matrix Ttr = take_rows(Y, itr), Tva = take_rows(Y, iva);
    Matrix Btr = take_rows(base, itr), Bva = take_rows(base, iva),
           Bte = take_rows(base, ite);

    TrainConfig tc = cfg;
    tc.loss = cbm.classification ? Loss::SoftmaxCrossEntropy : Loss::MSE;
    auto result = train(q, Xtr, Ttr, tc, &Xva, &Tva, &Btr, &Bva);
    if (result.diverged) throw TrainingError("measure_completeness: q diverged");

    Matrix q_te = forward(q, Xte);
    Matrix combined = Bte;
    combined.map() += q_te.map();

    CompletenessReport report;
    if (cbm.classification) {
        if (classes == nullptr)
            throw ConfigError("measure_completeness: classification needs class ids");
        std::vector<int> cte(ite.size());
        for (std::size_t i = 0; i < ite.size(); ++i) cte[i] = (*classes)[ite[i]];
        report.cbm_only_metric = detail::top1_accuracy(Bte, cte);
        report.combined_metric = detail::top1_accuracy(combined, cte);
    } else {
        Matrix Yte = take_rows(Y, ite);
        report.cbm_only_metric = detail::r_squared(Yte, Bte);
        report.combined_metric = detail::r_squared(Yte, combined);
    }
    report.completeness_gap = report.combined_metric - report.cbm_only_metric;
    return report;
}

// ---------------------------------------------------------------------------
// Serialization: directory bundle, bit-exact reload
// ---------------------------------------------------------------------------

namespace detail {

inline std::string save_linear_model(const LinearModel& m) {
    std::ostringstream out;
    out << "linear " << m.weights.rows << ' ' << m.weights.cols << ' '
        << fmt_hex(m.ridge_lambda) << ' ' << (m.degenerate ? 1 : 0) << '\n';
    for (std::size_t r = 0; r < m.weights.rows; ++r) {
        for (std::size_t c = 0; c < m.weights.cols; ++c) {
            if (c) out << ' ';
            out << fmt_hex(m.weights(r, c));
        }
        out << '\n';
    }
    for (std::size_t i = 0; i < m.intercept.size(); ++i) {
        if (i) out << ' ';
        out << fmt_hex(m.intercept[i]);
    }
    out << '\n';
    return out.str();
}

inline LinearModel load_linear_model(const std::string& text) {
    std::istringstream in(text);
    std::string tag, lambda_hex;
    std::size_t rows, cols;
    int degen;
    if (!(in >> tag >> rows >> cols >> lambda_hex >> degen) || tag != "linear")
        throw ConfigError("linear model load: bad header");
    LinearModel m;
    m.ridge_lambda = std::strtod(lambda_hex.c_str(), nullptr);
    m.degenerate = degen != 0;
    m.weights = Matrix(rows, cols);
    for (auto& v : m.weights.data) {
        std::string cell;
        if (!(in >> cell)) throw ConfigError("linear model load: truncated");
        v = std::strtod(cell.c_str(), nullptr);
    }
    m.intercept.assign(rows, 0.0);
    for (auto& v : m.intercept) {
        std::string cell;
        if (!(in >> cell)) throw ConfigError("linear model load: truncated");
        v = std::strtod(cell.c_str(), nullptr);
    }
    return m;
}

inline std::string save_vector_hex(const std::vector<double>& v) {
    std::ostringstream out;
    out << v.size() << '\n';
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out << ' ';
        out << fmt_hex(v[i]);
    }
    out << '\n';
    return out.str();
}

inline std::vector<double> load_vector_hex(const std::string& text) {
    std::istringstream in(text);
    std::size_t n;
    if (!(in >> n)) throw ConfigError("vector load: bad header");
    std::vector<double> v(n);
    for (auto& x : v) {
        std::string cell;
        if (!(in >> cell)) throw ConfigError("vector load: truncated");
        x = std::strtod(cell.c_str(), nullptr);
    }
    return v;
}

inline std::string save_matrix_hex(const Matrix& m) {
    std::ostringstream out;
    out << m.rows << ' ' << m.cols << '\n';
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            if (c) out << ' ';
            out << fmt_hex(m(r, c));
        }
        out << '\n';
    }
    return out.str();
}

inline Matrix load_matrix_hex(const std::string& text) {
    std::istringstream in(text);
    std::size_t rows, cols;
    if (!(in >> rows >> cols)) throw ConfigError("matrix load: bad header");
    Matrix m(rows, cols);
    for (auto& v : m.data) {
        std::string cell;
        if (!(in >> cell)) throw ConfigError("matrix load: truncated");
        v = std::strtod(cell.c_str(), nullptr);
    }
    return m;
}

} // namespace detail

inline void save_cbm(const DebiasedCbm& cbm, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest{
        {"kind", "dcbm_model"},
        {"version", 1},
        {"classification", cbm.classification},
        {"mc_samples", cbm.mc_samples},
        {"inference_seed", cbm.inference_seed},
        {"head", cbm.head_is_linear ? "linear" : "mlp"},
        {"concept_mean", cbm.concept_dist.use_mlp ? "mlp" : "linear"},
        {"logit_space", cbm.concept_dist.logit_space},
        {"debiaser", cbm.debiaser ? to_string(cbm.debiaser->variant)
                                  : std::string("none")}};
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

    if (cbm.debiaser) {
        const ConceptDebiaser& d = *cbm.debiaser;
        std::ostringstream out;
        if (d.variant == DebiaserVariant::ClassMean) {
            out << detail::save_matrix_hex(d.class_means);
            for (std::size_t i = 0; i < d.class_counts.size(); ++i) {
                if (i) out << ' ';
                out << d.class_counts[i];
            }
            out << '\n';
        } else {
            if (d.variant == DebiaserVariant::Linear)
                out << detail::save_linear_model(d.linear);
            else
                out << save_mlp(d.mlp);
            out << detail::save_vector_hex(d.clamp_lo);
            out << detail::save_vector_hex(d.clamp_hi);
        }
        write_text_file(dir / "debiaser.txt", out.str());
    }
    write_text_file(dir / "concept_mean.txt",
                    cbm.concept_dist.use_mlp
                        ? save_mlp(cbm.concept_dist.mlp_mean)
                        : detail::save_linear_model(cbm.concept_dist.linear_mean));
    write_text_file(dir / "variance.txt",
                    detail::save_vector_hex(cbm.concept_dist.variance));
    write_text_file(dir / "head.txt", cbm.head_is_linear
                                          ? detail::save_linear_model(cbm.linear_head)
                                          : save_mlp(cbm.mlp_head));
    write_text_file(dir / "center.txt",
                    detail::save_vector_hex(cbm.explanation_center));
}

inline DebiasedCbm load_cbm(const std::filesystem::path& dir) {
    auto manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    if (manifest.at("kind") != "dcbm_model" || manifest.at("version") != 1)
        throw ConfigError("load_cbm: unrecognized bundle");
    DebiasedCbm cbm;
    cbm.classification = manifest.at("classification").get<bool>();
    cbm.mc_samples = manifest.at("mc_samples").get<std::size_t>();
    cbm.inference_seed = manifest.at("inference_seed").get<std::uint64_t>();
    cbm.head_is_linear = manifest.at("head") == "linear";
    cbm.concept_dist.use_mlp = manifest.at("concept_mean") == "mlp";
    cbm.concept_dist.logit_space = manifest.at("logit_space").get<bool>();

    const std::string debiaser_kind = manifest.at("debiaser");
    if (debiaser_kind != "none") {
        ConceptDebiaser d;
        std::string text = read_text_file(dir / "debiaser.txt");
        std::istringstream in(text);
        if (debiaser_kind == "class_mean") {
            d.variant = DebiaserVariant::ClassMean;
            std::size_t rows, cols;
            in >> rows >> cols;
            d.class_means = Matrix(rows, cols);
            for (auto& v : d.class_means.data) {
                std::string cell;
                if (!(in >> cell)) throw ConfigError("load_cbm: debiaser truncated");
                v = std::strtod(cell.c_str(), nullptr);
            }
            d.class_counts.assign(rows, 0);
            for (auto& c : d.class_counts)
                if (!(in >> c)) throw ConfigError("load_cbm: class counts truncated");
        } else {
            // Linear and MLP variants carry the model followed by clamp bounds.
            if (debiaser_kind == "linear") {
                d.variant = DebiaserVariant::Linear;
                std::string tag;
                std::size_t rows, cols;
                std::string lambda_hex;
                int degen;
                in >> tag >> rows >> cols >> lambda_hex >> degen;
                if (tag != "linear") throw ConfigError("load_cbm: bad debiaser header");
                d.linear.ridge_lambda = std::strtod(lambda_hex.c_str(), nullptr);
                d.linear.degenerate = degen != 0;
                d.linear.weights = Matrix(rows, cols);
                for (auto& v : d.linear.weights.data) {
                    std::string cell;
                    in >> cell;
                    v = std::strtod(cell.c_str(), nullptr);
                }
                d.linear.intercept.assign(rows, 0.0);
                for (auto& v : d.linear.intercept) {
                    std::string cell;
                    in >> cell;
                    v = std::strtod(cell.c_str(), nullptr);
                }
            } else {
                d.variant = DebiaserVariant::Mlp;
                // The MLP blob ends with the line "end".
                std::string blob, line;
                while (std::getline(in, line)) {
                    blob += line + "\n";
                    if (line == "end") break;
                }
                d.mlp = load_mlp(blob);
            }
            std::size_t n;
            in >> n;
            d.clamp_lo.assign(n, 0.0);
            for (auto& v : d.clamp_lo) {
                std::string cell;
                in >> cell;
                v = std::strtod(cell.c_str(), nullptr);
            }
            in >> n;
            d.clamp_hi.assign(n, 0.0);
            for (auto& v : d.clamp_hi) {
                std::string cell;
                in >> cell;
                v = std::strtod(cell.c_str(), nullptr);
            }
        }
        cbm.debiaser = std::move(d);
    }

    if (cbm.concept_dist.use_mlp)
        cbm.concept_dist.mlp_mean = load_mlp(read_text_file(dir / "concept_mean.txt"));
    else
        cbm.concept_dist.linear_mean =
            detail::load_linear_model(read_text_file(dir / "concept_mean.txt"));
    cbm.concept_dist.variance = detail::load_vector_hex(read_text_file(dir / "variance.txt"));
    if (cbm.head_is_linear)
        cbm.linear_head = detail::load_linear_model(read_text_file(dir / "head.txt"));
    else
        cbm.mlp_head = load_mlp(read_text_file(dir / "head.txt"));
    cbm.explanation_center = detail::load_vector_hex(read_text_file(dir / "center.txt"));
    return cbm;
}

} // namespace dcbm
