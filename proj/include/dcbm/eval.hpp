#pragma once

// Experiment harness: the sample-size scaling study (debiased vs regular
// correlation to the true discriminative concepts), the feature-vs-label
// concept predictability comparison, the mask-and-retrain (ROAR) protocol on
// the classification variant, and the ordinal annotation mapping.
//
// Every grid cell derives its seed from the master seed and a cell label, so
// results are independent of execution order and of the worker count.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "dcbm/cbm.hpp"
#include "dcbm/errors.hpp"
#include "dcbm/io.hpp"
#include "dcbm/matrix.hpp"
#include "dcbm/stats.hpp"
#include "dcbm/synth.hpp"

namespace dcbm {

/// Run fn(i) for i in [0, count) on up to `jobs` threads. Each item owns its
/// output slot, so the result is identical for any worker count.
template <typename Fn>
void parallel_for(std::size_t jobs, std::size_t count, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, count == 0 ? 1 : count));
    if (jobs == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < jobs; ++w)
        workers.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                fn(i);
            }
        });
    for (auto& t : workers) t.join();
}

// ---------------------------------------------------------------------------
// Correlation to the ground-truth discriminative concepts
// ---------------------------------------------------------------------------

/// Per-concept Pearson correlation between prediction and truth columns,
/// averaged over the concepts where it is defined.
inline double concept_truth_correlation(const Matrix& predicted, const Matrix& truth) {
    if (!predicted.same_shape(truth))
        throw ShapeError("concept_truth_correlation: shape mismatch");
    if (predicted.rows < 2)
        throw ShapeError("concept_truth_correlation: need at least 2 rows");
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < predicted.cols; ++c) {
        try {
            sum += pearson(predicted.col(c), truth.col(c));
            ++defined;
        } catch (const NumericError&) {
            // constant column: skip
        }
    }
    if (defined == 0)
        throw NumericError("concept_truth_correlation: all columns constant");
    return sum / static_cast<double>(defined);
}

// ---------------------------------------------------------------------------
// Scaling experiment (correlation to truth vs sample size)
// ---------------------------------------------------------------------------

struct ScalingRecord {
    Design design = Design::FullyRandom;
    std::size_t n = 0;
    std::size_t seed_index = 0;
    std::string method; // "regular" | "debiased"
    double correlation = std::numeric_limits<double>::quiet_NaN();
    bool ok = false;
    std::string error;
};

struct ScalingResult {
    std::vector<std::size_t> sample_sizes;
    std::size_t seeds = 0;
    std::vector<ScalingRecord> records; // ordered by (n, seed, method)

    double mean_correlation(std::size_t n, const std::string& method) const {
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& r : records)
            if (r.n == n && r.method == method && r.ok) {
                sum += r.correlation;
                ++count;
            }
        if (count == 0) throw NumericError("mean_correlation: no records");
        return sum / static_cast<double>(count);
    }
};

struct ScalingConfig {
    SynthConfig base;                      // n and seed overridden per cell
    std::vector<std::size_t> sample_sizes; // ascending
    std::size_t seeds = 3;
    double ridge_lambda = 1e-6;
    std::uint64_t master_seed = 0;
    std::size_t jobs = 1;
};

/// For each (n, seed): generate, fit the regular and the debiased
/// linear-Gaussian pipelines on the train split, and score both against the
/// noiseless discriminative concepts on the test split. Failures are kept as
/// marked records rather than aborting the grid.
inline ScalingResult scaling_experiment(const ScalingConfig& cfg) {
    if (cfg.sample_sizes.empty()) throw ConfigError("scaling: no sample sizes");
    for (std::size_t i = 1; i < cfg.sample_sizes.size(); ++i)
        if (cfg.sample_sizes[i] <= cfg.sample_sizes[i - 1])
            throw ConfigError("scaling: sample sizes must be ascending");
    if (cfg.seeds < 1) throw ConfigError("scaling: need at least one seed");

    ScalingResult result;
    result.sample_sizes = cfg.sample_sizes;
    result.seeds = cfg.seeds;
    const std::size_t cells = cfg.sample_sizes.size() * cfg.seeds;
    result.records.resize(cells * 2);

    parallel_for(cfg.jobs, cells, [&](std::size_t cell) {
        const std::size_t ni = cell / cfg.seeds;
        const std::size_t si = cell % cfg.seeds;
        const std::size_t n = cfg.sample_sizes[ni];
        ScalingRecord base_rec;
        base_rec.design = cfg.base.design;
        base_rec.n = n;
        base_rec.seed_index = si;
        ScalingRecord& reg = result.records[cell * 2];
        ScalingRecord& deb = result.records[cell * 2 + 1];
        reg = base_rec;
        reg.method = "regular";
        deb = base_rec;
        deb.method = "debiased";
        try {
            SynthConfig scfg = cfg.base;
            scfg.n = n;
            scfg.seed = derive_seed(cfg.master_seed,
                                    "scaling/" + to_string(cfg.base.design) + "/n=" +
                                        std::to_string(n) + "/seed=" +
                                        std::to_string(si));
            SynthDataset ds = generate(scfg);
            Split split = make_split(n);
            Matrix Xtr = take_rows(ds.X, split.train);
            Matrix Ctr = take_rows(ds.C, split.train);
            Matrix Ytr = take_rows(ds.Y, split.train);
            Matrix Xte = take_rows(ds.X, split.test);
            Matrix Dte = take_rows(ds.D_true, split.test);

            DebiasedCbm r = fit_regular_linear(Xtr, Ctr, Ytr, cfg.ridge_lambda);
            reg.correlation = concept_truth_correlation(r.expected_concepts(Xte), Dte);
            reg.ok = true;

            DebiasedCbm d = fit_linear_gaussian(Xtr, Ctr, Ytr, cfg.ridge_lambda);
            deb.correlation = concept_truth_correlation(d.expected_concepts(Xte), Dte);
            deb.ok = true;
        } catch (const std::exception& e) {
            if (!reg.ok) reg.error = e.what();
            deb.error = e.what();
        }
    });
    return result;
}

inline void write_scaling_csv(const ScalingResult& result,
                              const std::filesystem::path& path) {
    CsvWriter w({"design", "n", "seed", "method", "correlation"});
    for (const auto& r : result.records)
        w.add_row({to_string(r.design), std::to_string(r.n),
                   std::to_string(r.seed_index), r.method, fmt_double(r.correlation)});
    w.save(path);
}

// ---------------------------------------------------------------------------
// Evidence experiment: concepts predicted from features vs from labels
// ---------------------------------------------------------------------------

struct EvidenceReport {
    std::vector<double> rho_x, rho_y;   // per concept; NaN = skipped
    std::vector<std::size_t> order;     // concept ids by rho_y ascending, NaN last
    std::size_t x_beats_y_count = 0;    // concepts with rho_x > rho_y
    std::size_t skipped = 0;
};

/// Fits c_hat(x) (ridge on features) and c_hat(y) (per-class concept means),
/// compares their Spearman correlation with the observed concepts per concept
/// on the test split, and counts where the feature predictor wins.
inline EvidenceReport evidence_experiment(const SynthDataset& ds,
                                          double ridge_lambda = 1e-6) {
    if (!ds.is_classification())
        throw ConfigError("evidence_experiment: needs the classification variant");
    Split split = make_split(ds.X.rows);
    Matrix Xtr = take_rows(ds.X, split.train);
    Matrix Ctr = take_rows(ds.C, split.train);
    Matrix Xte = take_rows(ds.X, split.test);
    Matrix Cte = take_rows(ds.C, split.test);
    std::vector<int> cls_tr, cls_te;
    for (auto i : split.train) cls_tr.push_back(ds.classes[i]);
    for (auto i : split.test) cls_te.push_back(ds.classes[i]);

    LinearModel from_x = solve_least_squares(Xtr, Ctr, ridge_lambda);
    Matrix pred_x = from_x.predict(Xte);
    ConceptDebiaser from_y = fit_debiaser_class_mean(Ctr, cls_tr, ds.num_classes);
    Matrix pred_y = from_y.predict_classes(cls_te);

    EvidenceReport report;
    const std::size_t dim = ds.C.cols;
    report.rho_x.assign(dim, std::numeric_limits<double>::quiet_NaN());
    report.rho_y.assign(dim, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < dim; ++c) {
        try {
            report.rho_x[c] = spearman(pred_x.col(c), Cte.col(c));
            report.rho_y[c] = spearman(pred_y.col(c), Cte.col(c));
            if (report.rho_x[c] > report.rho_y[c]) ++report.x_beats_y_count;
        } catch (const NumericError&) {
            report.rho_x[c] = report.rho_y[c] = std::numeric_limits<double>::quiet_NaN();
            ++report.skipped;
        }
    }
    report.order.resize(dim);
    std::iota(report.order.begin(), report.order.end(), std::size_t{0});
    std::sort(report.order.begin(), report.order.end(),
              [&](std::size_t a, std::size_t b) {
                  const bool na = std::isnan(report.rho_y[a]);
                  const bool nb = std::isnan(report.rho_y[b]);
                  if (na != nb) return nb; // NaN markers last
                  if (!na && report.rho_y[a] != report.rho_y[b])
                      return report.rho_y[a] < report.rho_y[b];
                  return a < b;
              });
    return report;
}

inline void write_evidence_csv(const EvidenceReport& report,
                               const std::filesystem::path& path) {
    CsvWriter w({"concept_id", "rho_x", "rho_y", "x_beats_y"});
    for (std::size_t id : report.order) {
        const bool defined = !std::isnan(report.rho_y[id]);
        const bool beats = defined && report.rho_x[id] > report.rho_y[id];
        w.add_row({std::to_string(id), fmt_double(report.rho_x[id]),
                   fmt_double(report.rho_y[id]), beats ? "1" : "0"});
    }
    w.save(path);
}

// ---------------------------------------------------------------------------
// ROAR: mask the least explanatory concepts and retrain the head
// ---------------------------------------------------------------------------

struct RoarConfig {
    std::vector<double> mask_fractions{0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                       0.6, 0.7, 0.8, 0.9, 0.95};
    std::size_t repeats = 3;
    std::size_t top_k = 1;
    std::size_t mc_samples = 25;
    std::size_t head_hidden = 0; // 0 = linear head
    TrainConfig head_train;      // loss forced to cross-entropy
    double ridge_lambda = 1e-6;
    std::uint64_t master_seed = 0;
    std::size_t jobs = 1;
};

struct RoarCurve {
    std::vector<double> fractions;
    std::size_t repeats = 0;
    // Indexed [fraction][repeat].
    std::vector<std::vector<double>> raw_regular, raw_debiased;
    std::vector<std::vector<double>> norm_regular, norm_debiased;

    std::vector<double> mean_normalized(bool debiased) const {
        const auto& norm = debiased ? norm_debiased : norm_regular;
        std::vector<double> out(fractions.size(), 0.0);
        for (std::size_t f = 0; f < fractions.size(); ++f) {
            for (std::size_t r = 0; r < repeats; ++r) out[f] += norm[f][r];
            out[f] /= static_cast<double>(repeats);
        }
        return out;
    }
};

inline double top_k_accuracy(const Matrix& logits, const std::vector<int>& classes,
                             std::size_t k) {
    if (logits.rows != classes.size()) throw ShapeError("top_k_accuracy: row mismatch");
    if (k < 1 || k > logits.cols) throw ConfigError("top_k_accuracy: bad k");
    std::size_t hits = 0;
    std::vector<std::size_t> idx(logits.cols);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k),
                          idx.end(), [&](std::size_t a, std::size_t b) {
                              if (logits(r, a) != logits(r, b))
                                  return logits(r, a) > logits(r, b);
                              return a < b;
                          });
        for (std::size_t j = 0; j < k; ++j)
            if (static_cast<int>(idx[j]) == classes[r]) {
                ++hits;
                break;
            }
    }
    return static_cast<double>(hits) / static_cast<double>(logits.rows);
}

namespace detail {

struct RoarPipeline {
    GaussianConceptModel dist;
    ConceptRanking ranking;
};

inline RoarPipeline fit_roar_pipeline(const SynthDataset& ds, const Split& split,
                                      bool debiased, double ridge_lambda) {
    Matrix Xtr = take_rows(ds.X, split.train);
    Matrix Ctr = take_rows(ds.C, split.train);
    RoarPipeline p;
    if (debiased) {
        std::vector<int> cls_tr;
        for (auto i : split.train) cls_tr.push_back(ds.classes[i]);
        ConceptDebiaser deb = fit_debiaser_class_mean(Ctr, cls_tr, ds.num_classes);
        Matrix d_hat = deb.predict_classes(cls_tr);
        ConceptDistOptions opt;
        opt.ridge_lambda = ridge_lambda;
        p.dist = fit_concept_distribution(Xtr, d_hat, opt);
    } else {
        ConceptDistOptions opt;
        opt.ridge_lambda = ridge_lambda;
        p.dist = fit_concept_distribution(Xtr, Ctr, opt);
    }
    Matrix scores = p.dist.predict_mean(Xtr);
    auto center = col_means(scores);
    for (std::size_t r = 0; r < scores.rows; ++r)
        for (std::size_t c = 0; c < scores.cols; ++c) scores(r, c) -= center[c];
    p.ranking = rank_concepts(scores);
    return p;
}

} // namespace detail

/// For each method: fit the pipeline once, read off a global concept ranking
/// from the training explanation scores, then for every (fraction, repeat)
/// zero the least-explanatory concepts at the head's input, retrain only the
/// head, and record the test top-k accuracy. Normalization divides each
/// repeat's curve by its fraction-0 point. Head retraining seeds are shared
/// across methods so the comparison is paired.
inline RoarCurve roar_run(const SynthDataset& ds, const RoarConfig& cfg) {
    if (!ds.is_classification())
        throw ConfigError("roar_run: needs the classification variant");
    if (cfg.top_k > ds.num_classes) throw ConfigError("roar_run: top_k > classes");
    if (cfg.repeats < 1) throw ConfigError("roar_run: need repeats >= 1");
    for (double f : cfg.mask_fractions)
        if (f < 0.0 || f > 1.0) throw ConfigError("roar_run: fraction out of range");

    const Split split = make_split(ds.X.rows);
    Matrix Xtr = take_rows(ds.X, split.train);
    Matrix Xva = take_rows(ds.X, split.val);
    Matrix Xte = take_rows(ds.X, split.test);
    std::vector<int> cls_tr, cls_va, cls_te;
    for (auto i : split.train) cls_tr.push_back(ds.classes[i]);
    for (auto i : split.val) cls_va.push_back(ds.classes[i]);
    for (auto i : split.test) cls_te.push_back(ds.classes[i]);
    Matrix Ttr = one_hot(cls_tr, ds.num_classes);
    Matrix Tva = one_hot(cls_va, ds.num_classes);

    const auto regular = detail::fit_roar_pipeline(ds, split, false, cfg.ridge_lambda);
    const auto debiased = detail::fit_roar_pipeline(ds, split, true, cfg.ridge_lambda);

    RoarCurve curve;
    curve.fractions = cfg.mask_fractions;
    curve.repeats = cfg.repeats;
    const std::size_t nf = cfg.mask_fractions.size();
    for (auto* v : {&curve.raw_regular, &curve.raw_debiased, &curve.norm_regular,
                    &curve.norm_debiased})
        v->assign(nf, std::vector<double>(cfg.repeats, 0.0));

    MlpSpec head_spec;
    head_spec.layer_sizes = cfg.head_hidden == 0
                                ? std::vector<std::size_t>{ds.C.cols, ds.num_classes}
                                : std::vector<std::size_t>{ds.C.cols, cfg.head_hidden,
                                                           ds.num_classes};

    const std::size_t cells = nf * cfg.repeats * 2;
    parallel_for(cfg.jobs, cells, [&](std::size_t cell) {
        const std::size_t method = cell % 2; // 0 regular, 1 debiased
        const std::size_t fi = (cell / 2) / cfg.repeats;
        const std::size_t rep = (cell / 2) % cfg.repeats;
        const auto& pipeline = method == 0 ? regular : debiased;
        auto mask = mask_least_explanatory(pipeline.ranking, cfg.mask_fractions[fi]);

        HeadFitOptions opt;
        opt.spec = head_spec;
        opt.train = cfg.head_train;
        opt.train.loss = Loss::SoftmaxCrossEntropy;
        // Shared across methods: paired retraining seeds per (fraction, repeat).
        opt.train.seed = derive_seed(cfg.master_seed,
                                     "roar/f=" + std::to_string(fi) +
                                         "/rep=" + std::to_string(rep));
        opt.mc_samples = cfg.mc_samples;
        opt.concept_mask = mask;
        MlpModel head = fit_label_head_mc(pipeline.dist, Xtr, Ttr, opt, &Xva, &Tva);

        Matrix logits = predict_labels_mc(
            pipeline.dist, head, Xte, cfg.mc_samples,
            derive_seed(cfg.master_seed, "roar-eval/f=" + std::to_string(fi) +
                                             "/rep=" + std::to_string(rep)),
            mask);
        const double acc = top_k_accuracy(logits, cls_te, cfg.top_k);
        (method == 0 ? curve.raw_regular : curve.raw_debiased)[fi][rep] = acc;
    });

    // Normalize each repeat by its fraction-0 accuracy.
    auto find_zero = std::find(curve.fractions.begin(), curve.fractions.end(), 0.0);
    if (find_zero == curve.fractions.end())
        throw ConfigError("roar_run: mask_fractions must include 0");
    const std::size_t zi =
        static_cast<std::size_t>(find_zero - curve.fractions.begin());
    for (std::size_t rep = 0; rep < cfg.repeats; ++rep) {
        const double base_r = curve.raw_regular[zi][rep];
        const double base_d = curve.raw_debiased[zi][rep];
        if (base_r <= 0.0 || base_d <= 0.0)
            throw NumericError("roar_run: zero accuracy at fraction 0");
        for (std::size_t f = 0; f < nf; ++f) {
            curve.norm_regular[f][rep] = curve.raw_regular[f][rep] / base_r;
            curve.norm_debiased[f][rep] = curve.raw_debiased[f][rep] / base_d;
        }
    }
    return curve;
}

inline void write_roar_csv(const RoarCurve& curve, const std::filesystem::path& path) {
    CsvWriter w({"method", "fraction", "repeat", "raw_accuracy", "normalized_accuracy"});
    auto emit = [&](const std::string& method, const auto& raw, const auto& norm) {
        for (std::size_t f = 0; f < curve.fractions.size(); ++f)
            for (std::size_t r = 0; r < curve.repeats; ++r) {
                char frac[32];
                std::snprintf(frac, sizeof(frac), "%g", curve.fractions[f]);
                w.add_row({method, frac, std::to_string(r), fmt_double(raw[f][r]),
                           fmt_double(norm[f][r])});
            }
    };
    emit("regular", curve.raw_regular, curve.norm_regular);
    emit("debiased", curve.raw_debiased, curve.norm_debiased);
    w.save(path);
}

// ---------------------------------------------------------------------------
// Ordinal annotation mapping
// ---------------------------------------------------------------------------

enum class Certainty : int { NotVisible = 1, Guessing = 2, Probably = 3, Definitely = 4 };

/// Eight-row mapping of (exists, certainty) onto [0, 1]: the two "not
/// visible" rows collapse onto 3/6, and confidence orders the rest.
inline double map_annotation(bool exists, Certainty certainty) {
    switch (certainty) {
        case Certainty::Definitely: return exists ? 1.0 : 0.0;
        case Certainty::Probably: return exists ? 5.0 / 6.0 : 1.0 / 6.0;
        case Certainty::Guessing: return exists ? 4.0 / 6.0 : 2.0 / 6.0;
        case Certainty::NotVisible: return 3.0 / 6.0;
    }
    throw ConfigError("map_annotation: invalid certainty code");
}

inline double map_annotation(bool exists, int certainty_code) {
    if (certainty_code < 1 || certainty_code > 4)
        throw ConfigError("map_annotation: certainty code must be 1..4");
    return map_annotation(exists, static_cast<Certainty>(certainty_code));
}

} // namespace dcbm
