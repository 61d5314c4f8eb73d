#pragma once

// Synthetic structural-equation dataset generator. Labels y and confounders
// u are drawn independently; discriminative concepts d derive from y alone,
// observed concepts add the confounder's contribution, and features mix both:
//
//   d = W1 y + eps_d
//   c = d + W2 u
//   x = W3 d + W4 u + eps_x            (+ optional direct W5 y leak)
//
// Two designs for the generator matrices: fully random Gaussian entries, or
// a shared-eigenbasis construction W_j = Q L_j Q^T whose spectra make the
// label path (W1) exactly orthogonal to the confounding paths (W2, W4).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcbm/errors.hpp"
#include "dcbm/io.hpp"
#include "dcbm/linalg.hpp"
#include "dcbm/matrix.hpp"
#include "dcbm/rng.hpp"

namespace dcbm {

enum class Design { FullyRandom, OrthogonalConfounding };

inline std::string to_string(Design d) {
    return d == Design::FullyRandom ? "random" : "orthogonal";
}

inline Design design_from_string(const std::string& s) {
    if (s == "random") return Design::FullyRandom;
    if (s == "orthogonal") return Design::OrthogonalConfounding;
    throw ConfigError("unknown design '" + s + "' (expected random|orthogonal)");
}

struct SynthConfig {
    std::size_t n = 1000;
    std::size_t dim = 100;
    double noise_sigma = 0.02; // std of eps_d and eps_x (0 allowed as diagnostic)
    double w_sigma = 0.1;      // std of W entries in the fully-random design
    Design design = Design::FullyRandom;
    std::uint64_t seed = 0;
    std::size_t num_classes = 0; // 0 = regression variant
    double class_jitter = 0.1;   // label jitter around class prototypes
    double confounding_scale = 1.0;    // scales W2 and W4 (0 disables confounding)
    double direct_path_strength = 0.0; // adds strength * W5 y to x
    bool keep_noise = false;           // retain eps_d / eps_x for diagnostics

    void validate() const {
        if (n < 1) throw ConfigError("SynthConfig: n must be >= 1");
        if (dim < 2) throw ConfigError("SynthConfig: dim must be >= 2");
        if (noise_sigma < 0) throw ConfigError("SynthConfig: noise_sigma must be >= 0");
        if (!(w_sigma > 0)) throw ConfigError("SynthConfig: w_sigma must be > 0");
        if (confounding_scale < 0)
            throw ConfigError("SynthConfig: confounding_scale must be >= 0");
        if (class_jitter < 0) throw ConfigError("SynthConfig: class_jitter must be >= 0");
        if (direct_path_strength < 0)
            throw ConfigError("SynthConfig: direct_path_strength must be >= 0");
        if (design == Design::OrthogonalConfounding && dim % 2 != 0)
            throw ConfigError("SynthConfig: orthogonal design needs even dim");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"n", n},
                              {"dim", dim},
                              {"noise_sigma", noise_sigma},
                              {"w_sigma", w_sigma},
                              {"design", to_string(design)},
                              {"seed", seed},
                              {"num_classes", num_classes},
                              {"class_jitter", class_jitter},
                              {"confounding_scale", confounding_scale},
                              {"direct_path_strength", direct_path_strength}};
    }
};

struct SynthParams {
    Matrix W1, W2, W3, W4;
    Matrix W5; // empty unless direct_path_strength > 0
};

struct SynthDataset {
    Matrix X;      // n x dim features
    Matrix C;      // n x dim observed concepts
    Matrix Y;      // n x dim real-valued labels (generator input)
    Matrix D_true; // n x dim noiseless discriminative concepts W1 y
    Matrix U;      // n x dim hidden confounders, retained for diagnostics
    Matrix EpsD, EpsX; // retained only when config.keep_noise
    std::vector<int> classes; // classification variant: per-row class id
    std::size_t num_classes = 0;
    SynthParams params;
    SynthConfig config;

    bool is_classification() const { return num_classes > 0; }
};

/// Index split by position: first 70% train, next 15% validation, rest test.
struct Split {
    std::vector<std::size_t> train, val, test;
};

inline Split make_split(std::size_t n) {
    Split s;
    const std::size_t n_train = (n * 70) / 100;
    const std::size_t n_val = (n * 15) / 100;
    for (std::size_t i = 0; i < n; ++i) {
        if (i < n_train)
            s.train.push_back(i);
        else if (i < n_train + n_val)
            s.val.push_back(i);
        else
            s.test.push_back(i);
    }
    return s;
}

inline Matrix one_hot(const std::vector<int>& classes, std::size_t num_classes) {
    Matrix out(classes.size(), num_classes, 0.0);
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= num_classes)
            throw ConfigError("one_hot: class id out of range");
        out(i, static_cast<std::size_t>(classes[i])) = 1.0;
    }
    return out;
}

namespace detail {

inline Matrix gaussian_or_zero(RngStream rng, std::size_t rows, std::size_t cols,
                               double sigma) {
    if (sigma == 0.0) return Matrix(rows, cols, 0.0);
    return random_gaussian(rng, rows, cols, sigma);
}

inline SynthParams draw_params(const SynthConfig& cfg, const RngStream& root) {
    SynthParams p;
    const std::size_t d = cfg.dim;
    if (cfg.design == Design::FullyRandom) {
        RngStream rw1 = root.child("W1"), rw2 = root.child("W2");
        RngStream rw3 = root.child("W3"), rw4 = root.child("W4");
        p.W1 = random_gaussian(rw1, d, d, cfg.w_sigma);
        p.W2 = random_gaussian(rw2, d, d, cfg.w_sigma);
        p.W3 = random_gaussian(rw3, d, d, cfg.w_sigma);
        p.W4 = random_gaussian(rw4, d, d, cfg.w_sigma);
    } else {
        RngStream rq = root.child("Q");
        Matrix Q = random_orthonormal(rq, d);
        auto spectral = [&](const std::string& label, bool zero_first_half,
                            bool zero_last_half) {
            RngStream rl = root.child(label);
            std::vector<double> lam(d);
            for (auto& v : lam) v = rl.uniform(0.1, 1.0);
            if (zero_first_half)
                for (std::size_t i = 0; i < d / 2; ++i) lam[i] = 0.0;
            if (zero_last_half)
                for (std::size_t i = d / 2; i < d; ++i) lam[i] = 0.0;
            // W = Q diag(lam) Q^T
            Matrix QL(d, d);
            for (std::size_t r = 0; r < d; ++r)
                for (std::size_t c = 0; c < d; ++c) QL(r, c) = Q(r, c) * lam[c];
            return mat_mul(QL, transpose(Q));
        };
        p.W1 = spectral("lambda1", /*zero_first_half=*/false, /*zero_last_half=*/true);
        p.W2 = spectral("lambda2", /*zero_first_half=*/true, /*zero_last_half=*/false);
        p.W3 = spectral("lambda3", false, false);
        p.W4 = spectral("lambda4", true, false);
    }
    if (cfg.confounding_scale != 1.0) {
        p.W2 = scale(p.W2, cfg.confounding_scale);
        p.W4 = scale(p.W4, cfg.confounding_scale);
    }
    if (cfg.direct_path_strength > 0.0) {
        RngStream rw5 = root.child("W5");
        p.W5 = random_gaussian(rw5, d, d, cfg.w_sigma);
    }
    return p;
}

/// Steps shared by both variants once the label matrix Y is fixed.
inline SynthDataset assemble(const SynthConfig& cfg, const RngStream& root, Matrix Y) {
    const std::size_t n = cfg.n, d = cfg.dim;
    SynthDataset ds;
    ds.config = cfg;
    ds.params = draw_params(cfg, root);
    ds.Y = std::move(Y);
    ds.U = [&] {
        RngStream ru = root.child("u");
        return random_gaussian(ru, n, d, 1.0);
    }();
    Matrix eps_d = [&] {
        RngStream re = root.child("eps_c");
        return gaussian_or_zero(re, n, d, cfg.noise_sigma);
    }();
    Matrix eps_x = [&] {
        RngStream re = root.child("eps_x");
        return gaussian_or_zero(re, n, d, cfg.noise_sigma);
    }();

    ds.D_true = mat_mul(ds.Y, transpose(ds.params.W1));
    Matrix D = add(ds.D_true, eps_d);
    ds.C = add(D, mat_mul(ds.U, transpose(ds.params.W2)));
    ds.X = add(add(mat_mul(D, transpose(ds.params.W3)),
                   mat_mul(ds.U, transpose(ds.params.W4))),
               eps_x);
    if (cfg.direct_path_strength > 0.0)
        ds.X = add(ds.X, scale(mat_mul(ds.Y, transpose(ds.params.W5)),
                               cfg.direct_path_strength));
    if (cfg.keep_noise) {
        ds.EpsD = std::move(eps_d);
        ds.EpsX = std::move(eps_x);
    }
    require_finite(ds.X, "synth X");
    require_finite(ds.C, "synth C");
    return ds;
}

} // namespace detail

/// Regression variant: labels are i.i.d. standard normal vectors.
inline SynthDataset generate(const SynthConfig& cfg) {
    cfg.validate();
    if (cfg.num_classes != 0)
        throw ConfigError("generate: num_classes set; use generate_classification");
    RngStream root(cfg.seed);
    Matrix Y = [&] {
        RngStream ry = root.child("y");
        return random_gaussian(ry, cfg.n, cfg.dim, 1.0);
    }();
    return detail::assemble(cfg, root, std::move(Y));
}

/// Classification variant with caller-supplied class prototypes (K x dim).
/// Labels are prototype vectors plus jitter; the generator equations are
/// otherwise unchanged, and the categorical assignment is retained.
inline SynthDataset generate_classification(const SynthConfig& cfg,
                                            const Matrix& prototypes) {
    cfg.validate();
    const std::size_t k = cfg.num_classes;
    if (k < 2) throw ConfigError("generate_classification: need num_classes >= 2");
    if (k > cfg.n) throw ConfigError("generate_classification: more classes than samples");
    if (prototypes.rows != k || prototypes.cols != cfg.dim)
        throw ShapeError("generate_classification: prototype shape mismatch");

    RngStream root(cfg.seed);
    std::vector<int> classes(cfg.n);
    {
        RngStream rc = root.child("classes");
        for (auto& c : classes) c = static_cast<int>(rc.below(k));
    }
    Matrix Y(cfg.n, cfg.dim);
    {
        RngStream rj = root.child("jitter");
        for (std::size_t i = 0; i < cfg.n; ++i)
            for (std::size_t c = 0; c < cfg.dim; ++c)
                Y(i, c) = prototypes(static_cast<std::size_t>(classes[i]), c) +
                          (cfg.class_jitter > 0 ? rj.normal(cfg.class_jitter) : 0.0);
    }
    SynthDataset ds = detail::assemble(cfg, root, std::move(Y));
    ds.classes = std::move(classes);
    ds.num_classes = k;
    return ds;
}

/// Classification variant with prototypes drawn as K fixed N(0,1) vectors.
inline SynthDataset generate_classification(const SynthConfig& cfg) {
    cfg.validate();
    if (cfg.num_classes < 2)
        throw ConfigError("generate_classification: need num_classes >= 2");
    RngStream root(cfg.seed);
    RngStream rp = root.child("prototypes");
    Matrix prototypes = random_gaussian(rp, cfg.num_classes, cfg.dim, 1.0);
    return generate_classification(cfg, prototypes);
}

/// CSV bundle (X.csv, C.csv, Y.csv, D_true.csv, classes.csv when present)
/// plus manifest.json echoing the full config.
inline void export_csv_bundle(const SynthDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_matrix_csv(dir / "X.csv", ds.X, "x");
    write_matrix_csv(dir / "C.csv", ds.C, "c");
    write_matrix_csv(dir / "Y.csv", ds.Y, "y");
    write_matrix_csv(dir / "D_true.csv", ds.D_true, "d");
    if (ds.is_classification()) {
        CsvWriter w({"class_id"});
        for (int c : ds.classes) w.add_row({std::to_string(c)});
        w.save(dir / "classes.csv");
    }
    nlohmann::json manifest{{"kind", "synth_dataset"},
                            {"config", ds.config.to_json()},
                            {"seed", ds.config.seed}};
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

} // namespace dcbm
