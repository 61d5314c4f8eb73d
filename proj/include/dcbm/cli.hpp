#pragma once

// Command orchestration: flat key=value config files with [sections], strict
// key validation (unknown keys are fatal), master-seed discipline, and
// self-describing artifact directories. Everything an experiment produces is
// a pure function of its resolved config and master seed; manifests carry no
// clocks or host state.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcbm/cbm.hpp"
#include "dcbm/errors.hpp"
#include "dcbm/eval.hpp"
#include "dcbm/io.hpp"
#include "dcbm/nnet.hpp"
#include "dcbm/synth.hpp"

namespace dcbm::cli {

inline constexpr const char* kArtifactVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Config file: "[section]" headers, "key = value" lines, '#' comments.
// Keys are flattened to "section.key".
// ---------------------------------------------------------------------------

using KeyValues = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

} // namespace detail

inline KeyValues parse_config_text(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) +
                                           ": empty key");
        std::string full = section.empty() ? key : section + "." + key;
        if (kv.count(full))
            throw ConfigError("config: duplicate key '" + full + "'");
        kv[full] = value;
    }
    return kv;
}

inline KeyValues parse_config_file(const std::filesystem::path& path) {
    return parse_config_text(read_text_file(path));
}

/// Tracks key consumption so leftovers can be rejected (fail-fast on typos).
class KvReader {
  public:
    explicit KvReader(KeyValues kv) : kv_(std::move(kv)) {}

    std::optional<std::string> take(const std::string& key) {
        auto it = kv_.find(key);
        if (it == kv_.end()) return std::nullopt;
        consumed_.insert(key);
        return it->second;
    }

    std::string take_or(const std::string& key, const std::string& fallback) {
        auto v = take(key);
        return v ? *v : fallback;
    }

    double take_double(const std::string& key, double fallback) {
        auto v = take(key);
        if (!v) return fallback;
        try {
            return std::stod(*v);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not a number: " + *v);
        }
    }

    std::size_t take_size(const std::string& key, std::size_t fallback) {
        auto v = take(key);
        if (!v) return fallback;
        try {
            long long parsed = std::stoll(*v);
            if (parsed < 0) throw std::invalid_argument("negative");
            return static_cast<std::size_t>(parsed);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not a count: " + *v);
        }
    }

    std::uint64_t take_u64(const std::string& key, std::uint64_t fallback) {
        auto v = take(key);
        if (!v) return fallback;
        try {
            return std::stoull(*v);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not an integer: " + *v);
        }
    }

    bool take_bool(const std::string& key, bool fallback) {
        auto v = take(key);
        if (!v) return fallback;
        if (*v == "true" || *v == "1") return true;
        if (*v == "false" || *v == "0") return false;
        throw ConfigError("config key '" + key + "': not a bool: " + *v);
    }

    template <typename T, typename Parse>
    std::vector<T> take_list(const std::string& key, std::vector<T> fallback,
                             Parse parse) {
        auto v = take(key);
        if (!v) return fallback;
        std::vector<T> out;
        std::istringstream ss(*v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = detail::trim(item);
            if (item.empty()) continue;
            out.push_back(parse(item));
        }
        if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
        return out;
    }

    std::vector<std::size_t> take_size_list(const std::string& key,
                                            std::vector<std::size_t> fallback) {
        return take_list<std::size_t>(key, std::move(fallback), [&](const std::string& s) {
            try {
                return static_cast<std::size_t>(std::stoull(s));
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': bad count '" + s + "'");
            }
        });
    }

    std::vector<double> take_double_list(const std::string& key,
                                         std::vector<double> fallback) {
        return take_list<double>(key, std::move(fallback), [&](const std::string& s) {
            try {
                return std::stod(s);
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': bad number '" + s + "'");
            }
        });
    }

    /// Throws if any provided key was never consumed.
    void finish() const {
        std::vector<std::string> unknown;
        for (const auto& [key, value] : kv_)
            if (!consumed_.count(key)) unknown.push_back(key);
        if (!unknown.empty()) {
            std::string msg = "unknown config keys:";
            for (const auto& k : unknown) msg += " " + k;
            throw ConfigError(msg);
        }
    }

    const KeyValues& raw() const { return kv_; }

  private:
    KeyValues kv_;
    std::set<std::string> consumed_;
};

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

/// Deterministic per-task seeds from (master, label). Labels must be unique;
/// adding a task never changes existing tasks' seeds.
inline std::vector<std::uint64_t>
resolve_seeds(std::uint64_t master_seed, const std::vector<std::string>& labels) {
    std::set<std::string> seen;
    std::vector<std::uint64_t> seeds;
    seeds.reserve(labels.size());
    for (const auto& label : labels) {
        if (!seen.insert(label).second)
            throw ConfigError("resolve_seeds: duplicate label '" + label + "'");
        seeds.push_back(derive_seed(master_seed, label));
    }
    return seeds;
}

// ---------------------------------------------------------------------------
// RunConfig and the command dispatcher
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string command;
    std::optional<std::filesystem::path> config_path;
    std::vector<std::string> overrides; // "section.key=value"
    std::optional<std::uint64_t> master_seed;
    std::filesystem::path out_dir;
    bool force = false;
    std::size_t jobs = 1;
};

namespace detail {

inline SynthConfig synth_config_from(KvReader& kv, const std::string& section,
                                     std::uint64_t seed) {
    SynthConfig cfg;
    cfg.n = kv.take_size(section + ".n", cfg.n);
    cfg.dim = kv.take_size(section + ".dim", cfg.dim);
    cfg.noise_sigma = kv.take_double(section + ".noise_sigma", cfg.noise_sigma);
    cfg.w_sigma = kv.take_double(section + ".w_sigma", cfg.w_sigma);
    cfg.design = design_from_string(kv.take_or(section + ".design", "random"));
    cfg.num_classes = kv.take_size(section + ".num_classes", 0);
    cfg.class_jitter = kv.take_double(section + ".class_jitter", cfg.class_jitter);
    cfg.confounding_scale =
        kv.take_double(section + ".confounding_scale", cfg.confounding_scale);
    cfg.direct_path_strength =
        kv.take_double(section + ".direct_path_strength", cfg.direct_path_strength);
    cfg.seed = seed;
    return cfg;
}

inline void write_run_manifest(const std::filesystem::path& out_dir,
                               const std::string& command, std::uint64_t master_seed,
                               const KeyValues& resolved,
                               const std::vector<std::string>& outputs) {
    nlohmann::json manifest{{"kind", "dcbm_run"},
                            {"artifact_version", kArtifactVersion},
                            {"command", command},
                            {"master_seed", master_seed},
                            {"outputs", outputs}};
    nlohmann::json cfg_echo = nlohmann::json::object();
    for (const auto& [k, v] : resolved) cfg_echo[k] = v;
    manifest["config"] = cfg_echo;
    write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Matrix nonlinear_bypass_labels(const SynthDataset& ds, double strength,
                                      std::uint64_t seed) {
    if (strength == 0.0) return ds.Y;
    RngStream rng(derive_seed(seed, "bypass"));
    Matrix v = random_gaussian(rng, ds.X.cols, 1,
                               1.0 / std::sqrt(static_cast<double>(ds.X.cols)));
    Matrix w = random_gaussian(rng, 1, ds.Y.cols, 1.0);
    Matrix t = mat_mul(ds.X, v);
    double var = 0.0;
    for (std::size_t i = 0; i < t.rows; ++i) var += t(i, 0) * t(i, 0);
    const double sd = std::sqrt(var / static_cast<double>(t.rows));
    Matrix Y = ds.Y;
    for (std::size_t i = 0; i < Y.rows; ++i) {
        const double h = std::tanh(2.0 * t(i, 0) / sd);
        for (std::size_t c = 0; c < Y.cols; ++c) Y(i, c) += strength * h * w(0, c);
    }
    return Y;
}

// --- command implementations ---------------------------------------------

inline std::vector<std::string> cmd_synth(KvReader& kv, std::uint64_t master_seed,
                                          const std::filesystem::path& out_dir,
                                          std::size_t /*jobs*/) {
    SynthConfig cfg =
        synth_config_from(kv, "synth", derive_seed(master_seed, "synth/dataset"));
    kv.finish();
    SynthDataset ds = cfg.num_classes > 0 ? generate_classification(cfg) : generate(cfg);
    export_csv_bundle(ds, out_dir / "dataset");
    std::vector<std::string> outputs{"dataset/X.csv", "dataset/C.csv", "dataset/Y.csv",
                                     "dataset/D_true.csv", "dataset/manifest.json"};
    if (ds.is_classification()) outputs.push_back("dataset/classes.csv");
    return outputs;
}

inline std::vector<std::string> cmd_train(KvReader& kv, std::uint64_t master_seed,
                                          const std::filesystem::path& out_dir,
                                          std::size_t /*jobs*/) {
    SynthConfig dcfg =
        synth_config_from(kv, "dataset", derive_seed(master_seed, "train/dataset"));
    const std::size_t mc_samples = kv.take_size("train.mc_samples", 25);
    const std::size_t head_hidden = kv.take_size("train.head_hidden", 0);
    const bool dist_mlp = kv.take_bool("train.dist_mlp", false);
    const std::size_t dist_hidden = kv.take_size("train.dist_hidden", 64);
    TrainConfig tc;
    tc.epochs = kv.take_size("train.epochs", 60);
    tc.batch_size = kv.take_size("train.batch_size", 128);
    tc.learning_rate = kv.take_double("train.learning_rate", 1e-2);
    tc.patience = kv.take_size("train.patience", 20);
    tc.seed = derive_seed(master_seed, "train/fit");
    kv.finish();

    const bool classify = dcfg.num_classes > 0;
    SynthDataset ds = classify ? generate_classification(dcfg) : generate(dcfg);
    Split split = make_split(ds.X.rows);
    Matrix Xtr = take_rows(ds.X, split.train);
    Matrix Xva = take_rows(ds.X, split.val);
    Matrix Xte = take_rows(ds.X, split.test);
    Matrix Ctr = take_rows(ds.C, split.train);

    DebiasedCbm cbm;
    cbm.classification = classify;
    cbm.mc_samples = mc_samples;
    cbm.inference_seed = derive_seed(master_seed, "train/inference");

    Matrix d_hat;
    if (classify) {
        std::vector<int> cls_tr;
        for (auto i : split.train) cls_tr.push_back(ds.classes[i]);
        cbm.debiaser = fit_debiaser_class_mean(Ctr, cls_tr, ds.num_classes);
        d_hat = cbm.debiaser->predict_classes(cls_tr);
    } else {
        Matrix Ytr = take_rows(ds.Y, split.train);
        cbm.debiaser = fit_debiaser_linear(Ctr, Ytr);
        d_hat = cbm.debiaser->predict(Ytr);
    }

    ConceptDistOptions dopt;
    dopt.use_mlp = dist_mlp;
    if (dist_mlp) {
        dopt.mlp_spec.layer_sizes = {ds.X.cols, dist_hidden, ds.C.cols};
        dopt.train = tc;
        dopt.train.seed = derive_seed(master_seed, "train/dist");
    }
    cbm.concept_dist = fit_concept_distribution(Xtr, d_hat, dopt);

    const std::size_t out_dim = classify ? ds.num_classes : ds.Y.cols;
    HeadFitOptions hopt;
    hopt.spec.layer_sizes =
        head_hidden == 0 ? std::vector<std::size_t>{ds.C.cols, out_dim}
                         : std::vector<std::size_t>{ds.C.cols, head_hidden, out_dim};
    hopt.train = tc;
    hopt.train.loss = classify ? Loss::SoftmaxCrossEntropy : Loss::MSE;
    hopt.mc_samples = mc_samples;

    Matrix Ttr, Tva;
    std::vector<int> cls_te;
    if (classify) {
        std::vector<int> cls_tr, cls_va;
        for (auto i : split.train) cls_tr.push_back(ds.classes[i]);
        for (auto i : split.val) cls_va.push_back(ds.classes[i]);
        for (auto i : split.test) cls_te.push_back(ds.classes[i]);
        Ttr = one_hot(cls_tr, ds.num_classes);
        Tva = one_hot(cls_va, ds.num_classes);
    } else {
        Ttr = take_rows(ds.Y, split.train);
        Tva = take_rows(ds.Y, split.val);
    }
    cbm.head_is_linear = false;
    cbm.mlp_head = fit_label_head_mc(cbm.concept_dist, Xtr, Ttr, hopt, &Xva, &Tva);
    cbm.explanation_center = col_means(cbm.expected_concepts(Xtr));

    save_cbm(cbm, out_dir / "model");

    // Held-out metrics.
    CsvWriter metrics({"metric", "value"});
    Matrix scores = cbm.predict_labels(Xte);
    if (classify) {
        metrics.add_row({"test_top1", fmt_double(top_k_accuracy(scores, cls_te, 1))});
    } else {
        Matrix Yte = take_rows(ds.Y, split.test);
        metrics.add_row({"test_r2", fmt_double(dcbm::detail::r_squared(Yte, scores))});
    }
    metrics.add_row(
        {"concept_truth_correlation",
         fmt_double(concept_truth_correlation(cbm.expected_concepts(Xte),
                                              take_rows(ds.D_true, split.test)))});
    metrics.save(out_dir / "metrics.csv");
    return {"model/manifest.json", "metrics.csv"};
}

inline std::vector<std::string> cmd_scaling(KvReader& kv, std::uint64_t master_seed,
                                            const std::filesystem::path& out_dir,
                                            std::size_t jobs) {
    ScalingConfig cfg;
    cfg.base.dim = kv.take_size("scaling.dim", 100);
    cfg.base.noise_sigma = kv.take_double("scaling.noise_sigma", 0.02);
    cfg.base.w_sigma = kv.take_double("scaling.w_sigma", 0.1);
    cfg.base.design = design_from_string(kv.take_or("scaling.design", "random"));
    cfg.sample_sizes = kv.take_size_list("scaling.ns", {100, 1000, 10000, 100000});
    cfg.seeds = kv.take_size("scaling.seeds", 3);
    cfg.master_seed = master_seed;
    cfg.jobs = jobs;
    kv.finish();
    ScalingResult result = scaling_experiment(cfg);
    write_scaling_csv(result, out_dir / "scaling.csv");
    return {"scaling.csv"};
}

inline std::vector<std::string> cmd_roar(KvReader& kv, std::uint64_t master_seed,
                                         const std::filesystem::path& out_dir,
                                         std::size_t jobs) {
    SynthConfig dcfg =
        synth_config_from(kv, "dataset", derive_seed(master_seed, "roar/dataset"));
    if (dcfg.num_classes == 0) dcfg.num_classes = 20;
    RoarConfig rc;
    rc.mask_fractions = kv.take_double_list("roar.mask_fractions", rc.mask_fractions);
    rc.repeats = kv.take_size("roar.repeats", 3);
    rc.top_k = kv.take_size("roar.top_k", 1);
    rc.mc_samples = kv.take_size("roar.mc_samples", 25);
    rc.head_hidden = kv.take_size("roar.head_hidden", 0);
    rc.head_train.epochs = kv.take_size("roar.epochs", 15);
    rc.head_train.batch_size = kv.take_size("roar.batch_size", 256);
    rc.head_train.learning_rate = kv.take_double("roar.learning_rate", 3e-2);
    rc.head_train.patience = kv.take_size("roar.patience", 5);
    rc.master_seed = master_seed;
    rc.jobs = jobs;
    kv.finish();
    SynthDataset ds = generate_classification(dcfg);
    RoarCurve curve = roar_run(ds, rc);
    write_roar_csv(curve, out_dir / "roar.csv");
    return {"roar.csv"};
}

inline std::vector<std::string> cmd_evidence(KvReader& kv, std::uint64_t master_seed,
                                             const std::filesystem::path& out_dir,
                                             std::size_t /*jobs*/) {
    SynthConfig dcfg =
        synth_config_from(kv, "dataset", derive_seed(master_seed, "evidence/dataset"));
    if (dcfg.num_classes == 0) dcfg.num_classes = 10;
    kv.finish();
    SynthDataset ds = generate_classification(dcfg);
    EvidenceReport report = evidence_experiment(ds);
    write_evidence_csv(report, out_dir / "evidence.csv");
    return {"evidence.csv"};
}

inline std::vector<std::string> cmd_completeness(KvReader& kv,
                                                 std::uint64_t master_seed,
                                                 const std::filesystem::path& out_dir,
                                                 std::size_t /*jobs*/) {
    SynthConfig dcfg = synth_config_from(kv, "dataset",
                                         derive_seed(master_seed, "completeness/dataset"));
    const double bypass = kv.take_double("completeness.bypass_strength", 0.0);
    const std::size_t q_hidden = kv.take_size("completeness.q_hidden", 32);
    TrainConfig tc;
    tc.epochs = kv.take_size("completeness.epochs", 150);
    tc.batch_size = kv.take_size("completeness.batch_size", 64);
    tc.learning_rate = kv.take_double("completeness.learning_rate", 3e-3);
    tc.seed = derive_seed(master_seed, "completeness/q");
    kv.finish();

    SynthDataset ds = generate(dcfg);
    Matrix Y = nonlinear_bypass_labels(ds, bypass, master_seed);
    DebiasedCbm cbm = fit_linear_gaussian(ds.X, ds.C, Y);
    MlpSpec q_spec;
    q_spec.layer_sizes = {ds.X.cols, q_hidden, Y.cols};
    CompletenessReport report = measure_completeness(cbm, ds.X, Y, nullptr, q_spec, tc);
    CsvWriter w({"cbm_only_metric", "combined_metric", "completeness_gap"});
    w.add_row({fmt_double(report.cbm_only_metric), fmt_double(report.combined_metric),
               fmt_double(report.completeness_gap)});
    w.save(out_dir / "completeness.csv");
    return {"completeness.csv"};
}

inline std::vector<std::string> cmd_gradcheck(KvReader& kv, std::uint64_t master_seed,
                                              const std::filesystem::path& out_dir,
                                              std::size_t /*jobs*/) {
    const std::size_t trials = kv.take_size("gradcheck.trials", 25);
    const double tolerance = kv.take_double("gradcheck.tolerance", 1e-4);
    kv.finish();
    GradCheckReport report = gradient_check_suite(trials, master_seed, tolerance);
    CsvWriter w({"trials", "max_rel_err", "tolerance", "pass"});
    w.add_row({std::to_string(report.trials), fmt_double(report.max_rel_err),
               fmt_double(tolerance), report.pass ? "1" : "0"});
    w.save(out_dir / "gradcheck.csv");
    if (!report.pass)
        throw NumericError("gradient check failed: max relative error " +
                           fmt_double(report.max_rel_err));
    return {"gradcheck.csv"};
}

} // namespace detail

/// Executes the configured command. Exit codes: 0 success, 2 configuration
/// error, 3 numerical failure (partial artifacts are kept). A one-line
/// diagnostic goes to `diag` on failure.
inline int run(const RunConfig& rc, std::string* diag = nullptr) {
    auto fail = [&](int code, const std::string& msg) {
        if (diag != nullptr) *diag = msg;
        return code;
    };
    try {
        static const std::set<std::string> known_commands{
            "synth", "train", "scaling", "roar", "evidence", "completeness",
            "gradcheck"};
        if (!known_commands.count(rc.command))
            throw ConfigError("unknown command '" + rc.command + "'");
        if (!rc.master_seed.has_value())
            throw ConfigError("master seed is required (--seed or run.seed)");
        if (rc.out_dir.empty()) throw ConfigError("output directory is required");

        KeyValues kv;
        if (rc.config_path) kv = parse_config_file(*rc.config_path);
        for (const auto& ov : rc.overrides) {
            const auto eq = ov.find('=');
            if (eq == std::string::npos)
                throw ConfigError("override must be key=value: " + ov);
            kv[detail::trim(ov.substr(0, eq))] = detail::trim(ov.substr(eq + 1));
        }

        std::filesystem::create_directories(rc.out_dir);
        if (std::filesystem::exists(rc.out_dir / "manifest.json") && !rc.force)
            throw ConfigError("refusing to overwrite existing manifest in " +
                              rc.out_dir.string() + " (use --force)");

        KvReader reader(std::move(kv));
        const std::uint64_t master_seed = *rc.master_seed;
        std::vector<std::string> outputs;
        try {
            if (rc.command == "synth")
                outputs = detail::cmd_synth(reader, master_seed, rc.out_dir, rc.jobs);
            else if (rc.command == "train")
                outputs = detail::cmd_train(reader, master_seed, rc.out_dir, rc.jobs);
            else if (rc.command == "scaling")
                outputs = detail::cmd_scaling(reader, master_seed, rc.out_dir, rc.jobs);
            else if (rc.command == "roar")
                outputs = detail::cmd_roar(reader, master_seed, rc.out_dir, rc.jobs);
            else if (rc.command == "evidence")
                outputs = detail::cmd_evidence(reader, master_seed, rc.out_dir, rc.jobs);
            else if (rc.command == "completeness")
                outputs =
                    detail::cmd_completeness(reader, master_seed, rc.out_dir, rc.jobs);
            else
                outputs = detail::cmd_gradcheck(reader, master_seed, rc.out_dir, rc.jobs);
        } catch (const ConfigError&) {
            throw; // nothing ran; leave no manifest behind
        } catch (...) {
            // Partial artifacts stay on disk; record what was attempted.
            detail::write_run_manifest(rc.out_dir, rc.command, master_seed,
                                       reader.raw(), {});
            throw;
        }
        detail::write_run_manifest(rc.out_dir, rc.command, master_seed, reader.raw(),
                                   outputs);
        return 0;
    } catch (const ConfigError& e) {
        return fail(2, std::string("config error: ") + e.what());
    } catch (const std::exception& e) {
        return fail(3, std::string("numerical failure: ") + e.what());
    }
}

} // namespace dcbm::cli
