// dcbm: debiased concept bottleneck models on synthetic structural-equation
// data. Subcommands generate datasets, fit pipelines, and run the scaling /
// ROAR / evidence / completeness experiments; every run is reproducible from
// its --seed and writes a self-describing manifest next to its CSVs.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "dcbm/cli.hpp"

namespace {

struct CommonArgs {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool force = false;
    std::size_t jobs = 1;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "key=value config file with [sections]");
    cmd->add_option("--seed", args.seed, "master seed (required; all randomness derives from it)")
        ->required();
    cmd->add_option("--out", args.out, "output directory")->required();
    cmd->add_flag("--force", args.force, "allow overwriting an existing manifest");
    cmd->add_option("--jobs", args.jobs, "worker threads for grid cells")
        ->envname("DEBIAS_CBM_JOBS");
    cmd->add_option("--set", args.sets,
                    "override a config key, e.g. --set scaling.seeds=5");
}

int dispatch(const std::string& command, const CommonArgs& args,
             const std::vector<std::string>& extra_sets) {
    dcbm::cli::RunConfig rc;
    rc.command = command;
    if (!args.config.empty()) rc.config_path = args.config;
    rc.master_seed = args.seed;
    rc.out_dir = args.out;
    rc.force = args.force;
    rc.jobs = args.jobs;
    rc.overrides = args.sets;
    rc.overrides.insert(rc.overrides.end(), extra_sets.begin(), extra_sets.end());
    std::string diag;
    const int code = dcbm::cli::run(rc, &diag);
    if (code != 0) std::fprintf(stderr, "dcbm %s: %s\n", command.c_str(), diag.c_str());
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"debiased concept bottleneck models: synthetic experiments"};
    app.require_subcommand(1);

    struct Sub {
        CLI::App* cmd;
        CommonArgs args;
        std::vector<std::string> sets; // from convenience flags
    };
    std::map<std::string, Sub> subs;

    auto make = [&](const std::string& name, const std::string& desc) -> Sub& {
        Sub& sub = subs[name];
        sub.cmd = app.add_subcommand(name, desc);
        add_common(sub.cmd, sub.args);
        return sub;
    };

    // Convenience flags map onto config keys so file and CLI stay consistent.
    auto map_option = [](Sub& sub, const std::string& flag, const std::string& key,
                         const std::string& desc) {
        auto* opt = sub.cmd->add_option(flag, desc);
        opt->each([&sub, key](const std::string& value) {
            sub.sets.push_back(key + "=" + value);
        });
    };

    {
        Sub& s = make("synth", "generate a synthetic dataset as a CSV bundle");
        map_option(s, "--n", "synth.n", "sample count");
        map_option(s, "--dim", "synth.dim", "dimensionality");
        map_option(s, "--design", "synth.design", "random | orthogonal");
        map_option(s, "--noise-sigma", "synth.noise_sigma", "noise std");
        map_option(s, "--num-classes", "synth.num_classes",
                   "classification variant classes (0 = regression)");
    }
    {
        Sub& s = make("train", "fit a debiased pipeline and save the model bundle");
        map_option(s, "--n", "dataset.n", "sample count");
        map_option(s, "--dim", "dataset.dim", "dimensionality");
        map_option(s, "--design", "dataset.design", "random | orthogonal");
        map_option(s, "--noise-sigma", "dataset.noise_sigma", "noise std");
        map_option(s, "--num-classes", "dataset.num_classes", "classes (0 = regression)");
        map_option(s, "--mc-samples", "train.mc_samples", "Monte Carlo samples");
        map_option(s, "--epochs", "train.epochs", "training epochs");
    }
    {
        Sub& s = make("scaling", "correlation-to-truth vs sample size, both methods");
        map_option(s, "--design", "scaling.design", "random | orthogonal");
        map_option(s, "--ns", "scaling.ns", "comma-separated sample sizes");
        map_option(s, "--seeds", "scaling.seeds", "seeds per sample size");
        map_option(s, "--dim", "scaling.dim", "dimensionality");
        map_option(s, "--noise-sigma", "scaling.noise_sigma", "noise std");
    }
    {
        Sub& s = make("roar", "mask-and-retrain concept importance evaluation");
        map_option(s, "--n", "dataset.n", "sample count");
        map_option(s, "--dim", "dataset.dim", "dimensionality");
        map_option(s, "--design", "dataset.design", "random | orthogonal");
        map_option(s, "--noise-sigma", "dataset.noise_sigma", "noise std");
        map_option(s, "--num-classes", "dataset.num_classes", "classes");
        map_option(s, "--mask-fractions", "roar.mask_fractions",
                   "comma-separated masking fractions (must include 0)");
        map_option(s, "--repeats", "roar.repeats", "retraining repeats");
        map_option(s, "--mc-samples", "roar.mc_samples", "Monte Carlo samples");
        map_option(s, "--top-k", "roar.top_k", "top-k accuracy");
    }
    {
        Sub& s = make("evidence", "concept predictability: features vs labels");
        map_option(s, "--n", "dataset.n", "sample count");
        map_option(s, "--dim", "dataset.dim", "dimensionality");
        map_option(s, "--design", "dataset.design", "random | orthogonal");
        map_option(s, "--num-classes", "dataset.num_classes", "classes");
        map_option(s, "--noise-sigma", "dataset.noise_sigma", "noise std");
        map_option(s, "--class-jitter", "dataset.class_jitter", "label jitter std");
        map_option(s, "--confounding-scale", "dataset.confounding_scale",
                   "scale on the confounding paths");
    }
    {
        Sub& s = make("completeness", "residual predictive information in features");
        map_option(s, "--n", "dataset.n", "sample count");
        map_option(s, "--dim", "dataset.dim", "dimensionality");
        map_option(s, "--bypass-strength", "completeness.bypass_strength",
                   "nonlinear feature-to-label bypass strength (0 = none)");
    }
    {
        Sub& s = make("gradcheck", "analytic vs finite-difference gradient audit");
        map_option(s, "--trials", "gradcheck.trials", "random architectures to test");
    }

    CLI11_PARSE(app, argc, argv);

    for (auto& [name, sub] : subs)
        if (sub.cmd->parsed()) return dispatch(name, sub.args, sub.sets);
    return 2;
}
