// Command-line entry point: synth-data, train, eval, ablate, sweep, grad-check, oracle-check.
#include "tdm/harness/config.hpp"
#include "tdm/harness/experiment.hpp"
#include "tdm/log.hpp"
#include "tdm/oracles/oracles.hpp"
#include "tdm/runtime.hpp"
#include "tdm/scores/scores.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace tdm;
using harness::ConfigError;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;  // leftover "--section.key value" pairs
};

harness::ExperimentConfig load_config(const Common& common) {
    harness::ExperimentConfig cfg;
    if (!common.config_path.empty()) {
        cfg = harness::apply_key_values(cfg, harness::read_config_file(common.config_path));
    }
    harness::KeyValues cli;
    const auto& args = common.overrides;
    for (std::size_t i = 0; i < args.size(); ++i) {
        std::string key = args[i];
        if (key.rfind("--", 0) != 0 || key.find('.') == std::string::npos) {
            throw ConfigError("unrecognised argument '" + key + "'");
        }
        key = key.substr(2);
        if (const auto eq = key.find('='); eq != std::string::npos) {
            cli[key.substr(0, eq)] = key.substr(eq + 1);
        } else {
            if (i + 1 >= args.size()) throw ConfigError("missing value for --" + key);
            cli[key] = args[++i];
        }
    }
    cfg = harness::apply_key_values(cfg, cli);
    harness::apply_environment(cfg);
    cfg.validate();
    return cfg;
}

fs::path checkpoint_stem(const harness::ExperimentConfig& cfg) {
    return cfg.checkpoint.empty() ? cfg.out_dir / "model" : cfg.checkpoint;
}

harness::Model load_trained(const harness::ExperimentConfig& cfg) {
    const auto stem = checkpoint_stem(cfg);
    auto manifest = stem;
    manifest += ".json";
    if (!fs::exists(manifest)) throw ConfigError("checkpoint " + stem.string() + " not found");
    return harness::load_checkpoint(stem);
}

void print_metrics(const char* label, const harness::MetricsRecord& m) {
    std::printf("%s: %.2f%% +- %.2f%% over %lld episodes (%.1fs)%s\n", label, 100.0 * m.mean, 100.0 * m.ci95,
                static_cast<long long>(m.episodes), m.wall_seconds, m.ci_defined ? "" : " [ci undefined]");
}

int cmd_synth(const Common& common, const std::string& out) {
    auto cfg = load_config(common);
    const auto ds = data::generate_synthetic(cfg.synth);
    data::save_dataset(out, ds, &cfg.synth);
    std::printf("wrote %lld classes x %lld instances (%lldpx) to %s\n", static_cast<long long>(ds.class_count()),
                static_cast<long long>(ds.min_instances()), static_cast<long long>(ds.image_size), out.c_str());
    return 0;
}

int cmd_train(const Common& common) {
    const auto cfg = load_config(common);
    const auto data = harness::prepare_data(cfg);
    const auto result = harness::train(cfg, data, [&](const harness::TrainLogRow& r) {
        if (r.val_acc) {
            std::printf("episode %lld loss %.4f train_acc %.3f val_acc %.3f\n", static_cast<long long>(r.episode + 1),
                        r.loss, r.train_acc, *r.val_acc);
            std::fflush(stdout);
        }
    });
    fs::create_directories(cfg.out_dir);
    harness::write_train_log(cfg.out_dir / "log.csv", result.log);
    auto model = result.model;
    harness::save_checkpoint(model, checkpoint_stem(cfg));
    std::printf("trained %lld episodes in %.1fs; checkpoint %s\n", static_cast<long long>(cfg.train_episodes),
                result.wall_seconds, checkpoint_stem(cfg).c_str());
    return 0;
}

int cmd_eval(const Common& common, int dump_episodes) {
    const auto cfg = load_config(common);
    const auto model = load_trained(cfg);
    const auto data = harness::prepare_data(cfg);
    harness::EvalOptions opt;
    opt.shape = cfg.eval_shape;
    opt.episodes = cfg.eval_episodes;
    opt.base_seed = cfg.eval_seed;
    opt.threads = cfg.threads;
    opt.dump_episodes = dump_episodes;
    const auto result = harness::evaluate(model, data, opt);
    harness::write_metrics_json(cfg.out_dir / "metrics.json", result.metrics);
    if (!result.weights.empty()) attention::write_weight_dump(cfg.out_dir / "weights.csv", result.weights);
    const auto features = harness::class_features(model, data.dataset, data.split.test);
    scores::write_variance_csv(cfg.out_dir / "variance.csv", scores::variance_report(features), data.split.test);
    print_metrics("test accuracy", result.metrics);
    return 0;
}

int cmd_ablate(const Common& common) {
    const auto cfg = load_config(common);
    const auto data = harness::prepare_data(cfg);
    const auto rows = harness::ablation_grid(cfg, data, [](const harness::AblationRow& row) {
        for (const auto& s : row.settings) {
            const auto label = row.label() + " " + std::to_string(s.way) + "-way " + std::to_string(s.shot) + "-shot";
            print_metrics(label.c_str(), s.metrics);
        }
        std::fflush(stdout);
    });
    harness::write_ablation_csv(cfg.out_dir / "ablation.csv", rows);
    return 0;
}

int cmd_sweep(const Common& common) {
    const auto cfg = load_config(common);
    const auto model = load_trained(cfg);
    const auto data = harness::prepare_data(cfg);
    const auto cells = harness::sweep_nk(model, data, cfg);
    for (const auto& c : cells) {
        const auto label = std::to_string(c.way) + "-way " + std::to_string(c.shot) + "-shot";
        if (c.metrics) print_metrics(label.c_str(), *c.metrics);
        else std::printf("%s: %s\n", label.c_str(), c.note.c_str());
    }
    harness::write_sweep_csv(cfg.out_dir / "sweep.csv", cells);
    return 0;
}

int cmd_grad_check(const std::string& model, std::uint64_t seed, double step, double tolerance) {
    if (model != "micro") throw ConfigError("grad-check supports --model micro only");
    const auto entries = oracles::micro_model_grad_check(seed, step);
    double worst = 0.0;
    for (const auto& e : entries) {
        worst = std::max(worst, e.relative_error);
        std::printf("%-40s n=%-6lld rel=%.3e one_sided=%lld straddled=%lld\n", e.name.c_str(),
                    static_cast<long long>(e.size), e.relative_error, static_cast<long long>(e.one_sided),
                    static_cast<long long>(e.straddled));
    }
    std::printf("worst relative error %.3e (tolerance %.1e)\n", worst, tolerance);
    return worst < tolerance ? 0 : 2;
}

int cmd_oracle_check(Index trials, std::uint64_t seed, double tolerance) {
    const auto results = oracles::run_oracle_suite(trials, seed);
    bool ok = true;
    for (const auto& r : results) {
        ok = ok && r.max_abs_error < tolerance;
        std::printf("%-20s trials=%lld max_abs_error=%.3e\n", r.name.c_str(), static_cast<long long>(r.trials),
                    r.max_abs_error);
    }
    return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    configure_allocator();
    set_warning_echo(true);

    CLI::App app{"Task-discrepancy channel attention for few-shot classification"};
    app.require_subcommand(1);
    Common common;

    auto with_config = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "config file (INI/TOML-style)");
        sub->allow_extras();
        sub->footer("Any config key can be overridden as --section.key value, e.g. --train.episodes 500");
        return sub;
    };

    std::string synth_out = "data/synthetic";
    auto* synth = with_config(app.add_subcommand("synth-data", "generate and save the synthetic dataset"));
    synth->add_option("--out", synth_out, "output directory");
    auto* train = with_config(app.add_subcommand("train", "episodic training"));
    int dump_episodes = 1;
    auto* eval = with_config(app.add_subcommand("eval", "evaluate a checkpoint on the test split"));
    eval->add_option("--dump-episodes", dump_episodes, "episodes whose attention weights go to weights.csv");
    auto* ablate = with_config(app.add_subcommand("ablate", "train and evaluate the SAM/QAM/IAM flag cube"));
    auto* sweep = with_config(app.add_subcommand("sweep", "evaluate a checkpoint over N-way x K-shot"));

    std::string gc_model = "micro";
    std::uint64_t gc_seed = 0;
    double gc_step = 1e-4;
    double gc_tol = 1e-3;
    auto* grad = app.add_subcommand("grad-check", "finite-difference check of every parameter gradient");
    grad->add_option("--model", gc_model, "model size (micro)");
    grad->add_option("--seed", gc_seed);
    grad->add_option("--step", gc_step);
    grad->add_option("--tolerance", gc_tol);

    Index oc_trials = 50;
    std::uint64_t oc_seed = 1;
    double oc_tol = 1e-10;
    auto* oracle = app.add_subcommand("oracle-check", "compare score/weight ops with naive loops");
    oracle->add_option("--trials", oc_trials);
    oracle->add_option("--seed", oc_seed);
    oracle->add_option("--tolerance", oc_tol);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        for (auto* sub : {synth, train, eval, ablate, sweep}) {
            if (sub->parsed()) common.overrides = sub->remaining();
        }
        if (synth->parsed()) return cmd_synth(common, synth_out);
        if (train->parsed()) return cmd_train(common);
        if (eval->parsed()) return cmd_eval(common, dump_episodes);
        if (ablate->parsed()) return cmd_ablate(common);
        if (sweep->parsed()) return cmd_sweep(common);
        if (grad->parsed()) return cmd_grad_check(gc_model, gc_seed, gc_step, gc_tol);
        if (oracle->parsed()) return cmd_oracle_check(oc_trials, oc_seed, oc_tol);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        for (auto* sub : {synth, train, eval, ablate, sweep}) {
            if (sub->parsed() && std::string(e.what()).rfind("unrecognised", 0) == 0) std::cerr << sub->help();
        }
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
