#include "support.hpp"

#include "tdm/harness/experiment.hpp"

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

using namespace tdm;
using namespace tdm::harness;

namespace {

/// A small, fast experiment: 16x16 images, 8 channels, 12 classes split 6/3/3.
ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    cfg.synth.n_classes = 12;
    cfg.synth.instances_per_class = 8;
    cfg.synth.image_size = 16;
    cfg.synth.patch_size = 4;
    cfg.synth.patch_count_per_class = 2;
    cfg.split_fractions = {0.5, 0.25, 0.25};
    cfg.model.channels = 8;
    cfg.train_shape = {3, 1, 2};
    cfg.eval_shape = {3, 1, 2};
    cfg.train_episodes = 6;
    cfg.val_every = 3;
    cfg.val_episodes = 2;
    cfg.val_query = 2;
    cfg.eval_episodes = 4;
    cfg.sweep_ways = {2, 3};
    cfg.sweep_shots = {1};
    return cfg;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(TDM_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("config") {
    TEST_CASE("sections, comments and quotes") {
        const auto kv = parse_key_values("# top\nseed = 3\n[model]\nmetric = \"cosine\" \n; note\nalpha=0.25\n");
        CHECK(kv.at("seed") == "3");
        CHECK(kv.at("model.metric") == "cosine");
        CHECK(kv.at("model.alpha") == "0.25");
        CHECK(kv.size() == 3);
    }

    TEST_CASE("keys apply on top of the defaults") {
        const auto cfg = apply_key_values(ExperimentConfig{}, {{"model.metric", "cosine"},
                                                                {"model.sam", "off"},
                                                                {"data.split", "1/2, 1/4, 1/4"},
                                                                {"train.way", "2"},
                                                                {"sweep.ways", "2,3,4"},
                                                                {"run.seed", "42"}});
        CHECK(cfg.model.head.metric == head::Metric::cosine);
        CHECK_FALSE(cfg.model.tdm.sam);
        CHECK(cfg.split_fractions[1] == 0.25);
        CHECK(cfg.train_shape.way == 2);
        CHECK(cfg.sweep_ways == std::vector<Index>{2, 3, 4});
        CHECK(cfg.seed == 42);
    }

    TEST_CASE("unknown keys and bad values are config errors") {
        CHECK_THROWS_AS(apply_key_values(ExperimentConfig{}, {{"model.gamma", "1"}}), ConfigError);
        CHECK_THROWS_AS(apply_key_values(ExperimentConfig{}, {{"train.episodes", "many"}}), ConfigError);
        CHECK_THROWS_AS(apply_key_values(ExperimentConfig{}, {{"model.sam", "maybe"}}), ConfigError);
        CHECK_THROWS_AS(apply_key_values(ExperimentConfig{}, {{"model.alpha", "1.5"}}).validate(), ConfigError);
        CHECK_THROWS_AS(apply_key_values(ExperimentConfig{}, {{"data.split", "0.5,0.5,0.5"}}).validate(), ConfigError);
        CHECK_THROWS_AS(apply_key_values(ExperimentConfig{}, {{"optim.kind", "rmsprop"}}).validate(), ConfigError);
    }

    TEST_CASE("rendering and re-applying is a fixed point") {
        auto cfg = tiny_config();
        cfg.model.tdm.beta = 0.3;
        cfg.augment.flip = true;
        const auto kv = to_key_values(cfg);
        CHECK(to_key_values(apply_key_values(ExperimentConfig{}, kv)) == kv);
    }

    TEST_CASE("missing file is a config error") {
        CHECK_THROWS_AS(read_config_file("/nonexistent/tdm.toml"), ConfigError);
    }

    TEST_CASE("environment overrides the seed") {
        ExperimentConfig cfg;
        ::setenv("TDM_SEED", "77", 1);
        apply_environment(cfg);
        ::unsetenv("TDM_SEED");
        CHECK(cfg.seed == 77);
    }

    TEST_CASE("1-shot training can reuse the 5-shot setting") {
        ExperimentConfig cfg;
        CHECK(cfg.effective_train_shot() == 1);
        cfg.reuse_5shot_for_1shot = true;
        CHECK(cfg.effective_train_shot() == 5);
    }
}

TEST_SUITE("metrics") {
    TEST_CASE("confidence interval") {
        const std::vector<double> one{0.5};
        CHECK_FALSE(ci95_half_width(one).has_value());
        const std::vector<double> two{0.0, 1.0};
        CHECK(*ci95_half_width(two) == doctest::Approx(1.96 * std::sqrt(0.5) / std::sqrt(2.0)).epsilon(1e-15));
        const auto m = summarize({0.2, 0.4, 0.6}, 1.5);
        CHECK(m.mean == doctest::Approx(0.4));
        CHECK(m.ci_defined);
        CHECK(m.ci95 == doctest::Approx(1.96 * 0.2 / std::sqrt(3.0)));
        CHECK(m.episodes == 3);
        const auto single = summarize({0.7}, 0.0);
        CHECK_FALSE(single.ci_defined);
        CHECK(single.ci95 == 0.0);
    }

    TEST_CASE("metrics json round trip") {
        const auto m = summarize({0.25, 0.5, 0.75}, 2.0);
        const auto path = test::scratch_dir("metrics") / "metrics.json";
        write_metrics_json(path, m);
        const auto back = read_metrics_json(path);
        CHECK(back.mean == m.mean);
        CHECK(back.ci95 == m.ci95);
        CHECK(back.episodes == 3);
        CHECK(back.accuracies == m.accuracies);
    }

    TEST_CASE("episode seeds are deterministic and distinct") {
        CHECK(episode_seed(1, 5) == episode_seed(1, 5));
        std::set<std::uint64_t> seen;
        for (std::uint64_t run = 0; run < 4; ++run) {
            for (std::uint64_t i = 0; i < 100; ++i) seen.insert(episode_seed(run, i));
        }
        CHECK(seen.size() == 400);
    }
}

TEST_SUITE("optimizer") {
    TEST_CASE("zero learning rate leaves parameters unchanged") {
        Var p = parameter(Tensor({3}, {1.0, -2.0, 0.5}));
        OptimizerConfig oc;
        oc.lr = 0.0;
        Optimizer opt(oc, {p});
        const auto before = p.value();
        for (int i = 0; i < 3; ++i) {
            opt.zero_grad();
            backward(sum_all(square(p)));
            opt.step();
        }
        CHECK(p.value() == before);
    }

    TEST_CASE("momentum sgd with weight decay") {
        Var p = parameter(Tensor({1}, {1.0}));
        OptimizerConfig oc;
        oc.lr = 0.1;
        oc.momentum = 0.9;
        oc.weight_decay = 0.5;
        Optimizer opt(oc, {p});
        opt.zero_grad();
        backward(scale(sum_all(p), 2.0));  // g = 2
        opt.step();
        // m = 2 + 0.5 * 1 = 2.5
        CHECK(p.value()[0] == doctest::Approx(1.0 - 0.25));
        opt.zero_grad();
        backward(scale(sum_all(p), 2.0));
        opt.step();
        // m = 0.9 * 2.5 + 2 + 0.5 * 0.75
        CHECK(p.value()[0] == doctest::Approx(0.75 - 0.1 * (2.25 + 2.0 + 0.375)));
    }

    TEST_CASE("adam first step moves by the learning rate") {
        Var p = parameter(Tensor({2}, {1.0, 1.0}));
        OptimizerConfig oc;
        oc.kind = "adam";
        oc.lr = 0.01;
        oc.weight_decay = 0.0;
        Optimizer opt(oc, {p});
        opt.zero_grad();
        backward(sum_all(mul(p, constant(Tensor({2}, {3.0, -0.5})))));
        opt.step();
        CHECK(p.value()[0] == doctest::Approx(0.99).epsilon(1e-6));
        CHECK(p.value()[1] == doctest::Approx(1.01).epsilon(1e-6));
    }

    TEST_CASE("parameters without a gradient are skipped") {
        Var used = parameter(Tensor({1}, {1.0}));
        Var unused = parameter(Tensor({1}, {1.0}));
        Optimizer opt(OptimizerConfig{}, {used, unused});
        opt.zero_grad();
        backward(sum_all(used));
        opt.step();
        CHECK(used.value()[0] < 1.0);
        CHECK(unused.value()[0] == 1.0);
    }
}

TEST_SUITE("training") {
    TEST_CASE("prepared data follows the configured split") {
        const auto data = prepare_data(tiny_config());
        CHECK(data.dataset.class_count() == 12);
        CHECK(data.split.train.size() == 6);
        CHECK(data.split.val.size() == 3);
        CHECK(data.split.test.size() == 3);
        auto cfg = tiny_config();
        cfg.eval_shape.way = 4;
        CHECK_THROWS_AS(prepare_data(cfg), ConfigError);
    }

    TEST_CASE("a seed fixes the whole run") {
        const auto cfg = tiny_config();
        const auto data = prepare_data(cfg);
        const auto a = train(cfg, data);
        const auto b = train(cfg, data);
        REQUIRE(a.log.size() == b.log.size());
        for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss == b.log[i].loss);
        CHECK(a.log[2].val_acc.has_value());
        CHECK_FALSE(a.log[1].val_acc.has_value());
        CHECK(a.best_val.has_value());
    }

    TEST_CASE("separable 2-way task is learned") {
        auto cfg = tiny_config();
        cfg.synth.noise_sigma = 0.0;
        cfg.synth.jitter = 0;
        cfg.train_shape = {2, 1, 3};
        cfg.train_episodes = 40;
        cfg.val_every = 0;
        const auto data = prepare_data(cfg);
        const auto result = train(cfg, data);
        double tail = 0.0;
        for (std::size_t i = result.log.size() - 5; i < result.log.size(); ++i) tail += result.log[i].train_acc;
        CHECK(tail / 5.0 == 1.0);
        CHECK(result.log.back().loss < result.log.front().loss);
    }

    TEST_CASE("train log csv") {
        const auto path = test::scratch_dir("trainlog") / "log.csv";
        write_train_log(path, {{1, 0.5, 0.75, std::nullopt}, {2, 0.25, 1.0, 0.5}});
        CHECK(read_text(path) == "episode,loss,train_acc,val_acc\n1,0.5,0.75,\n2,0.25,1,0.5\n");
    }
}

TEST_SUITE("evaluation") {
    TEST_CASE("thread count does not change the result") {
        const auto cfg = tiny_config();
        const auto data = prepare_data(cfg);
        const auto model = make_model(cfg.model, 1);
        EvalOptions opts;
        opts.shape = cfg.eval_shape;
        opts.episodes = 6;
        opts.base_seed = 500;
        const auto one = evaluate(model, data, opts);
        opts.threads = 3;
        const auto three = evaluate(model, data, opts);
        CHECK(one.metrics.accuracies == three.metrics.accuracies);
        CHECK(one.metrics.episodes == 6);
    }

    TEST_CASE("weight dump covers the requested episodes") {
        const auto cfg = tiny_config();
        const auto data = prepare_data(cfg);
        const auto model = make_model(cfg.model, 2);
        EvalOptions opts;
        opts.shape = cfg.eval_shape;
        opts.episodes = 3;
        opts.dump_episodes = 2;
        const auto result = evaluate(model, data, opts);
        CHECK(result.weights.size() == 2 * 3 * 8);
        for (const auto& row : result.weights) {
            CHECK(row.episode < 2);
            CHECK(row.w_task == doctest::Approx(0.5 * row.w_support + 0.5 * row.w_query));
        }
    }

    TEST_CASE("clones share no state") {
        const auto cfg = tiny_config();
        auto model = make_model(cfg.model, 3);
        auto copy = clone(model);
        copy.backbone.blocks[0].kernel.mutable_value().array() += 1.0;
        CHECK_FALSE(copy.backbone.blocks[0].kernel.value() == model.backbone.blocks[0].kernel.value());
    }
}

TEST_SUITE("ablation and sweep") {
    TEST_CASE("row order and labels") {
        const auto flags = ablation_flags();
        REQUIRE(flags.size() == 8);
        std::vector<std::string> labels;
        for (const auto& f : flags) labels.push_back(AblationRow{f[0], f[1], f[2], {}}.label());
        CHECK(labels == std::vector<std::string>{"none", "S", "Q", "I", "SQ", "SI", "QI", "SQI"});
    }

    TEST_CASE("cells wider than the test split are skipped with a note") {
        auto cfg = tiny_config();
        cfg.sweep_ways = {2, 5};
        cfg.eval_episodes = 2;
        const auto data = prepare_data(cfg);
        const auto model = make_model(cfg.model, 4);
        const auto cells = sweep_nk(model, data, cfg);
        REQUIRE(cells.size() == 2);
        CHECK(cells[0].metrics.has_value());
        CHECK_FALSE(cells[1].metrics.has_value());
        CHECK(cells[1].note.find("5-way exceeds 3") != std::string::npos);

        const auto path = test::scratch_dir("sweep") / "sweep.csv";
        write_sweep_csv(path, cells);
        CHECK(read_text(path).rfind("way,shot,mean,ci95,episodes,note\n", 0) == 0);
    }

    TEST_CASE("ablation grid trains every variant") {
        auto cfg = tiny_config();
        cfg.train_episodes = 2;
        cfg.val_every = 0;
        cfg.eval_episodes = 2;
        const auto data = prepare_data(cfg);
        Index seen = 0;
        const auto rows = ablation_grid(cfg, data, [&](const AblationRow&) { ++seen; });
        CHECK(seen == 8);
        REQUIRE(rows.size() == 8);
        CHECK(rows[4].label() == "SQ");
        CHECK(rows[4].settings.size() == 1);
        CHECK(rows[4].settings[0].way == 3);

        const auto path = test::scratch_dir("ablation") / "ablation.csv";
        write_ablation_csv(path, rows);
        CHECK(read_text(path).rfind("row,sam,qam,iam,way,shot,mean,ci95,episodes\n", 0) == 0);
    }
}

TEST_SUITE("cli") {
    TEST_CASE("exit codes") {
        const auto dir = test::scratch_dir("cli");
        CHECK(run_cli("") == 1);
        CHECK(run_cli("train --bogus 1") == 1);
        CHECK(run_cli("train --model.nonsense 1") == 1);
        CHECK(run_cli("train --config /nonexistent/tdm.toml") == 1);
        CHECK(run_cli("frobnicate") == 1);
        CHECK(run_cli("eval --run.checkpoint " + (dir / "missing").string()) == 1);
        std::ofstream(dir / "broken.json") << "{ not json";
        std::ofstream(dir / "broken.tnsr") << "junk";
        CHECK(run_cli("eval --run.checkpoint " + (dir / "broken").string()) == 2);
        CHECK(run_cli("oracle-check --trials 5") == 0);
    }

    TEST_CASE("synth-data writes a loadable dataset") {
        const auto dir = test::scratch_dir("cli_synth");
        REQUIRE(run_cli("synth-data --out " + dir.string() +
                        " --data.classes 4 --data.instances 3 --data.image_size 16 --data.patch_size 4") == 0);
        const auto ds = data::load_dataset(dir);
        CHECK(ds.class_count() == 4);
        CHECK(ds.image_size == 16);
    }
}
