#include "tdm/harness/experiment.hpp"

#include "tdm/log.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <thread>

namespace tdm::harness {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << std::setprecision(17);
    return out;
}

// Fixed offsets keep training, validation and test episode streams apart.
constexpr std::uint64_t kValStream = 0x5645'4C00'0000'0000ull;
constexpr std::uint64_t kAugmentStream = 0x4155'4700'0000'0000ull;

void check_hygiene(const data::Episode& ep, const data::ClassSplit& split, data::SplitPart part) {
    const auto pool = data::part(split, part);
    for (Index id : ep.class_ids) {
        if (std::find(pool.begin(), pool.end(), id) == pool.end()) {
            throw std::logic_error("episode drew class " + std::to_string(id) + " outside the " +
                                   data::to_string(part) + " split");
        }
        if (part != data::SplitPart::train &&
            std::find(split.train.begin(), split.train.end(), id) != split.train.end()) {
            throw std::logic_error("evaluation episode drew training class " + std::to_string(id));
        }
    }
}

}  // namespace

std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t index) {
    std::uint64_t z = run_seed + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

ExperimentData prepare_data(const ExperimentConfig& config) {
    ExperimentData out;
    if (config.data_source == "synthetic") {
        out.dataset = data::generate_synthetic(config.synth);
    } else if (config.data_source == "folder") {
        out.dataset = data::load_image_folder(config.data_path, config.synth.image_size);
    } else {
        out.dataset = data::load_dataset(config.data_path);
    }
    out.split = data::build_split(out.dataset, config.split_fractions, config.split_seed);
    if (config.eval_shape.way > static_cast<Index>(out.split.test.size())) {
        throw ConfigError("eval.way " + std::to_string(config.eval_shape.way) + " exceeds the " +
                          std::to_string(out.split.test.size()) + " test classes");
    }
    if (config.train_shape.way > static_cast<Index>(out.split.train.size())) {
        throw ConfigError("train.way exceeds the number of training classes");
    }
    return out;
}

std::optional<double> ci95_half_width(std::span<const double> acc) {
    const auto n = static_cast<double>(acc.size());
    if (acc.size() < 2) return std::nullopt;
    const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : acc) ss += (a - mean) * (a - mean);
    return 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

MetricsRecord summarize(std::vector<double> accuracies, double wall_seconds) {
    MetricsRecord m;
    m.episodes = static_cast<Index>(accuracies.size());
    if (!accuracies.empty()) {
        m.mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / static_cast<double>(accuracies.size());
    }
    const auto ci = ci95_half_width(accuracies);
    m.ci_defined = ci.has_value();
    m.ci95 = ci.value_or(0.0);
    m.accuracies = std::move(accuracies);
    m.wall_seconds = wall_seconds;
    return m;
}

Optimizer::Optimizer(const OptimizerConfig& config, std::vector<Var> parameters)
    : config_(config), params_(std::move(parameters)) {
    for (const auto& p : params_) {
        m_.push_back(Tensor::Array::Zero(p.size()));
        if (config_.kind == "adam") v_.push_back(Tensor::Array::Zero(p.size()));
    }
}

void Optimizer::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void Optimizer::step() {
    ++t_;
    const double lr = config_.lr;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& node = *params_[i].node();
        if (!node.has_grad()) continue;
        auto& value = params_[i].mutable_value().array();
        Tensor::Array g = node.grad.array() + config_.weight_decay * value;
        if (config_.kind == "adam") {
            constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            m_[i] = b1 * m_[i] + (1.0 - b1) * g;
            v_[i] = b2 * v_[i] + (1.0 - b2) * g.square();
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
            value -= lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps);
        } else {
            m_[i] = config_.momentum * m_[i] + g;
            value -= lr * m_[i];
        }
    }
}

DivergenceError::DivergenceError(Index ep, std::uint64_t s)
    : std::runtime_error("training diverged (non-finite loss) at episode " + std::to_string(ep) + ", episode seed " +
                         std::to_string(s)),
      episode(ep),
      seed(s) {}

Model clone(const Model& model) {
    Model copy = make_model(model.config, 0);
    restore(copy, snapshot(const_cast<Model&>(model)));
    return copy;
}

TrainResult train(const ExperimentConfig& config, const ExperimentData& data, const ProgressFn& progress) {
    config.validate();
    const auto start = Clock::now();
    TrainResult result{make_model(config.model, config.seed), {}, std::nullopt, -1, 0.0};
    Model& model = result.model;

    std::vector<Var> params;
    for (const auto& [name, var] : model.parameters()) params.push_back(var);
    Optimizer optimizer(config.optim, params);

    EvalOptions val;
    val.part = data::SplitPart::val;
    val.shape = config.eval_shape;
    val.shape.way = std::min<Index>(val.shape.way, static_cast<Index>(data.split.val.size()));
    val.shape.query = config.val_query;
    val.episodes = config.val_episodes;
    val.base_seed = episode_seed(config.seed ^ kValStream, 0);
    val.threads = config.threads;
    const bool validate = config.val_every > 0 && config.val_episodes > 0 && val.shape.way >= 2;

    std::vector<Tensor> best;
    const Index shot = config.effective_train_shot();
    for (Index ep = 0; ep < config.train_episodes; ++ep) {
        const std::uint64_t seed = episode_seed(config.seed, static_cast<std::uint64_t>(ep));
        Rng rng(seed);
        const auto episode = data::sample_episode(data.dataset, data.split.train, config.train_shape.way, shot,
                                                  config.train_shape.query, rng);
        Rng augment_rng(seed ^ kAugmentStream);
        const auto batch = make_batch(data.dataset, episode, &augment_rng, config.augment);

        optimizer.zero_grad();
        auto fwd = forward_episode(model, batch, Mode::train, rng);
        const double loss = fwd.loss.value()[0];
        if (!std::isfinite(loss)) throw DivergenceError(ep, seed);
        backward(fwd.loss);
        optimizer.step();

        TrainLogRow row{ep, loss, fwd.accuracy, std::nullopt};
        if (validate && (ep + 1) % config.val_every == 0) {
            const double acc = evaluate(model, data, val).metrics.mean;
            row.val_acc = acc;
            if (!result.best_val || acc > *result.best_val) {
                result.best_val = acc;
                result.best_episode = ep;
                best = snapshot(model);
            }
        }
        result.log.push_back(row);
        if (progress) progress(row);
    }
    if (!best.empty()) restore(model, best);
    result.wall_seconds = seconds_since(start);
    return result;
}

EvalResult evaluate(const Model& model, const ExperimentData& data, const EvalOptions& options) {
    const auto start = Clock::now();
    const Index total = options.episodes;
    std::vector<double> acc(static_cast<std::size_t>(total), 0.0);
    std::vector<std::vector<attention::WeightDumpRow>> dumps(
        static_cast<std::size_t>(std::min(total, options.dump_episodes)));
    const auto pool = data::part(data.split, options.part);

    const Index workers = std::clamp<Index>(options.threads, 1, std::max<Index>(1, total));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    auto run = [&](Index worker) {
        try {
            NoGradGuard no_grad;
            Model local = clone(model);
            for (Index e = worker; e < total; e += workers) {
                Rng rng(options.base_seed + static_cast<std::uint64_t>(e));
                const auto episode = data::sample_episode(data.dataset, pool, options.shape.way, options.shape.shot,
                                                          options.shape.query, rng);
                check_hygiene(episode, data.split, options.part);
                const auto batch = make_batch(data.dataset, episode);
                const auto fwd = forward_episode(local, batch, Mode::eval, rng);
                acc[static_cast<std::size_t>(e)] = fwd.accuracy;
                if (e < static_cast<Index>(dumps.size())) {
                    auto& rows = dumps[static_cast<std::size_t>(e)];
                    const Index n = batch.n_way;
                    const Index c = fwd.features.dim(1);
                    const Index q = batch.query.dim(0);
                    const auto& tw = fwd.task_weights.value();
                    for (Index i = 0; i < n; ++i) {
                        for (Index ch = 0; ch < c; ++ch) {
                            attention::WeightDumpRow r{e, i, ch, 1.0, 1.0, 1.0, 1.0, 0.0};
                            if (fwd.support_weights.support.defined()) {
                                r.w_intra = fwd.support_weights.intra.value().at(i, ch);
                                r.w_inter = fwd.support_weights.inter.value().at(i, ch);
                                r.w_support = fwd.support_weights.support.value().at(i, ch);
                            }
                            double wq = 0.0;
                            for (Index u = 0; u < q; ++u) {
                                if (fwd.query_weights.defined()) wq += fwd.query_weights.value().at(u, ch);
                                r.w_task += tw.at(u, i, ch);
                            }
                            r.w_query = fwd.query_weights.defined() ? wq / static_cast<double>(q) : 1.0;
                            r.w_task /= static_cast<double>(q);
                            rows.push_back(r);
                        }
                    }
                }
            }
        } catch (...) {
            errors[static_cast<std::size_t>(worker)] = std::current_exception();
        }
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::thread> threads;
        for (Index w = 0; w < workers; ++w) threads.emplace_back(run, w);
        for (auto& t : threads) t.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    EvalResult out;
    out.metrics = summarize(std::move(acc), seconds_since(start));
    for (auto& d : dumps) out.weights.insert(out.weights.end(), d.begin(), d.end());
    return out;
}

std::string AblationRow::label() const {
    std::string s;
    if (sam) s += 'S';
    if (qam) s += 'Q';
    if (iam) s += 'I';
    return s.empty() ? "none" : s;
}

std::vector<std::array<bool, 3>> ablation_flags() {
    return {{false, false, false}, {true, false, false}, {false, true, false}, {false, false, true},
            {true, true, false},   {true, false, true},  {false, true, true},  {true, true, true}};
}

std::vector<AblationRow> ablation_grid(const ExperimentConfig& config, const ExperimentData& data,
                                       const std::function<void(const AblationRow&)>& on_row) {
    std::vector<AblationRow> rows;
    for (const auto& flags : ablation_flags()) {
        ExperimentConfig cfg = config;
        cfg.model.tdm.sam = flags[0];
        cfg.model.tdm.qam = flags[1];
        cfg.model.tdm.iam = flags[2];
        const auto trained = train(cfg, data);
        AblationRow row{flags[0], flags[1], flags[2], {}};
        for (Index shot : config.sweep_shots) {
            EvalOptions opt;
            opt.shape = {config.eval_shape.way, shot, config.eval_shape.query};
            opt.episodes = config.eval_episodes;
            opt.base_seed = config.eval_seed;
            opt.threads = config.threads;
            row.settings.push_back({opt.shape.way, shot, evaluate(trained.model, data, opt).metrics});
        }
        if (on_row) on_row(row);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<SweepCell> sweep_nk(const Model& model, const ExperimentData& data, const ExperimentConfig& config) {
    std::vector<SweepCell> cells;
    const auto test_classes = static_cast<Index>(data.split.test.size());
    for (Index way : config.sweep_ways) {
        for (Index shot : config.sweep_shots) {
            SweepCell cell{way, shot, std::nullopt, ""};
            if (way > test_classes) {
                cell.note = "skipped: " + std::to_string(way) + "-way exceeds " + std::to_string(test_classes) +
                            " test classes";
            } else if (way < 2 && model.config.tdm.sam) {
                cell.note = "skipped: SAM needs at least 2 classes";
            } else {
                EvalOptions opt;
                opt.shape = {way, shot, config.eval_shape.query};
                opt.episodes = config.eval_episodes;
                opt.base_seed = config.eval_seed;
                opt.threads = config.threads;
                try {
                    cell.metrics = evaluate(model, data, opt).metrics;
                } catch (const std::invalid_argument& e) {
                    cell.note = std::string("skipped: ") + e.what();
                }
            }
            if (!cell.note.empty()) record_warning(cell.note);
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

void write_metrics_json(const std::filesystem::path& path, const MetricsRecord& m) {
    nlohmann::json j{{"mean", m.mean},
                     {"ci95", m.ci95},
                     {"ci_defined", m.ci_defined},
                     {"episodes", m.episodes},
                     {"wall_seconds", m.wall_seconds},
                     {"accuracies", m.accuracies}};
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

MetricsRecord read_metrics_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    const auto j = nlohmann::json::parse(in);
    MetricsRecord m;
    m.mean = j.at("mean").get<double>();
    m.ci95 = j.at("ci95").get<double>();
    m.ci_defined = j.at("ci_defined").get<bool>();
    m.episodes = j.at("episodes").get<Index>();
    m.wall_seconds = j.at("wall_seconds").get<double>();
    m.accuracies = j.at("accuracies").get<std::vector<double>>();
    return m;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log) {
    auto out = open_out(path);
    out << "episode,loss,train_acc,val_acc\n";
    for (const auto& r : log) {
        out << r.episode << ',' << r.loss << ',' << r.train_acc << ',';
        if (r.val_acc) out << *r.val_acc;
        out << '\n';
    }
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
    auto out = open_out(path);
    out << "row,sam,qam,iam,way,shot,mean,ci95,episodes\n";
    for (const auto& r : rows) {
        for (const auto& s : r.settings) {
            out << r.label() << ',' << r.sam << ',' << r.qam << ',' << r.iam << ',' << s.way << ',' << s.shot << ','
                << s.metrics.mean << ',' << s.metrics.ci95 << ',' << s.metrics.episodes << '\n';
        }
    }
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepCell>& cells) {
    auto out = open_out(path);
    out << "way,shot,mean,ci95,episodes,note\n";
    for (const auto& c : cells) {
        out << c.way << ',' << c.shot << ',';
        if (c.metrics) out << c.metrics->mean << ',' << c.metrics->ci95 << ',' << c.metrics->episodes;
        else out << ",,";
        out << ",\"" << c.note << "\"\n";
    }
}

std::vector<Tensor> class_features(const Model& model, const data::Dataset& dataset, std::span<const Index> ids) {
    NoGradGuard no_grad;
    Model local = clone(model);
    Rng rng(0);
    std::vector<Tensor> out;
    for (Index id : ids) {
        // One instance per pass: a batched GEMM may round edge columns differently,
        // and identical images must give identical features.
        const auto& cls = dataset.by_id(id);
        std::vector<Var> maps;
        for (Index i = 0; i < static_cast<Index>(cls.instances.size()); ++i) {
            const data::InstanceRef ref{id, i};
            const Tensor image = data::stack_instances(dataset, std::span(&ref, 1));
            maps.push_back(backbone::extract(local.backbone, constant(image), Mode::eval, local.config.tdm.iam, rng,
                                             local.config.tdm));
        }
        out.push_back(concat(maps).value());
    }
    return out;
}

}  // namespace tdm::harness
