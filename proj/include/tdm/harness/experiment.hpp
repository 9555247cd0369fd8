#pragma once

#include "tdm/harness/config.hpp"
#include "tdm/harness/model.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdm::harness {

/// Seed for episode `index` of a run; splitmix64 over (seed, index).
std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t index);

struct ExperimentData {
    data::Dataset dataset;
    data::ClassSplit split;
};

ExperimentData prepare_data(const ExperimentConfig& config);

struct MetricsRecord {
    double mean = 0.0;
    double ci95 = 0.0;  // 0 when undefined (fewer than two episodes)
    bool ci_defined = false;
    Index episodes = 0;
    std::vector<double> accuracies;
    double wall_seconds = 0.0;
};

/// 1.96 * sample sd / sqrt(E); nullopt for E < 2.
std::optional<double> ci95_half_width(std::span<const double> accuracies);
MetricsRecord summarize(std::vector<double> accuracies, double wall_seconds);

/// SGD with momentum and decoupled-from-schedule L2 decay, or Adam.
/// Parameters that received no gradient this step are left untouched.
class Optimizer {
public:
    Optimizer(const OptimizerConfig& config, std::vector<Var> parameters);
    void zero_grad();
    void step();

private:
    OptimizerConfig config_;
    std::vector<Var> params_;
    std::vector<Tensor::Array> m_;
    std::vector<Tensor::Array> v_;
    Index t_ = 0;
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(Index episode, std::uint64_t seed);
    Index episode;
    std::uint64_t seed;
};

struct TrainLogRow {
    Index episode = 0;
    double loss = 0.0;
    double train_acc = 0.0;
    std::optional<double> val_acc;
};

struct TrainResult {
    Model model;  // best-validation weights when validation ran, else final
    std::vector<TrainLogRow> log;
    std::optional<double> best_val;
    Index best_episode = -1;
    double wall_seconds = 0.0;
};

using ProgressFn = std::function<void(const TrainLogRow&)>;

TrainResult train(const ExperimentConfig& config, const ExperimentData& data, const ProgressFn& progress = {});

struct EvalOptions {
    data::SplitPart part = data::SplitPart::test;
    EpisodeShape shape;
    Index episodes = 600;
    std::uint64_t base_seed = 0;
    Index threads = 1;
    Index dump_episodes = 0;  // episodes whose attention weights are collected
};

struct EvalResult {
    MetricsRecord metrics;
    std::vector<attention::WeightDumpRow> weights;
};

/// Episodes use seeds base..base+E-1 and are merged by index, so the thread
/// count never changes the result.
EvalResult evaluate(const Model& model, const ExperimentData& data, const EvalOptions& options);

/// Deep copy (shares no nodes with the source).
Model clone(const Model& model);

struct AblationSetting {
    Index way = 5;
    Index shot = 1;
    MetricsRecord metrics;
};

struct AblationRow {
    bool sam = false;
    bool qam = false;
    bool iam = false;
    std::vector<AblationSetting> settings;
    std::string label() const;  // none, S, Q, I, SQ, SI, QI, SQI
};

/// Row order none; S; Q; I; SQ; SI; QI; SQI.
std::vector<std::array<bool, 3>> ablation_flags();

/// Trains each flag combination from config.seed and evaluates at eval.way x sweep.shots.
std::vector<AblationRow> ablation_grid(const ExperimentConfig& config, const ExperimentData& data,
                                       const std::function<void(const AblationRow&)>& on_row = {});

struct SweepCell {
    Index way = 0;
    Index shot = 0;
    std::optional<MetricsRecord> metrics;
    std::string note;
};

std::vector<SweepCell> sweep_nk(const Model& model, const ExperimentData& data, const ExperimentConfig& config);

// Writers.
void write_metrics_json(const std::filesystem::path& path, const MetricsRecord& metrics);
MetricsRecord read_metrics_json(const std::filesystem::path& path);
void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepCell>& cells);

/// Backbone features of every instance of the given classes, grouped per class.
std::vector<Tensor> class_features(const Model& model, const data::Dataset& dataset, std::span<const Index> class_ids);

}  // namespace tdm::harness
