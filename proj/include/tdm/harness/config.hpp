#pragma once

#include "tdm/data/data.hpp"
#include "tdm/harness/model.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdm::harness {

/// Invalid or unknown configuration; the CLI maps it to exit status 1.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat "section.key" -> value map read from INI/TOML-style text:
///   [train]
///   episodes = 2000   # comment
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
KeyValues read_config_file(const std::filesystem::path& path);

struct OptimizerConfig {
    std::string kind = "sgd";  // sgd | adam
    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

/// 30 classes, so the default 2/3, 1/6, 1/6 split gives 20 / 5 / 5.
inline data::SynthConfig default_experiment_synth() {
    data::SynthConfig c;
    c.n_classes = 30;
    return c;
}

struct EpisodeShape {
    Index way = 5;
    Index shot = 1;
    Index query = 16;
};

struct ExperimentConfig {
    // data
    std::string data_source = "synthetic";  // synthetic | folder | saved
    std::filesystem::path data_path;
    data::SynthConfig synth = default_experiment_synth();
    std::array<double, 3> split_fractions{2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0};
    std::uint64_t split_seed = 0;
    data::AugmentFlags augment;

    ModelConfig model;
    OptimizerConfig optim;

    Index train_episodes = 2000;
    EpisodeShape train_shape;
    Index val_every = 100;
    Index val_episodes = 100;
    Index val_query = 16;  // queries per class in validation episodes

    Index eval_episodes = 600;
    EpisodeShape eval_shape;
    std::uint64_t eval_seed = 1'000'000;
    bool reuse_5shot_for_1shot = false;

    std::vector<Index> sweep_ways{2, 5};
    std::vector<Index> sweep_shots{1, 5};

    std::uint64_t seed = 0;
    std::filesystem::path out_dir = "runs/default";
    std::filesystem::path checkpoint;
    Index threads = 1;

    /// Training shot after applying reuse_5shot_for_1shot.
    Index effective_train_shot() const;
    void validate() const;
};

/// Every key the config understands, with its current value rendered as text.
KeyValues to_key_values(const ExperimentConfig& config);

/// Applies recognised keys on top of `base`; unknown keys or bad values throw ConfigError.
ExperimentConfig apply_key_values(ExperimentConfig base, const KeyValues& values);

/// TDM_SEED overrides run.seed; TDM_THREADS caps run.threads.
void apply_environment(ExperimentConfig& config);

}  // namespace tdm::harness
