#pragma once

#include "tdm/attention/attention.hpp"
#include "tdm/backbone/conv4.hpp"
#include "tdm/data/data.hpp"
#include "tdm/head/head.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace tdm::harness {

struct ModelConfig {
    Index channels = 64;
    std::vector<Index> iam_blocks{1, 2};
    attention::TdmConfig tdm;
    head::HeadConfig head;
};

/// Backbone, the three TDM score blocks and the metric head settings.
struct Model {
    ModelConfig config;
    backbone::BackboneParams backbone;
    attention::FcBlock b_intra;
    attention::FcBlock b_inter;
    attention::FcBlock b_query;

    std::vector<attention::NamedVar> parameters() const;
    std::vector<attention::NamedTensor> buffers();
};

/// Parameters are drawn in a fixed order independent of the enabled flags,
/// so every ablation variant built from one seed starts from the same weights.
Model make_model(const ModelConfig& config, std::uint64_t seed);

struct EpisodeForward {
    Var logits;  // QxN, -distance
    Var loss;
    Tensor probabilities;
    double accuracy = 0.0;
    Var features;  // (S+Q)xCxHxW
    Var prototypes;
    attention::SupportWeights support_weights;  // undefined when SAM is off
    Var query_weights;                          // QxC, undefined when QAM is off
    Var task_weights;                           // QxNxC
};

struct EpisodeBatch {
    Tensor support;  // (N*K)x3xSxS, class-major
    Tensor query;    // (N*U)x3xSxS
    std::vector<Index> query_labels;
    Index n_way = 0;
    Index k_shot = 0;
};

EpisodeBatch make_batch(const data::Dataset& dataset, const data::Episode& episode, Rng* augment_rng = nullptr,
                        const data::AugmentFlags& flags = {});

/// Full pipeline: backbone (+IAM) -> prototypes -> SAM/QAM -> task weights -> head.
EpisodeForward forward_episode(Model& model, const EpisodeBatch& batch, Mode mode, Rng& rng);

/// Plain prototype network on the IAM-free backbone; the reference path for ablations.
Var protonet_logits(Model& model, const EpisodeBatch& batch, Mode mode, Rng& rng);

/// Checkpoint = <stem>.tnsr (concatenated tensor containers) + <stem>.json
/// (model config, and name -> byte offset/shape for every tensor).
void save_checkpoint(Model& model, const std::filesystem::path& stem);
Model load_checkpoint(const std::filesystem::path& stem);

/// Snapshot/restore every parameter and buffer value.
std::vector<Tensor> snapshot(Model& model);
void restore(Model& model, const std::vector<Tensor>& values);

}  // namespace tdm::harness
