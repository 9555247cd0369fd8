#pragma once

#include "tdm/numeric/ops.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace tdm::attention {

struct TdmConfig {
    double alpha = 0.5;  // intra vs inter weight inside SAM
    double beta = 0.5;   // support vs query weight inside TDM
    double noise_half_width = 0.2;
    double clamp_lo = 0.0;
    double clamp_hi = 2.0;
    bool sam = true;
    bool qam = true;
    bool iam = true;

    void validate() const;
};

using NamedVar = std::pair<std::string, Var>;
using NamedTensor = std::pair<std::string, Tensor*>;

/// Score-to-weight block: linear C->2C, batch norm, ReLU, linear 2C->C, 1 + tanh.
struct FcBlock {
    Var w1;
    Var b1;
    BatchNorm bn;
    Var w2;
    Var b2;

    /// Fan-in uniform linear weights; the output bias starts at zero.
    static FcBlock make(Index width, Rng& rng);

    Index width() const { return w1.dim(1); }
    void collect_parameters(const std::string& prefix, std::vector<NamedVar>& out) const;
    void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out);
};

/// scores: BxC -> weights BxC. Eval returns 1 + tanh(.) in (0, 2); train adds
/// Uniform(-h, h) noise and clamps to [clamp_lo, clamp_hi].
Var fc_forward(FcBlock& block, const Var& scores, Mode mode, Rng& rng, const TdmConfig& config);

struct SupportWeights {
    Var intra;    // NxC
    Var inter;    // NxC
    Var support;  // NxC, alpha * intra + (1 - alpha) * inter
};

/// Support attention over NxCxHxW prototypes (N >= 2).
SupportWeights sam(const Var& prototypes, FcBlock& b_intra, FcBlock& b_inter, const TdmConfig& config, Mode mode,
                   Rng& rng);

/// Query attention over a QxCxHxW batch of query maps; returns QxC.
Var qam(const Var& query_maps, FcBlock& b_query, Mode mode, Rng& rng, const TdmConfig& config);

/// Task weights QxNxC: beta * w_support[i] + (1 - beta) * w_query[q].
/// An undefined operand stands for a disabled module and reads as all-ones;
/// with both undefined the result is exactly all-ones.
Var compose_task_weights(const Var& w_support, const Var& w_query, double beta, Index n_way, Index n_query,
                         Index channels);

/// Scales channel c of every support map of class i by task_weights[i,c].
/// support: class-major (N*K)xCxHxW, task_weights: NxC.
Var apply_to_support(const Var& support, const Var& task_weights, Index k_shot);

/// One weighted copy of the query map per class: CxHxW (or 1xCxHxW) with NxC
/// task weights -> NxCxHxW.
Var apply_to_query(const Var& query_map, const Var& task_weights);

/// Instance attention on an intermediate BxCxHxW activation.
Var iam_forward(FcBlock& block, const Var& intermediate, Mode mode, Rng& rng, const TdmConfig& config);

struct WeightDumpRow {
    Index episode;
    Index class_index;
    Index channel;
    double w_intra;
    double w_inter;
    double w_support;
    double w_query;
    double w_task;
};

/// Columns episode, class, channel, w_intra, w_inter, w_S, w_Q, w_T.
void write_weight_dump(const std::filesystem::path& path, const std::vector<WeightDumpRow>& rows);

}  // namespace tdm::attention
