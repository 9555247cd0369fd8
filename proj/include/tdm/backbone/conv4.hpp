#pragma once

#include "tdm/attention/attention.hpp"
#include "tdm/numeric/ops.hpp"

#include <optional>
#include <vector>

namespace tdm::backbone {

inline constexpr Index kBlocks = 4;

struct ConvBlock {
    Var kernel;  // out x in x 3 x 3
    Var bias;
    BatchNorm bn;
};

/// Conv-4: four conv3x3 / batch-norm / ReLU / maxpool2 blocks with optional
/// instance attention after selected blocks (1-based indices).
struct BackboneParams {
    std::vector<ConvBlock> blocks;
    std::vector<std::optional<attention::FcBlock>> iam;  // one slot per block
    Index channels = 64;

    std::vector<Index> iam_blocks() const;
    void collect_parameters(std::vector<attention::NamedVar>& out) const;
    void collect_buffers(std::vector<attention::NamedTensor>& out);
};

/// Fan-in uniform kernels, zero conv bias, identity batch norm. IAM blocks are
/// created for each listed block index (1-based).
BackboneParams init_backbone(Rng& rng, Index channels = 64, std::vector<Index> iam_after = {1, 2},
                             Index in_channels = 3);

/// Spatial extent after the four poolings for an SxS input.
Index output_extent(Index image_size);

/// images: Bx3xSxS -> BxCxHxW. With iam_enabled, each attached IAM rescales
/// its block's output before the next block.
Var extract(BackboneParams& params, const Var& images, Mode mode, bool iam_enabled, Rng& rng,
            const attention::TdmConfig& config);

}  // namespace tdm::backbone
