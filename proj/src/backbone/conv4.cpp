#include "tdm/backbone/conv4.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tdm::backbone {

std::vector<Index> BackboneParams::iam_blocks() const {
    std::vector<Index> out;
    for (std::size_t i = 0; i < iam.size(); ++i) {
        if (iam[i]) out.push_back(static_cast<Index>(i) + 1);
    }
    return out;
}

void BackboneParams::collect_parameters(std::vector<attention::NamedVar>& out) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "backbone.block" + std::to_string(i + 1);
        out.emplace_back(p + ".conv.weight", blocks[i].kernel);
        out.emplace_back(p + ".conv.bias", blocks[i].bias);
        out.emplace_back(p + ".bn.scale", blocks[i].bn.scale);
        out.emplace_back(p + ".bn.shift", blocks[i].bn.shift);
    }
    for (std::size_t i = 0; i < iam.size(); ++i) {
        if (iam[i]) iam[i]->collect_parameters("iam.block" + std::to_string(i + 1), out);
    }
}

void BackboneParams::collect_buffers(std::vector<attention::NamedTensor>& out) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "backbone.block" + std::to_string(i + 1);
        out.emplace_back(p + ".bn.running_mean", &blocks[i].bn.running_mean);
        out.emplace_back(p + ".bn.running_var", &blocks[i].bn.running_var);
    }
    for (std::size_t i = 0; i < iam.size(); ++i) {
        if (iam[i]) iam[i]->collect_buffers("iam.block" + std::to_string(i + 1), out);
    }
}

BackboneParams init_backbone(Rng& rng, Index channels, std::vector<Index> iam_after, Index in_channels) {
    BackboneParams params;
    params.channels = channels;
    Index in = in_channels;
    for (Index b = 0; b < kBlocks; ++b) {
        const double bound = std::sqrt(1.0 / static_cast<double>(in * 9));
        Tensor kernel(Shape{channels, in, 3, 3});
        for (Index i = 0; i < kernel.size(); ++i) kernel[i] = rng.uniform(-bound, bound);
        params.blocks.push_back({parameter(std::move(kernel)), parameter(Tensor::zeros({channels})), BatchNorm::make(channels)});
        in = channels;
    }
    params.iam.resize(kBlocks);
    for (Index b : iam_after) {
        if (b < 1 || b > kBlocks - 1) {
            throw std::invalid_argument("IAM can follow blocks 1.." + std::to_string(kBlocks - 1) + ", got " + std::to_string(b));
        }
    }
    // Draw IAM blocks in block order so the backbone stream is unaffected by placement.
    for (Index b = 1; b < kBlocks; ++b) {
        if (std::find(iam_after.begin(), iam_after.end(), b) != iam_after.end()) {
            params.iam[static_cast<std::size_t>(b - 1)] = attention::FcBlock::make(channels, rng);
        }
    }
    return params;
}

Index output_extent(Index image_size) {
    Index s = image_size;
    for (Index b = 0; b < kBlocks; ++b) s /= 2;
    return s;
}

Var extract(BackboneParams& params, const Var& images, Mode mode, bool iam_enabled, Rng& rng,
            const attention::TdmConfig& config) {
    if (images.rank() != 4) throw ShapeError("extract expects Bx3xSxS images, got " + shape_str(images.shape()));
    if (params.blocks.empty() || images.dim(1) != params.blocks.front().kernel.dim(1)) {
        throw ShapeError("extract: images " + shape_str(images.shape()) + " do not match the first block's input channels");
    }
    if (images.dim(2) < 16 || images.dim(3) < 16) {
        throw ShapeError("extract: input " + shape_str(images.shape()) + " is below 16x16; four poolings would empty it");
    }
    Var x = images;
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        auto& block = params.blocks[b];
        x = maxpool2(relu(batch_norm(conv2d(x, block.kernel, block.bias), block.bn, mode)));
        if (iam_enabled && params.iam[b]) x = attention::iam_forward(*params.iam[b], x, mode, rng, config);
    }
    return x;
}

}  // namespace tdm::backbone
