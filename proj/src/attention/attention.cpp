#include "tdm/attention/attention.hpp"

#include "tdm/scores/scores.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace tdm::attention {
namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

}  // namespace

void TdmConfig::validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("alpha must lie in [0,1]");
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("beta must lie in [0,1]");
    if (noise_half_width < 0.0) throw std::invalid_argument("noise half width must be nonnegative");
    if (!(clamp_lo < clamp_hi)) throw std::invalid_argument("clamp range must satisfy lo < hi");
}

FcBlock FcBlock::make(Index width, Rng& rng) {
    const double a1 = std::sqrt(1.0 / static_cast<double>(width));
    const double a2 = std::sqrt(1.0 / static_cast<double>(2 * width));
    FcBlock block;
    block.w1 = parameter(uniform_tensor({2 * width, width}, a1, rng));
    block.b1 = parameter(uniform_tensor({2 * width}, a1, rng));
    block.bn = BatchNorm::make(2 * width);
    block.w2 = parameter(uniform_tensor({width, 2 * width}, a2, rng));
    block.b2 = parameter(Tensor::zeros({width}));
    return block;
}

void FcBlock::collect_parameters(const std::string& prefix, std::vector<NamedVar>& out) const {
    out.emplace_back(prefix + ".fc1.weight", w1);
    out.emplace_back(prefix + ".fc1.bias", b1);
    out.emplace_back(prefix + ".bn.scale", bn.scale);
    out.emplace_back(prefix + ".bn.shift", bn.shift);
    out.emplace_back(prefix + ".fc2.weight", w2);
    out.emplace_back(prefix + ".fc2.bias", b2);
}

void FcBlock::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.emplace_back(prefix + ".bn.running_mean", &bn.running_mean);
    out.emplace_back(prefix + ".bn.running_var", &bn.running_var);
}

Var fc_forward(FcBlock& block, const Var& scores, Mode mode, Rng& rng, const TdmConfig& config) {
    if (scores.rank() != 2 || scores.dim(1) != block.width()) {
        throw ShapeError("fc_forward: scores " + shape_str(scores.shape()) + " for a block of width " +
                         std::to_string(block.width()));
    }
    Var h = linear(scores, block.w1, block.b1);
    h = relu(batch_norm(h, block.bn, mode));
    Var out = one_plus_tanh(linear(h, block.w2, block.b2));
    if (mode == Mode::train) {
        if (config.noise_half_width > 0.0) out = add_noise(out, rng, -config.noise_half_width, config.noise_half_width);
        out = clamp(out, config.clamp_lo, config.clamp_hi);
    }
    return out;
}

SupportWeights sam(const Var& protos, FcBlock& b_intra, FcBlock& b_inter, const TdmConfig& config, Mode mode,
                   Rng& rng) {
    if (protos.rank() != 4 || protos.dim(0) < 2) {
        throw std::invalid_argument("sam: needs at least two class prototypes; the inter-class minimum is empty for " +
                                    shape_str(protos.shape()));
    }
    SupportWeights w;
    w.intra = fc_forward(b_intra, scores::intra_scores(protos), mode, rng, config);
    w.inter = fc_forward(b_inter, scores::inter_scores(protos), mode, rng, config);
    w.support = lerp(w.intra, w.inter, config.alpha);
    return w;
}

Var qam(const Var& query_maps, FcBlock& b_query, Mode mode, Rng& rng, const TdmConfig& config) {
    return fc_forward(b_query, scores::intra_scores(query_maps), mode, rng, config);
}

Var compose_task_weights(const Var& w_support, const Var& w_query, double beta, Index n_way, Index n_query,
                         Index channels) {
    const Shape out{n_query, n_way, channels};
    if (!w_support.defined() && !w_query.defined()) return constant(Tensor::ones(out));
    if (w_support.defined() && w_support.shape() != Shape{n_way, channels}) {
        throw ShapeError("compose_task_weights: support weights " + shape_str(w_support.shape()));
    }
    if (w_query.defined() && w_query.shape() != Shape{n_query, channels}) {
        throw ShapeError("compose_task_weights: query weights " + shape_str(w_query.shape()));
    }
    const Var s = w_support.defined() ? broadcast_to(w_support, out) : constant(Tensor::ones(out));
    const Var q = w_query.defined() ? broadcast_to(reshape(w_query, {n_query, 1, channels}), out)
                                    : constant(Tensor::ones(out));
    return lerp(s, q, beta);
}

Var apply_to_support(const Var& support, const Var& task_weights, Index k_shot) {
    if (task_weights.rank() != 2 || support.rank() != 4 || support.dim(0) != task_weights.dim(0) * k_shot) {
        throw ShapeError("apply_to_support: support " + shape_str(support.shape()) + " with task weights " +
                         shape_str(task_weights.shape()) + " and K=" + std::to_string(k_shot));
    }
    std::vector<Index> rows;
    for (Index i = 0; i < task_weights.dim(0); ++i) {
        for (Index k = 0; k < k_shot; ++k) rows.push_back(i);
    }
    return scale_channels(support, gather(task_weights, rows));
}

Var apply_to_query(const Var& query_map, const Var& task_weights) {
    Var q = query_map.rank() == 3 ? reshape(query_map, {1, query_map.dim(0), query_map.dim(1), query_map.dim(2)})
                                  : query_map;
    if (q.rank() != 4 || q.dim(0) != 1 || task_weights.rank() != 2 || task_weights.dim(1) != q.dim(1)) {
        throw ShapeError("apply_to_query: query " + shape_str(query_map.shape()) + " with task weights " +
                         shape_str(task_weights.shape()));
    }
    const Index n = task_weights.dim(0);
    return scale_channels(broadcast_to(q, {n, q.dim(1), q.dim(2), q.dim(3)}), task_weights);
}

Var iam_forward(FcBlock& block, const Var& intermediate, Mode mode, Rng& rng, const TdmConfig& config) {
    if (intermediate.rank() != 4 || intermediate.dim(1) != block.width()) {
        throw ShapeError("iam_forward: activation " + shape_str(intermediate.shape()) + " for a block of width " +
                         std::to_string(block.width()));
    }
    const Var w = fc_forward(block, scores::intra_scores(intermediate), mode, rng, config);
    return scale_channels(intermediate, w);
}

void write_weight_dump(const std::filesystem::path& path, const std::vector<WeightDumpRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(10);
    out << "episode,class,channel,w_intra,w_inter,w_S,w_Q,w_T\n";
    for (const auto& r : rows) {
        out << r.episode << ',' << r.class_index << ',' << r.channel << ',' << r.w_intra << ',' << r.w_inter << ','
            << r.w_support << ',' << r.w_query << ',' << r.w_task << '\n';
    }
}

}  // namespace tdm::attention
