#include "tdm/oracles/oracles.hpp"

#include "tdm/attention/attention.hpp"
#include "tdm/harness/model.hpp"
#include "tdm/head/head.hpp"
#include "tdm/scores/scores.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tdm::oracles {

Tensor prototype_loop(const std::vector<Tensor>& maps) {
    Tensor out(maps.at(0).shape());
    for (Index i = 0; i < out.size(); ++i) {
        double s = 0.0;
        for (const auto& m : maps) s += m[i];
        out[i] = s / static_cast<double>(maps.size());
    }
    return out;
}

Tensor mean_spatial_loop(const Tensor& map) {
    const Index C = map.dim(0), H = map.dim(1), W = map.dim(2);
    Tensor out(Shape{H, W});
    for (Index h = 0; h < H; ++h) {
        for (Index w = 0; w < W; ++w) {
            double s = 0.0;
            for (Index c = 0; c < C; ++c) s += map.at(c, h, w);
            out.at(h, w) = s / static_cast<double>(C);
        }
    }
    return out;
}

Tensor intra_loop(const Tensor& map) {
    const Index C = map.dim(0), H = map.dim(1), W = map.dim(2);
    const Tensor m = mean_spatial_loop(map);
    Tensor out(Shape{C});
    for (Index c = 0; c < C; ++c) {
        double s = 0.0;
        for (Index h = 0; h < H; ++h) {
            for (Index w = 0; w < W; ++w) {
                const double d = map.at(c, h, w) - m.at(h, w);
                s += d * d;
            }
        }
        out[c] = s / static_cast<double>(H * W);
    }
    return out;
}

Tensor inter_loop(const Tensor& prototypes, Index i) {
    const Index N = prototypes.dim(0), C = prototypes.dim(1), H = prototypes.dim(2), W = prototypes.dim(3);
    Tensor out = Tensor::constant({C}, std::numeric_limits<double>::infinity());
    for (Index j = 0; j < N; ++j) {
        if (j == i) continue;
        Tensor other(Shape{C, H, W});
        for (Index c = 0; c < C; ++c)
            for (Index h = 0; h < H; ++h)
                for (Index w = 0; w < W; ++w) other.at(c, h, w) = prototypes.at(j, c, h, w);
        const Tensor m = mean_spatial_loop(other);
        for (Index c = 0; c < C; ++c) {
            double s = 0.0;
            for (Index h = 0; h < H; ++h) {
                for (Index w = 0; w < W; ++w) {
                    const double d = prototypes.at(i, c, h, w) - m.at(h, w);
                    s += d * d;
                }
            }
            out[c] = std::min(out[c], s / static_cast<double>(H * W));
        }
    }
    return out;
}

Tensor apply_support_loop(const Tensor& support, const Tensor& weights, Index k_shot) {
    Tensor out(support.shape());
    const Index B = support.dim(0), C = support.dim(1), H = support.dim(2), W = support.dim(3);
    for (Index b = 0; b < B; ++b)
        for (Index c = 0; c < C; ++c)
            for (Index h = 0; h < H; ++h)
                for (Index w = 0; w < W; ++w) out.at(b, c, h, w) = weights.at(b / k_shot, c) * support.at(b, c, h, w);
    return out;
}

Tensor apply_query_loop(const Tensor& query, const Tensor& weights) {
    const Index N = weights.dim(0), C = query.dim(0), H = query.dim(1), W = query.dim(2);
    Tensor out(Shape{N, C, H, W});
    for (Index i = 0; i < N; ++i)
        for (Index c = 0; c < C; ++c)
            for (Index h = 0; h < H; ++h)
                for (Index w = 0; w < W; ++w) out.at(i, c, h, w) = weights.at(i, c) * query.at(c, h, w);
    return out;
}

Tensor pooled_loop(const Tensor& map) {
    const Index C = map.dim(0), H = map.dim(1), W = map.dim(2);
    Tensor out(Shape{C});
    for (Index c = 0; c < C; ++c) {
        double s = 0.0;
        for (Index h = 0; h < H; ++h)
            for (Index w = 0; w < W; ++w) s += map.at(c, h, w);
        out[c] = s / static_cast<double>(H * W);
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    if (a.size() == 0) return 0.0;
    return (a.array() - b.array()).abs().maxCoeff();
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, 1.0);
    return t;
}

Tensor row(const Tensor& t, Index i) {
    Shape shape(t.shape().begin() + 1, t.shape().end());
    const Index stride = numel(shape);
    return Tensor(shape, Tensor::Array(t.array().segment(i * stride, stride)));
}

}  // namespace

std::vector<OracleResult> run_oracle_suite(Index trials, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<OracleResult> results{{"prototype", 0, 0.0},        {"mean_spatial", 0, 0.0},
                                      {"intra_scores", 0, 0.0},     {"inter_scores", 0, 0.0},
                                      {"apply_to_support", 0, 0.0}, {"apply_to_query", 0, 0.0},
                                      {"pooled", 0, 0.0}};
    auto record = [&](std::size_t k, double err) {
        results[k].trials += 1;
        results[k].max_abs_error = std::max(results[k].max_abs_error, err);
    };
    for (Index t = 0; t < trials; ++t) {
        const Index C = 1 + rng.index(8);
        const Index H = 1 + rng.index(4);
        const Index W = 1 + rng.index(4);
        const Index N = 2 + rng.index(4);
        const Index K = 1 + rng.index(3);
        const Tensor support = random_tensor({N * K, C, H, W}, rng);

        const Tensor protos = scores::prototypes(constant(support), N, K).value();
        double err = 0.0;
        for (Index i = 0; i < N; ++i) {
            std::vector<Tensor> maps;
            for (Index k = 0; k < K; ++k) maps.push_back(row(support, i * K + k));
            err = std::max(err, max_abs_diff(row(protos, i), prototype_loop(maps)));
        }
        record(0, err);

        const Tensor ms = scores::mean_spatial(constant(protos)).value();
        err = 0.0;
        for (Index i = 0; i < N; ++i) err = std::max(err, max_abs_diff(row(ms, i), mean_spatial_loop(row(protos, i))));
        record(1, err);

        const Tensor intra = scores::intra_scores(constant(protos)).value();
        err = 0.0;
        for (Index i = 0; i < N; ++i) err = std::max(err, max_abs_diff(row(intra, i), intra_loop(row(protos, i))));
        record(2, err);

        const Tensor inter = scores::inter_scores(constant(protos)).value();
        err = 0.0;
        for (Index i = 0; i < N; ++i) err = std::max(err, max_abs_diff(row(inter, i), inter_loop(protos, i)));
        record(3, err);

        Tensor weights = random_tensor({N, C}, rng);
        weights.array() = weights.array().abs().min(2.0);
        const Tensor adaptive = attention::apply_to_support(constant(support), constant(weights), K).value();
        record(4, max_abs_diff(adaptive, apply_support_loop(support, weights, K)));

        const Tensor query = random_tensor({C, H, W}, rng);
        const Tensor aq = attention::apply_to_query(constant(query), constant(weights)).value();
        record(5, max_abs_diff(aq, apply_query_loop(query, weights)));

        record(6, max_abs_diff(head::pooled(constant(query)).value(), pooled_loop(query)));
    }
    return results;
}

std::vector<GradCheckEntry> finite_difference_check(const std::function<Var()>& loss,
                                                    const std::vector<std::pair<std::string, Var>>& leaves,
                                                    double step) {
    for (const auto& [name, v] : leaves) v.zero_grad();
    {
        Var root = loss();
        backward(root);
    }
    std::vector<GradCheckEntry> out;
    NoGradGuard no_grad;
    BranchTrace trace;
    auto evaluate = [&] {
        trace.reset();
        const double value = loss().value()[0];
        return std::pair{value, trace.digest()};
    };
    const auto [center, center_digest] = evaluate();
    for (const auto& [name, v] : leaves) {
        const Tensor analytic = v.grad();
        Tensor numeric(analytic.shape());
        Tensor& value = v.mutable_value();
        Index one_sided = 0;
        Index straddled = 0;
        for (Index i = 0; i < value.size(); ++i) {
            const double saved = value[i];
            value[i] = saved + step;
            const auto [up, up_digest] = evaluate();
            value[i] = saved - step;
            const auto [down, down_digest] = evaluate();
            value[i] = saved;
            const bool up_same = up_digest == center_digest;
            const bool down_same = down_digest == center_digest;
            if (up_same && down_same) {
                numeric[i] = (up - down) / (2.0 * step);
            } else if (!up_same && !down_same) {
                numeric[i] = analytic[i];  // no same-piece difference at this step; excluded
                ++straddled;
            } else {
                // Second-order one-sided stencil when the 2h point stays on the same piece.
                const double dir = up_same ? 1.0 : -1.0;
                const double near = up_same ? up : down;
                value[i] = saved + 2.0 * dir * step;
                const auto [far, far_digest] = evaluate();
                value[i] = saved;
                numeric[i] = far_digest == center_digest ? dir * (4.0 * near - 3.0 * center - far) / (2.0 * step)
                                                         : dir * (near - center) / step;
                ++one_sided;
            }
        }
        GradCheckEntry e;
        e.name = name;
        e.size = value.size();
        const double diff = (analytic.array() - numeric.array()).matrix().norm();
        const double scale = std::max(analytic.array().matrix().norm(), numeric.array().matrix().norm());
        e.relative_error = scale > 0.0 ? diff / scale : diff;
        e.max_abs_error = (analytic.array() - numeric.array()).abs().maxCoeff();
        e.analytic_norm = analytic.array().matrix().norm();
        e.one_sided = one_sided;
        e.straddled = straddled;
        out.push_back(e);
    }
    return out;
}

std::vector<GradCheckEntry> micro_model_grad_check(std::uint64_t seed, double step) {
    Rng rng(seed);
    harness::ModelConfig config;
    config.channels = 8;
    config.iam_blocks = {1, 2};
    config.tdm.noise_half_width = 0.0;
    harness::Model model = harness::make_model(config, seed);

    // Perturb every output bias away from zero so the 1 + tanh heads sit off their symmetric point.
    for (auto& [name, v] : model.parameters()) {
        if (name.find("fc2.bias") != std::string::npos || name.find("bn.shift") != std::string::npos) {
            for (Index i = 0; i < v.size(); ++i) v.mutable_value()[i] = rng.uniform(-0.3, 0.3);
        }
    }

    harness::EpisodeBatch batch;
    batch.n_way = 2;
    batch.k_shot = 1;
    batch.support = random_tensor({2, 3, 16, 16}, rng);
    batch.query = random_tensor({4, 3, 16, 16}, rng);
    batch.query_labels = {0, 0, 1, 1};

    // One train-mode pass gives the batch norms non-trivial running statistics.
    {
        NoGradGuard no_grad;
        Rng noise(seed + 1);
        harness::forward_episode(model, batch, Mode::train, noise);
    }
    auto loss = [&]() {
        Rng unused(0);
        return harness::forward_episode(model, batch, Mode::eval, unused).loss;
    };
    return finite_difference_check(loss, model.parameters(), step);
}

}  // namespace tdm::oracles
