#include "tdm/head/head.hpp"

#include <stdexcept>

namespace tdm::head {
namespace {

Var embed_distance(const Var& a, const Var& b, const HeadConfig& config) {
    if (config.metric == Metric::cosine) return cosine_distance(a, b, config.temperature);
    return sum(square(sub(a, b)), {a.rank() - 1});
}

// Flatten trailing CxHxW into one axis.
Var flatten_maps(const Var& maps) {
    Shape shape(maps.shape().begin(), maps.shape().end() - 3);
    shape.push_back(maps.dim(maps.rank() - 3) * maps.dim(maps.rank() - 2) * maps.dim(maps.rank() - 1));
    return reshape(maps, shape);
}

// Pooled [..., C] embedding of [..., C, H, W] maps.
Var pool_maps(const Var& maps) { return mean(maps, {maps.rank() - 2, maps.rank() - 1}); }

struct PairGrid {
    Var protos;   // QxNxD
    Var queries;  // QxNxD
};

PairGrid pair_grid(const Var& prototypes, const Var& queries, const HeadConfig& config) {
    if (prototypes.rank() != 4 || queries.rank() != 4 || prototypes.dim(1) != queries.dim(1) ||
        prototypes.dim(2) != queries.dim(2) || prototypes.dim(3) != queries.dim(3)) {
        throw ShapeError("head: prototypes " + shape_str(prototypes.shape()) + " vs queries " +
                         shape_str(queries.shape()));
    }
    const Index n = prototypes.dim(0);
    const Index q = queries.dim(0);
    if (config.distance_on == DistanceOn::pooled) {
        const Var p = global_avg_pool(prototypes);  // NxC
        const Var e = global_avg_pool(queries);     // QxC
        const Index c = p.dim(1);
        return {broadcast_to(p, {q, n, c}), broadcast_to(reshape(e, {q, 1, c}), {q, n, c})};
    }
    const Index c = prototypes.dim(1);
    const Index area = prototypes.dim(2) * prototypes.dim(3);
    return {broadcast_to(reshape(prototypes, {n, c, area}), {q, n, c, area}),
            broadcast_to(reshape(queries, {q, 1, c, area}), {q, n, c, area})};
}

Var grid_distance(const PairGrid& grid, const HeadConfig& config) {
    if (config.distance_on == DistanceOn::pooled) return embed_distance(grid.protos, grid.queries, config);
    const Index q = grid.protos.dim(0);
    const Index n = grid.protos.dim(1);
    return embed_distance(reshape(grid.protos, {q, n, grid.protos.size() / (q * n)}),
                          reshape(grid.queries, {q, n, grid.queries.size() / (q * n)}), config);
}

}  // namespace

Metric parse_metric(const std::string& name) {
    if (name == "euclidean") return Metric::euclidean;
    if (name == "cosine") return Metric::cosine;
    throw std::invalid_argument("unknown metric '" + name + "' (expected euclidean or cosine)");
}

std::string to_string(Metric metric) { return metric == Metric::cosine ? "cosine" : "euclidean"; }

DistanceOn parse_distance_on(const std::string& name) {
    if (name == "pooled") return DistanceOn::pooled;
    if (name == "flattened") return DistanceOn::flattened;
    throw std::invalid_argument("unknown distance_on '" + name + "' (expected pooled or flattened)");
}

Var pooled(const Var& map) { return global_avg_pool(map); }

Var class_distances(const Var& adaptive_prototypes, const Var& adaptive_queries, const HeadConfig& config) {
    if (adaptive_prototypes.shape() != adaptive_queries.shape() || adaptive_prototypes.rank() < 3) {
        throw ShapeError("class_distances: " + shape_str(adaptive_prototypes.shape()) + " vs " +
                         shape_str(adaptive_queries.shape()));
    }
    if (config.distance_on == DistanceOn::pooled) {
        return embed_distance(pool_maps(adaptive_prototypes), pool_maps(adaptive_queries), config);
    }
    return embed_distance(flatten_maps(adaptive_prototypes), flatten_maps(adaptive_queries), config);
}

EpisodeLogits class_probabilities(const Var& adaptive_prototypes, const Var& adaptive_query_maps,
                                  const HeadConfig& config) {
    if (adaptive_prototypes.rank() != 4) {
        throw ShapeError("class_probabilities expects NxCxHxW maps, got " + shape_str(adaptive_prototypes.shape()));
    }
    const Var d = class_distances(adaptive_prototypes, adaptive_query_maps, config);
    const Index n = adaptive_prototypes.dim(0);
    EpisodeLogits out;
    out.distances = d.value().reshaped({1, n});
    Tensor logits(out.distances.shape(), -out.distances.array());
    out.probabilities = softmax(logits);
    out.metric = config.metric;
    out.temperature = config.metric == Metric::cosine ? config.temperature : 1.0;
    return out;
}

Var task_adaptive_distances(const Var& prototypes, const Var& queries, const Var& task_weights,
                            const HeadConfig& config) {
    PairGrid grid = pair_grid(prototypes, queries, config);
    const Shape& ws = task_weights.shape();
    if (ws.size() != 3 || ws[0] != queries.dim(0) || ws[1] != prototypes.dim(0) || ws[2] != prototypes.dim(1)) {
        throw ShapeError("task_adaptive_distances: task weights " + shape_str(ws));
    }
    Var w = task_weights;
    if (config.distance_on == DistanceOn::flattened) {
        w = broadcast_to(reshape(task_weights, {ws[0], ws[1], ws[2], 1}), grid.protos.shape());
    }
    grid.protos = mul(w, grid.protos);
    grid.queries = mul(w, grid.queries);
    return grid_distance(grid, config);
}

Var protonet_distances(const Var& prototypes, const Var& queries, const HeadConfig& config) {
    return grid_distance(pair_grid(prototypes, queries, config), config);
}

Var episode_loss(const Var& logits, std::span<const Index> labels) {
    return softmax_cross_entropy(logits, labels).loss;
}

double episode_accuracy(const Tensor& logits, std::span<const Index> labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size())) {
        throw ShapeError("episode_accuracy: logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
    }
    if (labels.empty()) return 0.0;
    const Index n = logits.dim(1);
    Index correct = 0;
    for (Index r = 0; r < logits.dim(0); ++r) {
        Index best = 0;
        for (Index j = 1; j < n; ++j) {
            if (logits[r * n + j] > logits[r * n + best]) best = j;
        }
        if (best == labels[static_cast<std::size_t>(r)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace tdm::head
