#pragma once

#include "tdm/numeric/ops.hpp"

#include <span>
#include <string>

namespace tdm::head {

enum class Metric { euclidean, cosine };
enum class DistanceOn { pooled, flattened };

Metric parse_metric(const std::string& name);
std::string to_string(Metric metric);
DistanceOn parse_distance_on(const std::string& name);

struct HeadConfig {
    Metric metric = Metric::euclidean;
    double temperature = 10.0;  // cosine only
    DistanceOn distance_on = DistanceOn::pooled;
};

/// Global average pool of a CxHxW map (or a batch), the C-dim embedding.
Var pooled(const Var& map);

/// Distances between matched maps of shape [..., C, H, W]; returns [...].
/// Euclidean: squared L2 between embeddings. Cosine: tau * (1 - cos).
Var class_distances(const Var& adaptive_prototypes, const Var& adaptive_queries, const HeadConfig& config);

struct EpisodeLogits {
    Tensor distances;      // QxN
    Tensor probabilities;  // QxN, softmax(-d)
    Metric metric = Metric::euclidean;
    double temperature = 1.0;
};

/// Probabilities for one query from its N per-class adaptive maps and the N
/// adaptive prototypes (both NxCxHxW).
EpisodeLogits class_probabilities(const Var& adaptive_prototypes, const Var& adaptive_query_maps,
                                  const HeadConfig& config);

/// Query-by-class distances under per-query task weights.
/// prototypes: NxCxHxW, queries: QxCxHxW, task_weights: QxNxC -> QxN.
Var task_adaptive_distances(const Var& prototypes, const Var& queries, const Var& task_weights,
                            const HeadConfig& config);

/// Plain prototype-network distances on raw features, QxN.
Var protonet_distances(const Var& prototypes, const Var& queries, const HeadConfig& config);

/// Mean negative log-probability of the true class; logits are -d.
Var episode_loss(const Var& logits, std::span<const Index> labels);

/// Fraction of rows whose argmax (first index on ties) equals the label.
double episode_accuracy(const Tensor& logits, std::span<const Index> labels);

}  // namespace tdm::head
