#pragma once

#include "tdm/numeric/ops.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <vector>

namespace tdm::scores {

// Dense kernels over one feature map laid out as a C x (H*W) matrix.

/// Channel mean of a C x P map: the 1 x P mean spatial feature.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, 1, Eigen::Dynamic> mean_spatial_row(const Eigen::MatrixBase<Derived>& map) {
    return map.colwise().mean();
}

/// Per-channel mean squared deviation from a 1 x P spatial map.
template <typename DerivedMap, typename DerivedRef>
Eigen::Matrix<typename DerivedMap::Scalar, Eigen::Dynamic, 1> deviation_from(const Eigen::MatrixBase<DerivedMap>& map,
                                                                             const Eigen::MatrixBase<DerivedRef>& ref) {
    using Scalar = typename DerivedMap::Scalar;
    return (map.rowwise() - ref).rowwise().squaredNorm() / static_cast<Scalar>(map.cols());
}

/// Intra score of every channel: deviation from the map's own mean spatial feature.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> intra_row(const Eigen::MatrixBase<Derived>& map) {
    return deviation_from(map, mean_spatial_row(map));
}

// Differentiable graph forms, batched over the leading axis.

/// Class-wise mean of a class-major support batch (N*K)xCxHxW -> NxCxHxW.
Var prototypes(const Var& support, Index n_way, Index k_shot);

/// BxCxHxW -> BxHxW.
Var mean_spatial(const Var& maps);

/// BxCxHxW -> BxC; entry (b,c) is the mean over positions of (f_c - M)^2.
Var intra_scores(const Var& maps);

/// NxCxHxW prototypes -> NxC; entry (i,c) is the minimum over j != i of the
/// mean squared distance between channel c of prototype i and M_j.
Var inter_scores(const Var& prototypes);

/// For each (i,c), the class j attaining the inter minimum (smallest j on ties).
std::vector<std::vector<Index>> inter_nearest_class(const Tensor& prototypes);

/// Pooled channel statistics of instances grouped by class.
struct VarianceReport {
    Tensor mean;      // N x C, class mean of the spatially pooled activation
    Tensor variance;  // N x C, population variance across the class's instances
    std::vector<Index> counts;
};

/// Each group is a J_i x C x H x W batch of one class's feature maps.
VarianceReport variance_report(const std::vector<Tensor>& groups);

/// Columns class_id, channel, mean, variance.
void write_variance_csv(const std::filesystem::path& path, const VarianceReport& report,
                        const std::vector<Index>& class_ids = {});

}  // namespace tdm::scores
