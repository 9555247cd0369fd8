#include "tdm/scores/scores.hpp"

#include <fstream>
#include <limits>
#include <stdexcept>

namespace tdm::scores {
namespace {

void require_maps(const Var& maps, const char* op) {
    if (maps.rank() != 4) throw ShapeError(std::string(op) + " expects BxCxHxW, got " + shape_str(maps.shape()));
    if (maps.dim(1) < 1) throw ShapeError(std::string(op) + ": no channels");
}

}  // namespace

Var prototypes(const Var& support, Index n_way, Index k_shot) {
    if (k_shot < 1) throw std::invalid_argument("prototypes: need at least one support map per class");
    require_maps(support, "prototypes");
    if (support.dim(0) != n_way * k_shot) {
        throw ShapeError("prototypes: " + shape_str(support.shape()) + " is not " + std::to_string(n_way) + "x" +
                         std::to_string(k_shot) + " maps");
    }
    Shape grouped{n_way, k_shot, support.dim(1), support.dim(2), support.dim(3)};
    return mean(reshape(support, grouped), {1});
}

Var mean_spatial(const Var& maps) {
    require_maps(maps, "mean_spatial");
    return mean(maps, {1});
}

Var intra_scores(const Var& maps) {
    require_maps(maps, "intra_scores");
    const Index batch = maps.dim(0);
    const Index channels = maps.dim(1);
    const Index area = maps.dim(2) * maps.dim(3);
    Tensor out(Shape{batch, channels});
    for (Index b = 0; b < batch; ++b) {
        out.array().segment(b * channels, channels) = intra_row(maps.value().matrix(channels, area, b * channels * area)).array();
    }
    return make_op("intra_scores", std::move(out), {maps}, [batch, channels, area](Node& self) {
        Node& in = *self.inputs[0];
        Tensor& gx = in.grad_buffer();
        const double scale = 2.0 / static_cast<double>(area);
        for (Index b = 0; b < batch; ++b) {
            const Index off = b * channels * area;
            const auto f = in.value.matrix(channels, area, off);
            const Eigen::RowVectorXd m = mean_spatial_row(f);
            const Eigen::MatrixXd d = f.rowwise() - m;
            const Eigen::VectorXd g = self.grad.array().segment(b * channels, channels).matrix();
            // dR_c/df_{c'p} = (2/P) d_{cp} (delta_{cc'} - 1/C)
            const Eigen::MatrixXd gd = d.array().colwise() * g.array();
            const Eigen::RowVectorXd shared = gd.colwise().sum() / static_cast<double>(channels);
            gx.matrix(channels, area, off) += scale * (gd.rowwise() - shared);
        }
    });
}

Var inter_scores(const Var& protos) {
    require_maps(protos, "inter_scores");
    const Index n = protos.dim(0);
    if (n < 2) throw std::invalid_argument("inter_scores: needs at least two classes (the minimum over other classes is empty)");
    const Index channels = protos.dim(1);
    const Index area = protos.dim(2) * protos.dim(3);
    std::vector<Eigen::RowVectorXd> means(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        means[static_cast<std::size_t>(i)] = mean_spatial_row(protos.value().matrix(channels, area, i * channels * area));
    }
    Tensor out(Shape{n, channels});
    std::vector<Index> argmin(static_cast<std::size_t>(n * channels));
    for (Index i = 0; i < n; ++i) {
        const auto f = protos.value().matrix(channels, area, i * channels * area);
        Eigen::VectorXd best = Eigen::VectorXd::Constant(channels, std::numeric_limits<double>::infinity());
        for (Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const Eigen::VectorXd dist = deviation_from(f, means[static_cast<std::size_t>(j)]);
            for (Index c = 0; c < channels; ++c) {
                if (dist[c] < best[c]) {
                    best[c] = dist[c];
                    argmin[static_cast<std::size_t>(i * channels + c)] = j;
                }
            }
        }
        out.array().segment(i * channels, channels) = best.array();
    }
    if (tracing_branches()) {
        for (Index j : argmin) trace_branch(static_cast<std::uint64_t>(j));
    }
    return make_op("inter_scores", std::move(out), {protos}, [n, channels, area, means, argmin](Node& self) {
        Node& in = *self.inputs[0];
        Tensor& gx = in.grad_buffer();
        const double scale = 2.0 / static_cast<double>(area);
        // Gradient w.r.t. each class's mean spatial map, spread over its channels afterwards.
        std::vector<Eigen::RowVectorXd> gmean(static_cast<std::size_t>(n), Eigen::RowVectorXd::Zero(area));
        for (Index i = 0; i < n; ++i) {
            const Index off = i * channels * area;
            const auto f = in.value.matrix(channels, area, off);
            auto g = gx.matrix(channels, area, off);
            for (Index c = 0; c < channels; ++c) {
                const double up = self.grad[i * channels + c];
                if (up == 0.0) continue;
                const Index j = argmin[static_cast<std::size_t>(i * channels + c)];
                const Eigen::RowVectorXd d = scale * up * (f.row(c) - means[static_cast<std::size_t>(j)]);
                g.row(c) += d;
                gmean[static_cast<std::size_t>(j)] -= d;
            }
        }
        for (Index j = 0; j < n; ++j) {
            auto g = gx.matrix(channels, area, j * channels * area);
            g.rowwise() += gmean[static_cast<std::size_t>(j)] / static_cast<double>(channels);
        }
    });
}

std::vector<std::vector<Index>> inter_nearest_class(const Tensor& protos) {
    if (protos.rank() != 4 || protos.dim(0) < 2) throw ShapeError("inter_nearest_class expects NxCxHxW with N >= 2");
    const Index n = protos.dim(0);
    const Index channels = protos.dim(1);
    const Index area = protos.dim(2) * protos.dim(3);
    std::vector<std::vector<Index>> nearest(static_cast<std::size_t>(n), std::vector<Index>(static_cast<std::size_t>(channels), -1));
    for (Index i = 0; i < n; ++i) {
        const auto f = protos.matrix(channels, area, i * channels * area);
        Eigen::VectorXd best = Eigen::VectorXd::Constant(channels, std::numeric_limits<double>::infinity());
        for (Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const Eigen::VectorXd dist = deviation_from(f, mean_spatial_row(protos.matrix(channels, area, j * channels * area)));
            for (Index c = 0; c < channels; ++c) {
                if (dist[c] < best[c]) {
                    best[c] = dist[c];
                    nearest[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = j;
                }
            }
        }
    }
    return nearest;
}

VarianceReport variance_report(const std::vector<Tensor>& groups) {
    if (groups.empty()) throw std::invalid_argument("variance_report: no classes");
    const Index channels = groups.front().dim(1);
    VarianceReport report{Tensor(Shape{static_cast<Index>(groups.size()), channels}),
                          Tensor(Shape{static_cast<Index>(groups.size()), channels}), {}};
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const Tensor& g = groups[i];
        if (g.rank() != 4 || g.dim(0) < 1 || g.dim(1) != channels) {
            throw ShapeError("variance_report: class group " + std::to_string(i) + " has shape " + shape_str(g.shape()));
        }
        const Index count = g.dim(0);
        const Index area = g.dim(2) * g.dim(3);
        // s: per-instance spatial average of each channel. A sequential sum, since
        // a vectorized one depends on row alignment and identical instances must agree.
        Eigen::MatrixXd s(count, channels);
        for (Index j = 0; j < count; ++j) {
            for (Index c = 0; c < channels; ++c) {
                const double* plane = g.data() + (j * channels + c) * area;
                double acc = 0.0;
                for (Index p = 0; p < area; ++p) acc += plane[p];
                s(j, c) = acc / static_cast<double>(area);
            }
        }
        // Shifted by the first instance so identical instances give an exact zero variance.
        const Eigen::RowVectorXd shifted_mean = (s.rowwise() - s.row(0)).colwise().mean();
        const Eigen::RowVectorXd sbar = s.row(0) + shifted_mean;
        const Eigen::RowVectorXd v = ((s.rowwise() - s.row(0)).rowwise() - shifted_mean).colwise().squaredNorm() / static_cast<double>(count);
        const auto row = static_cast<Index>(i);
        report.mean.array().segment(row * channels, channels) = sbar.transpose().array();
        report.variance.array().segment(row * channels, channels) = v.transpose().array();
        report.counts.push_back(count);
    }
    return report;
}

void write_variance_csv(const std::filesystem::path& path, const VarianceReport& report,
                        const std::vector<Index>& class_ids) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    out << "class_id,channel,mean,variance\n";
    const Index n = report.mean.dim(0);
    const Index channels = report.mean.dim(1);
    for (Index i = 0; i < n; ++i) {
        const Index id = class_ids.empty() ? i : class_ids[static_cast<std::size_t>(i)];
        for (Index c = 0; c < channels; ++c) {
            out << id << ',' << c << ',' << report.mean.at(i, c) << ',' << report.variance.at(i, c) << '\n';
        }
    }
}

}  // namespace tdm::scores
