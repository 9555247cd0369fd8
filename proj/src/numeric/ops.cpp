#include "tdm/numeric/ops.hpp"

#include "tdm/log.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>
#include <stdexcept>

namespace tdm {
namespace {

using RowMatrix = Tensor::RowMatrix;

void require_same_shape(const char* op, const Var& a, const Var& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

std::vector<Index> contiguous_strides(const Shape& shape) {
    std::vector<Index> strides(shape.size(), 1);
    for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i) {
        strides[static_cast<std::size_t>(i)] = strides[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
    }
    return strides;
}

/// Visits every multi-index of `shape`, passing the offsets under two stride sets.
template <typename F>
void for_each_strided(const Shape& shape, const std::vector<Index>& sa, const std::vector<Index>& sb, F&& f) {
    const std::size_t rank = shape.size();
    const Index total = numel(shape);
    if (total == 0) return;
    std::vector<Index> counter(rank, 0);
    Index oa = 0;
    Index ob = 0;
    for (Index n = 0; n < total; ++n) {
        f(oa, ob);
        for (std::size_t k = rank; k-- > 0;) {
            ++counter[k];
            oa += sa[k];
            ob += sb[k];
            if (counter[k] < shape[k]) break;
            oa -= sa[k] * shape[k];
            ob -= sb[k] * shape[k];
            counter[k] = 0;
        }
    }
}

template <typename Fwd, typename Bwd>
Var unary(const char* op, const Var& x, Fwd fwd, Bwd dfdx) {
    Tensor out(x.shape(), x.value().array().unaryExpr(fwd));
    return make_op(op, std::move(out), {x}, [dfdx](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor::Array local(in.value.size());
        for (Index i = 0; i < local.size(); ++i) local[i] = dfdx(in.value[i], self.value[i]);
        in.accumulate(Tensor::Array(self.grad.array() * local));
    });
}

std::vector<Index> normalize_axes(const Shape& shape, std::vector<Index> axes, const char* op) {
    const Index rank = static_cast<Index>(shape.size());
    for (auto& a : axes) {
        if (a < 0) a += rank;
        if (a < 0 || a >= rank) {
            throw ShapeError(std::string(op) + ": axis out of range for " + shape_str(shape));
        }
        if (shape[static_cast<std::size_t>(a)] == 0) {
            throw ShapeError(std::string(op) + ": empty reduction axis in " + shape_str(shape));
        }
    }
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    if (axes.empty()) throw ShapeError(std::string(op) + ": no reduction axes given");
    return axes;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape("add", a, b);
    Tensor out(a.shape(), a.value().array() + b.value().array());
    return make_op("add", std::move(out), {a, b}, [](Node& self) {
        for (auto& in : self.inputs) {
            if (in->requires_grad) in->accumulate(self.grad);
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape("sub", a, b);
    Tensor out(a.shape(), a.value().array() - b.value().array());
    return make_op("sub", std::move(out), {a, b}, [](Node& self) {
        if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
        if (self.inputs[1]->requires_grad) self.inputs[1]->accumulate(Tensor::Array(-self.grad.array()));
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape("mul", a, b);
    Tensor out(a.shape(), a.value().array() * b.value().array());
    return make_op("mul", std::move(out), {a, b}, [](Node& self) {
        Node& l = *self.inputs[0];
        Node& r = *self.inputs[1];
        if (l.requires_grad) l.accumulate(Tensor::Array(self.grad.array() * r.value.array()));
        if (r.requires_grad) r.accumulate(Tensor::Array(self.grad.array() * l.value.array()));
    });
}

Var scale(const Var& x, double s) {
    Tensor out(x.shape(), x.value().array() * s);
    return make_op("scale", std::move(out), {x}, [s](Node& self) {
        self.inputs[0]->accumulate(Tensor::Array(self.grad.array() * s));
    });
}

Var square(const Var& x) {
    return unary("square", x, [](double v) { return v * v; }, [](double in, double) { return 2.0 * in; });
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var relu(const Var& x) {
    Tensor out(x.shape(), x.value().array().max(0.0));
    if (tracing_branches()) {
        for (Index i = 0; i < x.size(); ++i) trace_branch(x.value()[i] > 0.0);
    }
    return make_op("relu", std::move(out), {x}, [](Node& self) {
        Node& in = *self.inputs[0];
        in.accumulate(Tensor::Array((in.value.array() > 0.0).select(self.grad.array(), 0.0)));
    });
}

Var tanh(const Var& x) {
    return unary("tanh", x, [](double v) { return std::tanh(v); },
                 [](double, double out) { return 1.0 - out * out; });
}

Var one_plus_tanh(const Var& x) {
    // 2 * sigmoid(2x) equals 1 + tanh(x) but keeps relative precision near 0;
    // the bounds keep the open range (0, 2) once the exact value rounds onto an end.
    static const double lo = std::numeric_limits<double>::min();
    static const double hi = std::nextafter(2.0, 0.0);
    return unary("one_plus_tanh", x, [](double v) { return std::clamp(2.0 / (1.0 + std::exp(-2.0 * v)), lo, hi); },
                 [](double, double out) { return out * (2.0 - out); });
}

Var clamp(const Var& x, double lo, double hi) {
    if (!(lo < hi)) throw std::invalid_argument("clamp requires lo < hi");
    if (tracing_branches()) {
        for (Index i = 0; i < x.size(); ++i) {
            const double v = x.value()[i];
            trace_branch(v < lo ? 0 : (v > hi ? 2 : 1));
        }
    }
    return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                 [lo, hi](double in, double) { return (in >= lo && in <= hi) ? 1.0 : 0.0; });
}

Var add_noise(const Var& x, Rng& rng, double lo, double hi) {
    Tensor::Array noise(x.size());
    for (Index i = 0; i < noise.size(); ++i) noise[i] = rng.uniform(lo, hi);
    Tensor out(x.shape(), x.value().array() + noise);
    return make_op("add_noise", std::move(out), {x}, [](Node& self) { self.inputs[0]->accumulate(self.grad); });
}

Var lerp(const Var& a, const Var& b, double t) {
    require_same_shape("lerp", a, b);
    const double u = 1.0 - t;
    Tensor out(a.shape(), t * a.value().array() + u * b.value().array());
    return make_op("lerp", std::move(out), {a, b}, [t, u](Node& self) {
        if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(Tensor::Array(self.grad.array() * t));
        if (self.inputs[1]->requires_grad) self.inputs[1]->accumulate(Tensor::Array(self.grad.array() * u));
    });
}

// ---- shape -----------------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return make_op("reshape", std::move(out), {x}, [](Node& self) {
        self.inputs[0]->accumulate(self.grad.array());
    });
}

Var broadcast_to(const Var& x, Shape shape) {
    const Shape& in = x.shape();
    if (in.size() > shape.size()) {
        throw ShapeError("broadcast_to: cannot broadcast " + shape_str(in) + " to " + shape_str(shape));
    }
    const std::size_t lead = shape.size() - in.size();
    const auto in_strides = contiguous_strides(in);
    std::vector<Index> aligned(shape.size(), 0);
    for (std::size_t k = 0; k < in.size(); ++k) {
        const Index target = shape[lead + k];
        if (in[k] == target) {
            aligned[lead + k] = in_strides[k];
        } else if (in[k] != 1) {
            throw ShapeError("broadcast_to: cannot broadcast " + shape_str(in) + " to " + shape_str(shape));
        }
    }
    const auto out_strides = contiguous_strides(shape);
    Tensor out(shape);
    const Tensor& src = x.value();
    for_each_strided(shape, out_strides, aligned, [&](Index o, Index i) { out[o] = src[i]; });
    return make_op("broadcast_to", std::move(out), {x}, [shape, out_strides, aligned](Node& self) {
        Node& in_node = *self.inputs[0];
        Tensor g = Tensor::zeros(in_node.value.shape());
        for_each_strided(shape, out_strides, aligned, [&](Index o, Index i) { g[i] += self.grad[o]; });
        in_node.accumulate(g);
    });
}

Var slice(const Var& x, Index begin, Index end) {
    if (x.rank() < 1 || begin < 0 || end > x.dim(0) || begin > end) {
        throw ShapeError("slice: rows [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                         shape_str(x.shape()));
    }
    Shape shape = x.shape();
    const Index row = numel(shape) / std::max<Index>(shape[0], 1);
    shape[0] = end - begin;
    Tensor out(shape, x.value().array().segment(begin * row, (end - begin) * row));
    return make_op("slice", std::move(out), {x}, [begin, row](Node& self) {
        Node& in = *self.inputs[0];
        in.grad_buffer().array().segment(begin * row, self.grad.size()) += self.grad.array();
    });
}

Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape shape = parts[0].shape();
    Index rows = 0;
    for (const auto& p : parts) {
        Shape tail_a(p.shape().begin() + 1, p.shape().end());
        Shape tail_b(shape.begin() + 1, shape.end());
        if (p.rank() != static_cast<Index>(shape.size()) || tail_a != tail_b) {
            throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(shape));
        }
        rows += p.dim(0);
    }
    shape[0] = rows;
    Tensor out(shape);
    Index offset = 0;
    std::vector<Index> sizes;
    for (const auto& p : parts) {
        out.array().segment(offset, p.size()) = p.value().array();
        offset += p.size();
        sizes.push_back(p.size());
    }
    return make_op("concat", std::move(out), std::vector<Var>(parts.begin(), parts.end()), [sizes](Node& self) {
        Index off = 0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            if (self.inputs[k]->requires_grad) {
                self.inputs[k]->accumulate(Tensor::Array(self.grad.array().segment(off, sizes[k])));
            }
            off += sizes[k];
        }
    });
}

Var gather(const Var& x, std::span<const Index> rows) {
    if (x.rank() < 1) throw ShapeError("gather: scalar input");
    Shape shape = x.shape();
    const Index row = numel(shape) / std::max<Index>(shape[0], 1);
    for (Index r : rows) {
        if (r < 0 || r >= shape[0]) throw ShapeError("gather: row " + std::to_string(r) + " out of " + shape_str(shape));
    }
    shape[0] = static_cast<Index>(rows.size());
    Tensor out(shape);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        out.array().segment(static_cast<Index>(k) * row, row) = x.value().array().segment(rows[k] * row, row);
    }
    std::vector<Index> picked(rows.begin(), rows.end());
    return make_op("gather", std::move(out), {x}, [picked, row](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t k = 0; k < picked.size(); ++k) {
            g.array().segment(picked[k] * row, row) += self.grad.array().segment(static_cast<Index>(k) * row, row);
        }
    });
}

// ---- reductions ------------------------------------------------------------

namespace {

Var reduce_sum(const Var& x, std::vector<Index> axes, bool average, const char* op) {
    const Shape& in = x.shape();
    axes = normalize_axes(in, std::move(axes), op);
    Shape out_shape;
    Index count = 1;
    for (Index k = 0; k < static_cast<Index>(in.size()); ++k) {
        if (std::binary_search(axes.begin(), axes.end(), k)) {
            count *= in[static_cast<std::size_t>(k)];
        } else {
            out_shape.push_back(in[static_cast<std::size_t>(k)]);
        }
    }
    const auto out_contig = contiguous_strides(out_shape);
    std::vector<Index> out_strides(in.size(), 0);
    for (Index k = 0, j = 0; k < static_cast<Index>(in.size()); ++k) {
        if (!std::binary_search(axes.begin(), axes.end(), k)) out_strides[static_cast<std::size_t>(k)] = out_contig[static_cast<std::size_t>(j++)];
    }
    const auto in_strides = contiguous_strides(in);
    Tensor out(out_shape);
    const Tensor& src = x.value();
    for_each_strided(in, in_strides, out_strides, [&](Index i, Index o) { out[o] += src[i]; });
    if (average) out.array() /= static_cast<double>(count);
    const double factor = average ? 1.0 / static_cast<double>(count) : 1.0;
    return make_op(op, std::move(out), {x}, [in, in_strides, out_strides, factor](Node& self) {
        Tensor g = Tensor::zeros(in);
        for_each_strided(in, in_strides, out_strides, [&](Index i, Index o) { g[i] = self.grad[o] * factor; });
        self.inputs[0]->accumulate(g);
    });
}

}  // namespace

Var sum(const Var& x, std::vector<Index> axes) { return reduce_sum(x, std::move(axes), false, "sum"); }
Var mean(const Var& x, std::vector<Index> axes) { return reduce_sum(x, std::move(axes), true, "mean"); }

Var sum_all(const Var& x) {
    if (x.size() == 0) throw ShapeError("sum_all: empty tensor");
    Tensor out(Shape{}, Tensor::Array::Constant(1, x.value().array().sum()));
    return make_op("sum_all", std::move(out), {x}, [](Node& self) {
        Node& in = *self.inputs[0];
        in.accumulate(Tensor::Array(Tensor::Array::Constant(in.value.size(), self.grad[0])));
    });
}

Var mean_all(const Var& x) {
    if (x.size() == 0) throw ShapeError("mean_all: empty tensor");
    const double n = static_cast<double>(x.size());
    Tensor out(Shape{}, Tensor::Array::Constant(1, x.value().array().sum() / n));
    return make_op("mean_all", std::move(out), {x}, [n](Node& self) {
        Node& in = *self.inputs[0];
        in.accumulate(Tensor::Array(Tensor::Array::Constant(in.value.size(), self.grad[0] / n)));
    });
}

Var squared_l2_distance(const Var& a, const Var& b) {
    require_same_shape("squared_l2_distance", a, b);
    const Tensor::Array diff = a.value().array() - b.value().array();
    Tensor out(Shape{}, Tensor::Array::Constant(1, diff.square().sum()));
    return make_op("squared_l2_distance", std::move(out), {a, b}, [diff](Node& self) {
        const double g = self.grad[0];
        if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(Tensor::Array(2.0 * g * diff));
        if (self.inputs[1]->requires_grad) self.inputs[1]->accumulate(Tensor::Array(-2.0 * g * diff));
    });
}

Var global_avg_pool(const Var& x) {
    if (x.rank() == 3) return reshape(global_avg_pool(reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)})), {x.dim(0)});
    if (x.rank() != 4) throw ShapeError("global_avg_pool expects CxHxW or BxCxHxW, got " + shape_str(x.shape()));
    const Index rows = x.dim(0) * x.dim(1);
    const Index area = x.dim(2) * x.dim(3);
    if (area == 0) throw ShapeError("global_avg_pool: empty spatial extent");
    const auto view = x.value().matrix(rows, area);
    Tensor out(Shape{x.dim(0), x.dim(1)}, Tensor::Array(view.rowwise().sum().array() / static_cast<double>(area)));
    return make_op("global_avg_pool", std::move(out), {x}, [rows, area](Node& self) {
        Node& in = *self.inputs[0];
        Tensor g(in.value.shape());
        const double inv = 1.0 / static_cast<double>(area);
        for (Index r = 0; r < rows; ++r) g.array().segment(r * area, area).setConstant(self.grad[r] * inv);
        in.accumulate(g);
    });
}

// ---- layers ----------------------------------------------------------------

Var linear(const Var& x, const Var& weight, const Var& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(1) ||
        bias.dim(0) != weight.dim(0)) {
        throw ShapeError("linear: shape mismatch input " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
    }
    const Index batch = x.dim(0);
    const Index fin = x.dim(1);
    const Index fout = weight.dim(0);
    Tensor out(Shape{batch, fout});
    out.matrix(batch, fout).noalias() = x.value().matrix(batch, fin) * weight.value().matrix(fout, fin).transpose();
    out.matrix(batch, fout).rowwise() += bias.value().array().matrix().transpose();
    return make_op("linear", std::move(out), {x, weight, bias}, [batch, fin, fout](Node& self) {
        Node& in = *self.inputs[0];
        Node& w = *self.inputs[1];
        Node& b = *self.inputs[2];
        const auto gy = self.grad.matrix(batch, fout);
        if (in.requires_grad) in.grad_buffer().matrix(batch, fin).noalias() += gy * w.value.matrix(fout, fin);
        if (w.requires_grad) w.grad_buffer().matrix(fout, fin).noalias() += gy.transpose() * in.value.matrix(batch, fin);
        if (b.requires_grad) b.grad_buffer().array() += gy.colwise().sum().transpose().array();
    });
}

namespace {

// Column buffer for one instance: rows (c, ky, kx), columns (y, x).
// For kernel column kx (offset dx = kx - 1), output column x reads input
// column x + dx; only [x_lo, x_hi) is in bounds, the rest is padding.
inline void tap_range(Index width, Index dx, Index& x_lo, Index& x_hi) {
    x_lo = std::max<Index>(0, -dx);
    x_hi = std::min<Index>(width, width - dx);
}

void im2col(const double* image, Index channels, Index height, Index width, RowMatrix& col) {
    col.resize(channels * 9, height * width);
    for (Index c = 0; c < channels; ++c) {
        const double* plane = image + c * height * width;
        for (Index ky = 0; ky < 3; ++ky) {
            for (Index kx = 0; kx < 3; ++kx) {
                const Index dx = kx - 1;
                Index x_lo, x_hi;
                tap_range(width, dx, x_lo, x_hi);
                double* dst = col.data() + (c * 9 + ky * 3 + kx) * height * width;
                for (Index y = 0; y < height; ++y) {
                    const Index iy = y + ky - 1;
                    double* row = dst + y * width;
                    if (iy < 0 || iy >= height) {
                        std::fill(row, row + width, 0.0);
                        continue;
                    }
                    const double* src = plane + iy * width + dx;
                    std::fill(row, row + x_lo, 0.0);
                    std::copy(src + x_lo, src + x_hi, row + x_lo);
                    std::fill(row + x_hi, row + width, 0.0);
                }
            }
        }
    }
}

void col2im(const RowMatrix& col, Index channels, Index height, Index width, double* image) {
    for (Index c = 0; c < channels; ++c) {
        double* plane = image + c * height * width;
        for (Index ky = 0; ky < 3; ++ky) {
            for (Index kx = 0; kx < 3; ++kx) {
                const Index dx = kx - 1;
                Index x_lo, x_hi;
                tap_range(width, dx, x_lo, x_hi);
                const double* src = col.data() + (c * 9 + ky * 3 + kx) * height * width;
                for (Index y = 0; y < height; ++y) {
                    const Index iy = y + ky - 1;
                    if (iy < 0 || iy >= height) continue;
                    double* dst = plane + iy * width + dx;
                    const double* row = src + y * width;
                    for (Index x = x_lo; x < x_hi; ++x) dst[x] += row[x];
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& kernel, const Var& bias) {
    if (x.rank() != 4 || kernel.rank() != 4 || kernel.dim(2) != 3 || kernel.dim(3) != 3 ||
        kernel.dim(1) != x.dim(1) || bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
        throw ShapeError("conv2d: shape mismatch input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(kernel.shape()) + ", bias " + shape_str(bias.shape()));
    }
    const Index batch = x.dim(0);
    const Index channels = x.dim(1);
    const Index height = x.dim(2);
    const Index width = x.dim(3);
    const Index outc = kernel.dim(0);
    const Index area = height * width;
    const Index image_size = channels * area;

    Tensor out = Tensor::uninitialized(Shape{batch, outc, height, width});
    const auto kmat = kernel.value().matrix(outc, channels * 9);
    const Eigen::VectorXd b = bias.value().array().matrix();
    RowMatrix col;
    for (Index n = 0; n < batch; ++n) {
        im2col(x.value().data() + n * image_size, channels, height, width, col);
        auto y = out.matrix(outc, area, n * outc * area);
        y.noalias() = kmat * col;
        y.colwise() += b;
    }
    return make_op("conv2d", std::move(out), {x, kernel, bias},
                   [batch, channels, height, width, outc, area, image_size](Node& self) {
                       Node& in = *self.inputs[0];
                       Node& k = *self.inputs[1];
                       Node& b = *self.inputs[2];
                       // An explicit transpose copy makes the input-gradient GEMM contiguous.
                       const RowMatrix kmat_t = in.requires_grad ? RowMatrix(k.value.matrix(outc, channels * 9).transpose())
                                                                 : RowMatrix();
                       RowMatrix col;
                       RowMatrix dcol;
                       for (Index n = 0; n < batch; ++n) {
                           const auto gy = self.grad.matrix(outc, area, n * outc * area);
                           if (b.requires_grad) b.grad_buffer().array() += gy.rowwise().sum().array();
                           if (k.requires_grad) {
                               im2col(in.value.data() + n * image_size, channels, height, width, col);
                               k.grad_buffer().matrix(outc, channels * 9).noalias() += gy * col.transpose();
                           }
                           if (in.requires_grad) {
                               dcol.noalias() = kmat_t * gy;
                               col2im(dcol, channels, height, width, in.grad_buffer().data() + n * image_size);
                           }
                       }
                   });
}

Var maxpool2(const Var& x) {
    if (x.rank() != 4) throw ShapeError("maxpool2 expects BxCxHxW, got " + shape_str(x.shape()));
    const Index planes = x.dim(0) * x.dim(1);
    const Index h = x.dim(2);
    const Index w = x.dim(3);
    if (h < 2 || w < 2) throw ShapeError("maxpool2 needs H,W >= 2, got " + shape_str(x.shape()));
    const Index oh = h / 2;
    const Index ow = w / 2;
    Tensor out = Tensor::uninitialized(Shape{x.dim(0), x.dim(1), oh, ow});
    std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
    const double* src = x.value().data();
    for (Index p = 0; p < planes; ++p) {
        for (Index y = 0; y < oh; ++y) {
            for (Index xx = 0; xx < ow; ++xx) {
                Index best = p * h * w + (2 * y) * w + 2 * xx;
                for (Index dy = 0; dy < 2; ++dy) {
                    for (Index dx = 0; dx < 2; ++dx) {
                        const Index idx = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if (src[idx] > src[best]) best = idx;
                    }
                }
                const Index o = (p * oh + y) * ow + xx;
                out[o] = src[best];
                argmax[static_cast<std::size_t>(o)] = best;
            }
        }
    }
    if (tracing_branches()) {
        for (Index a : argmax) trace_branch(static_cast<std::uint64_t>(a));
    }
    return make_op("maxpool2", std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[static_cast<Index>(o)];
    });
}

BatchNorm BatchNorm::make(Index features) {
    BatchNorm bn;
    bn.scale = parameter(Tensor::ones({features}));
    bn.shift = parameter(Tensor::zeros({features}));
    bn.running_mean = Tensor::zeros({features});
    bn.running_var = Tensor::ones({features});
    return bn;
}

Var batch_norm(const Var& x, BatchNorm& bn, Mode mode) {
    if (x.rank() != 2 && x.rank() != 4) throw ShapeError("batch_norm expects BxF or BxCxHxW, got " + shape_str(x.shape()));
    const Index batch = x.dim(0);
    const Index features = x.dim(1);
    if (features != bn.features()) {
        throw ShapeError("batch_norm: input " + shape_str(x.shape()) + " vs " + std::to_string(bn.features()) + " features");
    }
    if (batch < 1) throw ShapeError("batch_norm: empty batch");
    const Index inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    const Index count = batch * inner;

    bool use_batch = mode == Mode::train;
    if (use_batch && count < 2) {
        record_warning("batch_norm: single sample per feature in train mode; using running statistics");
        use_batch = false;
    }

    // Per-feature mean/variance over (batch, spatial): each plane is reduced
    // while hot in cache, then merged (Chan et al. pairwise update).
    Eigen::ArrayXd mu(features);
    Eigen::ArrayXd var(features);
    const double* src = x.value().data();
    if (use_batch) {
        Eigen::ArrayXd m2 = Eigen::ArrayXd::Zero(features);
        mu.setZero();
        for (Index n = 0; n < batch; ++n) {
            const double seen = static_cast<double>(n * inner);
            const double total = seen + static_cast<double>(inner);
            for (Index f = 0; f < features; ++f) {
                const Eigen::Map<const Eigen::ArrayXd> plane(src + (n * features + f) * inner, inner);
                const double pm = plane.mean();
                const double pm2 = (plane - pm).square().sum();
                const double delta = pm - mu[f];
                mu[f] += delta * static_cast<double>(inner) / total;
                m2[f] += pm2 + delta * delta * seen * static_cast<double>(inner) / total;
            }
        }
        var = m2 / static_cast<double>(count);
        const double unbiased = static_cast<double>(count) / static_cast<double>(count - 1);
        bn.running_mean.array() = (1.0 - bn.momentum) * bn.running_mean.array() + bn.momentum * mu;
        bn.running_var.array() = (1.0 - bn.momentum) * bn.running_var.array() + bn.momentum * var * unbiased;
    } else {
        mu = bn.running_mean.array();
        var = bn.running_var.array();
    }
    const Eigen::ArrayXd inv_std = (var + bn.eps).rsqrt();
    const Eigen::ArrayXd a = bn.scale.value().array() * inv_std;
    const Eigen::ArrayXd c = bn.shift.value().array() - mu * a;

    Tensor out = Tensor::uninitialized(x.shape());
    for (Index n = 0; n < batch; ++n) {
        for (Index f = 0; f < features; ++f) {
            const Index off = (n * features + f) * inner;
            out.array().segment(off, inner) = x.value().array().segment(off, inner) * a[f] + c[f];
        }
    }
    return make_op("batch_norm", std::move(out), {x, bn.scale, bn.shift},
                   [mu, inv_std, use_batch, batch, features, inner, count](Node& self) {
                       Node& in = *self.inputs[0];
                       Node& g = *self.inputs[1];
                       Node& b = *self.inputs[2];
                       const auto& xv = in.value.array();
                       const auto& dy = self.grad.array();
                       Eigen::ArrayXd sum_dy = Eigen::ArrayXd::Zero(features);
                       Eigen::ArrayXd sum_dy_xhat = Eigen::ArrayXd::Zero(features);
                       for (Index n = 0; n < batch; ++n) {
                           for (Index f = 0; f < features; ++f) {
                               const Index off = (n * features + f) * inner;
                               const auto d = dy.segment(off, inner);
                               sum_dy[f] += d.sum();
                               sum_dy_xhat[f] += (d * (xv.segment(off, inner) - mu[f])).sum() * inv_std[f];
                           }
                       }
                       if (g.requires_grad) g.grad_buffer().array() += sum_dy_xhat;
                       if (b.requires_grad) b.grad_buffer().array() += sum_dy;
                       if (!in.requires_grad) return;
                       const Eigen::ArrayXd& gamma = g.value.array();
                       auto& gx = in.grad_buffer().array();
                       const double m = static_cast<double>(count);
                       for (Index f = 0; f < features; ++f) {
                           const double k = gamma[f] * inv_std[f];
                           // batch stats: gx = k * (dy - mean(dy) - xhat * mean(dy * xhat))
                           const double shift = use_batch ? sum_dy[f] / m : 0.0;
                           const double slope = use_batch ? sum_dy_xhat[f] / m * inv_std[f] : 0.0;
                           for (Index n = 0; n < batch; ++n) {
                               const Index off = (n * features + f) * inner;
                               gx.segment(off, inner) +=
                                   k * (dy.segment(off, inner) - shift - (xv.segment(off, inner) - mu[f]) * slope);
                           }
                       }
                   });
}

Var scale_channels(const Var& x, const Var& w) {
    if (x.rank() < 2 || w.rank() != 2 || w.dim(0) != x.dim(0) || w.dim(1) != x.dim(1)) {
        throw ShapeError("scale_channels: input " + shape_str(x.shape()) + " vs weights " + shape_str(w.shape()));
    }
    const Index rows = x.dim(0) * x.dim(1);
    const Index inner = x.size() / std::max<Index>(rows, 1);
    Tensor out = Tensor::uninitialized(x.shape());
    for (Index r = 0; r < rows; ++r) {
        out.array().segment(r * inner, inner) = x.value().array().segment(r * inner, inner) * w.value()[r];
    }
    return make_op("scale_channels", std::move(out), {x, w}, [rows, inner](Node& self) {
        Node& in = *self.inputs[0];
        Node& wn = *self.inputs[1];
        if (in.requires_grad) {
            Tensor& g = in.grad_buffer();
            for (Index r = 0; r < rows; ++r) {
                g.array().segment(r * inner, inner) += self.grad.array().segment(r * inner, inner) * wn.value[r];
            }
        }
        if (wn.requires_grad) {
            Tensor& g = wn.grad_buffer();
            for (Index r = 0; r < rows; ++r) {
                g[r] += (self.grad.array().segment(r * inner, inner) * in.value.array().segment(r * inner, inner)).sum();
            }
        }
    });
}

Var cosine_distance(const Var& a, const Var& b, double tau) {
    require_same_shape("cosine_distance", a, b);
    if (a.rank() < 1) throw ShapeError("cosine_distance: scalar inputs");
    const Index width = a.shape().back();
    const Index rows = a.size() / std::max<Index>(width, 1);
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    const auto av = a.value().matrix(rows, width);
    const auto bv = b.value().matrix(rows, width);
    Eigen::ArrayXd na = av.rowwise().norm().array();
    Eigen::ArrayXd nb = bv.rowwise().norm().array();
    for (Index r = 0; r < rows; ++r) {
        if (na[r] == 0.0 || nb[r] == 0.0) {
            throw std::domain_error("cosine_distance: zero-norm embedding at row " + std::to_string(r) +
                                    (na[r] == 0.0 ? " (first operand)" : " (second operand)"));
        }
    }
    Eigen::ArrayXd cos = (av.cwiseProduct(bv)).rowwise().sum().array() / (na * nb);
    Tensor out(out_shape, Tensor::Array(tau * (1.0 - cos)));
    return make_op("cosine_distance", std::move(out), {a, b}, [rows, width, na, nb, cos, tau](Node& self) {
        Node& an = *self.inputs[0];
        Node& bn = *self.inputs[1];
        const auto av = an.value.matrix(rows, width);
        const auto bv = bn.value.matrix(rows, width);
        for (Index r = 0; r < rows; ++r) {
            const double g = -tau * self.grad[r];
            if (an.requires_grad) {
                an.grad_buffer().matrix(rows, width).row(r) +=
                    g * (bv.row(r) / (na[r] * nb[r]) - cos[r] * av.row(r) / (na[r] * na[r]));
            }
            if (bn.requires_grad) {
                bn.grad_buffer().matrix(rows, width).row(r) +=
                    g * (av.row(r) / (na[r] * nb[r]) - cos[r] * bv.row(r) / (nb[r] * nb[r]));
            }
        }
    });
}

// ---- losses ----------------------------------------------------------------

Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("softmax expects BxN, got " + shape_str(logits.shape()));
    const Index rows = logits.dim(0);
    const Index cols = logits.dim(1);
    Tensor p(logits.shape());
    std::vector<double> terms(static_cast<std::size_t>(cols));
    for (Index r = 0; r < rows; ++r) {
        const auto in = logits.array().segment(r * cols, cols);
        auto out = p.array().segment(r * cols, cols);
        out = (in - in.maxCoeff()).exp();
        // summed in sorted order so that reordering the columns permutes the output exactly
        std::copy(out.begin(), out.end(), terms.begin());
        std::sort(terms.begin(), terms.end());
        double total = 0.0;
        for (double t : terms) total += t;
        out /= total;
    }
    return p;
}

CrossEntropy softmax_cross_entropy(const Var& logits, std::span<const Index> labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size())) {
        throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
    }
    const Index rows = logits.dim(0);
    const Index cols = logits.dim(1);
    for (Index l : labels) {
        if (l < 0 || l >= cols) throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(l) + " not in [0," + std::to_string(cols) + ")");
    }
    Tensor p = softmax(logits.value());
    double loss = 0.0;
    for (Index r = 0; r < rows; ++r) {
        // log-sum-exp form keeps the loss finite even when p underflows
        const auto in = logits.value().array().segment(r * cols, cols);
        const double mx = in.maxCoeff();
        const double lse = mx + std::log((in - mx).exp().sum());
        loss += lse - in[labels[static_cast<std::size_t>(r)]];
    }
    loss /= static_cast<double>(rows);
    std::vector<Index> y(labels.begin(), labels.end());
    Var out = make_op("softmax_cross_entropy", Tensor(Shape{}, Tensor::Array::Constant(1, loss)), {logits},
                      [p, y, rows, cols](Node& self) {
                          Tensor g = p;
                          for (Index r = 0; r < rows; ++r) g[r * cols + y[static_cast<std::size_t>(r)]] -= 1.0;
                          g.array() *= self.grad[0] / static_cast<double>(rows);
                          self.inputs[0]->accumulate(g);
                      });
    return {out, std::move(p)};
}

}  // namespace tdm
