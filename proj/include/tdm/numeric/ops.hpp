#pragma once

#include "tdm/numeric/autograd.hpp"
#include "tdm/numeric/rng.hpp"

#include <span>
#include <string>
#include <vector>

namespace tdm {

enum class Mode { train, eval };

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var square(const Var& x);
Var neg(const Var& x);

Var relu(const Var& x);
Var tanh(const Var& x);
/// 1 + tanh(x), range (0, 2).
Var one_plus_tanh(const Var& x);
/// Gradient passes where lo <= x <= hi and is zero outside.
Var clamp(const Var& x, double lo, double hi);
/// Adds Uniform(lo, hi) per element. The noise is a constant for the gradient.
Var add_noise(const Var& x, Rng& rng, double lo, double hi);

/// t * a + (1 - t) * b.
Var lerp(const Var& a, const Var& b, double t);

// ---- shape -----------------------------------------------------------------

Var reshape(const Var& x, Shape shape);
/// Numpy-style expansion: trailing axes aligned, size-1 axes repeated.
Var broadcast_to(const Var& x, Shape shape);
/// Rows [begin, end) along axis 0.
Var slice(const Var& x, Index begin, Index end);
/// Concatenation along axis 0.
Var concat(std::span<const Var> parts);
/// Rows picked along axis 0, in the given order.
Var gather(const Var& x, std::span<const Index> rows);

// ---- reductions ------------------------------------------------------------

Var sum(const Var& x, std::vector<Index> axes);
Var mean(const Var& x, std::vector<Index> axes);
Var sum_all(const Var& x);
Var mean_all(const Var& x);
/// Sum of squared differences, a scalar.
Var squared_l2_distance(const Var& a, const Var& b);
/// Spatial mean: BxCxHxW -> BxC, or CxHxW -> C.
Var global_avg_pool(const Var& x);

// ---- layers ----------------------------------------------------------------

/// x: BxF_in, weight: F_out x F_in, bias: F_out.
Var linear(const Var& x, const Var& weight, const Var& bias);

/// 3x3 cross-correlation, stride 1, zero padding 1.
/// x: BxCxHxW, kernel: OxCx3x3, bias: O.
Var conv2d(const Var& x, const Var& kernel, const Var& bias);

/// 2x2 max pooling with stride 2; odd extents are floored. Ties route the
/// gradient to the first position in row-major order.
Var maxpool2(const Var& x);

struct BatchNorm {
    Var scale;
    Var shift;
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNorm make(Index features);
    Index features() const { return scale.size(); }
};

/// Normalizes per feature (BxF) or per channel (BxCxHxW). Train mode uses
/// batch statistics and updates the running estimates; with a single sample
/// per feature it falls back to the running statistics and records a warning.
Var batch_norm(const Var& x, BatchNorm& bn, Mode mode);

/// x: BxCx..., w: BxC; every channel c of instance b is multiplied by w[b,c].
Var scale_channels(const Var& x, const Var& w);

/// Row-wise tau * (1 - cos(a, b)) along the last axis.
Var cosine_distance(const Var& a, const Var& b, double tau);

// ---- losses ----------------------------------------------------------------

/// Numerically stable row softmax of a BxN tensor.
Tensor softmax(const Tensor& logits);

struct CrossEntropy {
    Var loss;             // scalar, mean over rows
    Tensor probabilities; // BxN
};

CrossEntropy softmax_cross_entropy(const Var& logits, std::span<const Index> labels);

}  // namespace tdm
