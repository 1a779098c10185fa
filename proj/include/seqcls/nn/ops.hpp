#pragma once

#include <array>
#include <vector>

#include "seqcls/nn/autograd.hpp"

namespace seqcls::nn {

// Elementwise; operands must have equal shapes.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);

// Adds `p` to every trailing block of `x` whose shape equals p's shape.
Var add_broadcast(const Var& x, const Var& p);

Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<int>& order);
Var narrow(const Var& x, int dim, std::int64_t start, std::int64_t length);
Var mean_dim(const Var& x, int dim);

// x: [N, in], w: [out, in], b: [out] (may be undefined).
Var linear(const Var& x, const Var& w, const Var& b);

// a: [G, M, K]; b: [G, K, N], or [G, N, K] when transpose_b.
Var bmm(const Var& a, const Var& b, bool transpose_b = false);

Var softmax_last(const Var& x);
Var layer_norm_last(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

struct Conv3dGeometry {
    std::array<int, 3> stride{1, 1, 1};
    std::array<int, 3> padding{0, 0, 0};
};

// x: [N, C, D, H, W], w: [O, C, KD, KH, KW]; no bias.
Var conv3d(const Var& x, const Var& w, const Conv3dGeometry& geometry);
Shape conv3d_output_shape(const Shape& x, const Shape& w, const Conv3dGeometry& geometry);

struct Pool3dGeometry {
    std::array<int, 3> kernel{1, 1, 1};
    std::array<int, 3> stride{1, 1, 1};
    std::array<int, 3> padding{0, 0, 0};
};

Var max_pool3d(const Var& x, const Pool3dGeometry& geometry);
Shape pool3d_output_shape(const Shape& x, const Pool3dGeometry& geometry);

// [N, C, ...] -> [N, C]
Var global_avg_pool(const Var& x);

struct BatchNormBuffers {
    Tensor* running_mean = nullptr;
    Tensor* running_var = nullptr;
};

// Normalizes over every dim except 1. In training mode batch statistics are
// used and the running buffers are updated, otherwise the running buffers are
// used.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormBuffers buffers, bool training,
               double momentum = 0.1, double eps = 1e-5);

// Scalar sum(x * weights); weights must match x's element count.
Var weighted_sum(const Var& x, const Tensor& weights);

}  // namespace seqcls::nn
