#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "jsmtk/tape.hpp"

// Differentiable primitives. Every backward rule is written in terms of these same
// primitives, so any composition can be differentiated again.
namespace jsmtk::ops {

Var add(const Var &a, const Var &b);
Var sub(const Var &a, const Var &b);
Var mul(const Var &a, const Var &b);
Var scale(const Var &a, double c);
Var square(const Var &a);
Var exp(const Var &a);
Var rsqrt(const Var &a);                 // a^(-1/2)
Var sum(const Var &a);                   // -> shape [1]
Var broadcast_scalar(const Var &s, const Shape &shape);
Var reshape(const Var &a, const Shape &shape);

// [N, C, ...] <-> [C]
Var sum_to_channels(const Var &a);
Var broadcast_channels(const Var &c, const Shape &shape);

// [N, K] <-> [N]
Var sum_rows(const Var &a);
Var broadcast_rows(const Var &r, std::int64_t k);

// op(A) * op(B), 2-D only.
Var matmul(const Var &a, const Var &b, bool trans_a = false, bool trans_b = false);

// Same-size 3-D convolution (stride 1, zero padding kernel/2, odd cubic kernel).
// x: [N, Ci, D, H, W], w: [Co, Ci, k, k, k], b: [Co] or invalid.
Var conv3d(const Var &x, const Var &w, const Var &b = {});
// Adjoint of conv3d in x: [N, Co, D, H, W] -> [N, Ci, D, H, W].
Var conv3d_data_grad(const Var &g, const Var &w);
// Adjoint of conv3d in w: returns d<g, conv3d(x, w)>/dw, shape [Co, Ci, k, k, k].
Var conv3d_filter_grad(const Var &x, const Var &g, std::int64_t kernel);

using IndexMap = std::shared_ptr<const std::vector<std::size_t>>;
// out[j] = a[idx[j]]
Var gather(const Var &a, IndexMap idx, const Shape &out_shape);
// out[idx[j]] += g[j]
Var scatter_add(const Var &g, IndexMap idx, const Shape &out_shape);

// 2x2x2 window, stride 2; odd trailing planes are dropped.
Var maxpool3d(const Var &x);

Var sigmoid_scaled(const Var &a, double beta);   // 1 / (1 + exp(-beta a))
Var softplus(const Var &a, double beta);          // log(1 + exp(beta a)) / beta
Var relu(const Var &a);                           // second derivative is zero
Var log_softmax(const Var &logits);               // rows of [N, K]

} // namespace jsmtk::ops
