#pragma once

#include <vector>

#include "armamba/tensor.hpp"

namespace armamba::ops {

// Elementwise binary ops broadcast numpy-style on trailing dims.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// [..., M, K] x [..., K, P] -> [..., M, P]; leading batch dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Normalizes the last dim to mean 0 / var 1, then affine by gamma/beta [D].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Causal per-channel conv: y[b,t,d] = bias[d] + sum_j w[d,j] * x[b,t-k+1+j,d],
// zero left padding. Strictly causal by construction.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor mse_loss(const Tensor& pred, const Tensor& target);
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);

Tensor sum_all(const Tensor& a);
Tensor mean_axis1(const Tensor& x);                            // [B,L,D] -> [B,D]
Tensor slice_axis1(const Tensor& x, int64_t t0, int64_t t1);   // [B,L,D] -> [B,t1-t0,D]
Tensor gather_axis1(const Tensor& x, const std::vector<int64_t>& index);
Tensor reverse_axis1(const Tensor& x);
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& index);  // [R,D] -> [n,D]
Tensor reshape(const Tensor& x, Shape shape);  // fresh copy, same element order

// x * W + b convenience (b optional)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op);

}  // namespace armamba::ops
