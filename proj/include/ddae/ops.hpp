#pragma once

#include <span>

#include "ddae/autograd.hpp"

// Differentiable kernels used by the backbone and heads. Image tensors are NCHW.
namespace ddae::ag {

// 2-D cross-correlation; `bias` may be null. Square kernels only.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
// x: [N, in], weight: [out, in], bias: [out] or null.
Var linear(const Var& x, const Var& weight, const Var& bias);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-6f);
Var silu(const Var& x);
Var add(const Var& a, const Var& b);
Var scale(const Var& x, float s);
// x: [N, C, H, W] plus e: [N, C] broadcast over space.
Var add_channel(const Var& x, const Var& e);
Var concat_channels(const Var& a, const Var& b);
Var upsample_nearest2x(const Var& x);
// Single-head spatial self-attention core: softmax(q^T k / sqrt(C)) applied to v.
Var spatial_attention(const Var& q, const Var& k, const Var& v);
// [N, C, H, W] -> [N, C]
Var global_avg_pool(const Var& x);
// x: [N, D] plus table rows selected per item: out[n] = x[n] + table[idx[n]].
Var add_rows(const Var& x, const Var& table, std::span<const int> idx);
// Mean squared error over all elements, returned as a [1] tensor.
Var mse(const Var& a, const Var& b);
Var log_softmax(const Var& logits);
// weight * sum_n logp[n, labels[n]]
Var pick_sum(const Var& logp, std::span<const int> labels, float weight);
// Mean negative log-likelihood of integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

}  // namespace ddae::ag
