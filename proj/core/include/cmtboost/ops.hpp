#pragma once

#include <cstdint>
#include <vector>

#include "cmtboost/tensor.hpp"

namespace cmtboost {

enum class PoolMode { kMax, kAvg };

// Every op is a pure function of its inputs (plus explicit seeds). When a
// GradientTape is active on the calling thread and any input requires grad,
// the op records a backward node onto it.

// ---- elementwise / reduction ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> sum_all(const Tensor<T>& a);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);  // exact x * Phi(x)
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);

// ---- shape ----
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape new_shape);
/// [N,C,H,W] -> [N, H*W, C] token layout for attention.
template <typename T> Tensor<T> nchw_to_tokens(const Tensor<T>& x);
template <typename T> Tensor<T> tokens_to_nchw(const Tensor<T>& t, std::size_t h, std::size_t w);
template <typename T> Tensor<T> slice_last(const Tensor<T>& t, std::size_t start, std::size_t len);
template <typename T> Tensor<T> concat_last(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// ---- linear algebra ----
/// x[n,d] @ w[d,e] + bias[e]; bias may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose_last2(const Tensor<T>& a);
/// scores[B,n,m] + bias[n,m] broadcast over the batch dimension.
template <typename T> Tensor<T> add_rowmat(const Tensor<T>& scores, const Tensor<T>& bias);
/// out.data[i] = table.data[flat_idx[i]]; backward scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& table, const std::vector<std::size_t>& flat_idx, Shape out_shape);

// ---- convolution / pooling ----
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride, int pad);
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad);
template <typename T> Tensor<T> pool2d(const Tensor<T>& x, PoolMode mode, int k, int stride);
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
/// gate[N,1,H,W] * x[N,C,H,W], gate broadcast across channels.
template <typename T> Tensor<T> broadcast_mul_gate(const Tensor<T>& gate, const Tensor<T>& x);

// ---- normalization ----
/// Normalizes across axis 1 (channels) per token; gamma/beta have length C.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// ---- stochastic / loss ----
/// Inverted dropout: kept values scaled by 1/(1-p). Identity when not
/// training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::uint64_t seed);
/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels);

}  // namespace cmtboost
