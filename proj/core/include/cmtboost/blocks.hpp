#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cmtboost/ops.hpp"
#include "cmtboost/tensor.hpp"

namespace cmtboost {

// Architectural blocks. These are plain aggregates; construction, parameter
// naming, and initialization live in model-assembly. Forward passes compose
// the recorded primitives, so every block is differentiable end to end.

template <typename T>
struct Conv2dLayer {
  Tensor<T> w;  // [out, in, kh, kw]
  Tensor<T> b;  // [out]; undefined for bias-free layers
  int stride = 1;
  int pad = 0;

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct LinearLayer {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = static_cast<T>(1e-5);

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

/// Three 3x3 convs (stride 2,1,1) with GELU after each: [N,Cin,H,W] ->
/// [N,base,H/2,W/2].
template <typename T>
struct StemBlock {
  Conv2dLayer<T> conv1, conv2, conv3;

  Tensor<T> forward(const Tensor<T>& img) const {
    Tensor<T> u = gelu(conv1.forward(img));
    u = gelu(conv2.forward(u));
    return gelu(conv3.forward(u));
  }
};

/// Depthwise 3x3 with identity skip; preserves shape.
template <typename T>
Tensor<T> lpu_forward(const Tensor<T>& c, const Tensor<T>& dw_weight) {
  return add(depthwise_conv2d(c, dw_weight, 1, 1), c);
}

/// softmax(q k^T / sqrt(d_h) + bias) v for one head. Accepts [n,d_h] or
/// batched [N,n,d_h] inputs; bias is [n,n'].
template <typename T>
Tensor<T> lightweight_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                const Tensor<T>& bias) {
  const bool batched = q.rank() == 3;
  Tensor<T> q3 = batched ? q : reshape(q, {1, q.dim(0), q.dim(1)});
  Tensor<T> k3 = batched ? k : reshape(k, {1, k.dim(0), k.dim(1)});
  Tensor<T> v3 = batched ? v : reshape(v, {1, v.dim(0), v.dim(1)});
  const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q3.dim(2))));
  Tensor<T> scores = scale(bmm(q3, transpose_last2(k3)), inv_sqrt_dk);
  scores = add_rowmat(scores, bias);
  Tensor<T> attn = softmax(scores, 2);
  Tensor<T> out = bmm(attn, v3);
  return batched ? out : reshape(out, {out.dim(1), out.dim(2)});
}

/// Lightweight multi-head self-attention over an [N,C,H,W] map. Keys and
/// values are spatially reduced by a shared strided depthwise 3x3 before the
/// per-head attention; a learnable relative-position bias table is indexed by
/// (query row/reduction - key row, query col/reduction - key col).
template <typename T>
struct LmhsaBlock {
  std::size_t dim = 0;
  std::size_t heads = 1;
  int reduction = 1;
  std::size_t height = 0, width = 0;    // query grid
  std::size_t rheight = 0, rwidth = 0;  // reduced key grid
  Tensor<T> kv_dw;                      // [d,1,3,3]
  LinearLayer<T> wq, wk, wv, wo;
  Tensor<T> bias_table;                 // [heads, 2*rh-1, 2*rw-1]
  std::vector<std::size_t> bias_index;  // per-pair offset into one head's table

  static std::size_t reduced_extent(std::size_t full, int reduction) {
    return (full - 1) / static_cast<std::size_t>(reduction) + 1;
  }

  // idx[(qr*W+qc)*n' + kr*rw+kc] = (qr/r - kr + rh-1)*(2rw-1) + (qc/r - kc + rw-1)
  static std::vector<std::size_t> build_bias_index(std::size_t h, std::size_t w, std::size_t rh,
                                                   std::size_t rw, int r) {
    std::vector<std::size_t> idx;
    idx.reserve(h * w * rh * rw);
    const std::size_t tw = 2 * rw - 1;
    for (std::size_t qr = 0; qr < h; ++qr) {
      for (std::size_t qc = 0; qc < w; ++qc) {
        const long rr = static_cast<long>(qr) / r;
        const long rc = static_cast<long>(qc) / r;
        for (std::size_t kr = 0; kr < rh; ++kr) {
          for (std::size_t kc = 0; kc < rw; ++kc) {
            const std::size_t drow = static_cast<std::size_t>(rr - static_cast<long>(kr) +
                                                              static_cast<long>(rh) - 1);
            const std::size_t dcol = static_cast<std::size_t>(rc - static_cast<long>(kc) +
                                                              static_cast<long>(rw) - 1);
            idx.push_back(drow * tw + dcol);
          }
        }
      }
    }
    return idx;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.dim(1) != dim) {
      throw DimensionError("lmhsa: channel count " + std::to_string(x.dim(1)) +
                           " != embedding dim " + std::to_string(dim));
    }
    if (x.dim(2) != height || x.dim(3) != width) {
      throw DimensionError("lmhsa: input " + shape_str(x.shape()) + " does not match grid " +
                           std::to_string(height) + "x" + std::to_string(width));
    }
    const std::size_t n = x.dim(0);
    const std::size_t tokens = height * width;
    const std::size_t rtokens = rheight * rwidth;
    const std::size_t dh = dim / heads;

    Tensor<T> q = reshape(wq.forward(reshape(nchw_to_tokens(x), {n * tokens, dim})),
                          {n, tokens, dim});
    Tensor<T> reduced = depthwise_conv2d(x, kv_dw, reduction, 1);
    Tensor<T> kv = reshape(nchw_to_tokens(reduced), {n * rtokens, dim});
    Tensor<T> k = reshape(wk.forward(kv), {n, rtokens, dim});
    Tensor<T> v = reshape(wv.forward(kv), {n, rtokens, dim});

    const std::size_t tsize = (2 * rheight - 1) * (2 * rwidth - 1);
    std::vector<Tensor<T>> head_outs;
    head_outs.reserve(heads);
    for (std::size_t hi = 0; hi < heads; ++hi) {
      Tensor<T> qh = slice_last(q, hi * dh, dh);
      Tensor<T> kh = slice_last(k, hi * dh, dh);
      Tensor<T> vh = slice_last(v, hi * dh, dh);
      std::vector<std::size_t> idx(bias_index.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = hi * tsize + bias_index[i];
      Tensor<T> bias_mat = gather(bias_table, idx, {tokens, rtokens});
      head_outs.push_back(lightweight_attention(qh, kh, vh, bias_mat));
    }
    Tensor<T> merged = heads == 1 ? head_outs[0] : concat_last(head_outs);
    Tensor<T> projected = reshape(wo.forward(reshape(merged, {n * tokens, dim})),
                                  {n, tokens, dim});
    return tokens_to_nchw(projected, height, width);
  }
};

/// 1x1 expand -> GELU -> depthwise 3x3 with identity skip -> GELU -> 1x1
/// project. Shape-preserving.
template <typename T>
struct IrffnBlock {
  Conv2dLayer<T> expand;   // 1x1, d -> R*d
  Tensor<T> dw;            // [R*d,1,3,3]
  Conv2dLayer<T> project;  // 1x1, R*d -> d

  Tensor<T> forward(const Tensor<T>& c) const {
    Tensor<T> u = gelu(expand.forward(c));
    Tensor<T> f = add(depthwise_conv2d(u, dw, 1, 1), u);
    return project.forward(gelu(f));
  }
};

template <typename T>
struct CmtBlock {
  Tensor<T> lpu_dw;  // [d,1,3,3]
  LayerNormLayer<T> norm1, norm2;
  LmhsaBlock<T> lmhsa;
  IrffnBlock<T> irffn;

  Tensor<T> forward(const Tensor<T>& c) const {
    Tensor<T> y = lpu_forward(c, lpu_dw);
    Tensor<T> z = add(lmhsa.forward(norm1.forward(y)), y);
    return add(irffn.forward(norm2.forward(z)), z);
  }
};

/// Regional-boundary downsampler: conv+GELU, then parallel 2x2 max and avg
/// pools concatenated on channels. Doubles channels, halves spatial dims.
template <typename T>
struct RbBlock {
  Conv2dLayer<T> conv;  // 3x3, C -> C, pad 1

  Tensor<T> forward(const Tensor<T>& c) const {
    if (c.dim(2) % 2 != 0 || c.dim(3) % 2 != 0 || c.dim(2) < 2 || c.dim(3) < 2) {
      throw DimensionError("rb_forward: spatial dims " + std::to_string(c.dim(2)) + "x" +
                           std::to_string(c.dim(3)) + " must be even and >= 2");
    }
    Tensor<T> u = gelu(conv.forward(c));
    return concat_channels(pool2d(u, PoolMode::kMax, 2, 2), pool2d(u, PoolMode::kAvg, 2, 2));
  }
};

/// y = N(relu(M(x))) + shortcut(x). M is a 1x1 channel projection, N a 3x3
/// conv carrying the stride; the shortcut is identity when shapes match and a
/// stride-matched 1x1 projection otherwise.
template <typename T>
struct ResidualBlockMN {
  Conv2dLayer<T> m;         // 1x1 cin -> cout
  Conv2dLayer<T> n;         // 3x3 cout -> cout, stride s
  Conv2dLayer<T> shortcut;  // 1x1 cin -> cout, stride s, no bias; w undefined = identity

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> t = n.forward(relu(m.forward(x)));
    Tensor<T> sc = shortcut.w.defined() ? shortcut.forward(x) : x;
    return add(t, sc);
  }
};

/// Channel concatenation with the transformer-stream channels first.
template <typename T>
Tensor<T> channel_boost(const Tensor<T>& c_rbcmt, const Tensor<T>& x_res) {
  return concat_channels(c_rbcmt, x_res);
}

/// Spatial sigmoid gate in (0,1) multiplied across all channels:
/// gate = sigmoid(excite(relu(squeeze(x)))).
template <typename T>
struct PixelAttentionBlock {
  Conv2dLayer<T> squeeze;  // 1x1, C -> max(1, C/ratio)
  Conv2dLayer<T> excite;   // 1x1, -> 1
  bool residual_add = false;

  Tensor<T> gate(const Tensor<T>& x) const {
    return sigmoid(excite.forward(relu(squeeze.forward(x))));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> gated = broadcast_mul_gate(gate(x), x);
    return residual_add ? add(gated, x) : gated;
  }
};

/// GAP -> dropout -> hidden FC + GELU -> output FC -> softmax.
template <typename T>
struct ClassifierHead {
  LinearLayer<T> fc1, fc2;
  double dropout_p = 0.3;

  struct Output {
    Tensor<T> logits;  // pre-softmax [N, classes]
    Tensor<T> probs;   // rows sum to 1
    Tensor<T> hidden;  // penultimate features [N, hidden]
  };

  Output forward(const Tensor<T>& x, bool training, std::uint64_t seed) const {
    Tensor<T> pooled = global_avg_pool(x);
    Tensor<T> dropped = dropout(pooled, dropout_p, training, seed);
    Tensor<T> hidden = gelu(fc1.forward(dropped));
    Tensor<T> logits = fc2.forward(hidden);
    return {logits, softmax(logits, 1), hidden};
  }
};

}  // namespace cmtboost
