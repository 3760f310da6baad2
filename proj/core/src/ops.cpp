#include "cmtboost/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>

#include "cmtboost/parallel.hpp"
#include "cmtboost/rng.hpp"

namespace cmtboost {

namespace {

template <typename T>
bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
  if (GradientTape<T>::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void record(const char* op, std::vector<Tensor<T>> parents, Tensor<T>& out,
            std::function<void()> backward) {
  out.set_requires_grad(true);
  GradientTape<T>::active()->record(op, std::move(parents), out, std::move(backward));
}

// C[M,N] += A[M,K] * B[K,N]. Parallel over rows of C; each element keeps the
// fixed k-ascending accumulation order, so results are bit-identical for any
// worker count.
template <typename T>
void gemm_accum(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
      T* crow = c + i * n;
      const T* arow = a + i * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = arow[kk];
        const T* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// C[M,N] += A[M,K] * B[N,K]^T (dot-product form).
template <typename T>
void gemm_abt(T* c, const T* a, const T* b, std::size_t m, std::size_t n, std::size_t k) {
  parallel_for(m, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = T(0);
        for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        crow[j] += acc;
      }
    }
  });
}

// C[M,N] += A[K,M]^T * B[K,N].
template <typename T>
void gemm_atb(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
      T* crow = c + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = a[kk * m + i];
        const T* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

struct ConvDims {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t oh, ow;
  int stride, pad;
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, int stride, int pad,
                            const char* op) {
  const std::size_t padded = in + 2 * static_cast<std::size_t>(pad);
  if (padded < kernel) {
    throw DimensionError(std::string(op) + ": kernel " + std::to_string(kernel) +
                         " exceeds padded input extent " + std::to_string(padded));
  }
  return (padded - kernel) / static_cast<std::size_t>(stride) + 1;
}

// col[Cin*kh*kw, OH*OW] for one image, zero-padding semantics.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const std::size_t spatial = d.oh * d.ow;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    const T* xc = x + ci * d.h * d.w;
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        T* crow = col + ((ci * d.kh + i) * d.kw + j) * spatial;
        for (std::size_t oh = 0; oh < d.oh; ++oh) {
          const long ih = static_cast<long>(oh) * d.stride - d.pad + static_cast<long>(i);
          if (ih < 0 || ih >= static_cast<long>(d.h)) {
            std::fill(crow + oh * d.ow, crow + (oh + 1) * d.ow, T(0));
            continue;
          }
          const T* xrow = xc + static_cast<std::size_t>(ih) * d.w;
          for (std::size_t ow = 0; ow < d.ow; ++ow) {
            const long iw = static_cast<long>(ow) * d.stride - d.pad + static_cast<long>(j);
            crow[oh * d.ow + ow] =
                (iw < 0 || iw >= static_cast<long>(d.w)) ? T(0) : xrow[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* dx) {
  const std::size_t spatial = d.oh * d.ow;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    T* xc = dx + ci * d.h * d.w;
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const T* crow = col + ((ci * d.kh + i) * d.kw + j) * spatial;
        for (std::size_t oh = 0; oh < d.oh; ++oh) {
          const long ih = static_cast<long>(oh) * d.stride - d.pad + static_cast<long>(i);
          if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
          T* xrow = xc + static_cast<std::size_t>(ih) * d.w;
          for (std::size_t ow = 0; ow < d.ow; ++ow) {
            const long iw = static_cast<long>(ow) * d.stride - d.pad + static_cast<long>(j);
            if (iw >= 0 && iw < static_cast<long>(d.w)) {
              xrow[static_cast<std::size_t>(iw)] += crow[oh * d.ow + ow];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void check_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got shape " + shape_str(t.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise / reduction
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (tracing<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    record<T>("add", {a, b}, out, [ac, bc, oc]() mutable {
      const auto& g = oc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (tracing<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    record<T>("mul", {a, b}, out, [ac, bc, oc]() mutable {
      const auto& g = oc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bc.data()[i];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ac.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * factor;
  if (tracing<T>({&a})) {
    Tensor<T> ac = a, oc = out;
    record<T>("scale", {a}, out, [ac, oc, factor]() mutable {
      const auto& g = oc.grad();
      auto& ga = ac.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tracing<T>({&a})) {
    Tensor<T> ac = a, oc = out;
    record<T>("sum_all", {a}, out, [ac, oc]() mutable {
      const T g = oc.grad()[0];
      auto& ga = ac.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

namespace {
inline double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)); }
inline double norm_pdf(double x) { return 0.3989422804014326779 * std::exp(-0.5 * x * x); }
inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (tracing<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    record<T>("relu", {x}, out, [xc, oc]() mutable {
      const auto& g = oc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xc.data()[i] > T(0)) gx[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double v = static_cast<double>(xv[i]);
    ov[i] = static_cast<T>(v * norm_cdf(v));
  }
  if (tracing<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    record<T>("gelu", {x}, out, [xc, oc]() mutable {
      const auto& g = oc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = static_cast<double>(xc.data()[i]);
        gx[i] += g[i] * static_cast<T>(norm_cdf(v) + v * norm_pdf(v));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = static_cast<T>(stable_sigmoid(static_cast<double>(xv[i])));
  }
  if (tracing<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    record<T>("sigmoid", {x}, out, [xc, oc]() mutable {
      const auto& g = oc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T y = oc.data()[i];
        gx[i] += g[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ParameterError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(static_cast<std::size_t>(axis));
  for (int i = 0; i < axis; ++i) outer *= x.dim(static_cast<std::size_t>(i));
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(static_cast<std::size_t>(i));

  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, static_cast<double>(xv[base + i * inner]));
      double denom = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(static_cast<double>(xv[base + i * inner]) - mx);
        ov[base + i * inner] = static_cast<T>(e);
        denom += e;
      }
      for (std::size_t i = 0; i < len; ++i) {
        ov[base + i * inner] = static_cast<T>(static_cast<double>(ov[base + i * inner]) / denom);
      }
    }
  }
  if (tracing<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    record<T>("softmax", {x}, out, [xc, oc, outer, len, inner]() mutable {
      const auto& g = oc.grad();
      const auto& y = oc.data();
      auto& gx = xc.grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = T(0);
          for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < len; ++i) {
            gx[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
  }
  Tensor<T> out = Tensor<T>::from_data(std::move(new_shape), a.data());
  if (tracing<T>({&a})) {
    Tensor<T> ac = a, oc = out;
    record<T>("reshape", {a}, out, [ac, oc]() mutable {
      const auto& g = oc.grad();
      auto& ga = ac.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> nchw_to_tokens(const Tensor<T>& x) {
  check_rank(x, 4, "nchw_to_tokens", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t hw = h * w;
  Tensor<T> out({n, hw, c});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T* src = xv.data() + (ni * c + ci) * hw;
      T* dst = ov.data() + ni * hw * c + ci;
      for (std::size_t s = 0; s < hw; ++s) dst[s * c] = src[s];
    }
  }
  if (tracing<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    record<T>("nchw_to_tokens", {x}, out, [xc, oc, n, c, hw]() mutable {
      const auto& g = oc.grad();
      auto& gx = xc.grad();
      for (std::size_t ni = 0; ni < n; ++ni) {
        for (std::size_t ci = 0; ci < c; ++ci) {
          T* dst = gx.data() + (ni * c + ci) * hw;
          const T* src = g.data() + ni * hw * c + ci;
          for (std::size_t s = 0; s < hw; ++s) dst[s] += src[s * c];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> tokens_to_nchw(const Tensor<T>& t, std::size_t h, std::size_t w) {
  check_rank(t, 3, "tokens_to_nchw", "input");
  const std::size_t n = t.dim(0), hw = t.dim(1), c = t.dim(2);
  if (hw != h * w) {
    throw DimensionError("tokens_to_nchw: token count " + std::to_string(hw) + " != " +
                         std::to_string(h) + "*" + std::to_string(w));
  }
  Tensor<T> out({n, c, h, w});
  const auto& tv = t.data();
  auto& ov = out.data();
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      T* dst = ov.data() + (ni * c + ci) * hw;
      const T* src = tv.data() + ni * hw * c + ci;
      for (std::size_t s = 0; s < hw; ++s) dst[s] = src[s * c];
    }
  }
  if (tracing<T>({&t})) {
    Tensor<T> tc = t, oc = out;
    record<T>("tokens_to_nchw", {t}, out, [tc, oc, n, c, hw]() mutable {
      const auto& g = oc.grad();
      auto& gt = tc.grad();
      for (std::size_t ni = 0; ni < n; ++ni) {
        for (std::size_t ci = 0; ci < c; ++ci) {
          const T* src = g.data() + (ni * c + ci) * hw;
          T* dst = gt.data() + ni * hw * c + ci;
          for (std::size_t s = 0; s < hw; ++s) dst[s * c] += src[s];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& t, std::size_t start, std::size_t len) {
  const std::size_t last = t.dim(t.rank() - 1);
  if (start + len > last) {
    throw DimensionError("slice_last: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds extent " + std::to_string(last));
  }
  Shape os = t.shape();
  os.back() = len;
  Tensor<T> out(os);
  const std::size_t rows = t.numel() / last;
  const auto& tv = t.data();
  auto& ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::memcpy(ov.data() + r * len, tv.data() + r * last + start, len * sizeof(T));
  }
  if (tracing<T>({&t})) {
    Tensor<T> tc = t, oc = out;
    record<T>("slice_last", {t}, out, [tc, oc, rows, last, start, len]() mutable {
      const auto& g = oc.grad();
      auto& gt = tc.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < len; ++j) gt[r * last + start + j] += g[r * len + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ParameterError("concat_last: no inputs");
  Shape base = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    total += s.back();
    s.back() = base.back();
    if (s != base) {
      throw DimensionError("concat_last: shape mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
  }
  Shape os = base;
  os.back() = total;
  Tensor<T> out(os);
  const std::size_t rows = parts[0].numel() / base.back();
  auto& ov = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape().back();
    const auto& pv = p.data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::memcpy(ov.data() + r * total + offset, pv.data() + r * len, len * sizeof(T));
    }
    offset += len;
  }
  bool needs = false;
  for (const auto& p : parts) needs = needs || tracing<T>({&p});
  if (needs) {
    std::vector<Tensor<T>> pc = parts;
    Tensor<T> oc = out;
    record<T>("concat_last", parts, out, [pc, oc, rows, total]() mutable {
      const auto& g = oc.grad();
      std::size_t offset = 0;
      for (auto& p : pc) {
        const std::size_t len = p.shape().back();
        if (p.requires_grad()) {
          auto& gp = p.grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < len; ++j) gp[r * len + j] += g[r * total + offset + j];
          }
        }
        offset += len;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  check_rank(a, 4, "concat_channels", "first input");
  check_rank(b, 4, "concat_channels", "second input");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: batch/spatial mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  auto& ov = out.data();
  for (std::size_t ni = 0; ni < n; ++ni) {
    std::memcpy(ov.data() + ni * (ca + cb) * hw, a.data().data() + ni * ca * hw,
                ca * hw * sizeof(T));
    std::memcpy(ov.data() + (ni * (ca + cb) + ca) * hw, b.data().data() + ni * cb * hw,
                cb * hw * sizeof(T));
  }
  if (tracing<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    record<T>("concat_channels", {a, b}, out, [ac, bc, oc, n, ca, cb, hw]() mutable {
      const auto& g = oc.grad();
      for (std::size_t ni = 0; ni < n; ++ni) {
        if (ac.requires_grad()) {
          auto& ga = ac.grad();
          const T* src = g.data() + ni * (ca + cb) * hw;
          T* dst = ga.data() + ni * ca * hw;
          for (std::size_t i = 0; i < ca * hw; ++i) dst[i] += src[i];
        }
        if (bc.requires_grad()) {
          auto& gb = bc.grad();
          const T* src = g.data() + (ni * (ca + cb) + ca) * hw;
          T* dst = gb.data() + ni * cb * hw;
          for (std::size_t i = 0; i < cb * hw; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  check_rank(x, 2, "linear", "input");
  check_rank(w, 2, "linear", "weight");
  if (x.dim(1) != w.dim(0)) {
    throw DimensionError("linear: inner dims " + shape_str(x.shape()) + " @ " +
                         shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), e = w.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != e)) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()) + " != [" +
                         std::to_string(e) + "]");
  }
  Tensor<T> out({n, e});
  auto& ov = out.data();
  if (bias.defined()) {
    for (std::size_t r = 0; r < n; ++r) {
      std::memcpy(ov.data() + r * e, bias.data().data(), e * sizeof(T));
    }
  }
  gemm_accum(ov.data(), x.data().data(), w.data().data(), n, d, e);
  if (tracing<T>({&x, &w, &bias})) {
    Tensor<T> xc = x, wc = w, bc = bias, oc = out;
    std::vector<Tensor<T>> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    record<T>("linear", std::move(parents), out, [xc, wc, bc, oc, n, d, e]() mutable {
      const auto& g = oc.grad();
      if (xc.requires_grad()) {
        gemm_abt(xc.grad().data(), g.data(), wc.data().data(), n, d, e);
      }
      if (wc.requires_grad()) {
        gemm_atb(wc.grad().data(), xc.data().data(), g.data(), d, n, e);
      }
      if (bc.defined() && bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < e; ++j) gb[j] += g[r * e + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  check_rank(a, 3, "bmm", "lhs");
  check_rank(b, 3, "bmm", "rhs");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible " + shape_str(a.shape()) + " @ " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), n = a.dim(1), m = a.dim(2), p = b.dim(2);
  Tensor<T> out({batch, n, p});
  for (std::size_t bi = 0; bi < batch; ++bi) {
    gemm_accum(out.data().data() + bi * n * p, a.data().data() + bi * n * m,
               b.data().data() + bi * m * p, n, m, p);
  }
  if (tracing<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    record<T>("bmm", {a, b}, out, [ac, bc, oc, batch, n, m, p]() mutable {
      const auto& g = oc.grad();
      for (std::size_t bi = 0; bi < batch; ++bi) {
        if (ac.requires_grad()) {
          gemm_abt(ac.grad().data() + bi * n * m, g.data() + bi * n * p,
                   bc.data().data() + bi * m * p, n, m, p);
        }
        if (bc.requires_grad()) {
          gemm_atb(bc.grad().data() + bi * m * p, ac.data().data() + bi * n * m,
                   g.data() + bi * n * p, m, n, p);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("transpose_last2: rank < 2");
  Shape os = a.shape();
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  const std::size_t rows = a.dim(a.rank() - 2), cols = a.dim(a.rank() - 1);
  const std::size_t batch = a.numel() / (rows * cols);
  Tensor<T> out(os);
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* src = av.data() + bi * rows * cols;
    T* dst = ov.data() + bi * rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
  if (tracing<T>({&a})) {
    Tensor<T> ac = a, oc = out;
    record<T>("transpose_last2", {a}, out, [ac, oc, batch, rows, cols]() mutable {
      const auto& g = oc.grad();
      auto& ga = ac.grad();
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* src = g.data() + bi * rows * cols;
        T* dst = ga.data() + bi * rows * cols;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] += src[c * rows + r];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_rowmat(const Tensor<T>& scores, const Tensor<T>& bias) {
  check_rank(scores, 3, "add_rowmat", "scores");
  check_rank(bias, 2, "add_rowmat", "bias");
  if (scores.dim(1) != bias.dim(0) || scores.dim(2) != bias.dim(1)) {
    throw DimensionError("add_rowmat: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(scores.shape()));
  }
  const std::size_t batch = scores.dim(0), mat = bias.numel();
  Tensor<T> out(scores.shape());
  const auto& sv = scores.data();
  const auto& bv = bias.data();
  auto& ov = out.data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t i = 0; i < mat; ++i) ov[bi * mat + i] = sv[bi * mat + i] + bv[i];
  }
  if (tracing<T>({&scores, &bias})) {
    Tensor<T> sc = scores, bc = bias, oc = out;
    record<T>("add_rowmat", {scores, bias}, out, [sc, bc, oc, batch, mat]() mutable {
      const auto& g = oc.grad();
      if (sc.requires_grad()) {
        auto& gs = sc.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t bi = 0; bi < batch; ++bi) {
          for (std::size_t i = 0; i < mat; ++i) gb[i] += g[bi * mat + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& table, const std::vector<std::size_t>& flat_idx,
                 Shape out_shape) {
  if (shape_numel(out_shape) != flat_idx.size()) {
    throw DimensionError("gather: index count does not match output shape");
  }
  const auto& tv = table.data();
  for (std::size_t idx : flat_idx) {
    if (idx >= tv.size()) throw DimensionError("gather: index out of table range");
  }
  Tensor<T> out(out_shape);
  auto& ov = out.data();
  for (std::size_t i = 0; i < flat_idx.size(); ++i) ov[i] = tv[flat_idx[i]];
  if (tracing<T>({&table})) {
    Tensor<T> tc = table, oc = out;
    record<T>("gather", {table}, out, [tc, oc, flat_idx]() mutable {
      const auto& g = oc.grad();
      auto& gt = tc.grad();
      for (std::size_t i = 0; i < flat_idx.size(); ++i) gt[flat_idx[i]] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution / pooling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad) {
  check_rank(x, 4, "conv2d", "input");
  check_rank(w, 4, "conv2d", "weight");
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  if (pad < 0) throw ParameterError("conv2d: pad must be >= 0");
  if (w.dim(2) < 1 || w.dim(3) < 1) throw ParameterError("conv2d: kernel dims must be >= 1");
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " != weight channels " + std::to_string(w.dim(1)));
  }
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.oh = conv_out_extent(d.h, d.kh, stride, pad, "conv2d");
  d.ow = conv_out_extent(d.w, d.kw, stride, pad, "conv2d");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d.cout)) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " != [" +
                         std::to_string(d.cout) + "]");
  }

  const std::size_t k = d.cin * d.kh * d.kw;
  const std::size_t spatial = d.oh * d.ow;
  Tensor<T> out({d.n, d.cout, d.oh, d.ow});
  auto& ov = out.data();
  std::vector<T> col(k * spatial);
  for (std::size_t ni = 0; ni < d.n; ++ni) {
    im2col(x.data().data() + ni * d.cin * d.h * d.w, d, col.data());
    T* on = ov.data() + ni * d.cout * spatial;
    if (bias.defined()) {
      for (std::size_t co = 0; co < d.cout; ++co) {
        std::fill(on + co * spatial, on + (co + 1) * spatial, bias.data()[co]);
      }
    }
    gemm_accum(on, w.data().data(), col.data(), d.cout, k, spatial);
  }

  if (tracing<T>({&x, &w, &bias})) {
    Tensor<T> xc = x, wc = w, bc = bias, oc = out;
    std::vector<Tensor<T>> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    record<T>("conv2d", std::move(parents), out, [xc, wc, bc, oc, d, k, spatial]() mutable {
      const auto& g = oc.grad();
      std::vector<T> col(k * spatial);
      std::vector<T> wt;
      if (xc.requires_grad()) {
        // W^T materialized once: [K, Cout]
        wt.resize(k * d.cout);
        const auto& wv = wc.data();
        for (std::size_t co = 0; co < d.cout; ++co) {
          for (std::size_t kk = 0; kk < k; ++kk) wt[kk * d.cout + co] = wv[co * k + kk];
        }
      }
      std::vector<T> dcol(k * spatial);
      for (std::size_t ni = 0; ni < d.n; ++ni) {
        const T* gn = g.data() + ni * d.cout * spatial;
        if (wc.requires_grad() || xc.requires_grad()) {
          im2col(xc.data().data() + ni * d.cin * d.h * d.w, d, col.data());
        }
        if (wc.requires_grad()) {
          gemm_abt(wc.grad().data(), gn, col.data(), d.cout, k, spatial);
        }
        if (xc.requires_grad()) {
          std::fill(dcol.begin(), dcol.end(), T(0));
          gemm_accum(dcol.data(), wt.data(), gn, k, d.cout, spatial);
          col2im_add(dcol.data(), d, xc.grad().data() + ni * d.cin * d.h * d.w);
        }
        if (bc.defined() && bc.requires_grad()) {
          auto& gb = bc.grad();
          for (std::size_t co = 0; co < d.cout; ++co) {
            T acc = T(0);
            for (std::size_t s = 0; s < spatial; ++s) acc += gn[co * spatial + s];
            gb[co] += acc;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  check_rank(x, 4, "depthwise_conv2d", "input");
  check_rank(w, 4, "depthwise_conv2d", "weight");
  if (stride < 1) throw ParameterError("depthwise_conv2d: stride must be >= 1");
  if (pad < 0) throw ParameterError("depthwise_conv2d: pad must be >= 0");
  if (w.dim(0) != x.dim(1) || w.dim(1) != 1) {
    throw DimensionError("depthwise_conv2d: weight " + shape_str(w.shape()) +
                         " must be [C,1,kh,kw] with C = " + std::to_string(x.dim(1)));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const std::size_t kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = conv_out_extent(h, kh, stride, pad, "depthwise_conv2d");
  const std::size_t ow = conv_out_extent(ww, kw, stride, pad, "depthwise_conv2d");
  Tensor<T> out({n, c, oh, ow});
  auto& ov = out.data();
  const auto& xv = x.data();
  const auto& wv = w.data();
  parallel_for(n * c, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t nc = b0; nc < b1; ++nc) {
      const std::size_t ci = nc % c;
      const T* xs = xv.data() + nc * h * ww;
      const T* ks = wv.data() + ci * kh * kw;
      T* os = ov.data() + nc * oh * ow;
      for (std::size_t o = 0; o < oh; ++o) {
        for (std::size_t p = 0; p < ow; ++p) {
          T acc = T(0);
          for (std::size_t i = 0; i < kh; ++i) {
            const long ih = static_cast<long>(o) * stride - pad + static_cast<long>(i);
            if (ih < 0 || ih >= static_cast<long>(h)) continue;
            for (std::size_t j = 0; j < kw; ++j) {
              const long iw = static_cast<long>(p) * stride - pad + static_cast<long>(j);
              if (iw < 0 || iw >= static_cast<long>(ww)) continue;
              acc += xs[static_cast<std::size_t>(ih) * ww + static_cast<std::size_t>(iw)] *
                     ks[i * kw + j];
            }
          }
          os[o * ow + p] = acc;
        }
      }
    }
  });
  if (tracing<T>({&x, &w})) {
    Tensor<T> xc = x, wc = w, oc = out;
    record<T>("depthwise_conv2d", {x, w}, out,
              [xc, wc, oc, n, c, h, ww, kh, kw, oh, ow, stride, pad]() mutable {
      const auto& g = oc.grad();
      const bool need_x = xc.requires_grad();
      const bool need_w = wc.requires_grad();
      parallel_for(c, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t ci = c0; ci < c1; ++ci) {
          const T* ks = wc.data().data() + ci * kh * kw;
          T* gw = need_w ? wc.grad().data() + ci * kh * kw : nullptr;
          for (std::size_t ni = 0; ni < n; ++ni) {
            const std::size_t nc = ni * c + ci;
            const T* xs = xc.data().data() + nc * h * ww;
            const T* gs = g.data() + nc * oh * ow;
            T* gx = need_x ? xc.grad().data() + nc * h * ww : nullptr;
            for (std::size_t o = 0; o < oh; ++o) {
              for (std::size_t p = 0; p < ow; ++p) {
                const T go = gs[o * ow + p];
                for (std::size_t i = 0; i < kh; ++i) {
                  const long ih = static_cast<long>(o) * stride - pad + static_cast<long>(i);
                  if (ih < 0 || ih >= static_cast<long>(h)) continue;
                  for (std::size_t j = 0; j < kw; ++j) {
                    const long iw = static_cast<long>(p) * stride - pad + static_cast<long>(j);
                    if (iw < 0 || iw >= static_cast<long>(ww)) continue;
                    const std::size_t xi =
                        static_cast<std::size_t>(ih) * ww + static_cast<std::size_t>(iw);
                    if (need_x) gx[xi] += go * ks[i * kw + j];
                    if (need_w) gw[i * kw + j] += go * xs[xi];
                  }
                }
              }
            }
          }
        }
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolMode mode, int k, int stride) {
  check_rank(x, 4, "pool2d", "input");
  if (k < 1) throw ParameterError("pool2d: window must be >= 1");
  if (stride < 1) throw ParameterError("pool2d: stride must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < static_cast<std::size_t>(k) || w < static_cast<std::size_t>(k)) {
    throw DimensionError("pool2d: window " + std::to_string(k) + " larger than input " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t oh = (h - k) / stride + 1;
  const std::size_t ow = (w - k) / stride + 1;
  Tensor<T> out({n, c, oh, ow});
  auto& ov = out.data();
  const auto& xv = x.data();
  // Row-major index of the first maximum per window; used by backward.
  auto argmax = std::make_shared<std::vector<std::size_t>>(mode == PoolMode::kMax ? out.numel() : 0);
  const T inv_area = T(1) / static_cast<T>(k * k);
  parallel_for(n * c, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t nc = b0; nc < b1; ++nc) {
      const T* xs = xv.data() + nc * h * w;
      T* os = ov.data() + nc * oh * ow;
      for (std::size_t o = 0; o < oh; ++o) {
        for (std::size_t p = 0; p < ow; ++p) {
          const std::size_t r0 = o * stride, c0 = p * stride;
          if (mode == PoolMode::kMax) {
            T best = xs[r0 * w + c0];
            std::size_t bi = r0 * w + c0;
            for (int i = 0; i < k; ++i) {
              for (int j = 0; j < k; ++j) {
                const std::size_t xi = (r0 + i) * w + (c0 + j);
                if (xs[xi] > best) {
                  best = xs[xi];
                  bi = xi;
                }
              }
            }
            os[o * ow + p] = best;
            (*argmax)[nc * oh * ow + o * ow + p] = bi;
          } else {
            T acc = T(0);
            for (int i = 0; i < k; ++i) {
              for (int j = 0; j < k; ++j) acc += xs[(r0 + i) * w + (c0 + j)];
            }
            os[o * ow + p] = acc * inv_area;
          }
        }
      }
    }
  });
  if (tracing<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    record<T>("pool2d", {x}, out,
              [xc, oc, argmax, mode, n, c, h, w, oh, ow, k, stride, inv_area]() mutable {
      const auto& g = oc.grad();
      auto& gx = xc.grad();
      parallel_for(n * c, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t nc = b0; nc < b1; ++nc) {
          T* gs = gx.data() + nc * h * w;
          const T* go = g.data() + nc * oh * ow;
          for (std::size_t o = 0; o < oh; ++o) {
            for (std::size_t p = 0; p < ow; ++p) {
              if (mode == PoolMode::kMax) {
                gs[(*argmax)[nc * oh * ow + o * ow + p]] += go[o * ow + p];
              } else {
                const T v = go[o * ow + p] * inv_area;
                const std::size_t r0 = o * stride, c0 = p * stride;
                for (int i = 0; i < k; ++i) {
                  for (int j = 0; j < k; ++j) gs[(r0 + i) * w + (c0 + j)] += v;
                }
              }
            }
          }
        }
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  check_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  const auto& xv = x.data();
  auto& ov = out.data();
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    T acc = T(0);
    const T* xs = xv.data() + nc * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += xs[i];
    ov[nc] = acc * inv;
  }
  if (tracing<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    record<T>("global_avg_pool", {x}, out, [xc, oc, n, c, hw, inv]() mutable {
      const auto& g = oc.grad();
      auto& gx = xc.grad();
      for (std::size_t nc = 0; nc < n * c; ++nc) {
        const T v = g[nc] * inv;
        T* gs = gx.data() + nc * hw;
        for (std::size_t i = 0; i < hw; ++i) gs[i] += v;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_mul_gate(const Tensor<T>& gate, const Tensor<T>& x) {
  check_rank(gate, 4, "broadcast_mul_gate", "gate");
  check_rank(x, 4, "broadcast_mul_gate", "input");
  if (gate.dim(0) != x.dim(0) || gate.dim(1) != 1 || gate.dim(2) != x.dim(2) ||
      gate.dim(3) != x.dim(3)) {
    throw DimensionError("broadcast_mul_gate: gate " + shape_str(gate.shape()) +
                         " does not match input " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  const auto& gv = gate.data();
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t ni = 0; ni < n; ++ni) {
    const T* gs = gv.data() + ni * hw;
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T* xs = xv.data() + (ni * c + ci) * hw;
      T* os = ov.data() + (ni * c + ci) * hw;
      for (std::size_t i = 0; i < hw; ++i) os[i] = gs[i] * xs[i];
    }
  }
  if (tracing<T>({&gate, &x})) {
    Tensor<T> gc = gate, xc = x, oc = out;
    record<T>("broadcast_mul_gate", {gate, x}, out, [gc, xc, oc, n, c, hw]() mutable {
      const auto& g = oc.grad();
      for (std::size_t ni = 0; ni < n; ++ni) {
        if (gc.requires_grad()) {
          T* gg = gc.grad().data() + ni * hw;
          for (std::size_t ci = 0; ci < c; ++ci) {
            const T* xs = xc.data().data() + (ni * c + ci) * hw;
            const T* go = g.data() + (ni * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) gg[i] += go[i] * xs[i];
          }
        }
        if (xc.requires_grad()) {
          const T* gs = gc.data().data() + ni * hw;
          for (std::size_t ci = 0; ci < c; ++ci) {
            T* gx = xc.grad().data() + (ni * c + ci) * hw;
            const T* go = g.data() + (ni * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) gx[i] += go[i] * gs[i];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() < 2) throw DimensionError("layer_norm: input rank must be >= 2");
  if (!(eps > T(0))) throw ParameterError("layer_norm: eps must be > 0");
  const std::size_t m = x.dim(0), c = x.dim(1);
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm: gamma/beta length must equal channel count " +
                         std::to_string(c));
  }
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  auto& ov = out.data();
  // Saved per-token statistics for backward.
  auto mean = std::make_shared<std::vector<T>>(m * inner);
  auto inv_std = std::make_shared<std::vector<T>>(m * inner);
  const T invc = T(1) / static_cast<T>(c);
  for (std::size_t mi = 0; mi < m; ++mi) {
    for (std::size_t s = 0; s < inner; ++s) {
      const std::size_t base = mi * c * inner + s;
      T mu = T(0);
      for (std::size_t ci = 0; ci < c; ++ci) mu += xv[base + ci * inner];
      mu *= invc;
      T var = T(0);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T dv = xv[base + ci * inner] - mu;
        var += dv * dv;
      }
      var *= invc;
      const T inv = T(1) / std::sqrt(var + eps);
      (*mean)[mi * inner + s] = mu;
      (*inv_std)[mi * inner + s] = inv;
      for (std::size_t ci = 0; ci < c; ++ci) {
        ov[base + ci * inner] = (xv[base + ci * inner] - mu) * inv * gv[ci] + bv[ci];
      }
    }
  }
  if (tracing<T>({&x, &gamma, &beta})) {
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
    record<T>("layer_norm", {x, gamma, beta}, out,
              [xc, gc, bc, oc, mean, inv_std, m, c, inner, invc]() mutable {
      const auto& g = oc.grad();
      const auto& xv = xc.data();
      const auto& gv = gc.data();
      for (std::size_t mi = 0; mi < m; ++mi) {
        for (std::size_t s = 0; s < inner; ++s) {
          const std::size_t base = mi * c * inner + s;
          const T mu = (*mean)[mi * inner + s];
          const T inv = (*inv_std)[mi * inner + s];
          T sum_gg = T(0), sum_ggx = T(0);
          for (std::size_t ci = 0; ci < c; ++ci) {
            const T xhat = (xv[base + ci * inner] - mu) * inv;
            const T gg = g[base + ci * inner] * gv[ci];
            sum_gg += gg;
            sum_ggx += gg * xhat;
          }
          if (xc.requires_grad()) {
            auto& gx = xc.grad();
            for (std::size_t ci = 0; ci < c; ++ci) {
              const T xhat = (xv[base + ci * inner] - mu) * inv;
              const T gg = g[base + ci * inner] * gv[ci];
              gx[base + ci * inner] += inv * (gg - invc * sum_gg - xhat * invc * sum_ggx);
            }
          }
          if (gc.requires_grad() || bc.requires_grad()) {
            for (std::size_t ci = 0; ci < c; ++ci) {
              const T xhat = (xv[base + ci * inner] - mu) * inv;
              if (gc.requires_grad()) gc.grad()[ci] += g[base + ci * inner] * xhat;
              if (bc.requires_grad()) bc.grad()[ci] += g[base + ci * inner];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// stochastic / loss
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ParameterError("dropout: p must be in [0,1)");
  if (!training || p == 0.0) return x;
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto factors = std::make_shared<std::vector<T>>(x.numel());
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const T f = uni(rng) < p ? T(0) : keep_scale;
    (*factors)[i] = f;
    ov[i] = xv[i] * f;
  }
  if (tracing<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    record<T>("dropout", {x}, out, [xc, oc, factors]() mutable {
      const auto& g = oc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*factors)[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  check_rank(logits, 2, "cross_entropy", "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  for (int lab : labels) {
    if (lab < 0 || static_cast<std::size_t>(lab) >= k) {
      throw ParameterError("cross_entropy: label " + std::to_string(lab) + " out of range [0," +
                           std::to_string(k) + ")");
    }
  }
  const auto& lv = logits.data();
  auto probs = std::make_shared<std::vector<T>>(n * k);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(lv[r * k + j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(lv[r * k + j]) - mx);
    const double lse = mx + std::log(denom);
    total += lse - static_cast<double>(lv[r * k + static_cast<std::size_t>(labels[r])]);
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[r * k + j] = static_cast<T>(std::exp(static_cast<double>(lv[r * k + j]) - lse));
    }
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
  if (tracing<T>({&logits})) {
    Tensor<T> lc = logits, oc = out;
    record<T>("cross_entropy", {logits}, out, [lc, oc, probs, labels, n, k]() mutable {
      const T g = oc.grad()[0] / static_cast<T>(n);
      auto& gl = lc.grad();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < k; ++j) {
          const T onehot = (static_cast<std::size_t>(labels[r]) == j) ? T(1) : T(0);
          gl[r * k + j] += g * ((*probs)[r * k + j] - onehot);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

#define CMTBOOST_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> sum_all(const Tensor<T>&);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
  template Tensor<T> softmax(const Tensor<T>&, int);                                             \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> nchw_to_tokens(const Tensor<T>&);                                           \
  template Tensor<T> tokens_to_nchw(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> concat_last(const std::vector<Tensor<T>>&);                                 \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                          \
  template Tensor<T> add_rowmat(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> gather(const Tensor<T>&, const std::vector<std::size_t>&, Shape);           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);     \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, int, int);             \
  template Tensor<T> pool2d(const Tensor<T>&, PoolMode, int, int);                               \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                          \
  template Tensor<T> broadcast_mul_gate(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, std::uint64_t);                     \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int>&);

CMTBOOST_INSTANTIATE_OPS(float)
CMTBOOST_INSTANTIATE_OPS(double)

#undef CMTBOOST_INSTANTIATE_OPS

}  // namespace cmtboost
