// Independent reference implementations used as test oracles. These stay
// deliberately naive (plain nested loops, full sorts, dense eigensolvers) and
// share no code with the library paths they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracles {

struct Dims4 {
  std::size_t n, c, h, w;
};

// Sliding inner product with zero padding; out[n][co][oh][ow].
template <typename T>
std::vector<T> conv2d(const std::vector<T>& x, Dims4 xd, const std::vector<T>& wgt,
                      std::size_t cout, std::size_t kh, std::size_t kw, const std::vector<T>* bias,
                      int stride, int pad, std::size_t* oh_out, std::size_t* ow_out) {
  const std::size_t oh = (xd.h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (xd.w + 2 * pad - kw) / stride + 1;
  *oh_out = oh;
  *ow_out = ow;
  std::vector<T> out(xd.n * cout * oh * ow, T(0));
  for (std::size_t n = 0; n < xd.n; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = bias ? (*bias)[co] : T(0);
          for (std::size_t ci = 0; ci < xd.c; ++ci) {
            for (std::size_t i = 0; i < kh; ++i) {
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(oy * stride + i) - pad;
                const long ix = static_cast<long>(ox * stride + j) - pad;
                if (iy < 0 || iy >= static_cast<long>(xd.h) || ix < 0 ||
                    ix >= static_cast<long>(xd.w)) {
                  continue;
                }
                acc += x[((n * xd.c + ci) * xd.h + iy) * xd.w + ix] *
                       wgt[((co * xd.c + ci) * kh + i) * kw + j];
              }
            }
          }
          out[((n * cout + co) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
std::vector<T> depthwise_conv2d(const std::vector<T>& x, Dims4 xd, const std::vector<T>& wgt,
                                std::size_t kh, std::size_t kw, int stride, int pad,
                                std::size_t* oh_out, std::size_t* ow_out) {
  const std::size_t oh = (xd.h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (xd.w + 2 * pad - kw) / stride + 1;
  *oh_out = oh;
  *ow_out = ow;
  std::vector<T> out(xd.n * xd.c * oh * ow, T(0));
  for (std::size_t n = 0; n < xd.n; ++n) {
    for (std::size_t c = 0; c < xd.c; ++c) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = T(0);
          for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
              const long iy = static_cast<long>(oy * stride + i) - pad;
              const long ix = static_cast<long>(ox * stride + j) - pad;
              if (iy < 0 || iy >= static_cast<long>(xd.h) || ix < 0 ||
                  ix >= static_cast<long>(xd.w)) {
                continue;
              }
              acc += x[((n * xd.c + c) * xd.h + iy) * xd.w + ix] * wgt[(c * kh + i) * kw + j];
            }
          }
          out[((n * xd.c + c) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
std::vector<T> pool2d(const std::vector<T>& x, Dims4 xd, bool max_mode, int k, int stride,
                      std::size_t* oh_out, std::size_t* ow_out) {
  const std::size_t oh = (xd.h - k) / stride + 1;
  const std::size_t ow = (xd.w - k) / stride + 1;
  *oh_out = oh;
  *ow_out = ow;
  std::vector<T> out(xd.n * xd.c * oh * ow);
  for (std::size_t n = 0; n < xd.n; ++n) {
    for (std::size_t c = 0; c < xd.c; ++c) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::vector<T> window;
          for (int i = 0; i < k; ++i) {
            for (int j = 0; j < k; ++j) {
              window.push_back(x[((n * xd.c + c) * xd.h + oy * stride + i) * xd.w +
                                 (ox * stride + j)]);
            }
          }
          T v;
          if (max_mode) {
            v = *std::max_element(window.begin(), window.end());
          } else {
            T sum = T(0);
            for (T e : window) sum += e;
            v = sum / static_cast<T>(k * k);
          }
          out[((n * xd.c + c) * oh + oy) * ow + ox] = v;
        }
      }
    }
  }
  return out;
}

// x * Phi(x) evaluated through erfc rather than erf.
inline double gelu(double x) { return x * 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Catmull-Rom resize evaluated directly per output pixel (a = -0.5,
// half-pixel centers, clamped sampling).
inline double catmull_rom_kernel(double t) {
  const double a = -0.5;
  t = std::fabs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return a * (((t - 5.0) * t + 8.0) * t - 4.0);
  return 0.0;
}

inline double bicubic_sample(const std::vector<float>& plane, std::size_t h, std::size_t w,
                             std::size_t out_h, std::size_t out_w, std::size_t oy,
                             std::size_t ox) {
  const double sy = (oy + 0.5) * (static_cast<double>(h) / out_h) - 0.5;
  const double sx = (ox + 0.5) * (static_cast<double>(w) / out_w) - 0.5;
  const long y0 = static_cast<long>(std::floor(sy));
  const long x0 = static_cast<long>(std::floor(sx));
  double acc = 0.0;
  for (long i = -1; i <= 2; ++i) {
    for (long j = -1; j <= 2; ++j) {
      const long yy = std::clamp(y0 + i, 0L, static_cast<long>(h) - 1);
      const long xx = std::clamp(x0 + j, 0L, static_cast<long>(w) - 1);
      acc += catmull_rom_kernel(sy - (y0 + i)) * catmull_rom_kernel(sx - (x0 + j)) *
             plane[yy * w + xx];
    }
  }
  return std::clamp(acc, 0.0, 1.0);
}

// Median of the 3x3 neighborhood via a full sort, replicate padding.
inline float median9(const std::vector<float>& plane, std::size_t h, std::size_t w, long y,
                     long x) {
  std::vector<float> v;
  for (long dy = -1; dy <= 1; ++dy) {
    for (long dx = -1; dx <= 1; ++dx) {
      const long yy = std::clamp(y + dy, 0L, static_cast<long>(h) - 1);
      const long xx = std::clamp(x + dx, 0L, static_cast<long>(w) - 1);
      v.push_back(plane[yy * w + xx]);
    }
  }
  std::sort(v.begin(), v.end());
  return v[4];
}

// Mann-Whitney AUC: concordant pairs / (pos * neg), ties counted 1/2.
inline double mann_whitney_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double concordant = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) {
        concordant += 1.0;
      } else if (scores[i] == scores[j]) {
        concordant += 0.5;
      }
    }
  }
  return concordant / static_cast<double>(pairs);
}

// Cyclic Jacobi eigendecomposition for small symmetric matrices; returns
// eigenvalues descending with matching unit eigenvectors (rows).
inline void jacobi_eigen(std::vector<double> a, std::size_t n, std::vector<double>* eigenvalues,
                         std::vector<std::vector<double>>* eigenvectors) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::fabs(a[p * n + q]) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });
  eigenvalues->clear();
  eigenvectors->clear();
  for (std::size_t idx : order) {
    eigenvalues->push_back(a[idx * n + idx]);
    std::vector<double> vec(n);
    for (std::size_t k = 0; k < n; ++k) vec[k] = v[k * n + idx];
    eigenvectors->push_back(vec);
  }
}

}  // namespace oracles
