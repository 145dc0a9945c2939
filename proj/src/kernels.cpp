#include "cllm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif
#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace cllm::kernels {
namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColTile = 32;
// Below this many multiply-adds a kernel stays on the calling thread.
constexpr std::size_t kParallelWork = std::size_t{1} << 15;

// Computes R output rows times one column tile of width W (W == 0 means the
// runtime width `w`). A element (row r, inner p) lives at a[r * a_row + p * a_inner];
// B row p starts at b + p * ldb. Each output is an fma chain over p in order.
template <std::size_t R, std::size_t W>
inline void gemm_tile(const double* a, std::size_t a_row, std::size_t a_inner, const double* b, std::size_t ldb,
                      double* c, std::size_t ldc, std::size_t inner, std::size_t w, bool accumulate) {
  constexpr std::size_t kMax = W == 0 ? kColTile : W;
  const std::size_t width = W == 0 ? w : W;
  double t[R][kMax];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < width; ++j) t[r][j] = accumulate ? c[r * ldc + j] : 0.0;
  }
  for (std::size_t p = 0; p < inner; ++p) {
    const double* bp = b + p * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * a_row + p * a_inner];
      if constexpr (W != 0) {
        for (std::size_t j = 0; j < W; ++j) t[r][j] = std::fma(av, bp[j], t[r][j]);
      } else {
        for (std::size_t j = 0; j < width; ++j) t[r][j] = std::fma(av, bp[j], t[r][j]);
      }
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < width; ++j) c[r * ldc + j] = t[r][j];
  }
}

#if defined(__AVX512F__)
// Register-blocked version of gemm_tile<R, 32>: same fma chain per output,
// accumulators held in 4 zmm registers per row.
template <std::size_t R>
inline void gemm_tile32_avx512(const double* a, std::size_t a_row, std::size_t a_inner, const double* b,
                               std::size_t ldb, double* c, std::size_t ldc, std::size_t inner, bool accumulate) {
  __m512d t[R][4];
#pragma GCC unroll 4
  for (std::size_t r = 0; r < R; ++r) {
#pragma GCC unroll 4
    for (std::size_t q = 0; q < 4; ++q) t[r][q] = accumulate ? _mm512_loadu_pd(c + r * ldc + 8 * q) : _mm512_setzero_pd();
  }
  for (std::size_t p = 0; p < inner; ++p) {
    const double* bp = b + p * ldb;
    const __m512d b0 = _mm512_loadu_pd(bp), b1 = _mm512_loadu_pd(bp + 8), b2 = _mm512_loadu_pd(bp + 16),
                  b3 = _mm512_loadu_pd(bp + 24);
#pragma GCC unroll 4
    for (std::size_t r = 0; r < R; ++r) {
      const __m512d av = _mm512_set1_pd(a[r * a_row + p * a_inner]);
      t[r][0] = _mm512_fmadd_pd(av, b0, t[r][0]);
      t[r][1] = _mm512_fmadd_pd(av, b1, t[r][1]);
      t[r][2] = _mm512_fmadd_pd(av, b2, t[r][2]);
      t[r][3] = _mm512_fmadd_pd(av, b3, t[r][3]);
    }
  }
#pragma GCC unroll 4
  for (std::size_t r = 0; r < R; ++r) {
#pragma GCC unroll 4
    for (std::size_t q = 0; q < 4; ++q) _mm512_storeu_pd(c + r * ldc + 8 * q, t[r][q]);
  }
}
#endif

template <std::size_t R>
inline void gemm_rows(const double* a, std::size_t a_row, std::size_t a_inner, const double* b, std::size_t n,
                      double* c, std::size_t inner, bool accumulate) {
  std::size_t j0 = 0;
  for (; j0 + kColTile <= n; j0 += kColTile) {
#if defined(__AVX512F__)
    gemm_tile32_avx512<R>(a, a_row, a_inner, b + j0, n, c + j0, n, inner, accumulate);
#else
    gemm_tile<R, kColTile>(a, a_row, a_inner, b + j0, n, c + j0, n, inner, kColTile, accumulate);
#endif
  }
  if (j0 < n) gemm_tile<R, 0>(a, a_row, a_inner, b + j0, n, c + j0, n, inner, n - j0, accumulate);
}

// Generic driver: `rows` output rows of width n, inner dimension `inner`.
template <bool Parallel>
void gemm_driver(const double* a, std::size_t a_row, std::size_t a_inner, const double* b, double* c,
                 std::size_t rows, std::size_t inner, std::size_t n, bool accumulate) {
  const std::size_t blocks = (rows + kRowBlock - 1) / kRowBlock;
  const bool par = Parallel && rows * inner * n >= kParallelWork && blocks > 1;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t r0 = blk * kRowBlock;
    const std::size_t nr = std::min(kRowBlock, rows - r0);
    const double* ab = a + r0 * a_row;
    double* cb = c + r0 * n;
    switch (nr) {
      case 4: gemm_rows<4>(ab, a_row, a_inner, b, n, cb, inner, accumulate); break;
      case 3: gemm_rows<3>(ab, a_row, a_inner, b, n, cb, inner, accumulate); break;
      case 2: gemm_rows<2>(ab, a_row, a_inner, b, n, cb, inner, accumulate); break;
      default: gemm_rows<1>(ab, a_row, a_inner, b, n, cb, inner, accumulate); break;
    }
  }
}

template <bool Parallel>
void gemm_nn_impl(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                  bool accumulate) {
  gemm_driver<Parallel>(a, k, 1, b, c, m, k, n, accumulate);
}

template <bool Parallel>
void gemm_tn_impl(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                  bool accumulate) {
  // Output row p is column p of a; the inner index walks the m rows of a and b.
  gemm_driver<Parallel>(a, 1, k, b, c, k, m, n, accumulate);
}

template <bool Parallel>
void gemm_nt_impl(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k,
                  bool accumulate) {
  thread_local std::vector<double> bt;
  bt.resize(n * k);
  // Blocked transpose of b into bt[n x k].
  constexpr std::size_t kBlock = 16;
  for (std::size_t p0 = 0; p0 < k; p0 += kBlock) {
    const std::size_t p1 = std::min(k, p0 + kBlock);
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t j1 = std::min(n, j0 + kBlock);
      for (std::size_t j = j0; j < j1; ++j)
        for (std::size_t p = p0; p < p1; ++p) bt[j * k + p] = b[p * n + j];
    }
  }
  gemm_driver<Parallel>(a, n, 1, bt.data(), c, m, n, k, accumulate);
}

template <bool Parallel>
void layer_norm_forward_impl(const double* x, const double* gamma, const double* beta, std::size_t rows,
                             std::size_t d, double eps, double* y, double* mean, double* rstd) {
  const bool par = Parallel && rows * d >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xr[j];
    const double mu = s / static_cast<double>(d);
    double v = 0.0;
    for (std::size_t j = 0; j < d; ++j) v += (xr[j] - mu) * (xr[j] - mu);
    const double rs = 1.0 / std::sqrt(v / static_cast<double>(d) + eps);
    double* yr = y + r * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
    if (mean) mean[r] = mu;
    if (rstd) rstd[r] = rs;
  }
}

template <bool Parallel>
void layer_norm_backward_impl(const double* dy, const double* x, const double* gamma, const double* mean,
                              const double* rstd, std::size_t rows, std::size_t d, double* dx, double* dgamma,
                              double* dbeta) {
  const bool par = Parallel && rows * d >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    const double* dyr = dy + r * d;
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (xr[j] - mean[r]) * rstd[r];
      const double g = dyr[j] * gamma[j];
      sum_g += g;
      sum_gx += g * xhat;
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    double* dxr = dx + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (xr[j] - mean[r]) * rstd[r];
      const double g = dyr[j] * gamma[j];
      dxr[j] += rstd[r] * (g - sum_g * inv_d - xhat * sum_gx * inv_d);
    }
  }
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t j = 0; j < d; ++j) {
    double sg = 0.0;
    double sb = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double xhat = (x[r * d + j] - mean[r]) * rstd[r];
      sg += dy[r * d + j] * xhat;
      sb += dy[r * d + j];
    }
    dgamma[j] += sg;
    dbeta[j] += sb;
  }
}

template <bool Parallel>
void attention_forward_impl(const double* q, const double* keys, const double* values, std::size_t rows,
                            std::size_t offset, std::size_t d, std::size_t heads, double* out, double* probs) {
  const std::size_t dh = d / heads;
  const std::size_t span = offset + rows;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t tasks = heads * rows;
  const bool par = Parallel && rows * span * d >= kParallelWork && tasks > 1;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t task = 0; task < tasks; ++task) {
    const std::size_t h = task / rows;
    const std::size_t t = task % rows;
    const std::size_t horizon = offset + t + 1;
    thread_local std::vector<double> scratch;
    double* p;
    if (probs) {
      p = probs + (h * rows + t) * span;
    } else {
      scratch.resize(span);
      p = scratch.data();
    }
    const double* qt = q + t * d + h * dh;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < horizon; ++j) {
      const double* kj = keys + j * d + h * dh;
      double s = 0.0;
      for (std::size_t x = 0; x < dh; ++x) s = std::fma(qt[x], kj[x], s);
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < horizon; ++j) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < horizon; ++j) p[j] *= inv;
    if (probs) {
      for (std::size_t j = horizon; j < span; ++j) p[j] = 0.0;
    }
    double* ot = out + t * d + h * dh;
    for (std::size_t x = 0; x < dh; ++x) ot[x] = 0.0;
    for (std::size_t j = 0; j < horizon; ++j) {
      const double* vj = values + j * d + h * dh;
      const double pj = p[j];
      for (std::size_t x = 0; x < dh; ++x) ot[x] = std::fma(pj, vj[x], ot[x]);
    }
  }
}

template <bool Parallel>
void attention_backward_impl(const double* dout, const double* q, const double* keys, const double* values,
                             const double* probs, std::size_t rows, std::size_t offset, std::size_t d,
                             std::size_t heads, double* dq, double* dkeys, double* dvalues) {
  const std::size_t dh = d / heads;
  const std::size_t span = offset + rows;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool par = Parallel && rows * span * d >= kParallelWork && heads > 1;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> dp(span);
    for (std::size_t t = 0; t < rows; ++t) {
      const std::size_t horizon = offset + t + 1;
      const double* p = probs + (h * rows + t) * span;
      const double* dot = dout + t * d + h * dh;
      double weighted = 0.0;
      for (std::size_t j = 0; j < horizon; ++j) {
        const double* vj = values + j * d + h * dh;
        double s = 0.0;
        for (std::size_t x = 0; x < dh; ++x) s = std::fma(dot[x], vj[x], s);
        dp[j] = s;
        weighted += p[j] * s;
        double* dvj = dvalues + j * d + h * dh;
        for (std::size_t x = 0; x < dh; ++x) dvj[x] = std::fma(p[j], dot[x], dvj[x]);
      }
      const double* qt = q + t * d + h * dh;
      double* dqt = dq + t * d + h * dh;
      for (std::size_t j = 0; j < horizon; ++j) {
        const double ds = p[j] * (dp[j] - weighted) * scale;
        const double* kj = keys + j * d + h * dh;
        double* dkj = dkeys + j * d + h * dh;
        for (std::size_t x = 0; x < dh; ++x) {
          dqt[x] = std::fma(ds, kj[x], dqt[x]);
          dkj[x] = std::fma(ds, qt[x], dkj[x]);
        }
      }
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <bool Parallel>
void gelu_forward_impl(const double* x, double* y, std::size_t count) {
  const bool par = Parallel && count >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < count; ++i) {
    const double v = x[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
}

template <bool Parallel>
void gelu_backward_impl(const double* dy, const double* x, double* dx, std::size_t count) {
  const bool par = Parallel && count >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < count; ++i) {
    const double v = x[i];
    const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    dx[i] += dy[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
  }
}

}  // namespace

#define CLLM_KERNEL_PAIR(name, params, args)          \
  void name params { name##_impl<true> args; }        \
  namespace serial {                                  \
  void name params { name##_impl<false> args; }       \
  }

CLLM_KERNEL_PAIR(gemm_nn,
                 (const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                  bool accumulate),
                 (a, b, c, m, k, n, accumulate))
CLLM_KERNEL_PAIR(gemm_tn,
                 (const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                  bool accumulate),
                 (a, b, c, m, k, n, accumulate))
CLLM_KERNEL_PAIR(gemm_nt,
                 (const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k,
                  bool accumulate),
                 (a, b, c, m, n, k, accumulate))
CLLM_KERNEL_PAIR(layer_norm_forward,
                 (const double* x, const double* gamma, const double* beta, std::size_t rows, std::size_t d,
                  double eps, double* y, double* mean, double* rstd),
                 (x, gamma, beta, rows, d, eps, y, mean, rstd))
CLLM_KERNEL_PAIR(layer_norm_backward,
                 (const double* dy, const double* x, const double* gamma, const double* mean, const double* rstd,
                  std::size_t rows, std::size_t d, double* dx, double* dgamma, double* dbeta),
                 (dy, x, gamma, mean, rstd, rows, d, dx, dgamma, dbeta))
CLLM_KERNEL_PAIR(attention_forward,
                 (const double* q, const double* keys, const double* values, std::size_t rows, std::size_t offset,
                  std::size_t d, std::size_t heads, double* out, double* probs),
                 (q, keys, values, rows, offset, d, heads, out, probs))
CLLM_KERNEL_PAIR(attention_backward,
                 (const double* dout, const double* q, const double* keys, const double* values,
                  const double* probs, std::size_t rows, std::size_t offset, std::size_t d, std::size_t heads,
                  double* dq, double* dkeys, double* dvalues),
                 (dout, q, keys, values, probs, rows, offset, d, heads, dq, dkeys, dvalues))
CLLM_KERNEL_PAIR(gelu_forward, (const double* x, double* y, std::size_t count), (x, y, count))
CLLM_KERNEL_PAIR(gelu_backward, (const double* dy, const double* x, double* dx, std::size_t count),
                 (dy, x, dx, count))

#undef CLLM_KERNEL_PAIR

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace cllm::kernels
