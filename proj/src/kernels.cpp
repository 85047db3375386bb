#include "sv/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cstring>
#include <vector>

namespace sv::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }
int thread_count() { return parallel_enabled() ? omp_get_max_threads() : 1; }

// ---------------------------------------------------------------------------
// GEMM. The serial kernels are the reference; the public entry points run the
// same row-blocked loops under OpenMP. Each thread writes a disjoint row range
// of C and the per-row arithmetic is identical, so results match bit-for-bit.
// ---------------------------------------------------------------------------

namespace serial {

void gemm_nn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    float* ci = C + (int64_t)i * N;
    if (!accumulate) std::memset(ci, 0, sizeof(float) * N);
    const float* ai = A + (int64_t)i * K;
    int k = 0;
    for (; k + 4 <= K; k += 4) {
      const float a0 = ai[k], a1 = ai[k + 1], a2 = ai[k + 2], a3 = ai[k + 3];
      const float* b0 = B + (int64_t)k * N;
      const float* b1 = b0 + N;
      const float* b2 = b1 + N;
      const float* b3 = b2 + N;
#pragma omp simd
      for (int j = 0; j < N; ++j) ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; k < K; ++k) {
      const float a0 = ai[k];
      const float* bk = B + (int64_t)k * N;
#pragma omp simd
      for (int j = 0; j < N; ++j) ci[j] += a0 * bk[j];
    }
  }
}

void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    const float* ai = A + (int64_t)i * K;
    float* ci = C + (int64_t)i * N;
    for (int j = 0; j < N; ++j) {
      const float* bj = B + (int64_t)j * K;
      float acc = 0.f;
#pragma omp simd reduction(+ : acc)
      for (int k = 0; k < K; ++k) acc += ai[k] * bj[k];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void gemm_tn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
  // A is (K x M); C[i,j] = sum_k A[k,i] * B[k,j].
  if (!accumulate)
    for (int i = 0; i < M; ++i) std::memset(C + (int64_t)i * N, 0, sizeof(float) * N);
  for (int k = 0; k < K; ++k) {
    const float* ak = A + (int64_t)k * M;
    const float* bk = B + (int64_t)k * N;
    for (int i = 0; i < M; ++i) {
      const float a = ak[i];
      if (a == 0.f) continue;
      float* ci = C + (int64_t)i * N;
#pragma omp simd
      for (int j = 0; j < N; ++j) ci[j] += a * bk[j];
    }
  }
}

}  // namespace serial

void gemm_nn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
  if (!parallel_enabled() || M < 4) {
    serial::gemm_nn(M, N, K, A, B, C, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i)
    serial::gemm_nn(1, N, K, A + (int64_t)i * K, B, C + (int64_t)i * N, accumulate);
}

void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
  if (!parallel_enabled() || M < 4) {
    serial::gemm_nt(M, N, K, A, B, C, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i)
    serial::gemm_nt(1, N, K, A + (int64_t)i * K, B, C + (int64_t)i * N, accumulate);
}

void gemm_tn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
  if (!parallel_enabled() || M < 4) {
    serial::gemm_tn(M, N, K, A, B, C, accumulate);
    return;
  }
  // Parallelize over output rows i (columns of A); each thread scans K.
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    float* ci = C + (int64_t)i * N;
    if (!accumulate) std::memset(ci, 0, sizeof(float) * N);
    for (int k = 0; k < K; ++k) {
      const float a = A[(int64_t)k * M + i];
      if (a == 0.f) continue;
      const float* bk = B + (int64_t)k * N;
#pragma omp simd
      for (int j = 0; j < N; ++j) ci[j] += a * bk[j];
    }
  }
}

// ---------------------------------------------------------------------------
// im2col / col2im (NHWC)
// ---------------------------------------------------------------------------

void im2col(const float* x, int n, int h, int w, int c, int kernel, int stride, int pad,
            float* cols) {
  const int oh = (h + 2 * pad - kernel) / stride + 1;
  const int ow = (w + 2 * pad - kernel) / stride + 1;
  const int row_len = kernel * kernel * c;
  const int64_t rows = (int64_t)n * oh * ow;
#pragma omp parallel for schedule(static) if (parallel_enabled() && rows > 64)
  for (int64_t r = 0; r < rows; ++r) {
    const int b = (int)(r / (oh * ow));
    const int oy = (int)((r / ow) % oh);
    const int ox = (int)(r % ow);
    float* out = cols + r * row_len;
    for (int ky = 0; ky < kernel; ++ky) {
      const int iy = oy * stride - pad + ky;
      for (int kx = 0; kx < kernel; ++kx) {
        const int ix = ox * stride - pad + kx;
        if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
          std::memset(out, 0, sizeof(float) * c);
        } else {
          std::memcpy(out, x + (((int64_t)b * h + iy) * w + ix) * c, sizeof(float) * c);
        }
        out += c;
      }
    }
  }
}

void col2im(const float* cols, int n, int h, int w, int c, int kernel, int stride, int pad,
            float* dx) {
  const int oh = (h + 2 * pad - kernel) / stride + 1;
  const int ow = (w + 2 * pad - kernel) / stride + 1;
  const int row_len = kernel * kernel * c;
  std::memset(dx, 0, sizeof(float) * (int64_t)n * h * w * c);
  // Each input pixel gathers from the output positions that read it, so the
  // loop over input pixels is race-free and deterministic.
  const int64_t pixels = (int64_t)n * h * w;
#pragma omp parallel for schedule(static) if (parallel_enabled() && pixels > 64)
  for (int64_t p = 0; p < pixels; ++p) {
    const int b = (int)(p / (h * w));
    const int iy = (int)((p / w) % h);
    const int ix = (int)(p % w);
    float* out = dx + p * c;
    for (int ky = 0; ky < kernel; ++ky) {
      const int ty = iy + pad - ky;
      if (ty < 0 || ty % stride) continue;
      const int oy = ty / stride;
      if (oy >= oh) continue;
      for (int kx = 0; kx < kernel; ++kx) {
        const int tx = ix + pad - kx;
        if (tx < 0 || tx % stride) continue;
        const int ox = tx / stride;
        if (ox >= ow) continue;
        const float* src =
            cols + (((int64_t)b * oh + oy) * ow + ox) * row_len + (ky * kernel + kx) * c;
        for (int ch = 0; ch < c; ++ch) out[ch] += src[ch];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

#define SV_ELEMENTWISE(body)                                                     \
  if (parallel_enabled() && n > (int64_t)1 << 14) {                              \
    _Pragma("omp parallel for schedule(static)") for (int64_t i = 0; i < n; ++i) \
        body;                                                                    \
  } else {                                                                       \
    _Pragma("omp simd") for (int64_t i = 0; i < n; ++i) body;                    \
  }

void add(const float* a, const float* b, float* y, int64_t n) { SV_ELEMENTWISE({ y[i] = a[i] + b[i]; }) }
void sub(const float* a, const float* b, float* y, int64_t n) { SV_ELEMENTWISE({ y[i] = a[i] - b[i]; }) }
void mul(const float* a, const float* b, float* y, int64_t n) { SV_ELEMENTWISE({ y[i] = a[i] * b[i]; }) }
void axpy(float alpha, const float* x, float* y, int64_t n) { SV_ELEMENTWISE({ y[i] += alpha * x[i]; }) }
void scale(const float* a, float s, float* y, int64_t n) { SV_ELEMENTWISE({ y[i] = a[i] * s; }) }

#undef SV_ELEMENTWISE

double sum(const float* a, int64_t n) {
  // Fixed 4096-element chunks summed in order: the result does not depend on
  // the thread count.
  const int64_t chunk = 4096;
  const int64_t nchunks = (n + chunk - 1) / chunk;
  std::vector<double> partial(nchunks, 0.0);
#pragma omp parallel for schedule(static) if (parallel_enabled() && nchunks > 4)
  for (int64_t cidx = 0; cidx < nchunks; ++cidx) {
    double s = 0.0;
    const int64_t end = std::min(n, (cidx + 1) * chunk);
    for (int64_t i = cidx * chunk; i < end; ++i) s += a[i];
    partial[cidx] = s;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace sv::kernels
