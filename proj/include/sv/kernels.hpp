#pragma once

#include <cstdint>

namespace sv::kernels {

// Runtime switch between the OpenMP kernels and the serial reference
// implementations. Parallel kernels assign disjoint outputs per thread, so
// both paths produce bit-identical results; the serial path is kept for
// testing and as the baseline in the benchmark tool.
bool parallel_enabled();
void set_parallel(bool on);
int thread_count();

// Row-major GEMM, C (MxN) = A (MxK) * B (KxN), optionally accumulating.
void gemm_nn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);
// C (MxN) = A (MxK) * B^T where B is (NxK).
void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);
// C (MxN) = A^T * B where A is (KxM), B is (KxN).
void gemm_tn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);

namespace serial {
void gemm_nn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);
void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);
void gemm_tn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);
}  // namespace serial

// NHWC im2col for a KxK kernel. cols is (N*OH*OW, K*K*C).
void im2col(const float* x, int n, int h, int w, int c, int kernel, int stride, int pad,
            float* cols);
// Transpose of im2col: scatter column gradients back to the input layout.
void col2im(const float* cols, int n, int h, int w, int c, int kernel, int stride, int pad,
            float* dx);

// y[i] = a[i] op b[i] helpers used by the autodiff layer.
void add(const float* a, const float* b, float* y, int64_t n);
void sub(const float* a, const float* b, float* y, int64_t n);
void mul(const float* a, const float* b, float* y, int64_t n);
void axpy(float alpha, const float* x, float* y, int64_t n);  // y += alpha*x
void scale(const float* a, float s, float* y, int64_t n);
double sum(const float* a, int64_t n);  // deterministic chunked reduction

}  // namespace sv::kernels
