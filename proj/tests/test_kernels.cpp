#include <cmath>
#include <vector>

#include "doctest.h"
#include "sv/kernels.hpp"
#include "sv/rng.hpp"
#include "sv/tensor.hpp"

using namespace sv;

namespace {

// Textbook triple loop in double; the oracle for all gemm variants.
void gemm_ref(int M, int N, int K, const std::vector<float>& a, const std::vector<float>& b,
              std::vector<float>& c, bool at, bool bt) {
  c.assign((size_t)M * N, 0.f);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0.0;
      for (int k = 0; k < K; ++k) {
        const float av = at ? a[(size_t)k * M + i] : a[(size_t)i * K + k];
        const float bv = bt ? b[(size_t)j * K + k] : b[(size_t)k * N + j];
        acc += (double)av * bv;
      }
      c[(size_t)i * N + j] = (float)acc;
    }
}

std::vector<float> random_vec(Rng& rng, size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) x = (float)rng.normal();
  return v;
}

}  // namespace

TEST_CASE("gemm variants match the reference triple loop") {
  Rng rng(7);
  const int M = 17, N = 23, K = 31;
  auto a = random_vec(rng, (size_t)M * K);
  auto b = random_vec(rng, (size_t)K * N);
  std::vector<float> want, got((size_t)M * N, 0.f);

  gemm_ref(M, N, K, a, b, want, false, false);
  kernels::gemm_nn(M, N, K, a.data(), b.data(), got.data(), false);
  for (size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-4));

  auto bt = random_vec(rng, (size_t)N * K);  // stored (N,K), used as B^T
  gemm_ref(M, N, K, a, bt, want, false, true);
  kernels::gemm_nt(M, N, K, a.data(), bt.data(), got.data(), false);
  for (size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-4));

  auto at = random_vec(rng, (size_t)K * M);  // stored (K,M), used as A^T
  gemm_ref(M, N, K, at, b, want, true, false);
  kernels::gemm_tn(M, N, K, at.data(), b.data(), got.data(), false);
  for (size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-4));
}

TEST_CASE("gemm accumulate flag adds instead of overwriting") {
  Rng rng(3);
  const int M = 5, N = 4, K = 6;
  auto a = random_vec(rng, (size_t)M * K);
  auto b = random_vec(rng, (size_t)K * N);
  std::vector<float> base, got((size_t)M * N, 1.f);
  gemm_ref(M, N, K, a, b, base, false, false);
  kernels::gemm_nn(M, N, K, a.data(), b.data(), got.data(), true);
  for (size_t i = 0; i < base.size(); ++i)
    CHECK(got[i] == doctest::Approx(base[i] + 1.f).epsilon(1e-4));
}

TEST_CASE("parallel gemm is bit-identical to the serial reference") {
  Rng rng(11);
  const int M = 64, N = 48, K = 40;
  auto a = random_vec(rng, (size_t)M * K);
  auto b = random_vec(rng, (size_t)K * N);
  std::vector<float> c_par((size_t)M * N), c_ser((size_t)M * N);
  kernels::gemm_nn(M, N, K, a.data(), b.data(), c_par.data(), false);
  kernels::serial::gemm_nn(M, N, K, a.data(), b.data(), c_ser.data(), false);
  for (size_t i = 0; i < c_par.size(); ++i) CHECK(c_par[i] == c_ser[i]);

  kernels::set_parallel(false);
  std::vector<float> c_off((size_t)M * N);
  kernels::gemm_nn(M, N, K, a.data(), b.data(), c_off.data(), false);
  kernels::set_parallel(true);
  for (size_t i = 0; i < c_par.size(); ++i) CHECK(c_par[i] == c_off[i]);
}

TEST_CASE("im2col and col2im are adjoint") {
  // <im2col(x), y> == <x, col2im(y)> for any x, y; catches index bugs in both.
  Rng rng(19);
  const int N = 2, H = 6, W = 5, C = 3, K = 3, stride = 2, pad = 1;
  const int OH = (H + 2 * pad - K) / stride + 1;
  const int OW = (W + 2 * pad - K) / stride + 1;
  const size_t xs = (size_t)N * H * W * C;
  const size_t cs = (size_t)N * OH * OW * K * K * C;
  auto x = random_vec(rng, xs);
  auto y = random_vec(rng, cs);
  std::vector<float> cols(cs), back(xs);
  kernels::im2col(x.data(), N, H, W, C, K, stride, pad, cols.data());
  kernels::col2im(y.data(), N, H, W, C, K, stride, pad, back.data());
  double lhs = 0.0, rhs = 0.0;
  for (size_t i = 0; i < cs; ++i) lhs += (double)cols[i] * y[i];
  for (size_t i = 0; i < xs; ++i) rhs += (double)x[i] * back[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-6));
}

TEST_CASE("deterministic sum matches double accumulation") {
  Rng rng(23);
  auto v = random_vec(rng, 100000);
  double want = 0.0;
  for (float x : v) want += x;
  const double got = kernels::sum(v.data(), (int64_t)v.size());
  CHECK(got == doctest::Approx(want).epsilon(1e-9));

  kernels::set_parallel(false);
  const double got_serial = kernels::sum(v.data(), (int64_t)v.size());
  kernels::set_parallel(true);
  CHECK(got == got_serial);  // bit-identical regardless of threading
}

TEST_CASE("elementwise ops") {
  Rng rng(29);
  auto a = random_vec(rng, 1000);
  auto b = random_vec(rng, 1000);
  std::vector<float> out(1000);
  kernels::add(a.data(), b.data(), out.data(), 1000);
  for (int i = 0; i < 1000; ++i) CHECK(out[i] == a[i] + b[i]);
  kernels::mul(a.data(), b.data(), out.data(), 1000);
  for (int i = 0; i < 1000; ++i) CHECK(out[i] == a[i] * b[i]);
  std::vector<float> acc(b);
  kernels::axpy(2.f, a.data(), acc.data(), 1000);
  for (int i = 0; i < 1000; ++i) CHECK(acc[i] == doctest::Approx(2.f * a[i] + b[i]));
}
