#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "sv/nn.hpp"

using namespace sv;
using namespace sv::nn;

TEST_CASE("registry rejects duplicates and counts scalars") {
  ParamRegistry reg;
  reg.create("a", Tensor::zeros({2, 3}));
  reg.create("b", Tensor::zeros({4}));
  CHECK(reg.scalar_count() == 10);
  CHECK_THROWS(reg.create("a", Tensor::zeros({1})));
  CHECK(reg.has("b"));
  CHECK_THROWS(reg.find("c"));
}

TEST_CASE("value_hash changes with parameter values") {
  ParamRegistry reg;
  Var a = reg.create("a", Tensor::full({3}, 1.f));
  const uint64_t h0 = reg.value_hash();
  a.node()->value.data()[0] = 2.f;
  CHECK(reg.value_hash() != h0);
}

TEST_CASE("attention output matches manual single-head computation") {
  Rng rng(5);
  ParamRegistry reg;
  MultiheadAttention mha(reg, "attn", 4, 1, rng);
  Tensor x({1, 3, 4});
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = (float)rng.normal() * 0.5f;
  Var out = mha.forward(Var::constant(x));

  // Manual: qkv = x Wqkv + b; scores = qk^T/sqrt(4); softmax; out = (w v) Wp + bp.
  const float* W = mha.qkv.w.value().data();   // (4,12)
  const float* bq = mha.qkv.b.value().data();  // (12)
  float q[3][4], k[3][4], v[3][4];
  for (int s = 0; s < 3; ++s)
    for (int j = 0; j < 12; ++j) {
      float acc = bq[j];
      for (int i = 0; i < 4; ++i) acc += x.at({0, s, i}) * W[i * 12 + j];
      (j < 4 ? q[s][j] : j < 8 ? k[s][j - 4] : v[s][j - 8]) = acc;
    }
  float attn_out[3][4];
  for (int s = 0; s < 3; ++s) {
    double sc[3], mx = -1e30;
    for (int u = 0; u < 3; ++u) {
      sc[u] = 0.0;
      for (int d = 0; d < 4; ++d) sc[u] += (double)q[s][d] * k[u][d];
      sc[u] /= 2.0;  // sqrt(Dh)=2
      mx = std::max(mx, sc[u]);
    }
    double z = 0.0;
    for (int u = 0; u < 3; ++u) z += std::exp(sc[u] - mx);
    for (int d = 0; d < 4; ++d) {
      double acc = 0.0;
      for (int u = 0; u < 3; ++u) acc += std::exp(sc[u] - mx) / z * v[u][d];
      attn_out[s][d] = (float)acc;
    }
  }
  const float* Wp = mha.proj.w.value().data();
  const float* bp = mha.proj.b.value().data();
  for (int s = 0; s < 3; ++s)
    for (int j = 0; j < 4; ++j) {
      float acc = bp[j];
      for (int i = 0; i < 4; ++i) acc += attn_out[s][i] * Wp[i * 4 + j];
      CHECK(out.value().at({0, s, j}) == doctest::Approx(acc).epsilon(2e-4));
    }
}

TEST_CASE("attention key mask zeroes masked keys' influence") {
  Rng rng(6);
  ParamRegistry reg;
  MultiheadAttention mha(reg, "attn", 8, 2, rng);
  Tensor x({2, 4, 8});
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = (float)rng.normal();
  Tensor mask = Tensor::full({2, 4}, 1.f);
  mask.at({0, 3}) = 0.f;  // batch 0: last key masked

  Var masked = mha.forward(Var::constant(x), &mask);
  // Changing the masked token's content must not change batch-0 outputs.
  Tensor x2 = x.clone();
  for (int c = 0; c < 8; ++c) x2.at({0, 3, c}) += 10.f;
  Var masked2 = mha.forward(Var::constant(x2), &mask);
  for (int s = 0; s < 4; ++s)
    for (int c = 0; c < 8; ++c) {
      if (s == 3) continue;  // the masked token's own query sees its new value
      CHECK(masked.value().at({0, s, c}) ==
            doctest::Approx(masked2.value().at({0, s, c})).epsilon(1e-5));
    }
  // Batch 1 (no masking) must be unaffected by batch-0 edits.
  for (int s = 0; s < 4; ++s)
    for (int c = 0; c < 8; ++c)
      CHECK(masked.value().at({1, s, c}) == masked2.value().at({1, s, c}));
}

TEST_CASE("fully masked attention row yields zero attention output") {
  Rng rng(7);
  ParamRegistry reg;
  MultiheadAttention mha(reg, "attn", 4, 2, rng);
  Tensor x({1, 2, 4});
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = (float)rng.normal();
  Tensor mask = Tensor::zeros({1, 2});
  Var out = mha.forward(Var::constant(x), &mask);
  // With all keys masked the pre-projection attention result is zero, so the
  // output equals just the projection bias.
  const float* bp = mha.proj.b.value().data();
  for (int s = 0; s < 2; ++s)
    for (int c = 0; c < 4; ++c)
      CHECK(out.value().at({0, s, c}) == doctest::Approx(bp[c]).epsilon(1e-6));
}

TEST_CASE("transformer layer gradcheck") {
  Rng rng(8);
  ParamRegistry reg;
  TransformerLayer layer(reg, "tl", 8, 2, 2, rng);
  Tensor x({2, 3, 8});
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = (float)rng.normal() * 0.5f;
  std::vector<Var> params;
  for (auto& it : reg.items()) params.push_back(it.var);
  Var xin = Var::param(x);
  params.push_back(xin);
  auto loss = [&](std::vector<Var>&) { return mean_all(square(layer.forward(xin))); };
  auto res = svtest::gradcheck(loss, params, 1e-2f, 3e-2);
  CHECK_MESSAGE(res.ok, "max_err=", res.max_err);
}

TEST_CASE("adam converges on a quadratic") {
  ParamRegistry reg;
  Var w = reg.create("w", Tensor::full({4}, 5.f));
  Adam opt(reg, 0.1f);
  for (int i = 0; i < 300; ++i) {
    opt.zero_grad();
    Var loss = mean_all(square(w));
    backward(loss);
    opt.step();
  }
  for (int i = 0; i < 4; ++i) CHECK(std::abs(w.value().data()[i]) < 1e-2f);
}

TEST_CASE("adam state round trip is exact") {
  auto run = [](int split_at) {
    ParamRegistry reg;
    Var w = reg.create("w", Tensor::full({3}, 2.f));
    Adam opt(reg, 0.05f);
    std::vector<std::pair<std::string, Tensor>> saved;
    int64_t saved_t = 0;
    Tensor saved_w;
    for (int i = 0; i < 20; ++i) {
      if (i == split_at) {
        saved = opt.state();
        for (auto& [n, t] : saved) t = t.clone();
        saved_t = opt.step_count();
        saved_w = w.value().clone();
      }
      opt.zero_grad();
      Var loss = mean_all(square(sub(w, Var::constant(Tensor::full({3}, 1.f)))));
      backward(loss);
      opt.step();
    }
    // Replay from the snapshot.
    if (split_at >= 0) {
      ParamRegistry reg2;
      Var w2 = reg2.create("w", saved_w);
      Adam opt2(reg2, 0.05f);
      opt2.load_state(saved, saved_t);
      for (int i = split_at; i < 20; ++i) {
        opt2.zero_grad();
        Var loss = mean_all(square(sub(w2, Var::constant(Tensor::full({3}, 1.f)))));
        backward(loss);
        opt2.step();
      }
      return std::make_pair(w.value().clone(), w2.value().clone());
    }
    return std::make_pair(w.value().clone(), w.value().clone());
  };
  auto [a, b] = run(7);
  for (int i = 0; i < 3; ++i) CHECK(a.data()[i] == b.data()[i]);  // bit-exact resume
}

TEST_CASE("time embedding shape and range") {
  Tensor e = nn::time_embedding({0, 5, 999}, 32);
  CHECK(e.shape() == std::vector<int>{3, 32});
  for (int64_t i = 0; i < e.numel(); ++i) {
    CHECK(e.data()[i] <= 1.f);
    CHECK(e.data()[i] >= -1.f);
  }
  // t=0: cos part 1, sin part 0
  for (int i = 0; i < 16; ++i) {
    CHECK(e.at({0, i}) == doctest::Approx(1.f));
    CHECK(e.at({0, 16 + i}) == doctest::Approx(0.f));
  }
}
