#include "doctest.h"
#include "sv/tensor.hpp"

using sv::Tensor;

TEST_CASE("tensor shape and indexing") {
  Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.ndim() == 3);
  CHECK(t.dim(-1) == 4);
  t.at({1, 2, 3}) = 5.f;
  CHECK(t.data()[23] == 5.f);
}

TEST_CASE("reshape shares storage, clone does not") {
  Tensor t = Tensor::full({2, 6}, 1.f);
  Tensor r = t.reshaped({3, 4});
  r.data()[0] = 9.f;
  CHECK(t.data()[0] == 9.f);
  Tensor c = t.clone();
  c.data()[0] = 3.f;
  CHECK(t.data()[0] == 9.f);
  CHECK_THROWS(t.reshaped({5, 5}));
}

TEST_CASE("copy semantics share, from() copies input") {
  std::vector<float> v = {1.f, 2.f, 3.f};
  Tensor t = Tensor::from(v, {3});
  v[0] = 7.f;
  CHECK(t.data()[0] == 1.f);
  Tensor u = t;
  u.data()[1] = 8.f;
  CHECK(t.data()[1] == 8.f);
}
