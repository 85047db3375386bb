#include "sv/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

#include "sv/kernels.hpp"

namespace sv {

namespace {

NodePtr new_node(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

bool any_requires(const std::vector<Var>& vs) {
  for (const auto& v : vs)
    if (v.requires_grad()) return true;
  return false;
}

// Attaches parents/backward only when a gradient can actually flow; detached
// subgraphs (e.g. the multi-step denoising target) stay leaf constants.
Var finish(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = new_node(std::move(value));
  if (any_requires(parents)) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
  }
  return Var(n);
}

int64_t outer_size(const std::vector<int>& s, int axis) {
  int64_t o = 1;
  for (int i = 0; i < axis; ++i) o *= s[i];
  return o;
}

int64_t inner_size(const std::vector<int>& s, int axis) {
  int64_t o = 1;
  for (size_t i = axis + 1; i < s.size(); ++i) o *= s[i];
  return o;
}

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw std::invalid_argument("axis out of range");
  return axis;
}

}  // namespace

Var Var::constant(Tensor t) { return Var(new_node(std::move(t))); }

Var Var::param(Tensor t) {
  auto n = new_node(std::move(t));
  n->requires_grad = true;
  return Var(n);
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  return finish(std::move(value), std::move(parents), std::move(backward_fn));
}

void backward(const Var& root) {
  if (!root.defined() || !root.requires_grad())
    throw std::runtime_error("backward: root does not require grad");
  if (root.value().numel() != 1) throw std::runtime_error("backward: root must be scalar");

  // Iterative post-order topological sort.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.node().get(), 0});
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad().fill(1.f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
  }
}

// --- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  if (!same_shape(a.value(), b.value())) throw std::invalid_argument("add: shape mismatch");
  Tensor y(a.value().shape());
  kernels::add(a.value().data(), b.value().data(), y.data(), y.numel());
  return finish(std::move(y), {a, b}, [](Node& n) {
    for (int k = 0; k < 2; ++k)
      if (n.parents[k]->requires_grad)
        kernels::axpy(1.f, n.grad.data(), n.parents[k]->ensure_grad().data(), n.grad.numel());
  });
}

Var sub(const Var& a, const Var& b) {
  if (!same_shape(a.value(), b.value())) throw std::invalid_argument("sub: shape mismatch");
  Tensor y(a.value().shape());
  kernels::sub(a.value().data(), b.value().data(), y.data(), y.numel());
  return finish(std::move(y), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      kernels::axpy(1.f, n.grad.data(), n.parents[0]->ensure_grad().data(), n.grad.numel());
    if (n.parents[1]->requires_grad)
      kernels::axpy(-1.f, n.grad.data(), n.parents[1]->ensure_grad().data(), n.grad.numel());
  });
}

Var mul(const Var& a, const Var& b) {
  if (!same_shape(a.value(), b.value())) throw std::invalid_argument("mul: shape mismatch");
  Tensor y(a.value().shape());
  kernels::mul(a.value().data(), b.value().data(), y.data(), y.numel());
  return finish(std::move(y), {a, b}, [](Node& n) {
    const int64_t m = n.grad.numel();
    if (n.parents[0]->requires_grad) {
      float* g = n.parents[0]->ensure_grad().data();
      const float* bv = n.parents[1]->value.data();
      const float* gy = n.grad.data();
      for (int64_t i = 0; i < m; ++i) g[i] += gy[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      float* g = n.parents[1]->ensure_grad().data();
      const float* av = n.parents[0]->value.data();
      const float* gy = n.grad.data();
      for (int64_t i = 0; i < m; ++i) g[i] += gy[i] * av[i];
    }
  });
}

Var scale(const Var& a, float s) {
  Tensor y(a.value().shape());
  kernels::scale(a.value().data(), s, y.data(), y.numel());
  return finish(std::move(y), {a}, [s](Node& n) {
    kernels::axpy(s, n.grad.data(), n.parents[0]->ensure_grad().data(), n.grad.numel());
  });
}

Var add_scalar(const Var& a, float c) {
  Tensor y(a.value().shape());
  const float* x = a.value().data();
  for (int64_t i = 0; i < y.numel(); ++i) y.data()[i] = x[i] + c;
  return finish(std::move(y), {a}, [](Node& n) {
    kernels::axpy(1.f, n.grad.data(), n.parents[0]->ensure_grad().data(), n.grad.numel());
  });
}

namespace {

template <class F, class DF>
Var unary_op(const Var& a, F f, DF df) {
  Tensor y(a.value().shape());
  const float* x = a.value().data();
  const int64_t m = y.numel();
#pragma omp simd
  for (int64_t i = 0; i < m; ++i) y.data()[i] = f(x[i]);
  Tensor saved = y;  // shares storage
  return finish(std::move(y), {a}, [df, saved](Node& n) {
    float* g = n.parents[0]->ensure_grad().data();
    const float* x = n.parents[0]->value.data();
    const float* yv = saved.data();
    const float* gy = n.grad.data();
    const int64_t m = n.grad.numel();
    for (int64_t i = 0; i < m; ++i) g[i] += gy[i] * df(x[i], yv[i]);
  });
}

inline float sigmoidf(float x) { return 1.f / (1.f + std::exp(-x)); }

}  // namespace

Var relu(const Var& a) {
  return unary_op(
      a, [](float x) { return x > 0.f ? x : 0.f; },
      [](float x, float) { return x > 0.f ? 1.f : 0.f; });
}

Var silu(const Var& a) {
  return unary_op(
      a, [](float x) { return x * sigmoidf(x); },
      [](float x, float) {
        const float s = sigmoidf(x);
        return s * (1.f + x * (1.f - s));
      });
}

Var sigmoid(const Var& a) {
  return unary_op(
      a, [](float x) { return sigmoidf(x); },
      [](float, float y) { return y * (1.f - y); });
}

Var softplus(const Var& a) {
  return unary_op(
      a,
      [](float x) {
        if (x > 20.f) return x;
        if (x < -20.f) return std::exp(x);
        return std::log1p(std::exp(x));
      },
      [](float x, float) { return sigmoidf(x); });
}

Var tanh_op(const Var& a) {
  return unary_op(
      a, [](float x) { return std::tanh(x); },
      [](float, float y) { return 1.f - y * y; });
}

Var gelu(const Var& a) {
  constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  return unary_op(
      a,
      [](float x) { return 0.5f * x * (1.f + std::tanh(c * (x + 0.044715f * x * x * x))); },
      [](float x, float) {
        const float u = c * (x + 0.044715f * x * x * x);
        const float th = std::tanh(u);
        const float du = c * (1.f + 3.f * 0.044715f * x * x);
        return 0.5f * (1.f + th) + 0.5f * x * (1.f - th * th) * du;
      });
}

Var square(const Var& a) {
  return unary_op(
      a, [](float x) { return x * x; },
      [](float x, float) { return 2.f * x; });
}

Var detach(const Var& a) { return Var::constant(a.value()); }

// --- shape -------------------------------------------------------------------

Var reshape(const Var& a, std::vector<int> shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return finish(std::move(y), {a}, [](Node& n) {
    kernels::axpy(1.f, n.grad.data(), n.parents[0]->ensure_grad().data(), n.grad.numel());
  });
}

namespace {

void permute_copy(const Tensor& src, const std::vector<int>& dims, Tensor& dst) {
  const auto& s = src.shape();
  const int nd = (int)s.size();
  std::vector<int64_t> src_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) src_strides[i] = src_strides[i + 1] * s[i + 1];
  std::vector<int64_t> dst_src_stride(nd);
  std::vector<int> dst_shape(nd);
  for (int i = 0; i < nd; ++i) {
    dst_shape[i] = s[dims[i]];
    dst_src_stride[i] = src_strides[dims[i]];
  }
  const int64_t total = src.numel();
  const float* sp = src.data();
  float* dp = dst.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && total > (1 << 15))
  for (int64_t o = 0; o < total; ++o) {
    int64_t rem = o, off = 0;
    for (int i = nd - 1; i >= 0; --i) {
      const int64_t idx = rem % dst_shape[i];
      rem /= dst_shape[i];
      off += idx * dst_src_stride[i];
    }
    dp[o] = sp[off];
  }
}

}  // namespace

Var permute(const Var& a, const std::vector<int>& dims) {
  const auto& s = a.value().shape();
  if (dims.size() != s.size()) throw std::invalid_argument("permute: rank mismatch");
  std::vector<int> out_shape(dims.size());
  for (size_t i = 0; i < dims.size(); ++i) out_shape[i] = s[dims[i]];
  Tensor y(out_shape);
  permute_copy(a.value(), dims, y);
  std::vector<int> inv(dims.size());
  for (size_t i = 0; i < dims.size(); ++i) inv[dims[i]] = (int)i;
  return finish(std::move(y), {a}, [inv](Node& n) {
    Tensor gsrc(n.parents[0]->value.shape());
    permute_copy(n.grad, inv, gsrc);
    kernels::axpy(1.f, gsrc.data(), n.parents[0]->ensure_grad().data(), gsrc.numel());
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: empty");
  const auto& s0 = parts[0].value().shape();
  const int nd = (int)s0.size();
  axis = normalize_axis(axis, nd);
  std::vector<int> out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) out_shape[axis] += p.value().shape()[axis];
  Tensor y(out_shape);
  const int64_t outer = outer_size(out_shape, axis);
  const int64_t inner = inner_size(out_shape, axis);
  std::vector<int64_t> offsets(parts.size());
  int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    offsets[k] = off;
    off += (int64_t)parts[k].value().shape()[axis] * inner;
  }
  const int64_t out_stride = (int64_t)out_shape[axis] * inner;
  for (size_t k = 0; k < parts.size(); ++k) {
    const int64_t blk = (int64_t)parts[k].value().shape()[axis] * inner;
    const float* sp = parts[k].value().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(y.data() + o * out_stride + offsets[k], sp + o * blk, sizeof(float) * blk);
  }
  std::vector<Var> vparts = parts;
  return finish(std::move(y), std::move(vparts),
                [axis, offsets, out_stride, outer, inner](Node& n) {
                  for (size_t k = 0; k < n.parents.size(); ++k) {
                    if (!n.parents[k]->requires_grad) continue;
                    Tensor& g = n.parents[k]->ensure_grad();
                    const int64_t blk = (int64_t)n.parents[k]->value.shape()[axis] * inner;
                    for (int64_t o = 0; o < outer; ++o) {
                      const float* src = n.grad.data() + o * out_stride + offsets[k];
                      float* dst = g.data() + o * blk;
                      for (int64_t i = 0; i < blk; ++i) dst[i] += src[i];
                    }
                  }
                });
}

Var slice(const Var& a, int axis, int start, int len) {
  const auto& s = a.value().shape();
  axis = normalize_axis(axis, (int)s.size());
  if (start < 0 || start + len > s[axis]) throw std::invalid_argument("slice: out of range");
  std::vector<int> out_shape = s;
  out_shape[axis] = len;
  Tensor y(out_shape);
  const int64_t outer = outer_size(s, axis);
  const int64_t inner = inner_size(s, axis);
  const int64_t in_stride = (int64_t)s[axis] * inner;
  const int64_t out_stride = (int64_t)len * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(y.data() + o * out_stride, a.value().data() + o * in_stride + start * inner,
                sizeof(float) * out_stride);
  return finish(std::move(y), {a}, [axis, start, outer, inner, in_stride, out_stride](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      const float* src = n.grad.data() + o * out_stride;
      float* dst = g.data() + o * in_stride + start * inner;
      for (int64_t i = 0; i < out_stride; ++i) dst[i] += src[i];
    }
  });
}

// --- linear algebra ----------------------------------------------------------

namespace {

struct MatmulDims {
  int64_t batch;
  int M, K, N;
  bool b_broadcast;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) throw std::invalid_argument("matmul: rank < 2");
  MatmulDims d;
  d.M = sa[sa.size() - 2];
  d.K = sa[sa.size() - 1];
  d.batch = a.numel() / ((int64_t)d.M * d.K);
  if (sb.size() == 2) {
    d.b_broadcast = true;
    if (sb[0] != d.K) throw std::invalid_argument("matmul: inner dim mismatch");
    d.N = sb[1];
  } else {
    d.b_broadcast = false;
    if (sb[sb.size() - 2] != d.K) throw std::invalid_argument("matmul: inner dim mismatch");
    d.N = sb[sb.size() - 1];
    const int64_t bb = b.numel() / ((int64_t)d.K * d.N);
    if (bb != d.batch) throw std::invalid_argument("matmul: batch mismatch");
  }
  return d;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const MatmulDims d = matmul_dims(a.value(), b.value());
  std::vector<int> out_shape(a.value().shape().begin(), a.value().shape().end() - 1);
  out_shape.back() = d.M;
  out_shape.push_back(d.N);
  Tensor y(out_shape);
  const float* ap = a.value().data();
  const float* bp = b.value().data();
  for (int64_t i = 0; i < d.batch; ++i) {
    kernels::gemm_nn(d.M, d.N, d.K, ap + i * (int64_t)d.M * d.K,
                     d.b_broadcast ? bp : bp + i * (int64_t)d.K * d.N,
                     y.data() + i * (int64_t)d.M * d.N, false);
  }
  return finish(std::move(y), {a, b}, [d](Node& n) {
    const float* av = n.parents[0]->value.data();
    const float* bv = n.parents[1]->value.data();
    const float* gy = n.grad.data();
    if (n.parents[0]->requires_grad) {
      float* ga = n.parents[0]->ensure_grad().data();
      for (int64_t i = 0; i < d.batch; ++i)
        kernels::gemm_nt(d.M, d.K, d.N, gy + i * (int64_t)d.M * d.N,
                         d.b_broadcast ? bv : bv + i * (int64_t)d.K * d.N,
                         ga + i * (int64_t)d.M * d.K, true);
    }
    if (n.parents[1]->requires_grad) {
      float* gb = n.parents[1]->ensure_grad().data();
      for (int64_t i = 0; i < d.batch; ++i)
        kernels::gemm_tn(d.K, d.N, d.M, av + i * (int64_t)d.M * d.K,
                         gy + i * (int64_t)d.M * d.N,
                         d.b_broadcast ? gb : gb + i * (int64_t)d.K * d.N, true);
    }
  });
}

Var add_bias(const Var& x, const Var& b) {
  const int C = b.value().dim(0);
  if (x.value().dim(-1) != C) throw std::invalid_argument("add_bias: dim mismatch");
  Tensor y(x.value().shape());
  const int64_t rows = x.value().numel() / C;
  const float* xp = x.value().data();
  const float* bp = b.value().data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && rows > 256)
  for (int64_t r = 0; r < rows; ++r) {
    const float* xi = xp + r * C;
    float* yi = y.data() + r * C;
#pragma omp simd
    for (int c = 0; c < C; ++c) yi[c] = xi[c] + bp[c];
  }
  return finish(std::move(y), {x, b}, [C, rows](Node& n) {
    if (n.parents[0]->requires_grad)
      kernels::axpy(1.f, n.grad.data(), n.parents[0]->ensure_grad().data(), n.grad.numel());
    if (n.parents[1]->requires_grad) {
      float* gb = n.parents[1]->ensure_grad().data();
      const float* gy = n.grad.data();
      for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < C; ++c) gb[c] += gy[r * C + c];
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const int I = w.value().dim(0);
  const int O = w.value().dim(1);
  if (x.value().dim(-1) != I) throw std::invalid_argument("linear: dim mismatch");
  std::vector<int> out_shape = x.value().shape();
  out_shape.back() = O;
  const int64_t R = x.value().numel() / I;
  Tensor y(out_shape);
  kernels::gemm_nn((int)R, O, I, x.value().data(), w.value().data(), y.data(), false);
  if (b.defined()) {
    const float* bp = b.value().data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && R > 256)
    for (int64_t r = 0; r < R; ++r) {
      float* yi = y.data() + r * O;
#pragma omp simd
      for (int c = 0; c < O; ++c) yi[c] += bp[c];
    }
  }
  std::vector<Var> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return finish(std::move(y), std::move(parents), [I, O, R](Node& n) {
    const float* gy = n.grad.data();
    if (n.parents[0]->requires_grad)
      kernels::gemm_nt((int)R, I, O, gy, n.parents[1]->value.data(),
                       n.parents[0]->ensure_grad().data(), true);
    if (n.parents[1]->requires_grad)
      kernels::gemm_tn(I, O, (int)R, n.parents[0]->value.data(), gy,
                       n.parents[1]->ensure_grad().data(), true);
    if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
      float* gb = n.parents[2]->ensure_grad().data();
      for (int64_t r = 0; r < R; ++r)
        for (int c = 0; c < O; ++c) gb[c] += gy[r * O + c];
    }
  });
}

// --- reductions ----------------------------------------------------------------

Var sum_all(const Var& a) {
  Tensor y = Tensor::scalar((float)kernels::sum(a.value().data(), a.value().numel()));
  return finish(std::move(y), {a}, [](Node& n) {
    const float g = n.grad.data()[0];
    float* gp = n.parents[0]->ensure_grad().data();
    const int64_t m = n.parents[0]->value.numel();
    for (int64_t i = 0; i < m; ++i) gp[i] += g;
  });
}

Var mean_all(const Var& a) {
  const int64_t m = a.value().numel();
  Tensor y = Tensor::scalar((float)(kernels::sum(a.value().data(), m) / (double)m));
  return finish(std::move(y), {a}, [m](Node& n) {
    const float g = n.grad.data()[0] / (float)m;
    float* gp = n.parents[0]->ensure_grad().data();
    for (int64_t i = 0; i < m; ++i) gp[i] += g;
  });
}

Var sum_axis(const Var& a, int axis) {
  const auto& s = a.value().shape();
  axis = normalize_axis(axis, (int)s.size());
  std::vector<int> out_shape;
  for (int i = 0; i < (int)s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor y(out_shape);
  const int64_t outer = outer_size(s, axis);
  const int64_t inner = inner_size(s, axis);
  const int ax = s[axis];
  const float* xp = a.value().data();
  for (int64_t o = 0; o < outer; ++o) {
    float* yo = y.data() + o * inner;
    std::memset(yo, 0, sizeof(float) * inner);
    for (int k = 0; k < ax; ++k) {
      const float* xo = xp + (o * ax + k) * inner;
      for (int64_t i = 0; i < inner; ++i) yo[i] += xo[i];
    }
  }
  return finish(std::move(y), {a}, [outer, inner, ax](Node& n) {
    float* gp = n.parents[0]->ensure_grad().data();
    const float* gy = n.grad.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int k = 0; k < ax; ++k) {
        float* go = gp + (o * ax + k) * inner;
        const float* gyo = gy + o * inner;
        for (int64_t i = 0; i < inner; ++i) go[i] += gyo[i];
      }
  });
}

Var mse(const Var& a, const Var& b) {
  if (!same_shape(a.value(), b.value())) throw std::invalid_argument("mse: shape mismatch");
  const int64_t m = a.value().numel();
  const float* ap = a.value().data();
  const float* bp = b.value().data();
  double acc = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double d = (double)ap[i] - bp[i];
    acc += d * d;
  }
  Tensor y = Tensor::scalar((float)(acc / (double)m));
  return finish(std::move(y), {a, b}, [m](Node& n) {
    const float g = 2.f * n.grad.data()[0] / (float)m;
    const float* av = n.parents[0]->value.data();
    const float* bv = n.parents[1]->value.data();
    if (n.parents[0]->requires_grad) {
      float* gp = n.parents[0]->ensure_grad().data();
      for (int64_t i = 0; i < m; ++i) gp[i] += g * (av[i] - bv[i]);
    }
    if (n.parents[1]->requires_grad) {
      float* gp = n.parents[1]->ensure_grad().data();
      for (int64_t i = 0; i < m; ++i) gp[i] -= g * (av[i] - bv[i]);
    }
  });
}

// --- nn building blocks ---------------------------------------------------------

namespace {

Var softmax_impl(const Var& scores, const Tensor* mask) {
  const auto& s = scores.value().shape();
  const int S = s.back();
  const int64_t rows = scores.value().numel() / S;
  Tensor y(scores.value().shape());
  const float* xp = scores.value().data();
  const float* mp = mask ? mask->data() : nullptr;
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && rows > 128)
  for (int64_t r = 0; r < rows; ++r) {
    const float* xi = xp + r * S;
    const float* mi = mp ? mp + r * S : nullptr;
    float* yi = y.data() + r * S;
    float mx = -std::numeric_limits<float>::infinity();
    for (int i = 0; i < S; ++i)
      if (!mi || mi[i] > 0.5f) mx = std::max(mx, xi[i]);
    if (!std::isfinite(mx)) {  // fully masked row
      std::memset(yi, 0, sizeof(float) * S);
      continue;
    }
    double sum = 0.0;
    for (int i = 0; i < S; ++i) {
      const float e = (!mi || mi[i] > 0.5f) ? std::exp(xi[i] - mx) : 0.f;
      yi[i] = e;
      sum += e;
    }
    const float inv = (float)(1.0 / sum);
    for (int i = 0; i < S; ++i) yi[i] *= inv;
  }
  Tensor saved = y;
  return finish(std::move(y), {scores}, [S, rows, saved](Node& n) {
    float* gp = n.parents[0]->ensure_grad().data();
    const float* gy = n.grad.data();
    const float* w = saved.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && rows > 128)
    for (int64_t r = 0; r < rows; ++r) {
      const float* gyi = gy + r * S;
      const float* wi = w + r * S;
      float* gi = gp + r * S;
      double dot = 0.0;
      for (int i = 0; i < S; ++i) dot += (double)gyi[i] * wi[i];
      for (int i = 0; i < S; ++i) gi[i] += wi[i] * (gyi[i] - (float)dot);
    }
  });
}

}  // namespace

Var softmax_lastdim(const Var& scores) { return softmax_impl(scores, nullptr); }

Var masked_softmax(const Var& scores, const Tensor& mask) {
  if (!same_shape(scores.value(), mask)) throw std::invalid_argument("masked_softmax: mask shape");
  return softmax_impl(scores, &mask);
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const int C = x.value().dim(-1);
  const int64_t rows = x.value().numel() / C;
  Tensor y(x.value().shape());
  Tensor stats({(int)rows, 2});  // mean, inv_std
  const float* xp = x.value().data();
  const float* gm = gamma.value().data();
  const float* bt = beta.value().data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && rows > 128)
  for (int64_t r = 0; r < rows; ++r) {
    const float* xi = xp + r * C;
    double mu = 0.0;
    for (int i = 0; i < C; ++i) mu += xi[i];
    mu /= C;
    double var = 0.0;
    for (int i = 0; i < C; ++i) {
      const double d = xi[i] - mu;
      var += d * d;
    }
    var /= C;
    const float inv = (float)(1.0 / std::sqrt(var + eps));
    stats.data()[r * 2] = (float)mu;
    stats.data()[r * 2 + 1] = inv;
    float* yi = y.data() + r * C;
    for (int i = 0; i < C; ++i) yi[i] = ((xi[i] - (float)mu) * inv) * gm[i] + bt[i];
  }
  return finish(std::move(y), {x, gamma, beta}, [C, rows, stats](Node& n) {
    const float* gy = n.grad.data();
    const float* xp = n.parents[0]->value.data();
    const float* gm = n.parents[1]->value.data();
    const bool need_dx = n.parents[0]->requires_grad;
    float* dx = need_dx ? n.parents[0]->ensure_grad().data() : nullptr;
    float* dgm = n.parents[1]->requires_grad ? n.parents[1]->ensure_grad().data() : nullptr;
    float* dbt = n.parents[2]->requires_grad ? n.parents[2]->ensure_grad().data() : nullptr;
    for (int64_t r = 0; r < rows; ++r) {
      const float mu = stats.data()[r * 2];
      const float inv = stats.data()[r * 2 + 1];
      const float* xi = xp + r * C;
      const float* gyi = gy + r * C;
      if (dgm || dbt) {
        for (int i = 0; i < C; ++i) {
          const float xhat = (xi[i] - mu) * inv;
          if (dgm) dgm[i] += gyi[i] * xhat;
          if (dbt) dbt[i] += gyi[i];
        }
      }
      if (need_dx) {
        double mean_dy = 0.0, mean_dyx = 0.0;
        for (int i = 0; i < C; ++i) {
          const float dyh = gyi[i] * gm[i];
          const float xhat = (xi[i] - mu) * inv;
          mean_dy += dyh;
          mean_dyx += (double)dyh * xhat;
        }
        mean_dy /= C;
        mean_dyx /= C;
        float* dxi = dx + r * C;
        for (int i = 0; i < C; ++i) {
          const float dyh = gyi[i] * gm[i];
          const float xhat = (xi[i] - mu) * inv;
          dxi[i] += inv * (dyh - (float)mean_dy - xhat * (float)mean_dyx);
        }
      }
    }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
  const auto& s = x.value().shape();
  if (s.size() != 4) throw std::invalid_argument("group_norm: expects NHWC");
  const int N = s[0], H = s[1], W = s[2], C = s[3];
  if (C % groups) throw std::invalid_argument("group_norm: C % groups != 0");
  const int cg = C / groups;
  const int64_t gsize = (int64_t)H * W * cg;
  Tensor y(x.value().shape());
  Tensor stats({N, groups, 2});
  const float* xp = x.value().data();
  const float* gm = gamma.value().data();
  const float* bt = beta.value().data();
#pragma omp parallel for collapse(2) schedule(static) if (kernels::parallel_enabled() && N * groups > 2)
  for (int n0 = 0; n0 < N; ++n0)
    for (int g = 0; g < groups; ++g) {
      double mu = 0.0;
      for (int64_t hw = 0; hw < (int64_t)H * W; ++hw) {
        const float* px = xp + ((int64_t)n0 * H * W + hw) * C + g * cg;
        for (int c = 0; c < cg; ++c) mu += px[c];
      }
      mu /= gsize;
      double var = 0.0;
      for (int64_t hw = 0; hw < (int64_t)H * W; ++hw) {
        const float* px = xp + ((int64_t)n0 * H * W + hw) * C + g * cg;
        for (int c = 0; c < cg; ++c) {
          const double d = px[c] - mu;
          var += d * d;
        }
      }
      var /= gsize;
      const float inv = (float)(1.0 / std::sqrt(var + eps));
      stats.data()[(n0 * groups + g) * 2] = (float)mu;
      stats.data()[(n0 * groups + g) * 2 + 1] = inv;
      for (int64_t hw = 0; hw < (int64_t)H * W; ++hw) {
        const float* px = xp + ((int64_t)n0 * H * W + hw) * C + g * cg;
        float* py = y.data() + ((int64_t)n0 * H * W + hw) * C + g * cg;
        for (int c = 0; c < cg; ++c)
          py[c] = ((px[c] - (float)mu) * inv) * gm[g * cg + c] + bt[g * cg + c];
      }
    }
  return finish(std::move(y), {x, gamma, beta}, [N, H, W, C, groups, cg, gsize, stats](Node& n) {
    const float* gy = n.grad.data();
    const float* xp = n.parents[0]->value.data();
    const float* gm = n.parents[1]->value.data();
    const bool need_dx = n.parents[0]->requires_grad;
    float* dx = need_dx ? n.parents[0]->ensure_grad().data() : nullptr;
    float* dgm = n.parents[1]->requires_grad ? n.parents[1]->ensure_grad().data() : nullptr;
    float* dbt = n.parents[2]->requires_grad ? n.parents[2]->ensure_grad().data() : nullptr;
    for (int n0 = 0; n0 < N; ++n0)
      for (int g = 0; g < groups; ++g) {
        const float mu = stats.data()[(n0 * groups + g) * 2];
        const float inv = stats.data()[(n0 * groups + g) * 2 + 1];
        double mean_dy = 0.0, mean_dyx = 0.0;
        for (int64_t hw = 0; hw < (int64_t)H * W; ++hw) {
          const int64_t base = ((int64_t)n0 * H * W + hw) * C + g * cg;
          for (int c = 0; c < cg; ++c) {
            const float xhat = (xp[base + c] - mu) * inv;
            const float dyh = gy[base + c] * gm[g * cg + c];
            mean_dy += dyh;
            mean_dyx += (double)dyh * xhat;
            if (dgm) dgm[g * cg + c] += gy[base + c] * xhat;
            if (dbt) dbt[g * cg + c] += gy[base + c];
          }
        }
        if (!need_dx) continue;
        mean_dy /= gsize;
        mean_dyx /= gsize;
        for (int64_t hw = 0; hw < (int64_t)H * W; ++hw) {
          const int64_t base = ((int64_t)n0 * H * W + hw) * C + g * cg;
          for (int c = 0; c < cg; ++c) {
            const float xhat = (xp[base + c] - mu) * inv;
            const float dyh = gy[base + c] * gm[g * cg + c];
            dx[base + c] += inv * (dyh - (float)mean_dy - xhat * (float)mean_dyx);
          }
        }
      }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const auto& sx = x.value().shape();
  const auto& sw = w.value().shape();
  if (sx.size() != 4 || sw.size() != 4) throw std::invalid_argument("conv2d: rank");
  const int N = sx[0], H = sx[1], W = sx[2], C = sx[3];
  const int K = sw[0], Cin = sw[2], Cout = sw[3];
  if (sw[1] != K || Cin != C) throw std::invalid_argument("conv2d: weight shape");
  const int OH = (H + 2 * pad - K) / stride + 1;
  const int OW = (W + 2 * pad - K) / stride + 1;
  const int64_t rows = (int64_t)N * OH * OW;
  const int row_len = K * K * C;
  Tensor cols({(int)rows, row_len});
  kernels::im2col(x.value().data(), N, H, W, C, K, stride, pad, cols.data());
  Tensor y({N, OH, OW, Cout});
  kernels::gemm_nn((int)rows, Cout, row_len,
                   cols.data(), w.value().data(), y.data(), false);
  if (b.defined()) {
    const float* bp = b.value().data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && rows > 256)
    for (int64_t r = 0; r < rows; ++r) {
      float* yi = y.data() + r * Cout;
#pragma omp simd
      for (int c = 0; c < Cout; ++c) yi[c] += bp[c];
    }
  }
  std::vector<Var> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  // im2col is recomputed in backward; parents hold the input tensor anyway.
  return finish(std::move(y), std::move(parents),
                [N, H, W, C, K, Cout, stride, pad, rows, row_len](Node& n) {
                  const float* gy = n.grad.data();
                  Tensor cols({(int)rows, row_len});
                  kernels::im2col(n.parents[0]->value.data(), N, H, W, C, K, stride, pad,
                                  cols.data());
                  if (n.parents[1]->requires_grad)
                    kernels::gemm_tn(row_len, Cout, (int)rows, cols.data(), gy,
                                     n.parents[1]->ensure_grad().data(), true);
                  if (n.parents[0]->requires_grad) {
                    Tensor dcols({(int)rows, row_len});
                    kernels::gemm_nt((int)rows, row_len, Cout, gy, n.parents[1]->value.data(),
                                     dcols.data(), false);
                    Tensor dx({N, H, W, C});
                    kernels::col2im(dcols.data(), N, H, W, C, K, stride, pad, dx.data());
                    kernels::axpy(1.f, dx.data(), n.parents[0]->ensure_grad().data(), dx.numel());
                  }
                  if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
                    float* gb = n.parents[2]->ensure_grad().data();
                    for (int64_t r = 0; r < rows; ++r)
                      for (int c = 0; c < Cout; ++c) gb[c] += gy[r * Cout + c];
                  }
                });
}

Var upsample_nearest2x(const Var& x) {
  const auto& s = x.value().shape();
  const int N = s[0], H = s[1], W = s[2], C = s[3];
  Tensor y({N, H * 2, W * 2, C});
  const float* xp = x.value().data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && N * H > 32)
  for (int64_t nh = 0; nh < (int64_t)N * 2 * H; ++nh) {
    const int n0 = (int)(nh / (2 * H));
    const int oy = (int)(nh % (2 * H));
    for (int ox = 0; ox < 2 * W; ++ox) {
      const float* src = xp + (((int64_t)n0 * H + oy / 2) * W + ox / 2) * C;
      float* dst = y.data() + (((int64_t)n0 * 2 * H + oy) * 2 * W + ox) * C;
      std::memcpy(dst, src, sizeof(float) * C);
    }
  }
  return finish(std::move(y), {x}, [N, H, W, C](Node& n) {
    float* dx = n.parents[0]->ensure_grad().data();
    const float* gy = n.grad.data();
    for (int n0 = 0; n0 < N; ++n0)
      for (int oy = 0; oy < 2 * H; ++oy)
        for (int ox = 0; ox < 2 * W; ++ox) {
          float* dst = dx + (((int64_t)n0 * H + oy / 2) * W + ox / 2) * C;
          const float* src = gy + (((int64_t)n0 * 2 * H + oy) * 2 * W + ox) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
        }
  });
}

namespace {

struct LerpWeight {
  int i0, i1;
  float w0, w1;
};

LerpWeight lerp_weight(int out, int in, int o) {
  // align_corners=false area mapping, clamped to the valid range.
  float src = ((float)o + 0.5f) * (float)in / (float)out - 0.5f;
  src = std::clamp(src, 0.f, (float)(in - 1));
  LerpWeight lw;
  lw.i0 = (int)std::floor(src);
  lw.i1 = std::min(lw.i0 + 1, in - 1);
  lw.w1 = src - (float)lw.i0;
  lw.w0 = 1.f - lw.w1;
  return lw;
}

}  // namespace

Var upsample_bilinear(const Var& x, int oh, int ow) {
  const auto& s = x.value().shape();
  const int N = s[0], H = s[1], W = s[2], C = s[3];
  Tensor y({N, oh, ow, C});
  std::vector<LerpWeight> wy(oh), wx(ow);
  for (int i = 0; i < oh; ++i) wy[i] = lerp_weight(oh, H, i);
  for (int i = 0; i < ow; ++i) wx[i] = lerp_weight(ow, W, i);
  const float* xp = x.value().data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && N * oh > 32)
  for (int64_t no = 0; no < (int64_t)N * oh; ++no) {
    const int n0 = (int)(no / oh);
    const int oy = (int)(no % oh);
    const auto& ly = wy[oy];
    for (int ox = 0; ox < ow; ++ox) {
      const auto& lx = wx[ox];
      const float* r00 = xp + (((int64_t)n0 * H + ly.i0) * W + lx.i0) * C;
      const float* r01 = xp + (((int64_t)n0 * H + ly.i0) * W + lx.i1) * C;
      const float* r10 = xp + (((int64_t)n0 * H + ly.i1) * W + lx.i0) * C;
      const float* r11 = xp + (((int64_t)n0 * H + ly.i1) * W + lx.i1) * C;
      float* dst = y.data() + (((int64_t)n0 * oh + oy) * ow + ox) * C;
      for (int c = 0; c < C; ++c)
        dst[c] = ly.w0 * (lx.w0 * r00[c] + lx.w1 * r01[c]) +
                 ly.w1 * (lx.w0 * r10[c] + lx.w1 * r11[c]);
    }
  }
  return finish(std::move(y), {x}, [N, H, W, C, oh, ow, wy, wx](Node& n) {
    float* dx = n.parents[0]->ensure_grad().data();
    const float* gy = n.grad.data();
    for (int n0 = 0; n0 < N; ++n0)
      for (int oy = 0; oy < oh; ++oy) {
        const auto& ly = wy[oy];
        for (int ox = 0; ox < ow; ++ox) {
          const auto& lx = wx[ox];
          const float* src = gy + (((int64_t)n0 * oh + oy) * ow + ox) * C;
          float* d00 = dx + (((int64_t)n0 * H + ly.i0) * W + lx.i0) * C;
          float* d01 = dx + (((int64_t)n0 * H + ly.i0) * W + lx.i1) * C;
          float* d10 = dx + (((int64_t)n0 * H + ly.i1) * W + lx.i0) * C;
          float* d11 = dx + (((int64_t)n0 * H + ly.i1) * W + lx.i1) * C;
          for (int c = 0; c < C; ++c) {
            d00[c] += ly.w0 * lx.w0 * src[c];
            d01[c] += ly.w0 * lx.w1 * src[c];
            d10[c] += ly.w1 * lx.w0 * src[c];
            d11[c] += ly.w1 * lx.w1 * src[c];
          }
        }
      }
  });
}

Var avg_pool(const Var& x, int k) {
  const auto& s = x.value().shape();
  const int N = s[0], H = s[1], W = s[2], C = s[3];
  if (H % k || W % k) throw std::invalid_argument("avg_pool: size not divisible");
  const int OH = H / k, OW = W / k;
  Tensor y({N, OH, OW, C});
  const float* xp = x.value().data();
  const float inv = 1.f / (float)(k * k);
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && N * OH > 32)
  for (int64_t no = 0; no < (int64_t)N * OH; ++no) {
    const int n0 = (int)(no / OH);
    const int oy = (int)(no % OH);
    for (int ox = 0; ox < OW; ++ox) {
      float* dst = y.data() + (((int64_t)n0 * OH + oy) * OW + ox) * C;
      std::memset(dst, 0, sizeof(float) * C);
      for (int dy = 0; dy < k; ++dy)
        for (int dxk = 0; dxk < k; ++dxk) {
          const float* src = xp + (((int64_t)n0 * H + oy * k + dy) * W + ox * k + dxk) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
        }
      for (int c = 0; c < C; ++c) dst[c] *= inv;
    }
  }
  return finish(std::move(y), {x}, [N, H, W, C, k, OH, OW, inv](Node& n) {
    float* dx = n.parents[0]->ensure_grad().data();
    const float* gy = n.grad.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && N * H > 32)
    for (int64_t nh = 0; nh < (int64_t)N * H; ++nh) {
      const int n0 = (int)(nh / H);
      const int iy = (int)(nh % H);
      for (int ix = 0; ix < W; ++ix) {
        const float* src = gy + (((int64_t)n0 * OH + iy / k) * OW + ix / k) * C;
        float* dst = dx + (((int64_t)n0 * H + iy) * W + ix) * C;
        for (int c = 0; c < C; ++c) dst[c] += src[c] * inv;
      }
    }
  });
}

Var grid_sample(const Var& feat, const Tensor& coords, const Tensor& valid) {
  const auto& s = feat.value().shape();
  if (s.size() != 3) throw std::invalid_argument("grid_sample: feat must be (H,W,C)");
  const int H = s[0], W = s[1], C = s[2];
  const int P = coords.dim(0);
  Tensor y({P, C});
  const float* fp = feat.value().data();
  const float* cp = coords.data();
  const float* vp = valid.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && P > 256)
  for (int p = 0; p < P; ++p) {
    float* out = y.data() + (int64_t)p * C;
    const float gx = cp[p * 2], gy = cp[p * 2 + 1];
    if (vp[p] < 0.5f || gx < 0.f || gy < 0.f || gx > (float)(W - 1) || gy > (float)(H - 1)) {
      std::memset(out, 0, sizeof(float) * C);
      continue;
    }
    const int x0 = std::min((int)gx, W - 2 >= 0 ? W - 2 : 0);
    const int y0 = std::min((int)gy, H - 2 >= 0 ? H - 2 : 0);
    const float ax = gx - (float)x0, ay = gy - (float)y0;
    const float* f00 = fp + (((int64_t)y0) * W + x0) * C;
    const float* f01 = fp + (((int64_t)y0) * W + std::min(x0 + 1, W - 1)) * C;
    const float* f10 = fp + (((int64_t)std::min(y0 + 1, H - 1)) * W + x0) * C;
    const float* f11 = fp + (((int64_t)std::min(y0 + 1, H - 1)) * W + std::min(x0 + 1, W - 1)) * C;
    for (int c = 0; c < C; ++c)
      out[c] = (1.f - ay) * ((1.f - ax) * f00[c] + ax * f01[c]) +
               ay * ((1.f - ax) * f10[c] + ax * f11[c]);
  }
  return finish(std::move(y), {feat}, [H, W, C, P, coords, valid](Node& n) {
    float* df = n.parents[0]->ensure_grad().data();
    const float* gy_all = n.grad.data();
    const float* cp = coords.data();
    const float* vp = valid.data();
    for (int p = 0; p < P; ++p) {
      const float gx = cp[p * 2], gyc = cp[p * 2 + 1];
      if (vp[p] < 0.5f || gx < 0.f || gyc < 0.f || gx > (float)(W - 1) || gyc > (float)(H - 1))
        continue;
      const int x0 = std::min((int)gx, W - 2 >= 0 ? W - 2 : 0);
      const int y0 = std::min((int)gyc, H - 2 >= 0 ? H - 2 : 0);
      const float ax = gx - (float)x0, ay = gyc - (float)y0;
      const float* src = gy_all + (int64_t)p * C;
      float* d00 = df + (((int64_t)y0) * W + x0) * C;
      float* d01 = df + (((int64_t)y0) * W + std::min(x0 + 1, W - 1)) * C;
      float* d10 = df + (((int64_t)std::min(y0 + 1, H - 1)) * W + x0) * C;
      float* d11 = df + (((int64_t)std::min(y0 + 1, H - 1)) * W + std::min(x0 + 1, W - 1)) * C;
      for (int c = 0; c < C; ++c) {
        d00[c] += (1.f - ay) * (1.f - ax) * src[c];
        d01[c] += (1.f - ay) * ax * src[c];
        d10[c] += ay * (1.f - ax) * src[c];
        d11[c] += ay * ax * src[c];
      }
    }
  });
}

}  // namespace sv
