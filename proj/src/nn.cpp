#include "sv/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace sv::nn {

Var ParamRegistry::create(const std::string& name, Tensor init) {
  for (const auto& it : items_)
    if (it.name == name) throw std::invalid_argument("duplicate parameter: " + name);
  Var v = Var::param(std::move(init));
  items_.push_back({name, v});
  return v;
}

Var ParamRegistry::find(const std::string& name) const {
  for (const auto& it : items_)
    if (it.name == name) return it.var;
  throw std::out_of_range("parameter not found: " + name);
}

bool ParamRegistry::has(const std::string& name) const {
  for (const auto& it : items_)
    if (it.name == name) return true;
  return false;
}

int64_t ParamRegistry::scalar_count() const {
  int64_t n = 0;
  for (const auto& it : items_) n += it.var.value().numel();
  return n;
}

void ParamRegistry::zero_grads() {
  for (auto& it : items_) {
    Tensor& g = it.var.node()->grad;
    if (g.defined()) g.fill(0.f);
  }
}

uint64_t ParamRegistry::value_hash() const {
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (const auto& it : items_) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(it.var.value().data());
    const size_t n = (size_t)it.var.value().numel() * sizeof(float);
    for (size_t i = 0; i < n; ++i) h = (h ^ bytes[i]) * 1099511628211ull;
  }
  return h;
}

Tensor uniform_init(Rng& rng, std::vector<int> shape, float bound) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = (float)rng.uniform(-bound, bound);
  return t;
}

Tensor normal_init(Rng& rng, std::vector<int> shape, float std) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = (float)rng.normal() * std;
  return t;
}

Linear::Linear(ParamRegistry& reg, const std::string& prefix, int in, int out, Rng& rng,
               bool bias) {
  const float bound = 1.f / std::sqrt((float)in);
  w = reg.create(prefix + ".w", uniform_init(rng, {in, out}, bound));
  if (bias) b = reg.create(prefix + ".b", Tensor::zeros({out}));
}

Conv2dLayer::Conv2dLayer(ParamRegistry& reg, const std::string& prefix, int k, int cin, int cout,
                         int stride_, int pad_, Rng& rng, bool bias)
    : stride(stride_), pad(pad_) {
  const float bound = 1.f / std::sqrt((float)(k * k * cin));
  w = reg.create(prefix + ".w", uniform_init(rng, {k, k, cin, cout}, bound));
  if (bias) b = reg.create(prefix + ".b", Tensor::zeros({cout}));
}

LayerNormLayer::LayerNormLayer(ParamRegistry& reg, const std::string& prefix, int dim) {
  gamma = reg.create(prefix + ".g", Tensor::full({dim}, 1.f));
  beta = reg.create(prefix + ".b", Tensor::zeros({dim}));
}

GroupNormLayer::GroupNormLayer(ParamRegistry& reg, const std::string& prefix, int groups_,
                               int channels)
    : groups(groups_) {
  gamma = reg.create(prefix + ".g", Tensor::full({channels}, 1.f));
  beta = reg.create(prefix + ".b", Tensor::zeros({channels}));
}

MultiheadAttention::MultiheadAttention(ParamRegistry& reg, const std::string& prefix, int dim_,
                                       int heads_, Rng& rng)
    : dim(dim_),
      heads(heads_),
      qkv(reg, prefix + ".qkv", dim_, 3 * dim_, rng),
      proj(reg, prefix + ".proj", dim_, dim_, rng) {
  if (dim_ % heads_) throw std::invalid_argument("attention dim % heads != 0");
}

Var MultiheadAttention::forward(const Var& x, const Tensor* key_mask) const {
  const auto& s = x.value().shape();
  if (s.size() != 3) throw std::invalid_argument("attention input must be (B,S,C)");
  const int B = s[0], S = s[1], C = s[2];
  const int Dh = C / heads;
  Var qkv_out = qkv.forward(x);  // (B,S,3C)
  auto split_heads = [&](Var t) {
    // (B,S,C) -> (B*heads, S, Dh)
    t = reshape(t, {B, S, heads, Dh});
    t = permute(t, {0, 2, 1, 3});
    return reshape(t, {B * heads, S, Dh});
  };
  Var q = split_heads(slice(qkv_out, 2, 0, C));
  Var k = split_heads(slice(qkv_out, 2, C, C));
  Var v = split_heads(slice(qkv_out, 2, 2 * C, C));
  Var scores = scale(matmul(q, permute(k, {0, 2, 1})), 1.f / std::sqrt((float)Dh));

  Var w;
  if (key_mask) {
    if (key_mask->shape() != std::vector<int>{B, S})
      throw std::invalid_argument("key mask must be (B,S)");
    Tensor full_mask({B * heads, S, S});
    for (int b = 0; b < B; ++b) {
      const float* row = key_mask->data() + (int64_t)b * S;
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < S; ++i)
          std::copy(row, row + S,
                    full_mask.data() + (((int64_t)(b * heads + h) * S) + i) * S);
    }
    w = masked_softmax(scores, full_mask);
  } else {
    w = softmax_lastdim(scores);
  }
  Var out = matmul(w, v);  // (B*heads, S, Dh)
  out = reshape(out, {B, heads, S, Dh});
  out = permute(out, {0, 2, 1, 3});
  out = reshape(out, {B, S, C});
  return proj.forward(out);
}

TransformerLayer::TransformerLayer(ParamRegistry& reg, const std::string& prefix, int dim,
                                   int heads, int mlp_ratio, Rng& rng)
    : ln1(reg, prefix + ".ln1", dim),
      ln2(reg, prefix + ".ln2", dim),
      attn(reg, prefix + ".attn", dim, heads, rng),
      fc1(reg, prefix + ".fc1", dim, dim * mlp_ratio, rng),
      fc2(reg, prefix + ".fc2", dim * mlp_ratio, dim, rng) {}

Var TransformerLayer::forward(const Var& x, const Tensor* key_mask) const {
  Var h = add(x, attn.forward(ln1.forward(x), key_mask));
  return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
}

Adam::Adam(ParamRegistry& reg, float lr, float beta1, float beta2, float eps)
    : reg_(&reg), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& it : reg.items()) {
    m_.push_back(Tensor::zeros(it.var.value().shape()));
    v_.push_back(Tensor::zeros(it.var.value().shape()));
  }
}

void Adam::step() {
  ++t_;
  const float c1 = 1.f - std::pow(b1_, (float)t_);
  const float c2 = 1.f - std::pow(b2_, (float)t_);
  auto& items = reg_->items();
  // New parameters may have been registered since construction (e.g. lazily
  // built heads); give them fresh state.
  while (m_.size() < items.size()) {
    m_.push_back(Tensor::zeros(items[m_.size()].var.value().shape()));
    v_.push_back(Tensor::zeros(items[v_.size()].var.value().shape()));
  }
  for (size_t p = 0; p < items.size(); ++p) {
    Node& node = *items[p].var.node();
    if (!node.grad.defined()) continue;
    float* w = node.value.data();
    const float* g = node.grad.data();
    float* m = m_[p].data();
    float* v = v_[p].data();
    const int64_t n = node.value.numel();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) {
      m[i] = b1_ * m[i] + (1.f - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.f - b2_) * g[i] * g[i];
      const float mhat = m[i] / c1;
      const float vhat = v[i] / c2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::zero_grad() { reg_->zero_grads(); }

std::vector<std::pair<std::string, Tensor>> Adam::state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  const auto& items = reg_->items();
  for (size_t p = 0; p < m_.size() && p < items.size(); ++p) {
    out.push_back({items[p].name + ".m", m_[p]});
    out.push_back({items[p].name + ".v", v_[p]});
  }
  return out;
}

void Adam::load_state(const std::vector<std::pair<std::string, Tensor>>& state,
                      int64_t step_count) {
  t_ = step_count;
  const auto& items = reg_->items();
  for (size_t p = 0; p < items.size(); ++p) {
    for (const auto& [name, t] : state) {
      if (name == items[p].name + ".m") m_[p] = t.clone();
      if (name == items[p].name + ".v") v_[p] = t.clone();
    }
  }
}

Tensor time_embedding(const std::vector<int>& t, int dim, int max_period) {
  const int half = dim / 2;
  Tensor out({(int)t.size(), dim});
  for (size_t n = 0; n < t.size(); ++n) {
    float* row = out.data() + n * dim;
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log((double)max_period) * i / half);
      row[i] = (float)std::cos(t[n] * freq);
      row[half + i] = (float)std::sin(t[n] * freq);
    }
    if (dim % 2) row[dim - 1] = 0.f;
  }
  return out;
}

}  // namespace sv::nn
