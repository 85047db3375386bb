#pragma once

// Layer zoo on top of the autodiff tape: parameter registry, linear / conv /
// norm layers, multi-head attention with key-padding masks, transformer
// encoder blocks, Adam, and the sinusoidal time embedding.

#include <cstdint>
#include <string>
#include <vector>

#include "sv/autodiff.hpp"
#include "sv/rng.hpp"
#include "sv/tensor.hpp"

namespace sv::nn {

struct NamedParam {
  std::string name;
  Var var;
};

// Flat, ordered collection of learnable tensors. Layers register into it so
// checkpoints and the optimizer see a stable, named parameter list.
class ParamRegistry {
 public:
  Var create(const std::string& name, Tensor init);
  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<NamedParam>& items() { return items_; }
  Var find(const std::string& name) const;  // throws if absent
  bool has(const std::string& name) const;
  int64_t scalar_count() const;
  void zero_grads();
  uint64_t value_hash() const;  // FNV-1a over all parameter bytes, in order

 private:
  std::vector<NamedParam> items_;
};

Tensor uniform_init(Rng& rng, std::vector<int> shape, float bound);
Tensor normal_init(Rng& rng, std::vector<int> shape, float std);

struct Linear {
  Var w, b;
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& prefix, int in, int out, Rng& rng,
         bool bias = true);
  Var forward(const Var& x) const { return linear(x, w, b); }
};

struct Conv2dLayer {
  Var w, b;
  int stride = 1, pad = 0;
  Conv2dLayer() = default;
  Conv2dLayer(ParamRegistry& reg, const std::string& prefix, int k, int cin, int cout, int stride,
              int pad, Rng& rng, bool bias = true);
  Var forward(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct LayerNormLayer {
  Var gamma, beta;
  LayerNormLayer() = default;
  LayerNormLayer(ParamRegistry& reg, const std::string& prefix, int dim);
  Var forward(const Var& x) const { return layer_norm(x, gamma, beta); }
};

struct GroupNormLayer {
  Var gamma, beta;
  int groups = 1;
  GroupNormLayer() = default;
  GroupNormLayer(ParamRegistry& reg, const std::string& prefix, int groups, int channels);
  Var forward(const Var& x) const { return group_norm(x, gamma, beta, groups); }
};

// Self-attention over sets. x is (B, S, C); key_mask, when given, is (B, S)
// with 1 = valid. Queries whose keys are all masked produce zero vectors.
struct MultiheadAttention {
  int dim = 0, heads = 1;
  Linear qkv, proj;
  MultiheadAttention() = default;
  MultiheadAttention(ParamRegistry& reg, const std::string& prefix, int dim, int heads, Rng& rng);
  Var forward(const Var& x, const Tensor* key_mask = nullptr) const;
};

// Pre-norm transformer encoder block: x += attn(LN(x)); x += mlp(LN(x)).
struct TransformerLayer {
  LayerNormLayer ln1, ln2;
  MultiheadAttention attn;
  Linear fc1, fc2;
  TransformerLayer() = default;
  TransformerLayer(ParamRegistry& reg, const std::string& prefix, int dim, int heads,
                   int mlp_ratio, Rng& rng);
  Var forward(const Var& x, const Tensor* key_mask = nullptr) const;
};

class Adam {
 public:
  Adam() = default;
  Adam(ParamRegistry& reg, float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);
  void step();
  void zero_grad();
  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }
  int64_t step_count() const { return t_; }

  // Optimizer state exposed for checkpointing: "<param>.m" / "<param>.v".
  std::vector<std::pair<std::string, Tensor>> state() const;
  void load_state(const std::vector<std::pair<std::string, Tensor>>& state, int64_t step_count);

 private:
  ParamRegistry* reg_ = nullptr;
  float lr_ = 1e-3f, b1_ = 0.9f, b2_ = 0.999f, eps_ = 1e-8f;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Standard sinusoidal embedding of integer timesteps, shape (n, dim).
Tensor time_embedding(const std::vector<int>& t, int dim, int max_period = 10000);

}  // namespace sv::nn
