#pragma once

// Latent codec pair (encode, decode) between images and the diffusion latent
// space: (H, W, 3) in [0,1] <-> (H/8, W/8, 4) in roughly [-1, 1]. Two modes:
// the identity codec (area downsample + affine, no learned state) and a small
// learned conv autoencoder that is frozen after pretraining.

#include <cstdint>
#include <string>
#include <vector>

#include "sv/nn.hpp"
#include "sv/rng.hpp"
#include "sv/tensor.hpp"

namespace sv::codec {

class LatentCodec {
 public:
  static constexpr int kFactor = 8;
  static constexpr int kLatentChannels = 4;

  static LatentCodec identity();
  static LatentCodec learned(uint64_t seed);  // fresh (untrained) conv codec

  bool is_learned() const { return learned_; }

  // (H, W, 3), H and W divisible by 8 -> (H/8, W/8, 4). No tape is built.
  Tensor encode(const Tensor& image) const;
  // (h, w, 4) -> (8h, 8w, 3), clamped to [0, 1]. No tape is built.
  Tensor decode(const Tensor& z) const;

  // Tape-recorded forward passes used by pretraining.
  Var encode_var(const Var& image) const;
  Var decode_var(const Var& z) const;

  // Reconstruction-MSE pretraining for the learned mode; identity mode
  // rejects it. Returns the final loss. The codec is meant to be frozen
  // afterwards: downstream training never registers these parameters.
  float pretrain(const std::vector<Tensor>& images, int steps, float lr, Rng& rng);

  // Hash of all parameter bytes; the identity codec hashes to a fixed
  // constant. Run configs pin this so freezing is checkable.
  uint64_t param_hash() const;

  void save(const std::string& path) const;
  static LatentCodec load(const std::string& path);

  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }

 private:
  LatentCodec() = default;
  void build(uint64_t seed);

  bool learned_ = false;
  nn::ParamRegistry reg_;
  // Learned mode: the identity path carries RGB; the conv stacks add a
  // learned detail channel (encoder) and a residual correction (decoder).
  nn::Conv2dLayer e1_, e2_, e3_, e4_;
  nn::Conv2dLayer d1_, d2_, d3_, d4_, d5_;
};

}  // namespace sv::codec
