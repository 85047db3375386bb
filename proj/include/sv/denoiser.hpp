#pragma once

// Conditional eps-prediction UNet over 4-channel latents. The conditioning
// feature grid is concatenated onto the latent channels at the input; the
// timestep enters through a sinusoidal embedding added per-channel inside
// every residual block. Three resolutions (1x, 2x, 3x base width) with skip
// connections; the output convolution is zero-initialized so an untrained
// network predicts exactly zero noise.

#include <cstdint>
#include <string>

#include "json.hpp"
#include "sv/diffusion.hpp"
#include "sv/nn.hpp"
#include "sv/rng.hpp"
#include "sv/tensor.hpp"

namespace sv::diff {

struct DenoiserConfig {
  int latent_channels = 4;
  int cond_channels = 256;  // width of the conditioning feature grid
  int base = 32;            // channel widths are base, 2*base, 3*base
  int temb = 64;            // time-embedding width
  int groups = 8;           // group-norm groups

  void validate() const;  // throws std::invalid_argument
  uint64_t hash() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

class Denoiser final : public EpsNet {
 public:
  explicit Denoiser(DenoiserConfig cfg = {}, uint64_t seed = 0);

  const DenoiserConfig& config() const { return cfg_; }
  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }
  uint64_t param_hash() const { return reg_.value_hash(); }

  // z_t (H, W, latent_channels), y (H, W, cond_channels); H and W divisible
  // by 4 (two downsamplings). Returns the predicted noise, same shape as z_t.
  Var eps_var(const Var& z_t, int t, const Var& y) override;
  Tensor eps(const Tensor& z_t, int t, const Tensor& y);

  void save(const std::string& path) const;
  // Refuses a checkpoint whose embedded config hash fails to verify unless
  // force is set; the stored config is adopted either way.
  static Denoiser load(const std::string& path, bool force = false);

 private:
  struct ResBlock {
    nn::GroupNormLayer gn1, gn2;
    nn::Conv2dLayer c1, c2, skip;
    nn::Linear temb;
    bool has_skip = false;
    ResBlock() = default;
    ResBlock(nn::ParamRegistry& reg, const std::string& prefix, int cin, int cout, int temb_dim,
             int groups, Rng& rng);
    Var forward(const Var& x, const Var& temb_vec) const;
  };

  DenoiserConfig cfg_;
  nn::ParamRegistry reg_;
  nn::Linear t1_, t2_;
  nn::Conv2dLayer in_, down1_, down2_, up1c_, up2c_, out_;
  nn::GroupNormLayer out_gn_;
  ResBlock enc0_, enc1_, mid_, dec1_, dec0_;
};

}  // namespace sv::diff
