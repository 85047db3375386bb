#include "sv/denoiser.hpp"

#include <stdexcept>

#include "sv/serialize.hpp"

namespace sv::diff {

void DenoiserConfig::validate() const {
  if (latent_channels < 1) throw std::invalid_argument("denoiser: latent_channels must be >= 1");
  if (cond_channels < 0) throw std::invalid_argument("denoiser: cond_channels must be >= 0");
  if (groups < 1 || base % groups != 0)
    throw std::invalid_argument("denoiser: base must be a positive multiple of groups");
  if (temb < 2 || temb % 2 != 0)
    throw std::invalid_argument("denoiser: temb must be a positive even number");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"latent_channels", latent_channels},
          {"cond_channels", cond_channels},
          {"base", base},
          {"temb", temb},
          {"groups", groups}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.latent_channels = j.at("latent_channels").get<int>();
  c.cond_channels = j.at("cond_channels").get<int>();
  c.base = j.at("base").get<int>();
  c.temb = j.at("temb").get<int>();
  c.groups = j.at("groups").get<int>();
  c.validate();
  return c;
}

uint64_t DenoiserConfig::hash() const {
  const std::string s = to_json().dump();
  return ser::fnv1a(s.data(), s.size());
}

Denoiser::ResBlock::ResBlock(nn::ParamRegistry& reg, const std::string& prefix, int cin,
                             int cout, int temb_dim, int groups, Rng& rng)
    : gn1(reg, prefix + ".gn1", groups, cin),
      gn2(reg, prefix + ".gn2", groups, cout),
      c1(reg, prefix + ".c1", 3, cin, cout, 1, 1, rng),
      c2(reg, prefix + ".c2", 3, cout, cout, 1, 1, rng),
      temb(reg, prefix + ".temb", temb_dim, cout, rng),
      has_skip(cin != cout) {
  if (has_skip) skip = nn::Conv2dLayer(reg, prefix + ".skip", 1, cin, cout, 1, 0, rng);
}

Var Denoiser::ResBlock::forward(const Var& x, const Var& temb_vec) const {
  Var h = c1.forward(silu(gn1.forward(x)));
  h = add_bias(h, temb.forward(temb_vec));
  h = c2.forward(silu(gn2.forward(h)));
  return add(h, has_skip ? skip.forward(x) : x);
}

Denoiser::Denoiser(DenoiserConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int b = cfg_.base, in_ch = cfg_.latent_channels + cfg_.cond_channels;
  t1_ = nn::Linear(reg_, "time/l1", cfg_.temb, cfg_.temb, rng);
  t2_ = nn::Linear(reg_, "time/l2", cfg_.temb, cfg_.temb, rng);
  in_ = nn::Conv2dLayer(reg_, "in", 3, in_ch, b, 1, 1, rng);
  enc0_ = ResBlock(reg_, "enc0", b, b, cfg_.temb, cfg_.groups, rng);
  down1_ = nn::Conv2dLayer(reg_, "down1", 3, b, 2 * b, 2, 1, rng);
  enc1_ = ResBlock(reg_, "enc1", 2 * b, 2 * b, cfg_.temb, cfg_.groups, rng);
  down2_ = nn::Conv2dLayer(reg_, "down2", 3, 2 * b, 3 * b, 2, 1, rng);
  mid_ = ResBlock(reg_, "mid", 3 * b, 3 * b, cfg_.temb, cfg_.groups, rng);
  up1c_ = nn::Conv2dLayer(reg_, "up1", 3, 3 * b, 2 * b, 1, 1, rng);
  dec1_ = ResBlock(reg_, "dec1", 4 * b, 2 * b, cfg_.temb, cfg_.groups, rng);
  up2c_ = nn::Conv2dLayer(reg_, "up2", 3, 2 * b, b, 1, 1, rng);
  dec0_ = ResBlock(reg_, "dec0", 2 * b, b, cfg_.temb, cfg_.groups, rng);
  out_gn_ = nn::GroupNormLayer(reg_, "out/norm", cfg_.groups, b);
  out_ = nn::Conv2dLayer(reg_, "out/conv", 3, b, cfg_.latent_channels, 1, 1, rng);
  // Zero noise prediction at initialization.
  out_.w.node()->value.fill(0.f);
  out_.b.node()->value.fill(0.f);
}

Var Denoiser::eps_var(const Var& z_t, int t, const Var& y) {
  const auto& s = z_t.value().shape();
  if (s.size() != 3 || s[2] != cfg_.latent_channels)
    throw std::invalid_argument("denoiser: latent must be (H, W, latent_channels)");
  const int H = s[0], W = s[1];
  if (H % 4 != 0 || W % 4 != 0)
    throw std::invalid_argument("denoiser: latent dimensions must be divisible by 4");
  Var x = reshape(z_t, {1, H, W, cfg_.latent_channels});
  if (cfg_.cond_channels > 0) {
    const auto& sy = y.value().shape();
    if (sy.size() != 3 || sy[0] != H || sy[1] != W || sy[2] != cfg_.cond_channels)
      throw std::invalid_argument("denoiser: conditioning must be (H, W, cond_channels)");
    x = concat({x, reshape(y, {1, H, W, cfg_.cond_channels})}, 3);
  }
  Var temb = Var::constant(nn::time_embedding({t}, cfg_.temb).reshaped({cfg_.temb}));
  temb = t2_.forward(silu(t1_.forward(temb)));

  Var e0 = enc0_.forward(in_.forward(x), temb);            // (1, H,   W,   b)
  Var e1 = enc1_.forward(down1_.forward(e0), temb);        // (1, H/2, W/2, 2b)
  Var m = mid_.forward(down2_.forward(e1), temb);          // (1, H/4, W/4, 3b)
  Var d1 = up1c_.forward(upsample_nearest2x(m));           // (1, H/2, W/2, 2b)
  d1 = dec1_.forward(concat({d1, e1}, 3), temb);
  Var d0 = up2c_.forward(upsample_nearest2x(d1));          // (1, H,   W,   b)
  d0 = dec0_.forward(concat({d0, e0}, 3), temb);
  Var out = out_.forward(silu(out_gn_.forward(d0)));
  return reshape(out, {H, W, cfg_.latent_channels});
}

Tensor Denoiser::eps(const Tensor& z_t, int t, const Tensor& y) {
  return eps_var(Var::constant(z_t), t, Var::constant(y)).value();
}

void Denoiser::save(const std::string& path) const {
  nlohmann::json meta = {{"module", "denoiser"},
                         {"config", cfg_.to_json()},
                         {"config_hash", ser::config_hash(cfg_.to_json())}};
  ser::save_checkpoint(path, meta, ser::registry_tensors(reg_));
}

Denoiser Denoiser::load(const std::string& path, bool force) {
  ser::Checkpoint ck = ser::load_checkpoint(path);
  if (ck.meta.value("module", "") != "denoiser")
    throw std::runtime_error("checkpoint at " + path + " is not a denoiser checkpoint");
  const DenoiserConfig cfg = DenoiserConfig::from_json(ck.meta.at("config"));
  ser::check_config_hash(ck, ser::config_hash(cfg.to_json()), force);
  Denoiser d(cfg, 0);
  ser::load_into_registry(ck, d.reg_);
  return d;
}

}  // namespace sv::diff
