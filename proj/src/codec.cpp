#include "sv/codec.hpp"

#include <algorithm>
#include <stdexcept>

#include "sv/serialize.hpp"

namespace sv::codec {

namespace {

void check_image(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(2) != 3)
    throw std::invalid_argument("codec: expected (H, W, 3) image, got " + image.shape_str());
  if (image.dim(0) % LatentCodec::kFactor || image.dim(1) % LatentCodec::kFactor)
    throw std::invalid_argument("codec: image dims must be divisible by 8, got " +
                                image.shape_str());
}

void check_latent(const Tensor& z) {
  if (z.ndim() != 3 || z.dim(2) != LatentCodec::kLatentChannels)
    throw std::invalid_argument("codec: expected (h, w, 4) latent, got " + z.shape_str());
}

Var as_batch(const Var& x) {
  return reshape(x, {1, x.value().dim(0), x.value().dim(1), x.value().dim(2)});
}

Var drop_batch(const Var& x) {
  return reshape(x, {x.value().dim(1), x.value().dim(2), x.value().dim(3)});
}

}  // namespace

LatentCodec LatentCodec::identity() { return LatentCodec(); }

LatentCodec LatentCodec::learned(uint64_t seed) {
  LatentCodec c;
  c.learned_ = true;
  c.build(seed);
  return c;
}

void LatentCodec::build(uint64_t seed) {
  Rng rng(seed);
  e1_ = nn::Conv2dLayer(reg_, "enc.c1", 3, 3, 16, 2, 1, rng);
  e2_ = nn::Conv2dLayer(reg_, "enc.c2", 3, 16, 32, 2, 1, rng);
  e3_ = nn::Conv2dLayer(reg_, "enc.c3", 3, 32, 32, 2, 1, rng);
  e4_ = nn::Conv2dLayer(reg_, "enc.c4", 1, 32, 1, 1, 0, rng);
  d1_ = nn::Conv2dLayer(reg_, "dec.c1", 3, kLatentChannels, 32, 1, 1, rng);
  d2_ = nn::Conv2dLayer(reg_, "dec.c2", 3, 32, 32, 1, 1, rng);
  d3_ = nn::Conv2dLayer(reg_, "dec.c3", 3, 32, 24, 1, 1, rng);
  d4_ = nn::Conv2dLayer(reg_, "dec.c4", 3, 24, 24, 1, 1, rng);
  d5_ = nn::Conv2dLayer(reg_, "dec.c5", 3, 24, 3, 1, 1, rng);
  // Zero-init the residual head so a fresh learned codec decodes exactly like
  // the identity codec and training only has to learn corrections.
  d5_.w.node()->value.fill(0.f);
}

namespace {

// The stateless base path shared by both modes: area 8x downsample mapped to
// [-1, 1], and its bilinear-upsampling inverse.
Var base_encode_rgb(const Var& x) {
  return add_scalar(scale(avg_pool(x, LatentCodec::kFactor), 2.f), -1.f);
}

Var base_decode_rgb(const Var& z4, int h, int w) {
  Var img = add_scalar(scale(slice(z4, 3, 0, 3), 0.5f), 0.5f);
  return upsample_bilinear(img, h * LatentCodec::kFactor, w * LatentCodec::kFactor);
}

}  // namespace

Var LatentCodec::encode_var(const Var& image) const {
  check_image(image.value());
  Var x = as_batch(image);
  Var z3 = base_encode_rgb(x);
  const auto& s = z3.value().shape();
  if (!learned_) {
    // The fourth channel is a constant zero plane so the latent keeps the
    // diffusion model's width.
    return drop_batch(concat({z3, Var::constant(Tensor::zeros({s[0], s[1], s[2], 1}))}, 3));
  }
  // Learned mode keeps the identity RGB channels and fills the fourth channel
  // with an encoded detail plane (tanh keeps it in the latent's [-1,1] range).
  Var h = silu(e1_.forward(x));
  h = silu(e2_.forward(h));
  h = silu(e3_.forward(h));
  Var detail = tanh_op(e4_.forward(h));
  return drop_batch(concat({z3, detail}, 3));
}

Var LatentCodec::decode_var(const Var& z) const {
  check_latent(z.value());
  Var x = as_batch(z);
  const int h = z.value().dim(0), w = z.value().dim(1);
  Var base = base_decode_rgb(x, h, w);
  if (!learned_) return drop_batch(base);
  // Residual decoder on all four channels, added to the bilinear base. The
  // output is unclamped on the tape; decode() clamps.
  Var y = silu(d1_.forward(x));
  y = silu(d2_.forward(upsample_nearest2x(y)));
  y = silu(d3_.forward(upsample_nearest2x(y)));
  y = silu(d4_.forward(upsample_nearest2x(y)));
  return drop_batch(add(base, d5_.forward(y)));
}

Tensor LatentCodec::encode(const Tensor& image) const {
  return encode_var(Var::constant(image)).value();
}

Tensor LatentCodec::decode(const Tensor& z) const {
  Tensor img = decode_var(Var::constant(z)).value();
  for (int64_t i = 0; i < img.numel(); ++i) img.at(i) = std::clamp(img.at(i), 0.f, 1.f);
  return img;
}

float LatentCodec::pretrain(const std::vector<Tensor>& images, int steps, float lr, Rng& rng) {
  if (!learned_) throw std::runtime_error("codec: identity mode has nothing to pretrain");
  if (images.empty()) throw std::invalid_argument("codec: pretrain needs at least one image");
  nn::Adam opt(reg_, lr);
  float last = 0.f;
  for (int i = 0; i < steps; ++i) {
    const Tensor& pick = images[rng.uniform_int(0, (int64_t)images.size() - 1)];
    // Horizontal-flip augmentation; renders have no preferred handedness.
    Tensor img = pick;
    if (rng.uniform() < 0.5) {
      const int h = pick.dim(0), w = pick.dim(1), c = pick.dim(2);
      img = Tensor::zeros(pick.shape());
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int k = 0; k < c; ++k) img.at({y, x, k}) = pick.at({y, w - 1 - x, k});
    }
    Var x = Var::constant(img);
    Var recon = decode_var(encode_var(x));
    Var loss = mse(recon, x);
    opt.zero_grad();
    backward(loss);
    opt.step();
    last = loss.value().at(0);
  }
  return last;
}

uint64_t LatentCodec::param_hash() const {
  // Fixed sentinel for the stateless identity codec so configs can still pin
  // "which codec" uniformly.
  if (!learned_) return 0x1d1d1d1d00000000ull;
  return reg_.value_hash();
}

void LatentCodec::save(const std::string& path) const {
  nlohmann::json meta = {{"module", "codec"},
                         {"mode", learned_ ? "learned" : "identity"},
                         {"factor", kFactor},
                         {"latent_channels", kLatentChannels}};
  ser::save_checkpoint(path, meta, ser::registry_tensors(reg_));
}

LatentCodec LatentCodec::load(const std::string& path) {
  ser::Checkpoint ck = ser::load_checkpoint(path);
  if (ck.meta.value("module", "") != "codec")
    throw std::runtime_error("codec: not a codec checkpoint: " + path);
  if (ck.meta.at("mode") == "identity") return identity();
  LatentCodec c = learned(0);
  ser::load_into_registry(ck, c.reg_);
  return c;
}

}  // namespace sv::codec
