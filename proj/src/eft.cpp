#include "sv/eft.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sv/serialize.hpp"

namespace sv {

// Query Plucker (6) + context Plucker (6) + normalized depth (1).
static constexpr int kScalars = 13;
// Rays per chunk in the non-differentiable forward(); bounds peak graph size.
static constexpr int kRayChunk = 64;

// --- config -------------------------------------------------------------------

void EftConfig::validate() const {
  if (backbone_channels < 1) throw std::invalid_argument("eft: backbone_channels must be >= 1");
  if (depths < 2) throw std::invalid_argument("eft: depths must be >= 2");
  if (hidden < 1 || heads < 1 || hidden % heads != 0)
    throw std::invalid_argument("eft: hidden must be a positive multiple of heads");
  if (mlp_ratio < 1) throw std::invalid_argument("eft: mlp_ratio must be >= 1");
  if (layers_per_stage < 1) throw std::invalid_argument("eft: layers_per_stage must be >= 1");
  if (feature_dim < 1) throw std::invalid_argument("eft: feature_dim must be >= 1");
  if (harmonics < 1) throw std::invalid_argument("eft: harmonics must be >= 1");
  if (latent_grid < 1) throw std::invalid_argument("eft: latent_grid must be >= 1");
}

nlohmann::json EftConfig::to_json() const {
  return {{"backbone_channels", backbone_channels},
          {"depths", depths},
          {"hidden", hidden},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"layers_per_stage", layers_per_stage},
          {"feature_dim", feature_dim},
          {"harmonics", harmonics},
          {"latent_grid", latent_grid}};
}

EftConfig EftConfig::from_json(const nlohmann::json& j) {
  EftConfig c;
  c.backbone_channels = j.at("backbone_channels").get<int>();
  c.depths = j.at("depths").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.layers_per_stage = j.at("layers_per_stage").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.harmonics = j.at("harmonics").get<int>();
  c.latent_grid = j.at("latent_grid").get<int>();
  c.validate();
  return c;
}

uint64_t EftConfig::hash() const {
  const std::string s = to_json().dump();
  return ser::fnv1a(s.data(), s.size());
}

// --- depth bounds ---------------------------------------------------------------

// Anchoring the slab at the optical-axis convergence point (instead of the
// world origin) keeps the bounds — and therefore every embedded scalar —
// unchanged under a rigid transform of the whole rig. Parallel-axis rigs have
// no convergence point and are not supported here.
geo::DepthBounds eft_depth_bounds(const geo::Camera& query,
                                  const std::vector<ContextView>& context, int n_samples) {
  std::vector<geo::Ray> axes;
  axes.push_back({query.center(), query.forward()});
  for (const ContextView& v : context) axes.push_back({v.cam.center(), v.cam.forward()});
  const geo::Vec3 anchor = geo::nearest_point_to_rays(axes);
  const double s = (query.center() - anchor).norm();
  geo::DepthBounds b;
  b.z_near = std::max(s - 5.0, 1e-3);
  b.z_far = s + 5.0;
  b.n_samples = n_samples;
  return b;
}

// --- model -------------------------------------------------------------------

Eft::Eft(EftConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int F = cfg_.backbone_channels;
  // Backbone: stem + residual pair at full res, then three stride-2 stages
  // whose outputs are fused at half resolution by a 1x1 projection.
  enc_.emplace_back(reg_, "enc/c0", 3, 3, 16, 1, 1, rng);
  enc_.emplace_back(reg_, "enc/r1a", 3, 16, 16, 1, 1, rng);
  enc_.emplace_back(reg_, "enc/r1b", 3, 16, 16, 1, 1, rng);
  enc_.emplace_back(reg_, "enc/d1", 3, 16, 24, 2, 1, rng);
  enc_.emplace_back(reg_, "enc/r2a", 3, 24, 24, 1, 1, rng);
  enc_.emplace_back(reg_, "enc/r2b", 3, 24, 24, 1, 1, rng);
  enc_.emplace_back(reg_, "enc/d2", 3, 24, 32, 2, 1, rng);
  enc_.emplace_back(reg_, "enc/r3a", 3, 32, 32, 1, 1, rng);
  enc_.emplace_back(reg_, "enc/r3b", 3, 32, 32, 1, 1, rng);
  enc_.emplace_back(reg_, "enc/d3", 3, 32, 48, 2, 1, rng);
  enc_.emplace_back(reg_, "enc/fuse", 1, 24 + 32 + 48, F, 1, 0, rng);

  proj_ = nn::Linear(reg_, "tok/proj", cfg_.token_dim(), cfg_.hidden, rng);
  for (int l = 0; l < cfg_.layers_per_stage; ++l)
    s1_.emplace_back(reg_, "s1/l" + std::to_string(l), cfg_.hidden, cfg_.heads, cfg_.mlp_ratio,
                     rng);
  for (int l = 0; l < cfg_.layers_per_stage; ++l)
    s2_.emplace_back(reg_, "s2/l" + std::to_string(l), cfg_.hidden, cfg_.heads, cfg_.mlp_ratio,
                     rng);
  for (int l = 0; l < cfg_.layers_per_stage; ++l)
    s3_.emplace_back(reg_, "s3/l" + std::to_string(l), cfg_.hidden, cfg_.heads, cfg_.mlp_ratio,
                     rng);
  score_d_ = nn::Linear(reg_, "agg/depth", cfg_.hidden, 1, rng);
  score_v_ = nn::Linear(reg_, "agg/view", cfg_.hidden, 1, rng);
  head_rgb_ = nn::Linear(reg_, "head/rgb", cfg_.hidden, 3, rng);
  head_feat_ = nn::Linear(reg_, "head/feat", cfg_.hidden, cfg_.feature_dim, rng);
  null_ = reg_.create("null", nn::normal_init(rng, {cfg_.hidden}, 0.02f));
}

Var Eft::backbone(const Var& image) const {
  const auto& s = image.value().shape();
  const int H = s[1], W = s[2];
  if (H % 8 != 0 || W % 8 != 0)
    throw std::invalid_argument("eft: image dimensions must be divisible by 8");
  auto block = [](const Var& x, const nn::Conv2dLayer& a, const nn::Conv2dLayer& b) {
    return silu(add(x, b.forward(silu(a.forward(x)))));
  };
  Var x = silu(enc_[0].forward(image));
  x = block(x, enc_[1], enc_[2]);
  Var h2 = block(silu(enc_[3].forward(x)), enc_[4], enc_[5]);   // (1, H/2, W/2, 24)
  Var h4 = block(silu(enc_[6].forward(h2)), enc_[7], enc_[8]);  // (1, H/4, W/4, 32)
  Var h8 = silu(enc_[9].forward(h4));                           // (1, H/8, W/8, 48)
  Var cat = concat({h2, upsample_bilinear(h4, H / 2, W / 2), upsample_bilinear(h8, H / 2, W / 2)},
                   3);
  return enc_[10].forward(cat);
}

Tensor Eft::extract_features(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(2) != 3)
    throw std::invalid_argument("eft: image must be (H, W, 3)");
  const int H = image.dim(0), W = image.dim(1);
  Var f = backbone(Var::constant(image.reshaped({1, H, W, 3})));
  return f.value().reshaped({H / 2, W / 2, cfg_.backbone_channels});
}

namespace {

// Geometry for one chunk of query rays, laid out for the stage-1 transformer:
// token row order is (ray * D + depth), sequence axis is the view.
struct RayGeo {
  std::vector<Tensor> coords;   // per view: (R*D, 2) feature-grid coords
  std::vector<Tensor> valid;    // per view: (R*D)
  std::vector<Tensor> scalars;  // per view: (R*D, 13*(2*harmonics+1))
  Tensor mask_view_at_depth;    // (R*D, M) stage-1 key mask
  Tensor mask_depth;            // (R*M, D) stage-2 key mask
  Tensor mask_view;             // (R, M)   stage-3 key mask
  Tensor null_rows;             // (R, 1)   1 where every token is masked
};

RayGeo build_ray_geo(const EftConfig& cfg, const geo::Camera& query,
                     const std::vector<geo::Vec2>& pixels,
                     const std::vector<ContextView>& context, const geo::DepthBounds& bounds) {
  const int R = (int)pixels.size(), M = (int)context.size(), D = bounds.n_samples;
  const int embed = kScalars * (2 * cfg.harmonics + 1);
  RayGeo g;
  // One tensor per view: Tensor copies share storage, so assign(M, ...) would
  // alias every view onto a single buffer.
  for (int m = 0; m < M; ++m) {
    g.coords.push_back(Tensor({R * D, 2}));
    g.valid.push_back(Tensor({R * D}));
    g.scalars.push_back(Tensor({R * D, embed}));
  }
  g.mask_view_at_depth = Tensor({R * D, M});
  g.mask_depth = Tensor({R * M, D});
  g.mask_view = Tensor({R, M});
  g.mask_view_at_depth.fill(0.f);
  g.mask_depth.fill(0.f);
  g.mask_view.fill(0.f);
  g.null_rows = Tensor({R, 1});
  g.null_rows.fill(0.f);

  std::vector<geo::Camera> cams(M);
  for (int m = 0; m < M; ++m) cams[m] = context[m].cam;
  // All positions are expressed in the query camera frame and measured in
  // units of the far plane, so the harmonic embeddings see O(1) arguments and
  // depend on relative pose only.
  const geo::Mat3& Rq = query.R;
  const geo::Vec3& tq = query.t;
  const double inv_far = 1.0 / bounds.z_far;
  std::vector<geo::Vec3> centers(M);
  for (int m = 0; m < M; ++m) centers[m] = (Rq * context[m].cam.center() + tq) * inv_far;

  Eigen::VectorXd sc(kScalars);
  for (int r = 0; r < R; ++r) {
    const geo::Ray ray = geo::pixel_ray(query, pixels[r]);
    const geo::EpipolarSamples es = geo::epipolar_samples(ray, bounds, cams);
    const geo::Vec3 qo = (Rq * ray.origin + tq) * inv_far;  // ~0 by construction
    const geo::Vec3 qd = Rq * ray.dir;
    const geo::Vec3 qm = qo.cross(qd);
    bool ray_has_valid = false;
    for (int m = 0; m < M; ++m) {
      const ContextView& v = context[m];
      const int Hf = v.image.dim(0) / 2, Wf = v.image.dim(1) / 2;
      // Image corners map to feature-grid corners.
      const double sx = (Wf - 1) / std::max(1.0, (double)(v.image.dim(1) - 1));
      const double sy = (Hf - 1) / std::max(1.0, (double)(v.image.dim(0) - 1));
      bool view_has_valid = false;
      for (int d = 0; d < D; ++d) {
        const int row = r * D + d;
        const bool ok = es.valid[m][d];
        g.valid[m].at({row}) = ok ? 1.f : 0.f;
        g.coords[m].at({row, 0}) = ok ? (float)(es.points[m][d].x() * sx) : -1.f;
        g.coords[m].at({row, 1}) = ok ? (float)(es.points[m][d].y() * sy) : -1.f;
        if (ok) {
          g.mask_view_at_depth.at({row, m}) = 1.f;
          g.mask_depth.at({r * M + m, d}) = 1.f;
          view_has_valid = true;
          ray_has_valid = true;
        }
        const geo::Vec3 p = (Rq * (ray.origin + es.depths[d] * ray.dir) + tq) * inv_far;
        geo::Vec3 cd = p - centers[m];
        const double n = cd.norm();
        cd = n > 1e-9 ? geo::Vec3(cd / n) : qd;  // degenerate sample, always masked
        sc << qd, qm, cd, centers[m].cross(cd),
            (es.depths[d] - bounds.z_near) / (bounds.z_far - bounds.z_near);
        const Eigen::VectorXd e = geo::harmonic_embed(sc, cfg.harmonics);
        float* dst = g.scalars[m].data() + (int64_t)row * embed;
        for (int i = 0; i < embed; ++i) dst[i] = (float)e[i];
      }
      if (view_has_valid) g.mask_view.at({r, m}) = 1.f;
    }
    if (!ray_has_valid) g.null_rows.at({r, 0}) = 1.f;
  }
  return g;
}

}  // namespace

Eft::ForwardVars Eft::run_rays(const std::vector<Var>& feats, const geo::Camera& query,
                               const std::vector<geo::Vec2>& pixels,
                               const std::vector<ContextView>& context,
                               const geo::DepthBounds& bounds) const {
  const int R = (int)pixels.size(), M = (int)context.size(), D = bounds.n_samples;
  const int C = cfg_.hidden;
  RayGeo g = build_ray_geo(cfg_, query, pixels, context, bounds);

  std::vector<Var> tok;
  tok.reserve(M);
  for (int m = 0; m < M; ++m) {
    Var fm = grid_sample(feats[m], g.coords[m], g.valid[m]);
    Var t = proj_.forward(concat({fm, Var::constant(g.scalars[m])}, 1));
    tok.push_back(reshape(t, {R * D, 1, C}));
  }
  Var x = concat(tok, 1);  // (R*D, M, C)
  for (const auto& l : s1_) x = l.forward(x, &g.mask_view_at_depth);

  x = reshape(permute(reshape(x, {R, D, M, C}), {0, 2, 1, 3}), {R * M, D, C});
  for (const auto& l : s2_) x = l.forward(x, &g.mask_depth);
  Var wd = masked_softmax(reshape(score_d_.forward(x), {R * M, D}), g.mask_depth);
  Var v = reshape(matmul(reshape(wd, {R * M, 1, D}), x), {R, M, C});

  for (const auto& l : s3_) v = l.forward(v, &g.mask_view);
  Var wv = masked_softmax(reshape(score_v_.forward(v), {R, M}), g.mask_view);
  Var agg = reshape(matmul(reshape(wv, {R, 1, M}), v), {R, C});
  // Fully masked rays aggregate to zero; substitute the learned null token.
  // The indicator is zero elsewhere, so no other ray (or its gradient) moves.
  agg = add(agg, matmul(Var::constant(g.null_rows), reshape(null_, {1, C})));

  ForwardVars out;
  out.rgb = sigmoid(head_rgb_.forward(agg));
  out.feature = head_feat_.forward(agg);
  out.depth_weights = wd.value().reshaped({R, M, D});
  out.view_weights = wv.value();
  return out;
}

Eft::ForwardVars Eft::forward_var(const geo::Camera& query, const std::vector<geo::Vec2>& pixels,
                                  const std::vector<ContextView>& context) const {
  if (context.empty()) throw std::invalid_argument("eft: need at least one context view");
  if (pixels.empty()) throw std::invalid_argument("eft: need at least one query pixel");
  std::vector<Var> feats;
  feats.reserve(context.size());
  for (const ContextView& v : context) {
    if (v.image.ndim() != 3 || v.image.dim(2) != 3)
      throw std::invalid_argument("eft: context image must be (H, W, 3)");
    const int H = v.image.dim(0), W = v.image.dim(1);
    Var f = backbone(Var::constant(v.image.reshaped({1, H, W, 3})));
    feats.push_back(reshape(f, {H / 2, W / 2, cfg_.backbone_channels}));
  }
  return run_rays(feats, query, pixels, context, eft_depth_bounds(query, context, cfg_.depths));
}

EftOutput Eft::forward(const geo::Camera& query, const std::vector<geo::Vec2>& pixels,
                       const std::vector<ContextView>& context) const {
  if (context.empty()) throw std::invalid_argument("eft: need at least one context view");
  if (pixels.empty()) throw std::invalid_argument("eft: need at least one query pixel");
  const int R = (int)pixels.size(), M = (int)context.size(), D = cfg_.depths;
  std::vector<Var> feats;
  feats.reserve(context.size());
  for (const ContextView& v : context) {
    if (v.image.ndim() != 3 || v.image.dim(2) != 3)
      throw std::invalid_argument("eft: context image must be (H, W, 3)");
    const int H = v.image.dim(0), W = v.image.dim(1);
    Var f = backbone(Var::constant(v.image.reshaped({1, H, W, 3})));
    // Detached: chunk graphs below must not retain the backbone activations.
    feats.push_back(Var::constant(f.value().reshaped({H / 2, W / 2, cfg_.backbone_channels})));
  }
  const geo::DepthBounds bounds = eft_depth_bounds(query, context, cfg_.depths);

  EftOutput out;
  out.rgb = Tensor({R, 3});
  out.feature = Tensor({R, cfg_.feature_dim});
  out.depth_weights = Tensor({R, M, D});
  out.view_weights = Tensor({R, M});
  for (int start = 0; start < R; start += kRayChunk) {
    const int n = std::min(kRayChunk, R - start);
    std::vector<geo::Vec2> chunk(pixels.begin() + start, pixels.begin() + start + n);
    ForwardVars fv = run_rays(feats, query, chunk, context, bounds);
    std::copy_n(fv.rgb.value().data(), (int64_t)n * 3, out.rgb.data() + (int64_t)start * 3);
    std::copy_n(fv.feature.value().data(), (int64_t)n * cfg_.feature_dim,
                out.feature.data() + (int64_t)start * cfg_.feature_dim);
    std::copy_n(fv.depth_weights.data(), (int64_t)n * M * D,
                out.depth_weights.data() + (int64_t)start * M * D);
    std::copy_n(fv.view_weights.data(), (int64_t)n * M, out.view_weights.data() + (int64_t)start * M);
  }
  return out;
}

Tensor Eft::feature_grid(const geo::Camera& query, const std::vector<ContextView>& context) const {
  const int G = cfg_.latent_grid;
  if (query.width % G != 0 || query.height % G != 0)
    throw std::invalid_argument("eft: query resolution must be divisible by the latent grid");
  const int pw = query.width / G, ph = query.height / G;
  std::vector<geo::Vec2> pixels;
  pixels.reserve((size_t)G * G);
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j)
      pixels.emplace_back((j + 0.5) * pw - 0.5, (i + 0.5) * ph - 0.5);  // patch centers
  return forward(query, pixels, context).feature.reshaped({G, G, cfg_.feature_dim});
}

// --- loss ----------------------------------------------------------------------

Var eft_loss(const Var& pred_rgb, const Tensor& target_rgb) {
  const auto& s = pred_rgb.value().shape();
  if (s.size() != 2 || s[1] != 3 || target_rgb.shape() != s)
    throw std::invalid_argument("eft_loss: predictions and targets must both be (R, 3)");
  return scale(sum_all(square(sub(pred_rgb, Var::constant(target_rgb)))), 1.f / (float)s[0]);
}

// --- checkpointing ---------------------------------------------------------------

void Eft::save(const std::string& path) const {
  nlohmann::json meta = {{"module", "eft"},
                         {"config", cfg_.to_json()},
                         {"config_hash", ser::config_hash(cfg_.to_json())}};
  ser::save_checkpoint(path, meta, ser::registry_tensors(reg_));
}

Eft Eft::load(const std::string& path, bool force) {
  ser::Checkpoint ck = ser::load_checkpoint(path);
  if (ck.meta.value("module", "") != "eft")
    throw std::runtime_error("checkpoint at " + path + " is not an eft checkpoint");
  const EftConfig cfg = EftConfig::from_json(ck.meta.at("config"));
  ser::check_config_hash(ck, ser::config_hash(cfg.to_json()), force);
  Eft e(cfg, 0);
  ser::load_into_registry(ck, e.reg_);
  return e;
}

}  // namespace sv
