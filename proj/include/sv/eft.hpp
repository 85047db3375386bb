#pragma once

// Epipolar feature transformer. For every query ray we sample backbone
// features along the ray's epipolar line in each context view, tag them with
// harmonic embeddings of the ray geometry, and run a three-stage transformer:
// attention across views per depth, attention across depths per view followed
// by a learned softmax average over depth, then attention across the per-view
// summaries followed by the same average over views. Two linear heads turn the
// aggregate into an RGB prediction (sigmoid, images live in [0,1]) and a
// conditioning feature vector.
//
// All ray geometry is expressed in the query camera frame before it is
// embedded, so the outputs depend on relative pose only: applying one rigid
// transform to every camera leaves the results unchanged.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "sv/autodiff.hpp"
#include "sv/geometry.hpp"
#include "sv/nn.hpp"
#include "sv/rng.hpp"
#include "sv/tensor.hpp"

namespace sv {

struct EftConfig {
  int backbone_channels = 64;  // F: output width of the conv encoder
  int depths = 20;             // D: epipolar samples per (ray, view)
  int hidden = 256;            // transformer width
  int heads = 4;
  int mlp_ratio = 4;
  int layers_per_stage = 4;  // 2 is the documented fast setting
  int feature_dim = 256;     // width of the conditioning feature head
  int harmonics = 6;         // frequencies in the ray/depth embedding
  int latent_grid = 32;      // feature_grid() output is latent_grid^2 rays

  // Query Plucker (6) + context Plucker (6) + normalized depth (1), each
  // expanded to 2*harmonics + 1 scalars, appended to the sampled feature.
  int token_dim() const { return backbone_channels + 13 * (2 * harmonics + 1); }

  void validate() const;  // throws std::invalid_argument
  uint64_t hash() const;
  nlohmann::json to_json() const;
  static EftConfig from_json(const nlohmann::json& j);
};

struct ContextView {
  geo::Camera cam;
  Tensor image;  // (H, W, 3) in [0,1]; H and W divisible by 8
};

// Per-ray outputs plus the aggregation weights, which tests and diagnostics
// inspect: each weight row is nonnegative and sums to 1 unless every token in
// the row is masked, in which case it is all zero.
struct EftOutput {
  Tensor rgb;            // (R, 3) in [0,1]
  Tensor feature;        // (R, feature_dim)
  Tensor depth_weights;  // (R, M, D)
  Tensor view_weights;   // (R, M)
};

class Eft {
 public:
  explicit Eft(EftConfig cfg = {}, uint64_t seed = 0);

  const EftConfig& config() const { return cfg_; }
  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }
  uint64_t param_hash() const { return reg_.value_hash(); }

  // Conv backbone alone: (H, W, 3) -> (H/2, W/2, F), spatially aligned to the
  // input (feature cell (i, j) sits at pixel (2i + 0.5, 2j + 0.5)).
  Tensor extract_features(const Tensor& image) const;

  // Evaluates the query rays through the given pixel centers against the
  // context views. Differentiable variant returns graph nodes for both heads;
  // the plain variant evaluates in fixed-size chunks so peak memory stays
  // bounded for full-image queries.
  struct ForwardVars {
    Var rgb;
    Var feature;
    Tensor depth_weights;
    Tensor view_weights;
  };
  ForwardVars forward_var(const geo::Camera& query, const std::vector<geo::Vec2>& pixels,
                          const std::vector<ContextView>& context) const;
  EftOutput forward(const geo::Camera& query, const std::vector<geo::Vec2>& pixels,
                    const std::vector<ContextView>& context) const;

  // Full conditioning grid: rays through the latent patch centers of the
  // query view, reshaped to (latent_grid, latent_grid, feature_dim).
  Tensor feature_grid(const geo::Camera& query, const std::vector<ContextView>& context) const;

  void save(const std::string& path) const;
  // Refuses a checkpoint whose config hash differs unless force is set (the
  // stored config is used either way so shapes stay consistent).
  static Eft load(const std::string& path, bool force = false);

 private:
  ForwardVars run_rays(const std::vector<Var>& feats, const geo::Camera& query,
                       const std::vector<geo::Vec2>& pixels,
                       const std::vector<ContextView>& context,
                       const geo::DepthBounds& bounds) const;
  Var backbone(const Var& image) const;

  EftConfig cfg_;
  nn::ParamRegistry reg_;
  std::vector<nn::Conv2dLayer> enc_;     // backbone convolutions, in order
  nn::Linear proj_;                      // token_dim -> hidden
  std::vector<nn::TransformerLayer> s1_, s2_, s3_;
  nn::Linear score_d_, score_v_;         // aggregation score heads (hidden -> 1)
  nn::Linear head_rgb_, head_feat_;
  Var null_;                             // fallback token for fully masked rays
};

// Mean over rays of the summed squared RGB error (so a uniform offset of 0.1
// on all channels costs 0.03 per ray).
Var eft_loss(const Var& pred_rgb, const Tensor& target_rgb);

// Depth slab for epipolar sampling, anchored at the point nearest to all
// camera optical axes (query and context) so it moves rigidly with the rig.
geo::DepthBounds eft_depth_bounds(const geo::Camera& query,
                                  const std::vector<ContextView>& context, int n_samples);

}  // namespace sv
