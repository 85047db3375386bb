#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sv/autodiff.hpp"
#include "sv/geometry.hpp"
#include "sv/nn.hpp"
#include "sv/rng.hpp"
#include "sv/tensor.hpp"

// Instance-specific neural field: a multiresolution hash-grid encoding feeding
// a small MLP that emits density and color, a stratified volumetric renderer,
// and iso-surface mesh extraction for export.
namespace sv::field {

// A fresh field should read as empty space; densities below this are treated
// as "no content" by tests and by the distillation bootstrap.
constexpr float kEmptySpaceSigma = 0.05f;

// --- hash-grid encoding ------------------------------------------------------

struct HashGridConfig {
  int levels = 14;
  int log2_table = 19;  // 2^19 entries per level
  int features = 2;     // feature width per level
  int base_res = 16;
  int max_res = 8192;   // finest grid resolution
  float bound = 4.0f;   // scene AABB is [-bound, bound]^3

  int64_t table_size() const { return int64_t(1) << log2_table; }
  int feature_dim() const { return levels * features; }
  // Per-level grid resolution, geometric from base_res to max_res.
  int resolution(int level) const;

  nlohmann::json to_json() const;
  static HashGridConfig from_json(const nlohmann::json& j);
};

// Trainable multi-level feature table. Lookup hashes the 8 cell corners with
// fixed primes and blends their entries trilinearly; gradients flow into the
// table only (query points are never optimized here).
class HashGrid {
 public:
  HashGrid(const HashGridConfig& cfg, nn::ParamRegistry& reg, const std::string& prefix, Rng& rng);

  // points (P,3) in world space -> features (P, levels*features).
  Tensor encode(const Tensor& points) const { return encode_var(points).value(); }
  Var encode_var(const Tensor& points) const;

  const HashGridConfig& config() const { return cfg_; }
  const Var& table() const { return table_; }  // (levels * table_size, features)

  // Out-of-bound queries are clamped to the box and counted rather than
  // rejected; distillation cameras may graze the bounds.
  int64_t clamp_count() const { return clamped_; }
  void reset_clamp_count() { clamped_ = 0; }

 private:
  HashGridConfig cfg_;
  Var table_;
  mutable int64_t clamped_ = 0;
};

// --- field -------------------------------------------------------------------

// Anything that can report density and color at world points. The neural
// field implements it; tests substitute analytic media.
struct DensityColorField {
  virtual ~DensityColorField() = default;
  // points (P,3) -> sigma (P) with sigma >= 0, rgb (P,3) in [0,1].
  virtual void sample(const Tensor& points, Tensor* sigma, Tensor* rgb) const = 0;
  // Extent of the renderable region; rays are clipped to [-bound, bound]^3.
  virtual float bound() const = 0;
};

class NeuralField final : public DensityColorField {
 public:
  explicit NeuralField(const HashGridConfig& cfg = {}, uint64_t seed = 0);

  void sample(const Tensor& points, Tensor* sigma, Tensor* rgb) const override;
  float bound() const override { return cfg_.bound; }

  // Tape-recorded query for optimization: sigma (P), rgb (P,3).
  std::pair<Var, Var> query_var(const Tensor& points) const;

  const HashGridConfig& config() const { return cfg_; }
  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }
  int64_t clamp_count() const { return grid_->clamp_count(); }
  uint64_t param_hash() const { return reg_.value_hash(); }

  // Throws naming the offending parameter block if any value is non-finite.
  void validate() const;

  void save(const std::string& path) const;
  static NeuralField load(const std::string& path);

 private:
  HashGridConfig cfg_;
  nn::ParamRegistry reg_;
  std::unique_ptr<HashGrid> grid_;
  nn::Linear l1_, l2_, l3_;  // encoding -> 64 -> 64 -> (1 density + 3 color)
};

// --- rendering ---------------------------------------------------------------

struct RenderSettings {
  int width = 128;
  int height = 128;
  int samples = 64;   // quadrature bins per ray (>= 2)
  uint64_t seed = 0;  // stratified jitter seed
  bool jitter = true; // false = midpoint rule, exactly reproducible quadrature
};

struct RenderMaps {
  Tensor image;  // (H,W,3), black background
  Tensor alpha;  // (H,W), 1 - final transmittance
  Tensor depth;  // (H,W), expected termination distance (far where empty)
};

// Per-ray quadrature: the [near,far] span from intersecting the scene bounds
// is split into `samples` equal bins, one jittered sample per bin, so the bin
// widths sum to the span exactly. alpha_i = 1 - exp(-sigma_i * h),
// T_i = prod_{j<i} (1 - alpha_j), pixel = sum_i T_i alpha_i c_i.
RenderMaps render(const DensityColorField& f, const geo::Camera& cam, const RenderSettings& s);

// Transmittance after each of the uniform-width bins; used by tests and by
// the renderer itself. T is non-increasing and stays within [0,1].
std::vector<float> transmittance_profile(const std::vector<float>& sigma, float h);

// Tape-recorded rendering of an explicit ray batch (for fitting): returns
// predicted pixels (R,3). Rays outside the bounds contribute pure background.
Var render_rays_var(const NeuralField& f, const std::vector<geo::Ray>& rays,
                    const RenderSettings& s);

// --- fitting -----------------------------------------------------------------

struct PosedImage {
  geo::Camera cam;
  Tensor image;  // (H,W,3) in [0,1]
};

struct FitConfig {
  int steps = 500;
  float lr = 5e-4f;
  int rays_per_step = 1024;
  int samples = 64;
  uint64_t seed = 0;
  int snapshot_every = 10;  // divergence rollback granularity
};

struct FitResult {
  int steps_run = 0;
  float final_loss = 0.f;
  bool aborted = false;  // loss went non-finite; params restored to snapshot
};

// Adam on the mean squared rendering error over random ray batches drawn from
// the posed views. On divergence the last snapshot is restored and the fit
// reports aborted.
FitResult fit_to_images(NeuralField& f, const std::vector<PosedImage>& views, const FitConfig& cfg);

// --- mesh extraction ---------------------------------------------------------

struct TriMesh {
  std::vector<std::array<float, 3>> vertices;
  std::vector<std::array<int, 3>> faces;  // CCW seen from outside

  // Sum of signed tetrahedron volumes; positive for outward orientation.
  double signed_volume() const;
  void save_obj(const std::string& path) const;
};

// Iso-surface of the density field over a grid_res^3 cell grid spanning the
// scene bounds. Each cell is split into six tetrahedra sharing the main
// diagonal (conforming across cells, so the surface is watertight); vertices
// are placed by linear interpolation along tetrahedron edges and triangles
// are oriented with normals pointing toward lower density. An empty
// iso-surface yields an empty mesh.
TriMesh extract_mesh(const DensityColorField& f, int grid_res, float iso_level);

// Same extraction from a pre-sampled (n+1)^3 scalar grid (x-major index
// layout values[(ix*(n+1) + iy)*(n+1) + iz]) over [-bound, bound]^3.
TriMesh iso_surface(const std::vector<float>& values, int grid_res, float bound, float iso_level);

}  // namespace sv::field
