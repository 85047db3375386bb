#pragma once

// Procedural multi-view dataset: textured primitives (sphere / box /
// superquadric) rendered with an exact analytic ray tracer under a
// directional + ambient Lambertian model. Cameras sit on a turntable circle
// looking at the origin. Output layout:
//   root/scene_XXXX/{images/NNN.png, masks/NNN.png, cameras.json, spec.json}
//   root/index.json

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sv/geometry.hpp"
#include "sv/rng.hpp"
#include "sv/tensor.hpp"

namespace sv::scene {

struct Texture {
  enum class Kind { Checker, Gradient, Noise };
  Kind kind = Kind::Checker;
  geo::Vec3 color_a{0.9, 0.9, 0.9};
  geo::Vec3 color_b{0.1, 0.1, 0.1};
  double scale = 2.0;   // checker/noise frequency
  int octaves = 3;      // noise only
  uint64_t seed = 0;    // noise only
};

struct Primitive {
  enum class Shape { Sphere, Box, Superquadric };
  Shape shape = Shape::Sphere;
  geo::Mat3 R = geo::Mat3::Identity();  // object->world rotation
  geo::Vec3 pos = geo::Vec3::Zero();
  geo::Vec3 scale{1.0, 1.0, 1.0};
  double exponent = 4.0;  // superquadric only
  Texture tex;
};

struct Light {
  geo::Vec3 dir{-0.4, -0.8, 0.45};  // direction light travels (world)
  double ambient = 0.3;
};

struct SceneSpec {
  uint64_t seed = 0;
  std::vector<Primitive> prims;
  Light light;

  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
};

SceneSpec random_scene(uint64_t seed);

struct Hit {
  double t = 0.0;
  geo::Vec3 point = geo::Vec3::Zero();
  geo::Vec3 normal = geo::Vec3::Zero();
  geo::Vec3 albedo = geo::Vec3::Zero();
  int prim = -1;
};

// Nearest intersection along the ray, if any.
std::optional<Hit> trace(const SceneSpec& spec, const geo::Ray& ray);

struct RenderResult {
  Tensor image;  // (H,W,3) in [0,1], black background
  Tensor mask;   // (H,W,1) exactly 0/1
  Tensor depth;  // (H,W,1), +inf where mask == 0
};

RenderResult render(const SceneSpec& spec, const geo::Camera& cam);

// n cameras with linearly spaced azimuth on a circle of the given radius and
// height (world up = +y), all looking at the origin.
std::vector<geo::Camera> turntable_cameras(int n, int width, int height, double radius = 9.8,
                                           double height_above = 2.0);

struct DatasetParams {
  int n_scenes = 10;
  int n_views = 32;
  int width = 64, height = 64;
  uint64_t seed = 0;
  int eval_every = 5;  // every k-th scene goes to the eval split
};

// Writes the full layout; returns the index JSON that was written.
nlohmann::json make_dataset(const std::string& root, const DatasetParams& params);

// Loaders for the layout above.
struct LoadedScene {
  std::string id;
  std::vector<Tensor> images;  // (H,W,3)
  std::vector<Tensor> masks;   // (H,W,1)
  std::vector<geo::Camera> cameras;
  SceneSpec spec;
};

LoadedScene load_scene(const std::string& scene_dir);
nlohmann::json load_index(const std::string& root);

}  // namespace sv::scene
