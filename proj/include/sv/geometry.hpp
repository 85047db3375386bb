#pragma once

// Camera/ray geometry in double precision. Conventions:
//   - world -> camera: q = R p + t, camera center C = -R^T t
//   - R rows are the camera x/y/z axes in world coordinates; +z looks forward
//   - pixel = (fx qx/qz + cx, fy qy/qz + cy); (0,0) is the top-left pixel center
// All functions are pure; RNG state is always passed explicitly.

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "sv/rng.hpp"

namespace sv::geo {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Camera {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  Vec2 focal{1.0, 1.0};
  Vec2 pp{0.0, 0.0};
  int width = 1, height = 1;

  Vec3 center() const { return -R.transpose() * t; }
  Vec3 forward() const { return R.row(2).transpose(); }  // optical axis, world frame
  Vec3 up() const { return -R.row(1).transpose(); }      // image "up" in world frame

  nlohmann::json to_json() const;
  static Camera from_json(const nlohmann::json& j);
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3::UnitZ();  // unit length
};

struct PluckerRay {
  Vec3 d;  // unit direction
  Vec3 m;  // origin x d  (origin-independent)
};

struct DepthBounds {
  double z_near = 0.0;
  double z_far = 1.0;
  int n_samples = 20;
};

struct CameraDistribution {
  Vec3 circle_center = Vec3::Zero();
  double circle_radius = 1.0;
  Vec3 circle_normal = Vec3::UnitY();
  Vec3 look_at = Vec3::Zero();
  double jitter_std = 0.17;
  // orthonormal in-plane basis, derived from the normal
  Vec3 u = Vec3::UnitX(), v = Vec3::UnitZ();
};

// Pixel coordinates are pixel centers; (0,0) maps through the principal point.
Ray pixel_ray(const Camera& cam, const Vec2& pixel);
std::vector<Ray> generate_rays(const Camera& cam, const std::vector<Vec2>& pixels);

// Returns false (and leaves *out* untouched) for points at/behind the camera.
bool project_point(const Camera& cam, const Vec3& p, Vec2* out);

PluckerRay plucker(const Ray& r);

// [x, sin(2^0 x), cos(2^0 x), ..., sin(2^{f-1} x), cos(2^{f-1} x)] per element,
// grouped by frequency; output dim = n * (2*n_frequencies + 1).
Eigen::VectorXd harmonic_embed(const Eigen::VectorXd& x, int n_frequencies = 6);

// Least-squares point minimizing summed squared distances to the rays.
// All-parallel ray bundles resolve to the minimum-norm solution (the symmetric
// midpoint for symmetric configurations); coincident bundles are an error.
Vec3 nearest_point_to_rays(const std::vector<Ray>& rays);

struct EpipolarSamples {
  std::vector<double> depths;                 // D, linearly spaced inclusive
  std::vector<std::vector<Vec2>> points;      // M x D pixel coords
  std::vector<std::vector<bool>> valid;       // M x D
};

EpipolarSamples epipolar_samples(const Ray& query, const DepthBounds& bounds,
                                 const std::vector<Camera>& context);

double mean_camera_distance(const std::vector<Camera>& cams, const Vec3& origin = Vec3::Zero());

DepthBounds depth_bounds_from_cameras(const std::vector<Camera>& cams, int n_samples = 20);

CameraDistribution fit_camera_distribution(const std::vector<Camera>& cams,
                                           double jitter_std = 0.17);

Camera look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up_hint,
                      const Vec2& focal, const Vec2& pp, int width, int height);

// Uniform azimuth on the circle, Gaussian jitter of the elevation angle about
// the look-at point; intrinsics/resolution copied from `like`.
Camera sample_camera(const CameraDistribution& dist, const Camera& like, Rng& rng);

// Angle (degrees) at the look-at point between the two camera directions.
double view_angle_deg(const Camera& a, const Camera& b, const Vec3& look_at);

}  // namespace sv::geo
