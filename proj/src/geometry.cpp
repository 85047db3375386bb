#include "sv/geometry.hpp"

#include <cmath>

namespace sv::geo {

nlohmann::json Camera::to_json() const {
  std::vector<double> r(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i * 3 + j] = R(i, j);
  return nlohmann::json{{"R", r},
                        {"t", {t.x(), t.y(), t.z()}},
                        {"f", {focal.x(), focal.y()}},
                        {"pp", {pp.x(), pp.y()}},
                        {"wh", {width, height}}};
}

Camera Camera::from_json(const nlohmann::json& j) {
  Camera c;
  const auto r = j.at("R").get<std::vector<double>>();
  if (r.size() != 9) throw std::invalid_argument("camera R must have 9 entries");
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) c.R(i, k) = r[i * 3 + k];
  const auto t = j.at("t").get<std::vector<double>>();
  c.t = Vec3(t.at(0), t.at(1), t.at(2));
  const auto f = j.at("f").get<std::vector<double>>();
  c.focal = Vec2(f.at(0), f.at(1));
  const auto pp = j.at("pp").get<std::vector<double>>();
  c.pp = Vec2(pp.at(0), pp.at(1));
  const auto wh = j.at("wh").get<std::vector<int>>();
  c.width = wh.at(0);
  c.height = wh.at(1);
  return c;
}

Ray pixel_ray(const Camera& cam, const Vec2& pixel) {
  Vec3 dir_cam((pixel.x() - cam.pp.x()) / cam.focal.x(),
               (pixel.y() - cam.pp.y()) / cam.focal.y(), 1.0);
  Ray r;
  r.origin = cam.center();
  r.dir = (cam.R.transpose() * dir_cam).normalized();
  return r;
}

std::vector<Ray> generate_rays(const Camera& cam, const std::vector<Vec2>& pixels) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& p : pixels) {
    if (p.x() < -0.5 || p.y() < -0.5 || p.x() > cam.width - 0.5 || p.y() > cam.height - 0.5)
      throw std::invalid_argument("pixel outside resolution bounds");
    rays.push_back(pixel_ray(cam, p));
  }
  return rays;
}

bool project_point(const Camera& cam, const Vec3& p, Vec2* out) {
  const Vec3 q = cam.R * p + cam.t;
  if (q.z() <= 1e-12) return false;
  if (out)
    *out = Vec2(cam.focal.x() * q.x() / q.z() + cam.pp.x(),
                cam.focal.y() * q.y() / q.z() + cam.pp.y());
  return true;
}

PluckerRay plucker(const Ray& r) {
  PluckerRay p;
  p.d = r.dir.normalized();
  p.m = r.origin.cross(p.d);
  return p;
}

Eigen::VectorXd harmonic_embed(const Eigen::VectorXd& x, int n_frequencies) {
  if (n_frequencies < 1) throw std::invalid_argument("harmonic_embed: n_frequencies >= 1");
  const int n = (int)x.size();
  Eigen::VectorXd out(n * (2 * n_frequencies + 1));
  out.head(n) = x;
  int off = n;
  for (int k = 0; k < n_frequencies; ++k) {
    const double s = std::ldexp(1.0, k);  // 2^k
    for (int i = 0; i < n; ++i) {
      out[off + 2 * i] = std::sin(s * x[i]);
      out[off + 2 * i + 1] = std::cos(s * x[i]);
    }
    off += 2 * n;
  }
  return out;
}

Vec3 nearest_point_to_rays(const std::vector<Ray>& rays) {
  if (rays.size() < 2) throw std::invalid_argument("nearest_point_to_rays: need >= 2 rays");
  Mat3 A = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  for (const auto& r : rays) {
    const Vec3 d = r.dir.normalized();
    const Mat3 P = Mat3::Identity() - d * d.transpose();
    A += P;
    b += P * r.origin;
  }
  Eigen::JacobiSVD<Mat3> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(0) <= 0.0) throw std::runtime_error("nearest_point_to_rays: degenerate (zero system)");
  if (sv(2) / sv(0) < 1e-9) {
    // Rank-deficient: every ray is parallel. If they are also coincident the
    // minimizer is a whole line and no point is meaningful.
    bool coincident = true;
    const Vec3 d0 = rays[0].dir.normalized();
    for (const auto& r : rays)
      if ((r.origin - rays[0].origin).cross(d0).norm() > 1e-9) coincident = false;
    if (coincident)
      throw std::runtime_error(
          "nearest_point_to_rays: degenerate system (all rays parallel and coincident)");
    // Offset parallel rays: minimum-norm least-squares solution.
  }
  Eigen::JacobiSVD<Mat3> solver(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  solver.setThreshold(1e-9);
  return solver.solve(b);
}

EpipolarSamples epipolar_samples(const Ray& query, const DepthBounds& bounds,
                                 const std::vector<Camera>& context) {
  if (bounds.n_samples < 2) throw std::invalid_argument("epipolar_samples: n_samples >= 2");
  if (!(bounds.z_near < bounds.z_far))
    throw std::invalid_argument("epipolar_samples: z_near < z_far required");
  if (context.empty()) throw std::invalid_argument("epipolar_samples: need >= 1 context camera");

  EpipolarSamples out;
  out.depths.resize(bounds.n_samples);
  const double step = (bounds.z_far - bounds.z_near) / (bounds.n_samples - 1);
  for (int i = 0; i < bounds.n_samples; ++i) out.depths[i] = bounds.z_near + step * i;

  out.points.assign(context.size(), std::vector<Vec2>(bounds.n_samples, Vec2::Zero()));
  out.valid.assign(context.size(), std::vector<bool>(bounds.n_samples, false));
  for (size_t m = 0; m < context.size(); ++m) {
    const Camera& cam = context[m];
    for (int i = 0; i < bounds.n_samples; ++i) {
      const Vec3 p = query.origin + out.depths[i] * query.dir;
      Vec2 uv;
      if (!project_point(cam, p, &uv)) continue;
      const bool inside = uv.x() >= 0.0 && uv.y() >= 0.0 && uv.x() <= cam.width - 1.0 &&
                          uv.y() <= cam.height - 1.0;
      out.points[m][i] = uv;
      out.valid[m][i] = inside;
    }
  }
  return out;
}

double mean_camera_distance(const std::vector<Camera>& cams, const Vec3& origin) {
  if (cams.empty()) throw std::invalid_argument("mean_camera_distance: empty");
  double s = 0.0;
  for (const auto& c : cams) s += (c.center() - origin).norm();
  return s / (double)cams.size();
}

DepthBounds depth_bounds_from_cameras(const std::vector<Camera>& cams, int n_samples) {
  const double s = mean_camera_distance(cams);
  DepthBounds b;
  b.z_near = std::max(s - 5.0, 1e-3);  // clamp: tiny rigs must not go behind the camera
  b.z_far = s + 5.0;
  b.n_samples = n_samples;
  return b;
}

namespace {

void make_plane_basis(const Vec3& n, Vec3* u, Vec3* v) {
  const Vec3 a = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  *u = (a - a.dot(n) * n).normalized();
  *v = n.cross(*u);
}

}  // namespace

CameraDistribution fit_camera_distribution(const std::vector<Camera>& cams, double jitter_std) {
  if (cams.size() < 2) throw std::invalid_argument("fit_camera_distribution: need >= 2 cameras");
  CameraDistribution dist;
  dist.jitter_std = jitter_std;

  Vec3 mean = Vec3::Zero();
  for (const auto& c : cams) mean += c.center();
  mean /= (double)cams.size();
  dist.circle_center = mean;

  Vec3 mean_up = Vec3::Zero();
  for (const auto& c : cams) mean_up += c.up();

  if (cams.size() == 2) {
    // Plane normal is underdetermined by two centers; use the component of the
    // mean up-vector orthogonal to the chord between them.
    const Vec3 chord = (cams[1].center() - cams[0].center()).normalized();
    Vec3 n = mean_up - mean_up.dot(chord) * chord;
    if (n.norm() < 1e-12) n = chord.unitOrthogonal();
    dist.circle_normal = n.normalized();
  } else {
    Mat3 cov = Mat3::Zero();
    for (const auto& c : cams) {
      const Vec3 d = c.center() - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    dist.circle_normal = eig.eigenvectors().col(0);  // smallest eigenvalue
  }
  if (dist.circle_normal.dot(mean_up) < 0.0) dist.circle_normal = -dist.circle_normal;

  double radius = 0.0;
  for (const auto& c : cams) radius += (c.center() - dist.circle_center).norm();
  dist.circle_radius = radius / (double)cams.size();

  std::vector<Ray> axes;
  for (const auto& c : cams) axes.push_back({c.center(), c.forward()});
  dist.look_at = nearest_point_to_rays(axes);

  make_plane_basis(dist.circle_normal, &dist.u, &dist.v);
  return dist;
}

Camera look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up_hint,
                      const Vec2& focal, const Vec2& pp, int width, int height) {
  Vec3 z = target - eye;
  if (z.norm() < 1e-12) throw std::invalid_argument("look_at_camera: eye == target");
  z.normalize();
  Vec3 up = up_hint;
  if (z.cross(up).norm() < 1e-9) up = z.unitOrthogonal();
  // Camera frame: +x image right, +y image down, +z forward (so up() == up).
  const Vec3 x = z.cross(up).normalized();
  const Vec3 y = z.cross(x);
  Camera cam;
  cam.R.row(0) = x;
  cam.R.row(1) = y;
  cam.R.row(2) = z;
  cam.t = -cam.R * eye;
  cam.focal = focal;
  cam.pp = pp;
  cam.width = width;
  cam.height = height;
  return cam;
}

Camera sample_camera(const CameraDistribution& dist, const Camera& like, Rng& rng) {
  const double theta = rng.uniform(0.0, 2.0 * M_PI);
  const Vec3 base = dist.circle_center +
                    dist.circle_radius * (std::cos(theta) * dist.u + std::sin(theta) * dist.v);

  // Jitter the elevation of the camera as seen from the look-at point.
  const Vec3 w = base - dist.look_at;
  const double wn = w.dot(dist.circle_normal);
  const Vec3 wp = w - wn * dist.circle_normal;
  const double rp = wp.norm();
  Vec3 eye = base;
  if (rp > 1e-12) {
    const double alpha = std::atan2(wn, rp) + rng.normal(0.0, dist.jitter_std);
    const Vec3 dir_p = wp / rp;
    eye = dist.look_at +
          w.norm() * (std::cos(alpha) * dir_p + std::sin(alpha) * dist.circle_normal);
  }
  return look_at_camera(eye, dist.look_at, dist.circle_normal, like.focal, like.pp, like.width,
                        like.height);
}

double view_angle_deg(const Camera& a, const Camera& b, const Vec3& look_at) {
  const Vec3 da = (a.center() - look_at).normalized();
  const Vec3 db = (b.center() - look_at).normalized();
  const double c = std::clamp(da.dot(db), -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

}  // namespace sv::geo
