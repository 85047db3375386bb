#include "sv/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "sv/image.hpp"

namespace fs = std::filesystem;

namespace sv::scene {

using geo::Mat3;
using geo::Vec3;

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic value noise on the integer lattice.
double lattice_value(int64_t x, int64_t y, int64_t z, uint64_t seed) {
  uint64_t h = splitmix64((uint64_t)x * 0x8da6b343ull ^ (uint64_t)y * 0xd8163841ull ^
                          (uint64_t)z * 0xcb1ab31full ^ seed);
  return (double)(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(const Vec3& p, uint64_t seed) {
  const int64_t x0 = (int64_t)std::floor(p.x());
  const int64_t y0 = (int64_t)std::floor(p.y());
  const int64_t z0 = (int64_t)std::floor(p.z());
  const double fx = smooth(p.x() - (double)x0);
  const double fy = smooth(p.y() - (double)y0);
  const double fz = smooth(p.z() - (double)z0);
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
        acc += w * lattice_value(x0 + dx, y0 + dy, z0 + dz, seed);
      }
  return acc;
}

double octave_noise(const Vec3& p, double base_scale, int octaves, uint64_t seed) {
  double acc = 0.0, amp = 1.0, total = 0.0, freq = base_scale;
  for (int o = 0; o < octaves; ++o) {
    acc += amp * value_noise(p * freq, seed + (uint64_t)o * 0x9e37ull);
    total += amp;
    amp *= 0.5;
    freq *= 2.0;
  }
  return acc / total;
}

Vec3 texture_color(const Texture& tex, const Vec3& p_obj) {
  switch (tex.kind) {
    case Texture::Kind::Checker: {
      const int64_t sx = (int64_t)std::floor(p_obj.x() * tex.scale);
      const int64_t sy = (int64_t)std::floor(p_obj.y() * tex.scale);
      const int64_t sz = (int64_t)std::floor(p_obj.z() * tex.scale);
      return ((sx + sy + sz) & 1) ? tex.color_b : tex.color_a;
    }
    case Texture::Kind::Gradient: {
      const double t = std::clamp((p_obj.y() + 1.0) * 0.5, 0.0, 1.0);
      return (1.0 - t) * tex.color_a + t * tex.color_b;
    }
    case Texture::Kind::Noise: {
      const double v = octave_noise(p_obj, tex.scale, tex.octaves, tex.seed);
      return (1.0 - v) * tex.color_a + v * tex.color_b;
    }
  }
  return tex.color_a;
}

struct ObjRay {
  Vec3 o, d;  // object space; d not unit
};

ObjRay to_object(const Primitive& prim, const geo::Ray& ray) {
  ObjRay r;
  const Vec3 inv_s(1.0 / prim.scale.x(), 1.0 / prim.scale.y(), 1.0 / prim.scale.z());
  r.o = inv_s.asDiagonal() * (prim.R.transpose() * (ray.origin - prim.pos));
  r.d = inv_s.asDiagonal() * (prim.R.transpose() * ray.dir);
  return r;
}

constexpr double kTMin = 1e-6;

// Unit sphere |p| = 1.
bool hit_sphere(const ObjRay& r, double* t_out, Vec3* n_obj) {
  const double a = r.d.squaredNorm();
  const double b = 2.0 * r.o.dot(r.d);
  const double c = r.o.squaredNorm() - 1.0;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return false;
  const double sq = std::sqrt(disc);
  double t = (-b - sq) / (2.0 * a);
  if (t < kTMin) t = (-b + sq) / (2.0 * a);
  if (t < kTMin) return false;
  *t_out = t;
  *n_obj = r.o + t * r.d;
  return true;
}

// Axis-aligned [-1,1]^3 box via the slab method.
bool hit_box(const ObjRay& r, double* t_out, Vec3* n_obj) {
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  int axis_min = -1;
  for (int i = 0; i < 3; ++i) {
    if (std::abs(r.d[i]) < 1e-15) {
      if (std::abs(r.o[i]) > 1.0) return false;
      continue;
    }
    double t0 = (-1.0 - r.o[i]) / r.d[i];
    double t1 = (1.0 - r.o[i]) / r.d[i];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tmin) {
      tmin = t0;
      axis_min = i;
    }
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return false;
  }
  if (tmin < kTMin || axis_min < 0) return false;  // rays starting inside are not shaded
  *t_out = tmin;
  Vec3 n = Vec3::Zero();
  const Vec3 p = r.o + tmin * r.d;
  n[axis_min] = p[axis_min] > 0.0 ? 1.0 : -1.0;
  *n_obj = n;
  return true;
}

double sq_f(const Vec3& p, double e) {
  return std::pow(std::abs(p.x()), e) + std::pow(std::abs(p.y()), e) +
         std::pow(std::abs(p.z()), e) - 1.0;
}

// |x|^e + |y|^e + |z|^e = 1, solved by bracketing + bisection inside the
// bounding box (the surface lies within [-1,1]^3 for e >= 1).
bool hit_superquadric(const ObjRay& r, double e, double* t_out, Vec3* n_obj) {
  double tmin = kTMin, tmax = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    if (std::abs(r.d[i]) < 1e-15) {
      if (std::abs(r.o[i]) > 1.0) return false;
      continue;
    }
    double t0 = (-1.0 - r.o[i]) / r.d[i];
    double t1 = (1.0 - r.o[i]) / r.d[i];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
  }
  if (tmin >= tmax) return false;

  constexpr int kSteps = 96;
  double prev_t = tmin, prev_f = sq_f(r.o + tmin * r.d, e);
  if (prev_f <= 0.0) {
    if (prev_f > -1e-9) {  // bracket starts exactly on the surface (grazing entry)
      const Vec3 p = r.o + tmin * r.d;
      Vec3 g;
      for (int i = 0; i < 3; ++i)
        g[i] = e * std::pow(std::abs(p[i]), e - 1.0) * (p[i] >= 0.0 ? 1.0 : -1.0);
      *t_out = tmin;
      *n_obj = g;
      return true;
    }
    return false;  // genuinely inside
  }
  double lo = 0.0, hi = 0.0;
  bool found = false;
  for (int i = 1; i <= kSteps; ++i) {
    const double t = tmin + (tmax - tmin) * i / kSteps;
    const double f = sq_f(r.o + t * r.d, e);
    if (f <= 0.0) {
      lo = prev_t;
      hi = t;
      found = true;
      break;
    }
    prev_t = t;
    prev_f = f;
  }
  if (!found) return false;
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (sq_f(r.o + mid * r.d, e) > 0.0 ? lo : hi) = mid;
  }
  const double t = 0.5 * (lo + hi);
  const Vec3 p = r.o + t * r.d;
  Vec3 g;
  for (int i = 0; i < 3; ++i)
    g[i] = e * std::pow(std::abs(p[i]), e - 1.0) * (p[i] >= 0.0 ? 1.0 : -1.0);
  *t_out = t;
  *n_obj = g;
  return true;
}

}  // namespace

std::optional<Hit> trace(const SceneSpec& spec, const geo::Ray& ray) {
  std::optional<Hit> best;
  for (size_t i = 0; i < spec.prims.size(); ++i) {
    const Primitive& prim = spec.prims[i];
    const ObjRay r = to_object(prim, ray);
    double t;
    Vec3 n_obj;
    bool ok = false;
    switch (prim.shape) {
      case Primitive::Shape::Sphere: ok = hit_sphere(r, &t, &n_obj); break;
      case Primitive::Shape::Box: ok = hit_box(r, &t, &n_obj); break;
      case Primitive::Shape::Superquadric:
        ok = hit_superquadric(r, prim.exponent, &t, &n_obj);
        break;
    }
    if (!ok || (best && t >= best->t)) continue;
    Hit h;
    h.t = t;
    h.prim = (int)i;
    h.point = ray.origin + t * ray.dir;
    const Vec3 p_obj = r.o + t * r.d;
    const Vec3 inv_s(1.0 / prim.scale.x(), 1.0 / prim.scale.y(), 1.0 / prim.scale.z());
    h.normal = (prim.R * (inv_s.asDiagonal() * n_obj)).normalized();
    h.albedo = texture_color(prim.tex, p_obj);
    best = h;
  }
  return best;
}

RenderResult render(const SceneSpec& spec, const geo::Camera& cam) {
  RenderResult out;
  out.image = Tensor::zeros({cam.height, cam.width, 3});
  out.mask = Tensor::zeros({cam.height, cam.width, 1});
  out.depth = Tensor::full({cam.height, cam.width, 1}, std::numeric_limits<float>::infinity());
  const Vec3 to_light = -spec.light.dir.normalized();
#pragma omp parallel for schedule(dynamic, 4)
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const geo::Ray ray = pixel_ray(cam, {(double)x, (double)y});
      const auto hit = trace(spec, ray);
      if (!hit) continue;
      const double diffuse = std::max(0.0, hit->normal.dot(to_light));
      const double shade = spec.light.ambient + (1.0 - spec.light.ambient) * diffuse;
      for (int c = 0; c < 3; ++c)
        out.image.at({y, x, c}) = (float)std::clamp(hit->albedo[c] * shade, 0.0, 1.0);
      out.mask.at({y, x, 0}) = 1.f;
      out.depth.at({y, x, 0}) = (float)hit->t;
    }
  }
  return out;
}

nlohmann::json SceneSpec::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["light"] = {{"dir", {light.dir.x(), light.dir.y(), light.dir.z()}},
                {"ambient", light.ambient}};
  j["primitives"] = nlohmann::json::array();
  for (const auto& p : prims) {
    std::vector<double> r(9);
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) r[i * 3 + k] = p.R(i, k);
    const char* shape = p.shape == Primitive::Shape::Sphere  ? "sphere"
                        : p.shape == Primitive::Shape::Box   ? "box"
                                                             : "superquadric";
    const char* tex = p.tex.kind == Texture::Kind::Checker    ? "checker"
                      : p.tex.kind == Texture::Kind::Gradient ? "gradient"
                                                              : "noise";
    j["primitives"].push_back(
        {{"shape", shape},
         {"R", r},
         {"pos", {p.pos.x(), p.pos.y(), p.pos.z()}},
         {"scale", {p.scale.x(), p.scale.y(), p.scale.z()}},
         {"exponent", p.exponent},
         {"texture",
          {{"kind", tex},
           {"color_a", {p.tex.color_a.x(), p.tex.color_a.y(), p.tex.color_a.z()}},
           {"color_b", {p.tex.color_b.x(), p.tex.color_b.y(), p.tex.color_b.z()}},
           {"scale", p.tex.scale},
           {"octaves", p.tex.octaves},
           {"seed", p.tex.seed}}}});
  }
  return j;
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.seed = j.at("seed").get<uint64_t>();
  const auto& l = j.at("light");
  const auto ld = l.at("dir").get<std::vector<double>>();
  s.light.dir = Vec3(ld.at(0), ld.at(1), ld.at(2));
  s.light.ambient = l.at("ambient").get<double>();
  for (const auto& pj : j.at("primitives")) {
    Primitive p;
    const std::string shape = pj.at("shape");
    p.shape = shape == "sphere" ? Primitive::Shape::Sphere
              : shape == "box" ? Primitive::Shape::Box
                               : Primitive::Shape::Superquadric;
    const auto r = pj.at("R").get<std::vector<double>>();
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) p.R(i, k) = r.at(i * 3 + k);
    const auto pos = pj.at("pos").get<std::vector<double>>();
    p.pos = Vec3(pos.at(0), pos.at(1), pos.at(2));
    const auto sc = pj.at("scale").get<std::vector<double>>();
    p.scale = Vec3(sc.at(0), sc.at(1), sc.at(2));
    p.exponent = pj.at("exponent").get<double>();
    const auto& tj = pj.at("texture");
    const std::string tex = tj.at("kind");
    p.tex.kind = tex == "checker" ? Texture::Kind::Checker
                 : tex == "gradient" ? Texture::Kind::Gradient
                                     : Texture::Kind::Noise;
    const auto ca = tj.at("color_a").get<std::vector<double>>();
    p.tex.color_a = Vec3(ca.at(0), ca.at(1), ca.at(2));
    const auto cb = tj.at("color_b").get<std::vector<double>>();
    p.tex.color_b = Vec3(cb.at(0), cb.at(1), cb.at(2));
    p.tex.scale = tj.at("scale").get<double>();
    p.tex.octaves = tj.at("octaves").get<int>();
    p.tex.seed = tj.at("seed").get<uint64_t>();
    s.prims.push_back(p);
  }
  return s;
}

SceneSpec random_scene(uint64_t seed) {
  Rng rng(seed);
  SceneSpec s;
  s.seed = seed;

  auto rand_color = [&]() {
    return Vec3(rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95));
  };
  auto rand_rot = [&]() {
    // Rotation from a random axis-angle; uniform enough for scene variety.
    Vec3 axis(rng.normal(), rng.normal(), rng.normal());
    if (axis.norm() < 1e-9) axis = Vec3::UnitY();
    return Mat3(Eigen::AngleAxisd(rng.uniform(0.0, 2.0 * M_PI), axis.normalized()));
  };

  const int n_prims = rng.uniform_int(1, 3);
  for (int i = 0; i < n_prims; ++i) {
    Primitive p;
    const int shape = rng.uniform_int(0, 2);
    p.shape = shape == 0   ? Primitive::Shape::Sphere
              : shape == 1 ? Primitive::Shape::Box
                           : Primitive::Shape::Superquadric;
    p.exponent = rng.uniform(2.5, 6.0);
    p.R = rand_rot();
    // First primitive is centered so every scene has mass near the origin.
    p.pos = i == 0 ? Vec3(0, 0, 0)
                   : Vec3(rng.uniform(-1.1, 1.1), rng.uniform(-0.6, 0.6),
                          rng.uniform(-1.1, 1.1));
    const double base = rng.uniform(0.55, 1.0);
    p.scale = Vec3(base * rng.uniform(0.7, 1.3), base * rng.uniform(0.7, 1.3),
                   base * rng.uniform(0.7, 1.3));
    const int tex = rng.uniform_int(0, 2);
    p.tex.kind = tex == 0   ? Texture::Kind::Checker
                 : tex == 1 ? Texture::Kind::Gradient
                            : Texture::Kind::Noise;
    p.tex.color_a = rand_color();
    p.tex.color_b = rand_color();
    p.tex.scale = rng.uniform(1.0, 3.0);
    p.tex.octaves = 3;
    p.tex.seed = rng.uniform_int(0, 1 << 30);
    s.prims.push_back(p);
  }
  Vec3 ldir(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, -0.4), rng.uniform(-1.0, 1.0));
  s.light.dir = ldir.normalized();
  s.light.ambient = rng.uniform(0.25, 0.4);
  return s;
}

std::vector<geo::Camera> turntable_cameras(int n, int width, int height, double radius,
                                           double height_above) {
  std::vector<geo::Camera> cams;
  const geo::Vec2 focal(2.0 * width, 2.0 * width);
  const geo::Vec2 pp((width - 1) * 0.5, (height - 1) * 0.5);
  for (int i = 0; i < n; ++i) {
    const double theta = 2.0 * M_PI * i / n;
    const Vec3 eye(radius * std::cos(theta), height_above, radius * std::sin(theta));
    cams.push_back(geo::look_at_camera(eye, Vec3::Zero(), Vec3::UnitY(), focal, pp, width,
                                       height));
  }
  return cams;
}

nlohmann::json make_dataset(const std::string& root, const DatasetParams& params) {
  fs::create_directories(root);
  nlohmann::json index;
  index["seed"] = params.seed;
  index["n_views"] = params.n_views;
  index["width"] = params.width;
  index["height"] = params.height;
  index["scenes"] = nlohmann::json::array();

  for (int i = 0; i < params.n_scenes; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "scene_%04d", i);
    const fs::path dir = fs::path(root) / id;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");

    const SceneSpec spec = random_scene(splitmix64(params.seed ^ (uint64_t)(i + 1) * 0x9e3779b9ull));
    const auto cams = turntable_cameras(params.n_views, params.width, params.height);

    nlohmann::json cam_json;
    cam_json["cameras"] = nlohmann::json::array();
    for (int v = 0; v < params.n_views; ++v) {
      const RenderResult r = render(spec, cams[v]);
      char name[16];
      std::snprintf(name, sizeof(name), "%03d.png", v);
      img::save_png((dir / "images" / name).string(), r.image);
      img::save_png((dir / "masks" / name).string(), r.mask);
      cam_json["cameras"].push_back(cams[v].to_json());
    }
    std::ofstream(dir / "cameras.json") << cam_json.dump(2) << "\n";
    std::ofstream(dir / "spec.json") << spec.to_json().dump(2) << "\n";

    const bool is_eval = params.eval_every > 0 && (i + 1) % params.eval_every == 0;
    index["scenes"].push_back({{"id", id}, {"split", is_eval ? "eval" : "train"}});
  }
  std::ofstream(fs::path(root) / "index.json") << index.dump(2) << "\n";
  return index;
}

LoadedScene load_scene(const std::string& scene_dir) {
  LoadedScene out;
  out.id = fs::path(scene_dir).filename().string();
  std::ifstream cf(fs::path(scene_dir) / "cameras.json");
  if (!cf) throw std::runtime_error("missing cameras.json in " + scene_dir);
  nlohmann::json cam_json = nlohmann::json::parse(cf);
  for (const auto& cj : cam_json.at("cameras")) out.cameras.push_back(geo::Camera::from_json(cj));

  std::ifstream sf(fs::path(scene_dir) / "spec.json");
  if (!sf) throw std::runtime_error("missing spec.json in " + scene_dir);
  out.spec = SceneSpec::from_json(nlohmann::json::parse(sf));

  for (size_t v = 0; v < out.cameras.size(); ++v) {
    char name[16];
    std::snprintf(name, sizeof(name), "%03d.png", (int)v);
    out.images.push_back(img::load_png((fs::path(scene_dir) / "images" / name).string()));
    out.masks.push_back(img::load_png((fs::path(scene_dir) / "masks" / name).string()));
  }
  return out;
}

nlohmann::json load_index(const std::string& root) {
  std::ifstream f(fs::path(root) / "index.json");
  if (!f) throw std::runtime_error("missing index.json in " + root);
  return nlohmann::json::parse(f);
}

}  // namespace sv::scene
