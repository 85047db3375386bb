#include "sv/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "sv/kernels.hpp"
#include "sv/serialize.hpp"

namespace sv::field {

// --- hash grid ---------------------------------------------------------------

// Fixed spatial-hash primes (x is multiplied by 1), so tables are portable
// across builds. 32-bit wrap-around is part of the hash definition.
constexpr uint32_t kHashY = 2654435761u;
constexpr uint32_t kHashZ = 805459861u;

static uint64_t corner_hash(int64_t x, int64_t y, int64_t z, int64_t table_size) {
  const uint32_t h = (uint32_t)x ^ ((uint32_t)y * kHashY) ^ ((uint32_t)z * kHashZ);
  return (uint64_t)h & (uint64_t)(table_size - 1);
}

int HashGridConfig::resolution(int level) const {
  if (level < 0 || level >= levels) throw std::invalid_argument("hash grid: level out of range");
  if (levels == 1) return max_res;
  const double g = std::exp((std::log((double)max_res) - std::log((double)base_res)) /
                            (double)(levels - 1));
  if (level == levels - 1) return max_res;  // hit the target resolution exactly
  return (int)std::lround((double)base_res * std::pow(g, level));
}

nlohmann::json HashGridConfig::to_json() const {
  return {{"levels", levels},     {"log2_table", log2_table}, {"features", features},
          {"base_res", base_res}, {"max_res", max_res},       {"bound", bound}};
}

HashGridConfig HashGridConfig::from_json(const nlohmann::json& j) {
  HashGridConfig c;
  c.levels = j.at("levels").get<int>();
  c.log2_table = j.at("log2_table").get<int>();
  c.features = j.at("features").get<int>();
  c.base_res = j.at("base_res").get<int>();
  c.max_res = j.at("max_res").get<int>();
  c.bound = j.at("bound").get<float>();
  return c;
}

HashGrid::HashGrid(const HashGridConfig& cfg, nn::ParamRegistry& reg, const std::string& prefix,
                   Rng& rng)
    : cfg_(cfg) {
  if (cfg.levels < 1 || cfg.features < 1 || cfg.log2_table < 1)
    throw std::invalid_argument("hash grid: config fields must be positive");
  if (cfg.base_res < 1 || (cfg.levels > 1 && cfg.max_res <= cfg.base_res))
    throw std::invalid_argument("hash grid: resolutions must increase from base to max");
  if (!(cfg.bound > 0.f)) throw std::invalid_argument("hash grid: bound must be positive");
  table_ = reg.create(prefix + "/table",
                      nn::uniform_init(rng, {(int)(cfg.levels * cfg.table_size()), cfg.features},
                                       1e-4f));
}

namespace {
// Corner table rows and trilinear weights for one point at one level. Shared
// by the forward pass and the backward scatter so both see identical weights.
void corner_weights(const HashGridConfig& cfg, const float* point, int level, int64_t rows[8],
                    float wts[8]) {
  const double b = cfg.bound;
  const int64_t T = cfg.table_size();
  const int N = cfg.resolution(level);
  int64_t i0[3];
  double fr[3];
  for (int a = 0; a < 3; ++a) {
    const double u = std::clamp(((double)point[a] + b) / (2.0 * b), 0.0, 1.0);
    const double x = u * (double)N;
    int64_t i = (int64_t)std::floor(x);
    i = std::clamp<int64_t>(i, 0, N - 1);
    i0[a] = i;
    fr[a] = x - (double)i;
  }
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    const double w = (dx ? fr[0] : 1.0 - fr[0]) * (dy ? fr[1] : 1.0 - fr[1]) *
                     (dz ? fr[2] : 1.0 - fr[2]);
    rows[c] = (int64_t)level * T + (int64_t)corner_hash(i0[0] + dx, i0[1] + dy, i0[2] + dz, T);
    wts[c] = (float)w;
  }
}
}  // namespace

Var HashGrid::encode_var(const Tensor& points) const {
  if (points.ndim() != 2 || points.dim(1) != 3)
    throw std::invalid_argument("hash grid: points must be (P,3)");
  const int P = points.dim(0);
  const int L = cfg_.levels, F = cfg_.features;
  const float b = cfg_.bound;

  Tensor out({P, L * F});
  const float* tab = table_.value().data();
  const float* pp = points.data();
  float* op = out.data();
  int64_t clamped = 0;

#pragma omp parallel for schedule(static) reduction(+ : clamped) \
    if (kernels::parallel_enabled() && P > 256)
  for (int p = 0; p < P; ++p) {
    const float* pt = pp + (int64_t)p * 3;
    if (pt[0] < -b || pt[0] > b || pt[1] < -b || pt[1] > b || pt[2] < -b || pt[2] > b) ++clamped;
    int64_t rows[8];
    float wts[8];
    for (int l = 0; l < L; ++l) {
      corner_weights(cfg_, pt, l, rows, wts);
      float* dst = op + ((int64_t)p * L + l) * F;
      for (int f = 0; f < F; ++f) dst[f] = 0.f;
      for (int c = 0; c < 8; ++c)
        for (int f = 0; f < F; ++f) dst[f] += wts[c] * tab[rows[c] * F + f];
    }
  }
  clamped_ += clamped;

  // The backward scatter recomputes the corner weights from the captured
  // points (cheaper than saving P*L*8 of them) and stays serial so the
  // accumulation order is deterministic when points share a table row.
  const HashGridConfig cfg = cfg_;
  return make_op(std::move(out), {table_}, [cfg, points, P, L, F](Node& n) {
    float* dt = n.parents[0]->ensure_grad().data();
    const float* up = n.grad.data();
    const float* pp = points.data();
    int64_t rows[8];
    float wts[8];
    for (int p = 0; p < P; ++p)
      for (int l = 0; l < L; ++l) {
        corner_weights(cfg, pp + (int64_t)p * 3, l, rows, wts);
        const float* g = up + ((int64_t)p * L + l) * F;
        for (int c = 0; c < 8; ++c) {
          float* dst = dt + rows[c] * F;
          for (int f = 0; f < F; ++f) dst[f] += wts[c] * g[f];
        }
      }
  });
}

// --- neural field ------------------------------------------------------------

NeuralField::NeuralField(const HashGridConfig& cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng(seed);
  grid_ = std::make_unique<HashGrid>(cfg_, reg_, "grid", rng);
  l1_ = nn::Linear(reg_, "mlp/l1", cfg_.feature_dim(), 64, rng);
  l2_ = nn::Linear(reg_, "mlp/l2", 64, 64, rng);
  l3_ = nn::Linear(reg_, "mlp/l3", 64, 4, rng);
  // Bias the density head negative so a fresh field reads as empty space;
  // distillation starts from a fit and an empty start avoids stray occluders.
  l3_.b.node()->value.at(0) = -4.f;
}

std::pair<Var, Var> NeuralField::query_var(const Tensor& points) const {
  const int P = points.dim(0);
  Var h = silu(l1_.forward(grid_->encode_var(points)));
  h = silu(l2_.forward(h));
  Var head = l3_.forward(h);  // (P,4)
  Var sigma = reshape(softplus(slice(head, 1, 0, 1)), {P});
  Var rgb = sigmoid(slice(head, 1, 1, 3));
  return {sigma, rgb};
}

void NeuralField::sample(const Tensor& points, Tensor* sigma, Tensor* rgb) const {
  validate();
  const int P = points.dim(0);
  Tensor s({P}), c({P, 3});
  constexpr int kChunk = 16384;
  for (int start = 0; start < P; start += kChunk) {
    const int n = std::min(kChunk, P - start);
    Tensor part({n, 3});
    std::memcpy(part.data(), points.data() + (int64_t)start * 3, sizeof(float) * 3 * n);
    auto [sig, col] = query_var(part);
    std::memcpy(s.data() + start, sig.value().data(), sizeof(float) * n);
    std::memcpy(c.data() + (int64_t)start * 3, col.value().data(), sizeof(float) * 3 * n);
  }
  if (sigma) *sigma = std::move(s);
  if (rgb) *rgb = std::move(c);
}

void NeuralField::validate() const {
  for (const auto& item : reg_.items()) {
    const Tensor& t = item.var.node()->value;
    const float* d = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
      if (!std::isfinite(d[i]))
        throw std::runtime_error("non-finite values in field parameter block '" + item.name + "'");
  }
}

void NeuralField::save(const std::string& path) const {
  nlohmann::json meta = {{"module", "field"}, {"config", cfg_.to_json()}};
  ser::save_checkpoint(path, meta, ser::registry_tensors(reg_));
}

NeuralField NeuralField::load(const std::string& path) {
  ser::Checkpoint ck = ser::load_checkpoint(path);
  if (ck.meta.value("module", "") != "field")
    throw std::runtime_error("checkpoint at " + path + " is not a field checkpoint");
  NeuralField f(HashGridConfig::from_json(ck.meta.at("config")), 0);
  ser::load_into_registry(ck, f.reg_);
  return f;
}

// --- rendering ---------------------------------------------------------------

// Slab intersection with [-b,b]^3; returns false when the ray misses. near is
// clamped to the camera side (t >= 0).
static bool clip_to_bounds(const geo::Ray& r, float b, double* near, double* far) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double o = r.origin[a], d = r.dir[a];
    if (std::abs(d) < 1e-12) {
      if (o < -b || o > b) return false;
      continue;
    }
    double ta = (-b - o) / d, tb = (b - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t1 > t0)) return false;
  *near = t0;
  *far = t1;
  return true;
}

std::vector<float> transmittance_profile(const std::vector<float>& sigma, float h) {
  std::vector<float> T(sigma.size());
  float t = 1.f;
  for (size_t i = 0; i < sigma.size(); ++i) {
    t *= std::exp(-sigma[i] * h);
    T[i] = t;
  }
  return T;
}

// One jitter stream per ray, decorrelated by splitting on the ray index.
static inline uint64_t ray_seed(uint64_t seed, int64_t ray) {
  return seed * 6364136223846793005ULL + (uint64_t)(ray + 1) * 1442695040888963407ULL;
}

namespace {
struct RaySpan {
  float near = 0.f, h = 0.f;  // h == 0 marks a ray that misses the bounds
};

// Fills sample positions for a ray block and reports each ray's bin width.
// Sample k of a ray sits at near + (k + u_k) * h with u_k in [0,1), so the
// bins tile [near, far] exactly. Jitter streams are tied to index_offset +
// block position, letting callers identify rays globally (e.g. by pixel).
void place_samples(const std::vector<geo::Ray>& rays, float bound, int S, uint64_t seed,
                   bool jitter, int64_t index_offset, Tensor* points,
                   std::vector<RaySpan>* spans) {
  const int R = (int)rays.size();
  float* pp = points->data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && R > 64)
  for (int r = 0; r < R; ++r) {
    double near, far;
    RaySpan span;
    if (clip_to_bounds(rays[r], bound, &near, &far)) {
      span.near = (float)near;
      span.h = (float)((far - near) / S);
    }
    (*spans)[r] = span;
    Rng jrng(ray_seed(seed, index_offset + r));
    for (int k = 0; k < S; ++k) {
      const double u = jitter ? jrng.uniform() : 0.5;
      const double t = span.near + ((double)k + u) * span.h;
      for (int a = 0; a < 3; ++a)
        pp[((int64_t)r * S + k) * 3 + a] = (float)(rays[r].origin[a] + t * rays[r].dir[a]);
    }
  }
}
}  // namespace

RenderMaps render(const DensityColorField& f, const geo::Camera& cam, const RenderSettings& s) {
  if (s.samples < 2) throw std::invalid_argument("render: need at least 2 samples per ray");
  const int W = s.width > 0 ? s.width : cam.width;
  const int H = s.height > 0 ? s.height : cam.height;
  // Rendering at reduced resolution keeps the camera frustum by scaling the
  // intrinsics with the image.
  geo::Camera rc = cam;
  rc.width = W;
  rc.height = H;
  rc.focal = geo::Vec2(cam.focal.x() * (double)W / cam.width,
                       cam.focal.y() * (double)H / cam.height);
  rc.pp = geo::Vec2(cam.pp.x() * (double)W / cam.width, cam.pp.y() * (double)H / cam.height);

  RenderMaps maps;
  maps.image = Tensor::zeros({H, W, 3});
  maps.alpha = Tensor::zeros({H, W});
  maps.depth = Tensor::zeros({H, W});

  const int S = s.samples;
  constexpr int kRayChunk = 2048;
  for (int64_t start = 0; start < (int64_t)H * W; start += kRayChunk) {
    const int n = (int)std::min<int64_t>(kRayChunk, (int64_t)H * W - start);
    std::vector<geo::Ray> rays(n);
    for (int i = 0; i < n; ++i) {
      const int64_t px = start + i;
      rays[i] = geo::pixel_ray(rc, geo::Vec2((double)(px % W) + 0.5, (double)(px / W) + 0.5));
    }
    // Jitter streams follow the absolute pixel index, so the image does not
    // depend on the chunk size.
    std::vector<RaySpan> spans(n);
    Tensor points({n * S, 3});
    place_samples(rays, f.bound(), S, s.seed, s.jitter, start, &points, &spans);
    Tensor sigma, rgb;
    f.sample(points, &sigma, &rgb);
    const float* sp = sigma.data();
    const float* cp = rgb.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && n > 64)
    for (int r = 0; r < n; ++r) {
      const int64_t px = start + r;
      float* out = maps.image.data() + px * 3;
      float T = 1.f, depth = 0.f;
      const float h = spans[r].h;
      const float far = spans[r].near + h * S;
      for (int k = 0; k < S && h > 0.f; ++k) {
        const float alpha = 1.f - std::exp(-sp[(int64_t)r * S + k] * h);
        const float contrib = T * alpha;
        const float tk = spans[r].near + ((float)k + 0.5f) * h;
        for (int a = 0; a < 3; ++a) out[a] += contrib * cp[((int64_t)r * S + k) * 3 + a];
        depth += contrib * tk;
        T *= 1.f - alpha;
      }
      maps.alpha.at(px) = 1.f - T;
      maps.depth.at(px) = depth + T * far;  // unfilled mass terminates at far
    }
  }
  return maps;
}

Var render_rays_var(const NeuralField& f, const std::vector<geo::Ray>& rays,
                    const RenderSettings& s) {
  if (s.samples < 2) throw std::invalid_argument("render: need at least 2 samples per ray");
  const int R = (int)rays.size(), S = s.samples;
  Tensor points({R * S, 3});
  auto spans = std::make_shared<std::vector<RaySpan>>(R);
  place_samples(rays, f.bound(), S, s.seed, s.jitter, 0, &points, spans.get());

  auto [sigma, rgb] = f.query_var(points);  // (R*S), (R*S,3)

  Tensor out = Tensor::zeros({R, 3});
  {
    const float* sp = sigma.value().data();
    const float* cp = rgb.value().data();
    float* op = out.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && R > 64)
    for (int r = 0; r < R; ++r) {
      float T = 1.f;
      const float h = (*spans)[r].h;
      for (int k = 0; k < S && h > 0.f; ++k) {
        const float alpha = 1.f - std::exp(-sp[(int64_t)r * S + k] * h);
        for (int a = 0; a < 3; ++a)
          op[(int64_t)r * 3 + a] += T * alpha * cp[((int64_t)r * S + k) * 3 + a];
        T *= 1.f - alpha;
      }
    }
  }

  // d pixel / d c_k = T_k alpha_k; d pixel / d sigma_k = h * (T_{k+1} c_k -
  // sum_{m>k} T_m alpha_m c_m), both folded against the incoming gradient.
  return make_op(std::move(out), {sigma, rgb}, [spans, R, S](Node& n) {
    const Tensor& sv = n.parents[0]->value;
    const Tensor& cv = n.parents[1]->value;
    Tensor& ds = n.parents[0]->ensure_grad();
    Tensor& dc = n.parents[1]->ensure_grad();
    const float* sp = sv.data();
    const float* cp = cv.data();
    float* dsp = ds.data();
    float* dcp = dc.data();
    const float* up = n.grad.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && R > 64)
    for (int r = 0; r < R; ++r) {
      const float h = (*spans)[r].h;
      if (h <= 0.f) continue;
      std::vector<float> Tk(S + 1), ak(S);
      Tk[0] = 1.f;
      for (int k = 0; k < S; ++k) {
        ak[k] = 1.f - std::exp(-sp[(int64_t)r * S + k] * h);
        Tk[k + 1] = Tk[k] * (1.f - ak[k]);
      }
      const float* g = up + (int64_t)r * 3;
      float suffix[3] = {0.f, 0.f, 0.f};  // sum_{m>k} T_m alpha_m c_m, built in reverse
      for (int k = S - 1; k >= 0; --k) {
        const float* ck = cp + ((int64_t)r * S + k) * 3;
        float dsig = 0.f;
        for (int a = 0; a < 3; ++a) {
          dcp[((int64_t)r * S + k) * 3 + a] += g[a] * Tk[k] * ak[k];
          dsig += g[a] * (Tk[k + 1] * ck[a] - suffix[a]);
        }
        dsp[(int64_t)r * S + k] += h * dsig;
        for (int a = 0; a < 3; ++a) suffix[a] += Tk[k] * ak[k] * ck[a];
      }
    }
  });
}

// --- fitting -----------------------------------------------------------------

FitResult fit_to_images(NeuralField& f, const std::vector<PosedImage>& views,
                        const FitConfig& cfg) {
  if (views.empty()) throw std::invalid_argument("fit_to_images: need at least one posed view");
  for (const auto& v : views)
    if (v.image.ndim() != 3 || v.image.dim(2) != 3 || v.image.dim(0) != v.cam.height ||
        v.image.dim(1) != v.cam.width)
      throw std::invalid_argument("fit_to_images: image does not match its camera resolution");
  f.validate();
  FitResult res;
  if (cfg.steps <= 0) return res;  // zero steps leaves the field untouched

  nn::Adam opt(f.params(), cfg.lr);
  Rng rng(cfg.seed);
  std::vector<Tensor> snapshot;
  auto take_snapshot = [&] {
    snapshot.clear();
    for (const auto& item : f.params().items()) snapshot.push_back(item.var.node()->value.clone());
  };
  auto restore_snapshot = [&] {
    for (size_t i = 0; i < snapshot.size(); ++i) {
      Tensor& dst = f.params().items()[i].var.node()->value;
      std::memcpy(dst.data(), snapshot[i].data(), sizeof(float) * dst.numel());
    }
  };

  RenderSettings rs;
  rs.samples = cfg.samples;
  rs.jitter = true;
  std::vector<geo::Ray> rays(cfg.rays_per_step);
  Tensor target({cfg.rays_per_step, 3});
  for (int step = 0; step < cfg.steps; ++step) {
    if (step % std::max(1, cfg.snapshot_every) == 0) take_snapshot();
    for (int r = 0; r < cfg.rays_per_step; ++r) {
      const int v = (int)rng.uniform_int(0, (int)views.size() - 1);
      const int px = (int)rng.uniform_int(0, views[v].cam.width - 1);
      const int py = (int)rng.uniform_int(0, views[v].cam.height - 1);
      rays[r] = geo::pixel_ray(views[v].cam, geo::Vec2(px + 0.5, py + 0.5));
      for (int a = 0; a < 3; ++a) target.at({r, a}) = views[v].image.at({py, px, a});
    }
    rs.seed = (uint64_t)rng.uniform_int(0, std::numeric_limits<int32_t>::max());
    Var loss = mse(render_rays_var(f, rays, rs), Var::constant(target));
    const float L = loss.value().at(0);
    if (!std::isfinite(L)) {  // divergence: roll back to the last good params
      restore_snapshot();
      res.aborted = true;
      break;
    }
    f.params().zero_grads();
    backward(loss);
    opt.step();
    res.final_loss = L;
    res.steps_run = step + 1;
  }
  return res;
}

// --- mesh extraction ---------------------------------------------------------

double TriMesh::signed_volume() const {
  double vol = 0.0;
  for (const auto& f : faces) {
    const auto& a = vertices[f[0]];
    const auto& b = vertices[f[1]];
    const auto& c = vertices[f[2]];
    const double cx = (double)b[1] * c[2] - (double)b[2] * c[1];
    const double cy = (double)b[2] * c[0] - (double)b[0] * c[2];
    const double cz = (double)b[0] * c[1] - (double)b[1] * c[0];
    vol += (a[0] * cx + a[1] * cy + a[2] * cz) / 6.0;
  }
  return vol;
}

void TriMesh::save_obj(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "# " << vertices.size() << " vertices, " << faces.size() << " faces\n";
  for (const auto& v : vertices) out << "v " << v[0] << " " << v[1] << " " << v[2] << "\n";
  for (const auto& f : faces)
    out << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
  if (!out.good()) throw std::runtime_error("failed writing " + path);
}

namespace {
struct VertexKey {
  float x, y, z;
  bool operator==(const VertexKey& o) const { return x == o.x && y == o.y && z == o.z; }
};
struct VertexKeyHash {
  size_t operator()(const VertexKey& k) const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](float f) {
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      h = (h ^ bits) * 1099511628211ull;
    };
    mix(k.x);
    mix(k.y);
    mix(k.z);
    return (size_t)h;
  }
};

struct MeshBuilder {
  TriMesh mesh;
  std::unordered_map<VertexKey, int, VertexKeyHash> index;

  int vertex(const std::array<double, 3>& p) {
    const VertexKey k{(float)p[0], (float)p[1], (float)p[2]};
    auto it = index.find(k);
    if (it != index.end()) return it->second;
    const int id = (int)mesh.vertices.size();
    mesh.vertices.push_back({k.x, k.y, k.z});
    index.emplace(k, id);
    return id;
  }

  // Adds a triangle oriented so its normal points along `outward`.
  void triangle(const std::array<double, 3>& a, const std::array<double, 3>& b,
                const std::array<double, 3>& c, const std::array<double, 3>& outward) {
    const double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
    const double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
    const double nx = uy * vz - uz * vy, ny = uz * vx - ux * vz, nz = ux * vy - uy * vx;
    const int ia = vertex(a), ib = vertex(b), ic = vertex(c);
    if (ia == ib || ib == ic || ia == ic) return;  // degenerate sliver
    if (nx * outward[0] + ny * outward[1] + nz * outward[2] >= 0.0)
      mesh.faces.push_back({ia, ib, ic});
    else
      mesh.faces.push_back({ia, ic, ib});
  }
};

// The six tetrahedra of the Kuhn subdivision: monotone corner paths from
// corner 0 to corner 7 (bit order x|y<<1|z<<2). The same split in every cell
// makes faces conform across cell boundaries, so the surface is watertight.
constexpr int kTets[6][4] = {{0, 1, 3, 7}, {0, 1, 5, 7}, {0, 2, 3, 7},
                             {0, 2, 6, 7}, {0, 4, 5, 7}, {0, 4, 6, 7}};
}  // namespace

TriMesh iso_surface(const std::vector<float>& values, int grid_res, float bound, float iso_level) {
  const int n = grid_res;
  const int64_t stride = n + 1;
  if ((int64_t)values.size() != stride * stride * stride)
    throw std::invalid_argument("iso_surface: values must hold (grid_res+1)^3 samples");
  auto coord = [&](int i) { return -(double)bound + 2.0 * bound * i / n; };

  MeshBuilder mb;
  std::array<double, 3> corner_pos[8];
  double corner_val[8];
  for (int ix = 0; ix < n; ++ix)
    for (int iy = 0; iy < n; ++iy)
      for (int iz = 0; iz < n; ++iz) {
        for (int c = 0; c < 8; ++c) {
          const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
          corner_pos[c] = {coord(ix + dx), coord(iy + dy), coord(iz + dz)};
          corner_val[c] =
              values[((int64_t)(ix + dx) * stride + (iy + dy)) * stride + (iz + dz)];
        }
        for (const auto& tet : kTets) {
          int inside[4], n_in = 0;
          int outside[4], n_out = 0;
          for (int v : tet)
            (corner_val[v] > iso_level ? inside[n_in++] : outside[n_out++]) = v;
          if (n_in == 0 || n_in == 4) continue;

          auto cut = [&](int a, int b) -> std::array<double, 3> {
            const double t =
                std::clamp((iso_level - corner_val[a]) / (corner_val[b] - corner_val[a]), 0.0, 1.0);
            return {corner_pos[a][0] + t * (corner_pos[b][0] - corner_pos[a][0]),
                    corner_pos[a][1] + t * (corner_pos[b][1] - corner_pos[a][1]),
                    corner_pos[a][2] + t * (corner_pos[b][2] - corner_pos[a][2])};
          };
          std::array<double, 3> in_mean = {0, 0, 0}, out_mean = {0, 0, 0};
          for (int i = 0; i < n_in; ++i)
            for (int a = 0; a < 3; ++a) in_mean[a] += corner_pos[inside[i]][a] / n_in;
          for (int i = 0; i < n_out; ++i)
            for (int a = 0; a < 3; ++a) out_mean[a] += corner_pos[outside[i]][a] / n_out;
          const std::array<double, 3> outward = {out_mean[0] - in_mean[0],
                                                 out_mean[1] - in_mean[1],
                                                 out_mean[2] - in_mean[2]};
          if (n_in == 1) {
            mb.triangle(cut(inside[0], outside[0]), cut(inside[0], outside[1]),
                        cut(inside[0], outside[2]), outward);
          } else if (n_in == 3) {
            mb.triangle(cut(inside[0], outside[0]), cut(inside[1], outside[0]),
                        cut(inside[2], outside[0]), outward);
          } else {  // 2 in / 2 out: quad with vertices on the four crossing edges
            const auto p0 = cut(inside[0], outside[0]);
            const auto p1 = cut(inside[0], outside[1]);
            const auto p2 = cut(inside[1], outside[1]);
            const auto p3 = cut(inside[1], outside[0]);
            mb.triangle(p0, p1, p2, outward);
            mb.triangle(p0, p2, p3, outward);
          }
        }
      }
  return mb.mesh;
}

TriMesh extract_mesh(const DensityColorField& f, int grid_res, float iso_level) {
  if (grid_res < 8) throw std::invalid_argument("extract_mesh: grid resolution must be >= 8");
  const int n = grid_res;
  const int64_t stride = n + 1;
  const float b = f.bound();
  std::vector<float> values(stride * stride * stride);
  // Sample the density on the grid in slabs to bound peak memory.
  Tensor pts({(int)(stride * stride), 3});
  for (int ix = 0; ix <= n; ++ix) {
    const float x = -b + 2.f * b * ix / n;
    for (int iy = 0; iy <= n; ++iy)
      for (int iz = 0; iz <= n; ++iz) {
        const int64_t row = (int64_t)iy * stride + iz;
        pts.at({(int)row, 0}) = x;
        pts.at({(int)row, 1}) = -b + 2.f * b * iy / n;
        pts.at({(int)row, 2}) = -b + 2.f * b * iz / n;
      }
    Tensor sigma;
    f.sample(pts, &sigma, nullptr);
    std::memcpy(values.data() + (int64_t)ix * stride * stride, sigma.data(),
                sizeof(float) * stride * stride);
  }
  return iso_surface(values, grid_res, b, iso_level);
}

}  // namespace sv::field
