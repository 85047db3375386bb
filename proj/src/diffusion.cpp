#include "sv/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>

#include "sv/nn.hpp"

namespace sv::diff {

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  NoiseSchedule s;
  s.T = (int)betas.size();
  if (s.T < 1) throw std::runtime_error("noise schedule needs at least one step");
  s.beta.assign(s.T + 1, 0.0);
  s.alpha.assign(s.T + 1, 1.0);
  s.alpha_bar.assign(s.T + 1, 1.0);
  s.posterior_sigma2.assign(s.T + 1, 0.0);
  s.loss_weights.assign(s.T + 1, 1.0);
  for (int t = 1; t <= s.T; ++t) {
    const double b = betas[t - 1];
    if (!(b > 0.0 && b < 1.0)) throw std::runtime_error("beta out of (0, 1)");
    s.beta[t] = b;
    s.alpha[t] = 1.0 - b;
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    // q(z_{t-1} | z_t, z_0) variance; zero at t=1 because alpha_bar[0] = 1,
    // which is what makes the final reverse step deterministic.
    s.posterior_sigma2[t] = b * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]);
  }
  return s;
}

NoiseSchedule NoiseSchedule::make(const std::string& kind, int T) {
  if (T < 1) throw std::runtime_error("noise schedule needs at least one step");
  std::vector<double> betas(T);
  if (kind == "linear") {
    const double b0 = 1e-4, b1 = 0.02;
    for (int i = 0; i < T; ++i)
      betas[i] = T == 1 ? b0 : b0 + (b1 - b0) * (double)i / (double)(T - 1);
  } else if (kind == "cosine") {
    // Squared-cosine alpha_bar with the usual small offset; betas recovered
    // from consecutive ratios and clipped away from 1.
    const double offs = 0.008;
    auto f = [&](double u) {
      const double x = (u + offs) / (1.0 + offs) * M_PI / 2.0;
      return std::cos(x) * std::cos(x);
    };
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double ab = f((double)t / T) / f(0.0);
      betas[t - 1] = std::clamp(1.0 - ab / prev, 1e-8, 0.999);
      prev *= 1.0 - betas[t - 1];
    }
  } else {
    throw std::runtime_error("unknown noise schedule kind: " + kind);
  }
  return from_betas(std::move(betas));
}

nlohmann::json NoiseSchedule::to_json() const {
  return {{"T", T}, {"beta", std::vector<double>(beta.begin() + 1, beta.end())}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  auto betas = j.at("beta").get<std::vector<double>>();
  if ((int)betas.size() != j.at("T").get<int>())
    throw std::runtime_error("noise schedule beta length does not match T");
  return from_betas(std::move(betas));
}

namespace {

void check_t(int t, const NoiseSchedule& s) {
  if (t < 1 || t > s.T) throw std::runtime_error("timestep out of [1, T]");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw std::runtime_error(std::string(what) + ": shape mismatch " + a.shape_str() +
                             " vs " + b.shape_str());
}

}  // namespace

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s) {
  check_t(t, s);
  check_same_shape(z0, eps, "q_sample");
  const float a = (float)std::sqrt(s.alpha_bar[t]);
  const float b = (float)std::sqrt(1.0 - s.alpha_bar[t]);
  Tensor out = Tensor::zeros(z0.shape());
  for (int64_t i = 0; i < z0.numel(); ++i) out.at(i) = a * z0.at(i) + b * eps.at(i);
  return out;
}

Tensor predict_x0(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
  check_t(t, s);
  check_same_shape(z_t, eps_hat, "predict_x0");
  const float inv_a = (float)(1.0 / std::sqrt(s.alpha_bar[t]));
  const float b = (float)std::sqrt(1.0 - s.alpha_bar[t]);
  Tensor out = Tensor::zeros(z_t.shape());
  for (int64_t i = 0; i < z_t.numel(); ++i) out.at(i) = (z_t.at(i) - b * eps_hat.at(i)) * inv_a;
  return out;
}

Tensor posterior_mean(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
  check_t(t, s);
  check_same_shape(z_t, eps_hat, "posterior_mean");
  const float inv_sa = (float)(1.0 / std::sqrt(s.alpha[t]));
  const float c = (float)(s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]));
  Tensor out = Tensor::zeros(z_t.shape());
  for (int64_t i = 0; i < z_t.numel(); ++i) out.at(i) = (z_t.at(i) - c * eps_hat.at(i)) * inv_sa;
  return out;
}

Tensor reverse_step(const Tensor& z_t, int t, const Tensor& y, EpsModel& model,
                    const NoiseSchedule& s, Rng& rng) {
  Tensor eps_hat = model.eps(z_t, t, y);
  Tensor mu = posterior_mean(z_t, eps_hat, t, s);
  const double sigma = std::sqrt(s.posterior_sigma2[t]);
  if (sigma > 0.0)
    for (int64_t i = 0; i < mu.numel(); ++i) mu.at(i) += (float)(sigma * rng.normal());
  return mu;
}

Tensor sample_chain(const std::vector<int>& shape, const Tensor& y, EpsModel& model,
                    const NoiseSchedule& s, Rng& rng) {
  Tensor z = nn::normal_init(rng, shape, 1.0f);
  for (int t = s.T; t >= 1; --t) z = reverse_step(z, t, y, model, s, rng);
  return z;
}

int k_plus_1(int t, int T) {
  if (2 * t <= T) return std::max(1, (100 * t) / T);
  return 50;
}

std::vector<int> multistep_times(int t, int T) {
  // Linearly spaced in (0, t], descending, starting at t itself. Capped at t
  // so rounding can never produce duplicate integer steps on short schedules.
  const int k1 = std::min(k_plus_1(t, T), t);
  std::vector<int> times(k1);
  for (int i = 0; i < k1; ++i)
    times[i] = std::max(1, (int)std::lround((double)t * (k1 - i) / k1));
  return times;
}

Tensor multistep_denoise(const Tensor& z_t, int t, const Tensor& y, EpsModel& model,
                         const NoiseSchedule& s) {
  check_t(t, s);
  const std::vector<int> times = multistep_times(t, s.T);
  // Adams-Bashforth coefficients for orders 1..4, most recent first.
  static const std::vector<std::vector<double>> kAB = {
      {1.0},
      {3.0 / 2.0, -1.0 / 2.0},
      {23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0},
      {55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0}};

  Tensor z = z_t;
  std::deque<Tensor> hist;  // past model outputs, newest first
  for (size_t i = 0; i < times.size(); ++i) {
    const int tau = times[i];
    hist.push_front(model.eps(z, tau, y));
    if (hist.size() > 4) hist.pop_back();

    // Warm start: use whatever history exists, so the first update is plain
    // single-step and in particular k+1 == 1 reduces to predict_x0 exactly.
    Tensor eps_prime;
    if (hist.size() == 1) {
      eps_prime = hist.front();
    } else {
      const auto& c = kAB[hist.size() - 1];
      eps_prime = Tensor::zeros(z.shape());
      for (size_t h = 0; h < hist.size(); ++h)
        for (int64_t e = 0; e < eps_prime.numel(); ++e)
          eps_prime.at(e) += (float)c[h] * hist[h].at(e);
    }

    Tensor x0 = predict_x0(z, eps_prime, tau, s);
    if (i + 1 == times.size()) return x0;

    // Deterministic jump to the next (noisier-than-zero) level.
    const double ab_next = s.alpha_bar[times[i + 1]];
    const float a = (float)std::sqrt(ab_next);
    const float b = (float)std::sqrt(1.0 - ab_next);
    Tensor next = Tensor::zeros(z.shape());
    for (int64_t e = 0; e < next.numel(); ++e)
      next.at(e) = a * x0.at(e) + b * eps_prime.at(e);
    z = next;
  }
  return z;  // unreachable; times is never empty
}

double nll_estimate(const Tensor& z0, const Tensor& y, EpsModel& model, const NoiseSchedule& s,
                    int n_draws, Rng& rng) {
  double acc = 0.0;
  for (int d = 0; d < n_draws; ++d) {
    const int t = (int)rng.uniform_int(1, s.T);
    Tensor eps = nn::normal_init(rng, z0.shape(), 1.0f);
    Tensor z_t = q_sample(z0, t, eps, s);
    Tensor x0 = multistep_denoise(z_t, t, y, model, s);
    double se = 0.0;
    for (int64_t i = 0; i < z0.numel(); ++i) {
      const double diff = (double)z0.at(i) - (double)x0.at(i);
      se += diff * diff;
    }
    acc += s.loss_weights[t] * se / (double)z0.numel();
  }
  return acc / n_draws;
}

Var vldm_loss(EpsNet& net, const Tensor& z0, const Tensor& y, int t, const Tensor& eps,
              const NoiseSchedule& s) {
  Tensor z_t = q_sample(z0, t, eps, s);
  Var eps_hat = net.eps_var(Var::constant(z_t), t, Var::constant(y));
  return mse(eps_hat, Var::constant(eps));
}

}  // namespace sv::diff
