#pragma once

// Denoising-diffusion core. Timesteps are 1-based (t in [1, T]); schedule
// vectors have T+1 entries with index 0 holding the t=0 sentinels
// (alpha_bar[0] = 1). All schedule math is double; tensors stay float32.

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sv/autodiff.hpp"
#include "sv/rng.hpp"
#include "sv/tensor.hpp"

namespace sv::diff {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;             // beta[0] = 0
  std::vector<double> alpha;            // 1 - beta
  std::vector<double> alpha_bar;        // running product, alpha_bar[0] = 1
  std::vector<double> posterior_sigma2; // beta_t (1-abar_{t-1})/(1-abar_t)
  std::vector<double> loss_weights;     // w_t, default 1

  static NoiseSchedule make(const std::string& kind, int T);
  static NoiseSchedule from_betas(std::vector<double> betas);

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

// Scalar algebra, templated so oracles can run in double.
template <typename F>
F q_sample_scalar(F z0, F eps, F alpha_bar_t) {
  return std::sqrt(alpha_bar_t) * z0 + std::sqrt(F(1) - alpha_bar_t) * eps;
}

// The x0 reconstruction inverts q_sample exactly: divide by sqrt(alpha_bar).
template <typename F>
F predict_x0_scalar(F z_t, F eps_hat, F alpha_bar_t) {
  return (z_t - std::sqrt(F(1) - alpha_bar_t) * eps_hat) / std::sqrt(alpha_bar_t);
}

template <typename F>
F posterior_mean_scalar(F z_t, F eps_hat, F alpha_t, F alpha_bar_t) {
  const F beta_t = F(1) - alpha_t;
  return (z_t - beta_t / std::sqrt(F(1) - alpha_bar_t) * eps_hat) / std::sqrt(alpha_t);
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s);
Tensor predict_x0(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s);
Tensor posterior_mean(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s);

// Inference-time denoiser interface (no tape).
struct EpsModel {
  virtual ~EpsModel() = default;
  virtual Tensor eps(const Tensor& z_t, int t, const Tensor& y) = 0;
};

// One ancestral step: sample N(mu, sigma_t^2 I); the t=1 step is noiseless.
Tensor reverse_step(const Tensor& z_t, int t, const Tensor& y, EpsModel& model,
                    const NoiseSchedule& s, Rng& rng);

// Full chain from pure noise at t=T down to z_0.
Tensor sample_chain(const std::vector<int>& shape, const Tensor& y, EpsModel& model,
                    const NoiseSchedule& s, Rng& rng);

// Number of denoising iterations for noise level t.
int k_plus_1(int t, int T);

// The linearly spaced time list (descending, ending above 0) used by
// multistep_denoise; exposed for diagnostics.
std::vector<int> multistep_times(int t, int T);

// Deterministic eps-space linear multi-step (Adams-Bashforth up to order 4,
// warm-started at lower orders) following the k-scheduler. With k+1 == 1 the
// result is exactly predict_x0(z_t, model eps, t).
Tensor multistep_denoise(const Tensor& z_t, int t, const Tensor& y, EpsModel& model,
                         const NoiseSchedule& s);

// Monte-Carlo estimate of E_{t,eps}[ w_t |z0 - x0_hat(q_sample(z0,t,eps), t)|^2 ]
// (mean over elements). The additive constant of the bound is dropped.
double nll_estimate(const Tensor& z0, const Tensor& y, EpsModel& model, const NoiseSchedule& s,
                    int n_draws, Rng& rng);

// Training-time denoiser interface (tape-recorded).
struct EpsNet {
  virtual ~EpsNet() = default;
  virtual Var eps_var(const Var& z_t, int t, const Var& y) = 0;
};

// Eq for the simplified bound: mean_elements |eps - eps_phi(q_sample(z0,t,eps), t, y)|^2.
Var vldm_loss(EpsNet& net, const Tensor& z0, const Tensor& y, int t, const Tensor& eps,
              const NoiseSchedule& s);

// Adapter running an EpsNet without recording a tape.
struct EpsNetModel final : EpsModel {
  explicit EpsNetModel(EpsNet& net) : net(&net) {}
  Tensor eps(const Tensor& z_t, int t, const Tensor& y) override {
    return net->eps_var(Var::constant(z_t), t, Var::constant(y)).value();
  }
  EpsNet* net;
};

}  // namespace sv::diff
