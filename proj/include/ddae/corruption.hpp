#pragma once

#include <span>
#include <vector>

#include "ddae/image_batch.hpp"
#include "ddae/tensor.hpp"

namespace ddae {

enum class ScheduleKind { vp, ve };

// Per-level corruption law x_t = alpha_t x_0 + sigma_t eps.
//
// Levels are 1-based (t in [1, T]); the arrays are 0-based, so level t lives at
// index t - 1. Values are built in double precision so the long VP product
// stays accurate, and cast to float where they meet pixel data.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::vp;
  int T = 0;
  std::vector<double> beta;           // VP only, empty for VE
  std::vector<double> alpha;          // signal coefficient
  std::vector<double> sigma;          // noise scale
  std::vector<double> posterior_var;  // ancestral-step variance

  double alpha_at(int t) const { return alpha[index(t)]; }
  double sigma_at(int t) const { return sigma[index(t)]; }
  double beta_at(int t) const { return beta[index(t)]; }
  double posterior_var_at(int t) const { return posterior_var[index(t)]; }
  // Throws ContractError unless 1 <= t <= T.
  std::size_t index(int t) const;
};

// beta linearly spaced over [beta_min, beta_max] inclusive;
// alpha_t = sqrt(prod_{i<=t}(1 - beta_i)), sigma_t = sqrt(1 - alpha_t^2).
// The ancestral variance is the constant-per-level choice beta_t.
NoiseSchedule make_vp_schedule(int T, double beta_min, double beta_max);

// alpha = 1; sigma log-uniformly spaced over [sigma_min, sigma_max].
// The ancestral variance is sigma_t^2 - sigma_{t-1}^2 with sigma_0 = 0.
NoiseSchedule make_ve_schedule(int T, double sigma_min, double sigma_max);

// Elementwise alpha_t x0 + sigma_t eps with one level per item.
Tensor noise(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched);

// alpha_t^2 / sigma_t^2
double snr(const NoiseSchedule& sched, int t);

// (x_t - sigma_t eps_pred) / alpha_t; throws NumericalError when alpha_t < 1e-12.
Tensor denoiser_from_eps(const Tensor& x_t, const Tensor& eps_pred, std::span<const int> t,
                         const NoiseSchedule& sched);

// Mean squared error over all elements.
double denoise_loss(const Tensor& x0_hat, const Tensor& x0);
double eps_loss(const Tensor& eps_pred, const Tensor& eps);

}  // namespace ddae
