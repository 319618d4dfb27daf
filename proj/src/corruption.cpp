#include "ddae/corruption.hpp"

#include <cmath>
#include <string>

#include "ddae/error.hpp"

namespace ddae {

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > T)
    throw ContractError("level t=" + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  return static_cast<std::size_t>(t - 1);
}

NoiseSchedule make_vp_schedule(int T, double beta_min, double beta_max) {
  if (T < 1) throw ParameterError("T must be >= 1, got " + std::to_string(T));
  if (!(beta_min > 0.0)) throw ParameterError("beta_min must be > 0, got " + std::to_string(beta_min));
  if (!(beta_max < 1.0)) throw ParameterError("beta_max must be < 1, got " + std::to_string(beta_max));
  if (!(beta_min <= beta_max))
    throw ParameterError("beta_min must not exceed beta_max (beta_min=" + std::to_string(beta_min) +
                         ", beta_max=" + std::to_string(beta_max) + ")");

  NoiseSchedule s;
  s.kind = ScheduleKind::vp;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(s.beta.size());
  s.sigma.resize(s.beta.size());
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double b = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * i / static_cast<double>(T - 1);
    const auto k = static_cast<std::size_t>(i);
    s.beta[k] = b;
    prod *= 1.0 - b;
    s.alpha[k] = std::sqrt(prod);
    s.sigma[k] = std::sqrt(1.0 - prod);
  }
  // Constant per-level variance; swap in beta_t (1 - abar_{t-1}) / (1 - abar_t) for the tilde variant.
  s.posterior_var = s.beta;
  return s;
}

NoiseSchedule make_ve_schedule(int T, double sigma_min, double sigma_max) {
  if (T < 1) throw ParameterError("T must be >= 1, got " + std::to_string(T));
  if (!(sigma_min > 0.0)) throw ParameterError("sigma_min must be > 0, got " + std::to_string(sigma_min));
  if (!(sigma_min < sigma_max))
    throw ParameterError("sigma_max must exceed sigma_min (sigma_min=" + std::to_string(sigma_min) +
                         ", sigma_max=" + std::to_string(sigma_max) + ")");

  NoiseSchedule s;
  s.kind = ScheduleKind::ve;
  s.T = T;
  s.alpha.assign(static_cast<std::size_t>(T), 1.0);
  s.sigma.resize(static_cast<std::size_t>(T));
  s.posterior_var.resize(static_cast<std::size_t>(T));
  const double lo = std::log(sigma_min), hi = std::log(sigma_max);
  for (int i = 0; i < T; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (T == 1)
      s.sigma[k] = sigma_min;
    else if (i == T - 1)
      s.sigma[k] = sigma_max;
    else
      s.sigma[k] = std::exp(lo + (hi - lo) * i / static_cast<double>(T - 1));
    const double prev = i == 0 ? 0.0 : s.sigma[k - 1];
    s.posterior_var[k] = s.sigma[k] * s.sigma[k] - prev * prev;
  }
  return s;
}

namespace {
void check_per_item(const Tensor& x, std::span<const int> t, const char* what) {
  if (x.ndim() < 1 || static_cast<int>(t.size()) != x.dim(0))
    throw ContractError(std::string(what) + ": need one level per item (" + std::to_string(t.size()) +
                        " levels for shape " + shape_str(x.shape()) + ")");
}
}  // namespace

Tensor noise(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape())
    throw ContractError("noise: eps shape " + shape_str(eps.shape()) + " != x0 shape " + shape_str(x0.shape()));
  check_per_item(x0, t, "noise");
  Tensor out(x0.shape());
  const std::size_t per = x0.dim(0) ? x0.numel() / static_cast<std::size_t>(x0.dim(0)) : 0;
  for (std::size_t n = 0; n < t.size(); ++n) {
    const auto a = static_cast<float>(sched.alpha_at(t[n]));
    const auto s = static_cast<float>(sched.sigma_at(t[n]));
    for (std::size_t j = n * per; j < (n + 1) * per; ++j) out[j] = a * x0[j] + s * eps[j];
  }
  return out;
}

double snr(const NoiseSchedule& sched, int t) {
  const double a = sched.alpha_at(t), s = sched.sigma_at(t);
  return a * a / (s * s);
}

Tensor denoiser_from_eps(const Tensor& x_t, const Tensor& eps_pred, std::span<const int> t,
                         const NoiseSchedule& sched) {
  if (x_t.shape() != eps_pred.shape())
    throw ContractError("denoiser_from_eps: shape mismatch " + shape_str(x_t.shape()) + " vs " +
                        shape_str(eps_pred.shape()));
  check_per_item(x_t, t, "denoiser_from_eps");
  Tensor out(x_t.shape());
  const std::size_t per = x_t.dim(0) ? x_t.numel() / static_cast<std::size_t>(x_t.dim(0)) : 0;
  for (std::size_t n = 0; n < t.size(); ++n) {
    const double a = sched.alpha_at(t[n]);
    if (a < 1e-12)
      throw NumericalError("denoiser_from_eps: alpha_t=" + std::to_string(a) + " at t=" + std::to_string(t[n]) +
                           " is too small to invert");
    const auto inv_a = static_cast<float>(1.0 / a);
    const auto s = static_cast<float>(sched.sigma_at(t[n]));
    for (std::size_t j = n * per; j < (n + 1) * per; ++j) out[j] = (x_t[j] - s * eps_pred[j]) * inv_a;
  }
  return out;
}

double denoise_loss(const Tensor& x0_hat, const Tensor& x0) {
  if (x0_hat.shape() != x0.shape())
    throw ContractError("loss: shape mismatch " + shape_str(x0_hat.shape()) + " vs " + shape_str(x0.shape()));
  if (x0.numel() == 0) throw ContractError("loss: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    const double d = static_cast<double>(x0_hat[i]) - x0[i];
    s += d * d;
  }
  return s / static_cast<double>(x0.numel());
}

double eps_loss(const Tensor& eps_pred, const Tensor& eps) { return denoise_loss(eps_pred, eps); }

}  // namespace ddae
