#include "ddae/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ddae {

double scheduled_lr(LrSchedule kind, double base_lr, long step, long total_steps) {
  if (kind == LrSchedule::constant || total_steps <= 0) return base_lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

Adam::Adam(std::vector<ag::Var> params) : Adam(std::move(params), Options{}) {}

Adam::Adam(std::vector<ag::Var> params, Options opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void Adam::step(double lr) {
  ++t_;
  if (lr == 0.0) return;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  const float b1 = static_cast<float>(opts_.beta1), b2 = static_cast<float>(opts_.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(opts_.eps), wd = static_cast<float>(opts_.weight_decay);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p->grad.numel() != p->value.numel()) continue;  // unused this step
    Tensor& val = p->value;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < val.numel(); ++j) {
      const float g = p->grad[j] + wd * val[j];
      m[j] = b1 * m[j] + (1.0f - b1) * g;
      v[j] = b2 * v[j] + (1.0f - b2) * g * g;
      val[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

double Adam::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    for (float g : p->grad.values()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

}  // namespace ddae
