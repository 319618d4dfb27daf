#pragma once

#include <vector>

#include "ddae/autograd.hpp"

namespace ddae {

enum class LrSchedule { constant, cosine };

// Learning rate at `step` of `total_steps` (cosine decays to zero at the end).
double scheduled_lr(LrSchedule kind, double base_lr, long step, long total_steps);

// Adaptive moment estimation with L2-style weight decay, defaulting to the
// usual library values: beta1 0.9, beta2 0.999, eps 1e-8, no decay.
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit Adam(std::vector<ag::Var> params);
  Adam(std::vector<ag::Var> params, Options opts);

  void zero_grad();
  // Applies one update at the given learning rate. A zero learning rate leaves
  // parameter values bitwise untouched.
  void step(double lr);
  double grad_norm() const;
  long steps_taken() const noexcept { return t_; }

  // Moment buffers, exposed for checkpointed restarts.
  std::vector<Tensor>& first_moments() noexcept { return m_; }
  std::vector<Tensor>& second_moments() noexcept { return v_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }
  void set_steps_taken(long t) noexcept { t_ = t; }

 private:
  std::vector<ag::Var> params_;
  Options opts_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

}  // namespace ddae
