#pragma once

#include <filesystem>
#include <functional>
#include <optional>

#include "ddae/backbone.hpp"
#include "ddae/corruption.hpp"
#include "ddae/image_batch.hpp"
#include "ddae/repmetrics.hpp"
#include "ddae/rng.hpp"

namespace ddae {

// How the classifier gradient is scaled before it is added to the mean:
// by the step variance Sigma_t^2 (default) or by its square root.
enum class GuidanceScaling { variance, stddev };

struct GuidanceSpec {
  const NoiseCondClassifier* classifier = nullptr;
  int target_label = 0;
  double scale = 0.0;
  GuidanceScaling scaling = GuidanceScaling::variance;
};

struct SamplerOpts {
  bool allow_ve = false;     // VE ancestral steps are opt-in
  bool clamp_final = true;   // clamp to [-1, 1] after the last step only
  int chunk = 64;            // chains advanced together
};

// Mean of p(x_{t-1} | x_t) given a noise prediction.
// VP: (x_t - beta_t / sigma_t * eps) / sqrt(1 - beta_t).
// VE: x_t - (sigma_t^2 - sigma_{t-1}^2) / sigma_t * eps.
Tensor posterior_mean(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched);

// One reverse step from level t; noise with variance Sigma_t^2 is added only
// for t > 1. Throws NumericalError naming t when the state turns non-finite.
Tensor ancestral_step(const DDAENetwork& net, const Tensor& x_t, int t, const NoiseSchedule& sched, Rng& rng,
                      const std::optional<GuidanceSpec>& guidance = std::nullopt, const SamplerOpts& opts = {});

// Called after each completed step with the level just left.
using StepHook = std::function<void(int t)>;

// n chains from x_T ~ N(0, I) (VP) or N(0, sigma_T^2 I) (VE) down to x_0.
ImageBatch sample(const DDAENetwork& net, const NoiseSchedule& sched, int n, Rng& rng,
                  const std::optional<GuidanceSpec>& guidance = std::nullopt, const SamplerOpts& opts = {},
                  const StepHook& on_step = {});

// Writes samples as a PNG grid and as a tensor archive ("images").
void save_samples(const std::filesystem::path& png_path, const std::filesystem::path& archive_path,
                  const ImageBatch& samples);

}  // namespace ddae
