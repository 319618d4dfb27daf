#include "ddae/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "ddae/checkpoint.hpp"
#include "ddae/dataset.hpp"
#include "ddae/error.hpp"

namespace ddae {

Tensor posterior_mean(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched) {
  if (x_t.shape() != eps_pred.shape()) throw ContractError("x_t and eps prediction differ in shape");
  const double sig = sched.sigma_at(t);
  double a, b;  // mean = a * (x_t - b * eps)
  if (sched.kind == ScheduleKind::vp) {
    const double beta = sched.beta_at(t);
    a = 1.0 / std::sqrt(1.0 - beta);
    b = beta / sig;
  } else {
    a = 1.0;
    b = sched.posterior_var_at(t) / sig;
  }
  Tensor mu(x_t.shape());
  for (std::size_t i = 0; i < mu.numel(); ++i)
    mu[i] = static_cast<float>(a * (static_cast<double>(x_t[i]) - b * eps_pred[i]));
  return mu;
}

Tensor ancestral_step(const DDAENetwork& net, const Tensor& x_t, int t, const NoiseSchedule& sched, Rng& rng,
                      const std::optional<GuidanceSpec>& guidance, const SamplerOpts& opts) {
  sched.index(t);
  if (sched.kind == ScheduleKind::ve && !opts.allow_ve)
    throw ParameterError("VE ancestral sampling is disabled; set allow_ve to enable it");
  const std::vector<int> levels(static_cast<std::size_t>(x_t.dim(0)), t);
  const double var = sched.posterior_var_at(t);

  Tensor eps, grad;
  if (guidance) {
    if (!guidance->classifier) throw ParameterError("guidance needs a classifier");
    if (guidance->scale < 0.0) throw ParameterError("guidance scale must be >= 0");
    const bool shared = &guidance->classifier->network() == &net;
    grad = log_prob_gradient(*guidance->classifier, x_t, t, guidance->target_label, shared ? &eps : nullptr);
    if (!shared) eps = forward_eps(net, x_t, levels);
  } else {
    eps = forward_eps(net, x_t, levels);
  }

  Tensor x = posterior_mean(x_t, eps, t, sched);
  if (guidance) {
    const double k =
        guidance->scale * (guidance->scaling == GuidanceScaling::variance ? var : std::sqrt(var));
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(x[i] + k * grad[i]);
  }
  if (t > 1) {
    const double sd = std::sqrt(var);
    const Tensor z = rng.normal_like(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(x[i] + sd * z[i]);
  }
  if (!x.all_finite()) throw NumericalError("non-finite sampler state at step t=" + std::to_string(t));
  return x;
}

ImageBatch sample(const DDAENetwork& net, const NoiseSchedule& sched, int n, Rng& rng,
                  const std::optional<GuidanceSpec>& guidance, const SamplerOpts& opts, const StepHook& on_step) {
  if (n < 0) throw ParameterError("sample count must be >= 0");
  if (opts.chunk < 1) throw ParameterError("sampler chunk must be positive");
  const auto& c = net.config();
  const double init_sd = sched.kind == ScheduleKind::vp ? 1.0 : sched.sigma_at(sched.T);
  std::vector<Tensor> parts;
  for (int b0 = 0; b0 < n; b0 += opts.chunk) {
    const int m = std::min(opts.chunk, n - b0);
    Tensor x = rng.normal_like({m, c.in_channels, c.image_size, c.image_size});
    for (auto& v : x.values()) v = static_cast<float>(v * init_sd);
    for (int t = sched.T; t >= 1; --t) {
      x = ancestral_step(net, x, t, sched, rng, guidance, opts);
      if (on_step) on_step(t);
    }
    if (opts.clamp_final)
      for (auto& v : x.values()) v = std::clamp(v, -1.0f, 1.0f);
    parts.push_back(std::move(x));
  }
  ImageBatch out;
  out.data = parts.empty() ? Tensor({0, c.in_channels, c.image_size, c.image_size}) : concat_rows(parts);
  return out;
}

void save_samples(const std::filesystem::path& png_path, const std::filesystem::path& archive_path,
                  const ImageBatch& samples) {
  if (!png_path.empty()) write_png_grid(png_path, samples.data);
  if (!archive_path.empty()) {
    TensorArchive a;
    a.tensors.emplace_back("images", samples.data);
    save_archive(archive_path, a);
  }
}

}  // namespace ddae
