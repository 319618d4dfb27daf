#include "doctest.h"

#include <cmath>
#include <limits>
#include <vector>

#include "ddae/backbone.hpp"
#include "ddae/corruption.hpp"
#include "ddae/error.hpp"
#include "ddae/repmetrics.hpp"
#include "ddae/sampler.hpp"
#include "fixtures.hpp"

using namespace ddae;
using testing::randomize_output_layers;
using testing::tiny;

namespace {

DDAENetwork zero_net() {
  auto net = build_ddae(tiny(), 1);
  net.param("conv_out.w")->value.fill(0.0f);
  net.param("conv_out.b")->value.fill(0.0f);
  return net;
}

NoiseCondClassifier make_classifier(std::uint64_t seed) {
  auto net = build_ddae(tiny(), seed);
  Rng rng(seed);
  randomize_output_layers(net, rng, 0.05f);
  const TapId tap = net.taps()[2];
  auto head = ClassifierHead::init(tap, net.tap_channels(tap), 8, 3, 20, rng);
  return NoiseCondClassifier(std::move(net), std::move(head));
}

}  // namespace

TEST_CASE("posterior mean matches the closed forms") {
  Rng rng(1);
  const Tensor x = rng.normal_like({2, 3, 4, 4}), e = rng.normal_like({2, 3, 4, 4});
  const auto vp = make_vp_schedule(50, 1e-4, 0.02);
  for (int t : {1, 17, 50}) {
    const Tensor m = posterior_mean(x, e, t, vp);
    const double beta = vp.beta_at(t), sig = std::sqrt(1.0 - std::pow(vp.alpha_at(t), 2));
    for (std::size_t i = 0; i < m.numel(); ++i)
      CHECK(std::abs(m[i] - (x[i] - beta / sig * e[i]) / std::sqrt(1.0 - beta)) <= 1e-5);
  }
  const auto ve = make_ve_schedule(30, 0.01, 20.0);
  for (int t : {1, 15, 30}) {
    const Tensor m = posterior_mean(x, e, t, ve);
    const double s = ve.sigma_at(t), sp = t > 1 ? ve.sigma_at(t - 1) : 0.0;
    for (std::size_t i = 0; i < m.numel(); ++i) CHECK(std::abs(m[i] - (x[i] - (s * s - sp * sp) / s * e[i])) <= 1e-5);
  }
  CHECK_THROWS_AS(posterior_mean(x, Tensor({1, 3, 4, 4}), 3, vp), ContractError);
}

TEST_CASE("the last step is noise-free and sampling is seeded") {
  auto net = build_ddae(tiny(), 2);
  Rng init(2);
  randomize_output_layers(net, init, 0.05f);
  const auto sched = make_vp_schedule(10, 1e-4, 0.02);
  const Tensor x = init.normal_like({2, 3, 8, 8});
  Rng r1(1), r2(2);
  CHECK(ancestral_step(net, x, 1, sched, r1).bitwise_equal(ancestral_step(net, x, 1, sched, r2)));
  CHECK_FALSE(ancestral_step(net, x, 2, sched, r1).bitwise_equal(ancestral_step(net, x, 2, sched, r2)));

  Rng a(7), b(7);
  const ImageBatch sa = sample(net, sched, 5, a, std::nullopt, {.chunk = 2});
  const ImageBatch sb = sample(net, sched, 5, b, std::nullopt, {.chunk = 2});
  CHECK(sa.data.bitwise_equal(sb.data));
  CHECK(sa.size() == 5);
  for (float v : sa.data.values()) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  int steps = 0;
  Rng c(7);
  sample(net, sched, 1, c, std::nullopt, {}, [&](int) { ++steps; });
  CHECK(steps == 10);
}

TEST_CASE("a zero network follows the variance recursion") {
  const auto net = zero_net();
  const auto sched = make_vp_schedule(20, 1e-3, 0.2);
  double v = 1.0;
  for (int t = sched.T; t >= 1; --t) v = v / (1.0 - sched.beta_at(t)) + (t > 1 ? sched.beta_at(t) : 0.0);
  Rng rng(3);
  SamplerOpts o;
  o.clamp_final = false;
  const ImageBatch s = sample(net, sched, 200, rng, std::nullopt, o);
  double m = 0.0, m2 = 0.0;
  for (float x : s.data.values()) {
    m += x;
    m2 += static_cast<double>(x) * x;
  }
  const double n = static_cast<double>(s.data.numel());
  const double var = m2 / n - (m / n) * (m / n);
  CHECK(std::abs(var / v - 1.0) <= 0.05);
}

TEST_CASE("zero guidance scale is bitwise unguided") {
  const auto clf = make_classifier(4);
  const auto sched = make_vp_schedule(20, 1e-4, 0.02);
  const auto other = clf.network().clone();
  for (const DDAENetwork* net : {&clf.network(), &other}) {
    Rng a(9), b(9);
    const GuidanceSpec g{&clf, 1, 0.0, GuidanceScaling::variance};
    const ImageBatch guided = sample(*net, sched, 3, a, g);
    const ImageBatch plain = sample(*net, sched, 3, b);
    CHECK(guided.data.bitwise_equal(plain.data));
  }
}

TEST_CASE("guidance shifts the mean by the scaled log-probability gradient") {
  const auto clf = make_classifier(5);
  const auto sched = make_vp_schedule(20, 1e-4, 0.02);
  Rng rng(5);
  const Tensor x = rng.normal_like({2, 3, 8, 8});
  const Tensor grad = log_prob_gradient(clf, x, 1, 2);
  Rng r0(0);
  const Tensor plain = ancestral_step(clf.network(), x, 1, sched, r0);
  const double var = sched.posterior_var_at(1);
  for (auto [scaling, k] : {std::pair{GuidanceScaling::variance, 3.0 * var}, {GuidanceScaling::stddev, 3.0 * std::sqrt(var)}}) {
    const Tensor guided = ancestral_step(clf.network(), x, 1, sched, r0, GuidanceSpec{&clf, 2, 3.0, scaling});
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i)
      worst = std::max(worst, std::abs((guided[i] - plain[i]) - k * grad[i]));
    CHECK(worst <= 1e-5);
  }
  CHECK_THROWS_AS(ancestral_step(clf.network(), x, 1, sched, r0, GuidanceSpec{&clf, 2, -1.0}), ParameterError);
  CHECK_THROWS_AS(ancestral_step(clf.network(), x, 1, sched, r0, GuidanceSpec{nullptr, 2, 1.0}), ParameterError);
}

TEST_CASE("sampler guards") {
  const auto net = zero_net();
  Rng rng(1);
  const auto ve = make_ve_schedule(10, 0.01, 10.0);
  CHECK_THROWS_AS(sample(net, ve, 1, rng), ParameterError);
  SamplerOpts o;
  o.allow_ve = true;
  o.clamp_final = false;
  const ImageBatch s = sample(net, ve, 64, rng, std::nullopt, o);
  double m2 = 0.0;
  for (float v : s.data.values()) m2 += static_cast<double>(v) * v;
  // Nothing is removed, so the start variance adds to the injected sigma_T^2 - sigma_1^2.
  CHECK(m2 / s.data.numel() == doctest::Approx(2.0 * 100.0 - 0.01 * 0.01).epsilon(0.05));

  auto bad = build_ddae(tiny(), 1);
  bad.param("conv_out.b")->value.fill(std::numeric_limits<float>::quiet_NaN());
  const auto vp = make_vp_schedule(10, 1e-4, 0.02);
  CHECK_THROWS_WITH_AS(sample(bad, vp, 1, rng), doctest::Contains("t=10"), NumericalError);
  CHECK(sample(net, vp, 0, rng).size() == 0);
}
