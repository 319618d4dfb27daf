#include "doctest.h"

#include <cmath>
#include <vector>

#include "ddae/corruption.hpp"
#include "ddae/error.hpp"
#include "ddae/rng.hpp"

using namespace ddae;

TEST_CASE("vp schedule matches a brute-force product") {
  const auto s = make_vp_schedule(1000, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int i = 0; i < 1000; ++i) {
    const long double b = 1e-4L + (0.02L - 1e-4L) * i / 999.0L;
    prod *= 1.0L - b;
  }
  CHECK(std::fabs(s.alpha_at(1000) - std::sqrt(static_cast<double>(prod))) < 1e-9);
  CHECK(s.beta_at(1) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.beta_at(1000) == doctest::Approx(0.02).epsilon(1e-12));
  double worst = 0;
  for (int t = 1; t <= 1000; ++t)
    worst = std::max(worst, std::fabs(s.alpha_at(t) * s.alpha_at(t) + s.sigma_at(t) * s.sigma_at(t) - 1.0));
  CHECK(worst < 1e-6);
  for (int t = 1; t <= 1000; ++t) CHECK(s.posterior_var_at(t) == s.beta_at(t));
}

TEST_CASE("ve schedule is log-uniform with unit signal") {
  const auto s = make_ve_schedule(3, 0.01, 100.0);
  CHECK(s.sigma_at(2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.alpha_at(1) == 1.0);
  CHECK(snr(s, 2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.posterior_var_at(1) == doctest::Approx(1e-4));
  CHECK(s.posterior_var_at(3) == doctest::Approx(1e4 - 1.0));
}

TEST_CASE("schedule parameters are validated") {
  CHECK_THROWS_AS(make_vp_schedule(0, 1e-4, 0.02), ParameterError);
  CHECK_THROWS_AS(make_vp_schedule(10, 0.02, 1e-4), ParameterError);
  CHECK_THROWS_AS(make_vp_schedule(10, 1e-4, 1.0), ParameterError);
  CHECK_THROWS_AS(make_ve_schedule(10, 0.0, 1.0), ParameterError);
  const auto s = make_vp_schedule(10, 1e-4, 0.02);
  CHECK_THROWS_AS(s.alpha_at(0), ContractError);
  CHECK_THROWS_AS(s.alpha_at(11), ContractError);
}

TEST_CASE("snr closed form and strict decrease") {
  const auto vp = make_vp_schedule(1000, 1e-4, 0.02);
  CHECK(snr(vp, 1) == doctest::Approx((1 - 1e-4) / 1e-4).epsilon(1e-9));
  for (int t = 2; t <= 1000; ++t) REQUIRE(snr(vp, t) < snr(vp, t - 1));
  const auto ve = make_ve_schedule(500, 0.002, 80.0);
  for (int t = 2; t <= 500; ++t) REQUIRE(snr(ve, t) < snr(ve, t - 1));
}

TEST_CASE("noising edge cases") {
  const auto s = make_vp_schedule(1000, 1e-4, 0.02);
  Rng rng(1);
  const Tensor x0 = rng.normal_like({2, 3, 4, 4});
  const Tensor eps = rng.normal_like({2, 3, 4, 4});
  const std::vector<int> t{3, 700};
  const Tensor a = noise(x0, t, Tensor::zeros_like(eps), s);
  const Tensor b = noise(Tensor::zeros_like(x0), t, eps, s);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const int lvl = t[i / 48];
    CHECK(a[i] == static_cast<float>(s.alpha_at(lvl)) * x0[i]);
    CHECK(b[i] == static_cast<float>(s.sigma_at(lvl)) * eps[i]);
  }
}

TEST_CASE("monte-carlo noising statistics") {
  const auto s = make_vp_schedule(1000, 1e-4, 0.02);
  const Tensor x0({1, 1, 2, 2}, {0.9f, -0.5f, 0.1f, -1.0f});
  Rng rng(42);
  constexpr int kDraws = 10000;
  for (int t : {1, 100, 400, 700, 1000}) {
    std::vector<double> sum(4, 0.0), sq(4, 0.0);
    for (int d = 0; d < kDraws; ++d) {
      const Tensor eps = rng.normal_like(x0.shape());
      const int lvl[] = {t};
      const Tensor xt = noise(x0, lvl, eps, s);
      for (int i = 0; i < 4; ++i) {
        sum[i] += xt[i];
        sq[i] += static_cast<double>(xt[i]) * xt[i];
      }
    }
    const double a = s.alpha_at(t), sg = s.sigma_at(t);
    for (int i = 0; i < 4; ++i) {
      const double mean = sum[i] / kDraws;
      const double var = (sq[i] - kDraws * mean * mean) / (kDraws - 1);
      CHECK(std::fabs(mean - a * x0[i]) < 4.0 * sg / 100.0);
      CHECK(std::fabs(var - sg * sg) < 0.05 * sg * sg);
    }
  }
}

TEST_CASE("denoiser inverts noising") {
  const auto s = make_vp_schedule(1000, 1e-4, 0.02);
  Rng rng(2);
  const Tensor x0 = rng.normal_like({2, 3, 4, 4});
  const Tensor eps = rng.normal_like({2, 3, 4, 4});
  const std::vector<int> t{17, 420};
  const Tensor xt = noise(x0, t, eps, s);
  const Tensor back = denoiser_from_eps(xt, eps, t, s);
  for (std::size_t i = 0; i < x0.numel(); ++i)
    CHECK(std::fabs(back[i] - x0[i]) <= 1e-5 * std::max(1.0f, std::fabs(x0[i])));

  const Tensor zero_eps = denoiser_from_eps(xt, Tensor::zeros_like(eps), t, s);
  for (std::size_t i = 0; i < x0.numel(); ++i)
    CHECK(zero_eps[i] == doctest::Approx(xt[i] / s.alpha_at(t[i / 48])).epsilon(1e-6));
}

TEST_CASE("denoiser refuses a vanishing signal coefficient") {
  const auto s = make_vp_schedule(100, 0.5, 0.9);
  const Tensor x({1, 1, 1, 1}, 1.0f);
  const int t[] = {100};
  REQUIRE(s.alpha_at(100) < 1e-12);
  CHECK_THROWS_AS(denoiser_from_eps(x, x, t, s), NumericalError);
}

TEST_CASE("losses and the reweighting identity") {
  Rng rng(3);
  const Tensor a = rng.normal_like({2, 3, 4, 4});
  const Tensor b = rng.normal_like({2, 3, 4, 4});
  CHECK(denoise_loss(a, a) == 0.0);
  Tensor shifted = a;
  for (auto& v : shifted.values()) v += 1.0f;
  CHECK(denoise_loss(shifted, a) == doctest::Approx(1.0).epsilon(1e-6));

  double naive = 0;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
          const double d = static_cast<double>(a.at(n, c, y, x)) - b.at(n, c, y, x);
          naive += d * d;
        }
  CHECK(std::fabs(eps_loss(a, b) - naive / 96.0) < 1e-6);
  CHECK(eps_loss(a, b) == denoise_loss(a, b));

  const auto s = make_vp_schedule(1000, 1e-4, 0.02);
  for (int lvl : {5, 250, 600}) {
    const std::vector<int> t{lvl, lvl};
    const Tensor xt = rng.normal_like({2, 3, 4, 4});
    const double lhs = denoise_loss(denoiser_from_eps(xt, a, t, s), denoiser_from_eps(xt, b, t, s));
    const double r = s.sigma_at(lvl) / s.alpha_at(lvl);
    CHECK(std::fabs(lhs - r * r * eps_loss(a, b)) <= 1e-5 * lhs);
  }
  CHECK_THROWS(eps_loss(a, Tensor({2, 3, 4, 5})));
}
