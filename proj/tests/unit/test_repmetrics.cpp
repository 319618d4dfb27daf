#include "doctest.h"

#include <cmath>
#include <vector>

#include "ddae/backbone.hpp"
#include "ddae/corruption.hpp"
#include "ddae/dataset.hpp"
#include "ddae/error.hpp"
#include "ddae/ops.hpp"
#include "ddae/repmetrics.hpp"
#include "fixtures.hpp"

using namespace ddae;
using testing::randomize_output_layers;
using testing::tiny;

namespace {

// Row i is e_0 when image i has positive mean, e_1 otherwise (times `scale`).
FeatureFn sign_features(float scale = 1.0f) {
  return [scale](const Tensor& x, std::span<const int>) {
    const int n = x.dim(0);
    const std::size_t per = x.numel() / static_cast<std::size_t>(n);
    Tensor f({n, 2});
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < per; ++j) s += x[static_cast<std::size_t>(i) * per + j];
      f.at(i, s > 0 ? 0 : 1) = scale;
    }
    return f;
  };
}

Tensor constant_images(std::initializer_list<float> values) {
  Tensor x({static_cast<int>(values.size()), 3, 4, 4});
  int i = 0;
  for (float v : values) {
    for (int j = 0; j < 48; ++j) x[static_cast<std::size_t>(i) * 48 + j] = v;
    ++i;
  }
  return x;
}

// Pooled, unit-normalized tap features of one image, in double.
std::vector<double> oracle_feature(const DDAENetwork& net, const TapId& tap, const Tensor& x_t, int t) {
  const std::vector<int> lv{t};
  const Tensor act = forward_with_tap(net, x_t, lv, tap).activation;
  const int c = act.dim(1), hw = act.dim(2) * act.dim(3);
  std::vector<double> f(static_cast<std::size_t>(c), 0.0);
  for (int k = 0; k < c; ++k)
    for (int j = 0; j < hw; ++j) f[static_cast<std::size_t>(k)] += act[static_cast<std::size_t>(k) * hw + j];
  double nrm = 0.0;
  for (auto& v : f) nrm += (v / hw) * (v / hw);
  for (auto& v : f) v = v / hw / std::sqrt(nrm);
  return f;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

GaussianSummary diag_summary(std::vector<double> mean, std::vector<double> var) {
  GaussianSummary g;
  const int d = static_cast<int>(mean.size());
  g.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), d);
  g.covariance = Eigen::MatrixXd::Zero(d, d);
  for (int i = 0; i < d; ++i) g.covariance(i, i) = var[static_cast<std::size_t>(i)];
  return g;
}

}  // namespace

TEST_CASE("alignment and uniformity match a per-pair brute force") {
  auto net = build_ddae(tiny(), 3);
  Rng rng(3);
  randomize_output_layers(net, rng);
  const auto sched = make_vp_schedule(100, 1e-4, 0.02);
  const ImageBatch imgs = make_synthetic_shapes(8, 8, 2);
  const TapId tap = net.taps()[3];
  const int t = 20;
  const auto f = tap_feature_fn(net, tap);
  for (bool uniform : {false, true}) {
    const NoisePairPlan plan = uniform ? uniformity_plan(imgs, 24, rng) : alignment_plan(imgs, 24, rng);
    double sum = 0.0, sum_exp = 0.0;
    for (int p = 0; p < plan.size(); ++p) {
      const std::vector<int> one{p}, lv{t};
      const Tensor xa = noise(imgs.data.gather_rows(std::vector<int>{plan.a[static_cast<std::size_t>(p)]}), lv,
                              plan.eps_a.gather_rows(one), sched);
      const Tensor xb = noise(imgs.data.gather_rows(std::vector<int>{plan.b[static_cast<std::size_t>(p)]}), lv,
                              plan.eps_b.gather_rows(one), sched);
      const double d = sq_dist(oracle_feature(net, tap, xa, t), oracle_feature(net, tap, xb, t));
      sum += d;
      sum_exp += std::exp(-2.0 * d);
    }
    if (uniform)
      CHECK(uniformity(f, imgs.data, t, sched, plan) == doctest::Approx(std::log(sum_exp / plan.size())).epsilon(1e-5));
    else
      CHECK(alignment(f, imgs.data, t, sched, plan) == doctest::Approx(sum / plan.size()).epsilon(1e-5));
  }
}

TEST_CASE("pair plans have the documented structure") {
  Rng rng(1);
  const ImageBatch imgs = make_synthetic_shapes(5, 8, 2);
  const auto al = alignment_plan(imgs, 30, rng);
  CHECK(al.a == al.b);
  CHECK(!al.eps_a.bitwise_equal(al.eps_b));
  const auto un = uniformity_plan(imgs, 200, rng);
  CHECK(un.eps_a.bitwise_equal(un.eps_b));
  int self = 0;
  for (int p = 0; p < un.size(); ++p) self += un.a[static_cast<std::size_t>(p)] == un.b[static_cast<std::size_t>(p)];
  CHECK(self > 0);
  CHECK(!uniformity_plan(imgs, 20, rng, true).eps_a.bitwise_equal(uniformity_plan(imgs, 20, rng, true).eps_b));
}

TEST_CASE("closed-form uniformity and alignment on known geometry") {
  const auto sched = make_vp_schedule(100, 1e-4, 0.02);
  const Tensor x = constant_images({1.0f, -1.0f});
  NoisePairPlan plan;
  plan.a = {0, 0, 1, 1};
  plan.b = {0, 1, 0, 1};
  plan.eps_a = Tensor({4, 3, 4, 4});
  plan.eps_b = Tensor({4, 3, 4, 4});
  // Antipodal points: log((2 + 2 exp(-8)) / 4).
  const FeatureFn antipodal = [](const Tensor& xt, std::span<const int>) {
    Tensor f({xt.dim(0), 1});
    for (int i = 0; i < xt.dim(0); ++i) f.at(i, 0) = xt[static_cast<std::size_t>(i) * 48] > 0 ? 1.0f : -1.0f;
    return f;
  };
  CHECK(uniformity(antipodal, x, 1, sched, plan) == doctest::Approx(-0.692812).epsilon(1e-5));
  CHECK(uniformity(antipodal, x, 1, sched, plan) == doctest::Approx(std::log(0.5 + 0.5 * std::exp(-8.0))));

  NoisePairPlan cross = plan;
  cross.a = {0, 1};
  cross.b = {1, 0};
  cross.eps_a = Tensor({2, 3, 4, 4});
  cross.eps_b = Tensor({2, 3, 4, 4});
  CHECK(alignment(sign_features(), x, 1, sched, cross) == doctest::Approx(2.0));
  CHECK(alignment(sign_features(7.5f), x, 1, sched, cross) == doctest::Approx(2.0));
}

TEST_CASE("metrics are invariant to feature scale") {
  Rng rng(8);
  const auto sched = make_vp_schedule(100, 1e-4, 0.02);
  const ImageBatch imgs = make_synthetic_shapes(6, 8, 5);
  const FeatureFn base = [](const Tensor& x, std::span<const int>) {
    return x.reshaped({x.dim(0), static_cast<int>(x.numel() / x.dim(0))});
  };
  const FeatureFn scaled = [&](const Tensor& x, std::span<const int> t) {
    Tensor f = base(x, t);
    for (auto& v : f.values()) v *= 4.0f;
    return f;
  };
  const auto plan = uniformity_plan(imgs, 40, rng);
  CHECK(uniformity(base, imgs.data, 30, sched, plan) ==
        doctest::Approx(uniformity(scaled, imgs.data, 30, sched, plan)).epsilon(1e-6));
  CHECK(alignment(base, imgs.data, 30, sched, plan) ==
        doctest::Approx(alignment(scaled, imgs.data, 30, sched, plan)).epsilon(1e-6));
}

TEST_CASE("unit normalization rejects zero rows") {
  CHECK_THROWS_AS(unit_normalize(Tensor({2, 3})), NumericalError);
  const Tensor u = unit_normalize(Tensor({1, 2}, {3.0f, 4.0f}));
  CHECK(u[0] == doctest::Approx(0.6));
  CHECK(u[1] == doctest::Approx(0.8));
}

TEST_CASE("frechet distance closed forms") {
  const auto a1 = diag_summary({0.5}, {4.0});
  const auto b1 = diag_summary({-1.0}, {1.0});
  CHECK(frechet_distance(a1, b1) == doctest::Approx(1.5 * 1.5 + (2.0 - 1.0) * (2.0 - 1.0)).epsilon(1e-12));

  const auto a = diag_summary({1.0, 2.0, 0.0}, {0.5, 2.0, 9.0});
  const auto b = diag_summary({0.0, 2.5, 1.0}, {1.5, 0.1, 4.0});
  double expect = 1.0 + 0.25 + 1.0;
  for (auto [u, v] : {std::pair{0.5, 1.5}, {2.0, 0.1}, {9.0, 4.0}}) expect += std::pow(std::sqrt(u) - std::sqrt(v), 2);
  CHECK(std::abs(frechet_distance(a, b) - expect) <= 1e-8);
  CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-8);
  CHECK(std::abs(frechet_distance(a, a)) <= 1e-8);

  // Full covariances: symmetric in the arguments.
  Rng rng(2);
  const Tensor x = rng.normal_like({50, 4}), y = rng.normal_like({60, 4});
  const auto gx = gaussian_summary(x), gy = gaussian_summary(y);
  CHECK(frechet_distance(gx, gy) == doctest::Approx(frechet_distance(gy, gx)).epsilon(1e-8));
  CHECK(frechet_distance(gx, gx) == doctest::Approx(0.0).epsilon(1e-8));

  auto bad = diag_summary({0.0, 0.0}, {1.0, -1.0});
  CHECK_THROWS_AS(frechet_distance(bad, diag_summary({0.0, 0.0}, {1.0, 1.0})), NumericalError);
  CHECK_THROWS_AS(frechet_distance(a1, a), ContractError);
}

TEST_CASE("gaussian summary uses the unbiased covariance") {
  const Tensor x({3, 2}, {1.0f, 0.0f, 2.0f, 2.0f, 3.0f, 1.0f});
  const auto g = gaussian_summary(x);
  CHECK(g.mean(0) == doctest::Approx(2.0));
  CHECK(g.covariance(0, 0) == doctest::Approx(1.0));
  CHECK(g.covariance(0, 1) == doctest::Approx(0.5));
  CHECK(g.covariance(1, 0) == doctest::Approx(0.5));
  const auto back = summary_from_archive(summary_archive(g));
  CHECK(back.mean == g.mean);
  CHECK(back.covariance == g.covariance);
  CHECK_THROWS(gaussian_summary(Tensor({1, 2})));
}

TEST_CASE("fid of a shifted set is the squared shift") {
  Rng rng(4);
  const Tensor real = rng.normal_like({200, 3, 2, 2});
  Tensor shifted = real;
  const float c = 0.25f;
  for (auto& v : shifted.values()) v += c;
  const double d = 12.0;
  CHECK(fid(identity_embedder(), real, shifted) == doctest::Approx(d * c * c).epsilon(1e-3));
  CHECK(fid(identity_embedder(), real, real) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("pca components are orthonormal and ordered") {
  Rng rng(6);
  Tensor x = rng.normal_like({40, 1, 3, 3});
  for (int i = 0; i < 40; ++i) x[static_cast<std::size_t>(i) * 9] *= 5.0f;
  const auto pca = fit_pca(x, 3);
  REQUIRE(pca.components.dim(0) == 3);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      double s = 0.0;
      for (int j = 0; j < 9; ++j) s += pca.components.at(a, j) * pca.components.at(b, j);
      CHECK(s == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-5));
    }
  CHECK(std::abs(pca.components.at(0, 0)) > 0.9);
  const Tensor p = pca.apply(x);
  double v0 = 0, v1 = 0;
  for (int i = 0; i < 40; ++i) {
    v0 += p.at(i, 0) * p.at(i, 0);
    v1 += p.at(i, 1) * p.at(i, 1);
  }
  CHECK(v0 >= v1);
  CHECK(fit_pca(x, 100).components.dim(0) == 9);
}

TEST_CASE("spearman with ties") {
  const std::vector<double> up{1, 2, 3, 4}, down{4, 3, 2, 1};
  CHECK(spearman(up, up) == doctest::Approx(1.0));
  CHECK(spearman(up, down) == doctest::Approx(-1.0));
  const std::vector<double> x{1, 2, 2, 3}, y{1, 3, 2, 4};
  CHECK(spearman(x, y) == doctest::Approx(4.5 / std::sqrt(22.5)));
  CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), ParameterError);
}

TEST_CASE("noise-conditional classifier head") {
  auto net = build_ddae(tiny(), 5);
  Rng rng(5);
  randomize_output_layers(net, rng);
  const TapId tap = net.taps()[2];
  const int d = net.tap_channels(tap);
  auto head = ClassifierHead::init(tap, d, 12, 4, 100, rng);
  for (auto& v : head.tau->value.values()) v = 0.1f * static_cast<float>(rng.normal());
  NoiseCondClassifier clf(net.clone(), head);
  for (const auto& p : clf.network().params()) CHECK_FALSE(p.var->requires_grad);

  const Tensor x = rng.normal_like({3, 3, 8, 8});
  const std::vector<int> t{1, 50, 100};
  {
    ag::NoGradGuard ng;
    const auto out = classify_noised(clf, ag::constant(x), t);
    for (int i = 0; i < 3; ++i) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += std::exp(out.log_probs->value.at(i, k));
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
  }

  SUBCASE("gradient matches central differences") {
    const int level = 40, target = 2;
    const Tensor g = log_prob_gradient(clf, x, level, target);
    auto objective = [&](const Tensor& xx) {
      ag::NoGradGuard ng;
      const std::vector<int> lv(3, level);
      const auto out = classify_noised(clf, ag::constant(xx), lv);
      double s = 0.0;
      for (int i = 0; i < 3; ++i) s += out.log_probs->value.at(i, target);
      return s;
    };
    Rng pick(9);
    for (int k = 0; k < 8; ++k) {
      const auto idx = static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(x.numel()) - 1));
      const float h = 1e-2f;
      Tensor xp = x, xm = x;
      xp[idx] += h;
      xm[idx] -= h;
      const double num = (objective(xp) - objective(xm)) / (2.0 * h);
      CHECK(std::abs(num - g[idx]) <= 1e-2 * std::abs(num) + 1e-4);
    }
  }

  SUBCASE("a zero output layer gives uniform probabilities and no gradient") {
    clf.head().w2->value.fill(0.0f);
    clf.head().b2->value.fill(0.0f);
    ag::NoGradGuard ng;
    const auto out = classify_noised(clf, ag::constant(x), t);
    for (float v : out.log_probs->value.values()) CHECK(v == doctest::Approx(-std::log(4.0)));
  }

  SUBCASE("eps and gradient come from one backbone pass") {
    const long before = clf.network().forward_calls();
    Tensor eps;
    log_prob_gradient(clf, x, 10, 1, &eps);
    CHECK(clf.network().forward_calls() - before == 1);
    const std::vector<int> lv(3, 10);
    CHECK(eps.bitwise_equal(forward_eps(clf.network(), x, lv)));
  }

  CHECK_THROWS_AS(log_prob_gradient(clf, x, 10, 4), ContractError);
  CHECK_THROWS_AS(classify_noised(clf, ag::constant(x), std::vector<int>{0, 1, 2}), ContractError);

  const auto back = NoiseCondClassifier::from_archive(clf.archive());
  CHECK(back.network().weight_hash() == clf.network().weight_hash());
  CHECK(back.head().tau->value.bitwise_equal(clf.head().tau->value));
}

TEST_CASE("classifier training leaves the source network untouched") {
  auto net = build_ddae(tiny(), 5);
  const auto before = net.weight_hash();
  const auto sched = make_vp_schedule(50, 1e-4, 0.02);
  ClassifierOpts o;
  o.epochs = 2;
  o.batch_size = 16;
  const auto clf = train_noise_cond_classifier(net, net.taps()[1], make_synthetic_shapes(40, 8, 1), sched, o);
  CHECK(net.weight_hash() == before);
  CHECK(clf.network().weight_hash() == before);
  CHECK(clf.head().levels() == 50);
}
