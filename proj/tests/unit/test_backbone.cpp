#include "doctest.h"

#include <cmath>
#include <string>
#include <vector>

#include "ddae/backbone.hpp"
#include "ddae/error.hpp"
#include "ddae/ops.hpp"
#include "ddae/rng.hpp"
#include "fixtures.hpp"

using namespace ddae;

using testing::randomize_output_layers;
using testing::tiny;

TEST_CASE("tap enumeration counts down, mid and up blocks") {
  DDAEConfig c;
  c.base_channels = 32;
  c.channel_multipliers = {1, 2};
  c.blocks_per_resolution = 2;
  c.attention_resolutions = {8};
  c.image_size = 16;
  const auto net = build_ddae(c, 0);
  int down = 0, mid = 0, up = 0;
  for (const auto& t : net.taps()) (t.path == TapPath::down ? down : t.path == TapPath::mid ? mid : up)++;
  CHECK(down == 4);
  CHECK(mid == 2);
  CHECK(up == 6);
  CHECK(net.taps().back().resolution == 16);
}

TEST_CASE("reference layer names reproduce the published combinations") {
  struct Case {
    std::vector<int> mult;
    int blocks, size;
    const char* key;
    const char* expect;
  };
  const Case cases[] = {
      {{1, 2, 2, 2}, 2, 32, "up.1.0@16", "7/12 (1st block@16)"},
      {{2, 2, 2}, 4, 32, "up.1.0@16", "6/15 (1st block@16)"},
      {{1, 2, 2, 2}, 2, 64, "up.3.1@8", "2/12 (2nd block@8)"},
      {{1, 2, 2, 2}, 4, 64, "up.2.1@16", "7/20 (2nd block@16)"},
  };
  for (const auto& cs : cases) {
    DDAEConfig c;
    c.base_channels = 32;
    c.channel_multipliers = cs.mult;
    c.blocks_per_resolution = cs.blocks;
    c.attention_resolutions = {16};
    c.image_size = cs.size;
    const auto net = build_ddae(c, 0);
    CHECK(net.describe_tap(TapId::parse(cs.key)) == cs.expect);
  }
}

TEST_CASE("reference network size") {
  const auto net = build_ddae(DDAEConfig::ddpm_cifar10(), 0);
  const double m = static_cast<double>(net.parameter_count()) / 1e6;
  CHECK(std::round(m * 10) / 10 == doctest::Approx(35.7));
  const TapId tap = TapId::parse("up.1.0@16");
  CHECK(net.tap_channels(tap) == 128 * 2);
}

TEST_CASE("config validation names the field") {
  DDAEConfig c = tiny();
  c.image_size = 7;
  c.attention_resolutions = {};
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("image_size"), ParameterError);
  c = tiny();
  c.attention_resolutions = {3};
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("attention_resolutions"), ParameterError);
  c = tiny();
  c.channel_multipliers = {};
  CHECK_THROWS_AS(build_ddae(c, 0), ParameterError);
}

TEST_CASE("tap keys round trip") {
  const TapId t{TapPath::mid, 1, 0, 4};
  CHECK(t.key() == "mid.1.0@4");
  CHECK(TapId::parse(t.key()) == t);
  CHECK_THROWS(TapId::parse("sideways.0.0@4"));
}

TEST_CASE("forward shape, determinism and zero head") {
  auto net = build_ddae(tiny(), 1);
  Rng rng(1);
  const Tensor x = rng.normal_like({3, 3, 8, 8});
  const std::vector<int> t{1, 1, 1};
  const Tensor zeros({3, 3, 8, 8});
  CHECK(forward_eps(net, zeros, t).shape() == zeros.shape());

  net.param("conv_out.w")->value.fill(0.0f);
  net.param("conv_out.b")->value.fill(0.0f);
  const Tensor e = forward_eps(net, x, t);
  for (float v : e.values()) CHECK(v == 0.0f);

  randomize_output_layers(net, rng);
  CHECK(forward_eps(net, x, t).bitwise_equal(forward_eps(net, x, t)));
}

TEST_CASE("tapping does not alter the computation") {
  auto net = build_ddae(tiny(), 2);
  Rng rng(2);
  randomize_output_layers(net, rng);
  const Tensor x = rng.normal_like({2, 3, 8, 8});
  const std::vector<int> t{5, 900};
  const Tensor plain = forward_eps(net, x, t);
  for (const auto& tap : net.taps()) {
    const auto tf = forward_with_tap(net, x, t, tap);
    CHECK(tf.eps.bitwise_equal(plain));
    CHECK(tf.activation.dim(1) == net.tap_channels(tap));
    CHECK(tf.activation.dim(2) == tap.resolution);
  }
  CHECK(net.taps().back().resolution == 8);
  CHECK_THROWS_AS(forward_with_tap(net, x, t, TapId{TapPath::up, 7, 0, 8}), ContractError);
}

TEST_CASE("truncated encoder equals pooled tap activation") {
  auto net = build_ddae(tiny(), 3);
  Rng rng(3);
  randomize_output_layers(net, rng);
  const Tensor x = rng.normal_like({2, 3, 8, 8});
  for (const auto& tap : net.taps()) {
    const Encoder enc = truncate(net, tap, 11);
    const std::vector<int> t{11, 11};
    const Tensor act = forward_with_tap(net, x, t, tap).activation;
    const Tensor f = enc.encode(x);
    REQUIRE(f.dim(1) == enc.feature_dim());
    const int c = act.dim(1), hw = act.dim(2) * act.dim(3);
    for (int n = 0; n < 2; ++n)
      for (int ch = 0; ch < c; ++ch) {
        float s = 0;
        for (int i = 0; i < hw; ++i) s += act[(static_cast<std::size_t>(n) * c + ch) * hw + i];
        CHECK(f[static_cast<std::size_t>(n) * c + ch] == doctest::Approx(s / hw).epsilon(1e-6));
      }
    CHECK(f.bitwise_equal(pooled_tap_features(net, tap, x, t)));
  }
}

TEST_CASE("global average pool of a constant map") {
  Tensor m({1, 2, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) m[i] = 0.25f;
  for (std::size_t i = 9; i < 18; ++i) m[i] = -3.0f;
  const Tensor p = ag::global_avg_pool(ag::constant(m))->value;
  CHECK(p[0] == 0.25f);
  CHECK(p[1] == -3.0f);
}

TEST_CASE("loss gradients match central differences") {
  auto net = build_ddae(tiny(), 4);
  Rng rng(4);
  randomize_output_layers(net, rng);
  const Tensor x = rng.normal_like({4, 3, 8, 8});
  const Tensor eps = rng.normal_like({4, 3, 8, 8});
  const std::vector<int> t{1, 40, 300, 999};
  auto loss_at = [&] {
    ag::NoGradGuard ng;
    return static_cast<double>(ag::mse(net.run(ag::constant(x), t).eps, ag::constant(eps))->value[0]);
  };
  ag::backward(ag::mse(net.run(ag::constant(x), t).eps, ag::constant(eps)));

  // Sixteen random weights whose gradient stands above float round-off.
  int checked = 0, tries = 0;
  auto& params = net.params();
  while (checked < 16 && tries++ < 20000) {
    auto& p = params[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(params.size()) - 1))];
    const std::size_t i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(p.var->value.numel()) - 1));
    const double an = p.var->grad[i];
    if (std::fabs(an) < 1e-2) continue;
    const float orig = p.var->value[i];
    const float h = 1e-2f;
    p.var->value[i] = orig + h;
    const double lp = loss_at();
    p.var->value[i] = orig - h;
    const double lm = loss_at();
    p.var->value[i] = orig;
    const double fd = (lp - lm) / (2.0 * h);
    const bool attn = p.name.find("attn") != std::string::npos;
    INFO(p.name, "[", i, "] fd=", fd, " analytic=", an);
    CHECK(std::fabs(fd - an) <= (attn ? 1e-2 : 1e-3) * std::fabs(an) + 1e-5);
    ++checked;
  }
  CHECK(checked == 16);
}

TEST_CASE("clone is independent and weight hash tracks changes") {
  auto net = build_ddae(tiny(), 5);
  auto copy = net.clone();
  CHECK(copy.weight_hash() == net.weight_hash());
  copy.params()[0].var->value[0] += 1.0f;
  CHECK(copy.weight_hash() != net.weight_hash());
  CHECK(build_ddae(tiny(), 5).weight_hash() == net.weight_hash());
  CHECK(build_ddae(tiny(), 6).weight_hash() != net.weight_hash());
}
