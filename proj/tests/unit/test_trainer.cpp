#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <vector>

#include "ddae/backbone.hpp"
#include "ddae/corruption.hpp"
#include "ddae/dataset.hpp"
#include "ddae/error.hpp"
#include "ddae/trainer.hpp"
#include "fixtures.hpp"

using namespace ddae;
using testing::tiny;

namespace {

ImageBatch small_data(int n) { return make_synthetic_shapes(n, 8, 11); }

TrainOpts quick(int epochs) {
  TrainOpts o;
  o.epochs = epochs;
  o.batch_size = 16;
  o.learning_rate = 1e-3;
  o.seed = 4;
  return o;
}

}  // namespace

TEST_CASE("a zero-output network has unit loss") {
  auto net = build_ddae(tiny(), 1);
  net.param("conv_out.w")->value.fill(0.0f);
  net.param("conv_out.b")->value.fill(0.0f);
  const auto sched = make_vp_schedule(1000, 1e-4, 0.02);
  Pretrainer tr(net, sched, 3);
  const Tensor x = make_synthetic_shapes(256, 8, 1).data;
  // Mean of eps^2 over 256*192 draws: sd of the estimate is about 0.0065.
  CHECK(tr.step(x, 0.0) == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("zero learning rate leaves weights untouched") {
  auto net = build_ddae(tiny(), 1);
  const auto before = net.weight_hash();
  const auto sched = make_vp_schedule(100, 1e-4, 0.02);
  TrainOpts o = quick(1);
  o.learning_rate = 0.0;
  pretrain(net, small_data(32), sched, o);
  CHECK(net.weight_hash() == before);
}

TEST_CASE("training lowers the loss") {
  auto net = build_ddae(tiny(), 1);
  const auto sched = make_vp_schedule(100, 1e-4, 0.02);
  const auto r = pretrain(net, small_data(64), sched, quick(12));
  REQUIRE(r.epoch_loss.size() == 12);
  const double first = r.epoch_loss.front();
  const double last = (r.epoch_loss[9] + r.epoch_loss[10] + r.epoch_loss[11]) / 3.0;
  CHECK(last < 0.8 * first);
}

TEST_CASE("levels are uniform over the schedule") {
  Rng rng(5);
  const int T = 1000, n = 100000;
  const auto t = sample_levels(n, T, rng);
  std::vector<int> hist(10, 0);
  for (int v : t) {
    REQUIRE(v >= 1);
    REQUIRE(v <= T);
    ++hist[static_cast<std::size_t>((v - 1) * 10 / T)];
  }
  for (int h : hist) CHECK(std::abs(h / static_cast<double>(n) - 0.1) <= 0.01);
}

TEST_CASE("pretraining is deterministic and resumes exactly") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "ddae_test_resume";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto sched = make_vp_schedule(100, 1e-4, 0.02);
  const ImageBatch data = small_data(40);

  auto a = build_ddae(tiny(), 2);
  auto b = build_ddae(tiny(), 2);
  TrainOpts o = quick(3);
  o.checkpoint_every = 1;
  o.checkpoint_dir = dir;
  const auto ra = pretrain(a, data, sched, o);
  TrainOpts ob = quick(3);
  const auto rb = pretrain(b, data, sched, ob);
  CHECK(a.weight_hash() == b.weight_hash());
  CHECK(ra.epoch_loss == rb.epoch_loss);
  REQUIRE(ra.checkpoints.size() == 3);

  auto c = build_ddae(tiny(), 77);
  const auto rc = pretrain(c, data, sched, ob, {}, {}, ra.checkpoints[0]);
  CHECK(c.weight_hash() == a.weight_hash());
  REQUIRE(rc.epoch_loss.size() == 2);
  CHECK(rc.epoch_loss[1] == ra.epoch_loss[2]);
}

TEST_CASE("trainer rejects bad inputs") {
  auto net = build_ddae(tiny(), 1);
  const auto sched = make_vp_schedule(100, 1e-4, 0.02);
  TrainOpts o = quick(1);
  o.batch_size = 0;
  CHECK_THROWS_AS(pretrain(net, small_data(8), sched, o), ParameterError);
  CHECK_THROWS_AS(pretrain(net, ImageBatch{Tensor({0, 3, 8, 8}), {}, 10}, sched, quick(1)), DataError);
  Pretrainer tr(net, sched, 1);
  CHECK_THROWS_AS(tr.step(Tensor({2, 3, 16, 16}), 1e-3), ContractError);
}

TEST_CASE("non-finite loss is reported with diagnostics") {
  auto net = build_ddae(tiny(), 1);
  net.param("conv_out.b")->value.fill(std::numeric_limits<float>::infinity());
  const auto sched = make_vp_schedule(100, 1e-4, 0.02);
  Pretrainer tr(net, sched, 1);
  CHECK_THROWS_WITH_AS(tr.step(small_data(8).data, 1e-3), doctest::Contains("decile"), NumericalError);
}
