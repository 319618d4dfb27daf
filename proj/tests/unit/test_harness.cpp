#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "ddae/dataset.hpp"
#include "ddae/error.hpp"
#include "ddae/harness.hpp"
#include "fixtures.hpp"

using namespace ddae;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json reversed(const json& j) {
  if (!j.is_object()) return j;
  // nlohmann objects are sorted maps, so rebuild through an ordered_json to vary the text order.
  nlohmann::ordered_json o;
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) o[*it] = reversed(j.at(*it));
  return json::parse(o.dump());
}

RunConfig micro_config() {
  RunConfig c;
  c.seed = 5;
  c.model = testing::tiny();
  c.schedule = {ScheduleKind::vp, 100, 1e-4, 0.02};
  c.train.epochs = 2;
  c.train.batch_size = 16;
  c.train.learning_rate = 1e-3;
  c.train.checkpoint_every = 1;
  c.probe.ts = {1, 10, 50};
  c.probe.opts.epochs = 2;
  c.probe.opts.batch_size = 32;
  c.metric.pairs = 16;
  c.metric.images = 8;
  c.dataset.format = "synthetic";
  c.dataset.synthetic_count = 48;
  c.dataset.holdout_fraction = 0.25;
  return c;
}

}  // namespace

TEST_CASE("config json round trip and canonical hashing") {
  RunConfig c = micro_config();
  c.probe.taps = {"up.1.0@4"};
  c.sample.guidance_scaling = GuidanceScaling::stddev;
  const json j = c;
  RunConfig back;
  from_json(j, back);
  CHECK(canonical_json(back) == canonical_json(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c).size() == 16);

  const std::string text = reversed(j).dump();
  RunConfig permuted;
  from_json(json::parse(text), permuted);
  CHECK(config_hash(permuted) == config_hash(c));

  RunConfig moved = c;
  moved.output_dir = "/somewhere/else";
  CHECK(config_hash(moved) == config_hash(c));
  RunConfig other = c;
  other.seed = 6;
  CHECK(config_hash(other) != config_hash(c));
}

TEST_CASE("config parsing reports bad input") {
  RunConfig c;
  CHECK_THROWS_WITH_AS(from_json(json{{"trian", json::object()}}, c), doctest::Contains("trian"), ParameterError);
  CHECK_THROWS_WITH_AS(from_json(json{{"probe", {{"epochs", "ten"}}}}, c), doctest::Contains("epochs"), ParameterError);
  CHECK_THROWS_AS(from_json(json{{"schedule", {{"kind", "cosine"}}}}, c), ParameterError);
  RunConfig bad = micro_config();
  bad.probe.ts = {101};
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = micro_config();
  bad.dataset.format = "jpeg";
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), IoError);
}

TEST_CASE("preset registry carries the published settings") {
  const RunConfig p = preset_config("linear-probing/ddpm-cifar10");
  CHECK(p.probe.opts.learning_rate == 1e-3);
  CHECK(p.probe.opts.lr_schedule == LrSchedule::cosine);
  CHECK(p.probe.opts.batch_size == 128);
  CHECK(p.probe.opts.epochs == 10);
  CHECK(p.probe.opts.horizontal_flip);
  CHECK(p.probe.opts.pad_crop);
  CHECK(preset_config("linear-probing/edm-cifar10").probe.opts.epochs == 15);
  CHECK(preset_config("linear-probing/edm-tiny-imagenet").probe.opts.epochs == 30);
  CHECK(preset_config("fine-tuning/ddpm-cifar10").finetune.opts.epochs == 30);
  CHECK(preset_config("fine-tuning/edm-cifar10").finetune.opts.epochs == 50);
  CHECK(preset_config("fine-tuning/edm-tiny-imagenet").finetune.opts.epochs == 100);
  const RunConfig scratch = preset_config("from-scratch");
  CHECK(scratch.finetune.opts.learning_rate == 5e-4);
  CHECK(scratch.finetune.opts.epochs == 200);
  CHECK(scratch.finetune.opts.warmup_epochs == 5);

  const RunConfig full = preset_config("pretrain/ddpm-cifar10,layer-noise/ddpm-cifar10");
  CHECK(full.probe.taps == std::vector<std::string>{"up.1.0@16"});
  CHECK(full.probe.ts == std::vector<int>{11});
  CHECK(full.schedule.T == 1000);
  CHECK(full.train.epochs == 2000);
  const DDAENetwork net = build_ddae(full.model, 0);
  CHECK(net.describe_tap(TapId::parse(full.probe.taps[0])) == "7/12 (1st block@16)");
  CHECK(net.parameter_count() == doctest::Approx(35.7e6).epsilon(0.005));

  const RunConfig edm = preset_config("pretrain/edm-cifar10,layer-noise/edm-cifar10");
  CHECK(edm.schedule.kind == ScheduleKind::ve);
  CHECK(edm.schedule.T == 18);
  CHECK(edm.probe.ts == std::vector<int>{4});
  CHECK(build_ddae(edm.model, 0).describe_tap(TapId::parse("up.1.0@16")) == "6/15 (1st block@16)");

  const RunConfig tiny = preset_config("pretrain/ddpm-tiny-imagenet,layer-noise/ddpm-tiny-imagenet");
  CHECK(build_ddae(tiny.model, 0).describe_tap(TapId::parse(tiny.probe.taps[0])) == "2/12 (2nd block@8)");
  CHECK(tiny.probe.ts == std::vector<int>{45});
  const RunConfig edm_tiny = preset_config("pretrain/edm-tiny-imagenet,layer-noise/edm-tiny-imagenet");
  CHECK(build_ddae(edm_tiny.model, 0).describe_tap(TapId::parse(edm_tiny.probe.taps[0])) == "7/20 (2nd block@16)");
  CHECK(edm_tiny.schedule.T == 50);
  CHECK(edm_tiny.probe.ts == std::vector<int>{14});

  CHECK_THROWS_AS(find_preset("nope"), ParameterError);
  for (const auto& p : preset_registry()) CHECK_NOTHROW(preset_config(p.name));
}

TEST_CASE("seed plan fans out to distinct phase seeds") {
  const auto a = SeedPlan::from_master(1), b = SeedPlan::from_master(1), c = SeedPlan::from_master(2);
  CHECK(a.init == b.init);
  CHECK(a.sampling == b.sampling);
  CHECK(a.init != c.init);
  const std::set<std::uint64_t> distinct{a.init, a.noising, a.splits, a.probe, a.sampling, a.metric};
  CHECK(distinct.size() == 6);
}

TEST_CASE("merge patch") {
  const json base = {{"a", {{"x", 1}, {"y", 2}}}, {"b", {1, 2}}};
  const json m = merge_patch(base, {{"a", {{"y", 3}}}, {"b", {9}}});
  CHECK(m["a"]["x"] == 1);
  CHECK(m["a"]["y"] == 3);
  CHECK(m["b"] == json::array({9}));
}

TEST_CASE("variants") {
  const RunConfig base = micro_config();
  RunConfig big = base;
  big.schedule.T = 1000;
  big.probe.ts = {1, 10, 100, 400};
  const auto vs = standard_variants(big);
  REQUIRE(vs.size() == 5);
  const RunConfig t64 = apply_variant(big, vs[2]);
  CHECK(t64.schedule.T == 64);
  CHECK(t64.probe.ts == std::vector<int>{1, 6, 26});
  CHECK(t64.schedule.max == doctest::Approx(0.02 * 1000 / 64));
  const RunConfig small = apply_variant(big, vs[4]);
  CHECK(vs[4].name == "smaller-half");
  CHECK(small.schedule.T == 1000);
  CHECK(small.schedule.min == 1e-4);
  CHECK(small.schedule.max == doctest::Approx((1e-4 + 0.02) / 2));
  const RunConfig large = apply_variant(big, vs[3]);
  CHECK(large.schedule.min == doctest::Approx((1e-4 + 0.02) / 2));
  CHECK(large.schedule.max == 0.02);
  CHECK(large.probe.ts == big.probe.ts);
}

TEST_CASE("dataset resolution falls back to the data directory") {
  const fs::path dir = fs::temp_directory_path() / "ddae_test_datadir";
  fs::remove_all(dir);
  fs::create_directories(dir / "cifar");
  std::string rec(kCifarRecordBytes, '\0');
  for (int i = 1; i <= 5; ++i) std::ofstream(dir / "cifar" / ("data_batch_" + std::to_string(i) + ".bin"), std::ios::binary) << rec;
  std::ofstream(dir / "cifar" / "test_batch.bin", std::ios::binary) << rec;
  DatasetSpec spec;
  spec.format = "cifar10";
  spec.path = "cifar";
  setenv("DDAE_DATA_DIR", dir.c_str(), 1);
  const Dataset ds = load_dataset(spec, 32, 1);
  CHECK(ds.train.size() == 5);
  CHECK(ds.test.size() == 1);
  CHECK_THROWS_AS(load_dataset(spec, 16, 1), ParameterError);
  unsetenv("DDAE_DATA_DIR");
  spec.path = "";
  CHECK_THROWS_AS(load_dataset(spec, 32, 1), IoError);

  DatasetSpec syn;
  syn.synthetic_count = 40;
  syn.holdout_fraction = 0.25;
  syn.max_train = 20;
  const Dataset s = load_dataset(syn, 8, 3);
  CHECK(s.train.size() == 20);
  CHECK(s.test.size() == 10);
}

TEST_CASE("pipeline runs end to end and reruns identically") {
  const fs::path out = fs::temp_directory_path() / "ddae_test_pipeline";
  fs::remove_all(out);
  RunConfig c = micro_config();
  c.output_dir = out / "a";
  RecordCollector ra, rb;
  const auto a = run_pipeline(c, &ra);
  c.output_dir = out / "b";
  const auto b = run_pipeline(c, &rb);
  REQUIRE(ra.rows().size() == rb.rows().size());
  for (std::size_t i = 0; i < ra.rows().size(); ++i) CHECK(ra.rows()[i].same_content(rb.rows()[i]));
  CHECK(a.run_id == b.run_id);
  CHECK(a.trajectory.size() == 2);
  CHECK(a.grid.cells.size() == 3 * 4);  // three levels, four up-path taps
  for (const char* f : {"config.json", "records.jsonl", "grid.json", "final.ddae", "heads.ddae"})
    CHECK(fs::exists(out / "a" / f));
  CHECK(fs::exists(out / "a" / "checkpoints" / "ckpt_epoch1.ddae"));
  CHECK(read_records(out / "a" / "records.jsonl").size() == ra.rows().size());
  CHECK(load_run_config(out / "a" / "config.json").seed == 5);
}

TEST_CASE("ablation isolates failing variants") {
  RunConfig c = micro_config();
  c.train.epochs = 1;
  c.probe.opts.epochs = 1;
  const Dataset data = load_dataset(c.dataset, c.model.image_size, 1);
  const std::vector<Variant> vs{{"broken", {{"schedule", {{"min", 0.5}, {"max", 0.1}}}}},
                                {"T=50", {{"schedule", {{"T", 50}}}}}};
  const auto r = run_ablation(c, vs, data);
  REQUIRE(r.rows.size() == 3);
  CHECK(r.rows[0].variant == "base");
  CHECK(r.row("base").ok);
  CHECK_FALSE(r.row("broken").ok);
  CHECK_FALSE(r.row("broken").error.empty());
  CHECK(r.row("T=50").ok);
  const std::string csv = r.summary_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  const auto only = run_ablation(c, {}, data);
  CHECK(only.rows.size() == 1);
}
