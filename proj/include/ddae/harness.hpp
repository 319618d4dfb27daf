#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddae/backbone.hpp"
#include "ddae/corruption.hpp"
#include "ddae/image_batch.hpp"
#include "ddae/probe.hpp"
#include "ddae/records.hpp"
#include "ddae/repmetrics.hpp"
#include "ddae/sampler.hpp"
#include "ddae/trainer.hpp"

namespace ddae {

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::vp;
  int T = 1000;
  double min = 1e-4;  // beta_min (VP) or sigma_min (VE)
  double max = 0.02;  // beta_max (VP) or sigma_max (VE)

  NoiseSchedule build() const;
};

struct DatasetSpec {
  std::string format = "synthetic";  // cifar10 | png | synthetic
  std::filesystem::path path;        // relative paths resolve against DDAE_DATA_DIR
  std::filesystem::path labels_csv;  // png only
  int max_train = -1;
  int max_test = -1;
  int synthetic_count = 2000;
  double holdout_fraction = 0.1;  // png and synthetic sources
};

struct ProbeSpec {
  std::vector<std::string> taps;  // empty: every up-path tap
  std::vector<int> ts{1, 10, 25, 50, 100, 200, 400};
  ProbeOpts opts;
};

struct FinetuneSpec {
  std::string tap;  // empty: the grid-best tap
  int t = 0;        // 0: the grid-best level
  FinetuneOpts opts;
};

struct ClassifierSpec {
  std::string tap;  // empty: the grid-best tap
  std::vector<int> sweep_ts{1, 50, 100, 200, 400, 600, 800, 1000};
  ClassifierOpts opts;
};

struct MetricSpec {
  int pairs = 512;
  int images = 256;
  bool independent_eps = false;
};

struct SampleSpec {
  int count = 0;  // 0 skips sampling and FID
  int pca_components = 32;
  double guidance_scale = 0.0;  // > 0 needs a trained classifier
  int guidance_label = 0;
  GuidanceScaling guidance_scaling = GuidanceScaling::variance;
  SamplerOpts opts;
};

struct RunConfig {
  std::string preset;
  std::uint64_t seed = 0;
  ScheduleSpec schedule;
  DDAEConfig model = DDAEConfig::desk_default();
  TrainOpts train;
  ProbeSpec probe;
  FinetuneSpec finetune;
  MetricSpec metric;
  ClassifierSpec classifier;
  SampleSpec sample;
  DatasetSpec dataset;
  std::filesystem::path output_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
// Missing keys keep their defaults; unknown keys raise ParameterError.
void from_json(const nlohmann::json& j, RunConfig& c);

// Sorted keys, no whitespace. The output directory is not part of it.
std::string canonical_json(const RunConfig& c);
// 16 hex digits of FNV-1a over the canonical form.
std::string config_hash(const RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);

// Recursive object merge; arrays and scalars in `patch` replace.
nlohmann::json merge_patch(nlohmann::json base, const nlohmann::json& patch);

// Named configuration presets.
struct Preset {
  std::string name;
  std::string description;
  nlohmann::json patch;  // applied over the defaults
};
const std::vector<Preset>& preset_registry();
const Preset& find_preset(const std::string& name);  // throws ParameterError
RunConfig preset_config(const std::string& name);

// Seeds of named phases derived from the master seed.
struct SeedPlan {
  std::uint64_t init, noising, splits, probe, sampling, metric;
  static SeedPlan from_master(std::uint64_t master);
};

// Resolves the dataset, falling back to DDAE_DATA_DIR for relative or empty paths.
Dataset load_dataset(const DatasetSpec& spec, int image_size, std::uint64_t split_seed);

// Probe taps of a config, resolved against the network's enumeration.
std::vector<TapId> resolve_taps(const DDAENetwork& net, const std::vector<std::string>& keys);

struct CheckpointMetrics {
  int epoch = 0;
  double align = 0.0;
  double uniform = 0.0;
};

struct PipelineResult {
  std::string run_id;
  std::string config_hash;
  double final_loss = 0.0;
  GridReport grid;
  std::vector<CheckpointMetrics> trajectory;  // at the grid-best cell
  std::optional<double> fid;
};

// Pretrain, checkpoint, grid search, monitor alignment/uniformity at the best
// cell across checkpoints, and optionally sample + FID. Writes config.json,
// records.jsonl, grid.json, final.ddae and heads.ddae when output_dir is set.
PipelineResult run_pipeline(const RunConfig& cfg, RecordSink* extra = nullptr);
PipelineResult run_pipeline(const RunConfig& cfg, const Dataset& data, RecordSink* extra = nullptr);

struct Variant {
  std::string name;
  nlohmann::json patch;
};

// The level-count and beta-range ablations relative to `base`: T=512, 256,
// 64, larger-half and smaller-half of the beta range (T kept).
std::vector<Variant> standard_variants(const RunConfig& base);
// Applies a variant; probe levels are rescaled to the variant's T.
RunConfig apply_variant(const RunConfig& base, const Variant& v);

struct AblationRow {
  std::string variant;
  bool ok = false;
  std::string error;
  double final_loss = 0.0;
  double best_acc = 0.0;
  std::optional<double> fid;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // "base" first
  std::string summary_csv() const;
  const AblationRow& row(const std::string& variant) const;
};

// Runs the base and each variant in turn, each with its own record sink under
// output_dir/<variant>. A failing variant is recorded and the rest proceed.
AblationResult run_ablation(const RunConfig& base, const std::vector<Variant>& variants, const Dataset& data);

}  // namespace ddae
