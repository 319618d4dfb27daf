#include "ddae/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "ddae/checkpoint.hpp"
#include "ddae/dataset.hpp"
#include "ddae/error.hpp"
#include "ddae/serialize.hpp"

namespace ddae {

using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!j.is_object()) throw ParameterError("config section '" + section + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ParameterError("unknown config key '" + section + (section.empty() ? "" : ".") + k + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParameterError(std::string("config key '") + key + "': " + e.what());
  }
}

std::string lr_name(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

LrSchedule lr_from(const json& j, const char* key, LrSchedule dflt) {
  if (!j.contains(key)) return dflt;
  const auto s = j.at(key).get<std::string>();
  if (s == "cosine") return LrSchedule::cosine;
  if (s == "constant") return LrSchedule::constant;
  throw ParameterError("unknown lr_schedule '" + s + "' (expected cosine or constant)");
}

json train_json(const TrainOpts& o) {
  return {{"epochs", o.epochs},
          {"batch_size", o.batch_size},
          {"learning_rate", o.learning_rate},
          {"lr_schedule", lr_name(o.lr_schedule)},
          {"checkpoint_every", o.checkpoint_every},
          {"horizontal_flip", o.horizontal_flip},
          {"pad_crop", o.pad_crop}};
}

void train_from(const json& j, TrainOpts& o) {
  check_keys(j, {"epochs", "batch_size", "learning_rate", "lr_schedule", "checkpoint_every", "horizontal_flip", "pad_crop"},
             "train");
  read(j, "epochs", o.epochs);
  read(j, "batch_size", o.batch_size);
  read(j, "learning_rate", o.learning_rate);
  o.lr_schedule = lr_from(j, "lr_schedule", o.lr_schedule);
  read(j, "checkpoint_every", o.checkpoint_every);
  read(j, "horizontal_flip", o.horizontal_flip);
  read(j, "pad_crop", o.pad_crop);
}

json probe_json(const ProbeSpec& p) {
  return {{"taps", p.taps},
          {"ts", p.ts},
          {"epochs", p.opts.epochs},
          {"batch_size", p.opts.batch_size},
          {"learning_rate", p.opts.learning_rate},
          {"lr_schedule", lr_name(p.opts.lr_schedule)},
          {"horizontal_flip", p.opts.horizontal_flip},
          {"pad_crop", p.opts.pad_crop},
          {"freeze_noise", p.opts.freeze_noise},
          {"standardize", p.opts.standardize},
          {"holdout_fraction", p.opts.holdout_fraction}};
}

void probe_from(const json& j, ProbeSpec& p) {
  check_keys(j, {"taps", "ts", "epochs", "batch_size", "learning_rate", "lr_schedule", "horizontal_flip", "pad_crop",
                 "freeze_noise", "standardize", "holdout_fraction"},
             "probe");
  read(j, "taps", p.taps);
  read(j, "ts", p.ts);
  read(j, "epochs", p.opts.epochs);
  read(j, "batch_size", p.opts.batch_size);
  read(j, "learning_rate", p.opts.learning_rate);
  p.opts.lr_schedule = lr_from(j, "lr_schedule", p.opts.lr_schedule);
  read(j, "horizontal_flip", p.opts.horizontal_flip);
  read(j, "pad_crop", p.opts.pad_crop);
  read(j, "freeze_noise", p.opts.freeze_noise);
  read(j, "standardize", p.opts.standardize);
  read(j, "holdout_fraction", p.opts.holdout_fraction);
}

json finetune_json(const FinetuneSpec& f) {
  return {{"tap", f.tap},
          {"t", f.t},
          {"epochs", f.opts.epochs},
          {"batch_size", f.opts.batch_size},
          {"learning_rate", f.opts.learning_rate},
          {"lr_schedule", lr_name(f.opts.lr_schedule)},
          {"horizontal_flip", f.opts.horizontal_flip},
          {"pad_crop", f.opts.pad_crop},
          {"holdout_fraction", f.opts.holdout_fraction},
          {"warmup_epochs", f.opts.warmup_epochs}};
}

void finetune_from(const json& j, FinetuneSpec& f) {
  check_keys(j, {"tap", "t", "epochs", "batch_size", "learning_rate", "lr_schedule", "horizontal_flip", "pad_crop",
                 "holdout_fraction", "warmup_epochs"},
             "finetune");
  read(j, "tap", f.tap);
  read(j, "t", f.t);
  read(j, "epochs", f.opts.epochs);
  read(j, "batch_size", f.opts.batch_size);
  read(j, "learning_rate", f.opts.learning_rate);
  f.opts.lr_schedule = lr_from(j, "lr_schedule", f.opts.lr_schedule);
  read(j, "horizontal_flip", f.opts.horizontal_flip);
  read(j, "pad_crop", f.opts.pad_crop);
  read(j, "holdout_fraction", f.opts.holdout_fraction);
  read(j, "warmup_epochs", f.opts.warmup_epochs);
}

json classifier_json(const ClassifierSpec& c) {
  return {{"tap", c.tap},
          {"sweep_ts", c.sweep_ts},
          {"epochs", c.opts.epochs},
          {"batch_size", c.opts.batch_size},
          {"learning_rate", c.opts.learning_rate},
          {"lr_schedule", lr_name(c.opts.lr_schedule)},
          {"hidden", c.opts.hidden},
          {"horizontal_flip", c.opts.horizontal_flip}};
}

void classifier_from(const json& j, ClassifierSpec& c) {
  check_keys(j, {"tap", "sweep_ts", "epochs", "batch_size", "learning_rate", "lr_schedule", "hidden", "horizontal_flip"},
             "classifier");
  read(j, "tap", c.tap);
  read(j, "sweep_ts", c.sweep_ts);
  read(j, "epochs", c.opts.epochs);
  read(j, "batch_size", c.opts.batch_size);
  read(j, "learning_rate", c.opts.learning_rate);
  c.opts.lr_schedule = lr_from(j, "lr_schedule", c.opts.lr_schedule);
  read(j, "hidden", c.opts.hidden);
  read(j, "horizontal_flip", c.opts.horizontal_flip);
}

json sample_json(const SampleSpec& s) {
  return {{"count", s.count},
          {"pca_components", s.pca_components},
          {"guidance_scale", s.guidance_scale},
          {"guidance_label", s.guidance_label},
          {"guidance_scaling", s.guidance_scaling == GuidanceScaling::variance ? "variance" : "stddev"},
          {"allow_ve", s.opts.allow_ve},
          {"clamp_final", s.opts.clamp_final},
          {"chunk", s.opts.chunk}};
}

void sample_from(const json& j, SampleSpec& s) {
  check_keys(j, {"count", "pca_components", "guidance_scale", "guidance_label", "guidance_scaling", "allow_ve",
                 "clamp_final", "chunk"},
             "sample");
  read(j, "count", s.count);
  read(j, "pca_components", s.pca_components);
  read(j, "guidance_scale", s.guidance_scale);
  read(j, "guidance_label", s.guidance_label);
  if (j.contains("guidance_scaling")) {
    const auto v = j.at("guidance_scaling").get<std::string>();
    if (v == "variance") s.guidance_scaling = GuidanceScaling::variance;
    else if (v == "stddev") s.guidance_scaling = GuidanceScaling::stddev;
    else throw ParameterError("unknown guidance_scaling '" + v + "' (expected variance or stddev)");
  }
  read(j, "allow_ve", s.opts.allow_ve);
  read(j, "clamp_final", s.opts.clamp_final);
  read(j, "chunk", s.opts.chunk);
}

json dataset_json(const DatasetSpec& d) {
  return {{"format", d.format},
          {"path", d.path.string()},
          {"labels_csv", d.labels_csv.string()},
          {"max_train", d.max_train},
          {"max_test", d.max_test},
          {"synthetic_count", d.synthetic_count},
          {"holdout_fraction", d.holdout_fraction}};
}

void dataset_from(const json& j, DatasetSpec& d) {
  check_keys(j, {"format", "path", "labels_csv", "max_train", "max_test", "synthetic_count", "holdout_fraction"},
             "dataset");
  read(j, "format", d.format);
  std::string p = d.path.string(), l = d.labels_csv.string();
  read(j, "path", p);
  read(j, "labels_csv", l);
  d.path = p;
  d.labels_csv = l;
  read(j, "max_train", d.max_train);
  read(j, "max_test", d.max_test);
  read(j, "synthetic_count", d.synthetic_count);
  read(j, "holdout_fraction", d.holdout_fraction);
}

}  // namespace

NoiseSchedule ScheduleSpec::build() const {
  return kind == ScheduleKind::vp ? make_vp_schedule(T, min, max) : make_ve_schedule(T, min, max);
}

void RunConfig::validate() const {
  model.validate();
  schedule.build();
  train.validate();
  probe.opts.validate();
  if (probe.ts.empty()) throw ParameterError("probe.ts must not be empty");
  for (int t : probe.ts)
    if (t < 1 || t > schedule.T)
      throw ParameterError("probe.ts entry " + std::to_string(t) + " outside [1, " + std::to_string(schedule.T) + "]");
  for (const auto& k : probe.taps) TapId::parse(k);
  if (finetune.t < 0 || finetune.t > schedule.T) throw ParameterError("finetune.t outside [0, T]");
  if (metric.pairs < 1 || metric.images < 2) throw ParameterError("metric.pairs must be >= 1 and metric.images >= 2");
  if (sample.count < 0 || sample.pca_components < 1 || sample.opts.chunk < 1)
    throw ParameterError("sample.count/pca_components/chunk out of range");
  if (sample.guidance_scale < 0.0) throw ParameterError("sample.guidance_scale must be >= 0");
  static const std::set<std::string> formats{"cifar10", "png", "synthetic"};
  if (!formats.count(dataset.format))
    throw ParameterError("dataset.format '" + dataset.format + "' (expected cifar10, png or synthetic)");
  if (!(dataset.holdout_fraction > 0.0 && dataset.holdout_fraction < 1.0))
    throw ParameterError("dataset.holdout_fraction must lie in (0, 1)");
}

void to_json(json& j, const RunConfig& c) {
  j = {{"preset", c.preset},
       {"seed", c.seed},
       {"schedule", {{"kind", to_string(c.schedule.kind)}, {"T", c.schedule.T}, {"min", c.schedule.min}, {"max", c.schedule.max}}},
       {"model", c.model},
       {"train", train_json(c.train)},
       {"probe", probe_json(c.probe)},
       {"finetune", finetune_json(c.finetune)},
       {"metric", {{"pairs", c.metric.pairs}, {"images", c.metric.images}, {"independent_eps", c.metric.independent_eps}}},
       {"classifier", classifier_json(c.classifier)},
       {"sample", sample_json(c.sample)},
       {"dataset", dataset_json(c.dataset)},
       {"output_dir", c.output_dir.string()}};
}

void from_json(const json& j, RunConfig& c) {
  check_keys(j, {"preset", "seed", "schedule", "model", "train", "probe", "finetune", "metric", "classifier", "sample",
                 "dataset", "output_dir"},
             "");
  read(j, "preset", c.preset);
  read(j, "seed", c.seed);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    check_keys(s, {"kind", "T", "min", "max"}, "schedule");
    if (s.contains("kind")) c.schedule.kind = schedule_kind_from_string(s.at("kind").get<std::string>());
    read(s, "T", c.schedule.T);
    read(s, "min", c.schedule.min);
    read(s, "max", c.schedule.max);
  }
  if (j.contains("model")) {
    check_keys(j.at("model"), {"base_channels", "channel_multipliers", "blocks_per_resolution", "attention_resolutions",
                               "image_size", "in_channels", "time_embed_dim", "norm_groups"},
               "model");
    json merged = c.model;
    merged.update(j.at("model"));
    c.model = merged.get<DDAEConfig>();
  }
  if (j.contains("train")) train_from(j.at("train"), c.train);
  if (j.contains("probe")) probe_from(j.at("probe"), c.probe);
  if (j.contains("finetune")) finetune_from(j.at("finetune"), c.finetune);
  if (j.contains("metric")) {
    const auto& m = j.at("metric");
    check_keys(m, {"pairs", "images", "independent_eps"}, "metric");
    read(m, "pairs", c.metric.pairs);
    read(m, "images", c.metric.images);
    read(m, "independent_eps", c.metric.independent_eps);
  }
  if (j.contains("classifier")) classifier_from(j.at("classifier"), c.classifier);
  if (j.contains("sample")) sample_from(j.at("sample"), c.sample);
  if (j.contains("dataset")) dataset_from(j.at("dataset"), c.dataset);
  std::string out = c.output_dir.string();
  read(j, "output_dir", out);
  c.output_dir = out;
}

std::string canonical_json(const RunConfig& c) {
  json j = c;
  j.erase("output_dir");
  return j.dump();
}

std::string config_hash(const RunConfig& c) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : canonical_json(c)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ParameterError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  RunConfig c;
  if (j.contains("preset") && j.at("preset").is_string() && !j.at("preset").get<std::string>().empty())
    c = preset_config(j.at("preset").get<std::string>());
  from_json(j, c);
  return c;
}

json merge_patch(json base, const json& patch) {
  if (!patch.is_object() || !base.is_object()) return patch;
  for (const auto& [k, v] : patch.items())
    base[k] = base.contains(k) ? merge_patch(base[k], v) : v;
  return base;
}

// ------------------------------------------------------------ presets ---

namespace {

json ddpm_model() { return DDAEConfig::ddpm_cifar10(); }

json edm_model() { return DDAEConfig::edm_cifar10(); }

json tiny_imagenet(json model) {
  model["channel_multipliers"] = {1, 2, 2, 2};
  model["image_size"] = 64;
  return model;
}

json probing(int epochs, int crop) {
  return {{"epochs", epochs},   {"batch_size", 128},    {"learning_rate", 1e-3},
          {"lr_schedule", "cosine"}, {"horizontal_flip", true}, {"pad_crop", crop > 0}};
}

json finetuning(int epochs) {
  return {{"epochs", epochs},        {"batch_size", 128},       {"learning_rate", 1e-3},
          {"lr_schedule", "cosine"}, {"horizontal_flip", true}, {"pad_crop", true}};
}

std::vector<Preset> build_registry() {
  std::vector<Preset> r;
  r.push_back({"desk", "small CPU-scale defaults", json::object()});

  const json vp1000 = {{"kind", "vp"}, {"T", 1000}, {"min", 1e-4}, {"max", 0.02}};
  const json ve18 = {{"kind", "ve"}, {"T", 18}, {"min", 0.002}, {"max", 80.0}};
  const json ve50 = {{"kind", "ve"}, {"T", 50}, {"min", 0.002}, {"max", 80.0}};
  const json cifar = {{"format", "cifar10"}, {"path", "cifar-10-batches-bin"}};
  const json tiny = {{"format", "png"}, {"path", "tiny-imagenet"}, {"labels_csv", "labels.csv"}};

  r.push_back({"pretrain/ddpm-cifar10", "network specification for diffusion pre-training: DDPM on CIFAR-10",
               {{"model", ddpm_model()}, {"schedule", vp1000}, {"train", {{"epochs", 2000}}}, {"dataset", cifar}}});
  r.push_back({"pretrain/edm-cifar10", "network specification for diffusion pre-training: EDM on CIFAR-10",
               {{"model", edm_model()}, {"schedule", ve18}, {"train", {{"epochs", 4000}}}, {"dataset", cifar},
                {"sample", {{"allow_ve", true}}}}});
  r.push_back({"pretrain/ddpm-tiny-imagenet", "network specification for diffusion pre-training: DDPM on Tiny-ImageNet",
               {{"model", tiny_imagenet(ddpm_model())}, {"schedule", vp1000}, {"train", {{"epochs", 2000}}},
                {"dataset", tiny}}});
  json edm_tiny = tiny_imagenet(edm_model());
  r.push_back({"pretrain/edm-tiny-imagenet", "network specification for diffusion pre-training: EDM on Tiny-ImageNet",
               {{"model", edm_tiny}, {"schedule", ve50}, {"train", {{"epochs", 2000}}}, {"dataset", tiny},
                {"sample", {{"allow_ve", true}}}}});

  r.push_back({"linear-probing/ddpm-cifar10", "linear probing setting, DDPM on CIFAR-10", {{"probe", probing(10, 4)}}});
  r.push_back({"linear-probing/edm-cifar10", "linear probing setting, EDM on CIFAR-10", {{"probe", probing(15, 4)}}});
  r.push_back({"linear-probing/ddpm-tiny-imagenet", "linear probing setting, DDPM on Tiny-ImageNet",
               {{"probe", probing(20, 4)}}});
  r.push_back({"linear-probing/edm-tiny-imagenet", "linear probing setting, EDM on Tiny-ImageNet",
               {{"probe", probing(30, 4)}}});

  r.push_back({"fine-tuning/ddpm-cifar10", "fine-tuning setting, DDPM on CIFAR-10", {{"finetune", finetuning(30)}}});
  r.push_back({"fine-tuning/edm-cifar10", "fine-tuning setting, EDM on CIFAR-10", {{"finetune", finetuning(50)}}});
  r.push_back({"fine-tuning/ddpm-tiny-imagenet", "fine-tuning setting, DDPM on Tiny-ImageNet",
               {{"finetune", finetuning(80)}}});
  r.push_back({"fine-tuning/edm-tiny-imagenet", "fine-tuning setting, EDM on Tiny-ImageNet",
               {{"finetune", finetuning(100)}}});

  json scratch = finetuning(200);
  scratch["learning_rate"] = 5e-4;
  scratch["warmup_epochs"] = 5;
  r.push_back({"from-scratch", "supervised training of a truncated encoder from random initialization",
               {{"finetune", scratch}}});

  auto combo = [](const char* tap, int t) {
    return json{{"probe", {{"taps", {tap}}, {"ts", {t}}}}, {"finetune", {{"tap", tap}, {"t", t}}},
                {"classifier", {{"tap", tap}}}};
  };
  r.push_back({"layer-noise/ddpm-cifar10", "adopted layer-noise combination: 7/12 (1st block@16), t=11/1000",
               combo("up.1.0@16", 11)});
  r.push_back({"layer-noise/edm-cifar10", "adopted layer-noise combination: 6/15 (1st block@16), t=4/18",
               combo("up.1.0@16", 4)});
  r.push_back({"layer-noise/ddpm-tiny-imagenet", "adopted layer-noise combination: 2/12 (2nd block@8), t=45/1000",
               combo("up.3.1@8", 45)});
  r.push_back({"layer-noise/edm-tiny-imagenet", "adopted layer-noise combination: 7/20 (2nd block@16), t=14/50",
               combo("up.2.1@16", 14)});
  return r;
}

}  // namespace

const std::vector<Preset>& preset_registry() {
  static const std::vector<Preset> registry = build_registry();
  return registry;
}

const Preset& find_preset(const std::string& name) {
  for (const auto& p : preset_registry())
    if (p.name == name) return p;
  throw ParameterError("unknown preset '" + name + "'");
}

RunConfig preset_config(const std::string& names) {
  json j = RunConfig{};
  std::stringstream ss(names);
  std::string name;
  while (std::getline(ss, name, ',')) {
    if (name.empty()) continue;
    j = merge_patch(j, find_preset(name).patch);
  }
  j["preset"] = names;
  RunConfig c;
  from_json(j, c);
  return c;
}

SeedPlan SeedPlan::from_master(std::uint64_t master) {
  return {Rng::derive_seed(master, "init"),    Rng::derive_seed(master, "noising"),
          Rng::derive_seed(master, "splits"),  Rng::derive_seed(master, "probe"),
          Rng::derive_seed(master, "sampling"), Rng::derive_seed(master, "metric")};
}

// ------------------------------------------------------------ dataset ---

namespace {

std::filesystem::path resolve_data_path(const std::filesystem::path& p) {
  const char* env = std::getenv("DDAE_DATA_DIR");
  if (p.empty()) {
    if (!env || !*env) throw IoError("no dataset path given and DDAE_DATA_DIR is unset");
    return env;
  }
  if (p.is_relative() && !std::filesystem::exists(p) && env && *env) return std::filesystem::path(env) / p;
  return p;
}

ImageBatch cap(const ImageBatch& b, int n) {
  if (n < 0 || n >= b.size()) return b;
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  return b.subset(idx);
}

}  // namespace

Dataset load_dataset(const DatasetSpec& spec, int image_size, std::uint64_t split_seed) {
  Dataset ds;
  if (spec.format == "cifar10") {
    if (image_size != 32) throw ParameterError("CIFAR-10 needs model.image_size = 32");
    ds = load_cifar10_dir(resolve_data_path(spec.path), spec.max_train, spec.max_test);
  } else if (spec.format == "png") {
    const auto dir = resolve_data_path(spec.path);
    auto csv = spec.labels_csv.empty() ? dir / "labels.csv" : spec.labels_csv;
    if (csv.is_relative() && !std::filesystem::exists(csv)) csv = dir / csv;
    ds = split_holdout(load_png_directory(dir, csv, image_size), spec.holdout_fraction, split_seed);
  } else if (spec.format == "synthetic") {
    ds = split_holdout(make_synthetic_shapes(spec.synthetic_count, image_size, Rng::derive_seed(split_seed, "shapes")),
                       spec.holdout_fraction, split_seed);
  } else {
    throw ParameterError("dataset.format '" + spec.format + "' (expected cifar10, png or synthetic)");
  }
  ds.train = cap(ds.train, spec.max_train);
  ds.test = cap(ds.test, spec.max_test);
  return ds;
}

std::vector<TapId> resolve_taps(const DDAENetwork& net, const std::vector<std::string>& keys) {
  std::vector<TapId> out;
  if (keys.empty()) {
    for (const auto& t : net.taps())
      if (t.path == TapPath::up) out.push_back(t);
    return out;
  }
  for (const auto& k : keys) {
    const TapId t = TapId::parse(k);
    try {
      net.tap_position(t);
    } catch (const ContractError&) {
      throw ParameterError("tap '" + k + "' does not exist in this network");
    }
    out.push_back(t);
  }
  return out;
}

// ----------------------------------------------------------- pipeline ---

PipelineResult run_pipeline(const RunConfig& cfg, RecordSink* extra) {
  cfg.validate();
  const Dataset data = load_dataset(cfg.dataset, cfg.model.image_size, SeedPlan::from_master(cfg.seed).splits);
  return run_pipeline(cfg, data, extra);
}

PipelineResult run_pipeline(const RunConfig& cfg, const Dataset& data, RecordSink* extra) {
  namespace fs = std::filesystem;
  cfg.validate();
  PipelineResult res;
  res.config_hash = config_hash(cfg);
  res.run_id = res.config_hash.substr(0, 8) + "-s" + std::to_string(cfg.seed);

  std::unique_ptr<RecordFileWriter> file;
  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
    std::ofstream(cfg.output_dir / "config.json") << json(cfg).dump(2) << "\n";
    fs::remove(cfg.output_dir / "records.jsonl");
    file = std::make_unique<RecordFileWriter>(cfg.output_dir / "records.jsonl");
  }
  std::vector<RecordSink*> sinks;
  if (file) sinks.push_back(file.get());
  if (extra) sinks.push_back(extra);
  RecordTee tee(sinks);
  const RecordEmitter rec(&tee, res.run_id, res.config_hash);

  const SeedPlan seeds = SeedPlan::from_master(cfg.seed);
  const NoiseSchedule sched = cfg.schedule.build();
  DDAENetwork net = build_ddae(cfg.model, seeds.init);

  TrainOpts topts = cfg.train;
  topts.seed = seeds.noising;
  if (!cfg.output_dir.empty() && topts.checkpoint_every > 0) {
    topts.checkpoint_dir = cfg.output_dir / "checkpoints";
    fs::create_directories(topts.checkpoint_dir);
  }
  std::vector<std::pair<int, DDAENetwork>> snapshots;
  const auto pre = pretrain(net, data.train, sched, topts, rec,
                            [&](int epoch, const DDAENetwork& n) { snapshots.emplace_back(epoch, n.clone()); });
  res.final_loss = pre.epoch_loss.empty() ? std::nan("") : pre.epoch_loss.back();
  if (snapshots.empty() || snapshots.back().first != cfg.train.epochs) snapshots.emplace_back(cfg.train.epochs, net.clone());

  ProbeOpts popts = cfg.probe.opts;
  popts.seed = seeds.probe;
  res.grid = grid_search(net, data, sched, resolve_taps(net, cfg.probe.taps), cfg.probe.ts, popts, rec);

  const ImageBatch& held = data.has_test() ? data.test : data.train;
  std::vector<int> first(static_cast<std::size_t>(std::min(cfg.metric.images, held.size())));
  for (std::size_t i = 0; i < first.size(); ++i) first[i] = static_cast<int>(i);
  const ImageBatch metric_imgs = held.subset(first);
  Rng mrng(seeds.metric);
  const NoisePairPlan align_plan = alignment_plan(metric_imgs, cfg.metric.pairs, mrng);
  const NoisePairPlan unif_plan = uniformity_plan(metric_imgs, cfg.metric.pairs, mrng, cfg.metric.independent_eps);
  for (const auto& [epoch, snap] : snapshots) {
    const auto f = tap_feature_fn(snap, res.grid.best.tap);
    CheckpointMetrics m{epoch, alignment(f, metric_imgs.data, res.grid.best.t, sched, align_plan),
                        uniformity(f, metric_imgs.data, res.grid.best.t, sched, unif_plan)};
    rec.emit(Phase::metric, "align", epoch, m.align);
    rec.emit(Phase::metric, "uniform", epoch, m.uniform);
    res.trajectory.push_back(m);
  }

  if (cfg.sample.count > 0) {
    Rng srng(seeds.sampling);
    const ImageBatch gen = sample(net, sched, cfg.sample.count, srng, std::nullopt, cfg.sample.opts);
    res.fid = fid(pca_embedder(fit_pca(held.data, cfg.sample.pca_components)), held.data, gen.data);
    rec.emit(Phase::sample, "fid", cfg.train.epochs, *res.fid);
    if (!cfg.output_dir.empty()) save_samples(cfg.output_dir / "samples.png", cfg.output_dir / "samples.ddae", gen);
  }

  if (!cfg.output_dir.empty()) {
    save_network(cfg.output_dir / "final.ddae", net);
    std::ofstream(cfg.output_dir / "grid.json") << res.grid.to_json().dump(2) << "\n";
    save_archive(cfg.output_dir / "heads.ddae", res.grid.heads_archive());
  }
  return res;
}

// ----------------------------------------------------------- ablation ---

std::vector<Variant> standard_variants(const RunConfig& base) {
  std::vector<Variant> v;
  const double lo = base.schedule.min, hi = base.schedule.max, mid = 0.5 * (lo + hi);
  for (int T : {512, 256, 64}) {
    const double k = static_cast<double>(base.schedule.T) / T;
    json s = {{"T", T}};
    if (base.schedule.kind == ScheduleKind::vp) {
      s["min"] = lo * k;
      s["max"] = std::min(0.999, hi * k);
    }
    v.push_back({"T=" + std::to_string(T), {{"schedule", s}}});
  }
  v.push_back({"larger-half", {{"schedule", {{"min", mid}, {"max", hi}}}}});
  v.push_back({"smaller-half", {{"schedule", {{"min", lo}, {"max", mid}}}}});
  return v;
}

RunConfig apply_variant(const RunConfig& base, const Variant& v) {
  RunConfig c = base;
  from_json(v.patch, c);
  if (c.schedule.T != base.schedule.T && !(v.patch.contains("probe") && v.patch.at("probe").contains("ts"))) {
    std::vector<int> ts;
    for (int t : base.probe.ts) {
      const int s = std::clamp(static_cast<int>(std::lround(static_cast<double>(t) * c.schedule.T / base.schedule.T)),
                               1, c.schedule.T);
      if (std::find(ts.begin(), ts.end(), s) == ts.end()) ts.push_back(s);
    }
    c.probe.ts = ts;
  }
  if (!base.output_dir.empty()) c.output_dir = base.output_dir / v.name;
  return c;
}

std::string AblationResult::summary_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "variant,ok,final_loss,best_acc,fid,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << r.variant << "," << (r.ok ? 1 : 0) << "," << r.final_loss << "," << r.best_acc << ",";
    if (r.fid) os << *r.fid;
    os << "," << err << "\n";
  }
  return os.str();
}

const AblationRow& AblationResult::row(const std::string& variant) const {
  for (const auto& r : rows)
    if (r.variant == variant) return r;
  throw ContractError("no ablation row '" + variant + "'");
}

AblationResult run_ablation(const RunConfig& base, const std::vector<Variant>& variants, const Dataset& data) {
  AblationResult out;
  std::vector<Variant> all{{"base", json::object()}};
  all.insert(all.end(), variants.begin(), variants.end());
  for (const auto& v : all) {
    AblationRow row;
    row.variant = v.name;
    try {
      const RunConfig c = apply_variant(base, v);
      const PipelineResult r = run_pipeline(c, data);
      row.ok = true;
      row.final_loss = r.final_loss;
      row.best_acc = r.grid.best.linear_acc;
      row.fid = r.fid;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    out.rows.push_back(row);
  }
  if (!base.output_dir.empty()) {
    std::filesystem::create_directories(base.output_dir);
    std::ofstream(base.output_dir / "summary.csv") << out.summary_csv();
  }
  return out;
}

}  // namespace ddae
