#include "ddae/ddae.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "ddae/checkpoint.hpp"
#include "ddae/dataset.hpp"
#include "ddae/error.hpp"
#include "ddae/harness.hpp"
#include "ddae/serialize.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

struct ddae_config {
  ddae::RunConfig cfg;
};
struct ddae_dataset {
  ddae::Dataset data;
};
struct ddae_network {
  ddae::DDAENetwork net;
};
struct ddae_classifier {
  ddae::NoiseCondClassifier clf;
};

namespace {

thread_local std::string g_last_error;

ddae_status status_of(ddae::ErrorKind k) {
  switch (k) {
    case ddae::ErrorKind::parameter: return DDAE_ERR_PARAMETER;
    case ddae::ErrorKind::contract: return DDAE_ERR_CONTRACT;
    case ddae::ErrorKind::numerical: return DDAE_ERR_NUMERICAL;
    case ddae::ErrorKind::data: return DDAE_ERR_DATA;
    case ddae::ErrorKind::io: return DDAE_ERR_IO;
  }
  return DDAE_ERR_INTERNAL;
}

template <class F>
ddae_status guarded(F&& f) {
  try {
    g_last_error.clear();
    f();
    return DDAE_OK;
  } catch (const ddae::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const json::exception& e) {
    g_last_error = std::string("JSON: ") + e.what();
    return DDAE_ERR_PARAMETER;
  } catch (const fs::filesystem_error& e) {
    g_last_error = e.what();
    return DDAE_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DDAE_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (!p) throw ddae::ContractError(std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put(char** out, const json& j) {
  if (out) *out = dup_string(j.dump());
}

std::string str(const char* s) { return s ? s : ""; }

// Appends to <output_dir>/records.jsonl when an output directory is set.
class StepRecords {
 public:
  explicit StepRecords(const ddae::RunConfig& cfg) {
    const std::string hash = ddae::config_hash(cfg);
    if (!cfg.output_dir.empty()) file_ = std::make_unique<ddae::RecordFileWriter>(cfg.output_dir / "records.jsonl");
    emitter_ = ddae::RecordEmitter(file_.get(), hash.substr(0, 8) + "-s" + std::to_string(cfg.seed), hash);
  }
  const ddae::RecordEmitter& emitter() const { return emitter_; }

 private:
  std::unique_ptr<ddae::RecordFileWriter> file_;
  ddae::RecordEmitter emitter_;
};

ddae::TapId tap_or(const char* tap, const std::string& fallback, const ddae::DDAENetwork& net) {
  const std::string key = tap && *tap ? tap : fallback;
  if (key.empty()) throw ddae::ParameterError("no tap given and none configured");
  const auto taps = ddae::resolve_taps(net, {key});
  return taps.front();
}

const ddae::ImageBatch& held_out(const ddae::Dataset& d) { return d.has_test() ? d.test : d.train; }

}  // namespace

extern "C" {

const char* ddae_version(void) { return "1.0.0"; }

const char* ddae_last_error(void) { return g_last_error.c_str(); }

const char* ddae_status_name(ddae_status s) {
  switch (s) {
    case DDAE_OK: return "ok";
    case DDAE_ERR_PARAMETER: return "parameter error";
    case DDAE_ERR_CONTRACT: return "contract error";
    case DDAE_ERR_NUMERICAL: return "numerical error";
    case DDAE_ERR_DATA: return "data error";
    case DDAE_ERR_IO: return "io error";
    case DDAE_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void ddae_string_free(char* s) { std::free(s); }

// ------------------------------------------------------------- config ---

ddae_status ddae_config_default(ddae_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new ddae_config{};
  });
}

ddae_status ddae_config_from_preset(const char* names, ddae_config** out) {
  return guarded([&] {
    need(out, "out");
    need(names, "names");
    *out = new ddae_config{ddae::preset_config(names)};
  });
}

ddae_status ddae_config_load(const char* path, ddae_config** out) {
  return guarded([&] {
    need(out, "out");
    need(path, "path");
    *out = new ddae_config{ddae::load_run_config(path)};
  });
}

ddae_status ddae_config_patch(ddae_config* cfg, const char* text) {
  return guarded([&] {
    need(cfg, "cfg");
    need(text, "json");
    json patch;
    try {
      patch = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ddae::ParameterError(std::string("config patch is not valid JSON: ") + e.what());
    }
    ddae::RunConfig next;
    ddae::from_json(ddae::merge_patch(json(cfg->cfg), patch), next);
    next.validate();
    cfg->cfg = std::move(next);
  });
}

ddae_status ddae_config_to_json(const ddae_config* cfg, char** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = dup_string(json(cfg->cfg).dump(2));
  });
}

ddae_status ddae_config_hash(const ddae_config* cfg, char out[17]) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    const std::string h = ddae::config_hash(cfg->cfg);
    std::memcpy(out, h.c_str(), 17);
  });
}

void ddae_config_free(ddae_config* cfg) { delete cfg; }

ddae_status ddae_preset_list(char** out_json) {
  return guarded([&] {
    need(out_json, "out_json");
    json arr = json::array();
    for (const auto& p : ddae::preset_registry())
      arr.push_back({{"name", p.name}, {"description", p.description}, {"patch", p.patch}});
    *out_json = dup_string(arr.dump());
  });
}

// --------------------------------------------------------------- data ---

ddae_status ddae_dataset_load(const ddae_config* cfg, ddae_dataset** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    const auto& c = cfg->cfg;
    *out = new ddae_dataset{
        ddae::load_dataset(c.dataset, c.model.image_size, ddae::SeedPlan::from_master(c.seed).splits)};
  });
}

ddae_status ddae_dataset_size(const ddae_dataset* data, int* train, int* test) {
  return guarded([&] {
    need(data, "data");
    if (train) *train = data->data.train.size();
    if (test) *test = data->data.test.size();
  });
}

void ddae_dataset_free(ddae_dataset* data) { delete data; }

// ----------------------------------------------------------- networks ---

ddae_status ddae_network_create(const ddae_config* cfg, ddae_network** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = new ddae_network{ddae::build_ddae(cfg->cfg.model, ddae::SeedPlan::from_master(cfg->cfg.seed).init)};
  });
}

ddae_status ddae_network_load(const char* path, ddae_network** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new ddae_network{ddae::load_network(path)};
  });
}

ddae_status ddae_network_save(const ddae_network* net, const char* path) {
  return guarded([&] {
    need(net, "net");
    need(path, "path");
    ddae::save_network(path, net->net);
  });
}

ddae_status ddae_network_info(const ddae_network* net, char** out_json) {
  return guarded([&] {
    need(net, "net");
    need(out_json, "out_json");
    const auto& n = net->net;
    json taps = json::array();
    for (const auto& t : n.taps())
      taps.push_back({{"key", t.key()}, {"ordinal", n.describe_tap(t)}, {"channels", n.tap_channels(t)}});
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(n.weight_hash()));
    *out_json = dup_string(
        json{{"parameters", n.parameter_count()}, {"weight_hash", hash}, {"taps", taps}, {"config", n.config()}}.dump());
  });
}

void ddae_network_free(ddae_network* net) { delete net; }

// -------------------------------------------------------------- steps ---

ddae_status ddae_pretrain(const ddae_config* cfg, const ddae_dataset* data, ddae_network** net, char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(data, "data");
    need(net, "net");
    const auto& c = cfg->cfg;
    c.validate();
    std::unique_ptr<ddae_network> fresh;
    if (!*net) fresh.reset(new ddae_network{ddae::build_ddae(c.model, ddae::SeedPlan::from_master(c.seed).init)});
    ddae::DDAENetwork& target = fresh ? fresh->net : (*net)->net;
    StepRecords rec(c);
    ddae::TrainOpts o = c.train;
    o.seed = ddae::SeedPlan::from_master(c.seed).noising;
    if (!c.output_dir.empty() && o.checkpoint_every > 0) o.checkpoint_dir = c.output_dir / "checkpoints";
    if (!o.checkpoint_dir.empty()) fs::create_directories(o.checkpoint_dir);
    const auto r = ddae::pretrain(target, data->data.train, c.schedule.build(), o, rec.emitter());
    if (!c.output_dir.empty()) {
      ddae::save_network(c.output_dir / "final.ddae", target);
      std::ofstream(c.output_dir / "config.json") << json(c).dump(2) << "\n";
    }
    json ck = json::array();
    for (const auto& p : r.checkpoints) ck.push_back(p.string());
    put(summary, {{"epoch_loss", r.epoch_loss}, {"checkpoints", ck}, {"parameters", target.parameter_count()}});
    if (fresh) *net = fresh.release();
  });
}

ddae_status ddae_gridsearch(const ddae_config* cfg, const ddae_network* net, const ddae_dataset* data,
                            char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(net, "net");
    need(data, "data");
    const auto& c = cfg->cfg;
    c.validate();
    StepRecords rec(c);
    ddae::ProbeOpts o = c.probe.opts;
    o.seed = ddae::SeedPlan::from_master(c.seed).probe;
    const auto report = ddae::grid_search(net->net, data->data, c.schedule.build(),
                                          ddae::resolve_taps(net->net, c.probe.taps), c.probe.ts, o, rec.emitter());
    json j = report.to_json();
    j["best"]["ordinal"] = net->net.describe_tap(report.best.tap);
    if (!c.output_dir.empty()) {
      fs::create_directories(c.output_dir);
      std::ofstream(c.output_dir / "grid.json") << j.dump(2) << "\n";
      ddae::save_archive(c.output_dir / "heads.ddae", report.heads_archive());
    }
    put(summary, j);
  });
}

ddae_status ddae_probe(const ddae_config* cfg, const ddae_network* net, const ddae_dataset* data, const char* tap,
                       int t, char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(net, "net");
    need(data, "data");
    const auto& c = cfg->cfg;
    StepRecords rec(c);
    const auto id = tap_or(tap, c.probe.taps.empty() ? "" : c.probe.taps.front(), net->net);
    ddae::ProbeOpts o = c.probe.opts;
    o.seed = ddae::SeedPlan::from_master(c.seed).probe;
    const auto sched = c.schedule.build();
    double acc;
    std::vector<double> losses;
    if (t == 0) {
      const ddae::Dataset split = ddae::probe_split(data->data, o);
      ddae::Rng rng(o.seed);
      const auto tr = ddae::extract_features(net->net, id, 0, split.train, sched, rng, ddae::Noising::none);
      const auto te = ddae::extract_features(net->net, id, 0, split.test, sched, rng, ddae::Noising::none);
      const auto r = ddae::train_linear_probe(tr, te, o);
      acc = r.accuracy;
      losses = r.epoch_loss;
    } else {
      const auto report = ddae::grid_search(net->net, data->data, sched, {id}, {t}, o);
      acc = report.best.linear_acc;
    }
    rec.emitter().emit(ddae::Phase::probe, "acc/" + id.key(), t, acc);
    put(summary, {{"tap", id.key()}, {"ordinal", net->net.describe_tap(id)}, {"t", t}, {"accuracy", acc}});
  });
}

ddae_status ddae_finetune(const ddae_config* cfg, const ddae_network* net, const ddae_dataset* data, const char* tap,
                          int t, char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(net, "net");
    need(data, "data");
    const auto& c = cfg->cfg;
    StepRecords rec(c);
    const auto id = tap_or(tap, c.finetune.tap, net->net);
    const int level = t > 0 ? t : c.finetune.t;
    if (level < 1) throw ddae::ParameterError("no fine-tuning level given and finetune.t is unset");
    c.schedule.build().index(level);
    ddae::FinetuneOpts o = c.finetune.opts;
    o.seed = ddae::SeedPlan::from_master(c.seed).probe;
    ddae::Encoder enc(net->net.clone(), id, level);
    const auto r = ddae::finetune(enc, data->data, o, rec.emitter());
    put(summary, {{"tap", id.key()}, {"t", level}, {"accuracy", r.accuracy}, {"epoch_loss", r.epoch_loss}});
  });
}

ddae_status ddae_metrics(const ddae_config* cfg, const char* const* checkpoints, int count, const ddae_dataset* data,
                         const char* tap, int t, char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(data, "data");
    if (count < 1) throw ddae::ParameterError("metrics need at least one checkpoint");
    need(checkpoints, "checkpoints");
    const auto& c = cfg->cfg;
    StepRecords rec(c);
    const auto sched = c.schedule.build();
    if (t < 1) throw ddae::ParameterError("metrics need a level t >= 1");
    sched.index(t);
    const ddae::ImageBatch& held = held_out(data->data);
    std::vector<int> idx;
    for (int i = 0; i < std::min(c.metric.images, held.size()); ++i) idx.push_back(i);
    const ddae::ImageBatch imgs = held.subset(idx);
    ddae::Rng rng(ddae::SeedPlan::from_master(c.seed).metric);
    const auto ap = ddae::alignment_plan(imgs, c.metric.pairs, rng);
    const auto up = ddae::uniformity_plan(imgs, c.metric.pairs, rng, c.metric.independent_eps);
    json rows = json::array();
    for (int i = 0; i < count; ++i) {
      need(checkpoints[i], "checkpoint path");
      const auto net = ddae::load_network(checkpoints[i]);
      const auto id = tap_or(tap, c.probe.taps.empty() ? "" : c.probe.taps.front(), net);
      const auto f = ddae::tap_feature_fn(net, id);
      const double a = ddae::alignment(f, imgs.data, t, sched, ap);
      const double u = ddae::uniformity(f, imgs.data, t, sched, up);
      rec.emitter().emit(ddae::Phase::metric, "align", i, a);
      rec.emitter().emit(ddae::Phase::metric, "uniform", i, u);
      rows.push_back({{"checkpoint", checkpoints[i]}, {"align", a}, {"uniform", u}});
    }
    put(summary, {{"t", t}, {"rows", rows}});
  });
}

ddae_status ddae_classifier_train(const ddae_config* cfg, const ddae_network* net, const ddae_dataset* data,
                                  const char* tap, ddae_classifier** out, char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(net, "net");
    need(data, "data");
    need(out, "out");
    const auto& c = cfg->cfg;
    StepRecords rec(c);
    const auto id = tap_or(tap, c.classifier.tap, net->net);
    const auto sched = c.schedule.build();
    ddae::ClassifierOpts o = c.classifier.opts;
    o.seed = ddae::SeedPlan::from_master(c.seed).probe;
    auto clf = ddae::train_noise_cond_classifier(net->net, id, data->data.train, sched, o, rec.emitter());
    std::vector<int> ts;
    for (int v : c.classifier.sweep_ts)
      if (v >= 1 && v <= sched.T) ts.push_back(v);
    json j = {{"tap", id.key()}};
    if (ts.size() >= 2) {
      ddae::Rng rng(ddae::SeedPlan::from_master(c.seed).metric);
      const auto acc = ddae::accuracy_by_level(clf, held_out(data->data), sched, ts, rng);
      std::vector<double> levels(ts.begin(), ts.end());
      for (std::size_t i = 0; i < ts.size(); ++i) rec.emitter().emit(ddae::Phase::metric, "classifier_acc", ts[i], acc[i]);
      const double rho = ddae::spearman(levels, acc);
      rec.emitter().emit(ddae::Phase::metric, "classifier_spearman", 0, rho);
      j["sweep_ts"] = ts;
      j["accuracy"] = acc;
      j["spearman"] = rho;
    }
    put(summary, j);
    *out = new ddae_classifier{std::move(clf)};
  });
}

ddae_status ddae_classifier_save(const ddae_classifier* clf, const char* path) {
  return guarded([&] {
    need(clf, "clf");
    need(path, "path");
    ddae::save_archive(path, clf->clf.archive());
  });
}

ddae_status ddae_classifier_load(const char* path, ddae_classifier** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new ddae_classifier{ddae::NoiseCondClassifier::from_archive(ddae::load_archive(path))};
  });
}

void ddae_classifier_free(ddae_classifier* clf) { delete clf; }

ddae_status ddae_sample(const ddae_config* cfg, const ddae_network* net, const ddae_classifier* clf, int count,
                        const char* png_path, const char* archive_path, char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(net, "net");
    const auto& c = cfg->cfg;
    StepRecords rec(c);
    std::optional<ddae::GuidanceSpec> g;
    if (clf) g = ddae::GuidanceSpec{&clf->clf, c.sample.guidance_label, c.sample.guidance_scale, c.sample.guidance_scaling};
    else if (c.sample.guidance_scale > 0.0) throw ddae::ParameterError("guidance_scale > 0 needs a classifier");
    ddae::Rng rng(ddae::SeedPlan::from_master(c.seed).sampling);
    const auto out = ddae::sample(net->net, c.schedule.build(), count, rng, g, c.sample.opts);
    ddae::save_samples(str(png_path), str(archive_path), out);
    double m = 0.0;
    for (float v : out.data.values()) m += v;
    const double mean = out.data.numel() ? m / static_cast<double>(out.data.numel()) : 0.0;
    rec.emitter().emit(ddae::Phase::sample, "pixel_mean", count, mean);
    put(summary, {{"count", count}, {"guided", clf != nullptr}, {"pixel_mean", mean}});
  });
}

ddae_status ddae_fid(const ddae_config* cfg, const ddae_dataset* data, const char* real_archive,
                     const char* generated_archive, const char* embedder, const ddae_network* net, const char* tap,
                     int t, char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(generated_archive, "generated_archive");
    const auto& c = cfg->cfg;
    StepRecords rec(c);
    ddae::Tensor real;
    if (real_archive && *real_archive) {
      real = ddae::load_archive(real_archive).get("images");
    } else {
      need(data, "data");
      real = held_out(data->data).data;
    }
    const ddae::Tensor gen = ddae::load_archive(generated_archive).get("images");
    const std::string kind = embedder && *embedder ? embedder : "pca";
    ddae::Embedder e;
    if (kind == "pixel") {
      e = ddae::identity_embedder();
    } else if (kind == "pca") {
      e = ddae::pca_embedder(ddae::fit_pca(real, c.sample.pca_components));
    } else if (kind == "encoder") {
      need(net, "net");
      const auto id = tap_or(tap, c.finetune.tap, net->net);
      const int level = t > 0 ? t : c.finetune.t;
      if (level < 1) throw ddae::ParameterError("encoder embedder needs a level t >= 1");
      e = ddae::encoder_embedder(std::make_shared<const ddae::Encoder>(net->net.clone(), id, level));
    } else {
      throw ddae::ParameterError("unknown embedder '" + kind + "' (expected pixel, pca or encoder)");
    }
    const double d = ddae::fid(e, real, gen);
    rec.emitter().emit(ddae::Phase::sample, "fid/" + kind, gen.dim(0), d);
    put(summary, {{"embedder", kind}, {"fid", d}, {"real", real.dim(0)}, {"generated", gen.dim(0)}});
  });
}

ddae_status ddae_run_pipeline(const ddae_config* cfg, const ddae_dataset* data, char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(data, "data");
    const auto r = ddae::run_pipeline(cfg->cfg, data->data);
    json traj = json::array();
    for (const auto& m : r.trajectory) traj.push_back({{"epoch", m.epoch}, {"align", m.align}, {"uniform", m.uniform}});
    json j = {{"run_id", r.run_id},
              {"config_hash", r.config_hash},
              {"final_loss", r.final_loss},
              {"best", r.grid.to_json()["best"]},
              {"trajectory", traj}};
    if (r.fid) j["fid"] = *r.fid;
    put(summary, j);
  });
}

ddae_status ddae_ablate(const ddae_config* cfg, const ddae_dataset* data, const char* variants_json, char** summary) {
  return guarded([&] {
    need(cfg, "cfg");
    need(data, "data");
    std::vector<ddae::Variant> vs;
    if (variants_json) {
      const json arr = json::parse(variants_json);
      if (!arr.is_array()) throw ddae::ParameterError("variants must be a JSON array");
      for (const auto& v : arr) vs.push_back({v.at("name").get<std::string>(), v.value("patch", json::object())});
    } else {
      vs = ddae::standard_variants(cfg->cfg);
    }
    const auto r = ddae::run_ablation(cfg->cfg, vs, data->data);
    json rows = json::array();
    for (const auto& row : r.rows) {
      json x = {{"variant", row.variant}, {"ok", row.ok}, {"final_loss", row.final_loss}, {"best_acc", row.best_acc}};
      if (row.fid) x["fid"] = *row.fid;
      if (!row.ok) x["error"] = row.error;
      rows.push_back(x);
    }
    put(summary, {{"rows", rows}, {"summary_csv", r.summary_csv()}});
  });
}

ddae_status ddae_plot(const char* records_path, const char* phase, const char* key_prefix, const char* csv_path,
                      const char* svg_path, char** summary) {
  return guarded([&] {
    need(records_path, "records_path");
    int warnings = 0;
    const auto rows = ddae::read_records(records_path, [&](const std::string&) { ++warnings; });
    ddae::RecordFilter f;
    if (phase && *phase) f.phase = ddae::phase_from_string(phase);
    f.key_prefix = str(key_prefix);
    const auto sel = ddae::select(rows, f);
    if (csv_path && *csv_path) {
      std::ofstream o(csv_path);
      if (!o) throw ddae::IoError(std::string("cannot write '") + csv_path + "'");
      o << ddae::records_to_csv(sel);
    }
    if (svg_path && *svg_path) {
      std::ofstream o(svg_path);
      if (!o) throw ddae::IoError(std::string("cannot write '") + svg_path + "'");
      o << ddae::records_to_svg(sel, f.key_prefix);
    }
    put(summary, {{"rows", sel.size()}, {"skipped_lines", warnings}, {"empty", sel.empty()}});
  });
}

}  // extern "C"
