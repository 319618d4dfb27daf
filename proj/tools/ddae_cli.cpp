// ddae: command-line front end over the C interface.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ddae/ddae.h"
#include "json.hpp"

using nlohmann::json;

namespace {

struct Failure {
  ddae_status status;
  std::string message;
};

int exit_code(ddae_status s) {
  switch (s) {
    case DDAE_OK: return 0;
    case DDAE_ERR_PARAMETER:
    case DDAE_ERR_CONTRACT: return 2;
    case DDAE_ERR_DATA:
    case DDAE_ERR_IO: return 3;
    case DDAE_ERR_NUMERICAL: return 4;
    case DDAE_ERR_INTERNAL: return 1;
  }
  return 1;
}

void check(ddae_status s) {
  if (s != DDAE_OK) throw Failure{s, ddae_last_error()};
}

template <class T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(p); }
};
using Config = Handle<ddae_config, ddae_config_free>;
using Data = Handle<ddae_dataset, ddae_dataset_free>;
using Net = Handle<ddae_network, ddae_network_free>;
using Clf = Handle<ddae_classifier, ddae_classifier_free>;

void emit(char* summary) {
  if (!summary) return;
  std::cout << json::parse(summary).dump(2) << "\n";
  ddae_string_free(summary);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Failure{DDAE_ERR_IO, "cannot read '" + path + "'"};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Common {
  std::string config, preset, out;
  std::vector<std::string> patches;
  long long seed = -1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON configuration file");
  app->add_option("--preset", c.preset, "Preset name(s), comma separated, applied before --config");
  app->add_option("--seed", c.seed, "Master seed");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--set", c.patches, "Inline JSON patch, applied last");
}

void build_config(const Common& c, Config& cfg) {
  if (c.preset.empty()) check(ddae_config_default(&cfg.p));
  else check(ddae_config_from_preset(c.preset.c_str(), &cfg.p));
  if (!c.config.empty()) check(ddae_config_patch(cfg.p, read_file(c.config).c_str()));
  for (const auto& p : c.patches) check(ddae_config_patch(cfg.p, p.c_str()));
  if (c.seed >= 0) check(ddae_config_patch(cfg.p, json{{"seed", c.seed}}.dump().c_str()));
  if (!c.out.empty()) check(ddae_config_patch(cfg.p, json{{"output_dir", c.out}}.dump().c_str()));
}

void load_net(const std::string& path, Net& net) { check(ddae_network_load(path.c_str(), &net.p)); }

const char* opt(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Denoising diffusion autoencoder experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ddae_version()));

  Common common;
  std::string net_path, tap, png, archive, classifier, real, generated, embedder = "pca", variants;
  std::string records, phase, prefix, csv, svg;
  std::vector<std::string> checkpoints;
  int t = 0, count = 16;

  auto* pretrain = app.add_subcommand("pretrain", "Train the denoising network");
  add_common(pretrain, common);
  pretrain->add_option("--init", net_path, "Continue from this network");

  auto* grid = app.add_subcommand("gridsearch", "Linear probes over every (tap, t) cell");
  add_common(grid, common);
  grid->add_option("--net", net_path, "Network file")->required();

  auto* probe = app.add_subcommand("probe", "One linear probe");
  add_common(probe, common);
  probe->add_option("--net", net_path, "Network file")->required();
  probe->add_option("--tap", tap, "Tap key, e.g. up.1.0@16");
  probe->add_option("--t", t, "Noise level; 0 probes clean images");

  auto* finetune = app.add_subcommand("finetune", "Fine-tune the truncated network");
  add_common(finetune, common);
  finetune->add_option("--net", net_path, "Network file")->required();
  finetune->add_option("--tap", tap, "Tap key");
  finetune->add_option("--t", t, "Fixed noise level");

  auto* metrics = app.add_subcommand("metrics", "Alignment and uniformity over checkpoints");
  add_common(metrics, common);
  metrics->add_option("--checkpoints", checkpoints, "Network files in order")->required();
  metrics->add_option("--tap", tap, "Tap key");
  metrics->add_option("--t", t, "Noise level")->required();

  auto* clf = app.add_subcommand("classifier", "Train a noise-conditional classifier");
  add_common(clf, common);
  clf->add_option("--net", net_path, "Network file")->required();
  clf->add_option("--tap", tap, "Tap key");
  clf->add_option("--save", classifier, "Classifier output file")->required();

  auto* sample = app.add_subcommand("sample", "Ancestral sampling");
  add_common(sample, common);
  sample->add_option("--net", net_path, "Network file")->required();
  sample->add_option("--count", count, "Number of images");
  sample->add_option("--png", png, "Image grid output");
  sample->add_option("--archive", archive, "Tensor archive output");
  sample->add_option("--classifier", classifier, "Classifier for guidance");

  auto* fid = app.add_subcommand("fid", "Frechet distance to held-out images");
  add_common(fid, common);
  fid->add_option("--generated", generated, "Archive of generated images")->required();
  fid->add_option("--real", real, "Archive of reference images");
  fid->add_option("--embedder", embedder, "pixel, pca or encoder")->check(CLI::IsMember({"pixel", "pca", "encoder"}));
  fid->add_option("--net", net_path, "Network file for the encoder embedder");
  fid->add_option("--tap", tap, "Tap key for the encoder embedder");
  fid->add_option("--t", t, "Noise level for the encoder embedder");

  auto* ablate = app.add_subcommand("ablate", "Level-count and beta-range ablations");
  add_common(ablate, common);
  ablate->add_option("--variants", variants, "JSON file with [{name, patch}]");

  auto* pipeline = app.add_subcommand("pipeline", "Pretrain, grid search and monitoring in one run");
  add_common(pipeline, common);

  auto* plot = app.add_subcommand("plot", "CSV and SVG from a record file");
  plot->add_option("--records", records, "records.jsonl")->required();
  plot->add_option("--phase", phase, "Phase filter");
  plot->add_option("--prefix", prefix, "Key prefix filter");
  plot->add_option("--csv", csv, "CSV output");
  plot->add_option("--svg", svg, "SVG output");

  auto* presets = app.add_subcommand("presets", "List named presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    char* summary = nullptr;
    if (*presets) {
      check(ddae_preset_list(&summary));
      emit(summary);
      return 0;
    }
    if (*plot) {
      check(ddae_plot(records.c_str(), phase.c_str(), prefix.c_str(), opt(csv), opt(svg), &summary));
      emit(summary);
      return 0;
    }

    Config cfg;
    build_config(common, cfg);
    auto dataset = [&](Data& d) { check(ddae_dataset_load(cfg.p, &d.p)); };

    if (*pretrain) {
      Data d;
      dataset(d);
      Net net;
      if (!net_path.empty()) load_net(net_path, net);
      check(ddae_pretrain(cfg.p, d.p, &net.p, &summary));
    } else if (*grid) {
      Data d;
      dataset(d);
      Net net;
      load_net(net_path, net);
      check(ddae_gridsearch(cfg.p, net.p, d.p, &summary));
    } else if (*probe) {
      Data d;
      dataset(d);
      Net net;
      load_net(net_path, net);
      check(ddae_probe(cfg.p, net.p, d.p, opt(tap), t, &summary));
    } else if (*finetune) {
      Data d;
      dataset(d);
      Net net;
      load_net(net_path, net);
      check(ddae_finetune(cfg.p, net.p, d.p, opt(tap), t, &summary));
    } else if (*metrics) {
      Data d;
      dataset(d);
      std::vector<const char*> paths;
      for (const auto& c : checkpoints) paths.push_back(c.c_str());
      check(ddae_metrics(cfg.p, paths.data(), static_cast<int>(paths.size()), d.p, opt(tap), t, &summary));
    } else if (*clf) {
      Data d;
      dataset(d);
      Net net;
      load_net(net_path, net);
      Clf c;
      check(ddae_classifier_train(cfg.p, net.p, d.p, opt(tap), &c.p, &summary));
      check(ddae_classifier_save(c.p, classifier.c_str()));
    } else if (*sample) {
      Net net;
      load_net(net_path, net);
      Clf c;
      if (!classifier.empty()) check(ddae_classifier_load(classifier.c_str(), &c.p));
      check(ddae_sample(cfg.p, net.p, c.p, count, opt(png), opt(archive), &summary));
    } else if (*fid) {
      Data d;
      if (real.empty()) dataset(d);
      Net net;
      if (!net_path.empty()) load_net(net_path, net);
      check(ddae_fid(cfg.p, d.p, opt(real), generated.c_str(), embedder.c_str(), net.p, opt(tap), t, &summary));
    } else if (*ablate) {
      Data d;
      dataset(d);
      const std::string v = variants.empty() ? "" : read_file(variants);
      check(ddae_ablate(cfg.p, d.p, opt(v), &summary));
    } else if (*pipeline) {
      Data d;
      dataset(d);
      check(ddae_run_pipeline(cfg.p, d.p, &summary));
    }
    emit(summary);
    return 0;
  } catch (const Failure& f) {
    std::fprintf(stderr, "ddae: %s: %s\n", ddae_status_name(f.status), f.message.c_str());
    return exit_code(f.status);
  }
}
