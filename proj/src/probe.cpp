#include "ddae/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <set>

#include "ddae/dataset.hpp"
#include "ddae/error.hpp"
#include "ddae/serialize.hpp"

namespace ddae {

FeatureTable FeatureTable::subset(std::span<const int> idx) const {
  FeatureTable out = *this;
  out.features = features.gather_rows(idx);
  out.labels.clear();
  for (int i : idx) out.labels.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

namespace {

void check_level(const NoiseSchedule& sched, int t, Noising noising) {
  if (noising == Noising::random) {
    sched.index(t);
  } else if (t < 0 || t > sched.T) {
    throw ContractError("level " + std::to_string(t) + " outside [0, " + std::to_string(sched.T) + "]");
  }
}

Tensor noised_input(const Tensor& x0, int t, const NoiseSchedule& sched, Rng& rng, Noising noising) {
  if (noising == Noising::none) return x0;
  std::vector<int> levels(static_cast<std::size_t>(x0.dim(0)), t);
  return noise(x0, levels, rng.normal_like(x0.shape()), sched);
}

// Pooled activations at several taps from one pass per chunk.
std::vector<Tensor> pooled_multi(const DDAENetwork& net, const std::vector<int>& positions, const Tensor& x, int t) {
  constexpr int kChunk = 64;
  ag::NoGradGuard ng;
  const int stop = *std::max_element(positions.begin(), positions.end());
  std::vector<std::vector<Tensor>> parts(positions.size());
  for (int b0 = 0; b0 < x.dim(0); b0 += kChunk) {
    const int b1 = std::min(x.dim(0), b0 + kChunk);
    std::vector<int> levels(static_cast<std::size_t>(b1 - b0), t);
    auto out = net.run(ag::constant(x.rows(b0, b1)), levels, positions, stop);
    for (std::size_t k = 0; k < positions.size(); ++k)
      parts[k].push_back(ag::global_avg_pool(out.taps.at(positions[k]))->value);
  }
  std::vector<Tensor> res;
  for (auto& p : parts) res.push_back(concat_rows(p));
  return res;
}

struct Moments {
  Tensor mean, inv_std;  // [D]
};

Moments feature_moments(const Tensor& f) {
  const int n = f.dim(0), d = f.dim(1);
  Moments m{Tensor({d}), Tensor({d})};
  for (int j = 0; j < d; ++j) {
    double mu = 0.0, var = 0.0;
    for (int i = 0; i < n; ++i) mu += f.at(i, j);
    mu /= std::max(1, n);
    for (int i = 0; i < n; ++i) var += (f.at(i, j) - mu) * (f.at(i, j) - mu);
    var /= std::max(1, n);
    m.mean[j] = static_cast<float>(mu);
    m.inv_std[j] = static_cast<float>(1.0 / std::sqrt(var + 1e-8));
  }
  return m;
}

Tensor apply_moments(const Tensor& f, const Moments& m) {
  Tensor out = f;
  for (int i = 0; i < f.dim(0); ++i)
    for (int j = 0; j < f.dim(1); ++j) out.at(i, j) = (f.at(i, j) - m.mean[j]) * m.inv_std[j];
  return out;
}

// Head on raw features equivalent to `head` on standardized ones.
LinearHead fold_moments(const LinearHead& head, const Moments& m) {
  Tensor w = head.weight->value, b = head.bias->value;
  for (int k = 0; k < w.dim(0); ++k) {
    double shift = 0.0;
    for (int j = 0; j < w.dim(1); ++j) {
      w.at(k, j) *= m.inv_std[j];
      shift += static_cast<double>(w.at(k, j)) * m.mean[j];
    }
    b[k] = static_cast<float>(b[k] - shift);
  }
  return {ag::parameter(std::move(w)), ag::parameter(std::move(b))};
}

int count_classes(std::span<const int> labels) {
  return static_cast<int>(std::set<int>(labels.begin(), labels.end()).size());
}

}  // namespace

FeatureTable extract_features(const DDAENetwork& net, const TapId& tap, int t, const ImageBatch& data,
                              const NoiseSchedule& sched, Rng& rng, Noising noising) {
  check_level(sched, t, noising);
  net.tap_position(tap);
  FeatureTable table;
  table.tap = tap;
  table.t = t;
  table.noising = noising;
  table.labels = data.labels;
  table.num_classes = data.num_classes;
  const Tensor x = noised_input(data.data, t, sched, rng, noising);
  std::vector<int> levels(static_cast<std::size_t>(data.size()), t);
  table.features = pooled_tap_features(net, tap, x, levels);
  return table;
}

FeatureTable pixel_features(const ImageBatch& data) {
  FeatureTable table;
  const int n = data.size();
  table.features = data.data.reshaped({n, static_cast<int>(data.data.numel() / std::max(1, n))});
  table.labels = data.labels;
  table.num_classes = data.num_classes;
  table.noising = Noising::none;
  return table;
}

void ProbeOpts::validate() const {
  if (epochs < 0) throw ParameterError("ProbeOpts.epochs must be >= 0");
  if (batch_size < 1) throw ParameterError("ProbeOpts.batch_size must be positive");
  if (!(learning_rate >= 0.0)) throw ParameterError("ProbeOpts.learning_rate must be >= 0");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw ParameterError("ProbeOpts.holdout_fraction must lie in (0, 1)");
}

// ------------------------------------------------------------- heads ----

LinearHead LinearHead::init(int dim, int num_classes, Rng& rng) {
  if (dim < 1 || num_classes < 2) throw ParameterError("linear head needs dim >= 1 and >= 2 classes");
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  Tensor w({num_classes, dim}), b({num_classes});
  for (auto& v : w.values()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  for (auto& v : b.values()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  return {ag::parameter(std::move(w)), ag::parameter(std::move(b))};
}

LinearHead LinearHead::copy() const { return {ag::parameter(weight->value), ag::parameter(bias->value)}; }

double LinearHead::accuracy(const Tensor& features, std::span<const int> labels) const {
  if (features.dim(0) != static_cast<int>(labels.size())) throw ContractError("features and labels differ in count");
  if (labels.empty()) return 0.0;
  ag::NoGradGuard ng;
  const Tensor lg = logits(ag::constant(features))->value;
  const int k = lg.dim(1);
  long correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = lg.data() + i * static_cast<std::size_t>(k);
    correct += static_cast<int>(std::max_element(row, row + k) - row) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

ProbeTrainer::ProbeTrainer(int dim, int num_classes, const ProbeOpts& opts, long total_steps, std::uint64_t seed)
    : opts_(opts),
      rng_(seed),
      head_(LinearHead::init(dim, num_classes, rng_)),
      adam_({head_.weight, head_.bias}),
      total_steps_(total_steps) {}

double ProbeTrainer::train_epoch(const Tensor& features, std::span<const int> labels) {
  const int n = features.dim(0);
  if (n != static_cast<int>(labels.size())) throw ContractError("features and labels differ in count");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng_.uniform_int(0, i))]);
  double sum = 0.0;
  for (int b0 = 0; b0 < n; b0 += opts_.batch_size) {
    const int b1 = std::min(n, b0 + opts_.batch_size);
    std::span<const int> idx(order.data() + b0, static_cast<std::size_t>(b1 - b0));
    std::vector<int> y;
    for (int i : idx) y.push_back(labels[static_cast<std::size_t>(i)]);
    adam_.zero_grad();
    auto loss = ag::cross_entropy(head_.logits(ag::constant(features.gather_rows(idx))), y);
    ag::backward(loss);
    if (!std::isfinite(loss->value[0])) throw NumericalError("non-finite probe loss");
    adam_.step(scheduled_lr(opts_.lr_schedule, opts_.learning_rate, adam_.steps_taken(), total_steps_));
    sum += loss->value[0] * (b1 - b0);
  }
  return n ? sum / n : 0.0;
}

namespace {
long steps_for(int n, const ProbeOpts& opts) {
  return static_cast<long>((n + opts.batch_size - 1) / opts.batch_size) * opts.epochs;
}
}  // namespace

ProbeResult train_linear_probe(const FeatureTable& train, const FeatureTable& test, const ProbeOpts& opts) {
  opts.validate();
  if (train.size() == 0) throw DataError("empty feature table");
  if (count_classes(train.labels) < 2) throw DataError("degenerate feature table: fewer than 2 classes present");
  if (!train.features.all_finite()) throw NumericalError("feature table has non-finite entries");
  const int k = std::max(train.num_classes, *std::max_element(train.labels.begin(), train.labels.end()) + 1);
  ProbeTrainer trainer(train.dim(), k, opts, steps_for(train.size(), opts), opts.seed);
  ProbeResult r;
  std::optional<Moments> mom;
  if (opts.standardize) mom = feature_moments(train.features);
  const Tensor feats = mom ? apply_moments(train.features, *mom) : train.features;
  for (int e = 0; e < opts.epochs; ++e) r.epoch_loss.push_back(trainer.train_epoch(feats, train.labels));
  r.head = mom ? fold_moments(trainer.head(), *mom) : trainer.head();
  r.accuracy = r.head.accuracy(test.features, test.labels);
  return r;
}

ProbeResult train_linear_probe(const FeatureTable& table, const ProbeOpts& opts) {
  opts.validate();
  const HoldoutIndices h = holdout_indices(table.size(), opts.holdout_fraction, Rng::derive_seed(opts.seed, "split"));
  return train_linear_probe(table.subset(h.train), table.subset(h.test), opts);
}

Dataset probe_split(const Dataset& data, const ProbeOpts& opts) {
  if (data.has_test()) return data;
  return split_holdout(data.train, opts.holdout_fraction, Rng::derive_seed(opts.seed, "split"));
}

// -------------------------------------------------------------- grid ----

const GridCell& GridReport::cell(const TapId& tap, int t) const {
  for (const auto& c : cells)
    if (c.tap == tap && c.t == t) return c;
  throw ContractError("no grid cell for " + tap.key() + " at t=" + std::to_string(t));
}

nlohmann::json GridReport::to_json() const {
  nlohmann::json j;
  j["taps"] = nlohmann::json::array();
  for (const auto& tp : taps) j["taps"].push_back(tp.key());
  j["ts"] = ts;
  j["probe"] = {{"epochs", opts.epochs},
                {"batch_size", opts.batch_size},
                {"learning_rate", opts.learning_rate},
                {"lr_schedule", opts.lr_schedule == LrSchedule::cosine ? "cosine" : "constant"},
                {"horizontal_flip", opts.horizontal_flip},
                {"pad_crop", opts.pad_crop},
                {"freeze_noise", opts.freeze_noise},
                {"standardize", opts.standardize},
                {"seed", opts.seed}};
  auto cell_json = [](const GridCell& c) {
    return nlohmann::json{{"tap", c.tap.key()}, {"t", c.t}, {"linear_acc", c.linear_acc}, {"head_ref", c.head_ref}};
  };
  j["cells"] = nlohmann::json::array();
  for (const auto& c : cells) j["cells"].push_back(cell_json(c));
  j["best"] = cell_json(best);
  return j;
}

TensorArchive GridReport::heads_archive() const {
  TensorArchive a;
  for (std::size_t i = 0; i < cells.size() && i < heads.size(); ++i) {
    a.tensors.emplace_back(cells[i].head_ref + ".weight", heads[i].weight->value);
    a.tensors.emplace_back(cells[i].head_ref + ".bias", heads[i].bias->value);
  }
  return a;
}

const GridCell& select_best(const std::vector<GridCell>& cells, const std::vector<TapId>& tap_order) {
  if (cells.empty()) throw ContractError("no grid cells to select from");
  auto order = [&](const TapId& tp) {
    return static_cast<int>(std::find(tap_order.begin(), tap_order.end(), tp) - tap_order.begin());
  };
  const GridCell* best = &cells.front();
  for (const auto& c : cells) {
    if (c.linear_acc > best->linear_acc ||
        (c.linear_acc == best->linear_acc &&
         (c.t < best->t || (c.t == best->t && order(c.tap) < order(best->tap)))))
      best = &c;
  }
  return *best;
}

namespace {

std::string head_ref(const TapId& tap, int t) { return "head." + tap.key() + ".t" + std::to_string(t); }

void probe_level(const DDAENetwork& net, const Dataset& split, const NoiseSchedule& sched,
                 const std::vector<TapId>& taps, const std::vector<int>& positions, int t, const ProbeOpts& opts,
                 const RecordEmitter& records, GridReport& report) {
  const ImageBatch& train = split.train;
  const ImageBatch& test = split.test;
  const int k = train.num_classes;
  Rng rng = Rng::substream(opts.seed, "grid.noise.t" + std::to_string(t));
  const long total = steps_for(train.size(), opts);

  std::vector<ProbeTrainer> trainers;
  for (const auto& tp : taps)
    trainers.emplace_back(net.tap_channels(tp), k, opts, total, Rng::derive_seed(opts.seed, head_ref(tp, t)));

  std::vector<Moments> moms;
  auto standardized = [&](std::vector<Tensor> feats) {
    if (!opts.standardize) return feats;
    if (moms.empty())
      for (const auto& f : feats) moms.push_back(feature_moments(f));
    for (std::size_t i = 0; i < feats.size(); ++i) feats[i] = apply_moments(feats[i], moms[i]);
    return feats;
  };

  std::vector<Tensor> frozen;
  if (opts.freeze_noise)
    frozen = standardized(pooled_multi(net, positions, noised_input(train.data, t, sched, rng, Noising::random), t));
  for (int e = 0; e < opts.epochs; ++e) {
    std::vector<Tensor> fresh;
    if (!opts.freeze_noise) {
      const Tensor x = augment(train.data, opts.horizontal_flip, opts.pad_crop, rng);
      fresh = standardized(pooled_multi(net, positions, noised_input(x, t, sched, rng, Noising::random), t));
    }
    const auto& feats = opts.freeze_noise ? frozen : fresh;
    for (std::size_t i = 0; i < taps.size(); ++i) {
      const double loss = trainers[i].train_epoch(feats[i], train.labels);
      records.emit(Phase::grid, "probe_loss/" + taps[i].key() + "/t" + std::to_string(t), e + 1, loss);
    }
  }
  const auto test_feats = pooled_multi(net, positions, noised_input(test.data, t, sched, rng, Noising::random), t);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const LinearHead head = moms.empty() ? trainers[i].head() : fold_moments(trainers[i].head(), moms[i]);
    GridCell c{taps[i], t, head.accuracy(test_feats[i], test.labels), head_ref(taps[i], t)};
    records.emit(Phase::grid, "acc/" + taps[i].key(), t, c.linear_acc);
    report.cells.push_back(c);
    report.heads.push_back(head);
  }
}

void check_grid_inputs(const DDAENetwork& net, const Dataset& data, const NoiseSchedule& sched,
                       const std::vector<TapId>& taps, const std::vector<int>& ts) {
  if (taps.empty() || ts.empty()) throw ParameterError("grid search needs at least one tap and one level");
  for (const auto& tp : taps) net.tap_position(tp);
  for (int t : ts) sched.index(t);
  if (!data.train.labeled() || count_classes(data.train.labels) < 2)
    throw DataError("grid search needs labeled data with at least 2 classes");
}

}  // namespace

GridReport grid_search(const DDAENetwork& net, const Dataset& data, const NoiseSchedule& sched,
                       const std::vector<TapId>& taps, const std::vector<int>& ts, const ProbeOpts& opts,
                       const RecordEmitter& records) {
  opts.validate();
  check_grid_inputs(net, data, sched, taps, ts);
  const Dataset split = probe_split(data, opts);
  std::vector<int> positions;
  for (const auto& tp : taps) positions.push_back(net.tap_position(tp));

  GridReport report;
  report.taps = taps;
  report.ts = ts;
  report.opts = opts;
  for (int t : ts) probe_level(net, split, sched, taps, positions, t, opts, records, report);
  report.best = select_best(report.cells, taps);
  records.emit(Phase::grid, "best_acc", report.best.t, report.best.linear_acc);
  return report;
}

GridReport grid_search_refine(const DDAENetwork& net, const Dataset& data, const NoiseSchedule& sched,
                              const std::vector<TapId>& taps, int t_lo, int t_hi, int stride,
                              const ProbeOpts& opts, const RecordEmitter& records) {
  if (stride < 1 || t_lo > t_hi) throw ParameterError("refinement needs stride >= 1 and t_lo <= t_hi");
  std::vector<int> coarse;
  for (int t = t_lo; t <= t_hi; t += stride) coarse.push_back(t);
  GridReport report = grid_search(net, data, sched, taps, coarse, opts, records);

  const TapId tap = report.best.tap;
  const int center = report.best.t;
  std::vector<int> fine;
  for (int t = std::max(t_lo, center - stride + 1); t <= std::min(t_hi, center + stride - 1); ++t)
    if (std::find(coarse.begin(), coarse.end(), t) == coarse.end()) fine.push_back(t);
  if (!fine.empty()) {
    const Dataset split = probe_split(data, opts);
    const std::vector<int> pos{net.tap_position(tap)};
    for (int t : fine) probe_level(net, split, sched, {tap}, pos, t, opts, records, report);
    report.ts.insert(report.ts.end(), fine.begin(), fine.end());
    std::sort(report.ts.begin(), report.ts.end());
  }
  report.best = select_best(report.cells, taps);
  return report;
}

// ---------------------------------------------------------- finetune ----

double encoder_accuracy(const Encoder& encoder, const LinearHead& head, const ImageBatch& data) {
  std::vector<int> levels(static_cast<std::size_t>(data.size()), encoder.t_fixed());
  return head.accuracy(pooled_tap_features(encoder.network(), encoder.tap(), data.data, levels), data.labels);
}

FinetuneResult finetune(Encoder& encoder, const Dataset& data, const FinetuneOpts& opts, const RecordEmitter& records) {
  if (opts.epochs < 0 || opts.batch_size < 1 || opts.warmup_epochs < 0)
    throw ParameterError("FinetuneOpts epochs/batch_size/warmup_epochs out of range");
  if (!data.train.labeled() || count_classes(data.train.labels) < 2)
    throw DataError("fine-tuning needs labeled data with at least 2 classes");
  const Dataset split =
      data.has_test() ? data : split_holdout(data.train, opts.holdout_fraction, Rng::derive_seed(opts.seed, "split"));
  const ImageBatch& train = split.train;

  Rng rng(opts.seed);
  LinearHead head = LinearHead::init(encoder.feature_dim(), train.num_classes, rng);
  DDAENetwork& net = encoder.network();
  net.set_requires_grad(true);
  std::vector<ag::Var> params = net.param_vars();
  params.push_back(head.weight);
  params.push_back(head.bias);
  Adam adam(params);

  const int n = train.size();
  const long batches = (n + opts.batch_size - 1) / opts.batch_size;
  const long total = batches * opts.epochs;
  const long warm = batches * opts.warmup_epochs;
  FinetuneResult r;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int e = 0; e < opts.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    double sum = 0.0;
    for (int b0 = 0; b0 < n; b0 += opts.batch_size) {
      const int b1 = std::min(n, b0 + opts.batch_size);
      std::span<const int> idx(order.data() + b0, static_cast<std::size_t>(b1 - b0));
      const Tensor x = augment(train.data.gather_rows(idx), opts.horizontal_flip, opts.pad_crop, rng);
      std::vector<int> y, levels(idx.size(), encoder.t_fixed());
      for (int i : idx) y.push_back(train.labels[static_cast<std::size_t>(i)]);
      adam.zero_grad();
      auto loss = ag::cross_entropy(head.logits(encoder.features(ag::constant(x), levels)), y);
      ag::backward(loss);
      if (!std::isfinite(loss->value[0]))
        throw NumericalError("non-finite fine-tuning loss in epoch " + std::to_string(e + 1));
      double lr = scheduled_lr(opts.lr_schedule, opts.learning_rate, adam.steps_taken(), total);
      if (warm > 0) lr *= std::min(1.0, static_cast<double>(adam.steps_taken() + 1) / static_cast<double>(warm));
      adam.step(lr);
      sum += loss->value[0] * (b1 - b0);
    }
    r.epoch_loss.push_back(sum / n);
    records.emit(Phase::finetune, "loss", e + 1, sum / n);
  }
  r.accuracy = encoder_accuracy(encoder, head, split.test);
  records.emit(Phase::finetune, "acc", opts.epochs, r.accuracy);
  return r;
}

}  // namespace ddae
