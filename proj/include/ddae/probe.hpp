#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ddae/backbone.hpp"
#include "ddae/checkpoint.hpp"
#include "ddae/corruption.hpp"
#include "ddae/image_batch.hpp"
#include "ddae/ops.hpp"
#include "ddae/optim.hpp"
#include "ddae/records.hpp"
#include "ddae/rng.hpp"

namespace ddae {

enum class Noising { random, none };

struct FeatureTable {
  Tensor features;  // [N, D]
  std::vector<int> labels;
  int num_classes = 0;
  TapId tap;
  int t = 0;
  Noising noising = Noising::random;
  std::uint64_t seed = 0;

  int size() const { return features.empty() ? 0 : features.dim(0); }
  int dim() const { return features.dim(1); }
  FeatureTable subset(std::span<const int> idx) const;
};

// One pooled tap activation per image of x_t = noise(x_0, t) (or of the clean
// image with Noising::none). Never touches network weights.
FeatureTable extract_features(const DDAENetwork& net, const TapId& tap, int t, const ImageBatch& data,
                              const NoiseSchedule& sched, Rng& rng, Noising noising = Noising::random);

// Flattened pixels as a feature table (the raw-pixel baseline).
FeatureTable pixel_features(const ImageBatch& data);

struct ProbeOpts {
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::cosine;
  bool horizontal_flip = true;
  bool pad_crop = true;
  bool freeze_noise = false;  // reuse one noised copy instead of re-noising each epoch
  // Scale features to zero mean, unit variance per dimension (train-set
  // statistics, first epoch); folded into the returned head.
  bool standardize = false;
  double holdout_fraction = 0.1;  // used only without a designated test split
  std::uint64_t seed = 0;

  void validate() const;
};

struct LinearHead {
  ag::Var weight;  // [K, D]
  ag::Var bias;    // [K]

  static LinearHead init(int dim, int num_classes, Rng& rng);
  LinearHead copy() const;
  ag::Var logits(const ag::Var& features) const { return ag::linear(features, weight, bias); }
  double accuracy(const Tensor& features, std::span<const int> labels) const;
};

// Incremental trainer for one linear head, epoch by epoch, over features
// that may change between epochs.
class ProbeTrainer {
 public:
  ProbeTrainer(int dim, int num_classes, const ProbeOpts& opts, long total_steps, std::uint64_t seed);

  // One pass over `features` in a shuffled order; returns the mean loss.
  double train_epoch(const Tensor& features, std::span<const int> labels);
  LinearHead& head() noexcept { return head_; }
  const LinearHead& head() const noexcept { return head_; }

 private:
  ProbeOpts opts_;
  Rng rng_;
  LinearHead head_;
  Adam adam_;
  long total_steps_;
};

struct ProbeResult {
  LinearHead head;
  double accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Linear classifier on frozen features, no normalization layer unless
// opts.standardize is set.
ProbeResult train_linear_probe(const FeatureTable& train, const FeatureTable& test, const ProbeOpts& opts);
// Holds out a seeded fraction of `table` for evaluation.
ProbeResult train_linear_probe(const FeatureTable& table, const ProbeOpts& opts);

// Train/test images for probing: the designated test split, or a seeded
// holdout of the train split.
Dataset probe_split(const Dataset& data, const ProbeOpts& opts);

struct GridCell {
  TapId tap;
  int t = 0;
  double linear_acc = 0.0;
  std::string head_ref;  // archive tensor prefix of the trained head
};

struct GridReport {
  std::vector<TapId> taps;
  std::vector<int> ts;
  ProbeOpts opts;
  std::vector<GridCell> cells;  // t-major, taps in forward order
  GridCell best;
  std::vector<LinearHead> heads;  // parallel to cells

  const GridCell& cell(const TapId& tap, int t) const;
  nlohmann::json to_json() const;
  // Heads under "<head_ref>.weight" / ".bias".
  TensorArchive heads_archive() const;
};

// Highest accuracy; ties go to the smallest t, then the earliest tap.
const GridCell& select_best(const std::vector<GridCell>& cells, const std::vector<TapId>& tap_order);

// Probes every (tap, t) cell. For each t a single forward pass per batch
// captures all taps; training features are re-extracted every epoch with
// fresh noise and augmentation unless opts.freeze_noise.
GridReport grid_search(const DDAENetwork& net, const Dataset& data, const NoiseSchedule& sched,
                       const std::vector<TapId>& taps, const std::vector<int>& ts, const ProbeOpts& opts,
                       const RecordEmitter& records = {});

// Coarse pass over every `stride`-th level of [t_lo, t_hi], then a full pass
// over the neighbourhood of the coarse winner.
GridReport grid_search_refine(const DDAENetwork& net, const Dataset& data, const NoiseSchedule& sched,
                              const std::vector<TapId>& taps, int t_lo, int t_hi, int stride,
                              const ProbeOpts& opts, const RecordEmitter& records = {});

struct FinetuneOpts {
  int epochs = 30;
  int batch_size = 128;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::cosine;
  bool horizontal_flip = true;
  bool pad_crop = true;
  double holdout_fraction = 0.1;
  int warmup_epochs = 0;  // linear ramp before the schedule takes over
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  double accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Trains the encoder weights and a linear head end to end on clean images
// at the encoder's fixed level. Modifies `encoder` in place.
FinetuneResult finetune(Encoder& encoder, const Dataset& data, const FinetuneOpts& opts,
                        const RecordEmitter& records = {});

// Accuracy of a linear head on pooled encoder features of clean images.
double encoder_accuracy(const Encoder& encoder, const LinearHead& head, const ImageBatch& data);

}  // namespace ddae
