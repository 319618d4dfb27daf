#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "ddae/backbone.hpp"
#include "ddae/corruption.hpp"
#include "ddae/image_batch.hpp"
#include "ddae/optim.hpp"
#include "ddae/records.hpp"
#include "ddae/rng.hpp"

namespace ddae {

struct TrainOpts {
  int epochs = 30;
  int batch_size = 64;
  double learning_rate = 2e-4;
  LrSchedule lr_schedule = LrSchedule::constant;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 disables
  bool horizontal_flip = true;
  bool pad_crop = false;
  std::filesystem::path checkpoint_dir;  // empty: no files written

  void validate() const;
};

// Draws one level per item uniformly from [1, T].
std::vector<int> sample_levels(int batch, int T, Rng& rng);

// Epsilon-prediction trainer owning the optimizer and RNG stream for one network.
class Pretrainer {
 public:
  Pretrainer(DDAENetwork& net, const NoiseSchedule& sched, std::uint64_t seed);

  // One gradient update on `images` (already augmented). Returns the
  // pre-update loss; throws NumericalError with diagnostics when non-finite.
  double step(const Tensor& images, double lr);

  Adam& optimizer() noexcept { return adam_; }
  Rng& rng() noexcept { return rng_; }
  long steps() const noexcept { return adam_.steps_taken(); }

  // Full trainer state (weights, moments, RNG, counters) for exact restarts.
  void save_state(const std::filesystem::path& path, int epoch) const;
  // Returns the epoch recorded in the state file.
  int load_state(const std::filesystem::path& path);

 private:
  DDAENetwork& net_;
  const NoiseSchedule& sched_;
  Adam adam_;
  Rng rng_;
};

struct PretrainResult {
  std::vector<double> epoch_loss;
  std::vector<std::filesystem::path> checkpoints;
};

// Called after each checkpointed epoch with the current weights.
using CheckpointHook = std::function<void(int epoch, const DDAENetwork& net)>;

// Trains for opts.epochs epochs over `data` (labels unused), emitting
// "loss" per epoch. `resume_from` continues from a saved trainer state.
PretrainResult pretrain(DDAENetwork& net, const ImageBatch& data, const NoiseSchedule& sched, const TrainOpts& opts,
                        const RecordEmitter& records = {}, const CheckpointHook& on_checkpoint = {},
                        const std::optional<std::filesystem::path>& resume_from = std::nullopt);

}  // namespace ddae
