#include "ddae/trainer.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "ddae/checkpoint.hpp"
#include "ddae/dataset.hpp"
#include "ddae/error.hpp"
#include "ddae/ops.hpp"

namespace ddae {

void TrainOpts::validate() const {
  if (epochs < 0) throw ParameterError("TrainOpts.epochs must be >= 0");
  if (batch_size <= 0) throw ParameterError("TrainOpts.batch_size must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ParameterError("TrainOpts.learning_rate must be finite and >= 0");
  if (checkpoint_every < 0) throw ParameterError("TrainOpts.checkpoint_every must be >= 0");
}

std::vector<int> sample_levels(int batch, int T, Rng& rng) {
  std::vector<int> t(static_cast<std::size_t>(batch));
  for (auto& v : t) v = rng.uniform_int(1, T);
  return t;
}

Pretrainer::Pretrainer(DDAENetwork& net, const NoiseSchedule& sched, std::uint64_t seed)
    : net_(net), sched_(sched), adam_(net.param_vars()), rng_(seed) {}

double Pretrainer::step(const Tensor& images, double lr) {
  if (images.ndim() != 4 || images.dim(2) != net_.config().image_size)
    throw ContractError("batch shape " + shape_str(images.shape()) + " does not match the network image size " +
                        std::to_string(net_.config().image_size));
  const int n = images.dim(0);
  const std::vector<int> t = sample_levels(n, sched_.T, rng_);
  const Tensor eps = rng_.normal_like(images.shape());
  const Tensor x_t = noise(images, t, eps, sched_);

  adam_.zero_grad();
  auto out = net_.run(ag::constant(x_t), t);
  auto loss = ag::mse(out.eps, ag::constant(eps));
  const double value = loss->value[0];
  ag::backward(loss);
  if (!std::isfinite(value)) {
    std::vector<int> hist(10, 0);
    for (int v : t) ++hist[static_cast<std::size_t>(std::min(9, (v - 1) * 10 / sched_.T))];
    std::ostringstream os;
    os << "non-finite training loss at step " << adam_.steps_taken() + 1 << "; t decile histogram [";
    for (std::size_t i = 0; i < hist.size(); ++i) os << (i ? " " : "") << hist[i];
    os << "]; grad norm " << adam_.grad_norm();
    throw NumericalError(os.str());
  }
  adam_.step(lr);
  return value;
}

void Pretrainer::save_state(const std::filesystem::path& path, int epoch) const {
  TensorArchive a = network_archive(net_);
  const auto& params = net_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    a.tensors.emplace_back("adam.m." + params[i].name, adam_.first_moments()[i]);
    a.tensors.emplace_back("adam.v." + params[i].name, adam_.second_moments()[i]);
  }
  a.metadata["trainer"] = {{"epoch", epoch}, {"adam_steps", adam_.steps_taken()}, {"rng", rng_.serialize()}};
  save_archive(path, a);
}

int Pretrainer::load_state(const std::filesystem::path& path) {
  const TensorArchive a = load_archive(path);
  if (!a.metadata.contains("trainer")) throw DataError("'" + path.string() + "' has no trainer state");
  const auto& params = net_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].var->value = a.get(params[i].name);
    adam_.first_moments()[i] = a.get("adam.m." + params[i].name);
    adam_.second_moments()[i] = a.get("adam.v." + params[i].name);
  }
  const auto& tr = a.metadata.at("trainer");
  adam_.set_steps_taken(tr.at("adam_steps").get<long>());
  rng_.deserialize(tr.at("rng").get<std::string>());
  return tr.at("epoch").get<int>();
}

PretrainResult pretrain(DDAENetwork& net, const ImageBatch& data, const NoiseSchedule& sched, const TrainOpts& opts,
                        const RecordEmitter& records, const CheckpointHook& on_checkpoint,
                        const std::optional<std::filesystem::path>& resume_from) {
  opts.validate();
  PretrainResult result;
  if (opts.epochs == 0) return result;
  if (data.size() == 0) throw DataError("pretrain: dataset is empty");

  Pretrainer trainer(net, sched, opts.seed);
  int start_epoch = 0;
  if (resume_from) start_epoch = trainer.load_state(*resume_from);

  const int n = data.size();
  const long batches_per_epoch = (n + opts.batch_size - 1) / opts.batch_size;
  const long total_steps = batches_per_epoch * opts.epochs;
  std::vector<int> order(static_cast<std::size_t>(n));

  for (int epoch = start_epoch; epoch < opts.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng& rng = trainer.rng();
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, i))]);

    double sum = 0.0;
    long count = 0;
    for (int b0 = 0; b0 < n; b0 += opts.batch_size) {
      const int b1 = std::min(n, b0 + opts.batch_size);
      std::span<const int> idx(order.data() + b0, static_cast<std::size_t>(b1 - b0));
      const Tensor images = augment(data.data.gather_rows(idx), opts.horizontal_flip, opts.pad_crop, rng);
      const double lr = scheduled_lr(opts.lr_schedule, opts.learning_rate, trainer.steps(), total_steps);
      const double loss = trainer.step(images, lr);
      sum += loss * (b1 - b0);
      count += b1 - b0;
    }
    const double mean = sum / static_cast<double>(count);
    result.epoch_loss.push_back(mean);
    records.emit(Phase::pretrain, "loss", epoch + 1, mean);

    const bool last = epoch + 1 == opts.epochs;
    if (opts.checkpoint_every > 0 && ((epoch + 1) % opts.checkpoint_every == 0 || last)) {
      if (!opts.checkpoint_dir.empty()) {
        const auto path = opts.checkpoint_dir / ("ckpt_epoch" + std::to_string(epoch + 1) + ".ddae");
        trainer.save_state(path, epoch + 1);
        result.checkpoints.push_back(path);
      }
      if (on_checkpoint) on_checkpoint(epoch + 1, net);
    }
  }
  return result;
}

}  // namespace ddae
