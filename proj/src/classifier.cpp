#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddae/dataset.hpp"
#include "ddae/error.hpp"
#include "ddae/ops.hpp"
#include "ddae/repmetrics.hpp"
#include "ddae/trainer.hpp"

namespace ddae {

namespace {

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  return t;
}

void check_levels(std::span<const int> t, int T) {
  for (int v : t)
    if (v < 1 || v > T) throw ContractError("level " + std::to_string(v) + " outside [1, " + std::to_string(T) + "]");
}

}  // namespace

ClassifierHead ClassifierHead::init(const TapId& tap, int feature_dim, int hidden, int num_classes, int levels,
                                    Rng& rng) {
  if (feature_dim < 1 || hidden < 1 || num_classes < 2 || levels < 1)
    throw ParameterError("classifier head needs positive sizes and at least 2 classes");
  ClassifierHead h;
  h.tap = tap;
  const double b1 = 1.0 / std::sqrt(feature_dim), b2 = 1.0 / std::sqrt(hidden);
  h.w1 = ag::parameter(uniform_init({hidden, feature_dim}, b1, rng));
  h.b1 = ag::parameter(uniform_init({hidden}, b1, rng));
  h.w2 = ag::parameter(uniform_init({num_classes, hidden}, b2, rng));
  h.b2 = ag::parameter(uniform_init({num_classes}, b2, rng));
  h.tau = ag::parameter(Tensor({levels, feature_dim}));
  return h;
}

ag::Var ClassifierHead::logits(const ag::Var& features, std::span<const int> t) const {
  check_levels(t, levels());
  std::vector<int> idx(t.begin(), t.end());
  for (auto& v : idx) v -= 1;
  auto h = ag::add_rows(features, tau, idx);
  h = ag::silu(ag::linear(h, w1, b1));
  return ag::linear(h, w2, b2);
}

NoiseCondClassifier::NoiseCondClassifier(DDAENetwork net, ClassifierHead head)
    : net_(std::move(net)), head_(std::move(head)) {
  net_.set_requires_grad(false);
  if (head_.feature_dim() != net_.tap_channels(head_.tap))
    throw ContractError("classifier head width does not match tap " + head_.tap.key());
}

TensorArchive NoiseCondClassifier::archive() const {
  TensorArchive a = network_archive(net_);
  a.tensors.emplace_back("head.w1", head_.w1->value);
  a.tensors.emplace_back("head.b1", head_.b1->value);
  a.tensors.emplace_back("head.w2", head_.w2->value);
  a.tensors.emplace_back("head.b2", head_.b2->value);
  a.tensors.emplace_back("head.tau", head_.tau->value);
  a.metadata["classifier_tap"] = head_.tap.key();
  return a;
}

NoiseCondClassifier NoiseCondClassifier::from_archive(const TensorArchive& a) {
  if (!a.metadata.contains("classifier_tap")) throw DataError("archive holds no classifier head");
  ClassifierHead h;
  h.tap = TapId::parse(a.metadata.at("classifier_tap").get<std::string>());
  h.w1 = ag::parameter(a.get("head.w1"));
  h.b1 = ag::parameter(a.get("head.b1"));
  h.w2 = ag::parameter(a.get("head.w2"));
  h.b2 = ag::parameter(a.get("head.b2"));
  h.tau = ag::parameter(a.get("head.tau"));
  return NoiseCondClassifier(network_from_archive(a), std::move(h));
}

NoiseCondClassifier train_noise_cond_classifier(const DDAENetwork& net, const TapId& tap, const ImageBatch& data,
                                                const NoiseSchedule& sched, const ClassifierOpts& opts,
                                                const RecordEmitter& records) {
  if (!data.labeled() || data.num_classes < 2) throw DataError("classifier training needs labeled data");
  if (opts.epochs < 0 || opts.batch_size < 1) throw ParameterError("classifier epochs/batch_size out of range");
  Rng rng(opts.seed);
  const int d = net.tap_channels(tap);
  ClassifierHead head =
      ClassifierHead::init(tap, d, opts.hidden > 0 ? opts.hidden : d, data.num_classes, sched.T, rng);
  NoiseCondClassifier clf(net.clone(), std::move(head));
  const DDAENetwork& frozen = clf.network();
  const int pos = frozen.tap_position(tap);
  const int cap[] = {pos};

  Adam adam(clf.head().params());
  const int n = data.size();
  const long total = static_cast<long>((n + opts.batch_size - 1) / opts.batch_size) * opts.epochs;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    double sum = 0.0;
    for (int b0 = 0; b0 < n; b0 += opts.batch_size) {
      const int b1 = std::min(n, b0 + opts.batch_size);
      std::span<const int> idx(order.data() + b0, static_cast<std::size_t>(b1 - b0));
      const Tensor x0 = augment(data.data.gather_rows(idx), opts.horizontal_flip, false, rng);
      const std::vector<int> t = sample_levels(b1 - b0, sched.T, rng);
      const Tensor x_t = noise(x0, t, rng.normal_like(x0.shape()), sched);
      std::vector<int> labels;
      for (int i : idx) labels.push_back(data.labels[static_cast<std::size_t>(i)]);

      Tensor feats;
      {
        ag::NoGradGuard ng;
        feats = ag::global_avg_pool(frozen.run(ag::constant(x_t), t, cap, pos).taps.at(pos))->value;
      }
      adam.zero_grad();
      auto loss = ag::cross_entropy(clf.head().logits(ag::constant(std::move(feats)), t), labels);
      ag::backward(loss);
      if (!std::isfinite(loss->value[0])) throw NumericalError("non-finite classifier loss in epoch " +
                                                               std::to_string(epoch + 1));
      adam.step(scheduled_lr(opts.lr_schedule, opts.learning_rate, adam.steps_taken(), total));
      sum += loss->value[0] * (b1 - b0);
    }
    records.emit(Phase::metric, "classifier_loss", epoch + 1, sum / n);
  }
  return clf;
}

ClassifyOutput classify_noised(const NoiseCondClassifier& clf, const ag::Var& x_t, std::span<const int> t,
                               bool with_eps) {
  const DDAENetwork& net = clf.network();
  const int pos = net.tap_position(clf.head().tap);
  const int cap[] = {pos};
  auto out = with_eps ? net.run(x_t, t, cap) : net.run(x_t, t, cap, pos);
  ClassifyOutput r;
  r.eps = out.eps;
  r.logits = clf.head().logits(ag::global_avg_pool(out.taps.at(pos)), t);
  r.log_probs = ag::log_softmax(r.logits);
  return r;
}

Tensor log_prob_gradient(const NoiseCondClassifier& clf, const Tensor& x_t, int t, int target, Tensor* eps_out) {
  if (target < 0 || target >= clf.head().num_classes())
    throw ContractError("target label " + std::to_string(target) + " outside the classifier's classes");
  auto x = ag::parameter(x_t);
  std::vector<int> levels(static_cast<std::size_t>(x_t.dim(0)), t);
  std::vector<int> labels(levels.size(), target);
  auto out = classify_noised(clf, x, levels, eps_out != nullptr);
  ag::backward(ag::pick_sum(out.log_probs, labels, 1.0f));
  if (eps_out) *eps_out = out.eps->value;
  return x->grad.numel() ? x->grad : Tensor::zeros_like(x_t);
}

std::vector<double> accuracy_by_level(const NoiseCondClassifier& clf, const ImageBatch& data,
                                      const NoiseSchedule& sched, std::span<const int> ts, Rng& rng) {
  if (!data.labeled() || data.size() == 0) throw DataError("accuracy sweep needs labeled data");
  std::vector<double> acc;
  constexpr int kChunk = 128;
  for (int t : ts) {
    long correct = 0;
    for (int b0 = 0; b0 < data.size(); b0 += kChunk) {
      const int b1 = std::min(data.size(), b0 + kChunk);
      const Tensor x0 = data.data.rows(b0, b1);
      std::vector<int> levels(static_cast<std::size_t>(b1 - b0), t);
      ag::NoGradGuard ng;
      auto out = classify_noised(clf, ag::constant(noise(x0, levels, rng.normal_like(x0.shape()), sched)), levels);
      const Tensor& lg = out.logits->value;
      const int k = lg.dim(1);
      for (int i = 0; i < b1 - b0; ++i) {
        const float* row = lg.data() + static_cast<std::size_t>(i) * k;
        const int pred = static_cast<int>(std::max_element(row, row + k) - row);
        correct += pred == data.labels[static_cast<std::size_t>(b0 + i)];
      }
    }
    acc.push_back(static_cast<double>(correct) / data.size());
  }
  return acc;
}

namespace {
std::vector<double> ranks(std::span<const double> v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return v[static_cast<std::size_t>(a)] < v[static_cast<std::size_t>(b)]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[static_cast<std::size_t>(idx[j + 1])] == v[static_cast<std::size_t>(idx[i])]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[static_cast<std::size_t>(idx[k])] = avg;
    i = j + 1;
  }
  return r;
}
}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ParameterError("spearman needs two equal-length series of length >= 2");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(rx.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace ddae
