#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ddae/backbone.hpp"
#include "ddae/checkpoint.hpp"
#include "ddae/corruption.hpp"
#include "ddae/image_batch.hpp"
#include "ddae/optim.hpp"
#include "ddae/records.hpp"
#include "ddae/rng.hpp"

namespace ddae {

// Pooled features [N, D] of noised images at per-item levels.
using FeatureFn = std::function<Tensor(const Tensor& x_t, std::span<const int> t)>;

// Features at a network tap, evaluated in chunks.
FeatureFn tap_feature_fn(const DDAENetwork& net, const TapId& tap);

// Row-wise projection onto the unit sphere; throws NumericalError on a zero row.
Tensor unit_normalize(const Tensor& features);

// Explicit pairs of noised inputs: pair p compares image a[p] noised with
// eps_a[p] against image b[p] noised with eps_b[p]. eps tensors are [P, C, H, W].
struct NoisePairPlan {
  std::vector<int> a, b;
  Tensor eps_a, eps_b;
  int size() const { return static_cast<int>(a.size()); }
};

// Same image, two independent noise draws per pair.
NoisePairPlan alignment_plan(const ImageBatch& images, int n_pairs, Rng& rng);
// Ordered image pairs drawn with replacement (self-pairs included). One noise
// draw is shared inside a pair unless `independent_eps`.
NoisePairPlan uniformity_plan(const ImageBatch& images, int n_pairs, Rng& rng, bool independent_eps = false);

// Squared distances between unit-normalized features of each pair.
std::vector<double> pair_sq_distances(const FeatureFn& f, const Tensor& images, int t, const NoiseSchedule& sched,
                                      const NoisePairPlan& plan);

// Mean squared distance of positive pairs, in [0, 4].
double alignment(const FeatureFn& f, const Tensor& images, int t, const NoiseSchedule& sched,
                 const NoisePairPlan& plan);
// log E exp(-2 d^2), in [-8, 0].
double uniformity(const FeatureFn& f, const Tensor& images, int t, const NoiseSchedule& sched,
                  const NoisePairPlan& plan);

double alignment(const FeatureFn& f, const ImageBatch& images, int t, const NoiseSchedule& sched, Rng& rng,
                 int n_pairs);
double uniformity(const FeatureFn& f, const ImageBatch& images, int t, const NoiseSchedule& sched, Rng& rng,
                  int n_pairs, bool independent_eps = false);

// ----------------------------------------------------------- Frechet ----

struct GaussianSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  int dim() const { return static_cast<int>(mean.size()); }
};

// Sample mean and unbiased covariance of the rows of [N, D], N >= 2.
GaussianSummary gaussian_summary(const Tensor& features);

// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2). Eigenvalues down to
// -1e-6 are clipped to zero; anything lower raises NumericalError.
double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);

TensorArchive summary_archive(const GaussianSummary& s);
GaussianSummary summary_from_archive(const TensorArchive& a);

// Images [N, C, H, W] -> embeddings [N, D]. Must be deterministic.
using Embedder = std::function<Tensor(const Tensor& images)>;

// Flattened pixels.
Embedder identity_embedder();

struct PcaProjection {
  Tensor mean;        // [D]
  Tensor components;  // [K, D], orthonormal rows
  Tensor apply(const Tensor& images) const;
};
// Top-k principal directions of the flattened images.
PcaProjection fit_pca(const Tensor& images, int k);
Embedder pca_embedder(PcaProjection pca);
// Pooled encoder features at the encoder's fixed level.
Embedder encoder_embedder(std::shared_ptr<const Encoder> encoder);

double fid(const Embedder& embed, const Tensor& real, const Tensor& generated);

// ------------------------------------------------ noise-conditional head ----

// logits = W2 silu(W1 (f + tau[t]) + b1) + b2, with tau a learned [T, D] table.
struct ClassifierHead {
  TapId tap;
  ag::Var w1, b1, w2, b2, tau;

  int feature_dim() const { return w1->value.dim(1); }
  int num_classes() const { return w2->value.dim(0); }
  int levels() const { return tau->value.dim(0); }
  std::vector<ag::Var> params() const { return {w1, b1, w2, b2, tau}; }

  static ClassifierHead init(const TapId& tap, int feature_dim, int hidden, int num_classes, int levels, Rng& rng);
  ag::Var logits(const ag::Var& features, std::span<const int> t) const;
};

// A frozen copy of the backbone plus a head reading one of its taps.
class NoiseCondClassifier {
 public:
  NoiseCondClassifier(DDAENetwork net, ClassifierHead head);

  const DDAENetwork& network() const noexcept { return net_; }
  const ClassifierHead& head() const noexcept { return head_; }
  ClassifierHead& head() noexcept { return head_; }

  TensorArchive archive() const;
  static NoiseCondClassifier from_archive(const TensorArchive& a);

 private:
  DDAENetwork net_;
  ClassifierHead head_;
};

struct ClassifierOpts {
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::cosine;
  int hidden = 0;  // 0: feature dimension
  bool horizontal_flip = true;
  std::uint64_t seed = 0;
};

// Trains a head on f_t(x_t) + tau(t) with t uniform over the schedule. The
// source network is copied and never modified.
NoiseCondClassifier train_noise_cond_classifier(const DDAENetwork& net, const TapId& tap, const ImageBatch& data,
                                                const NoiseSchedule& sched, const ClassifierOpts& opts,
                                                const RecordEmitter& records = {});

struct ClassifyOutput {
  ag::Var eps;        // null unless requested
  ag::Var logits;     // [N, K]
  ag::Var log_probs;  // [N, K]
};

// One backbone pass giving log p_t(y | x_t) and, when `with_eps`, the noise
// prediction from the same pass. Differentiable w.r.t. x_t.
ClassifyOutput classify_noised(const NoiseCondClassifier& clf, const ag::Var& x_t, std::span<const int> t,
                               bool with_eps = false);

// Gradient of sum_n log p_t(target | x_t[n]) w.r.t. x_t. When `eps_out` is
// given it receives the noise prediction of the same pass.
Tensor log_prob_gradient(const NoiseCondClassifier& clf, const Tensor& x_t, int t, int target, Tensor* eps_out = nullptr);

// Accuracy of the classifier on `data` noised at each level in `ts`.
std::vector<double> accuracy_by_level(const NoiseCondClassifier& clf, const ImageBatch& data,
                                      const NoiseSchedule& sched, std::span<const int> ts, Rng& rng);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace ddae
