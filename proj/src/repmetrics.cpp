#include "ddae/repmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ddae/error.hpp"

namespace ddae {

FeatureFn tap_feature_fn(const DDAENetwork& net, const TapId& tap) {
  net.tap_position(tap);
  return [&net, tap](const Tensor& x, std::span<const int> t) { return pooled_tap_features(net, tap, x, t); };
}

Tensor unit_normalize(const Tensor& f) {
  if (f.ndim() != 2) throw ContractError("unit_normalize expects [N, D], got " + shape_str(f.shape()));
  Tensor out = f;
  const int n = f.dim(0), d = f.dim(1);
  for (int i = 0; i < n; ++i) {
    float* row = out.data() + static_cast<std::size_t>(i) * d;
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += static_cast<double>(row[j]) * row[j];
    if (!(s > 0.0)) throw NumericalError("feature row " + std::to_string(i) + " has zero norm");
    const double inv = 1.0 / std::sqrt(s);
    for (int j = 0; j < d; ++j) row[j] = static_cast<float>(row[j] * inv);
  }
  return out;
}

namespace {

Shape pair_eps_shape(const ImageBatch& images, int n_pairs) {
  Shape s = images.data.shape();
  s[0] = n_pairs;
  return s;
}

void check_pairs(const ImageBatch& images, int n_pairs) {
  if (n_pairs < 1) throw ParameterError("n_pairs must be >= 1");
  if (images.size() == 0) throw DataError("no images to pair");
}

}  // namespace

NoisePairPlan alignment_plan(const ImageBatch& images, int n_pairs, Rng& rng) {
  check_pairs(images, n_pairs);
  NoisePairPlan p;
  for (int i = 0; i < n_pairs; ++i) p.a.push_back(rng.uniform_int(0, images.size() - 1));
  p.b = p.a;
  p.eps_a = rng.normal_like(pair_eps_shape(images, n_pairs));
  p.eps_b = rng.normal_like(pair_eps_shape(images, n_pairs));
  return p;
}

NoisePairPlan uniformity_plan(const ImageBatch& images, int n_pairs, Rng& rng, bool independent_eps) {
  check_pairs(images, n_pairs);
  NoisePairPlan p;
  for (int i = 0; i < n_pairs; ++i) {
    p.a.push_back(rng.uniform_int(0, images.size() - 1));
    p.b.push_back(rng.uniform_int(0, images.size() - 1));
  }
  p.eps_a = rng.normal_like(pair_eps_shape(images, n_pairs));
  p.eps_b = independent_eps ? rng.normal_like(pair_eps_shape(images, n_pairs)) : p.eps_a;
  return p;
}

std::vector<double> pair_sq_distances(const FeatureFn& f, const Tensor& images, int t, const NoiseSchedule& sched,
                                      const NoisePairPlan& plan) {
  const int n = plan.size();
  if (n < 1) throw ParameterError("empty pair plan");
  if (plan.eps_a.dim(0) != n || plan.eps_b.dim(0) != n || static_cast<int>(plan.b.size()) != n)
    throw ContractError("pair plan arrays disagree in length");
  std::vector<int> levels(static_cast<std::size_t>(n), t);
  const Tensor fa = unit_normalize(f(noise(images.gather_rows(plan.a), levels, plan.eps_a, sched), levels));
  const Tensor fb = unit_normalize(f(noise(images.gather_rows(plan.b), levels, plan.eps_b, sched), levels));
  const int d = fa.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      const double diff = static_cast<double>(fa[static_cast<std::size_t>(i) * d + j]) -
                          fb[static_cast<std::size_t>(i) * d + j];
      s += diff * diff;
    }
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

double alignment(const FeatureFn& f, const Tensor& images, int t, const NoiseSchedule& sched,
                 const NoisePairPlan& plan) {
  const auto d = pair_sq_distances(f, images, t, sched, plan);
  double s = 0.0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

double uniformity(const FeatureFn& f, const Tensor& images, int t, const NoiseSchedule& sched,
                  const NoisePairPlan& plan) {
  const auto d = pair_sq_distances(f, images, t, sched, plan);
  double s = 0.0;
  for (double v : d) s += std::exp(-2.0 * v);
  return std::log(s / static_cast<double>(d.size()));
}

double alignment(const FeatureFn& f, const ImageBatch& images, int t, const NoiseSchedule& sched, Rng& rng,
                 int n_pairs) {
  return alignment(f, images.data, t, sched, alignment_plan(images, n_pairs, rng));
}

double uniformity(const FeatureFn& f, const ImageBatch& images, int t, const NoiseSchedule& sched, Rng& rng,
                  int n_pairs, bool independent_eps) {
  return uniformity(f, images.data, t, sched, uniformity_plan(images, n_pairs, rng, independent_eps));
}

// ----------------------------------------------------------- Frechet ----

GaussianSummary gaussian_summary(const Tensor& features) {
  if (features.ndim() != 2) throw ContractError("gaussian_summary expects [N, D], got " + shape_str(features.shape()));
  const int n = features.dim(0), d = features.dim(1);
  if (n < 2) throw ParameterError("gaussian_summary needs at least 2 rows, got " + std::to_string(n));
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = features[static_cast<std::size_t>(i) * d + j];
  GaussianSummary s;
  s.mean = x.colwise().mean().transpose();
  x.rowwise() -= s.mean.transpose();
  s.covariance = (x.transpose() * x) / static_cast<double>(n - 1);
  s.covariance = 0.5 * (s.covariance + s.covariance.transpose());
  return s;
}

namespace {

constexpr double kEigTolerance = 1e-6;

Eigen::VectorXd clipped_eigenvalues(const Eigen::VectorXd& ev, const char* what) {
  const double lo = ev.size() ? ev.minCoeff() : 0.0;
  if (lo < -kEigTolerance) {
    std::ostringstream os;
    os << what << " is not positive semidefinite: minimum eigenvalue " << lo;
    throw NumericalError(os.str());
  }
  return ev.cwiseMax(0.0);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericalError(std::string("eigendecomposition failed for ") + what);
  const Eigen::VectorXd ev = clipped_eigenvalues(es.eigenvalues(), what);
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.dim() != b.dim()) throw ContractError("summaries differ in dimension");
  if (a.covariance.rows() != a.dim() || b.covariance.rows() != b.dim())
    throw ContractError("covariance shape does not match mean");
  const Eigen::MatrixXd ra = psd_sqrt(a.covariance, "first covariance");
  Eigen::MatrixXd m = ra * b.covariance * ra;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed for covariance product");
  const Eigen::VectorXd ev = clipped_eigenvalues(es.eigenvalues(), "covariance product");
  clipped_eigenvalues(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(b.covariance, Eigen::EigenvaluesOnly).eigenvalues(),
                      "second covariance");
  const double dist =
      (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * ev.cwiseSqrt().sum();
  return std::max(0.0, dist);
}

TensorArchive summary_archive(const GaussianSummary& s) {
  const int d = s.dim();
  Tensor mean({d}), cov({d, d});
  for (int i = 0; i < d; ++i) {
    mean[static_cast<std::size_t>(i)] = static_cast<float>(s.mean(i));
    for (int j = 0; j < d; ++j) cov[static_cast<std::size_t>(i) * d + j] = static_cast<float>(s.covariance(i, j));
  }
  TensorArchive a;
  a.tensors.emplace_back("mean", std::move(mean));
  a.tensors.emplace_back("covariance", std::move(cov));
  return a;
}

GaussianSummary summary_from_archive(const TensorArchive& a) {
  const Tensor& mean = a.get("mean");
  const Tensor& cov = a.get("covariance");
  const int d = static_cast<int>(mean.numel());
  if (cov.numel() != static_cast<std::size_t>(d) * d) throw DataError("covariance size does not match mean");
  GaussianSummary s;
  s.mean.resize(d);
  s.covariance.resize(d, d);
  for (int i = 0; i < d; ++i) {
    s.mean(i) = mean[static_cast<std::size_t>(i)];
    for (int j = 0; j < d; ++j) s.covariance(i, j) = cov[static_cast<std::size_t>(i) * d + j];
  }
  return s;
}

// ---------------------------------------------------------- embedders ----

namespace {
Tensor flatten(const Tensor& images) {
  const int n = images.dim(0);
  return images.reshaped({n, static_cast<int>(images.numel() / std::max(1, n))});
}
}  // namespace

Embedder identity_embedder() {
  return [](const Tensor& images) { return flatten(images); };
}

Tensor PcaProjection::apply(const Tensor& images) const {
  const Tensor x = flatten(images);
  const int n = x.dim(0), d = x.dim(1), k = components.dim(0);
  if (d != components.dim(1)) throw ContractError("PCA fitted on a different input size");
  Tensor out({n, k});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c) {
      double s = 0.0;
      for (int j = 0; j < d; ++j)
        s += (static_cast<double>(x[static_cast<std::size_t>(i) * d + j]) - mean[static_cast<std::size_t>(j)]) *
             components[static_cast<std::size_t>(c) * d + j];
      out[static_cast<std::size_t>(i) * k + c] = static_cast<float>(s);
    }
  return out;
}

PcaProjection fit_pca(const Tensor& images, int k) {
  const Tensor x = flatten(images);
  const int n = x.dim(0), d = x.dim(1);
  if (n < 2) throw ParameterError("PCA needs at least 2 images");
  if (k < 1) throw ParameterError("PCA component count must be positive");
  k = std::min({k, d, n - 1});
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = x[static_cast<std::size_t>(i) * d + j];
  const Eigen::VectorXd mu = m.colwise().mean().transpose();
  m.rowwise() -= mu.transpose();

  Eigen::MatrixXd dirs(d, k);
  if (n < d) {
    // Eigenvectors of the Gram matrix map to principal directions through X^T.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m * m.transpose());
    for (int c = 0; c < k; ++c) {
      Eigen::VectorXd v = m.transpose() * es.eigenvectors().col(n - 1 - c);
      const double norm = v.norm();
      dirs.col(c) = norm > 0 ? Eigen::VectorXd(v / norm) : Eigen::VectorXd::Zero(d);
    }
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m);
    for (int c = 0; c < k; ++c) dirs.col(c) = es.eigenvectors().col(d - 1 - c);
  }
  PcaProjection p;
  p.mean = Tensor({d});
  p.components = Tensor({k, d});
  for (int j = 0; j < d; ++j) p.mean[static_cast<std::size_t>(j)] = static_cast<float>(mu(j));
  for (int c = 0; c < k; ++c)
    for (int j = 0; j < d; ++j) p.components[static_cast<std::size_t>(c) * d + j] = static_cast<float>(dirs(j, c));
  return p;
}

Embedder pca_embedder(PcaProjection pca) {
  return [p = std::move(pca)](const Tensor& images) { return p.apply(images); };
}

Embedder encoder_embedder(std::shared_ptr<const Encoder> encoder) {
  return [enc = std::move(encoder)](const Tensor& images) {
    std::vector<int> t(static_cast<std::size_t>(images.dim(0)), enc->t_fixed());
    return pooled_tap_features(enc->network(), enc->tap(), images, t);
  };
}

double fid(const Embedder& embed, const Tensor& real, const Tensor& generated) {
  if (real.empty() || generated.empty()) throw DataError("fid needs nonempty image sets");
  return frechet_distance(gaussian_summary(embed(real)), gaussian_summary(embed(generated)));
}

}  // namespace ddae
