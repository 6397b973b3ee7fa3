#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <vector>

#include "sentinel/errors.hpp"
#include "sentinel/types.hpp"

namespace sentinel {

// Distances between sets of overlap vectors. All functions are pure and
// accumulate in a fixed order, so results are bit-reproducible across runs.

enum class DistanceKind { mmd_rbf, kl_forward_kde, kl_reverse_kde, nondist_min };
enum class BandwidthRule { median_heuristic, max_eig_cov, fixed };

struct DistanceConfig {
  DistanceKind kind = DistanceKind::mmd_rbf;
  BandwidthRule bandwidth_rule = BandwidthRule::median_heuristic;
  double fixed_bandwidth = 0.0;      // required > 0 when bandwidth_rule == fixed
  double log_density_floor = 1e-300; // density floor inside the KDE log

  void validate() const {
    if (bandwidth_rule == BandwidthRule::fixed && !(fixed_bandwidth > 0.0))
      throw PreconditionError("fixed bandwidth rule requires a positive bandwidth");
    if (!(log_density_floor > 0.0))
      throw PreconditionError("log density floor must be positive");
  }
};

namespace detail {

inline void require_uniform_dim(const VectorSet& set, Eigen::Index dim, const char* what) {
  for (const Vector& v : set)
    if (v.size() != dim) throw PreconditionError(std::string(what) + ": dimension mismatch");
}

}  // namespace detail

/// Median of the n(n-1)/2 pairwise squared L2 distances, with 1.0 as the
/// fallback for degenerate all-equal inputs. Squared distances (not
/// distances) are what the RBF exponent consumes directly; for an even pair
/// count the upper median is taken.
inline double median_heuristic_bandwidth(const VectorSet& samples) {
  if (samples.size() < 2)
    throw PreconditionError("median heuristic needs at least two samples");
  detail::require_uniform_dim(samples, samples.front().size(), "median heuristic");
  std::vector<double> sq_dists;
  sq_dists.reserve(samples.size() * (samples.size() - 1) / 2);
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j)
      sq_dists.push_back((samples[i] - samples[j]).squaredNorm());
  auto mid = sq_dists.begin() + static_cast<std::ptrdiff_t>(sq_dists.size() / 2);
  std::nth_element(sq_dists.begin(), mid, sq_dists.end());
  return *mid > 0.0 ? *mid : 1.0;
}

/// Square root of the largest eigenvalue of the unbiased sample covariance of
/// the pooled set, with 1.0 as the fallback for (near-)constant inputs.
inline double max_eig_bandwidth(const VectorSet& x, const VectorSet& y) {
  const std::size_t n = x.size() + y.size();
  if (n < 2) throw PreconditionError("max-eigenvalue bandwidth needs at least two pooled samples");
  const Eigen::Index dim = (x.empty() ? y : x).front().size();
  detail::require_uniform_dim(x, dim, "max-eigenvalue bandwidth");
  detail::require_uniform_dim(y, dim, "max-eigenvalue bandwidth");

  Vector mean = Vector::Zero(dim);
  for (const Vector& v : x) mean += v;
  for (const Vector& v : y) mean += v;
  mean /= static_cast<double>(n);

  Matrix cov = Matrix::Zero(dim, dim);
  for (const Vector& v : x) cov.noalias() += (v - mean) * (v - mean).transpose();
  for (const Vector& v : y) cov.noalias() += (v - mean) * (v - mean).transpose();
  cov /= static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov, Eigen::EigenvaluesOnly);
  const double largest = solver.eigenvalues().maxCoeff();
  return largest > 1e-12 ? std::sqrt(largest) : 1.0;
}

/// exp(-||a-b||^2 / beta); 1 iff the inputs are equal.
inline double rbf_kernel(const Vector& a, const Vector& b, double beta) {
  if (a.size() != b.size()) throw PreconditionError("rbf kernel: dimension mismatch");
  if (!(beta > 0.0)) throw PreconditionError("rbf kernel: bandwidth must be positive");
  return std::exp(-(a - b).squaredNorm() / beta);
}

/// Squared maximum mean discrepancy between two sample sets, as the biased
/// V-statistic: all three kernel means include the diagonal terms. This form
/// is a squared RKHS norm and therefore never negative, which the cumulative
/// monitor relies on. All three double sums run in the same row-major order
/// so that mmd_squared(x, x) is exactly zero.
inline double mmd_squared(const VectorSet& x, const VectorSet& y, double beta) {
  if (x.empty() || y.empty()) throw PreconditionError("mmd: empty sample set");
  const Eigen::Index dim = x.front().size();
  detail::require_uniform_dim(x, dim, "mmd");
  detail::require_uniform_dim(y, dim, "mmd");

  double xx = 0.0;
  for (const Vector& a : x)
    for (const Vector& b : x) xx += rbf_kernel(a, b, beta);
  xx /= static_cast<double>(x.size()) * static_cast<double>(x.size());

  double yy = 0.0;
  for (const Vector& a : y)
    for (const Vector& b : y) yy += rbf_kernel(a, b, beta);
  yy /= static_cast<double>(y.size()) * static_cast<double>(y.size());

  double xy = 0.0;
  for (const Vector& a : x)
    for (const Vector& b : y) xy += rbf_kernel(a, b, beta);
  xy /= static_cast<double>(x.size()) * static_cast<double>(y.size());

  return std::max(0.0, xx + yy - 2.0 * xy);
}

/// Log of the Gaussian-RBF kernel density estimate at `point`, floored so the
/// result stays finite arbitrarily far from the samples. The isotropic
/// normalizer (pi * beta)^(dim/2) makes the density integrate to one.
inline double kde_log_density(const Vector& point, const VectorSet& samples, double beta,
                              double floor) {
  if (samples.empty()) throw PreconditionError("kde: empty sample set");
  if (!(beta > 0.0)) throw PreconditionError("kde: bandwidth must be positive");
  if (!(floor > 0.0)) throw PreconditionError("kde: floor must be positive");
  const Eigen::Index dim = samples.front().size();
  if (point.size() != dim) throw PreconditionError("kde: dimension mismatch");
  detail::require_uniform_dim(samples, dim, "kde");

  double sum = 0.0;
  for (const Vector& s : samples) sum += std::exp(-(point - s).squaredNorm() / beta);
  const double normalizer =
      std::pow(EIGEN_PI * beta, static_cast<double>(dim) / 2.0) * static_cast<double>(samples.size());
  return std::log(std::max(floor, sum / normalizer));
}

/// KL divergence estimate between the KDEs of two consecutive overlap sets,
/// evaluated on the later set's own samples. Density ratios use the later
/// batch as numerator. The raw estimate can come out negative on finite
/// samples; it is clamped at zero so cumulative scores stay monotone.
inline double kl_forward(const VectorSet& earlier, const VectorSet& later, double beta,
                         double floor) {
  if (earlier.empty() || later.empty()) throw PreconditionError("kl: empty sample set");
  const Eigen::Index dim = earlier.front().size();
  detail::require_uniform_dim(earlier, dim, "kl");
  detail::require_uniform_dim(later, dim, "kl");
  double sum = 0.0;
  for (const Vector& v : later)
    sum += kde_log_density(v, later, beta, floor) - kde_log_density(v, earlier, beta, floor);
  return std::max(0.0, sum / static_cast<double>(later.size()));
}

/// As kl_forward with the two roles swapped: the expectation runs over the
/// earlier batch and its KDE is the numerator.
inline double kl_reverse(const VectorSet& earlier, const VectorSet& later, double beta,
                         double floor) {
  if (earlier.empty() || later.empty()) throw PreconditionError("kl: empty sample set");
  const Eigen::Index dim = earlier.front().size();
  detail::require_uniform_dim(earlier, dim, "kl");
  detail::require_uniform_dim(later, dim, "kl");
  double sum = 0.0;
  for (const Vector& v : earlier)
    sum += kde_log_density(v, earlier, beta, floor) - kde_log_density(v, later, beta, floor);
  return std::max(0.0, sum / static_cast<double>(earlier.size()));
}

/// Smallest L2 distance from `reference` to any vector of the batch. The
/// non-statistical consistency score: zero whenever the batch reproduces the
/// reference exactly, blind to how the rest of the batch is distributed.
inline double nondist_min(const Vector& reference, const VectorSet& batch) {
  if (batch.empty()) throw PreconditionError("nondist_min: empty sample set");
  double best = std::numeric_limits<double>::infinity();
  for (const Vector& v : batch) {
    if (v.size() != reference.size())
      throw PreconditionError("nondist_min: dimension mismatch");
    best = std::min(best, (reference - v).norm());
  }
  return best;
}

/// Resolves the bandwidth for one pair of overlap sets. The median heuristic
/// pools both sets; resolving per call keeps calibration and test symmetric.
inline double resolve_bandwidth(const DistanceConfig& cfg, const VectorSet& x,
                                const VectorSet& y) {
  switch (cfg.bandwidth_rule) {
    case BandwidthRule::fixed:
      if (!(cfg.fixed_bandwidth > 0.0))
        throw PreconditionError("fixed bandwidth rule requires a positive bandwidth");
      return cfg.fixed_bandwidth;
    case BandwidthRule::max_eig_cov:
      return max_eig_bandwidth(x, y);
    case BandwidthRule::median_heuristic: {
      VectorSet pooled;
      pooled.reserve(x.size() + y.size());
      pooled.insert(pooled.end(), x.begin(), x.end());
      pooled.insert(pooled.end(), y.begin(), y.end());
      return median_heuristic_bandwidth(pooled);
    }
  }
  throw PreconditionError("unknown bandwidth rule");
}

}  // namespace sentinel
