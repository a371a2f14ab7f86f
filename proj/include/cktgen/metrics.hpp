#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "cktgen/dataset.hpp"
#include "cktgen/error.hpp"
#include "cktgen/rng.hpp"

namespace cktgen {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace detail {

inline MatrixXd unit_rows(const MatrixXd& x, const char* what) {
  MatrixXd out = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError(std::string(what) + ": zero-norm or non-finite latent row");
    out.row(i) /= n;
  }
  return out;
}

}  // namespace detail

// For every query row i, the 1-based rank of candidate i among all candidates
// by cosine similarity. Candidates with equal similarity are ordered by index.
inline std::vector<int> retrieval_ranks(const MatrixXd& queries, const MatrixXd& candidates) {
  if (queries.rows() != candidates.rows() || queries.cols() != candidates.cols())
    throw ArgumentError("retrieval: latent matrices must have the same shape");
  const MatrixXd sim = detail::unit_rows(queries, "retrieval") * detail::unit_rows(candidates, "retrieval").transpose();
  std::vector<int> ranks;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    int rank = 1;
    for (Eigen::Index j = 0; j < sim.cols(); ++j)
      if (j != i && (sim(i, j) > sim(i, i) || (sim(i, j) == sim(i, i) && j < i))) ++rank;
    ranks.push_back(rank);
  }
  return ranks;
}

// R@k for each k: fraction of rows whose paired candidate ranks within the top k.
inline std::vector<double> retrieval_precision(const MatrixXd& gen_latents, const MatrixXd& spec_latents,
                                               const std::vector<int>& ks = {1, 2, 3}) {
  const auto ranks = retrieval_ranks(gen_latents, spec_latents);
  if (ranks.empty()) throw ArgumentError("retrieval: no rows");
  std::vector<double> out;
  for (int k : ks) {
    if (k < 1) throw ArgumentError("retrieval: k must be positive");
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](int r) { return r <= k; });
    out.push_back(static_cast<double>(hits) / static_cast<double>(ranks.size()));
  }
  return out;
}

// Fraction of samples whose three predicted categories all equal the target.
inline double specification_accuracy(const std::vector<BinnedSpecification>& predicted,
                                     const std::vector<BinnedSpecification>& targets) {
  if (predicted.size() != targets.size()) throw ArgumentError("specification_accuracy: size mismatch");
  if (predicted.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == targets[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

// Mean of 1 - cos over paired rows; 0 is best, 2 is antipodal.
inline double mm_distance(const MatrixXd& gen_latents, const MatrixXd& spec_latents) {
  if (gen_latents.rows() != spec_latents.rows() || gen_latents.cols() != spec_latents.cols())
    throw ArgumentError("mm_distance: latent matrices must have the same shape");
  if (gen_latents.rows() == 0) throw ArgumentError("mm_distance: no rows");
  const MatrixXd a = detail::unit_rows(gen_latents, "mm_distance");
  const MatrixXd b = detail::unit_rows(spec_latents, "mm_distance");
  return (1.0 - a.cwiseProduct(b).rowwise().sum().array()).mean();
}

namespace detail {

inline void mean_cov(const MatrixXd& x, VectorXd& mean, MatrixXd& cov) {
  mean = x.colwise().mean().transpose();
  const MatrixXd centered = x.rowwise() - mean.transpose();
  cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

inline MatrixXd sqrt_psd(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(0.5 * (m + m.transpose()));
  const VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

// Frechet distance between Gaussian fits of two latent sets. A shrinkage of
// eps * I is added to both covariances when either set has at most d samples.
// tr((Ca Cb)^1/2) is evaluated as tr((Ca^1/2 Cb Ca^1/2)^1/2), which shares its
// eigenvalues and stays symmetric.
inline double fid_latent(const MatrixXd& a, const MatrixXd& b, double eps = 1e-6) {
  if (a.rows() < 2 || b.rows() < 2) throw ArgumentError("fid_latent: need at least two samples per set");
  if (a.cols() != b.cols()) throw ArgumentError("fid_latent: dimension mismatch");
  VectorXd ma, mb;
  MatrixXd ca, cb;
  detail::mean_cov(a, ma, ca);
  detail::mean_cov(b, mb, cb);
  if (a.rows() <= a.cols() || b.rows() <= b.cols()) {
    ca.diagonal().array() += eps;
    cb.diagonal().array() += eps;
  }
  const MatrixXd ra = detail::sqrt_psd(ca);
  const MatrixXd cross = detail::sqrt_psd(ra * cb * ra);
  const double d = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * cross.trace();
  return std::max(0.0, d);
}

// Mean L2 distance over n_pairs latent pairs drawn uniformly from pairs whose
// groups differ. `groups[i]` labels row i.
inline double diversity(const MatrixXd& latents, const std::vector<int>& groups, int n_pairs, std::uint64_t seed) {
  if (static_cast<Eigen::Index>(groups.size()) != latents.rows()) throw ArgumentError("diversity: one group per row");
  if (n_pairs < 1) throw ArgumentError("diversity: n_pairs must be positive");
  std::map<int, std::vector<Eigen::Index>> by_group;
  for (std::size_t i = 0; i < groups.size(); ++i) by_group[groups[i]].push_back(static_cast<Eigen::Index>(i));
  if (by_group.size() < 2) throw ArgumentError("diversity: need at least two specification types");
  const auto n = static_cast<std::uint64_t>(latents.rows());
  Rng rng(seed);
  double sum = 0.0;
  for (int k = 0; k < n_pairs; ++k) {
    Eigen::Index i, j;
    do {
      i = static_cast<Eigen::Index>(rng.below(n));
      j = static_cast<Eigen::Index>(rng.below(n));
    } while (groups[static_cast<std::size_t>(i)] == groups[static_cast<std::size_t>(j)]);
    sum += (latents.row(i) - latents.row(j)).norm();
  }
  return sum / n_pairs;
}

}  // namespace cktgen
