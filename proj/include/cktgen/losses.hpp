#pragma once

#include <array>
#include <vector>

#include "cktgen/autograd.hpp"
#include "cktgen/dataset.hpp"
#include "cktgen/encoders.hpp"
#include "cktgen/nn.hpp"

namespace cktgen {

struct LossWeights {
  double lambda_kl = 1e-5;
  double tau = 0.1;
  double lambda_t = 0.5;
  double lambda_p = 0.05;
  double lambda_b = 0.01;

  void check() const {
    if (!(tau > 0.0)) throw ArgumentError("tau must be positive");
    if (lambda_kl < 0.0 || lambda_t < 0.0 || lambda_p < 0.0 || lambda_b < 0.0)
      throw ArgumentError("loss weights must be non-negative");
  }
};

enum class Reduction { Mean, Sum };

// ---------------------------------------------------------------- KL terms

// Row-wise KL(N(mu_a, e^lv_a) || N(mu_b, e^lv_b)) summed over dimensions: B x 1.
inline Var kl_diag(const Var& mu_a, const Var& lv_a, const Var& mu_b, const Var& lv_b) {
  ag::detail::check_same_shape(mu_a, mu_b, "kl_diag");
  ag::detail::check_same_shape(lv_a, lv_b, "kl_diag");
  ag::detail::check_same_shape(mu_a, lv_a, "kl_diag");
  const Var log_ratio = ag::scale(lv_b - lv_a, 0.5);
  const Var spread = ag::scale(ag::mul(ag::exp(lv_a) + ag::square(mu_a - mu_b), ag::exp(ag::scale(lv_b, -1.0))), 0.5);
  return ag::sum_rows(ag::add_scalar(log_ratio + spread, -0.5));
}

inline Var kl_diag(const LatentBatch& a, const LatentBatch& b) { return kl_diag(a.mu, a.logvar, b.mu, b.logvar); }

inline LatentBatch standard_normal_like(const LatentBatch& g) {
  return {Var(Matrix::Zero(g.mu.rows(), g.mu.cols())), Var(Matrix::Zero(g.mu.rows(), g.mu.cols()))};
}

inline double kl_diag(const LatentGaussian& a, const LatentGaussian& b) {
  if (a.mu.size() != b.mu.size() || a.logvar.size() != a.mu.size() || b.logvar.size() != b.mu.size())
    throw ArgumentError("kl_diag: dimension mismatch");
  const auto row = [](const Eigen::VectorXd& v) { return Var(Matrix(v.transpose())); };
  return kl_diag(row(a.mu), row(a.logvar), row(b.mu), row(b.logvar)).item();
}

// KL(c, N) + KL(s, N) + KL(c, s) + KL(s, c), averaged over the batch.
inline Var kl_total(const LatentBatch& c, const LatentBatch& s) {
  const LatentBatch prior = standard_normal_like(c);
  const Var per_row = kl_diag(c, prior) + kl_diag(s, prior) + kl_diag(c, s) + kl_diag(s, c);
  return ag::mean(per_row);
}

inline double kl_total(const LatentGaussian& c, const LatentGaussian& s) {
  const LatentGaussian prior{Eigen::VectorXd::Zero(c.mu.size()), Eigen::VectorXd::Zero(c.mu.size())};
  return kl_diag(c, prior) + kl_diag(s, prior) + kl_diag(c, s) + kl_diag(s, c);
}

// KL(g, N(0, I)) averaged over the batch; the single-modality prior term.
inline Var kl_to_prior(const LatentBatch& g) { return ag::mean(kl_diag(g, standard_normal_like(g))); }

// ---------------------------------------------------------------- consistency

// Smooth-L1 between paired latents, transition point beta.
inline Var consistency_loss(const Var& zc, const Var& zs, Reduction reduction = Reduction::Mean, double beta = 1.0) {
  ag::detail::check_same_shape(zc, zs, "consistency_loss");
  const Var e = ag::smooth_l1(zc - zs, beta);
  return reduction == Reduction::Mean ? ag::mean(e) : ag::scale(ag::sum(e), 1.0 / static_cast<double>(zc.rows()));
}

inline double consistency_loss(const Eigen::VectorXd& zc, const Eigen::VectorXd& zs,
                               Reduction reduction = Reduction::Mean, double beta = 1.0) {
  if (zc.size() != zs.size()) throw ArgumentError("consistency_loss: length mismatch");
  return consistency_loss(Var(Matrix(zc.transpose())), Var(Matrix(zs.transpose())), reduction, beta).item();
}

// ---------------------------------------------------------------- contrastive

// Symmetric InfoNCE over cosine similarities R_ij = cos(zs_i, zc_j) / tau.
// Entries with mask == false leave both softmax denominators.
inline Var infonce(const Var& zs, const Var& zc, const Mask* mask, double tau) {
  ag::detail::check_same_shape(zs, zc, "infonce");
  if (!(tau > 0.0)) throw ArgumentError("infonce: tau must be positive");
  const Index m = zs.rows();
  if (m < 1) throw ArgumentError("infonce: empty batch");
  if (mask) {
    if (mask->rows() != m || mask->cols() != m) throw ArgumentError("infonce: mask shape");
    for (Index i = 0; i < m; ++i)
      if (!(*mask)(i, i)) throw ArgumentError("infonce: mask diagonal must be true");
  }
  const Var r = ag::scale(ag::matmul(ag::normalize_rows(zs), ag::transpose(ag::normalize_rows(zc))), 1.0 / tau);
  const Mask mt = mask ? Mask(mask->transpose()) : Mask();
  const Var rows = ag::log_softmax_rows(r, mask);
  const Var cols = ag::log_softmax_rows(ag::transpose(r), mask ? &mt : nullptr);
  return ag::scale(ag::sum(ag::diagonal(rows)) + ag::sum(ag::diagonal(cols)), -1.0 / (2.0 * static_cast<double>(m)));
}

inline double infonce(const Matrix& zs, const Matrix& zc, const Mask* mask, double tau) {
  return infonce(Var(zs), Var(zc), mask, tau).item();
}

// ---------------------------------------------------------------- guidance

struct SpecLogits {
  Var gain, bw, pm;
};

// f_Gain, f_BW, f_PM: circuit latent -> per-element category logits.
class ClassifierHeads {
 public:
  ClassifierHeads() = default;
  ClassifierHeads(const ModelConfig& cfg, const DatasetProfile& profile, Rng& rng)
      : gain_(cfg.latent_dim, cfg.embed_dim, profile.categories[0], rng),
        bw_(cfg.latent_dim, cfg.embed_dim, profile.categories[1], rng),
        pm_(cfg.latent_dim, cfg.embed_dim, profile.categories[2], rng) {}

  SpecLogits operator()(const Var& z) const { return {gain_(z), bw_(z), pm_(z)}; }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    gain_.collect(prefix + ".gain", out);
    bw_.collect(prefix + ".bw", out);
    pm_.collect(prefix + ".pm", out);
  }

  nn::Mlp& gain() { return gain_; }
  nn::Mlp& bw() { return bw_; }
  nn::Mlp& pm() { return pm_; }

 private:
  nn::Mlp gain_, bw_, pm_;
};

// Sum of the three batch-mean cross-entropies.
inline Var classifier_guidance(const SpecLogits& logits, const std::vector<BinnedSpecification>& targets) {
  const auto m = targets.size();
  if (static_cast<Index>(m) != logits.gain.rows()) throw ArgumentError("classifier_guidance: batch size mismatch");
  std::vector<int> g, b, p;
  for (const auto& t : targets) {
    g.push_back(t.gain);
    b.push_back(t.bw);
    p.push_back(t.pm);
  }
  const std::vector<double> w(m, 1.0 / static_cast<double>(m));
  return ag::weighted_cross_entropy(logits.gain, g, w) + ag::weighted_cross_entropy(logits.bw, b, w) +
         ag::weighted_cross_entropy(logits.pm, p, w);
}

inline Var classifier_guidance(const Var& zc, const ClassifierHeads& heads,
                               const std::vector<BinnedSpecification>& targets) {
  return classifier_guidance(heads(zc), targets);
}

}  // namespace cktgen
