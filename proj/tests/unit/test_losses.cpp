#include <gtest/gtest.h>

#include "cktgen/losses.hpp"
#include "support/oracles.hpp"

using namespace cktgen;

namespace {

const DatasetProfile& p101() {
  static const DatasetProfile p = profile_ckt_bench_101();
  return p;
}

LatentGaussian gaussian(Index d, Rng& rng) {
  LatentGaussian g{Eigen::VectorXd(d), Eigen::VectorXd(d)};
  for (Index k = 0; k < d; ++k) {
    g.mu(k) = rng.normal();
    g.logvar(k) = rng.uniform(-1.5, 1.5);
  }
  return g;
}

std::vector<std::vector<bool>> to_nested(const Mask& m) {
  std::vector<std::vector<bool>> out(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)].push_back(m(i, j));
  return out;
}

}  // namespace

TEST(Kl, SelfIsZero) {
  Rng rng(1);
  const auto g = gaussian(8, rng);
  EXPECT_NEAR(kl_diag(g, g), 0.0, 1e-14);
}

TEST(Kl, MatchesOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = gaussian(6, rng), b = gaussian(6, rng);
    const double got = kl_diag(a, b);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(oracle::relative_error(got, oracle::kl_diag(a.mu, a.logvar, b.mu, b.logvar)), 1e-10);
    EXPECT_LE(oracle::relative_error(kl_total(a, b), oracle::kl_total(a.mu, a.logvar, b.mu, b.logvar)), 1e-10);
  }
}

// For c = N(m, I) and s = N(0, I): KL(c,N) = |m|^2/2, KL(s,N) = 0 and each
// cross term is |m|^2/2, so the four-way sum is 1.5 |m|^2.
TEST(Kl, TotalForShiftedUnitGaussian) {
  Eigen::VectorXd m(3);
  m << 1.0, -2.0, 0.5;
  const LatentGaussian c{m, Eigen::VectorXd::Zero(3)};
  const LatentGaussian s{Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3)};
  EXPECT_NEAR(kl_total(c, s), 1.5 * m.squaredNorm(), 1e-12);
}

TEST(Kl, BatchMeanAndGradients) {
  Rng rng(3);
  Var mc = nn::make_param(nn::normal_init(4, 5, 1, rng)), lc = nn::make_param(nn::normal_init(4, 5, 0.5, rng));
  Var ms = nn::make_param(nn::normal_init(4, 5, 1, rng)), ls = nn::make_param(nn::normal_init(4, 5, 0.5, rng));
  const LatentBatch c{mc, lc}, s{ms, ls};
  double want = 0;
  for (Index r = 0; r < 4; ++r) want += kl_total(c.row(r), s.row(r));
  EXPECT_NEAR(kl_total(c, s).item(), want / 4, 1e-12);
  const auto g = oracle::gradcheck({{"mc", mc}, {"lc", lc}, {"ms", ms}, {"ls", ls}}, [&] { return kl_total(c, s); });
  EXPECT_LE(g.worst, 1e-5);
  EXPECT_NEAR(kl_to_prior(LatentBatch{Var(Matrix::Zero(2, 3)), Var(Matrix::Zero(2, 3))}).item(), 0.0, 1e-15);
}

TEST(Consistency, PinnedValues) {
  Eigen::VectorXd a(2), b(2);
  a << 0.0, 0.0;
  b << 0.5, 0.0;
  // Quadratic branch: 0.5 * 0.25 / 2 dims.
  EXPECT_NEAR(consistency_loss(a, b), 0.0625, 1e-15);
  EXPECT_NEAR(consistency_loss(a, b, Reduction::Sum), 0.125, 1e-15);
  b << 3.0, 0.0;
  // Linear branch: 3 - 0.5.
  EXPECT_NEAR(consistency_loss(a, b, Reduction::Sum), 2.5, 1e-15);
  EXPECT_NEAR(consistency_loss(b, b), 0.0, 1e-15);
}

TEST(Consistency, MatchesOracleAndGradients) {
  Rng rng(4);
  Var zc = nn::make_param(nn::normal_init(5, 7, 1.5, rng)), zs = nn::make_param(nn::normal_init(5, 7, 1.5, rng));
  EXPECT_LE(oracle::relative_error(consistency_loss(zc, zs).item(), oracle::smooth_l1_mean(zc.value(), zs.value())),
            1e-12);
  const auto g = oracle::gradcheck({{"zc", zc}, {"zs", zs}}, [&] { return consistency_loss(zc, zs); });
  EXPECT_LE(g.worst, 1e-5);
}

TEST(InfoNce, SingletonBatchIsZero) {
  Rng rng(5);
  EXPECT_NEAR(infonce(nn::normal_init(1, 4, 1, rng), nn::normal_init(1, 4, 1, rng), nullptr, 0.1), 0.0, 1e-14);
}

// Two orthogonal pairs at tau = 1: R = I, so each term is log(1 + e^-1).
TEST(InfoNce, OrthogonalPairs) {
  const Matrix z = Matrix::Identity(2, 2);
  EXPECT_NEAR(infonce(z, z, nullptr, 1.0), std::log(1.0 + std::exp(-1.0)), 1e-14);
  EXPECT_NEAR(infonce(z, z, nullptr, 1.0), 0.31326168751822286, 1e-14);
}

TEST(InfoNce, MatchesOracleWithAndWithoutMask) {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const Matrix zs = nn::normal_init(8, 5, 1, rng), zc = nn::normal_init(8, 5, 1, rng);
    std::vector<BinnedSpecification> specs;
    for (int k = 0; k < 8; ++k) specs.push_back({int(rng.below(2)), int(rng.below(2)), 0});
    const Mask m = make_filter_mask(specs);
    const auto nested = to_nested(m);
    EXPECT_LE(oracle::relative_error(infonce(zs, zc, nullptr, 0.1), oracle::infonce(zs, zc, nullptr, 0.1)), 1e-10);
    EXPECT_LE(oracle::relative_error(infonce(zs, zc, &m, 0.1), oracle::infonce(zs, zc, &nested, 0.1)), 1e-10);
  }
}

TEST(InfoNce, ScaleInvariantAndValidated) {
  Rng rng(7);
  const Matrix zs = nn::normal_init(4, 3, 1, rng), zc = nn::normal_init(4, 3, 1, rng);
  EXPECT_NEAR(infonce(zs, zc, nullptr, 0.1), infonce(zs * 7.5, zc * 0.01, nullptr, 0.1), 1e-10);
  Matrix zero = zs;
  zero.row(2).setZero();
  EXPECT_THROW(infonce(zero, zc, nullptr, 0.1), NumericError);
  EXPECT_THROW(infonce(zs, zc, nullptr, 0.0), ArgumentError);
  Mask bad = Mask::Constant(4, 4, true);
  bad(1, 1) = false;
  EXPECT_THROW(infonce(zs, zc, &bad, 0.1), ArgumentError);
}

TEST(InfoNce, Gradients) {
  Rng rng(8);
  Var zs = nn::make_param(nn::normal_init(5, 4, 1, rng)), zc = nn::make_param(nn::normal_init(5, 4, 1, rng));
  const Mask m = make_filter_mask({{0, 0, 0}, {1, 0, 0}, {0, 0, 0}, {1, 1, 1}, {2, 0, 0}});
  const auto g = oracle::gradcheck({{"zs", zs}, {"zc", zc}}, [&] { return infonce(zs, zc, &m, 0.1); });
  EXPECT_LE(g.worst, 1e-5);
}

// Uniform logits: ln 4 + ln 32 + ln 6.
TEST(Guidance, UniformLogits) {
  const SpecLogits l{Var(Matrix::Zero(3, 4)), Var(Matrix::Zero(3, 32)), Var(Matrix::Zero(3, 6))};
  const double got = classifier_guidance(l, {{0, 0, 0}, {3, 31, 5}, {1, 2, 3}}).item();
  EXPECT_NEAR(got, std::log(4.0) + std::log(32.0) + std::log(6.0), 1e-12);
  EXPECT_NEAR(got, 6.643789733147672, 1e-12);
}

TEST(Guidance, SaturatedLogitsNearZero) {
  const BinnedSpecification t{2, 7, 4};
  Matrix g = Matrix::Constant(1, 4, -50), b = Matrix::Constant(1, 32, -50), p = Matrix::Constant(1, 6, -50);
  g(0, t.gain) = b(0, t.bw) = p(0, t.pm) = 50;
  EXPECT_LT(classifier_guidance({Var(g), Var(b), Var(p)}, {t}).item(), 1e-40);
}

TEST(Guidance, BatchMeanOfPerExampleLoss) {
  Rng rng(9);
  const SpecLogits l{Var(nn::normal_init(3, 4, 2, rng)), Var(nn::normal_init(3, 32, 2, rng)),
                     Var(nn::normal_init(3, 6, 2, rng))};
  const std::vector<BinnedSpecification> ts{{0, 5, 1}, {3, 30, 2}, {2, 0, 5}};
  double want = 0;
  for (int i = 0; i < 3; ++i) {
    want -= oracle::log_softmax_at(l.gain.value().row(i), ts[i].gain);
    want -= oracle::log_softmax_at(l.bw.value().row(i), ts[i].bw);
    want -= oracle::log_softmax_at(l.pm.value().row(i), ts[i].pm);
  }
  EXPECT_LE(oracle::relative_error(classifier_guidance(l, ts).item(), want / 3), 1e-12);
  EXPECT_THROW(classifier_guidance(l, {ts[0]}), ArgumentError);
}

TEST(Guidance, HeadGradients) {
  Rng rng(10);
  const auto cfg = ModelConfig::tiny();
  const ClassifierHeads heads(cfg, p101(), rng);
  nn::ParamList ps;
  heads.collect("heads", ps);
  Var z = nn::make_param(nn::normal_init(2, cfg.latent_dim, 1, rng));
  ps.emplace_back("z", z);
  const std::vector<BinnedSpecification> ts{{1, 2, 3}, {0, 31, 0}};
  const auto g = oracle::gradcheck(ps, [&] { return classifier_guidance(z, heads, ts); });
  EXPECT_LE(g.worst, 1e-5);
}

TEST(LossWeights, Validation) {
  LossWeights w;
  EXPECT_NO_THROW(w.check());
  w.tau = 0;
  EXPECT_THROW(w.check(), ArgumentError);
  w = {};
  w.lambda_b = -1;
  EXPECT_THROW(w.check(), ArgumentError);
}
