#include <gtest/gtest.h>

#include "cktgen/decoder.hpp"
#include "support/oracles.hpp"

using namespace cktgen;

namespace {

const DatasetProfile& p101() {
  static const DatasetProfile p = profile_ckt_bench_101();
  return p;
}

const nn::Context eval_ctx{false, nullptr};

Matrix latents(Index rows, Index d, std::uint64_t seed) {
  Rng rng(seed);
  return standard_normal(rows, d, rng);
}

}  // namespace

// Row r of the node logits predicts node r and must not depend on nodes >= r.
TEST(Decoder, NodePredictionsAreCausal) {
  Rng rng(1);
  const auto cfg = ModelConfig::desk();
  const CircuitDecoder dec(cfg, p101(), rng);
  const auto records = synthesize_toy(p101(), 1, 1, 2);
  const Batch base = make_batch(records, p101());
  const Var z(latents(1, cfg.latent_dim, 3));
  const Matrix ref = dec.teacher_forced(base, z, eval_ctx).type_logits.value();
  const int n = base.lengths[0];
  for (int k = 1; k < n; ++k) {
    Batch changed = base;
    for (int i = k; i < n; ++i) {
      changed.types[static_cast<std::size_t>(i)] = (base.type(0, i) + 3) % p101().num_types();
      changed.positions[static_cast<std::size_t>(i)] = (base.position(0, i) + 1) % p101().max_nodes;
    }
    const Matrix got = dec.teacher_forced(changed, z, eval_ctx).type_logits.value();
    EXPECT_TRUE((got.topRows(k + 1).array() == ref.topRows(k + 1).array()).all()) << "k=" << k;
    if (k + 1 < n) {
      EXPECT_GT((got.bottomRows(n - k - 1) - ref.bottomRows(n - k - 1)).cwiseAbs().maxCoeff(), 0.0);
    }
  }
}

// The logit for edge j -> i must not depend on any edge into i or later.
TEST(Decoder, EdgePredictionsAreCausal) {
  Rng rng(2);
  const auto cfg = ModelConfig::desk();
  const CircuitDecoder dec(cfg, p101(), rng);
  const auto records = synthesize_toy(p101(), 1, 1, 5);
  const Batch base = make_batch(records, p101());
  const int n = base.lengths[0];
  ASSERT_GE(n, 4);
  const Var z(latents(1, cfg.latent_dim, 4));
  const Matrix ref = dec.teacher_forced(base, z, eval_ctx).edge_logits.value();
  for (int target = 1; target < n; ++target) {
    Batch changed = base;
    for (int i = target; i < n; ++i)
      for (int j = 0; j < i; ++j) {
        auto& e = changed.adjacency[static_cast<std::size_t>(j * p101().max_nodes + i)];
        e = e ? 0 : 1;
      }
    const Matrix got = dec.teacher_forced(changed, z, eval_ctx).edge_logits.value();
    // Pairs with target vertex <= target occupy the first flat_edge_count(target + 1) rows.
    const auto keep = static_cast<Index>(flat_edge_count(target + 1));
    EXPECT_TRUE((got.topRows(keep).array() == ref.topRows(keep).array()).all()) << "target=" << target;
  }
}

TEST(Decoder, OutputShapes) {
  Rng rng(3);
  const auto cfg = ModelConfig::desk();
  const CircuitDecoder dec(cfg, p101(), rng);
  auto records = synthesize_toy(p101(), 20, 4, 6);
  const Batch b = make_batch(records, p101());
  const auto out = dec.teacher_forced(b, Var(latents(20, cfg.latent_dim, 7)), eval_ctx);
  Index nodes = 0, edges = 0;
  for (int n : b.lengths) {
    nodes += n;
    edges += flat_edge_count(n);
  }
  EXPECT_EQ(out.type_logits.rows(), nodes);
  EXPECT_EQ(out.type_logits.cols(), p101().num_types() + 1);
  EXPECT_EQ(out.pos_logits.cols(), p101().max_nodes);
  EXPECT_EQ(out.edge_logits.rows(), edges);
  EXPECT_EQ(out.params.rows(), 20);
  EXPECT_EQ(out.params.cols(), p101().max_nodes * p101().param_width);
  EXPECT_EQ(flat_edge_count(5), 10);
  EXPECT_THROW(dec.teacher_forced(b, Var(latents(3, cfg.latent_dim, 7)), eval_ctx), ArgumentError);
}

TEST(Decoder, DependsOnLatent) {
  Rng rng(4);
  const auto cfg = ModelConfig::desk();
  const CircuitDecoder dec(cfg, p101(), rng);
  const Batch b = make_batch(synthesize_toy(p101(), 1, 1, 8), p101());
  const auto a = dec.teacher_forced(b, Var(latents(1, cfg.latent_dim, 9)), eval_ctx);
  const auto c = dec.teacher_forced(b, Var(latents(1, cfg.latent_dim, 10)), eval_ctx);
  EXPECT_GT((a.type_logits.value() - c.type_logits.value()).norm(), 1e-6);
  EXPECT_GT((a.edge_logits.value() - c.edge_logits.value()).norm(), 1e-6);
  EXPECT_GT((a.params.value() - c.params.value()).norm(), 1e-6);
}

TEST(ReconstructionLoss, MatchesOracle) {
  Rng rng(5);
  const auto cfg = ModelConfig::desk();
  const CircuitDecoder dec(cfg, p101(), rng);
  const LossWeights w;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Batch b = make_batch(synthesize_toy(p101(), 16, 5, 100 + seed), p101());
    const auto out = dec.teacher_forced(b, Var(latents(16, cfg.latent_dim, seed)), eval_ctx);
    const double got = dec.reconstruction_loss(b, out, w).total.item();
    const double want = oracle::reconstruction(b, out.type_logits.value(), out.pos_logits.value(),
                                               out.edge_logits.value(), out.params.value(), w.lambda_t, w.lambda_p,
                                               w.lambda_b);
    EXPECT_LE(oracle::relative_error(got, want), 1e-10);
  }
}

// Zero logits give ln 27 per node type, ln 8 per position and ln 2 per pair.
TEST(ReconstructionLoss, UniformLogits) {
  Rng rng(6);
  const CircuitDecoder dec(ModelConfig::tiny(), p101(), rng);
  const auto records = synthesize_toy(p101(), 3, 3, 4);
  const Batch b = make_batch(records, p101());
  Index nodes = 0, edges = 0;
  for (int n : b.lengths) {
    nodes += n;
    edges += flat_edge_count(n);
  }
  DecoderOutput out;
  out.type_logits = Var(Matrix::Zero(nodes, p101().num_types() + 1));
  out.pos_logits = Var(Matrix::Zero(nodes, p101().max_nodes));
  out.edge_logits = Var(Matrix::Zero(edges, 1));
  Matrix params = Matrix::Zero(3, p101().max_nodes * p101().param_width);
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < b.lengths[static_cast<std::size_t>(s)]; ++i)
      for (int k = 0; k < p101().param_width; ++k) params(s, i * p101().param_width + k) = b.param(s, i, k);
  out.params = Var(params);
  const auto r = dec.reconstruction_loss(b, out, LossWeights{});
  EXPECT_NEAR(r.types.item(), std::log(27.0), 1e-12);
  EXPECT_NEAR(0.5 * r.types.item(), 1.6479184330021646, 1e-12);
  EXPECT_NEAR(r.positions.item(), std::log(8.0), 1e-12);
  EXPECT_NEAR(r.edges.item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(r.params.item(), 0.0, 1e-15);
  EXPECT_NEAR(r.total.item(), 0.5 * std::log(27.0) + 0.05 * std::log(8.0) + std::log(2.0), 1e-12);
}

TEST(ReconstructionLoss, Gradients) {
  Rng rng(7);
  const auto cfg = ModelConfig::tiny();
  const CircuitDecoder dec(cfg, p101(), rng);
  nn::ParamList ps;
  dec.collect("dec", ps);
  Var z = nn::make_param(latents(2, cfg.latent_dim, 8));
  ps.emplace_back("z", z);
  const Batch b = make_batch(synthesize_toy(p101(), 2, 2, 9), p101());
  const auto g = oracle::gradcheck(ps, [&] {
    return dec.reconstruction_loss(b, dec.teacher_forced(b, z, eval_ctx), LossWeights{}).total;
  });
  EXPECT_GT(g.checked, 200u);
  EXPECT_LE(g.worst, 1e-5);
}

TEST(Generate, OutputFirstStops) {
  Rng rng(8);
  const auto cfg = ModelConfig::desk();
  CircuitDecoder dec(cfg, p101(), rng);
  dec.type_head_bias().mutable_value()(0, p101().output_id) = 1e4;
  const Circuit c = dec.generate(latents(1, cfg.latent_dim, 1).row(0).transpose());
  ASSERT_EQ(c.size(), 1);
  EXPECT_EQ(c.node(0).type, p101().output_id);
  EXPECT_TRUE(c.edges().empty());
}

TEST(Generate, NeverEmitsStopTokenAsNode) {
  Rng rng(9);
  const auto cfg = ModelConfig::desk();
  CircuitDecoder dec(cfg, p101(), rng);
  dec.type_head_bias().mutable_value()(0, p101().none_id()) = 1e4;
  dec.type_head_bias().mutable_value()(0, p101().output_id) = -1e4;
  const Circuit c = dec.generate(latents(1, cfg.latent_dim, 2).row(0).transpose());
  EXPECT_EQ(c.size(), p101().max_nodes);
  for (const auto& nd : c.nodes()) EXPECT_LT(nd.type, p101().num_types());
}

TEST(Generate, GreedyIsDeterministic) {
  Rng rng(10);
  const auto cfg = ModelConfig::desk();
  const CircuitDecoder dec(cfg, p101(), rng);
  const Eigen::VectorXd z = latents(1, cfg.latent_dim, 3).row(0).transpose();
  EXPECT_EQ(dec.generate(z), dec.generate(z));
  GenerateOptions opt;
  opt.sampler = Sampler::Categorical;
  Rng a(4), b(4);
  EXPECT_EQ(dec.generate(z, opt, &a), dec.generate(z, opt, &b));
  EXPECT_THROW(dec.generate(z, opt, nullptr), ArgumentError);
  EXPECT_THROW(dec.generate(Eigen::VectorXd::Zero(3)), ArgumentError);
}

TEST(Generate, RespectsNodeBudget) {
  Rng rng(11);
  const auto cfg = ModelConfig::desk();
  CircuitDecoder dec(cfg, p101(), rng);
  dec.type_head_bias().mutable_value()(0, p101().output_id) = -1e4;
  GenerateOptions opt;
  opt.max_nodes = 3;
  EXPECT_EQ(dec.generate(latents(1, cfg.latent_dim, 5).row(0).transpose(), opt).size(), 3);
}

// Edges only run from earlier to later vertices, so every sample is acyclic.
TEST(Generate, RandomLatentsYieldDags) {
  Rng rng(12);
  const auto cfg = ModelConfig::desk();
  const CircuitDecoder dec(cfg, p101(), rng);
  const Matrix z = latents(1000, cfg.latent_dim, 6);
  GenerateOptions opt;
  opt.sampler = Sampler::Categorical;
  Rng sample(7);
  for (Index k = 0; k < z.rows(); ++k) {
    const Circuit c = dec.generate(z.row(k).transpose(), k % 2 ? opt : GenerateOptions{}, &sample);
    ASSERT_FALSE(oracle::has_cycle(c));
    ASSERT_TRUE(validate(c, p101()).is_dag);
    for (const auto& [u, v] : c.edges()) ASSERT_LT(u, v);
  }
}
