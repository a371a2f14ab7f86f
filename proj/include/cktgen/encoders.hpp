#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "cktgen/autograd.hpp"
#include "cktgen/config.hpp"
#include "cktgen/dataset.hpp"
#include "cktgen/nn.hpp"

namespace cktgen {

using ag::Index;
using ag::Matrix;
using ag::Var;

// Diagonal Gaussian for a single example; logvar is log sigma^2.
struct LatentGaussian {
  Eigen::VectorXd mu;
  Eigen::VectorXd logvar;
};

// Row-stacked Gaussians for a batch (B x d').
struct LatentBatch {
  Var mu;
  Var logvar;

  LatentGaussian row(Index r) const {
    return {mu.value().row(r).transpose(), logvar.value().row(r).transpose()};
  }
};

inline Eigen::VectorXd reparameterize(const LatentGaussian& g, const Eigen::VectorXd& noise) {
  if (noise.size() != g.mu.size() || g.logvar.size() != g.mu.size())
    throw ArgumentError("reparameterize: dimension mismatch");
  return g.mu.array() + (0.5 * g.logvar.array()).exp() * noise.array();
}

// z = mu + exp(logvar / 2) * noise, differentiable in mu and logvar.
inline Var reparameterize(const LatentBatch& g, const Matrix& noise) {
  if (noise.rows() != g.mu.rows() || noise.cols() != g.mu.cols())
    throw ArgumentError("reparameterize: noise shape mismatch");
  return g.mu + ag::mul(ag::exp(ag::scale(g.logvar, 0.5)), Var(noise));
}

inline Matrix standard_normal(Index rows, Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

namespace detail {

inline void check_batch_fits(const Batch& b, const DatasetProfile& p, bool allow_none = false) {
  if (b.max_nodes != p.max_nodes || b.param_width != p.param_width)
    throw ArgumentError("batch built for a different profile");
  for (int s = 0; s < b.size; ++s) {
    const int len = b.lengths[static_cast<std::size_t>(s)];
    if (len > p.max_nodes) throw CapacityError("circuit exceeds N_max");
    for (int i = 0; i < len; ++i) {
      const int t = b.type(s, i);
      if (t < 0 || t > p.num_types() || (!allow_none && t == p.num_types()))
        throw ArgumentError("node type id out of range");
      if (b.position(s, i) < 0 || b.position(s, i) >= p.max_nodes) throw ArgumentError("node position out of range");
    }
  }
}

// Symmetric-normalized adjacency with self loops, D^-1/2 (A + A^T + I) D^-1/2,
// over the packed node rows of a batch.
inline std::shared_ptr<ag::RowMix> symmetric_adjacency(const Batch& b) {
  auto mix = std::make_shared<ag::RowMix>();
  Index off = 0;
  for (int s = 0; s < b.size; ++s) {
    const int len = b.lengths[static_cast<std::size_t>(s)];
    std::vector<double> deg(static_cast<std::size_t>(len), 1.0);
    const auto linked = [&](int i, int j) { return i != j && (b.edge(s, i, j) || b.edge(s, j, i)); };
    for (int i = 0; i < len; ++i)
      for (int j = 0; j < len; ++j)
        if (linked(i, j)) deg[static_cast<std::size_t>(i)] += 1.0;
    for (int i = 0; i < len; ++i)
      for (int j = 0; j < len; ++j)
        if (i == j || linked(i, j))
          mix->add(off + i, off + j, 1.0 / std::sqrt(deg[static_cast<std::size_t>(i)] * deg[static_cast<std::size_t>(j)]));
    off += len;
  }
  mix->out_rows = off;
  return mix;
}

}  // namespace detail

// Circuit -> Gaussian. Per-node tokens are type + position embeddings plus a
// one-layer graph convolution of them; two learnable query tokens are
// prepended and read out after a bidirectional transformer. The flattened
// device-parameter array is projected and joined to each read-out before the
// final linear maps.
class CircuitEncoder {
 public:
  CircuitEncoder() = default;
  CircuitEncoder(const ModelConfig& cfg, const DatasetProfile& profile, Rng& rng)
      : cfg_(cfg),
        profile_(profile),
        type_embed_(profile.num_types(), cfg.embed_dim, rng),
        pos_embed_(profile.max_nodes, cfg.embed_dim, rng),
        gnn_constant_(nn::make_param(nn::normal_init(1, cfg.embed_dim, 1.0, rng))),
        gnn_(cfg.embed_dim, cfg.embed_dim, rng),
        query_tokens_(nn::make_param(nn::normal_init(2, cfg.embed_dim, 0.02, rng))),
        transformer_(cfg.encoder_layers, cfg.embed_dim, cfg.heads, cfg.ff_dim, cfg.encoder_block_dropout, rng),
        param_proj_(profile.max_nodes * profile.param_width, cfg.embed_dim, cfg.embed_dim, rng),
        mu_head_(2 * cfg.embed_dim, cfg.latent_dim, rng),
        logvar_head_(2 * cfg.embed_dim, cfg.latent_dim, rng) {}

  LatentBatch operator()(const Batch& b, const nn::Context& ctx) const {
    detail::check_batch_fits(b, profile_);
    std::vector<Index> type_ids, pos_ids, lengths;
    for (int s = 0; s < b.size; ++s) {
      const int len = b.lengths[static_cast<std::size_t>(s)];
      for (int i = 0; i < len; ++i) {
        type_ids.push_back(b.type(s, i));
        pos_ids.push_back(b.position(s, i));
      }
      lengths.push_back(len + 2);
    }
    const auto n_nodes = static_cast<Index>(type_ids.size());

    Var tokens;
    if (n_nodes > 0) {
      const Var x = type_embed_(type_ids) +
                    ag::dropout(pos_embed_(pos_ids), cfg_.encoder_embed_dropout, ctx.training, ctx.rng);
      const Var features = cfg_.gnn_input == GnnInput::Embeddings
                               ? x
                               : ag::gather_rows(gnn_constant_, std::vector<Index>(static_cast<std::size_t>(n_nodes), 0));
      const Var graph = ag::dropout(ag::gelu(gnn_(ag::row_mix(features, detail::symmetric_adjacency(b)))),
                                    cfg_.encoder_gnn_dropout, ctx.training, ctx.rng);
      tokens = ag::concat_rows({x + graph, query_tokens_});
    } else {
      tokens = query_tokens_;
    }

    const auto seg = ag::Segments::from_lengths(lengths);
    std::vector<Index> order, mu_rows, sigma_rows;
    Index node_at = 0;
    for (int s = 0; s < b.size; ++s) {
      mu_rows.push_back(static_cast<Index>(order.size()));
      order.push_back(n_nodes);
      sigma_rows.push_back(static_cast<Index>(order.size()));
      order.push_back(n_nodes + 1);
      for (int i = 0; i < b.lengths[static_cast<std::size_t>(s)]; ++i) order.push_back(node_at++);
    }
    const Var hidden = transformer_(ag::gather_rows(tokens, order), seg, false, ctx);

    Matrix flat = Matrix::Zero(b.size, profile_.max_nodes * profile_.param_width);
    for (int s = 0; s < b.size; ++s)
      for (int i = 0; i < b.lengths[static_cast<std::size_t>(s)]; ++i)
        for (int k = 0; k < profile_.param_width; ++k)
          if (b.param_valid(s, i, k)) flat(s, i * profile_.param_width + k) = b.param(s, i, k);
    const Var params = param_proj_(Var(flat));

    LatentBatch out;
    out.mu = mu_head_(ag::concat_cols({ag::gather_rows(hidden, mu_rows), params}));
    out.logvar = logvar_head_(ag::concat_cols({ag::gather_rows(hidden, sigma_rows), params}));
    return out;
  }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    type_embed_.collect(prefix + ".type_embed", out);
    pos_embed_.collect(prefix + ".pos_embed", out);
    out.emplace_back(prefix + ".gnn_constant", gnn_constant_);
    gnn_.collect(prefix + ".gnn", out);
    out.emplace_back(prefix + ".query_tokens", query_tokens_);
    transformer_.collect(prefix + ".transformer", out);
    param_proj_.collect(prefix + ".param_proj", out);
    mu_head_.collect(prefix + ".mu_head", out);
    logvar_head_.collect(prefix + ".logvar_head", out);
  }

 private:
  ModelConfig cfg_;
  DatasetProfile profile_;
  nn::Embedding type_embed_, pos_embed_;
  Var gnn_constant_;
  nn::Linear gnn_;
  Var query_tokens_;
  nn::Transformer transformer_;
  nn::Mlp param_proj_;
  nn::Linear mu_head_, logvar_head_;
};

// Specification -> Gaussian: per-element embeddings concatenated in
// (gain, bw, pm) order, an MLP, and two linear heads.
class SpecEncoder {
 public:
  SpecEncoder() = default;
  SpecEncoder(const ModelConfig& cfg, const DatasetProfile& profile, Rng& rng)
      : profile_(profile),
        gain_embed_(profile.categories[0], cfg.embed_dim, rng),
        bw_embed_(profile.categories[1], cfg.embed_dim, rng),
        pm_embed_(profile.categories[2], cfg.embed_dim, rng),
        body_(3 * cfg.embed_dim, cfg.embed_dim, cfg.embed_dim, rng),
        mu_head_(cfg.embed_dim, cfg.latent_dim, rng),
        logvar_head_(cfg.embed_dim, cfg.latent_dim, rng) {}

  LatentBatch operator()(const std::vector<BinnedSpecification>& specs) const {
    std::vector<Index> g, b, p;
    for (const auto& s : specs) {
      s.check(profile_);
      g.push_back(s.gain);
      b.push_back(s.bw);
      p.push_back(s.pm);
    }
    const Var h = ag::gelu(body_(ag::concat_cols({gain_embed_(g), bw_embed_(b), pm_embed_(p)})));
    return {mu_head_(h), logvar_head_(h)};
  }

  LatentGaussian operator()(const BinnedSpecification& s) const {
    ag::NoGradGuard guard;
    return (*this)(std::vector<BinnedSpecification>{s}).row(0);
  }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    gain_embed_.collect(prefix + ".gain_embed", out);
    bw_embed_.collect(prefix + ".bw_embed", out);
    pm_embed_.collect(prefix + ".pm_embed", out);
    body_.collect(prefix + ".body", out);
    mu_head_.collect(prefix + ".mu_head", out);
    logvar_head_.collect(prefix + ".logvar_head", out);
  }

 private:
  DatasetProfile profile_;
  nn::Embedding gain_embed_, bw_embed_, pm_embed_;
  nn::Mlp body_;
  nn::Linear mu_head_, logvar_head_;
};

}  // namespace cktgen
