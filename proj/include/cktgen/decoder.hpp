#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "cktgen/autograd.hpp"
#include "cktgen/circuit.hpp"
#include "cktgen/config.hpp"
#include "cktgen/dataset.hpp"
#include "cktgen/losses.hpp"
#include "cktgen/nn.hpp"

namespace cktgen {

// Teacher-forced predictions for a batch, packed row-wise per circuit.
struct DecoderOutput {
  Var type_logits;  // sum(N) x (types + 1)
  Var pos_logits;   // sum(N) x N_max
  Var edge_logits;  // sum(N(N-1)/2) x 1, flatten_index order within a circuit
  Var params;       // B x (N_max * P)
  std::vector<Index> node_offset;
  std::vector<Index> edge_offset;
};

struct ReconstructionTerms {
  Var total;
  Var types, positions, edges, params;
};

enum class Sampler { Greedy, Categorical };

struct GenerateOptions {
  int max_nodes = 0;  // 0: profile N_max
  Sampler sampler = Sampler::Greedy;
  double temperature = 1.0;
};

// GPT-style circuit decoder. The projected latent z' opens every sequence.
//
// Node pass: row r of a circuit's sequence holds z' (r = 0) or the embedding
// of node r-1, so under the causal mask the output at row r predicts node r
// from z and nodes < r.
//
// Edge pass: the same transformer runs over z' followed by node embeddings
// enriched with an in-edge graph convolution. The output at row i summarizes
// z, nodes < i and every edge among them; it is joined with node i's own
// embedding to form the target side of each pair j -> i, while the source
// side is the output at row j + 1. Edges into i therefore never feed their
// own prediction, and inference proceeds one target vertex at a time.
class CircuitDecoder {
 public:
  CircuitDecoder() = default;
  CircuitDecoder(const ModelConfig& cfg, const DatasetProfile& profile, Rng& rng)
      : cfg_(cfg),
        profile_(profile),
        latent_proj_(cfg.latent_dim, cfg.decoder_dim, rng),
        type_embed_(profile.num_types() + 1, cfg.decoder_dim, rng),
        pos_embed_(profile.max_nodes, cfg.decoder_dim, rng),
        transformer_(cfg.decoder_layers, cfg.decoder_dim, cfg.heads, cfg.ff_dim, cfg.decoder_dropout, rng),
        type_head_(cfg.decoder_dim, profile.num_types() + 1, rng),
        pos_head_(cfg.decoder_dim, profile.max_nodes, rng),
        gnn_(cfg.decoder_dim, cfg.decoder_dim, rng),
        edge_proj_(cfg.decoder_dim, cfg.embed_dim, rng),
        node_proj_(cfg.decoder_dim, cfg.embed_dim, rng),
        edge_mlp_(2 * cfg.embed_dim, cfg.embed_dim, 1, rng),
        param_head_(cfg.latent_dim, cfg.embed_dim, profile.max_nodes * profile.param_width, rng) {}

  DecoderOutput teacher_forced(const Batch& b, const Var& z, const nn::Context& ctx) const {
    detail::check_batch_fits(b, profile_, true);
    if (z.rows() != b.size || z.cols() != cfg_.latent_dim) throw ArgumentError("decoder: latent shape mismatch");
    const Packed pk = pack(b, z, ctx);
    DecoderOutput out;
    const Var hidden = transformer_(node_sequence(pk), pk.seg, true, ctx);
    out.type_logits = type_head_(hidden);
    out.pos_logits = pos_head_(hidden);
    out.edge_logits = edge_logits(b, pk, ctx, &out.edge_offset);
    out.params = param_head_(z);
    out.node_offset = pk.seg.offset;
    return out;
  }

  // Weighted sum of type/position cross-entropy, edge BCE and masked
  // parameter MSE; each term is a per-circuit mean, then averaged over the batch.
  ReconstructionTerms reconstruction_loss(const Batch& truth, const DecoderOutput& pred, const LossWeights& w) const {
    const auto total_nodes = static_cast<std::size_t>(pred.type_logits.rows());
    if (pred.type_logits.cols() != profile_.num_types() + 1 || pred.pos_logits.cols() != profile_.max_nodes ||
        pred.params.rows() != truth.size || pred.params.cols() != profile_.max_nodes * profile_.param_width)
      throw ArgumentError("reconstruction_loss: prediction shapes do not match the profile");
    std::size_t expect_nodes = 0;
    Index expect_edges = 0;
    for (int s = 0; s < truth.size; ++s) {
      expect_nodes += static_cast<std::size_t>(truth.lengths[static_cast<std::size_t>(s)]);
      expect_edges += flat_edge_count(truth.lengths[static_cast<std::size_t>(s)]);
    }
    if (expect_nodes != total_nodes || expect_edges != pred.edge_logits.rows())
      throw ArgumentError("reconstruction_loss: truth and predictions disagree in size");

    const double inv_b = 1.0 / static_cast<double>(std::max(truth.size, 1));
    std::vector<int> types, positions;
    std::vector<double> node_w, edge_t, edge_w;
    Matrix param_t = Matrix::Zero(truth.size, pred.params.cols());
    Matrix param_w = Matrix::Zero(truth.size, pred.params.cols());
    for (int s = 0; s < truth.size; ++s) {
      const int n = truth.lengths[static_cast<std::size_t>(s)];
      for (int i = 0; i < n; ++i) {
        types.push_back(truth.type(s, i));
        positions.push_back(truth.position(s, i));
        node_w.push_back(inv_b / n);
      }
      const long pairs = flat_edge_count(n);
      for (int i = 1; i < n; ++i)
        for (int j = 0; j < i; ++j) {
          edge_t.push_back(truth.edge(s, j, i) ? 1.0 : 0.0);
          edge_w.push_back(inv_b / static_cast<double>(pairs));
        }
      int valid = 0;
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < truth.param_width; ++k) valid += truth.param_valid(s, i, k) ? 1 : 0;
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < truth.param_width; ++k)
          if (truth.param_valid(s, i, k)) {
            param_t(s, i * truth.param_width + k) = truth.param(s, i, k);
            param_w(s, i * truth.param_width + k) = inv_b / valid;
          }
    }
    ReconstructionTerms r;
    r.types = ag::weighted_cross_entropy(pred.type_logits, types, node_w);
    r.positions = ag::weighted_cross_entropy(pred.pos_logits, positions, node_w);
    r.edges = edge_t.empty() ? Var::scalar(0.0) : ag::weighted_bce_with_logits(pred.edge_logits, edge_t, edge_w);
    r.params = ag::weighted_squared_error(pred.params, param_t, param_w);
    r.total = ag::scale(r.types, w.lambda_t) + ag::scale(r.positions, w.lambda_p) + r.edges +
              ag::scale(r.params, w.lambda_b);
    return r;
  }

  // Nodes first (stopping at OUTPUT or the node budget), then edges one
  // target vertex at a time, then device parameters. Edges always point from
  // an earlier to a later vertex; other validity properties are not enforced.
  Circuit generate(const Eigen::VectorXd& z, const GenerateOptions& opt = {}, Rng* rng = nullptr) const {
    if (z.size() != cfg_.latent_dim) throw ArgumentError("generate: latent length mismatch");
    if (opt.sampler == Sampler::Categorical && !rng) throw ArgumentError("categorical sampling needs an Rng");
    ag::NoGradGuard guard;
    const nn::Context ctx{false, nullptr};
    const int budget = opt.max_nodes > 0 ? std::min(opt.max_nodes, profile_.max_nodes) : profile_.max_nodes;
    const Var zv(Matrix(z.transpose()));

    std::vector<int> types, positions;
    for (int step = 0; step < budget; ++step) {
      // Placeholder for the node being predicted; its embedding is never read.
      types.push_back(profile_.none_id());
      positions.push_back(0);
      const Batch b = partial_batch(types, positions, nullptr);
      const Packed pk = pack(b, zv, ctx);
      const Var hidden = transformer_(node_sequence(pk), pk.seg, true, ctx);
      const Var last = ag::gather_rows(hidden, {static_cast<Index>(step)});
      Matrix tl = type_head_(last).value();
      tl(0, profile_.none_id()) = -std::numeric_limits<double>::infinity();
      types.back() = choose(tl.row(0), opt, rng);
      positions.back() = choose(pos_head_(last).value().row(0), opt, rng);
      if (types.back() == profile_.output_id) break;
    }

    const int n = static_cast<int>(types.size());
    std::vector<std::uint8_t> adj(static_cast<std::size_t>(n * n), 0);
    for (int i = 1; i < n; ++i) {
      const Batch b = partial_batch(types, positions, &adj);
      const Packed pk = pack(b, zv, ctx);
      std::vector<Index> offs;
      const Matrix logits = edge_logits(b, pk, ctx, &offs).value();
      for (int j = 0; j < i; ++j) {
        const double x = logits(flatten_index(j + 1, i + 1, n), 0);
        const bool on = opt.sampler == Sampler::Greedy
                            ? x > 0.0
                            : rng->bernoulli(1.0 / (1.0 + std::exp(-x / std::max(opt.temperature, 1e-12))));
        adj[static_cast<std::size_t>(j * n + i)] = on ? 1 : 0;
      }
    }

    const Matrix params = param_head_(zv).value();
    std::vector<Node> nodes;
    for (int i = 0; i < n; ++i) {
      Node nd{types[static_cast<std::size_t>(i)], positions[static_cast<std::size_t>(i)],
              std::vector<double>(static_cast<std::size_t>(profile_.param_width), 0.0)};
      if (i < profile_.max_nodes)
        for (int k = 0; k < profile_.param_count(nd.type); ++k)
          nd.params[static_cast<std::size_t>(k)] = params(0, i * profile_.param_width + k);
      nodes.push_back(std::move(nd));
    }
    Circuit c(std::move(nodes));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (adj[static_cast<std::size_t>(i * n + j)]) c.set_edge(i, j);
    return c;
  }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    latent_proj_.collect(prefix + ".latent_proj", out);
    type_embed_.collect(prefix + ".type_embed", out);
    pos_embed_.collect(prefix + ".pos_embed", out);
    transformer_.collect(prefix + ".transformer", out);
    type_head_.collect(prefix + ".type_head", out);
    pos_head_.collect(prefix + ".pos_head", out);
    gnn_.collect(prefix + ".gnn", out);
    edge_proj_.collect(prefix + ".edge_proj", out);
    node_proj_.collect(prefix + ".node_proj", out);
    edge_mlp_.collect(prefix + ".edge_mlp", out);
    param_head_.collect(prefix + ".param_head", out);
  }

  // Exposed for tests that pin the type distribution.
  Var& type_head_bias() { return type_head_.bias; }

 private:
  struct Packed {
    ag::Segments seg;  // one sequence of length N per circuit
    Var node_embed;    // sum(N) x d''
    Var latent;        // B x d''
    std::vector<int> lengths;
  };

  Packed pack(const Batch& b, const Var& z, const nn::Context& ctx) const {
    Packed pk;
    std::vector<Index> lens, type_ids, pos_ids;
    for (int s = 0; s < b.size; ++s) {
      const int n = b.lengths[static_cast<std::size_t>(s)];
      lens.push_back(n);
      pk.lengths.push_back(n);
      for (int i = 0; i < n; ++i) {
        type_ids.push_back(b.type(s, i));
        pos_ids.push_back(b.position(s, i));
      }
    }
    pk.seg = ag::Segments::from_lengths(lens);
    pk.latent = latent_proj_(z);
    if (!type_ids.empty())
      pk.node_embed = ag::dropout(type_embed_(type_ids) + pos_embed_(pos_ids), cfg_.decoder_dropout, ctx.training, ctx.rng);
    return pk;
  }

  // [z'; x_0; ...; x_{N-2}] for every circuit, gathered from `tokens`
  // (sum(N) node rows) and the latent rows appended after them.
  static Var shifted_sequence(const Packed& pk, const Var& tokens) {
    const Index n_nodes = pk.seg.total();
    std::vector<Index> order;
    for (std::size_t s = 0; s < pk.seg.count(); ++s) {
      const Index off = pk.seg.offset[s], len = pk.seg.length[s];
      if (len == 0) continue;
      order.push_back(n_nodes + static_cast<Index>(s));
      for (Index i = 0; i + 1 < len; ++i) order.push_back(off + i);
    }
    const Var source = n_nodes > 0 ? ag::concat_rows({tokens, pk.latent}) : pk.latent;
    return ag::gather_rows(source, order);
  }

  Var node_sequence(const Packed& pk) const { return shifted_sequence(pk, pk.node_embed); }

  Var edge_logits(const Batch& b, const Packed& pk, const nn::Context& ctx, std::vector<Index>* offsets) const {
    offsets->clear();
    const Index n_nodes = pk.seg.total();
    if (n_nodes == 0) {
      offsets->assign(static_cast<std::size_t>(b.size), 0);
      return Var(Matrix::Zero(0, 1));
    }
    // Mean over in-neighbours and self.
    auto mix = std::make_shared<ag::RowMix>();
    mix->out_rows = n_nodes;
    for (int s = 0; s < b.size; ++s) {
      const Index off = pk.seg.offset[static_cast<std::size_t>(s)];
      const int n = pk.lengths[static_cast<std::size_t>(s)];
      for (int i = 0; i < n; ++i) {
        int deg = 1;
        for (int j = 0; j < n; ++j) deg += (j != i && b.edge(s, j, i)) ? 1 : 0;
        mix->add(off + i, off + i, 1.0 / deg);
        for (int j = 0; j < n; ++j)
          if (j != i && b.edge(s, j, i)) mix->add(off + i, off + j, 1.0 / deg);
      }
    }
    const Var graph = ag::dropout(ag::gelu(gnn_(ag::row_mix(pk.node_embed, mix))), cfg_.decoder_dropout, ctx.training, ctx.rng);
    const Var hidden = transformer_(shifted_sequence(pk, pk.node_embed + graph), pk.seg, true, ctx);
    const Var state = edge_proj_(hidden);
    const Var self = node_proj_(pk.node_embed);

    std::vector<Index> target_rows, source_rows;
    Index count = 0;
    for (int s = 0; s < b.size; ++s) {
      offsets->push_back(count);
      const Index off = pk.seg.offset[static_cast<std::size_t>(s)];
      const int n = pk.lengths[static_cast<std::size_t>(s)];
      for (int i = 1; i < n; ++i)
        for (int j = 0; j < i; ++j) {
          target_rows.push_back(off + i);
          source_rows.push_back(off + j + 1);
          ++count;
        }
    }
    if (count == 0) return Var(Matrix::Zero(0, 1));
    const Var target = ag::gather_rows(state, target_rows) + ag::gather_rows(self, target_rows);
    const Var source = ag::gather_rows(state, source_rows);
    return edge_mlp_(ag::concat_cols({target, source}));
  }

  Batch partial_batch(const std::vector<int>& types, const std::vector<int>& positions,
                      const std::vector<std::uint8_t>* adj) const {
    Batch b;
    const int n = static_cast<int>(types.size());
    b.size = 1;
    b.max_nodes = profile_.max_nodes;
    b.param_width = profile_.param_width;
    b.lengths = {n};
    b.types.assign(static_cast<std::size_t>(profile_.max_nodes), profile_.none_id());
    b.positions.assign(static_cast<std::size_t>(profile_.max_nodes), 0);
    b.adjacency.assign(static_cast<std::size_t>(profile_.max_nodes * profile_.max_nodes), 0);
    for (int i = 0; i < n; ++i) {
      b.types[static_cast<std::size_t>(i)] = types[static_cast<std::size_t>(i)];
      b.positions[static_cast<std::size_t>(i)] = positions[static_cast<std::size_t>(i)];
      if (adj)
        for (int j = 0; j < n; ++j)
          b.adjacency[static_cast<std::size_t>(i * profile_.max_nodes + j)] = (*adj)[static_cast<std::size_t>(i * n + j)];
    }
    return b;
  }

  static int choose(const Eigen::Ref<const Eigen::RowVectorXd>& logits, const GenerateOptions& opt, Rng* rng) {
    Eigen::Index best = 0;
    if (opt.sampler == Sampler::Greedy) {
      logits.maxCoeff(&best);
      return static_cast<int>(best);
    }
    const double t = std::max(opt.temperature, 1e-12);
    const double mx = logits.maxCoeff();
    Eigen::RowVectorXd p = ((logits.array() - mx) / t).exp();
    double u = rng->uniform() * p.sum();
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      if (u < p(k)) return static_cast<int>(k);
      u -= p(k);
    }
    logits.maxCoeff(&best);
    return static_cast<int>(best);
  }

  ModelConfig cfg_;
  DatasetProfile profile_;
  nn::Linear latent_proj_;
  nn::Embedding type_embed_, pos_embed_;
  nn::Transformer transformer_;
  nn::Linear type_head_, pos_head_;
  nn::Linear gnn_;
  nn::Linear edge_proj_, node_proj_;
  nn::Mlp edge_mlp_;
  nn::Mlp param_head_;
};

}  // namespace cktgen
