#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cktgen/autograd.hpp"
#include "cktgen/rng.hpp"

namespace cktgen::nn {

using ag::Index;
using ag::Matrix;
using ag::Var;

// Named view over every learnable tensor of a model.
using ParamList = std::vector<std::pair<std::string, Var>>;

struct Context {
  bool training = false;
  Rng* rng = nullptr;
};

inline Var make_param(Matrix init) { return Var(std::move(init), true); }

inline Matrix uniform_init(Index rows, Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

inline Matrix normal_init(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(Index in, Index out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = make_param(uniform_init(in, out, bound, rng));
    bias = make_param(uniform_init(1, out, bound, rng));
  }

  Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct Embedding {
  Var table;

  Embedding() = default;
  Embedding(Index count, Index dim, Rng& rng) : table(make_param(normal_init(count, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng))) {}

  Var operator()(std::vector<Index> ids) const { return ag::gather_rows(table, std::move(ids)); }
  Index count() const { return table.rows(); }

  void collect(const std::string& prefix, ParamList& out) const { out.emplace_back(prefix + ".table", table); }
};

struct LayerNorm {
  Var gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(Index dim) : gamma(make_param(Matrix::Ones(1, dim))), beta(make_param(Matrix::Zero(1, dim))) {}

  Var operator()(const Var& x) const { return ag::layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

// Two-layer perceptron with a GELU in between.
struct Mlp {
  Linear first, second;

  Mlp() = default;
  Mlp(Index in, Index hidden, Index out, Rng& rng) : first(in, hidden, rng), second(hidden, out, rng) {}

  Var operator()(const Var& x) const { return second(ag::gelu(first(x))); }

  void collect(const std::string& prefix, ParamList& out) const {
    first.collect(prefix + ".0", out);
    second.collect(prefix + ".1", out);
  }
};

// Pre-norm transformer block: x + MHA(LN(x)), then x + FF(LN(x)).
struct TransformerLayer {
  LayerNorm ln_attn, ln_ff;
  Linear wq, wk, wv, wo;
  Linear ff_in, ff_out;
  int heads = 1;
  double dropout = 0.0;

  TransformerLayer() = default;
  TransformerLayer(Index width, int heads_, Index ff_width, double dropout_, Rng& rng)
      : ln_attn(width),
        ln_ff(width),
        wq(width, width, rng),
        wk(width, width, rng),
        wv(width, width, rng),
        wo(width, width, rng),
        ff_in(width, ff_width, rng),
        ff_out(ff_width, width, rng),
        heads(heads_),
        dropout(dropout_) {}

  Var operator()(const Var& x, const ag::Segments& seg, bool causal, const Context& ctx) const {
    const Var h = ln_attn(x);
    const Var a = wo(ag::attention(wq(h), wk(h), wv(h), seg, heads, causal));
    const Var x1 = x + ag::dropout(a, dropout, ctx.training, ctx.rng);
    const Var f = ff_out(ag::dropout(ag::gelu(ff_in(ln_ff(x1))), dropout, ctx.training, ctx.rng));
    return x1 + ag::dropout(f, dropout, ctx.training, ctx.rng);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    ln_attn.collect(prefix + ".ln_attn", out);
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
    ln_ff.collect(prefix + ".ln_ff", out);
    ff_in.collect(prefix + ".ff_in", out);
    ff_out.collect(prefix + ".ff_out", out);
  }
};

struct Transformer {
  std::vector<TransformerLayer> layers;
  LayerNorm final_norm;

  Transformer() = default;
  Transformer(int depth, Index width, int heads, Index ff_width, double dropout, Rng& rng) : final_norm(width) {
    for (int l = 0; l < depth; ++l) layers.emplace_back(width, heads, ff_width, dropout, rng);
  }

  Var operator()(Var x, const ag::Segments& seg, bool causal, const Context& ctx) const {
    for (const auto& layer : layers) x = layer(x, seg, causal, ctx);
    return final_norm(x);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(prefix + ".layer" + std::to_string(l), out);
    final_norm.collect(prefix + ".norm", out);
  }
};

}  // namespace cktgen::nn
