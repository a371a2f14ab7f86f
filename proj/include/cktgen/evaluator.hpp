#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cktgen/metrics.hpp"
#include "cktgen/model.hpp"

namespace cktgen {

struct GenerationEntry {
  BinnedSpecification spec;
  Eigen::VectorXd z;  // sampled specification latent
  Circuit generated;
  Circuit reference;  // one test circuit carrying this specification
};

using GenerationEvalSet = std::vector<GenerationEntry>;

struct EvalOptions {
  std::uint64_t seed = 0;
  GenerateOptions generation;
  int diversity_pairs = 300;
  bool sample_latent = true;  // false: condition on the specification mean
};

// Test records grouped by specification, in specification order.
inline std::map<BinnedSpecification, std::vector<const Record*>> group_by_spec(const std::vector<Record>& records) {
  std::map<BinnedSpecification, std::vector<const Record*>> groups;
  for (const auto& r : records) groups[r.spec].push_back(&r);
  return groups;
}

// One generation per specification type present in `test`.
inline GenerationEvalSet build_generation_set(const CktGenModel& generator, const std::vector<Record>& test,
                                              const EvalOptions& opt) {
  Rng rng(opt.seed);
  Rng decode_rng(derive_seed(opt.seed, 1));
  GenerationEvalSet set;
  for (const auto& [spec, members] : group_by_spec(test)) {
    const LatentGaussian g = generator.spec_encoder()(spec);
    Eigen::VectorXd noise = Eigen::VectorXd::Zero(g.mu.size());
    if (opt.sample_latent)
      for (Eigen::Index k = 0; k < noise.size(); ++k) noise(k) = rng.normal();
    GenerationEntry e;
    e.spec = spec;
    e.z = reparameterize(g, noise);
    e.generated = generator.decoder().generate(e.z, opt.generation, &decode_rng);
    e.reference = members[rng.below(members.size())]->circuit;
    set.push_back(std::move(e));
  }
  return set;
}

struct EvalReport {
  std::string mode;
  // conditional generation
  std::optional<double> r_at_1, r_at_2, r_at_3, spec_accuracy, mm_distance, fid, valid_circuit, diversity;
  // reconstruction / unconditional
  std::optional<double> reconstruction_accuracy, valid_dag, novel_circuit;
  // retrieval experiment
  std::optional<double> top_1, top_3, top_5;
  int samples = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"mode", r.mode}, {"samples", r.samples}};
  const auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("R@1", r.r_at_1);
  put("R@2", r.r_at_2);
  put("R@3", r.r_at_3);
  put("spec_accuracy", r.spec_accuracy);
  put("mm_distance", r.mm_distance);
  put("fid", r.fid);
  put("valid_circuit", r.valid_circuit);
  put("diversity", r.diversity);
  put("reconstruction_accuracy", r.reconstruction_accuracy);
  put("valid_dag", r.valid_dag);
  put("novel_circuit", r.novel_circuit);
  put("top_1", r.top_1);
  put("top_3", r.top_3);
  put("top_5", r.top_5);
}

// Circuit-latent means of `circuits` under `model`, one row each.
inline MatrixXd circuit_latents(const CktGenModel& model, const std::vector<Circuit>& circuits) {
  MatrixXd out(static_cast<Eigen::Index>(circuits.size()), model.config().latent_dim);
  constexpr std::size_t chunk = 64;
  for (std::size_t at = 0; at < circuits.size(); at += chunk) {
    std::vector<Record> rs;
    for (std::size_t k = at; k < std::min(circuits.size(), at + chunk); ++k) rs.push_back({circuits[k], {}});
    const Matrix mu = model.encode_circuits(make_batch(rs, model.profile())).mu.value();
    out.middleRows(static_cast<Eigen::Index>(at), mu.rows()) = mu;
  }
  return out;
}

inline MatrixXd spec_latents(const CktGenModel& model, const std::vector<BinnedSpecification>& specs) {
  if (specs.empty()) return MatrixXd(0, model.config().latent_dim);
  return model.encode_specs(specs).mu.value();
}

// Argmax of the three classifier heads on latent rows.
inline std::vector<BinnedSpecification> predict_specs(const CktGenModel& model, const MatrixXd& latents) {
  ag::NoGradGuard guard;
  const SpecLogits l = model.heads()(Var(latents));
  std::vector<BinnedSpecification> out;
  for (Eigen::Index i = 0; i < latents.rows(); ++i) {
    Eigen::Index g, b, p;
    l.gain.value().row(i).maxCoeff(&g);
    l.bw.value().row(i).maxCoeff(&b);
    l.pm.value().row(i).maxCoeff(&p);
    out.push_back({static_cast<int>(g), static_cast<int>(b), static_cast<int>(p)});
  }
  return out;
}

// Generated circuits may carry ids or sizes the encoder cannot take; such
// circuits are invalid anyway and are clamped only for embedding.
inline Circuit encodable(const Circuit& c, const DatasetProfile& p) {
  std::vector<Node> nodes;
  for (int v = 0; v < std::min(c.size(), p.max_nodes); ++v) nodes.push_back(c.node(v));
  Circuit out(std::move(nodes));
  for (const auto& [u, v] : c.edges())
    if (u < out.size() && v < out.size()) out.set_edge(u, v);
  return out;
}

// Conditional-generation metrics of `set`, scored by the frozen evaluator.
inline EvalReport score_generation_set(const GenerationEvalSet& set, const CktGenModel& evaluator, const EvalOptions& opt) {
  if (set.size() < 2) throw ArgumentError("conditional evaluation needs at least two specification types");
  const DatasetProfile& p = evaluator.profile();
  std::vector<Circuit> gen, ref;
  std::vector<BinnedSpecification> specs;
  std::vector<int> groups;
  int valid = 0;
  for (const auto& e : set) {
    gen.push_back(encodable(e.generated, p));
    ref.push_back(e.reference);
    specs.push_back(e.spec);
    groups.push_back(static_cast<int>(groups.size()));
    valid += validate(e.generated, p).is_valid_circuit ? 1 : 0;
  }
  const MatrixXd g = circuit_latents(evaluator, gen);
  const MatrixXd s = spec_latents(evaluator, specs);
  const MatrixXd r = circuit_latents(evaluator, ref);
  EvalReport rep;
  rep.mode = "cond";
  rep.samples = static_cast<int>(set.size());
  const auto rk = retrieval_precision(g, s, {1, 2, 3});
  rep.r_at_1 = rk[0];
  rep.r_at_2 = rk[1];
  rep.r_at_3 = rk[2];
  rep.spec_accuracy = specification_accuracy(predict_specs(evaluator, g), specs);
  rep.mm_distance = mm_distance(g, s);
  rep.fid = fid_latent(g, r);
  rep.valid_circuit = static_cast<double>(valid) / static_cast<double>(set.size());
  rep.diversity = diversity(g, groups, opt.diversity_pairs, derive_seed(opt.seed, 2));
  return rep;
}

inline EvalReport conditional_eval(const CktGenModel& generator, const CktGenModel& evaluator,
                                   const std::vector<Record>& test, const EvalOptions& opt) {
  return score_generation_set(build_generation_set(generator, test, opt), evaluator, opt);
}

inline bool same_structure(const Circuit& a, const Circuit& b) {
  if (a.size() != b.size()) return false;
  for (int v = 0; v < a.size(); ++v)
    if (a.node(v).type != b.node(v).type || a.node(v).position != b.node(v).position) return false;
  for (int u = 0; u < a.size(); ++u)
    for (int v = 0; v < a.size(); ++v)
      if (a.has_edge(u, v) != b.has_edge(u, v)) return false;
  return true;
}

// Fraction of (circuit, latent sample) pairs whose greedy decode matches the
// circuit's types, positions and edges exactly. n_latent_samples = 0 decodes
// the mean once.
inline double reconstruction_accuracy(const CktGenModel& model, const std::vector<Record>& test, int n_latent_samples,
                                      std::uint64_t seed) {
  if (test.empty()) return 0.0;
  Rng rng(seed);
  std::size_t hits = 0, total = 0;
  constexpr std::size_t chunk = 64;
  for (std::size_t at = 0; at < test.size(); at += chunk) {
    std::vector<Record> rs(test.begin() + static_cast<std::ptrdiff_t>(at),
                           test.begin() + static_cast<std::ptrdiff_t>(std::min(test.size(), at + chunk)));
    const LatentBatch lb = model.encode_circuits(make_batch(rs, model.profile()));
    for (std::size_t k = 0; k < rs.size(); ++k) {
      const LatentGaussian g = lb.row(static_cast<Index>(k));
      const int draws = std::max(1, n_latent_samples);
      for (int d = 0; d < draws; ++d) {
        Eigen::VectorXd noise = Eigen::VectorXd::Zero(g.mu.size());
        if (n_latent_samples > 0)
          for (Eigen::Index q = 0; q < noise.size(); ++q) noise(q) = rng.normal();
        const Circuit out = model.decoder().generate(reparameterize(g, noise));
        hits += same_structure(out, rs[k].circuit) ? 1 : 0;
        ++total;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

struct UnconditionalStats {
  double valid_dag = 0, valid_circuit = 0, novel = 0;
  std::vector<Circuit> circuits;
};

// Decodes n_samples prior draws z ~ N(0, I). A circuit counts as novel only
// when it is valid and its topology hash is outside `train_hashes`.
inline UnconditionalStats unconditional_eval(const CktGenModel& model, int n_samples,
                                             const std::set<std::string>& train_hashes, std::uint64_t seed,
                                             const GenerateOptions& gen = {}) {
  if (n_samples < 1) throw ArgumentError("unconditional_eval: n_samples must be positive");
  Rng rng(seed);
  Rng decode_rng(derive_seed(seed, 1));
  UnconditionalStats st;
  int dag = 0, valid = 0, novel = 0;
  for (int k = 0; k < n_samples; ++k) {
    Eigen::VectorXd z(model.config().latent_dim);
    for (Eigen::Index q = 0; q < z.size(); ++q) z(q) = rng.normal();
    Circuit c = model.decoder().generate(z, gen, &decode_rng);
    const ValidityReport v = validate(c, model.profile());
    dag += v.is_dag ? 1 : 0;
    if (v.is_valid_circuit) {
      ++valid;
      novel += train_hashes.count(canonical_hash(c, model.profile())) == 0 ? 1 : 0;
    }
    st.circuits.push_back(std::move(c));
  }
  st.valid_dag = static_cast<double>(dag) / n_samples;
  st.valid_circuit = static_cast<double>(valid) / n_samples;
  st.novel = static_cast<double>(novel) / n_samples;
  return st;
}

inline std::set<std::string> topology_hashes(const std::vector<Record>& records, const DatasetProfile& p) {
  std::set<std::string> out;
  for (const auto& r : records) out.insert(canonical_hash(r.circuit, p));
  return out;
}

// Cross-modal retrieval: one seeded circuit per specification type, each
// ranked against all specification latents. Returns Top-1/3/5.
inline std::vector<double> retrieval_experiment(const CktGenModel& model, const std::vector<Record>& test,
                                                std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Circuit> circuits;
  std::vector<BinnedSpecification> specs;
  for (const auto& [spec, members] : group_by_spec(test)) {
    specs.push_back(spec);
    circuits.push_back(members[rng.below(members.size())]->circuit);
  }
  if (specs.size() < 2) throw ArgumentError("retrieval_experiment: need at least two specification types");
  return retrieval_precision(circuit_latents(model, circuits), spec_latents(model, specs), {1, 3, 5});
}

}  // namespace cktgen
