#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cktgen/circuit.hpp"
#include "cktgen/error.hpp"
#include "cktgen/profile.hpp"
#include "cktgen/rng.hpp"

namespace cktgen {

struct RawSpecification {
  double gain = 0.0;
  double bw = 0.0;
  double pm = 0.0;
};

struct BinnedSpecification {
  int gain = 0;
  int bw = 0;
  int pm = 0;

  auto operator<=>(const BinnedSpecification&) const = default;

  void check(const DatasetProfile& p) const {
    if (gain < 0 || gain >= p.categories[0] || bw < 0 || bw >= p.categories[1] || pm < 0 ||
        pm >= p.categories[2])
      throw ArgumentError("specification category out of range for profile " + p.name);
  }
};

struct Record {
  Circuit circuit;
  BinnedSpecification spec;

  bool operator==(const Record&) const = default;
};

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Drops invalid rows (negative phase margin, non-finite values, or values
// whose truncation leaves the profile's category range); otherwise bins by
// discarding fractional parts.
inline std::optional<BinnedSpecification> preprocess_spec(const RawSpecification& r, const DatasetProfile& p) {
  const double raw[3] = {r.gain, r.bw, r.pm};
  if (!(r.pm >= 0.0)) return std::nullopt;
  int cat[3];
  for (int k = 0; k < 3; ++k) {
    if (!std::isfinite(raw[k])) return std::nullopt;
    const double t = std::trunc(raw[k]);
    if (t < 0.0 || t >= p.categories[static_cast<std::size_t>(k)]) return std::nullopt;
    cat[k] = std::clamp(static_cast<int>(std::floor(raw[k])), 0, p.categories[static_cast<std::size_t>(k)] - 1);
  }
  return BinnedSpecification{cat[0], cat[1], cat[2]};
}

// ---------------------------------------------------------------- JSON lines

inline nlohmann::json record_to_json(const Circuit& c, const RawSpecification& s) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : c.nodes()) nodes.push_back({{"t", n.type}, {"p", n.position}, {"b", n.params}});
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [u, v] : c.edges()) edges.push_back({u + 1, v + 1});
  return {{"nodes", nodes}, {"edges", edges}, {"spec", {{"gain", s.gain}, {"bw", s.bw}, {"pm", s.pm}}}};
}

inline nlohmann::json record_to_json(const Record& r) {
  return record_to_json(r.circuit, RawSpecification{static_cast<double>(r.spec.gain),
                                                    static_cast<double>(r.spec.bw),
                                                    static_cast<double>(r.spec.pm)});
}

// Parses the circuit part of a record, pads/masks parameters to the profile
// width and returns it in canonical order.
inline Circuit circuit_from_json(const nlohmann::json& j, const DatasetProfile& p) {
  std::vector<Node> nodes;
  for (const auto& jn : j.at("nodes")) {
    Node n;
    n.type = jn.at("t").get<int>();
    n.position = jn.at("p").get<int>();
    if (n.type < 0 || n.type >= p.num_types())
      throw SchemaError("unknown node-type id " + std::to_string(n.type));
    if (n.position < 0 || n.position >= p.max_nodes)
      throw SchemaError("node position " + std::to_string(n.position) + " out of range");
    std::vector<double> b = jn.value("b", std::vector<double>{});
    if (static_cast<int>(b.size()) > p.param_width) throw SchemaError("too many device parameters");
    b.resize(static_cast<std::size_t>(p.param_width), 0.0);
    for (int k = p.param_count(n.type); k < p.param_width; ++k) b[static_cast<std::size_t>(k)] = 0.0;
    n.params = std::move(b);
    nodes.push_back(std::move(n));
  }
  if (static_cast<int>(nodes.size()) > p.max_nodes)
    throw SchemaError("circuit has " + std::to_string(nodes.size()) + " nodes, profile allows " +
                      std::to_string(p.max_nodes));
  Circuit c(std::move(nodes));
  for (const auto& e : j.value("edges", nlohmann::json::array())) {
    const int from = e.at(0).get<int>();
    const int to = e.at(1).get<int>();
    if (from < 1 || to < 1 || from > c.size() || to > c.size() || from == to)
      throw SchemaError("edge [" + std::to_string(from) + "," + std::to_string(to) + "] out of range");
    c.set_edge(from - 1, to - 1);
  }
  if (!detail::acyclic(c)) throw SchemaError("circuit contains a cycle");
  return canonicalize(c, p);
}

struct LoadResult {
  std::vector<Record> records;
  long dropped = 0;
};

inline LoadResult load_ocb_stream(std::istream& in, const DatasetProfile& p) {
  LoadResult out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), lineno);
    }
    try {
      const auto& js = j.at("spec");
      const RawSpecification raw{js.at("gain").get<double>(), js.at("bw").get<double>(),
                                 js.at("pm").get<double>()};
      Circuit c = circuit_from_json(j, p);
      const auto binned = preprocess_spec(raw, p);
      if (!binned) {
        ++out.dropped;
        continue;
      }
      out.records.push_back({std::move(c), *binned});
    } catch (const SchemaError& e) {
      throw SchemaError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline LoadResult load_ocb(const std::string& path, const DatasetProfile& p) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return load_ocb_stream(in, p);
}

inline void save_records(const std::string& path, const std::vector<Record>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------- splitting

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split(const std::vector<T>& records, double train_frac,
                                                std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ArgumentError("train_frac must be in (0, 1)");
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  const auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(records.size())));
  std::vector<T> train, test;
  for (std::size_t k = 0; k < idx.size(); ++k) (k < n_train ? train : test).push_back(records[idx[k]]);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------- filter mask

// mask(i, j) is false exactly for distinct samples sharing a specification;
// those pairs are removed from the contrastive denominators.
inline Mask make_filter_mask(const std::vector<BinnedSpecification>& specs) {
  const auto m = static_cast<Eigen::Index>(specs.size());
  Mask mask = Mask::Constant(m, m, true);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      if (i != j && specs[static_cast<std::size_t>(i)] == specs[static_cast<std::size_t>(j)]) mask(i, j) = false;
  return mask;
}

// ---------------------------------------------------------------- batching

struct Batch {
  int size = 0;
  int max_nodes = 0;
  int param_width = 0;
  std::vector<int> lengths;                 // M
  std::vector<int> types;                   // M x N_max, padded with the "none" id
  std::vector<int> positions;               // M x N_max, padded with 0
  std::vector<double> params;               // M x N_max x P
  std::vector<std::uint8_t> param_mask;     // M x N_max x P
  std::vector<std::uint8_t> adjacency;      // M x N_max x N_max
  std::vector<std::uint8_t> edge_targets;   // M x N_max(N_max-1)/2
  std::vector<std::uint8_t> edge_mask;      // same shape, 1 inside each circuit's own list
  std::vector<BinnedSpecification> specs;   // M
  Eigen::MatrixXd spec_onehot;              // M x (C_gain + C_bw + C_pm)
  Mask filter_mask;                         // M x M

  int type(int b, int i) const { return types[static_cast<std::size_t>(b * max_nodes + i)]; }
  int position(int b, int i) const { return positions[static_cast<std::size_t>(b * max_nodes + i)]; }
  double param(int b, int i, int k) const {
    return params[static_cast<std::size_t>((b * max_nodes + i) * param_width + k)];
  }
  bool param_valid(int b, int i, int k) const {
    return param_mask[static_cast<std::size_t>((b * max_nodes + i) * param_width + k)] != 0;
  }
  bool edge(int b, int from, int to) const {
    return adjacency[static_cast<std::size_t>((b * max_nodes + from) * max_nodes + to)] != 0;
  }
};

inline Batch make_batch(const std::vector<const Record*>& records, const DatasetProfile& p) {
  Batch b;
  const int m = static_cast<int>(records.size());
  const int n = p.max_nodes;
  const int w = p.param_width;
  const int fe = p.flat_edge_count();
  b.size = m;
  b.max_nodes = n;
  b.param_width = w;
  b.lengths.resize(static_cast<std::size_t>(m));
  b.types.assign(static_cast<std::size_t>(m * n), p.none_id());
  b.positions.assign(static_cast<std::size_t>(m * n), 0);
  b.params.assign(static_cast<std::size_t>(m * n * w), 0.0);
  b.param_mask.assign(static_cast<std::size_t>(m * n * w), 0);
  b.adjacency.assign(static_cast<std::size_t>(m * n * n), 0);
  b.edge_targets.assign(static_cast<std::size_t>(m * fe), 0);
  b.edge_mask.assign(static_cast<std::size_t>(m * fe), 0);
  const int onehot_width = p.categories[0] + p.categories[1] + p.categories[2];
  b.spec_onehot = Eigen::MatrixXd::Zero(m, onehot_width);
  for (int s = 0; s < m; ++s) {
    const Record& r = *records[static_cast<std::size_t>(s)];
    const Circuit& c = r.circuit;
    if (c.size() > n) throw CapacityError("circuit exceeds profile max_nodes");
    r.spec.check(p);
    b.lengths[static_cast<std::size_t>(s)] = c.size();
    for (int i = 0; i < c.size(); ++i) {
      const Node& nd = c.node(i);
      b.types[static_cast<std::size_t>(s * n + i)] = nd.type;
      b.positions[static_cast<std::size_t>(s * n + i)] = nd.position;
      for (int k = 0; k < w; ++k) {
        const auto at = static_cast<std::size_t>((s * n + i) * w + k);
        b.params[at] = k < static_cast<int>(nd.params.size()) ? nd.params[static_cast<std::size_t>(k)] : 0.0;
        b.param_mask[at] = k < p.param_count(nd.type) ? 1 : 0;
      }
      for (int j = 0; j < c.size(); ++j)
        b.adjacency[static_cast<std::size_t>((s * n + i) * n + j)] = c.has_edge(i, j) ? 1 : 0;
    }
    const auto flat = flatten_edges(c);
    for (std::size_t e = 0; e < flat.size(); ++e) {
      b.edge_targets[static_cast<std::size_t>(s * fe) + e] = flat[e];
      b.edge_mask[static_cast<std::size_t>(s * fe) + e] = 1;
    }
    b.specs.push_back(r.spec);
    b.spec_onehot(s, r.spec.gain) = 1.0;
    b.spec_onehot(s, p.categories[0] + r.spec.bw) = 1.0;
    b.spec_onehot(s, p.categories[0] + p.categories[1] + r.spec.pm) = 1.0;
  }
  b.filter_mask = make_filter_mask(b.specs);
  return b;
}

inline Batch make_batch(const std::vector<Record>& records, const DatasetProfile& p) {
  std::vector<const Record*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return make_batch(ptrs, p);
}

inline std::vector<Record> unbatch(const Batch& b) {
  std::vector<Record> out;
  for (int s = 0; s < b.size; ++s) {
    std::vector<Node> nodes;
    for (int i = 0; i < b.lengths[static_cast<std::size_t>(s)]; ++i) {
      Node nd{b.type(s, i), b.position(s, i), {}};
      for (int k = 0; k < b.param_width; ++k) nd.params.push_back(b.param(s, i, k));
      nodes.push_back(std::move(nd));
    }
    Circuit c(std::move(nodes));
    for (int i = 0; i < c.size(); ++i)
      for (int j = 0; j < c.size(); ++j)
        if (b.edge(s, i, j)) c.set_edge(i, j);
    out.push_back({std::move(c), b.specs[static_cast<std::size_t>(s)]});
  }
  return out;
}

// ---------------------------------------------------------------- toy data

namespace detail {

struct ToyTopology {
  Circuit circuit;  // canonical, parameters zero
  int bucket_node = 0;
};

inline ToyTopology random_toy_topology(const DatasetProfile& p, Rng& rng) {
  std::vector<int> stage_types, branch_types;
  for (int t = 0; t < p.num_types(); ++t) {
    if (t == p.input_id || t == p.output_id || p.param_count(t) == 0) continue;
    const std::string& nm = p.node_types[static_cast<std::size_t>(t)].name;
    (nm.find("gm") != std::string::npos ? stage_types : branch_types).push_back(t);
  }
  if (stage_types.empty()) stage_types = branch_types;
  if (branch_types.empty()) branch_types = stage_types;
  if (stage_types.empty()) throw ArgumentError("profile has no parameterized node types");

  std::vector<int> stage_pos, off_pos;
  for (int pos = 0; pos < p.max_nodes; ++pos) {
    if (pos == 0 || pos == 1) continue;  // terminal slots
    (p.is_main_path_position(pos) ? stage_pos : off_pos).push_back(pos);
  }
  if (stage_pos.empty()) throw ArgumentError("profile has no main-path stage positions");

  const int max_stages = std::min<int>(3, static_cast<int>(stage_pos.size()));
  const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_stages)));
  const int room = p.max_nodes - 2 - k;
  const int max_branches = std::max(0, std::min<int>({2, room, static_cast<int>(off_pos.size())}));
  const int nb = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_branches + 1)));

  Circuit c;
  const auto zero_params = std::vector<double>(static_cast<std::size_t>(p.param_width), 0.0);
  const int in = c.add_node({p.input_id, 0, zero_params});
  std::vector<int> chain{in};
  for (int s = 0; s < k; ++s) {
    const int t = stage_types[rng.below(stage_types.size())];
    chain.push_back(c.add_node({t, stage_pos[static_cast<std::size_t>(s)], zero_params}));
  }
  const int out = c.add_node({p.output_id, 1, zero_params});
  chain.push_back(out);
  for (std::size_t s = 0; s + 1 < chain.size(); ++s) c.set_edge(chain[s], chain[s + 1]);
  std::vector<int> offs = off_pos;
  rng.shuffle(offs);
  for (int bi = 0; bi < nb; ++bi) {
    const int t = branch_types[rng.below(branch_types.size())];
    const int node = c.add_node({t, offs[static_cast<std::size_t>(bi)], zero_params});
    const int src = chain[rng.below(chain.size() - 1)];  // INPUT or a stage
    c.set_edge(src, node);
    c.set_edge(node, out);
  }
  ToyTopology topo;
  topo.circuit = canonicalize(c, p);
  for (int v = 0; v < topo.circuit.size(); ++v)
    if (topo.circuit.node(v).position == stage_pos[0]) topo.bucket_node = v;
  return topo;
}

}  // namespace detail

// Synthetic circuits for desk-scale runs. Topology classes come in pairs per
// specification type and the label additionally depends on a two-level
// bucket of the first stage's first parameter:
//   label(class, bucket) = (class / 2 + bucket * ceil(T / 2)) mod T
// so every label owns at least two topologies and every topology serves two
// labels, distinguishable only through its parameters.
inline std::vector<Record> synthesize_toy(const DatasetProfile& p, int n_circuits, int n_spec_types,
                                          std::uint64_t seed) {
  if (n_circuits < 0) throw ArgumentError("n_circuits must be non-negative");
  const long grid = static_cast<long>(p.categories[0]) * p.categories[1] * p.categories[2];
  if (n_spec_types < 1 || n_spec_types > grid)
    throw ArgumentError("n_spec_types must be in [1, " + std::to_string(grid) + "]");
  if (n_circuits == 0) return {};

  Rng rng(seed);
  const int n_classes = 2 * n_spec_types;
  std::vector<detail::ToyTopology> classes;
  std::set<std::string> seen;
  for (int attempts = 0; static_cast<int>(classes.size()) < n_classes; ++attempts) {
    if (attempts > 200 * n_classes + 1000)
      throw ArgumentError("cannot build " + std::to_string(n_classes) + " distinct toy topologies");
    auto topo = detail::random_toy_topology(p, rng);
    if (seen.insert(canonical_hash(topo.circuit, p)).second) classes.push_back(std::move(topo));
  }

  // Distinct specification triples, one per label.
  std::vector<long> cells;
  std::set<long> taken;
  while (static_cast<int>(cells.size()) < n_spec_types) {
    const long cell = static_cast<long>(rng.below(static_cast<std::uint64_t>(grid)));
    if (taken.insert(cell).second) cells.push_back(cell);
  }
  std::vector<BinnedSpecification> labels;
  for (long cell : cells)
    labels.push_back({static_cast<int>(cell % p.categories[0]),
                      static_cast<int>((cell / p.categories[0]) % p.categories[1]),
                      static_cast<int>(cell / (static_cast<long>(p.categories[0]) * p.categories[1]))});

  const int half = (n_spec_types + 1) / 2;
  std::vector<std::pair<int, int>> combos;
  for (int c = 0; c < n_classes; ++c)
    for (int q = 0; q < 2; ++q) combos.emplace_back(c, q);

  std::vector<Record> out;
  std::vector<std::pair<int, int>> order;
  for (int r = 0; r < n_circuits; ++r) {
    if (order.empty()) {
      order = combos;
      rng.shuffle(order);
      std::reverse(order.begin(), order.end());
    }
    const auto [cls, bucket] = order.back();
    order.pop_back();
    const auto& topo = classes[static_cast<std::size_t>(cls)];
    Circuit c = topo.circuit;
    for (int v = 0; v < c.size(); ++v) {
      Node& nd = c.node(v);
      for (int k = 0; k < p.param_count(nd.type); ++k) nd.params[static_cast<std::size_t>(k)] = rng.uniform(0.1, 0.9);
    }
    c.node(topo.bucket_node).params[0] = bucket == 0 ? rng.uniform(0.1, 0.45) : rng.uniform(0.55, 0.9);
    const int label = (cls / 2 + bucket * half) % n_spec_types;
    out.push_back({std::move(c), labels[static_cast<std::size_t>(label)]});
  }
  return out;
}

}  // namespace cktgen
