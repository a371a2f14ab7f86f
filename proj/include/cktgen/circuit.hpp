#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <queue>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "cktgen/error.hpp"
#include "cktgen/profile.hpp"

namespace cktgen {

struct Node {
  int type = 0;
  int position = 0;
  std::vector<double> params;  // width P; slots past the type's param_count are zero

  bool operator==(const Node&) const = default;
};

// Directed graph over subgraph nodes. The adjacency matrix is the single
// source of truth; the flattened upper-triangular list is derived from it.
class Circuit {
 public:
  Circuit() = default;
  explicit Circuit(std::vector<Node> nodes)
      : nodes_(std::move(nodes)), adj_(nodes_.size() * nodes_.size(), 0) {}

  int size() const { return static_cast<int>(nodes_.size()); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
  Node& node(int i) { return nodes_.at(static_cast<std::size_t>(i)); }

  int add_node(Node n) {
    const std::size_t old = nodes_.size();
    std::vector<std::uint8_t> adj((old + 1) * (old + 1), 0);
    for (std::size_t r = 0; r < old; ++r)
      for (std::size_t c = 0; c < old; ++c) adj[r * (old + 1) + c] = adj_[r * old + c];
    adj_ = std::move(adj);
    nodes_.push_back(std::move(n));
    return static_cast<int>(old);
  }

  bool has_edge(int from, int to) const { return adj_[index(from, to)] != 0; }
  void set_edge(int from, int to, bool on = true) { adj_[index(from, to)] = on ? 1 : 0; }

  // (from, to) pairs, 0-based, in row-major order.
  std::vector<std::pair<int, int>> edges() const {
    std::vector<std::pair<int, int>> out;
    for (int u = 0; u < size(); ++u)
      for (int v = 0; v < size(); ++v)
        if (has_edge(u, v)) out.emplace_back(u, v);
    return out;
  }

  int edge_count() const { return static_cast<int>(std::count(adj_.begin(), adj_.end(), 1)); }

  bool operator==(const Circuit&) const = default;

 private:
  std::size_t index(int from, int to) const {
    if (from < 0 || to < 0 || from >= size() || to >= size())
      throw ArgumentError("edge endpoint out of range");
    return static_cast<std::size_t>(from) * nodes_.size() + static_cast<std::size_t>(to);
  }

  std::vector<Node> nodes_;
  std::vector<std::uint8_t> adj_;
};

// Position of edge j->i (1-based, j < i) in the flattened list: all sources
// of vertex 2, then of vertex 3, and so on.
inline long flatten_index(long j, long i, long n) {
  if (!(1 <= j && j < i && i <= n))
    throw ArgumentError("flatten_index requires 1 <= j < i <= N, got j=" + std::to_string(j) +
                        " i=" + std::to_string(i) + " N=" + std::to_string(n));
  return (i - 1) * (i - 2) / 2 + (j - 1);
}

inline long flat_edge_count(long n) { return n < 2 ? 0 : n * (n - 1) / 2; }

// Forward edges (j < i) of the adjacency as a 0/1 list in flatten_index order.
inline std::vector<std::uint8_t> flatten_edges(const Circuit& c) {
  std::vector<std::uint8_t> flat(static_cast<std::size_t>(flat_edge_count(c.size())), 0);
  for (int i = 1; i < c.size(); ++i)
    for (int j = 0; j < i; ++j)
      flat[static_cast<std::size_t>(flatten_index(j + 1, i + 1, c.size()))] = c.has_edge(j, i) ? 1 : 0;
  return flat;
}

inline Circuit circuit_from_flat(std::vector<Node> nodes, const std::vector<std::uint8_t>& flat) {
  Circuit c(std::move(nodes));
  if (static_cast<long>(flat.size()) != flat_edge_count(c.size()))
    throw ArgumentError("flattened edge list has wrong length");
  for (int i = 1; i < c.size(); ++i)
    for (int j = 0; j < i; ++j)
      if (flat[static_cast<std::size_t>(flatten_index(j + 1, i + 1, c.size()))]) c.set_edge(j, i);
  return c;
}

struct ValidityReport {
  bool is_dag = false;
  bool single_io = false;
  bool no_floating = false;
  bool main_path_ok = false;
  bool is_valid_circuit = false;
};

namespace detail {

inline std::vector<std::uint8_t> reachable(const Circuit& c, const std::vector<int>& sources,
                                           bool forward, const std::vector<std::uint8_t>* allowed = nullptr) {
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(c.size()), 0);
  std::vector<int> stack;
  for (int s : sources) {
    if (allowed && !(*allowed)[static_cast<std::size_t>(s)]) continue;
    if (!seen[static_cast<std::size_t>(s)]) {
      seen[static_cast<std::size_t>(s)] = 1;
      stack.push_back(s);
    }
  }
  while (!stack.empty()) {
    const int u = stack.back();
    stack.pop_back();
    for (int v = 0; v < c.size(); ++v) {
      const bool e = forward ? c.has_edge(u, v) : c.has_edge(v, u);
      if (!e || seen[static_cast<std::size_t>(v)]) continue;
      if (allowed && !(*allowed)[static_cast<std::size_t>(v)]) continue;
      seen[static_cast<std::size_t>(v)] = 1;
      stack.push_back(v);
    }
  }
  return seen;
}

inline bool acyclic(const Circuit& c) {
  const int n = c.size();
  std::vector<int> indeg(static_cast<std::size_t>(n), 0);
  for (const auto& [u, v] : c.edges()) ++indeg[static_cast<std::size_t>(v)];
  std::vector<int> ready;
  for (int v = 0; v < n; ++v)
    if (indeg[static_cast<std::size_t>(v)] == 0) ready.push_back(v);
  int visited = 0;
  while (!ready.empty()) {
    const int u = ready.back();
    ready.pop_back();
    ++visited;
    for (int v = 0; v < n; ++v)
      if (c.has_edge(u, v) && --indeg[static_cast<std::size_t>(v)] == 0) ready.push_back(v);
  }
  return visited == n;
}

}  // namespace detail

// Structural checks of a decoded or loaded circuit. Accepts arbitrary node and
// edge data, including cycles and out-of-vocabulary duplicates.
inline ValidityReport validate(const Circuit& c, const DatasetProfile& profile) {
  ValidityReport r;
  const int n = c.size();
  r.is_dag = detail::acyclic(c);

  std::vector<int> inputs, outputs;
  for (int v = 0; v < n; ++v) {
    if (c.node(v).type == profile.input_id) inputs.push_back(v);
    if (c.node(v).type == profile.output_id) outputs.push_back(v);
  }
  r.single_io = inputs.size() == 1 && outputs.size() == 1;
  const auto is_io = [&](int v) {
    return c.node(v).type == profile.input_id || c.node(v).type == profile.output_id;
  };

  // A node is floating unless some walk INPUT -> node -> OUTPUT exists.
  const auto from_in = detail::reachable(c, inputs, true);
  const auto to_out = detail::reachable(c, outputs, false);
  r.no_floating = true;
  for (int v = 0; v < n; ++v)
    if (!is_io(v) && !(from_in[static_cast<std::size_t>(v)] && to_out[static_cast<std::size_t>(v)]))
      r.no_floating = false;

  // Main path: terminals plus nodes at main-path positions. Positions must be
  // unique, no main-path edge may run backwards in position order, and the
  // main-path nodes alone must connect INPUT to OUTPUT.
  r.main_path_ok = !inputs.empty() && !outputs.empty();
  std::vector<int> seen_pos;
  for (const auto& nd : c.nodes()) seen_pos.push_back(nd.position);
  std::sort(seen_pos.begin(), seen_pos.end());
  if (std::adjacent_find(seen_pos.begin(), seen_pos.end()) != seen_pos.end()) r.main_path_ok = false;

  std::vector<std::uint8_t> on_main(static_cast<std::size_t>(n), 0);
  for (int v = 0; v < n; ++v)
    on_main[static_cast<std::size_t>(v)] = is_io(v) || profile.is_main_path_position(c.node(v).position);
  const auto rank = [&](int v) -> long {
    if (c.node(v).type == profile.input_id) return -1;
    if (c.node(v).type == profile.output_id) return 1L << 40;
    return c.node(v).position;
  };
  for (const auto& [u, v] : c.edges())
    if (on_main[static_cast<std::size_t>(u)] && on_main[static_cast<std::size_t>(v)] && rank(u) >= rank(v))
      r.main_path_ok = false;
  if (r.main_path_ok) {
    const auto main_reach = detail::reachable(c, inputs, true, &on_main);
    bool hits = false;
    for (int o : outputs) hits = hits || main_reach[static_cast<std::size_t>(o)];
    r.main_path_ok = hits;
  }

  r.is_valid_circuit = r.is_dag && r.single_io && r.no_floating && r.main_path_ok;
  return r;
}

// Node order used as the autoregressive target: a topological order that
// prefers INPUT first, OUTPUT last, then ascending position, then type id,
// then insertion order. For circuits whose edges already follow positions it
// is simply the position order.
inline std::vector<int> canonical_order(const Circuit& c, const DatasetProfile& profile) {
  const int n = c.size();
  using Key = std::tuple<int, int, int, int>;
  const auto key = [&](int v) {
    const Node& nd = c.node(v);
    const int cls = nd.type == profile.input_id ? 0 : (nd.type == profile.output_id ? 2 : 1);
    return Key{cls, nd.position, nd.type, v};
  };
  std::vector<int> indeg(static_cast<std::size_t>(n), 0);
  for (const auto& [u, v] : c.edges()) ++indeg[static_cast<std::size_t>(v)];
  std::priority_queue<Key, std::vector<Key>, std::greater<>> ready;
  for (int v = 0; v < n; ++v)
    if (indeg[static_cast<std::size_t>(v)] == 0) ready.push(key(v));
  std::vector<int> order;
  while (!ready.empty()) {
    const int u = std::get<3>(ready.top());
    ready.pop();
    order.push_back(u);
    for (int v = 0; v < n; ++v)
      if (c.has_edge(u, v) && --indeg[static_cast<std::size_t>(v)] == 0) ready.push(key(v));
  }
  if (static_cast<int>(order.size()) != n) throw ArgumentError("circuit contains a cycle");
  return order;
}

inline Circuit canonicalize(const Circuit& c, const DatasetProfile& profile) {
  const auto order = canonical_order(c, profile);
  std::vector<int> where(order.size());
  std::vector<Node> nodes;
  for (std::size_t k = 0; k < order.size(); ++k) {
    where[static_cast<std::size_t>(order[k])] = static_cast<int>(k);
    nodes.push_back(c.node(order[k]));
  }
  Circuit out(std::move(nodes));
  for (const auto& [u, v] : c.edges())
    out.set_edge(where[static_cast<std::size_t>(u)], where[static_cast<std::size_t>(v)]);
  return out;
}

inline bool is_canonical(const Circuit& c, const DatasetProfile& profile) {
  const auto order = canonical_order(c, profile);
  for (std::size_t k = 0; k < order.size(); ++k)
    if (order[k] != static_cast<int>(k)) return false;
  return true;
}

// 128-bit topology digest over (types, positions, edges) of the canonical
// form. Device parameters do not enter.
inline std::string canonical_hash(const Circuit& c, const DatasetProfile& profile) {
  const Circuit k = canonicalize(c, profile);
  std::uint64_t h1 = 0xcbf29ce484222325ULL;  // FNV-1a
  std::uint64_t h2 = 0x6a09e667f3bcc909ULL;  // multiply-xorshift stream
  const auto feed = [&](std::uint64_t x) {
    for (int b = 0; b < 8; ++b) {
      h1 ^= (x >> (8 * b)) & 0xffU;
      h1 *= 0x100000001b3ULL;
    }
    h2 = (h2 ^ (x + 0x9e3779b97f4a7c15ULL + (h2 << 6) + (h2 >> 2))) * 0xff51afd7ed558ccdULL;
    h2 ^= h2 >> 33;
  };
  feed(static_cast<std::uint64_t>(k.size()));
  for (const auto& nd : k.nodes()) {
    feed(static_cast<std::uint64_t>(nd.type));
    feed(static_cast<std::uint64_t>(nd.position));
  }
  for (const auto& [u, v] : k.edges()) feed((static_cast<std::uint64_t>(u) << 32) | static_cast<std::uint64_t>(v));
  std::ostringstream os;
  os << std::hex << std::setfill('0') << std::setw(16) << h1 << std::setw(16) << h2;
  return os.str();
}

// Graphviz rendering. Main-path nodes are boxes; the virtual ground from the
// profile's GND rule is drawn as an extra dashed sink.
inline std::string to_dot(const Circuit& c, const DatasetProfile& profile, const std::string& name = "circuit") {
  std::ostringstream os;
  os << "digraph \"" << name << "\" {\n  rankdir=LR;\n";
  bool gnd = false;
  for (const auto& nd : c.nodes()) gnd = gnd || nd.position == profile.gnd_trigger;
  for (int v = 0; v < c.size(); ++v) {
    const Node& nd = c.node(v);
    const bool main = nd.type == profile.input_id || nd.type == profile.output_id ||
                      profile.is_main_path_position(nd.position);
    const std::string type_name = nd.type >= 0 && nd.type < profile.num_types()
                                      ? profile.node_types[static_cast<std::size_t>(nd.type)].name
                                      : "type" + std::to_string(nd.type);
    os << "  n" << v << " [label=\"" << type_name << "@p" << nd.position << "\", shape="
       << (main ? "box" : "ellipse") << "];\n";
  }
  for (const auto& [u, v] : c.edges()) os << "  n" << u << " -> n" << v << ";\n";
  if (gnd) {
    os << "  gnd [label=\"GND\", shape=plaintext];\n";
    for (int v = 0; v < c.size(); ++v)
      if (profile.gnd_positions.count(c.node(v).position))
        os << "  n" << v << " -> gnd [style=dashed, arrowhead=none];\n";
  }
  os << "}\n";
  return os.str();
}

}  // namespace cktgen
