#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cktgen/error.hpp"

namespace cktgen {

inline constexpr int kNumNodeTypes = 26;

struct NodeTypeInfo {
  std::string name;
  int param_count = 0;  // valid leading slots of the P-wide parameter vector
};

// Everything dataset-specific: specification category counts, the node-type
// vocabulary, capacity limits and the position convention.
struct DatasetProfile {
  std::string name;
  std::array<int, 3> categories{};  // gain, bw, pm
  std::vector<NodeTypeInfo> node_types;
  int input_id = 0;
  int output_id = 1;
  int max_nodes = 8;
  int param_width = 3;
  // Positions whose nodes sit on the INPUT->OUTPUT main path.
  std::set<int> main_path_positions;
  // Virtual-ground rule applied at export: when a node sits at gnd_trigger,
  // nodes at gnd_positions are tied to GND.
  int gnd_trigger = -1;
  std::set<int> gnd_positions;

  int num_types() const { return static_cast<int>(node_types.size()); }
  // Decoder vocabulary appends one "none" id after the real types.
  int none_id() const { return num_types(); }
  int param_count(int type) const { return node_types.at(static_cast<std::size_t>(type)).param_count; }
  bool is_main_path_position(int p) const { return main_path_positions.count(p) > 0; }
  int flat_edge_count() const { return max_nodes * (max_nodes - 1) / 2; }

  void check() const {
    if (num_types() != kNumNodeTypes)
      throw SchemaError("profile '" + name + "' must declare exactly 26 node types, got " +
                        std::to_string(num_types()));
    if (input_id == output_id) throw SchemaError("INPUT and OUTPUT ids must differ");
    if (input_id < 0 || input_id >= num_types() || output_id < 0 || output_id >= num_types())
      throw SchemaError("INPUT/OUTPUT id out of range");
    for (int c : categories)
      if (c <= 0) throw SchemaError("category counts must be positive");
    if (max_nodes < 2) throw SchemaError("max_nodes must be at least 2");
    if (param_width < 0) throw SchemaError("param_width must be non-negative");
    for (const auto& t : node_types)
      if (t.param_count < 0 || t.param_count > param_width)
        throw SchemaError("node type '" + t.name + "' declares more parameters than param_width");
    for (int p : main_path_positions)
      if (p < 0 || p >= max_nodes) throw SchemaError("main-path position out of range");
  }

  bool operator==(const DatasetProfile& o) const {
    if (node_types.size() != o.node_types.size()) return false;
    for (std::size_t i = 0; i < node_types.size(); ++i)
      if (node_types[i].name != o.node_types[i].name ||
          node_types[i].param_count != o.node_types[i].param_count)
        return false;
    return name == o.name && categories == o.categories && input_id == o.input_id &&
           output_id == o.output_id && max_nodes == o.max_nodes &&
           param_width == o.param_width && main_path_positions == o.main_path_positions &&
           gnd_trigger == o.gnd_trigger && gnd_positions == o.gnd_positions;
  }
};

namespace detail {

// Default vocabulary. INPUT/OUTPUT are the circuit terminals; the rest are
// passive, transconductance and compound subgraph blocks.
inline std::vector<NodeTypeInfo> default_vocabulary() {
  return {
      {"INPUT", 0},       {"OUTPUT", 0},       {"R", 1},           {"C", 1},
      {"R_par_C", 2},     {"R_ser_C", 2},      {"+gm", 1},         {"-gm", 1},
      {"+gm_par_R", 2},   {"-gm_par_R", 2},    {"+gm_par_C", 2},   {"-gm_par_C", 2},
      {"+gm_ser_R", 2},   {"-gm_ser_R", 2},    {"+gm_ser_C", 2},   {"-gm_ser_C", 2},
      {"+gm_par_RC", 3},  {"-gm_par_RC", 3},   {"+gm_ser_RC", 3},  {"-gm_ser_RC", 3},
      {"+gm_R_par_C", 3}, {"-gm_R_par_C", 3},  {"+gm_R_ser_C", 3}, {"-gm_R_ser_C", 3},
      {"buffer", 1},      {"miller_C", 1},
  };
}

inline DatasetProfile ocb_base(std::string name, std::array<int, 3> categories) {
  DatasetProfile p;
  p.name = std::move(name);
  p.categories = categories;
  p.node_types = default_vocabulary();
  p.input_id = 0;
  p.output_id = 1;
  p.max_nodes = 8;
  p.param_width = 3;
  // Position 0 input, 1 output, 2..4 amplification stages; 5..7 hold
  // feedforward / feedback / load blocks off the main path.
  p.main_path_positions = {0, 1, 2, 3, 4};
  p.gnd_trigger = 6;
  p.gnd_positions = {5, 6, 7};
  return p;
}

}  // namespace detail

inline DatasetProfile profile_ckt_bench_101() { return detail::ocb_base("ckt-bench-101", {4, 32, 6}); }
inline DatasetProfile profile_ckt_bench_301() { return detail::ocb_base("ckt-bench-301", {4, 19, 5}); }

inline nlohmann::json profile_to_json(const DatasetProfile& p) {
  nlohmann::json types = nlohmann::json::array();
  for (const auto& t : p.node_types) types.push_back({{"name", t.name}, {"params", t.param_count}});
  return {{"name", p.name},
          {"categories", p.categories},
          {"node_types", types},
          {"input_id", p.input_id},
          {"output_id", p.output_id},
          {"max_nodes", p.max_nodes},
          {"param_width", p.param_width},
          {"main_path_positions", p.main_path_positions},
          {"gnd_trigger", p.gnd_trigger},
          {"gnd_positions", p.gnd_positions}};
}

inline DatasetProfile profile_from_json(const nlohmann::json& j) {
  try {
    DatasetProfile p;
    p.name = j.at("name").get<std::string>();
    p.categories = j.at("categories").get<std::array<int, 3>>();
    for (const auto& t : j.at("node_types"))
      p.node_types.push_back({t.at("name").get<std::string>(), t.value("params", 0)});
    p.input_id = j.at("input_id").get<int>();
    p.output_id = j.at("output_id").get<int>();
    p.max_nodes = j.at("max_nodes").get<int>();
    p.param_width = j.value("param_width", 3);
    p.main_path_positions = j.at("main_path_positions").get<std::set<int>>();
    p.gnd_trigger = j.value("gnd_trigger", -1);
    p.gnd_positions = j.value("gnd_positions", std::set<int>{});
    p.check();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("bad profile: ") + e.what());
  }
}

// "101", "301", or a path to a JSON vocabulary file.
inline DatasetProfile resolve_profile(const std::string& spec) {
  if (spec == "101" || spec == "ckt-bench-101") return profile_ckt_bench_101();
  if (spec == "301" || spec == "ckt-bench-301") return profile_ckt_bench_301();
  std::ifstream in(spec);
  if (!in) throw ArgumentError("unknown profile '" + spec + "' (expected 101, 301 or a JSON file)");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("profile file: ") + e.what());
  }
  return profile_from_json(j);
}

}  // namespace cktgen
