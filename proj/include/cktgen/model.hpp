#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "cktgen/config.hpp"
#include "cktgen/decoder.hpp"
#include "cktgen/encoders.hpp"
#include "cktgen/losses.hpp"

namespace cktgen {

// All learnable state: both encoders, the decoder and the classifier heads.
class CktGenModel {
 public:
  CktGenModel(const ModelConfig& cfg, const DatasetProfile& profile, std::uint64_t seed) : cfg_(cfg), profile_(profile) {
    cfg.check();
    profile.check();
    Rng rng(seed);
    circuit_encoder_ = CircuitEncoder(cfg, profile, rng);
    spec_encoder_ = SpecEncoder(cfg, profile, rng);
    decoder_ = CircuitDecoder(cfg, profile, rng);
    heads_ = ClassifierHeads(cfg, profile, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const DatasetProfile& profile() const { return profile_; }
  const CircuitEncoder& circuit_encoder() const { return circuit_encoder_; }
  const SpecEncoder& spec_encoder() const { return spec_encoder_; }
  const CircuitDecoder& decoder() const { return decoder_; }
  CircuitDecoder& decoder() { return decoder_; }
  const ClassifierHeads& heads() const { return heads_; }
  ClassifierHeads& heads() { return heads_; }

  nn::ParamList parameters() const {
    nn::ParamList out;
    circuit_encoder_.collect("circuit_encoder", out);
    spec_encoder_.collect("spec_encoder", out);
    decoder_.collect("decoder", out);
    heads_.collect("heads", out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : parameters()) n += static_cast<std::size_t>(v.value().size());
    return n;
  }

  // Gaussian means/log-variances in eval mode.
  LatentBatch encode_circuits(const Batch& b) const {
    ag::NoGradGuard guard;
    return circuit_encoder_(b, {false, nullptr});
  }
  LatentBatch encode_specs(const std::vector<BinnedSpecification>& specs) const {
    ag::NoGradGuard guard;
    return spec_encoder_(specs);
  }
  LatentGaussian encode_circuit(const Circuit& c) const {
    std::vector<Record> one{{c, BinnedSpecification{}}};
    return encode_circuits(make_batch(one, profile_)).row(0);
  }

 private:
  ModelConfig cfg_;
  DatasetProfile profile_;
  CircuitEncoder circuit_encoder_;
  SpecEncoder spec_encoder_;
  CircuitDecoder decoder_;
  ClassifierHeads heads_;
};

// ---------------------------------------------------------------- checkpoint

// Binary container: magic, format version, JSON header length, JSON header,
// then every tensor as little-endian IEEE doubles in header order. Tensors are
// addressed by hierarchical name; the header also carries the model config,
// the dataset profile and arbitrary caller metadata.
inline constexpr char kCheckpointMagic[8] = {'C', 'K', 'T', 'G', 'E', 'N', 'C', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  DatasetProfile profile;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix* find(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return &m;
    return nullptr;
  }
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, m] : ck.tensors) index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  const nlohmann::json header = {{"config", ck.config},
                                 {"profile", profile_to_json(ck.profile)},
                                 {"meta", ck.meta},
                                 {"tensors", index}};
  const std::string text = header.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod(os, kCheckpointVersion);
    detail::write_pod(os, static_cast<std::uint64_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : ck.tensors)
      os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
    os.flush();
    if (!os) throw IoError("failed writing checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into place: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw SchemaError(path + " is not a checkpoint");
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw SchemaError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::read_pod<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("checkpoint truncated");
  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    ck.config = header.at("config").get<ModelConfig>();
    ck.meta = header.value("meta", nlohmann::json::object());
    ck.profile = profile_from_json(header.at("profile"));
    if (!header.at("tensors").is_array()) throw SchemaError("checkpoint header: tensors must be an array");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint header: ") + e.what());
  }
  for (const auto& t : header.at("tensors")) {
    Matrix m(t.at("rows").get<Index>(), t.at("cols").get<Index>());
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
    if (!is) throw IoError("checkpoint truncated in tensor " + t.at("name").get<std::string>());
    ck.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  return ck;
}

inline void append_parameters(Checkpoint& ck, const CktGenModel& model, const std::string& prefix = "") {
  for (const auto& [name, v] : model.parameters()) ck.tensors.emplace_back(prefix + name, v.value());
}

inline void load_parameters(const Checkpoint& ck, CktGenModel& model, const std::string& prefix = "") {
  for (auto& [name, v] : model.parameters()) {
    const Matrix* m = ck.find(prefix + name);
    if (!m) throw SchemaError("checkpoint lacks tensor " + prefix + name);
    if (m->rows() != v.rows() || m->cols() != v.cols()) throw SchemaError("tensor shape mismatch for " + name);
    Var handle = v;
    handle.mutable_value() = *m;
  }
}

// Rebuilds a model from a checkpoint. A non-null `expected` profile must
// match the stored one exactly.
inline CktGenModel model_from_checkpoint(const Checkpoint& ck, const DatasetProfile* expected = nullptr) {
  if (expected && !(*expected == ck.profile))
    throw ProfileMismatchError("checkpoint was trained on profile '" + ck.profile.name + "', requested '" +
                               expected->name + "'");
  CktGenModel model(ck.config, ck.profile, 0);
  load_parameters(ck, model);
  return model;
}

inline CktGenModel load_model(const std::string& path, const DatasetProfile* expected = nullptr) {
  return model_from_checkpoint(read_checkpoint(path), expected);
}

}  // namespace cktgen
