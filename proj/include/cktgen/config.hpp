#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "cktgen/error.hpp"

namespace cktgen {

enum class GnnInput { Embeddings, Constant };

// Architecture hyperparameters shared by encoders and decoder.
struct ModelConfig {
  int embed_dim = 128;     // d: encoder token width, edge-pair width
  int latent_dim = 64;     // d': joint latent space
  int decoder_dim = 512;   // d'': decoder token width
  int encoder_layers = 4;
  int decoder_layers = 4;
  int heads = 8;
  int ff_dim = 512;
  double encoder_embed_dropout = 0.2;
  double encoder_gnn_dropout = 0.2;
  double encoder_block_dropout = 0.3;
  double decoder_dropout = 0.1;
  // What the encoder's graph convolution propagates over the adjacency.
  GnnInput gnn_input = GnnInput::Embeddings;

  static ModelConfig paper() { return {}; }

  // Reduced widths for single-core CPU runs.
  static ModelConfig desk() {
    ModelConfig c;
    c.embed_dim = 64;
    c.latent_dim = 32;
    c.decoder_dim = 64;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.heads = 4;
    c.ff_dim = 128;
    c.encoder_embed_dropout = 0.1;
    c.encoder_gnn_dropout = 0.1;
    c.encoder_block_dropout = 0.1;
    c.decoder_dropout = 0.1;
    return c;
  }

  // Minimal widths used by gradient checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.embed_dim = 8;
    c.latent_dim = 6;
    c.decoder_dim = 8;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.heads = 2;
    c.ff_dim = 12;
    c.encoder_embed_dropout = c.encoder_gnn_dropout = c.encoder_block_dropout = c.decoder_dropout = 0.0;
    return c;
  }

  void check() const {
    if (embed_dim <= 0 || latent_dim <= 0 || decoder_dim <= 0 || ff_dim <= 0 || heads <= 0)
      throw ArgumentError("model dimensions must be positive");
    if (embed_dim % heads != 0 || decoder_dim % heads != 0)
      throw ArgumentError("embed_dim and decoder_dim must be divisible by heads");
    if (encoder_layers < 1 || decoder_layers < 1) throw ArgumentError("need at least one transformer layer");
  }

  bool operator==(const ModelConfig&) const = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(GnnInput, {{GnnInput::Embeddings, "embeddings"}, {GnnInput::Constant, "constant"}})

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"embed_dim", c.embed_dim},
       {"latent_dim", c.latent_dim},
       {"decoder_dim", c.decoder_dim},
       {"encoder_layers", c.encoder_layers},
       {"decoder_layers", c.decoder_layers},
       {"heads", c.heads},
       {"ff_dim", c.ff_dim},
       {"encoder_embed_dropout", c.encoder_embed_dropout},
       {"encoder_gnn_dropout", c.encoder_gnn_dropout},
       {"encoder_block_dropout", c.encoder_block_dropout},
       {"decoder_dropout", c.decoder_dropout},
       {"gnn_input", c.gnn_input}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.decoder_dim = j.value("decoder_dim", d.decoder_dim);
  c.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.heads = j.value("heads", d.heads);
  c.ff_dim = j.value("ff_dim", d.ff_dim);
  c.encoder_embed_dropout = j.value("encoder_embed_dropout", d.encoder_embed_dropout);
  c.encoder_gnn_dropout = j.value("encoder_gnn_dropout", d.encoder_gnn_dropout);
  c.encoder_block_dropout = j.value("encoder_block_dropout", d.encoder_block_dropout);
  c.decoder_dropout = j.value("decoder_dropout", d.decoder_dropout);
  c.gnn_input = j.value("gnn_input", d.gnn_input);
}

}  // namespace cktgen
