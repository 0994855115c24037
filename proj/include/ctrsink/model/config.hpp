#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrsink/errors.hpp"
#include "ctrsink/retrieval/retrieval.hpp"

namespace ctrsink {

enum class ArchMode { bidirectional, causal };
enum class Pooling { all_mean, sink_mean, last_token };

NLOHMANN_JSON_SERIALIZE_ENUM(ArchMode, {{ArchMode::bidirectional, "bidirectional"}, {ArchMode::causal, "causal"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Pooling,
                             {{Pooling::all_mean, "all_mean"}, {Pooling::sink_mean, "sink_mean"}, {Pooling::last_token, "last_token"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SinkMode, {{SinkMode::none, "none"},
                                        {SinkMode::generic_sink, "generic_sink"},
                                        {SinkMode::info_sink, "info_sink"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SignalKind, {{SignalKind::temporal, "temporal"},
                                          {SignalKind::similarity, "similarity"},
                                          {SignalKind::random, "random"},
                                          {SignalKind::generic, "generic"}})

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 256;
  ArchMode arch_mode = ArchMode::bidirectional;
  std::size_t sink_embed_dim = 32;
  std::size_t d_max = kDefaultDMax;
  std::vector<std::size_t> bias_layers;  // ascending layer indices hosting the sink bias
  double dropout_p = 0.1;
  Pooling pooling = Pooling::all_mean;

  std::size_t head_dim() const { return d_model / n_heads; }
  bool has_bias(std::size_t layer) const {
    for (auto l : bias_layers)
      if (l == layer) return true;
    return false;
  }
  void enable_bias_everywhere() {
    bias_layers.clear();
    for (std::size_t l = 0; l < n_layers; ++l) bias_layers.push_back(l);
  }
};

// Sink signal-embedding widths used with the pretrained backbones.
inline constexpr std::size_t kEncoderPresetSinkDim = 128;
inline constexpr std::size_t kDecoderPresetSinkDim = 256;

inline void validate(const ModelConfig& c) {
  if (c.d_model == 0 || c.n_heads == 0 || c.d_model % c.n_heads != 0)
    throw InvalidArgument("ModelConfig: d_model must be a positive multiple of n_heads");
  if (c.n_layers == 0 || c.d_ff == 0) throw InvalidArgument("ModelConfig: n_layers and d_ff must be positive");
  if (c.vocab_size == 0) throw InvalidArgument("ModelConfig: vocab_size must be positive");
  if (c.max_positions == 0) throw InvalidArgument("ModelConfig: max_positions must be positive");
  if (c.sink_embed_dim == 0) throw InvalidArgument("ModelConfig: sink_embed_dim must be positive");
  if (c.d_max == 0) throw InvalidArgument("ModelConfig: d_max must be positive");
  if (!(c.dropout_p >= 0.0 && c.dropout_p < 1.0)) throw InvalidArgument("ModelConfig: dropout_p must lie in [0, 1)");
  for (std::size_t i = 0; i < c.bias_layers.size(); ++i) {
    if (c.bias_layers[i] >= c.n_layers) throw InvalidArgument("ModelConfig: bias layer out of range");
    if (i > 0 && c.bias_layers[i] <= c.bias_layers[i - 1])
      throw InvalidArgument("ModelConfig: bias_layers must be strictly ascending");
  }
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d_model", c.d_model},         {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
       {"vocab_size", c.vocab_size},   {"max_positions", c.max_positions},
       {"arch_mode", c.arch_mode},     {"sink_embed_dim", c.sink_embed_dim},
       {"d_max", c.d_max},             {"bias_layers", c.bias_layers},
       {"dropout_p", c.dropout_p},     {"pooling", c.pooling}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_positions").get_to(c.max_positions);
  j.at("arch_mode").get_to(c.arch_mode);
  j.at("sink_embed_dim").get_to(c.sink_embed_dim);
  j.at("d_max").get_to(c.d_max);
  j.at("bias_layers").get_to(c.bias_layers);
  j.at("dropout_p").get_to(c.dropout_p);
  j.at("pooling").get_to(c.pooling);
}

}  // namespace ctrsink
