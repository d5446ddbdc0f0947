#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "spurlens/autodiff.hpp"

namespace spurlens {

enum class ModelFamily { Cnn, Vit };

struct ConvBlock {
  Index out_channels = 16;
  Index kernel = 3;
  Index stride = 1;
};

/// conv → relu blocks (padding kernel/2), global average pool, linear head.
struct SmallCnnConfig {
  Index in_channels = 3;
  Index image_size = 32;
  std::vector<ConvBlock> blocks{{16, 3, 1}, {32, 3, 2}, {64, 3, 2}};
  Index num_classes = 2;
  /// Fixed input standardization (x - mean) / std applied before the first conv.
  double input_mean = 0.5;
  double input_std = 0.25;

  Index embed_dim() const { return blocks.empty() ? 0 : blocks.back().out_channels; }
  /// Spatial side of the final feature maps.
  Index feature_size() const;
  void validate() const;
};

/// Pre-norm transformer over patch tokens plus a class token.
struct SmallVitConfig {
  Index in_channels = 3;
  Index image_size = 32;
  Index patch_size = 4;
  Index embed_dim = 64;
  Index heads = 4;
  Index layers = 4;
  Index mlp_dim = 128;
  Index num_classes = 2;
  double input_mean = 0.5;
  double input_std = 0.25;

  Index grid() const { return image_size / patch_size; }
  Index patches() const { return grid() * grid(); }
  Index tokens() const { return patches() + 1; }
  void validate() const;
};

using ModelConfig = std::variant<SmallCnnConfig, SmallVitConfig>;

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);
/// Canonical (sorted-key) JSON descriptor stored in checkpoint headers.
std::string architecture_string(const ModelConfig& config);

struct Parameter {
  std::string name;
  Tensorf value;
};

/// Feature extractor plus linear head ("head.weight" [d×C], "head.bias" [C]).
class Model {
 public:
  /// He-uniform conv/linear weights, N(0, 0.02²) ViT embeddings, zero biases.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  /// Adopts existing parameters; names and shapes must match the layout.
  Model(ModelConfig config, std::vector<Parameter> parameters);

  ModelFamily family() const;
  const ModelConfig& config() const { return config_; }
  Index embed_dim() const;
  Index num_classes() const;
  Index in_channels() const;
  Index image_size() const;
  std::string architecture() const { return architecture_string(config_); }

  std::vector<Parameter>& parameters() { return parameters_; }
  const std::vector<Parameter>& parameters() const { return parameters_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;
  std::size_t parameter_count() const;

  Tensorf& head_weight() { return parameter("head.weight").value; }
  const Tensorf& head_weight() const { return parameter("head.weight").value; }
  Tensorf& head_bias() { return parameter("head.bias").value; }
  const Tensorf& head_bias() const { return parameter("head.bias").value; }

  static bool is_head_parameter(std::string_view name) { return name.starts_with("head."); }

 private:
  ModelConfig config_;
  std::vector<Parameter> parameters_;
};

/// Expected (name, shape) layout for a config, in parameter order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

/// One leaf per parameter, in parameter order.
template <class Scalar>
std::vector<Var<Scalar>> bind_parameters(Tape<Scalar>& tape, const Model& model, bool requires_grad);

struct ForwardOptions {
  /// Cut the graph and re-root a fresh grad-requiring leaf at a trace point:
  /// CNN → final feature maps (value ignored); ViT → the normalized tokens
  /// entering attention in block `cut_at`.
  std::optional<Index> cut_at;
};

template <class Scalar>
struct Activations {
  Var<Scalar> logits;                    // [N×C]
  Var<Scalar> embedding;                 // z, [N×d]
  Var<Scalar> feature_maps;              // CNN: [N×C×h×w]
  std::vector<Var<Scalar>> block_inputs; // ViT: per block residual stream, [N×T×d]
  std::vector<Var<Scalar>> block_features;  // ViT: per block, first layer norm output [N×T×d]
  std::vector<Var<Scalar>> attention;    // ViT: per block, [N×H×T×T]
  Var<Scalar> cut;                       // the re-rooted leaf when cut_at is set
};

/// Batched forward pass. `images` is [N×C×H×W]; `params` from bind_parameters
/// (or any same-shaped substitutes, e.g. masked weights).
template <class Scalar>
Activations<Scalar> forward(const Model& model, const std::vector<Var<Scalar>>& params, const Var<Scalar>& images,
                            const ForwardOptions& options = {});

/// Per-image trace: penultimate z, CNN feature maps, ViT token features (the
/// normalized tokens entering attention at `token_layer`) and per-layer
/// attention [H×T×T] (post-softmax).
struct ActivationTrace {
  Tensorf embedding;
  Tensorf feature_maps;
  Tensorf tokens;
  Index token_layer = -1;
  std::vector<Tensorf> attention;
};

/// Image [C×H×W]. `token_layer` < 0 selects the last block.
std::pair<Tensorf, ActivationTrace> forward_with_trace(const Model& model, const Tensorf& image,
                                                       Index token_layer = -1);

Tensorf encode(const Model& model, const Tensorf& image);

/// Stacks same-shaped tensors along a new leading axis.
Tensorf stack(std::span<const Tensorf> items);

/// Images [N×C×H×W] → logits [N×C], evaluated in chunks.
Tensorf predict_logits(const Model& model, const Tensorf& images, Index chunk = 64);
/// Images [N×C×H×W] → embeddings [N×d].
Tensorf encode_batch(const Model& model, const Tensorf& images, Index chunk = 64);

}  // namespace spurlens
