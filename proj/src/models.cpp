#include "spurlens/models.hpp"

#include <cmath>
#include <numeric>

#include "spurlens/rng.hpp"

namespace spurlens {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

Index SmallCnnConfig::feature_size() const {
  Index size = image_size;
  for (const ConvBlock& b : blocks) size = (size + 2 * (b.kernel / 2) - b.kernel) / b.stride + 1;
  return size;
}

void SmallCnnConfig::validate() const {
  if (in_channels < 1 || image_size < 1) throw ConfigError("cnn: input shape must be positive");
  if (blocks.empty()) throw ConfigError("cnn: at least one conv block is required");
  if (num_classes < 2) throw ConfigError("cnn: need at least two classes");
  Index size = image_size;
  for (const ConvBlock& b : blocks) {
    if (b.out_channels < 1 || b.kernel < 1 || b.stride < 1) throw ConfigError("cnn: conv block fields must be positive");
    if (b.kernel > size + 2 * (b.kernel / 2)) throw ConfigError("cnn: kernel larger than its padded input");
    size = (size + 2 * (b.kernel / 2) - b.kernel) / b.stride + 1;
  }
  if (embed_dim() <= 0) throw ConfigError("cnn: penultimate dim must be positive");
  if (!(input_std > 0.0)) throw ConfigError("cnn: input_std must be positive");
}

void SmallVitConfig::validate() const {
  if (in_channels < 1 || image_size < 1 || patch_size < 1) throw ConfigError("vit: input shape must be positive");
  if (image_size % patch_size != 0) {
    throw ConfigError("vit: image size " + std::to_string(image_size) + " not divisible by patch size " +
                      std::to_string(patch_size));
  }
  if (embed_dim < 1 || heads < 1 || layers < 1 || mlp_dim < 1) throw ConfigError("vit: sizes must be positive");
  if (embed_dim % heads != 0) {
    throw ConfigError("vit: embed dim " + std::to_string(embed_dim) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (num_classes < 2) throw ConfigError("vit: need at least two classes");
  if (!(input_std > 0.0)) throw ConfigError("vit: input_std must be positive");
}

nlohmann::json config_to_json(const ModelConfig& config) {
  return std::visit(
      Overloaded{[](const SmallCnnConfig& c) {
                   nlohmann::json blocks = nlohmann::json::array();
                   for (const ConvBlock& b : c.blocks) {
                     blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride}});
                   }
                   return nlohmann::json{{"family", "cnn"},
                                         {"in_channels", c.in_channels},
                                         {"image_size", c.image_size},
                                         {"blocks", blocks},
                                         {"num_classes", c.num_classes},
                                         {"input_mean", c.input_mean},
                                         {"input_std", c.input_std}};
                 },
                 [](const SmallVitConfig& c) {
                   return nlohmann::json{{"family", "vit"},         {"in_channels", c.in_channels},
                                         {"image_size", c.image_size}, {"patch_size", c.patch_size},
                                         {"embed_dim", c.embed_dim},   {"heads", c.heads},
                                         {"layers", c.layers},         {"mlp_dim", c.mlp_dim},
                                         {"num_classes", c.num_classes},
                                         {"input_mean", c.input_mean},
                                         {"input_std", c.input_std}};
                 }},
      config);
}

ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    const std::string family = j.at("family");
    if (family == "cnn") {
      SmallCnnConfig c;
      c.in_channels = j.at("in_channels");
      c.image_size = j.at("image_size");
      c.num_classes = j.at("num_classes");
      c.input_mean = j.at("input_mean");
      c.input_std = j.at("input_std");
      c.blocks.clear();
      for (const auto& b : j.at("blocks")) c.blocks.push_back({b.at("out_channels"), b.at("kernel"), b.at("stride")});
      c.validate();
      return c;
    }
    if (family == "vit") {
      SmallVitConfig c;
      c.in_channels = j.at("in_channels");
      c.image_size = j.at("image_size");
      c.patch_size = j.at("patch_size");
      c.embed_dim = j.at("embed_dim");
      c.heads = j.at("heads");
      c.layers = j.at("layers");
      c.mlp_dim = j.at("mlp_dim");
      c.num_classes = j.at("num_classes");
      c.input_mean = j.at("input_mean");
      c.input_std = j.at("input_std");
      c.validate();
      return c;
    }
    throw FormatError("unknown model family '" + family + "'");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed architecture descriptor: ") + e.what());
  }
}

std::string architecture_string(const ModelConfig& config) { return config_to_json(config).dump(); }

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config) {
  std::vector<std::pair<std::string, Shape>> out;
  std::visit(Overloaded{[&](const SmallCnnConfig& c) {
                          Index in = c.in_channels;
                          for (std::size_t b = 0; b < c.blocks.size(); ++b) {
                            const ConvBlock& blk = c.blocks[b];
                            const std::string p = "conv" + std::to_string(b);
                            out.emplace_back(p + ".weight", Shape{blk.out_channels, in, blk.kernel, blk.kernel});
                            out.emplace_back(p + ".bias", Shape{blk.out_channels});
                            in = blk.out_channels;
                          }
                          out.emplace_back("head.weight", Shape{c.embed_dim(), c.num_classes});
                          out.emplace_back("head.bias", Shape{c.num_classes});
                        },
                        [&](const SmallVitConfig& c) {
                          const Index d = c.embed_dim;
                          out.emplace_back("patch_embed.weight", Shape{c.in_channels * c.patch_size * c.patch_size, d});
                          out.emplace_back("patch_embed.bias", Shape{d});
                          out.emplace_back("cls_token", Shape{1, d});
                          out.emplace_back("pos_embed", Shape{c.tokens(), d});
                          for (Index l = 0; l < c.layers; ++l) {
                            const std::string p = "block" + std::to_string(l);
                            out.emplace_back(p + ".ln1.gamma", Shape{d});
                            out.emplace_back(p + ".ln1.beta", Shape{d});
                            for (const char* proj : {"q", "k", "v", "o"}) {
                              out.emplace_back(p + ".attn." + proj + ".weight", Shape{d, d});
                              out.emplace_back(p + ".attn." + proj + ".bias", Shape{d});
                            }
                            out.emplace_back(p + ".ln2.gamma", Shape{d});
                            out.emplace_back(p + ".ln2.beta", Shape{d});
                            out.emplace_back(p + ".mlp.fc1.weight", Shape{d, c.mlp_dim});
                            out.emplace_back(p + ".mlp.fc1.bias", Shape{c.mlp_dim});
                            out.emplace_back(p + ".mlp.fc2.weight", Shape{c.mlp_dim, d});
                            out.emplace_back(p + ".mlp.fc2.bias", Shape{d});
                          }
                          out.emplace_back("ln_final.gamma", Shape{d});
                          out.emplace_back("ln_final.beta", Shape{d});
                          out.emplace_back("head.weight", Shape{d, c.num_classes});
                          out.emplace_back("head.bias", Shape{c.num_classes});
                        }},
             config);
  return out;
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  std::visit([](const auto& c) { c.validate(); }, config);
  Rng rng(derive_seed(seed, 0x1417));
  std::vector<Parameter> params;
  for (auto& [name, shape] : parameter_layout(config)) {
    Tensorf t(shape);
    if (name.ends_with(".weight")) {
      // Conv kernels are [F×C×k×k]; linear weights are [in×out].
      const Index fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-bound, bound));
    } else if (name == "cls_token" || name == "pos_embed") {
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(0.02 * rng.normal());
    } else if (name.ends_with(".gamma")) {
      t.fill(1.0f);
    }
    params.push_back({name, std::move(t)});
  }
  return Model(config, std::move(params));
}

Model::Model(ModelConfig config, std::vector<Parameter> parameters)
    : config_(std::move(config)), parameters_(std::move(parameters)) {
  std::visit([](const auto& c) { c.validate(); }, config_);
  const auto layout = parameter_layout(config_);
  if (layout.size() != parameters_.size()) {
    throw ArchitectureError("expected " + std::to_string(layout.size()) + " parameters, got " +
                            std::to_string(parameters_.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].first != parameters_[i].name || layout[i].second != parameters_[i].value.shape()) {
      throw ArchitectureError("parameter " + std::to_string(i) + " is " + parameters_[i].name + " " +
                              shape_string(parameters_[i].value.shape()) + ", expected " + layout[i].first + " " +
                              shape_string(layout[i].second));
    }
  }
}

ModelFamily Model::family() const {
  return std::holds_alternative<SmallCnnConfig>(config_) ? ModelFamily::Cnn : ModelFamily::Vit;
}

Index Model::embed_dim() const {
  return std::visit(Overloaded{[](const SmallCnnConfig& c) { return c.embed_dim(); },
                               [](const SmallVitConfig& c) { return c.embed_dim; }},
                    config_);
}

Index Model::num_classes() const {
  return std::visit([](const auto& c) { return c.num_classes; }, config_);
}

Index Model::in_channels() const {
  return std::visit([](const auto& c) { return c.in_channels; }, config_);
}

Index Model::image_size() const {
  return std::visit([](const auto& c) { return c.image_size; }, config_);
}

std::size_t Model::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < parameters_.size(); ++i) {
    if (parameters_[i].name == name) return i;
  }
  throw IndexError("no parameter named '" + std::string(name) + "'");
}

Parameter& Model::parameter(std::string_view name) { return parameters_[index_of(name)]; }
const Parameter& Model::parameter(std::string_view name) const { return parameters_[index_of(name)]; }

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter& p : parameters_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <class Scalar>
std::vector<Var<Scalar>> bind_parameters(Tape<Scalar>& tape, const Model& model, bool requires_grad) {
  std::vector<Var<Scalar>> vars;
  vars.reserve(model.parameters().size());
  for (const Parameter& p : model.parameters()) {
    if constexpr (std::is_same_v<Scalar, float>) {
      vars.push_back(tape.leaf(p.value, requires_grad));
    } else {
      vars.push_back(tape.leaf(p.value.template cast<Scalar>(), requires_grad));
    }
  }
  return vars;
}

namespace {

template <class Scalar>
void check_images(const Model& model, const Var<Scalar>& images) {
  const Shape& s = images.shape();
  const Shape expected{model.in_channels(), model.image_size(), model.image_size()};
  if (s.size() != 4 || !std::equal(expected.begin(), expected.end(), s.begin() + 1)) {
    throw DimensionError("model expects images [N×" + std::to_string(expected[0]) + "×" +
                         std::to_string(expected[1]) + "×" + std::to_string(expected[2]) + "], got " +
                         shape_string(s));
  }
}

template <class Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  return add_bias(matmul(x, w), b, 1);
}

template <class Scalar>
Var<Scalar> standardize(const Var<Scalar>& images, double mean, double std) {
  const Index channels = images.shape()[1];
  Var<Scalar> shift = images.tape().constant(Tensor<Scalar>({channels}, static_cast<Scalar>(-mean / std)));
  return add_bias(scale(images, static_cast<Scalar>(1.0 / std)), shift, 1);
}

template <class Scalar>
Activations<Scalar> forward_cnn(const SmallCnnConfig& c, const std::vector<Var<Scalar>>& p, const Var<Scalar>& images,
                                const ForwardOptions& options) {
  Activations<Scalar> act;
  Var<Scalar> h = standardize(images, c.input_mean, c.input_std);
  for (std::size_t b = 0; b < c.blocks.size(); ++b) {
    const ConvBlock& blk = c.blocks[b];
    h = relu(add_bias(conv2d(h, p[2 * b], blk.stride, blk.kernel / 2), p[2 * b + 1], 1));
  }
  if (options.cut_at) {
    h = h.tape().leaf(h.value(), true);
    act.cut = h;
  }
  act.feature_maps = h;
  const Shape& s = h.shape();
  act.embedding = mean_last(reshape(h, {s[0], s[1], s[2] * s[3]}));
  const std::size_t head = 2 * c.blocks.size();
  act.logits = linear(act.embedding, p[head], p[head + 1]);
  return act;
}

template <class Scalar>
Activations<Scalar> forward_vit(const SmallVitConfig& c, const std::vector<Var<Scalar>>& p, const Var<Scalar>& images,
                                const ForwardOptions& options) {
  if (options.cut_at && (*options.cut_at < 0 || *options.cut_at >= c.layers)) {
    throw IndexError("vit: layer " + std::to_string(*options.cut_at) + " outside [0, " + std::to_string(c.layers) + ")");
  }
  Activations<Scalar> act;
  Tape<Scalar>& tape = images.tape();
  const Index n = images.shape()[0];
  const Index g = c.grid(), ps = c.patch_size, d = c.embed_dim, t_count = c.tokens();
  const Index heads = c.heads, dh = d / heads;

  Var<Scalar> patches = reshape(standardize(images, c.input_mean, c.input_std), {n, c.in_channels, g, ps, g, ps});
  patches = reshape(permute(patches, {0, 2, 4, 1, 3, 5}), {n * g * g, c.in_channels * ps * ps});
  patches = reshape(linear(patches, p[0], p[1]), {n, g * g, d});
  const std::vector<Index> zeros(static_cast<std::size_t>(n), 0);
  Var<Scalar> cls = reshape(embedding(p[2], zeros), {n, 1, d});
  Var<Scalar> t = add_bias(concat(cls, patches, 1), p[3], 1);

  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  auto split_heads = [&](const Var<Scalar>& x) {
    return reshape(permute(reshape(x, {n, t_count, heads, dh}), {0, 2, 1, 3}), {n * heads, t_count, dh});
  };

  std::size_t k = 4;
  for (Index l = 0; l < c.layers; ++l, k += 16) {
    act.block_inputs.push_back(t);
    Var<Scalar> normed = layer_norm(t, p[k], p[k + 1]);
    if (options.cut_at && *options.cut_at == l) {
      normed = tape.leaf(normed.value(), true);
      act.cut = normed;
    }
    act.block_features.push_back(normed);
    Var<Scalar> a = reshape(normed, {n * t_count, d});
    Var<Scalar> q = split_heads(linear(a, p[k + 2], p[k + 3]));
    Var<Scalar> key = split_heads(linear(a, p[k + 4], p[k + 5]));
    Var<Scalar> v = split_heads(linear(a, p[k + 6], p[k + 7]));
    Var<Scalar> weights = softmax(scale(matmul(q, permute(key, {0, 2, 1})), inv_sqrt));
    act.attention.push_back(reshape(weights, {n, heads, t_count, t_count}));
    Var<Scalar> ctx = reshape(permute(reshape(matmul(weights, v), {n, heads, t_count, dh}), {0, 2, 1, 3}),
                              {n * t_count, d});
    t = add(t, reshape(linear(ctx, p[k + 8], p[k + 9]), {n, t_count, d}));

    Var<Scalar> m = reshape(layer_norm(t, p[k + 10], p[k + 11]), {n * t_count, d});
    m = linear(gelu(linear(m, p[k + 12], p[k + 13])), p[k + 14], p[k + 15]);
    t = add(t, reshape(m, {n, t_count, d}));
  }
  Var<Scalar> final_tokens = layer_norm(t, p[k], p[k + 1]);
  act.embedding = reshape(slice(final_tokens, 1, 0, 1), {n, d});
  act.logits = linear(act.embedding, p[k + 2], p[k + 3]);
  return act;
}

}  // namespace

template <class Scalar>
Activations<Scalar> forward(const Model& model, const std::vector<Var<Scalar>>& params, const Var<Scalar>& images,
                            const ForwardOptions& options) {
  if (params.size() != model.parameters().size()) {
    throw ContractError("forward: expected " + std::to_string(model.parameters().size()) + " parameter bindings, got " +
                        std::to_string(params.size()));
  }
  check_images(model, images);
  return std::visit(
      Overloaded{[&](const SmallCnnConfig& c) { return forward_cnn(c, params, images, options); },
                 [&](const SmallVitConfig& c) { return forward_vit(c, params, images, options); }},
      model.config());
}

std::pair<Tensorf, ActivationTrace> forward_with_trace(const Model& model, const Tensorf& image, Index token_layer) {
  const Shape expected{model.in_channels(), model.image_size(), model.image_size()};
  if (image.shape() != expected) {
    throw DimensionError("expected image " + shape_string(expected) + ", got " + shape_string(image.shape()));
  }
  Tape<float> tape;
  const auto params = bind_parameters(tape, model, false);
  Shape batched{1};
  batched.insert(batched.end(), expected.begin(), expected.end());
  const auto act = forward(model, params, tape.constant(image.reshaped(batched)));

  ActivationTrace trace;
  const Index d = model.embed_dim();
  trace.embedding = act.embedding.value().reshaped({d});
  if (model.family() == ModelFamily::Cnn) {
    const Shape& s = act.feature_maps.shape();
    trace.feature_maps = act.feature_maps.value().reshaped({s[1], s[2], s[3]});
  } else {
    const Index layers = static_cast<Index>(act.block_features.size());
    const Index layer = token_layer < 0 ? layers - 1 : token_layer;
    if (layer >= layers) throw IndexError("token layer " + std::to_string(layer) + " outside model");
    const Shape& s = act.block_features[layer].shape();
    trace.tokens = act.block_features[layer].value().reshaped({s[1], s[2]});
    trace.token_layer = layer;
    for (const auto& a : act.attention) {
      const Shape& sa = a.shape();
      trace.attention.push_back(a.value().reshaped({sa[1], sa[2], sa[3]}));
    }
  }
  return {act.logits.value().reshaped({model.num_classes()}), std::move(trace)};
}

Tensorf encode(const Model& model, const Tensorf& image) { return forward_with_trace(model, image).second.embedding; }

Tensorf stack(std::span<const Tensorf> items) {
  if (items.empty()) throw DimensionError("stack of zero tensors");
  const Shape& s = items.front().shape();
  Shape out_shape{static_cast<Index>(items.size())};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensorf out(out_shape);
  const Index each = items.front().size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != s) throw DimensionError("stack: mismatched shapes");
    std::copy_n(items[i].data(), each, out.data() + static_cast<Index>(i) * each);
  }
  return out;
}

namespace {

template <class F>
Tensorf run_chunks(const Model& model, const Tensorf& images, Index chunk, Index width, F&& pick) {
  const Index n = images.dim(0);
  const Index per = images.size() / n;
  Tensorf out({n, width});
  for (Index start = 0; start < n; start += chunk) {
    const Index len = std::min(chunk, n - start);
    Shape s = images.shape();
    s[0] = len;
    std::vector<float> buf(images.data() + start * per, images.data() + (start + len) * per);
    Tape<float> tape;
    const auto params = bind_parameters(tape, model, false);
    const auto act = forward(model, params, tape.constant(Tensorf(s, std::move(buf))));
    const Tensorf& v = pick(act).value();
    std::copy_n(v.data(), len * width, out.data() + start * width);
  }
  return out;
}

}  // namespace

Tensorf predict_logits(const Model& model, const Tensorf& images, Index chunk) {
  return run_chunks(model, images, chunk, model.num_classes(), [](const auto& act) -> const Var<float>& {
    return act.logits;
  });
}

Tensorf encode_batch(const Model& model, const Tensorf& images, Index chunk) {
  return run_chunks(model, images, chunk, model.embed_dim(), [](const auto& act) -> const Var<float>& {
    return act.embedding;
  });
}

template std::vector<Var<float>> bind_parameters(Tape<float>&, const Model&, bool);
template std::vector<Var<double>> bind_parameters(Tape<double>&, const Model&, bool);
template Activations<float> forward(const Model&, const std::vector<Var<float>>&, const Var<float>&,
                                    const ForwardOptions&);
template Activations<double> forward(const Model&, const std::vector<Var<double>>&, const Var<double>&,
                                     const ForwardOptions&);

}  // namespace spurlens
