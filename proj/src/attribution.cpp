#include "spurlens/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "spurlens/rng.hpp"

namespace spurlens {

namespace {

void max_normalize(Tensorf& t) {
  const float peak = t.array().maxCoeff();
  if (peak > 0.0f) {
    t.array() /= peak;
  } else {
    t.fill(0.0f);
  }
}

/// Bilinear resize of an h×w map, half-pixel centers, edge-clamped.
Tensorf bilinear(const float* src, Index h, Index w, Index out) {
  Tensorf dst({out, out});
  auto coord = [](Index p, Index in, Index o, Index& i0, Index& i1, float& frac) {
    float s = (static_cast<float>(p) + 0.5f) * static_cast<float>(in) / static_cast<float>(o) - 0.5f;
    s = std::max(s, 0.0f);
    i0 = std::min(static_cast<Index>(s), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    frac = s - static_cast<float>(i0);
  };
  for (Index r = 0; r < out; ++r) {
    Index r0, r1;
    float fr;
    coord(r, h, out, r0, r1, fr);
    for (Index c = 0; c < out; ++c) {
      Index c0, c1;
      float fc;
      coord(c, w, out, c0, c1, fc);
      const float top = src[r0 * w + c0] * (1 - fc) + src[r0 * w + c1] * fc;
      const float bottom = src[r1 * w + c0] * (1 - fc) + src[r1 * w + c1] * fc;
      dst[r * out + c] = top * (1 - fr) + bottom * fr;
    }
  }
  return dst;
}

Index resolve_layer(const Model& model, Index layer) {
  const auto& c = std::get<SmallVitConfig>(model.config());
  const Index resolved = layer < 0 ? c.layers - 1 : layer;
  if (resolved >= c.layers) {
    throw IndexError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(c.layers) + ")");
  }
  return resolved;
}

void check_neuron(const Model& model, Index neuron) {
  if (neuron < 0 || neuron >= model.embed_dim()) {
    throw IndexError("neuron " + std::to_string(neuron) + " outside [0, " + std::to_string(model.embed_dim()) + ")");
  }
}

Tensorf batch_of_one(const Model& model, const Tensorf& image) {
  const Shape expected{model.in_channels(), model.image_size(), model.image_size()};
  if (image.shape() != expected) {
    throw DimensionError("expected image " + shape_string(expected) + ", got " + shape_string(image.shape()));
  }
  return image.reshaped({1, expected[0], expected[1], expected[2]});
}

}  // namespace

Index BinaryMap::count() const {
  Index n = 0;
  for (std::uint8_t b : bits) n += b;
  return n;
}

Tensorf cnn_cam(const Tensorf& maps, const Tensorf& grads, Index out_size) {
  if (maps.rank() != 3 || maps.shape() != grads.shape()) {
    throw DimensionError("cnn_cam expects matching [C×h×w] maps and grads, got " + shape_string(maps.shape()) +
                         " and " + shape_string(grads.shape()));
  }
  const Index C = maps.dim(0), h = maps.dim(1), w = maps.dim(2), hw = h * w;
  Tensorf cam({h, w});
  for (Index c = 0; c < C; ++c) {
    float weight = 0.0f;
    for (Index k = 0; k < hw; ++k) weight += grads[c * hw + k];
    weight /= static_cast<float>(hw);
    if (weight == 0.0f) continue;
    for (Index k = 0; k < hw; ++k) cam[k] += weight * maps[c * hw + k];
  }
  cam.array() = cam.array().max(0.0f);
  Tensorf out = bilinear(cam.data(), h, w, out_size);
  max_normalize(out);
  return out;
}

Tensorf vit_cam(const Tensorf& tokens, const Tensorf& grads, Index grid, Index out_size) {
  if (tokens.rank() != 2 || tokens.shape() != grads.shape() || tokens.dim(0) != grid * grid + 1) {
    throw DimensionError("vit_cam expects matching [(g²+1)×d] tokens and grads, got " + shape_string(tokens.shape()));
  }
  if (out_size % grid != 0) throw DimensionError("output size must be a multiple of the token grid");
  const Index d = tokens.dim(1), factor = out_size / grid;
  Tensorf out({out_size, out_size});
  for (Index t = 1; t <= grid * grid; ++t) {
    float dot = 0.0f;
    for (Index k = 0; k < d; ++k) dot += grads[t * d + k] * tokens[t * d + k];
    const float v = std::max(dot, 0.0f);
    const Index gr = (t - 1) / grid, gc = (t - 1) % grid;
    for (Index r = gr * factor; r < (gr + 1) * factor; ++r) {
      for (Index c = gc * factor; c < (gc + 1) * factor; ++c) out[r * out_size + c] = v;
    }
  }
  max_normalize(out);
  return out;
}

HeatmapBank::HeatmapBank(std::vector<Index> neurons, Index samples, Index size)
    : neurons_(std::move(neurons)), samples_(samples), size_(size) {
  values_.assign(neurons_.size() * static_cast<std::size_t>(samples * size * size), 0.0f);
}

std::span<float> HeatmapBank::map(std::size_t neuron_slot, Index sample) {
  const std::size_t per = static_cast<std::size_t>(size_ * size_);
  return {values_.data() + (neuron_slot * static_cast<std::size_t>(samples_) + static_cast<std::size_t>(sample)) * per,
          per};
}

std::span<const float> HeatmapBank::map(std::size_t neuron_slot, Index sample) const {
  const std::size_t per = static_cast<std::size_t>(size_ * size_);
  return {values_.data() + (neuron_slot * static_cast<std::size_t>(samples_) + static_cast<std::size_t>(sample)) * per,
          per};
}

HeatmapBank neuron_heatmaps(const Model& model, const Tensorf& images, std::span<const Index> neurons, Index layer,
                            Index chunk) {
  std::vector<Index> ids(neurons.begin(), neurons.end());
  if (ids.empty()) {
    for (Index i = 0; i < model.embed_dim(); ++i) ids.push_back(i);
  }
  for (Index i : ids) check_neuron(model, i);
  if (images.rank() != 4) throw DimensionError("neuron_heatmaps expects [N×C×H×W] images");
  const bool cnn = model.family() == ModelFamily::Cnn;
  ForwardOptions opts;
  opts.cut_at = cnn ? 0 : resolve_layer(model, layer);
  const Index n = images.dim(0), S = model.image_size(), per = images.size() / n;
  HeatmapBank bank(ids, n, S);

  for (Index start = 0; start < n; start += chunk) {
    const Index len = std::min(chunk, n - start);
    Shape s = images.shape();
    s[0] = len;
    Tensorf part(s, std::vector<float>(images.data() + start * per, images.data() + (start + len) * per));
    Tape<float> tape;
    const auto params = bind_parameters(tape, model, false);
    const auto act = forward(model, params, tape.constant(std::move(part)), opts);
    // Copied: recording the per-neuron roots below may reallocate tape storage.
    const Tensorf value = act.cut.value();
    const Shape& cs = value.shape();
    const Shape item_shape(cs.begin() + 1, cs.end());
    const Index item = value.size() / len;

    for (std::size_t slot = 0; slot < ids.size(); ++slot) {
      tape.zero_grad();
      // Samples do not interact, so one backward of the batch sum gives every
      // sample's own gradient.
      tape.backward(sum(slice(act.embedding, 1, ids[slot], 1)));
      const Tensorf& grad = act.cut.grad();
      for (Index j = 0; j < len; ++j) {
        Tensorf v(item_shape, std::vector<float>(value.data() + j * item, value.data() + (j + 1) * item));
        Tensorf g(item_shape, std::vector<float>(grad.data() + j * item, grad.data() + (j + 1) * item));
        const Tensorf cam =
            cnn ? cnn_cam(v, g, S) : vit_cam(v, g, std::get<SmallVitConfig>(model.config()).grid(), S);
        std::copy(cam.data(), cam.data() + cam.size(), bank.map(slot, start + j).begin());
      }
    }
  }
  return bank;
}

Heatmap gradcam_neuron(const Model& model, const Tensorf& image, Index neuron, Index layer) {
  check_neuron(model, neuron);
  const Index idx[1] = {neuron};
  const HeatmapBank bank = neuron_heatmaps(model, batch_of_one(model, image), idx, layer);
  const Index S = model.image_size();
  const auto m = bank.map(0, 0);
  return Heatmap{Tensorf({S, S}, std::vector<float>(m.begin(), m.end())), neuron, 0};
}

Heatmap gradcam_neuron_cnn(const Model& model, const Tensorf& image, Index neuron) {
  if (model.family() != ModelFamily::Cnn) throw FamilyError("gradcam_neuron_cnn requires a CNN model");
  return gradcam_neuron(model, image, neuron);
}

Heatmap gradcam_neuron_vit(const Model& model, const Tensorf& image, Index neuron, Index layer) {
  if (model.family() != ModelFamily::Vit) throw FamilyError("gradcam_neuron_vit requires a ViT model");
  resolve_layer(model, layer);
  return gradcam_neuron(model, image, neuron, layer);
}

BinaryMap binarize(std::span<const float> values, Index size, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ContractError("alpha must lie in (0, 1], got " + std::to_string(alpha));
  if (static_cast<Index>(values.size()) != size * size) throw DimensionError("binarize: map is not size×size");
  BinaryMap b;
  b.size = size;
  b.alpha = alpha;
  b.bits.resize(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) b.bits[k] = static_cast<double>(values[k]) >= alpha;
  return b;
}

BinaryMap binarize(const Heatmap& hm, double alpha) {
  if (hm.values.rank() != 2 || hm.values.dim(0) != hm.values.dim(1)) throw DimensionError("heatmap must be square");
  return binarize(hm.values.values(), hm.values.dim(0), alpha);
}

double overlap_term(const BinaryMap& b, const PixelMask& mask) {
  if (b.bits.size() != mask.size()) throw DimensionError("binary map and mask differ in size");
  std::uint64_t active = 0, inside = 0;
  for (std::size_t k = 0; k < mask.size(); ++k) {
    active += b.bits[k];
    inside += b.bits[k] & (mask[k] ? 1 : 0);
  }
  return active == 0 ? 0.0 : static_cast<double>(inside) / static_cast<double>(active);
}

double sscore(std::span<const BinaryMap> maps, std::span<const PixelMask> masks) {
  if (maps.empty()) throw ContractError("s-score needs at least one sample");
  if (maps.size() != masks.size()) throw ContractError("s-score: maps and masks differ in count");
  double total = 0.0;
  for (std::size_t j = 0; j < maps.size(); ++j) total += overlap_term(maps[j], masks[j]);
  return total / static_cast<double>(maps.size());
}

double neuron_sscore(const Model& model, std::span<const LabeledSample> samples, Index neuron, double alpha,
                     Index layer) {
  if (samples.empty()) throw ContractError("neuron_sscore: no samples");
  check_neuron(model, neuron);
  std::vector<Tensorf> imgs;
  std::vector<PixelMask> masks;
  for (const LabeledSample& s : samples) {
    imgs.push_back(s.image);
    masks.push_back(s.mask);
  }
  const Index idx[1] = {neuron};
  const HeatmapBank bank = neuron_heatmaps(model, stack(imgs), idx, layer);
  std::vector<BinaryMap> maps;
  for (Index j = 0; j < bank.samples(); ++j) maps.push_back(binarize(bank.map(0, j), bank.size(), alpha));
  return sscore(maps, masks);
}

std::vector<std::size_t> sscore_sample(const Dataset& dataset, Index n, std::uint64_t seed) {
  if (n < 1) throw ContractError("s-score report needs n >= 1");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& m = dataset.samples[i].mask;
    if (dataset.samples[i].s == 1 && std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; })) {
      eligible.push_back(i);
    }
  }
  if (static_cast<Index>(eligible.size()) < n) {
    throw ContractError("s-score report needs " + std::to_string(n) + " mask-carrying samples, dataset has " +
                        std::to_string(eligible.size()));
  }
  Rng rng(derive_seed(seed, 0x5C0E));
  rng.shuffle(eligible);
  eligible.resize(static_cast<std::size_t>(n));
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

SScoreReport make_report(std::vector<double> scores, double alpha, std::vector<std::uint64_t> sample_ids) {
  SScoreReport r;
  r.alpha = alpha;
  r.n = static_cast<Index>(sample_ids.size());
  r.sample_ids = std::move(sample_ids);
  r.scores = std::move(scores);
  double total = 0.0;
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    const double s = r.scores[i];
    total += s;
    (s < kLowBucket ? r.low : s > kHighBucket ? r.high : r.mid).push_back(static_cast<Index>(i));
  }
  r.mean = r.scores.empty() ? 0.0 : total / static_cast<double>(r.scores.size());
  return r;
}

std::vector<SScoreReport> sscore_reports(const Model& model, const Dataset& dataset, Index n,
                                         std::span<const double> alphas, std::uint64_t seed, Index layer) {
  const std::vector<std::size_t> chosen = sscore_sample(dataset, n, seed);
  std::vector<std::uint64_t> ids;
  std::vector<PixelMask> masks;
  for (std::size_t i : chosen) {
    ids.push_back(dataset.samples[i].id);
    masks.push_back(dataset.samples[i].mask);
  }
  const HeatmapBank bank = neuron_heatmaps(model, dataset.images(chosen), {}, layer);
  std::vector<SScoreReport> out;
  for (double alpha : alphas) {
    std::vector<double> scores;
    for (std::size_t slot = 0; slot < bank.neurons().size(); ++slot) {
      std::vector<BinaryMap> maps;
      for (Index j = 0; j < bank.samples(); ++j) maps.push_back(binarize(bank.map(slot, j), bank.size(), alpha));
      scores.push_back(sscore(maps, masks));
    }
    out.push_back(make_report(std::move(scores), alpha, ids));
  }
  return out;
}

SScoreReport sscore_report(const Model& model, const Dataset& dataset, Index n, double alpha, std::uint64_t seed,
                           Index layer) {
  const double alphas[1] = {alpha};
  return std::move(sscore_reports(model, dataset, n, alphas, seed, layer).front());
}

nlohmann::json to_json(const SScoreReport& report) {
  return {{"schema", 1},
          {"alpha", report.alpha},
          {"n", report.n},
          {"sample_ids", report.sample_ids},
          {"scores", report.scores},
          {"buckets", {{"low", report.low}, {"mid", report.mid}, {"high", report.high}}},
          {"mean", report.mean}};
}

AttentionRow attention_row_map(const Model& model, const Tensorf& image, Index layer, std::optional<Index> head,
                               Index target) {
  if (model.family() != ModelFamily::Vit) throw FamilyError("attention maps require a ViT model");
  const auto& c = std::get<SmallVitConfig>(model.config());
  const Index l = resolve_layer(model, layer);
  const Index T = c.tokens();
  if (target < 0 || target >= T) throw IndexError("target token " + std::to_string(target) + " outside [0, " +
                                                  std::to_string(T) + ")");
  if (head && (*head < 0 || *head >= c.heads)) throw IndexError("head " + std::to_string(*head) + " out of range");
  const auto trace = forward_with_trace(model, image).second;
  const Tensorf& a = trace.attention[static_cast<std::size_t>(l)];

  AttentionRow out;
  out.row.assign(static_cast<std::size_t>(T), 0.0f);
  if (head) {
    for (Index k = 0; k < T; ++k) out.row[k] = a[(*head * T + target) * T + k];
  } else {
    for (Index k = 0; k < T; ++k) {
      float s = 0.0f;
      for (Index h = 0; h < c.heads; ++h) s += a[(h * T + target) * T + k];
      out.row[k] = s / static_cast<float>(c.heads);
    }
  }
  out.cls = out.row[0];
  out.grid = Tensorf({c.grid(), c.grid()}, std::vector<float>(out.row.begin() + 1, out.row.end()));
  return out;
}

}  // namespace spurlens
