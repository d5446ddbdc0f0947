#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "spurlens/data.hpp"
#include "spurlens/models.hpp"

namespace spurlens {

/// S×S map in [0, 1], max-normalized; an all-zero map stays all-zero.
struct Heatmap {
  Tensorf values;
  Index neuron = -1;
  std::uint64_t sample = 0;
};

struct BinaryMap {
  PixelMask bits;  // S×S row-major
  Index size = 0;
  double alpha = 0.5;

  Index count() const;
};

/// relu(Σ_c mean(grad_c)·map_c) on [C×h×w] inputs, bilinearly resized to
/// out_size×out_size (half-pixel centers) and max-normalized.
Tensorf cnn_cam(const Tensorf& maps, const Tensorf& grads, Index out_size);
/// Per patch token relu(⟨grad_t, act_t⟩) over a grid×grid layout; class token
/// (row 0) excluded; nearest-neighbour upsampling, max-normalized.
Tensorf vit_cam(const Tensorf& tokens, const Tensorf& grads, Index grid, Index out_size);

Heatmap gradcam_neuron_cnn(const Model& model, const Tensorf& image, Index neuron);
/// `layer` < 0 selects the last transformer block; gradients are taken at
/// that block's normalized tokens entering attention.
Heatmap gradcam_neuron_vit(const Model& model, const Tensorf& image, Index neuron, Index layer = -1);
Heatmap gradcam_neuron(const Model& model, const Tensorf& image, Index neuron, Index layer = -1);

/// Heatmaps of many neurons over a batch, one backward pass per neuron.
class HeatmapBank {
 public:
  HeatmapBank(std::vector<Index> neurons, Index samples, Index size);

  Index samples() const { return samples_; }
  Index size() const { return size_; }
  const std::vector<Index>& neurons() const { return neurons_; }
  std::span<float> map(std::size_t neuron_slot, Index sample);
  std::span<const float> map(std::size_t neuron_slot, Index sample) const;

 private:
  std::vector<Index> neurons_;
  Index samples_;
  Index size_;
  std::vector<float> values_;
};

/// `images` [N×C×S×S]; `neurons` empty means every neuron of z.
HeatmapBank neuron_heatmaps(const Model& model, const Tensorf& images, std::span<const Index> neurons = {},
                            Index layer = -1, Index chunk = 64);

BinaryMap binarize(const Heatmap& hm, double alpha);
BinaryMap binarize(std::span<const float> values, Index size, double alpha);

/// Σ(b⊙m)/Σb for one sample, 0 when b is empty.
double overlap_term(const BinaryMap& b, const PixelMask& mask);
/// Mean of the per-sample overlap terms.
double sscore(std::span<const BinaryMap> maps, std::span<const PixelMask> masks);

double neuron_sscore(const Model& model, std::span<const LabeledSample> samples, Index neuron, double alpha = 0.5,
                     Index layer = -1);

struct SScoreReport {
  double alpha = 0.5;
  Index n = 0;
  std::vector<std::uint64_t> sample_ids;
  std::vector<double> scores;
  std::vector<Index> low, mid, high;
  double mean = 0.0;
};

inline constexpr double kLowBucket = 0.2;
inline constexpr double kHighBucket = 0.7;

/// Scores every neuron of z on N seeded samples that carry a spurious mask.
SScoreReport sscore_report(const Model& model, const Dataset& dataset, Index n = 50, double alpha = 0.5,
                           std::uint64_t seed = 0, Index layer = -1);
/// One report per α, sharing the heatmaps.
std::vector<SScoreReport> sscore_reports(const Model& model, const Dataset& dataset, Index n,
                                         std::span<const double> alphas, std::uint64_t seed = 0, Index layer = -1);
/// Buckets and mean from raw scores.
SScoreReport make_report(std::vector<double> scores, double alpha, std::vector<std::uint64_t> sample_ids);
/// Indices of the eligible (mask-carrying) samples chosen for a report.
std::vector<std::size_t> sscore_sample(const Dataset& dataset, Index n, std::uint64_t seed);

nlohmann::json to_json(const SScoreReport& report);

struct AttentionRow {
  std::vector<float> row;  // full row over all P+1 tokens
  Tensorf grid;            // patch entries as grid×grid
  float cls = 0.0f;        // class-token column
};

/// Row `target` of layer ℓ's attention; `head` nullopt averages the heads.
AttentionRow attention_row_map(const Model& model, const Tensorf& image, Index layer, std::optional<Index> head,
                               Index target);

}  // namespace spurlens
