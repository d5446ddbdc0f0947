#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spurlens/tensor.hpp"

namespace spurlens {

enum class SpuriousStyle { Patch, Background };

std::string to_string(SpuriousStyle style);
SpuriousStyle style_from_string(const std::string& name);

/// Binary H×W map, row-major, one byte per pixel (0 or 1).
using PixelMask = std::vector<std::uint8_t>;

struct LabeledSample {
  Tensorf image;  // [3×S×S], values in [0, 1]
  int y = 0;
  int s = 0;
  int g = 0;  // 2·y + s
  PixelMask mask;
  std::uint64_t id = 0;
};

inline int group_of(int y, int s) { return 2 * y + s; }

struct SpuriousDatasetSpec {
  SpuriousStyle style = SpuriousStyle::Patch;
  Index n_per_class = 200;
  /// Per-class fraction whose spurious attribute agrees with the class.
  /// In one-sided mode: the fraction of class 0 carrying the patch.
  double rho = 0.95;
  /// Patch only ever appears on class 0; class 1 is never patched.
  bool one_sided = false;
  Index image_size = 32;
  Index patch_size = 6;
  Index patch_jitter = 2;
  std::array<float, 3> patch_color{0.95f, 0.15f, 0.85f};
  /// Shape intensity above the background.
  float core_contrast = 0.6f;
  /// Half-width of the uniform pixel noise.
  float noise = 0.1f;
  std::uint64_t seed = 0;
  bool test_balanced = false;

  void validate() const;
};

struct Dataset {
  Index channels = 3;
  Index image_size = 32;
  std::vector<LabeledSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  /// Sample counts for groups 0..3.
  std::array<Index, 4> census() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  /// [n×C×S×S] batch of the selected samples (all when `indices` is empty).
  Tensorf images(std::span<const std::size_t> indices = {}) const;
  std::vector<int> labels(std::span<const std::size_t> indices = {}) const;
};

/// Counts per group implied by a spec: majority ⌊ρ·n⌋, minority the rest.
std::array<Index, 4> expected_census(const SpuriousDatasetSpec& spec);

/// Renders one sample from its private stream. Geometry, patch placement and
/// noise are drawn identically whatever `s` is, so flipping `s` changes only
/// the spurious pixels.
LabeledSample render_sample(const SpuriousDatasetSpec& spec, int y, int s, std::uint64_t stream);

Dataset generate_dataset(const SpuriousDatasetSpec& spec);

/// Four groups of `n_per_group`, spurious attribute assigned independently
/// of class.
Dataset build_balanced_testset(const SpuriousDatasetSpec& spec, Index n_per_group);

struct SplitResult {
  Dataset subset;
  Dataset remainder;
  std::vector<std::size_t> subset_indices;
};

/// Draws `per_group` samples from each requested group (default: every
/// nonempty group).
SplitResult balanced_split(const Dataset& dataset, Index per_group, std::uint64_t seed,
                           std::optional<std::vector<int>> groups = std::nullopt);

/// True when every nonempty group has the same count.
bool is_group_balanced(const Dataset& dataset);

/// Alternating run lengths, starting with a (possibly empty) run of zeros.
std::vector<std::uint32_t> rle_encode(const PixelMask& mask);
PixelMask rle_decode(std::span<const std::uint32_t> runs, std::size_t pixels);

inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::vector<std::uint8_t> bytes, const std::string& origin = "dataset");
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

std::string census_csv(const std::array<Index, 4>& census);

}  // namespace spurlens
