#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "spurlens/attribution.hpp"
#include "spurlens/data.hpp"
#include "spurlens/models.hpp"

namespace spurlens {

struct EmbeddingSet {
  Eigen::MatrixXd rows;  // N×d
  std::vector<int> y, s, g;
  std::vector<std::uint64_t> ids;
  std::string source;
};

/// Row j is encode(model, x_j), widened to double.
EmbeddingSet export_embeddings(const Model& model, const Dataset& dataset, std::string source = "");

std::string embeddings_csv(const EmbeddingSet& e);
EmbeddingSet parse_embeddings_csv(const std::string& text);

struct TsneConfig {
  double perplexity = 30.0;
  Index iterations = 500;
  /// Unset: max(N / exaggeration / 4, 50).
  std::optional<double> learning_rate;
  double exaggeration = 12.0;
  Index exaggeration_iterations = 100;
  Index momentum_switch = 250;
  std::uint64_t seed = 0;
};

inline constexpr Index kTsneMaxPoints = 2000;

struct Projection2D {
  Eigen::MatrixXd coords;  // N×2
  double kl = 0.0;
  TsneConfig config;
  double learning_rate = 0.0;  // as used
  /// KL after every iteration from the end of exaggeration on; entry 0 is
  /// the value at the switch.
  std::vector<double> kl_trace;
};

/// Exact t-SNE. After exaggeration every step is backtracked until the KL
/// divergence does not rise.
Projection2D tsne_project(const Eigen::MatrixXd& points, const TsneConfig& config = {});
Projection2D tsne_project(const EmbeddingSet& e, const TsneConfig& config = {});

/// Symmetric joint affinities P (N×N, zero diagonal, sums to 1).
Eigen::MatrixXd tsne_affinities(const Eigen::MatrixXd& points, double perplexity);
double tsne_kl(const Eigen::MatrixXd& p, const Eigen::MatrixXd& coords);

/// Mean silhouette with Euclidean distance; members of singleton clusters
/// score 0.
double silhouette(const Eigen::MatrixXd& points, std::span<const int> labels);

enum class ClusterBy { Label, Spurious };
double cluster_alignment(const EmbeddingSet& e, ClusterBy by);
double cluster_alignment(const Projection2D& p, const EmbeddingSet& e, ClusterBy by);

/// 8-bit binary PGM, pixel = round(255·clamp(v, 0, 1)). `grid` is [H×W].
std::vector<std::uint8_t> encode_pgm(const Tensorf& grid);
/// Inverse of encode_pgm (values byte/255).
Tensorf decode_pgm(std::span<const std::uint8_t> bytes);

/// Side-by-side panels of equal height, left to right.
Tensorf compose_panels(std::span<const Tensorf> panels);
/// Channel-mean grayscale of a [3×H×W] image.
Tensorf grayscale(const Tensorf& image);
Tensorf mask_grid(const PixelMask& mask, Index size);

void render_heatmap(const Heatmap& hm, const std::filesystem::path& path, const LabeledSample* overlay = nullptr);
void render_heatmap(const BinaryMap& map, const std::filesystem::path& path, const LabeledSample* overlay = nullptr);
/// Patch grid of an attention row, scaled so its largest entry is white and
/// upsampled to image resolution.
void render_heatmap(const AttentionRow& row, const std::filesystem::path& path, Index image_size,
                    const LabeledSample* overlay = nullptr);

nlohmann::json to_json(const Projection2D& p);
std::string projection_csv(const Projection2D& p, const EmbeddingSet& e);

}  // namespace spurlens
