#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "spurlens/attribution.hpp"
#include "spurlens/data.hpp"
#include "spurlens/models.hpp"
#include "spurlens/train.hpp"

namespace spurlens {

/// A replacement linear head. `zeroed` neurons have all-zero rows in
/// `head_weight` ([d×C]).
struct ClassifierEdit {
  std::vector<Index> zeroed;
  Tensorf head_weight;
  Tensorf head_bias;
  nlohmann::json provenance = nlohmann::json::object();
  std::vector<std::string> warnings;
};

/// Copy of `model` with the edited head installed; the encoder is shared
/// unchanged.
Model apply_edit(const Model& model, const ClassifierEdit& edit);

/// Zeroes the head weights of every neuron with s-score above `tau`. No
/// retraining.
ClassifierEdit prune_classifier_by_sscore(const Model& model, const SScoreReport& report, double tau = 0.7);

struct FinetuneConfig {
  Index epochs = 100;
  double lr = 0.05;
  double weight_decay = 0.0;
  Index batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Retrains only the head by SGD on frozen embeddings of a group-balanced
/// set. Starting from `start` keeps its zeroed rows at exactly zero.
ClassifierEdit finetune_classifier_balanced(const Model& model, const Dataset& balanced_set,
                                            const FinetuneConfig& config = {},
                                            const ClassifierEdit* start = nullptr);

struct LogisticFit {
  Eigen::MatrixXd weight;  // [d×C]
  Eigen::VectorXd bias;    // [C]
  double lambda = 0.0;
  double step = 0.0;
  Index iterations = 0;
  Index halvings = 0;
  /// Objective (mean cross-entropy + λ‖W‖₁) before the first step and after
  /// each step.
  std::vector<double> objective;
};

/// Multinomial logistic regression with an ℓ1 penalty on the weights,
/// minimized by ISTA from zero. The bias is not penalized.
LogisticFit l1_logistic_regression(const Eigen::MatrixXd& features, std::span<const int> labels, Index num_classes,
                                   double lambda, Index iterations = 3000, double tolerance = 1e-10);

double logistic_objective(const Eigen::MatrixXd& features, std::span<const int> labels, const Eigen::MatrixXd& weight,
                          const Eigen::VectorXd& bias, double lambda);

/// Fraction of head weights (bias excluded) that are exactly zero.
double prune_ratio(const Tensorf& head_weight);

struct DfrOptions {
  Index iterations = 3000;
  /// Fit on per-feature standardized embeddings, then fold the scaling back
  /// into the head.
  bool standardize = true;
  /// Before/after metrics are reported on this set, or on the tune set.
  const Dataset* evaluation = nullptr;
  /// Source of s-score samples; no s-scores are computed when null.
  const Dataset* attribution = nullptr;
  Index sscore_samples = 50;
  double alpha = 0.5;
  std::uint64_t sscore_seed = 0;
};

struct DfrCandidate {
  double lambda = 0.0;
  double tune_wga = 0.0;
  double tune_avg = 0.0;
  double prune_h = 0.0;
};

struct DfrResult {
  ClassifierEdit edit;
  double lambda = 0.0;
  double prune_h = 0.0;
  GroupMetrics before;
  GroupMetrics after;
  std::vector<DfrCandidate> candidates;
  /// Per-neuron scores of the encoder (the head does not enter them).
  std::vector<double> sscores;
  /// Mean s-score over neurons the head still reads (any nonzero weight).
  std::optional<double> sscore_before;
  std::optional<double> sscore_after;
};

/// Fits one ℓ1 head per λ on the fit set and keeps the one with the best
/// tune-set worst-group accuracy; ties go to the larger λ.
DfrResult dfr_retrain(const Model& model, const Dataset& fit_set, const Dataset& tune_set,
                      std::span<const double> lambdas, const DfrOptions& options = {});

/// Default λ grid used by the CLI and experiments.
std::vector<double> default_dfr_lambdas();

struct MaskConfig {
  double keep = 0.8;  // κ
  Index epochs = 10;
  Index batch_size = 32;
  double lr = 0.05;
  double init_logit = 2.0;
  /// Weight of the hinge penalty on mean keep probability above κ.
  double sparsity_weight = 1.0;
  double floor_fraction = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MaskLayer {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> bits;
  Index kept = 0;
};

/// Binary gates over every ".weight" parameter.
struct WeightMask {
  std::vector<MaskLayer> layers;
  double keep = 1.0;

  Index total() const;
  Index kept() const;
  std::optional<std::size_t> find(std::string_view name) const;
};

struct MaskResult {
  WeightMask mask;
  Model masked;
  std::vector<double> epoch_loss;
};

bool is_maskable(std::string_view parameter_name);

/// Per-layer minimum kept count max(1, ceil(floor_fraction · size)).
Index layer_floor(Index size, double floor_fraction);

/// Keeps the top κ fraction of `scores` globally after granting each layer
/// its floor; ties break by layer then position. Infeasible floors raise
/// ConfigError.
WeightMask project_top_k(const Model& model, const std::vector<Tensorf>& scores, double keep, double floor_fraction);

/// Trains per-weight keep logits on `dataset` with the model frozen
/// (straight-through Bernoulli gates), then projects to a binary mask.
MaskResult train_weight_mask(const Model& model, const Dataset& dataset, const MaskConfig& config = {});

Model apply_mask(const Model& model, const WeightMask& mask);
/// Mask tensors as checkpoint extras named "mask/<parameter>".
std::vector<Parameter> mask_extras(const WeightMask& mask);
WeightMask mask_from_extras(const Model& model, std::span<const Parameter> extras);

struct AblationResult {
  int ablated_group = 0;
  GroupMetrics before;
  GroupMetrics after;
  std::array<std::optional<double>, 4> delta;
  WeightMask mask;
};

/// Trains a mask on the training set without `group` and compares per-group
/// test accuracy before and after masking.
AblationResult group_ablation_experiment(const Model& model, const Dataset& train_set, int group,
                                         const MaskConfig& config, const Dataset& test_set);

nlohmann::json to_json(const ClassifierEdit& edit);
nlohmann::json to_json(const DfrResult& result);
nlohmann::json to_json(const WeightMask& mask);
nlohmann::json to_json(const AblationResult& result);

}  // namespace spurlens
