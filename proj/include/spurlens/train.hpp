#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spurlens/data.hpp"
#include "spurlens/models.hpp"

namespace spurlens {

struct TrainConfig {
  Index epochs = 30;
  double lr = 0.05;
  double weight_decay = 1e-4;
  Index batch_size = 32;
  std::uint64_t seed = 0;
  bool shuffle = true;
  /// Decay lr along a half cosine over all steps. A constant rate of 0.05
  /// can blow up in the last few steps and leave a constant predictor.
  bool cosine = true;
  /// Rescale the gradient to this global norm when it is larger; 0 disables.
  double clip_norm = 0.0;

  void validate() const;
};

struct GroupMetrics {
  /// Empty groups have no accuracy.
  std::array<std::optional<double>, 4> per_group_acc;
  std::array<Index, 4> group_sizes{};
  double avg = 0.0;
  double wga = 0.0;
  double gap = 0.0;
};

struct EpochLog {
  Index epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::optional<GroupMetrics> validation;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  double final_train_accuracy = 0.0;
};

struct TrainResult {
  Model model;
  TrainLog log;
};

/// Mini-batch SGD with weight decay on softmax cross-entropy. `validation`,
/// when given, is evaluated after every epoch.
TrainResult train(Model model, const Dataset& dataset, const TrainConfig& config,
                  const Dataset* validation = nullptr);

std::vector<int> predict(const Model& model, const Dataset& dataset);
GroupMetrics group_metrics(std::span<const int> groups, std::span<const int> labels, std::span<const int> predictions);
GroupMetrics evaluate_groups(const Model& model, const Dataset& dataset);

/// Accuracy averaged over the groups whose spurious attribute disagrees with
/// the class (1 and 2) and over those where it agrees (0 and 3).
double minority_accuracy(const GroupMetrics& m);
double majority_accuracy(const GroupMetrics& m);
/// Lowest accuracy among the agreeing groups.
double worst_majority_accuracy(const GroupMetrics& m);

struct SweepEntry {
  double rho = 0.0;
  std::uint64_t seed = 0;
  GroupMetrics metrics;
  TrainLog log;
};

struct SweepConfig {
  ModelConfig model = SmallCnnConfig{};
  TrainConfig train;
  Index test_per_group = 100;
  std::uint64_t test_seed = 1000;
  std::vector<std::uint64_t> seeds{0};
};

/// Training-set spec of the (ρ, seed) run.
SpuriousDatasetSpec sweep_spec(const SpuriousDatasetSpec& base, double rho, std::uint64_t seed);
/// The balanced test set every run of a sweep is scored on.
Dataset sweep_testset(const SpuriousDatasetSpec& base, const SweepConfig& config);
/// The single (ρ, seed) run of a sweep.
TrainResult sweep_run(const SpuriousDatasetSpec& base, double rho, std::uint64_t seed, const SweepConfig& config);

/// One from-scratch run per (ρ, seed); every run is scored on the same
/// balanced test set.
std::vector<SweepEntry> minority_ratio_sweep(const SpuriousDatasetSpec& base, std::span<const double> rhos,
                                             const SweepConfig& config);

nlohmann::json to_json(const GroupMetrics& m);
nlohmann::json to_json(const TrainLog& log);
nlohmann::json to_json(std::span<const SweepEntry> sweep);
std::string train_log_csv(const TrainLog& log);
std::string sweep_csv(std::span<const SweepEntry> sweep);

}  // namespace spurlens
