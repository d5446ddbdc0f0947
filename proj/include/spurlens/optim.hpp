#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "spurlens/autodiff.hpp"

namespace spurlens {

/// In-place p ← p − lr·(g + weight_decay·p), parameters visited in order.
template <class Scalar>
void sgd_step(std::span<Tensor<Scalar>> params, std::span<const Tensor<Scalar>> grads, Scalar lr,
              Scalar weight_decay);

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam; moment buffers are sized on the first step.
template <class Scalar>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  void step(std::span<Tensor<Scalar>> params, std::span<const Tensor<Scalar>> grads);
  Index steps() const { return t_; }

 private:
  AdamConfig config_;
  Index t_ = 0;
  std::vector<Tensor<Scalar>> m_, v_;
};

/// Builds a scalar loss on `tape` from leaves bound to the given parameters.
template <class Scalar>
using LossFn = std::function<Var<Scalar>(Tape<Scalar>& tape, const std::vector<Var<Scalar>>& params)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t param = 0;
  Index coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

struct GradCheckOptions {
  double epsilon = 1e-3;
  /// Relative error is |a − n| / max(|a|, |n|, floor).
  double floor = 1.0;
  /// Check a seeded random subset of this many coordinates; all when unset.
  std::optional<std::size_t> max_coordinates;
  std::uint64_t seed = 0;
};

/// Central differences against autodiff, coordinate by coordinate.
template <class Scalar>
GradCheckReport finite_diff_check(const LossFn<Scalar>& fn, const std::vector<Tensor<Scalar>>& params,
                                  const GradCheckOptions& options = {});

}  // namespace spurlens
