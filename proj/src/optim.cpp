#include "spurlens/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spurlens/rng.hpp"

namespace spurlens {

template <class Scalar>
void sgd_step(std::span<Tensor<Scalar>> params, std::span<const Tensor<Scalar>> grads, Scalar lr,
              Scalar weight_decay) {
  if (!(lr > Scalar(0))) throw ContractError("sgd_step: learning rate must be positive");
  if (weight_decay < Scalar(0)) throw ContractError("sgd_step: weight decay must be non-negative");
  if (params.size() != grads.size()) {
    throw ContractError("sgd_step: " + std::to_string(params.size()) + " params but " +
                        std::to_string(grads.size()) + " grads");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw ContractError("sgd_step: param " + std::to_string(i) + " has shape " + shape_string(params[i].shape()) +
                          " but grad has " + shape_string(grads[i].shape()));
    }
    Scalar* p = params[i].data();
    const Scalar* g = grads[i].data();
    for (Index j = 0; j < params[i].size(); ++j) p[j] -= lr * (g[j] + weight_decay * p[j]);
  }
}

template <class Scalar>
void Adam<Scalar>::step(std::span<Tensor<Scalar>> params, std::span<const Tensor<Scalar>> grads) {
  if (params.size() != grads.size()) throw ContractError("Adam: params and grads differ in count");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam: parameter count changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != m_[i].shape()) {
      throw ContractError("Adam: shape mismatch for param " + std::to_string(i));
    }
    for (Index j = 0; j < params[i].size(); ++j) {
      const double g = static_cast<double>(grads[i][j]);
      const double m = config_.beta1 * static_cast<double>(m_[i][j]) + (1.0 - config_.beta1) * g;
      const double v = config_.beta2 * static_cast<double>(v_[i][j]) + (1.0 - config_.beta2) * g * g;
      m_[i][j] = static_cast<Scalar>(m);
      v_[i][j] = static_cast<Scalar>(v);
      params[i][j] -= static_cast<Scalar>(config_.lr * (m / c1) / (std::sqrt(v / c2) + config_.epsilon));
    }
  }
}

template <class Scalar>
GradCheckReport finite_diff_check(const LossFn<Scalar>& fn, const std::vector<Tensor<Scalar>>& params,
                                  const GradCheckOptions& options) {
  if (!(options.epsilon > 0.0)) throw ContractError("finite_diff_check: epsilon must be positive");

  auto evaluate = [&fn](const std::vector<Tensor<Scalar>>& values) {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> vars;
    vars.reserve(values.size());
    for (const auto& v : values) vars.push_back(tape.leaf(v, true));
    return static_cast<double>(fn(tape, vars).value().item());
  };

  std::vector<Tensor<Scalar>> analytic;
  {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> vars;
    for (const auto& v : params) vars.push_back(tape.leaf(v, true));
    Var<Scalar> loss = fn(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  std::vector<std::pair<std::size_t, Index>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Index j = 0; j < params[p].size(); ++j) coords.emplace_back(p, j);
  }
  if (options.max_coordinates && *options.max_coordinates < coords.size()) {
    Rng rng(options.seed);
    rng.shuffle(coords);
    coords.resize(*options.max_coordinates);
  }

  GradCheckReport report;
  std::vector<Tensor<Scalar>> work = params;
  const Scalar eps = static_cast<Scalar>(options.epsilon);
  for (const auto& [p, j] : coords) {
    const Scalar original = work[p][j];
    work[p][j] = original + eps;
    const double plus = evaluate(work);
    work[p][j] = original - eps;
    const double minus = evaluate(work);
    work[p][j] = original;
    // Divide by the step actually taken after rounding to Scalar.
    const double step = static_cast<double>(original + eps) - static_cast<double>(original - eps);
    const double numeric = (plus - minus) / step;
    const double a = analytic[p][j];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel > report.max_rel_error || report.checked == 1) {
      report.max_rel_error = std::max(rel, report.max_rel_error);
      if (rel >= report.max_rel_error) {
        report.param = p;
        report.coordinate = j;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

template void sgd_step<float>(std::span<Tensor<float>>, std::span<const Tensor<float>>, float, float);
template void sgd_step<double>(std::span<Tensor<double>>, std::span<const Tensor<double>>, double, double);
template class Adam<float>;
template class Adam<double>;
template GradCheckReport finite_diff_check<float>(const LossFn<float>&, const std::vector<Tensor<float>>&,
                                                  const GradCheckOptions&);
template GradCheckReport finite_diff_check<double>(const LossFn<double>&, const std::vector<Tensor<double>>&,
                                                   const GradCheckOptions&);

}  // namespace spurlens
