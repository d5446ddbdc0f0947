#include "spurlens/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "spurlens/binary_io.hpp"
#include "spurlens/optim.hpp"
#include "spurlens/rng.hpp"

namespace spurlens {

namespace {

void check_head(const Model& model, const Tensorf& weight, const Tensorf& bias) {
  const Shape w{model.embed_dim(), model.num_classes()}, b{model.num_classes()};
  if (weight.shape() != w || bias.shape() != b) {
    throw DimensionError("head of shape " + shape_string(weight.shape()) + " + " + shape_string(bias.shape()) +
                         " does not fit a model expecting " + shape_string(w) + " + " + shape_string(b));
  }
}

std::vector<Index> zero_rows(const Tensorf& weight) {
  std::vector<Index> out;
  const Index C = weight.dim(1);
  for (Index i = 0; i < weight.dim(0); ++i) {
    bool zero = true;
    for (Index k = 0; k < C; ++k) zero = zero && weight[i * C + k] == 0.0f;
    if (zero) out.push_back(i);
  }
  return out;
}

Eigen::MatrixXd to_matrix(const Tensorf& t) { return t.matrix(t.dim(0), t.dim(1)).cast<double>(); }

Eigen::MatrixXd embeddings_of(const Model& model, const Dataset& dataset) {
  return to_matrix(encode_batch(model, dataset.images()));
}

std::vector<int> labels_of(const Dataset& d) {
  std::vector<int> out;
  out.reserve(d.size());
  for (const auto& s : d.samples) out.push_back(s.y);
  return out;
}

std::vector<int> groups_of(const Dataset& d) {
  std::vector<int> out;
  out.reserve(d.size());
  for (const auto& s : d.samples) out.push_back(s.g);
  return out;
}

/// Metrics of the linear head (float weights) applied to precomputed embeddings.
GroupMetrics head_metrics(const Eigen::MatrixXd& z, const Dataset& d, const Tensorf& w, const Tensorf& b) {
  const Eigen::MatrixXd logits =
      (z * to_matrix(w)).rowwise() + b.matrix(1, b.size()).cast<double>().row(0);
  std::vector<int> pred(d.size());
  for (Index i = 0; i < logits.rows(); ++i) logits.row(i).maxCoeff(&pred[static_cast<std::size_t>(i)]);
  const auto labels = labels_of(d), groups = groups_of(d);
  return group_metrics(groups, labels, pred);
}

std::uint64_t image_hash(const Tensorf& image) {
  return fnv1a64(image.data(), static_cast<std::size_t>(image.size()) * sizeof(float));
}

bool share_images(const Dataset& a, const Dataset& b) {
  std::unordered_multimap<std::uint64_t, const Tensorf*> seen;
  for (const auto& s : a.samples) seen.emplace(image_hash(s.image), &s.image);
  for (const auto& s : b.samples) {
    auto [lo, hi] = seen.equal_range(image_hash(s.image));
    for (auto it = lo; it != hi; ++it) {
      if (*it->second == s.image) return true;
    }
  }
  return false;
}

std::optional<double> mean_over_read(const std::vector<double>& scores, const Tensorf& weight) {
  const auto zeroed = zero_rows(weight);
  double sum = 0.0;
  Index count = 0;
  for (Index i = 0; i < static_cast<Index>(scores.size()); ++i) {
    if (std::binary_search(zeroed.begin(), zeroed.end(), i)) continue;
    sum += scores[static_cast<std::size_t>(i)];
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

}  // namespace

Model apply_edit(const Model& model, const ClassifierEdit& edit) {
  check_head(model, edit.head_weight, edit.head_bias);
  Model out = model;
  out.head_weight() = edit.head_weight;
  out.head_bias() = edit.head_bias;
  return out;
}

ClassifierEdit prune_classifier_by_sscore(const Model& model, const SScoreReport& report, double tau) {
  const Index d = model.embed_dim();
  if (static_cast<Index>(report.scores.size()) != d) {
    throw DimensionError("s-score report covers " + std::to_string(report.scores.size()) + " neurons, model has " +
                         std::to_string(d));
  }
  ClassifierEdit edit;
  edit.head_weight = model.head_weight();
  edit.head_bias = model.head_bias();
  const Index C = model.num_classes();
  for (Index i = 0; i < d; ++i) {
    if (report.scores[static_cast<std::size_t>(i)] > tau) {
      edit.zeroed.push_back(i);
      for (Index k = 0; k < C; ++k) edit.head_weight[i * C + k] = 0.0f;
    }
  }
  if (edit.zeroed.empty()) {
    edit.warnings.push_back("no neuron has s-score above " + std::to_string(tau) + "; head unchanged");
  }
  edit.provenance = {{"method", "prune_sscore"}, {"tau", tau}, {"alpha", report.alpha}, {"n", report.n}};
  return edit;
}

void FinetuneConfig::validate() const {
  if (epochs < 1) throw ContractError("finetune: epochs must be at least 1");
  if (batch_size < 1) throw ContractError("finetune: batch_size must be at least 1");
  if (!(lr > 0.0)) throw ContractError("finetune: lr must be positive");
  if (!(weight_decay >= 0.0)) throw ContractError("finetune: weight_decay must be non-negative");
}

ClassifierEdit finetune_classifier_balanced(const Model& model, const Dataset& balanced_set,
                                            const FinetuneConfig& config, const ClassifierEdit* start) {
  config.validate();
  if (balanced_set.empty()) throw ContractError("finetune: balanced set is empty");
  if (!is_group_balanced(balanced_set)) {
    const auto c = balanced_set.census();
    throw ContractError("finetune: set is not group-balanced (census " + std::to_string(c[0]) + "/" +
                        std::to_string(c[1]) + "/" + std::to_string(c[2]) + "/" + std::to_string(c[3]) + ")");
  }
  ClassifierEdit edit;
  edit.head_weight = start ? start->head_weight : model.head_weight();
  edit.head_bias = start ? start->head_bias : model.head_bias();
  check_head(model, edit.head_weight, edit.head_bias);
  if (start) edit.zeroed = start->zeroed;
  const Index d = model.embed_dim(), C = model.num_classes();

  const Tensorf z = encode_batch(model, balanced_set.images());
  const std::vector<int> labels = labels_of(balanced_set);
  const std::size_t n = balanced_set.size();
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(n);

  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (std::size_t s = 0; s < n; s += batch) {
      const std::size_t m = std::min(batch, n - s);
      Tensorf xb({static_cast<Index>(m), d});
      std::vector<int> yb(m);
      for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(z.data() + static_cast<Index>(order[s + i]) * d, d, xb.data() + static_cast<Index>(i) * d);
        yb[i] = labels[order[s + i]];
      }
      Tape<float> tape;
      const auto w = tape.leaf(edit.head_weight), b = tape.leaf(edit.head_bias);
      const auto loss = softmax_cross_entropy(add_bias(matmul(tape.constant(std::move(xb)), w), b, 1), yb);
      if (!std::isfinite(loss.value().item())) {
        throw TrainingError("finetune: non-finite loss at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      std::vector<Tensorf> grads{w.grad(), b.grad()};
      for (Index i : edit.zeroed) {
        for (Index k = 0; k < C; ++k) grads[0][i * C + k] = 0.0f;
      }
      std::vector<Tensorf> values{std::move(edit.head_weight), std::move(edit.head_bias)};
      sgd_step<float>(values, grads, static_cast<float>(config.lr), static_cast<float>(config.weight_decay));
      edit.head_weight = std::move(values[0]);
      edit.head_bias = std::move(values[1]);
    }
  }
  edit.provenance = {{"method", "finetune_balanced"},
                     {"epochs", config.epochs},
                     {"lr", config.lr},
                     {"batch_size", config.batch_size},
                     {"seed", config.seed},
                     {"samples", n},
                     {"from_pruned", start != nullptr}};
  return edit;
}

double logistic_objective(const Eigen::MatrixXd& x, std::span<const int> labels, const Eigen::MatrixXd& weight,
                          const Eigen::VectorXd& bias, double lambda) {
  const Eigen::MatrixXd logits = (x * weight).rowwise() + bias.transpose();
  double loss = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    loss += lse - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return loss / static_cast<double>(logits.rows()) + lambda * weight.cwiseAbs().sum();
}

LogisticFit l1_logistic_regression(const Eigen::MatrixXd& x, std::span<const int> labels, Index num_classes,
                                   double lambda, Index iterations, double tolerance) {
  if (!(lambda >= 0.0)) throw ContractError("l1_logistic_regression: λ must be non-negative");
  if (num_classes < 2) throw ContractError("l1_logistic_regression: need at least 2 classes");
  if (x.rows() == 0) throw ContractError("l1_logistic_regression: no samples");
  if (static_cast<Index>(labels.size()) != x.rows()) {
    throw DimensionError("l1_logistic_regression: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(x.rows()) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw IndexError("label " + std::to_string(y) + " out of range");
  }
  const Index n = x.rows(), d = x.cols();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, num_classes);
  for (Index i = 0; i < n; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;

  // Softmax cross-entropy has Hessian ≤ ½·I in the logits.
  Eigen::MatrixXd xt(n, d + 1);
  xt << x, Eigen::VectorXd::Ones(n);
  const double sigma2 = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(xt.transpose() * xt, Eigen::EigenvaluesOnly)
                            .eigenvalues()
                            .maxCoeff();
  const double lipschitz = 0.5 * sigma2 / static_cast<double>(n);

  LogisticFit fit;
  fit.lambda = lambda;
  fit.step = 1.0 / lipschitz;
  fit.weight = Eigen::MatrixXd::Zero(d, num_classes);
  fit.bias = Eigen::VectorXd::Zero(num_classes);
  double previous = logistic_objective(x, labels, fit.weight, fit.bias, lambda);
  fit.objective.push_back(previous);
  Index rising = 0;

  for (Index it = 0; it < iterations; ++it) {
    Eigen::MatrixXd p = (x * fit.weight).rowwise() + fit.bias.transpose();
    for (Index i = 0; i < n; ++i) {
      p.row(i).array() -= p.row(i).maxCoeff();
      p.row(i) = p.row(i).array().exp();
      p.row(i) /= p.row(i).sum();
    }
    const Eigen::MatrixXd r = (p - y) / static_cast<double>(n);
    const Eigen::MatrixXd gw = x.transpose() * r;
    const Eigen::VectorXd gb = r.colwise().sum().transpose();
    const double t = fit.step;
    fit.weight = (fit.weight - t * gw).unaryExpr([&](double v) {
      const double m = std::abs(v) - t * lambda;
      return m > 0.0 ? std::copysign(m, v) : 0.0;
    });
    fit.bias -= t * gb;
    const double current = logistic_objective(x, labels, fit.weight, fit.bias, lambda);
    if (!std::isfinite(current)) throw TrainingError("l1_logistic_regression: objective became non-finite");
    fit.objective.push_back(current);
    fit.iterations = it + 1;

    rising = current > previous ? rising + 1 : 0;
    if (rising >= 10) {
      if (fit.halvings == 5) {
        throw TrainingError("l1_logistic_regression: objective kept rising after 5 step-size halvings");
      }
      fit.step *= 0.5;
      ++fit.halvings;
      rising = 0;
    }
    if (std::abs(previous - current) <= tolerance * std::max(1.0, std::abs(previous))) break;
    previous = current;
  }
  return fit;
}

double prune_ratio(const Tensorf& head_weight) {
  if (head_weight.empty()) throw ContractError("prune_ratio: empty weight");
  const auto zeros = (head_weight.array() == 0.0f).count();
  return static_cast<double>(zeros) / static_cast<double>(head_weight.size());
}

std::vector<double> default_dfr_lambdas() { return {0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1}; }

DfrResult dfr_retrain(const Model& model, const Dataset& fit_set, const Dataset& tune_set,
                      std::span<const double> lambdas, const DfrOptions& options) {
  if (lambdas.empty()) throw ContractError("dfr_retrain: empty λ grid");
  if (fit_set.empty() || tune_set.empty()) throw ContractError("dfr_retrain: fit and tune sets must be nonempty");
  if (!is_group_balanced(fit_set) || !is_group_balanced(tune_set)) {
    throw ContractError("dfr_retrain: fit and tune sets must be group-balanced");
  }
  if (share_images(fit_set, tune_set)) throw ContractError("dfr_retrain: fit and tune sets overlap");

  const Index C = model.num_classes();
  Eigen::MatrixXd zfit = embeddings_of(model, fit_set);
  const Eigen::MatrixXd ztune = embeddings_of(model, tune_set);
  const std::vector<int> yfit = labels_of(fit_set);
  const Index d = zfit.cols();

  Eigen::VectorXd mu = Eigen::VectorXd::Zero(d), sd = Eigen::VectorXd::Ones(d);
  if (options.standardize) {
    mu = zfit.colwise().mean().transpose();
    for (Index j = 0; j < d; ++j) {
      const double var = (zfit.col(j).array() - mu(j)).square().mean();
      sd(j) = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    zfit = (zfit.rowwise() - mu.transpose()).array().rowwise() / sd.transpose().array();
  }

  std::vector<double> grid(lambdas.begin(), lambdas.end());
  std::sort(grid.begin(), grid.end());
  DfrResult result;
  std::optional<double> best_wga;
  for (double lambda : grid) {
    const LogisticFit fit = l1_logistic_regression(zfit, yfit, C, lambda, options.iterations);
    // Fold the standardization into the head: logits = z·(W/σ) + b − (μ/σ)·W.
    Tensorf w({d, C}), b({C});
    for (Index k = 0; k < C; ++k) {
      double shift = fit.bias(k);
      for (Index j = 0; j < d; ++j) {
        w[j * C + k] = static_cast<float>(fit.weight(j, k) / sd(j));
        shift -= mu(j) / sd(j) * fit.weight(j, k);
      }
      b[k] = static_cast<float>(shift);
    }
    const GroupMetrics tm = head_metrics(ztune, tune_set, w, b);
    result.candidates.push_back({lambda, tm.wga, tm.avg, prune_ratio(w)});
    if (!best_wga || tm.wga >= *best_wga) {
      best_wga = tm.wga;
      result.lambda = lambda;
      result.edit.head_weight = std::move(w);
      result.edit.head_bias = std::move(b);
    }
  }
  result.edit.zeroed = zero_rows(result.edit.head_weight);
  result.prune_h = prune_ratio(result.edit.head_weight);
  result.edit.provenance = {{"method", "dfr_l1"},
                            {"lambda", result.lambda},
                            {"standardize", options.standardize},
                            {"iterations", options.iterations},
                            {"fit_samples", fit_set.size()},
                            {"tune_samples", tune_set.size()}};

  const Dataset& eval = options.evaluation ? *options.evaluation : tune_set;
  const Model edited = apply_edit(model, result.edit);
  result.before = evaluate_groups(model, eval);
  result.after = evaluate_groups(edited, eval);
  if (options.attribution) {
    const SScoreReport r =
        sscore_report(model, *options.attribution, options.sscore_samples, options.alpha, options.sscore_seed);
    result.sscores = r.scores;
    result.sscore_before = mean_over_read(r.scores, model.head_weight());
    result.sscore_after = mean_over_read(r.scores, result.edit.head_weight);
  }
  return result;
}

void MaskConfig::validate() const {
  if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("mask keep fraction must be in (0, 1], got " + std::to_string(keep));
  if (epochs < 0) throw ConfigError("mask epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("mask batch_size must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("mask lr must be positive");
  if (!(sparsity_weight >= 0.0)) throw ConfigError("mask sparsity_weight must be non-negative");
  if (!(floor_fraction >= 0.0 && floor_fraction <= 1.0)) throw ConfigError("mask floor_fraction must be in [0, 1]");
}

Index WeightMask::total() const {
  Index t = 0;
  for (const auto& l : layers) t += static_cast<Index>(l.bits.size());
  return t;
}

Index WeightMask::kept() const {
  Index t = 0;
  for (const auto& l : layers) t += l.kept;
  return t;
}

std::optional<std::size_t> WeightMask::find(std::string_view name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  return std::nullopt;
}

bool is_maskable(std::string_view name) { return name.ends_with(".weight"); }

Index layer_floor(Index size, double floor_fraction) {
  return std::max<Index>(1, static_cast<Index>(std::ceil(floor_fraction * static_cast<double>(size) - 1e-9)));
}

WeightMask project_top_k(const Model& model, const std::vector<Tensorf>& scores, double keep, double floor_fraction) {
  if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("mask keep fraction must be in (0, 1], got " + std::to_string(keep));
  WeightMask mask;
  mask.keep = keep;
  for (const Parameter& p : model.parameters()) {
    if (!is_maskable(p.name)) continue;
    MaskLayer l;
    l.name = p.name;
    l.shape = p.value.shape();
    l.bits.assign(static_cast<std::size_t>(p.value.size()), 0);
    mask.layers.push_back(std::move(l));
  }
  if (scores.size() != mask.layers.size()) {
    throw DimensionError("project_top_k: " + std::to_string(scores.size()) + " score tensors for " +
                         std::to_string(mask.layers.size()) + " maskable layers");
  }
  const Index total = mask.total();
  const auto budget = static_cast<Index>(std::llround(keep * static_cast<double>(total)));
  Index floors = 0;
  for (const auto& l : mask.layers) floors += layer_floor(static_cast<Index>(l.bits.size()), floor_fraction);
  if (floors > budget) {
    throw ConfigError("keep fraction " + std::to_string(keep) + " retains " + std::to_string(budget) +
                      " weights but the per-layer floors need " + std::to_string(floors));
  }

  struct Entry {
    float score;
    std::uint32_t layer;
    std::uint32_t pos;
  };
  auto before = [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.pos < b.pos;
  };
  std::vector<Entry> rest;
  for (std::size_t l = 0; l < mask.layers.size(); ++l) {
    MaskLayer& layer = mask.layers[l];
    if (scores[l].shape() != layer.shape) throw DimensionError("project_top_k: score shape mismatch for " + layer.name);
    std::vector<Entry> entries;
    for (Index j = 0; j < scores[l].size(); ++j) {
      entries.push_back({scores[l][j], static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(j)});
    }
    std::sort(entries.begin(), entries.end(), before);
    const Index f = layer_floor(static_cast<Index>(entries.size()), floor_fraction);
    for (Index j = 0; j < static_cast<Index>(entries.size()); ++j) {
      if (j < f) {
        layer.bits[entries[static_cast<std::size_t>(j)].pos] = 1;
      } else {
        rest.push_back(entries[static_cast<std::size_t>(j)]);
      }
    }
    layer.kept = f;
  }
  const auto extra = static_cast<std::size_t>(budget - floors);
  std::partial_sort(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(extra), rest.end(), before);
  for (std::size_t k = 0; k < extra; ++k) {
    mask.layers[rest[k].layer].bits[rest[k].pos] = 1;
    ++mask.layers[rest[k].layer].kept;
  }
  return mask;
}

Model apply_mask(const Model& model, const WeightMask& mask) {
  Model out = model;
  for (const MaskLayer& l : mask.layers) {
    Tensorf& w = out.parameter(l.name).value;
    if (w.shape() != l.shape) throw DimensionError("mask for " + l.name + " has shape " + shape_string(l.shape));
    for (Index j = 0; j < w.size(); ++j) {
      if (l.bits[static_cast<std::size_t>(j)] == 0) w[j] = 0.0f;
    }
  }
  return out;
}

std::vector<Parameter> mask_extras(const WeightMask& mask) {
  std::vector<Parameter> out;
  for (const MaskLayer& l : mask.layers) {
    Tensorf t(l.shape);
    for (Index j = 0; j < t.size(); ++j) t[j] = l.bits[static_cast<std::size_t>(j)];
    out.push_back({"mask/" + l.name, std::move(t)});
  }
  return out;
}

WeightMask mask_from_extras(const Model& model, std::span<const Parameter> extras) {
  WeightMask mask;
  for (const Parameter& e : extras) {
    if (!e.name.starts_with("mask/")) continue;
    MaskLayer l;
    l.name = e.name.substr(5);
    l.shape = e.value.shape();
    if (model.parameter(l.name).value.shape() != l.shape) {
      throw FormatError("mask " + e.name + " does not match the parameter shape");
    }
    for (Index j = 0; j < e.value.size(); ++j) {
      const float v = e.value[j];
      if (v != 0.0f && v != 1.0f) throw FormatError("mask " + e.name + " holds a non-binary value");
      l.bits.push_back(static_cast<std::uint8_t>(v));
      l.kept += v == 1.0f;
    }
    mask.layers.push_back(std::move(l));
  }
  if (mask.layers.empty()) throw FormatError("checkpoint carries no mask tensors");
  mask.keep = static_cast<double>(mask.kept()) / static_cast<double>(mask.total());
  return mask;
}

MaskResult train_weight_mask(const Model& model, const Dataset& dataset, const MaskConfig& config) {
  config.validate();
  if (dataset.empty()) throw ContractError("train_weight_mask: dataset is empty");
  if (dataset.channels != model.in_channels() || dataset.image_size != model.image_size()) {
    throw DimensionError("train_weight_mask: dataset images do not fit the model");
  }

  std::vector<std::size_t> gated;
  std::vector<Tensorf> logits;
  Index total = 0;
  Index floors = 0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const Parameter& p = model.parameters()[i];
    if (!is_maskable(p.name)) continue;
    gated.push_back(i);
    logits.emplace_back(p.value.shape(), static_cast<float>(config.init_logit));
    total += p.value.size();
    floors += layer_floor(p.value.size(), config.floor_fraction);
  }
  if (floors > static_cast<Index>(std::llround(config.keep * static_cast<double>(total)))) {
    throw ConfigError("keep fraction " + std::to_string(config.keep) + " cannot satisfy the per-layer floors (" +
                      std::to_string(floors) + " of " + std::to_string(total) + " weights)");
  }

  std::vector<double> epoch_loss;
  Adam<float> adam({.lr = config.lr});
  const std::size_t n = dataset.size();
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(n);
  std::uint64_t step = 0;
  const auto inv_total = static_cast<float>(1.0 / static_cast<double>(total));

  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng shuffle(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    shuffle.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < n; s += batch, ++step) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(batch, n - s));
      Rng gate(derive_seed(derive_seed(config.seed, 0x6A7E), step));
      Tape<float> tape;
      auto params = bind_parameters(tape, model, false);
      std::vector<Var<float>> leaves;
      Var<float> keep_sum;
      for (std::size_t k = 0; k < gated.size(); ++k) {
        leaves.push_back(tape.leaf(logits[k], true));
        const auto prob = sigmoid(leaves.back());
        const Tensorf p = prob.value();
        Tensorf offset(p.shape());
        for (Index j = 0; j < p.size(); ++j) offset[j] = (gate.uniform() < p[j] ? 1.0f : 0.0f) - p[j];
        // Forward sees the sampled 0/1 gate; backward passes through σ.
        const auto m = add(prob, tape.constant(std::move(offset)));
        params[gated[k]] = mul(params[gated[k]], m);
        const auto ps = sum(prob);
        keep_sum = keep_sum.valid() ? add(keep_sum, ps) : ps;
      }
      const auto act = forward(model, params, tape.constant(dataset.images(idx)));
      auto loss = softmax_cross_entropy(act.logits, dataset.labels(idx));
      const double task = loss.value().item();
      if (!std::isfinite(task)) throw TrainingError("train_weight_mask: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += task * static_cast<double>(idx.size());
      if (keep_sum.value().item() * inv_total > config.keep && config.sparsity_weight > 0.0) {
        loss = add(loss, scale(keep_sum, static_cast<float>(config.sparsity_weight) * inv_total));
      }
      tape.backward(loss);
      std::vector<Tensorf> grads;
      for (const auto& l : leaves) grads.push_back(l.grad());
      adam.step(logits, grads);
    }
    epoch_loss.push_back(loss_sum / static_cast<double>(n));
  }
  WeightMask mask = project_top_k(model, logits, config.keep, config.floor_fraction);
  Model masked = apply_mask(model, mask);
  return {std::move(mask), std::move(masked), std::move(epoch_loss)};
}

AblationResult group_ablation_experiment(const Model& model, const Dataset& train_set, int group,
                                         const MaskConfig& config, const Dataset& test_set) {
  if (group < 0 || group > 3) throw IndexError("group " + std::to_string(group) + " out of range");
  std::vector<std::size_t> kept;
  Index removed = 0;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    if (train_set.samples[i].g == group) {
      ++removed;
    } else {
      kept.push_back(i);
    }
  }
  if (removed == 0) throw ContractError("group " + std::to_string(group) + " is empty in the training set");
  if (kept.empty()) throw ContractError("removing group " + std::to_string(group) + " leaves no training data");

  AblationResult out;
  out.ablated_group = group;
  MaskResult m = train_weight_mask(model, train_set.subset(kept), config);
  out.before = evaluate_groups(model, test_set);
  out.after = evaluate_groups(m.masked, test_set);
  for (std::size_t g = 0; g < 4; ++g) {
    if (out.before.per_group_acc[g] && out.after.per_group_acc[g]) {
      out.delta[g] = *out.after.per_group_acc[g] - *out.before.per_group_acc[g];
    }
  }
  out.mask = std::move(m.mask);
  return out;
}

nlohmann::json to_json(const ClassifierEdit& edit) {
  return {{"schema", 1},
          {"zeroed", edit.zeroed},
          {"prune_h", prune_ratio(edit.head_weight)},
          {"provenance", edit.provenance},
          {"warnings", edit.warnings}};
}

nlohmann::json to_json(const DfrResult& r) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : r.candidates) {
    cands.push_back({{"lambda", c.lambda}, {"tune_wga", c.tune_wga}, {"tune_avg", c.tune_avg}, {"prune_h", c.prune_h}});
  }
  nlohmann::json j = {{"schema", 1},
                      {"lambda", r.lambda},
                      {"prune_h", r.prune_h},
                      {"before", to_json(r.before)},
                      {"after", to_json(r.after)},
                      {"candidates", cands},
                      {"zeroed_neurons", r.edit.zeroed.size()}};
  j["sscore_before"] = r.sscore_before ? nlohmann::json(*r.sscore_before) : nlohmann::json(nullptr);
  j["sscore_after"] = r.sscore_after ? nlohmann::json(*r.sscore_after) : nlohmann::json(nullptr);
  if (!r.sscores.empty()) j["sscores"] = r.sscores;
  return j;
}

nlohmann::json to_json(const WeightMask& mask) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : mask.layers) {
    layers.push_back({{"name", l.name}, {"size", l.bits.size()}, {"kept", l.kept}});
  }
  return {{"schema", 1}, {"keep", mask.keep}, {"kept", mask.kept()}, {"total", mask.total()}, {"layers", layers}};
}

nlohmann::json to_json(const AblationResult& r) {
  nlohmann::json delta = nlohmann::json::array();
  for (const auto& d : r.delta) delta.push_back(d ? nlohmann::json(*d) : nlohmann::json(nullptr));
  return {{"schema", 1},
          {"ablated_group", r.ablated_group},
          {"before", to_json(r.before)},
          {"after", to_json(r.after)},
          {"delta", delta},
          {"mask", to_json(r.mask)}};
}

}  // namespace spurlens
