#include "spurlens/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "spurlens/optim.hpp"
#include "spurlens/rng.hpp"

namespace spurlens {

void TrainConfig::validate() const {
  if (epochs < 1) throw ContractError("epochs must be at least 1, got " + std::to_string(epochs));
  if (batch_size < 1) throw ContractError("batch_size must be at least 1");
  if (!(lr > 0.0)) throw ContractError("lr must be positive");
  if (!(weight_decay >= 0.0)) throw ContractError("weight_decay must be non-negative");
  if (!(clip_norm >= 0.0)) throw ContractError("clip_norm must be non-negative");
}

namespace {

void check_compatible(const Model& model, const Dataset& dataset) {
  if (dataset.channels != model.in_channels() || dataset.image_size != model.image_size()) {
    throw DimensionError("dataset images are " + std::to_string(dataset.channels) + "×" +
                         std::to_string(dataset.image_size) + "², model expects " + std::to_string(model.in_channels()) +
                         "×" + std::to_string(model.image_size()) + "²");
  }
}

}  // namespace

TrainResult train(Model model, const Dataset& dataset, const TrainConfig& config, const Dataset* validation) {
  config.validate();
  if (dataset.empty()) throw ContractError("train: dataset is empty");
  check_compatible(model, dataset);

  const std::size_t n = dataset.size();
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  TrainLog log;
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const double total_steps = static_cast<double>(steps_per_epoch) * static_cast<double>(config.epochs);
  double step = 0.0;

  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.shuffle) {
      std::iota(order.begin(), order.end(), std::size_t(0));
      Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
      rng.shuffle(order);
    }
    double loss_sum = 0.0;
    Index correct = 0;
    for (std::size_t start = 0, b = 0; start < n; start += batch, ++b) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch, n - start));
      const std::vector<int> labels = dataset.labels(idx);

      Tape<float> tape;
      const auto params = bind_parameters(tape, model, true);
      const auto act = forward(model, params, tape.constant(dataset.images(idx)));
      const auto loss = softmax_cross_entropy(act.logits, labels);
      const float value = loss.value().item();
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                            " (lr " + std::to_string(config.lr) + ")");
      }
      tape.backward(loss);

      const Tensorf& logits = act.logits.value();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const Index C = logits.dim(1);
        const float* row = logits.data() + static_cast<Index>(i) * C;
        correct += static_cast<int>(std::max_element(row, row + C) - row) == labels[i];
      }
      loss_sum += static_cast<double>(value) * static_cast<double>(idx.size());

      std::vector<Tensorf> grads;
      grads.reserve(params.size());
      for (const auto& p : params) grads.push_back(p.grad());
      if (config.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads) sq += g.template cast<double>().array().square().sum();
        const double norm = std::sqrt(sq);
        if (norm > config.clip_norm) {
          const auto f = static_cast<float>(config.clip_norm / norm);
          for (auto& g : grads) g.array() *= f;
        }
      }
      const double lr = config.cosine ? 0.5 * config.lr * (1.0 + std::cos(M_PI * step / total_steps)) : config.lr;
      step += 1.0;
      std::vector<Tensorf> values;
      values.reserve(params.size());
      for (auto& p : model.parameters()) values.push_back(std::move(p.value));
      sgd_step<float>(values, grads, static_cast<float>(lr), static_cast<float>(config.weight_decay));
      for (std::size_t k = 0; k < values.size(); ++k) model.parameters()[k].value = std::move(values[k]);
    }
    EpochLog e;
    e.epoch = epoch;
    e.loss = loss_sum / static_cast<double>(n);
    e.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    if (validation) e.validation = evaluate_groups(model, *validation);
    log.epochs.push_back(std::move(e));
  }
  log.final_train_accuracy = evaluate_groups(model, dataset).avg;
  return {std::move(model), std::move(log)};
}

std::vector<int> predict(const Model& model, const Dataset& dataset) {
  check_compatible(model, dataset);
  const Tensorf logits = predict_logits(model, dataset.images());
  const Index C = logits.dim(1);
  std::vector<int> out(dataset.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float* row = logits.data() + static_cast<Index>(i) * C;
    out[i] = static_cast<int>(std::max_element(row, row + C) - row);
  }
  return out;
}

GroupMetrics group_metrics(std::span<const int> groups, std::span<const int> labels, std::span<const int> predictions) {
  if (groups.size() != labels.size() || labels.size() != predictions.size()) {
    throw ContractError("group_metrics: mismatched lengths");
  }
  if (groups.empty()) throw ContractError("group_metrics: no samples");
  GroupMetrics m;
  std::array<Index, 4> hits{};
  Index total_hits = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] < 0 || groups[i] > 3) throw IndexError("group id " + std::to_string(groups[i]) + " out of range");
    const auto g = static_cast<std::size_t>(groups[i]);
    ++m.group_sizes[g];
    const bool ok = labels[i] == predictions[i];
    hits[g] += ok;
    total_hits += ok;
  }
  m.avg = static_cast<double>(total_hits) / static_cast<double>(groups.size());
  m.wga = 1.0;
  for (std::size_t g = 0; g < 4; ++g) {
    if (m.group_sizes[g] == 0) continue;
    const double acc = static_cast<double>(hits[g]) / static_cast<double>(m.group_sizes[g]);
    m.per_group_acc[g] = acc;
    m.wga = std::min(m.wga, acc);
  }
  m.gap = m.avg - m.wga;
  return m;
}

GroupMetrics evaluate_groups(const Model& model, const Dataset& dataset) {
  if (dataset.empty()) throw ContractError("evaluate_groups: dataset is empty");
  const std::vector<int> pred = predict(model, dataset);
  std::vector<int> groups, labels;
  for (const LabeledSample& s : dataset.samples) {
    groups.push_back(s.g);
    labels.push_back(s.y);
  }
  return group_metrics(groups, labels, pred);
}

namespace {

double mean_of(const GroupMetrics& m, std::initializer_list<std::size_t> groups) {
  double sum = 0.0;
  int count = 0;
  for (std::size_t g : groups) {
    if (m.per_group_acc[g]) {
      sum += *m.per_group_acc[g];
      ++count;
    }
  }
  if (count == 0) throw ContractError("no populated groups to average");
  return sum / count;
}

}  // namespace

double minority_accuracy(const GroupMetrics& m) { return mean_of(m, {1, 2}); }
double majority_accuracy(const GroupMetrics& m) { return mean_of(m, {0, 3}); }

double worst_majority_accuracy(const GroupMetrics& m) {
  double worst = 1.0;
  bool any = false;
  for (std::size_t g : {0u, 3u}) {
    if (m.per_group_acc[g]) {
      worst = std::min(worst, *m.per_group_acc[g]);
      any = true;
    }
  }
  if (!any) throw ContractError("no populated majority groups");
  return worst;
}

SpuriousDatasetSpec sweep_spec(const SpuriousDatasetSpec& base, double rho, std::uint64_t seed) {
  SpuriousDatasetSpec spec = base;
  spec.rho = rho;
  spec.seed = derive_seed(base.seed, seed);
  return spec;
}

Dataset sweep_testset(const SpuriousDatasetSpec& base, const SweepConfig& config) {
  SpuriousDatasetSpec test_spec = base;
  test_spec.seed = config.test_seed;
  return build_balanced_testset(test_spec, config.test_per_group);
}

TrainResult sweep_run(const SpuriousDatasetSpec& base, double rho, std::uint64_t seed, const SweepConfig& config) {
  TrainConfig tc = config.train;
  tc.seed = derive_seed(config.train.seed, seed);
  return train(Model::build(config.model, derive_seed(seed, 0x5eed)), generate_dataset(sweep_spec(base, rho, seed)), tc);
}

std::vector<SweepEntry> minority_ratio_sweep(const SpuriousDatasetSpec& base, std::span<const double> rhos,
                                             const SweepConfig& config) {
  if (rhos.empty()) throw ContractError("sweep: rho list is empty");
  for (double r : rhos) {
    if (!(r >= 0.5 && r <= 1.0)) throw ContractError("sweep: rho " + std::to_string(r) + " outside [0.5, 1]");
  }
  if (config.seeds.empty()) throw ContractError("sweep: no seeds");
  const Dataset test = sweep_testset(base, config);

  std::vector<SweepEntry> out;
  for (double rho : rhos) {
    for (std::uint64_t seed : config.seeds) {
      TrainResult r = sweep_run(base, rho, seed, config);
      out.push_back({rho, seed, evaluate_groups(r.model, test), std::move(r.log)});
    }
  }
  return out;
}

nlohmann::json to_json(const GroupMetrics& m) {
  nlohmann::json acc = nlohmann::json::array();
  for (const auto& a : m.per_group_acc) acc.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  return {{"per_group_acc", acc}, {"group_sizes", m.group_sizes}, {"avg", m.avg}, {"wga", m.wga}, {"gap", m.gap}};
}

nlohmann::json to_json(const TrainLog& log) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochLog& e : log.epochs) {
    nlohmann::json j{{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}};
    if (e.validation) j["validation"] = to_json(*e.validation);
    epochs.push_back(std::move(j));
  }
  return {{"schema", 1}, {"epochs", epochs}, {"final_train_accuracy", log.final_train_accuracy}};
}

nlohmann::json to_json(std::span<const SweepEntry> sweep) {
  nlohmann::json rows = nlohmann::json::array();
  for (const SweepEntry& e : sweep) {
    rows.push_back({{"rho", e.rho},
                    {"seed", e.seed},
                    {"metrics", to_json(e.metrics)},
                    {"final_train_accuracy", e.log.final_train_accuracy}});
  }
  return {{"schema", 1}, {"entries", rows}};
}

namespace {

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

std::string train_log_csv(const TrainLog& log) {
  std::ostringstream out;
  out << "epoch,loss,accuracy,val_avg,val_wga,val_gap\n";
  for (const EpochLog& e : log.epochs) {
    out << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.accuracy);
    if (e.validation) {
      out << ',' << fmt(e.validation->avg) << ',' << fmt(e.validation->wga) << ',' << fmt(e.validation->gap);
    } else {
      out << ",,,";
    }
    out << '\n';
  }
  return out.str();
}

std::string sweep_csv(std::span<const SweepEntry> sweep) {
  std::ostringstream out;
  out << "rho,seed,acc_g0,acc_g1,acc_g2,acc_g3,avg,wga,gap,train_acc\n";
  for (const SweepEntry& e : sweep) {
    out << fmt(e.rho) << ',' << e.seed;
    for (const auto& a : e.metrics.per_group_acc) out << ',' << fmt(a);
    out << ',' << fmt(e.metrics.avg) << ',' << fmt(e.metrics.wga) << ',' << fmt(e.metrics.gap) << ','
        << fmt(e.log.final_train_accuracy) << '\n';
  }
  return out.str();
}

}  // namespace spurlens
