#include "spurlens/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "spurlens/attribution.hpp"
#include "spurlens/binary_io.hpp"
#include "spurlens/checkpoint.hpp"
#include "spurlens/data.hpp"
#include "spurlens/error.hpp"
#include "spurlens/interventions.hpp"
#include "spurlens/reporting.hpp"
#include "spurlens/train.hpp"

namespace spurlens {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string item = trim(std::string_view(s).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

enum class KeyKind { Value, Path, PathList };

struct Key {
  std::string name;
  std::string fallback;
  KeyKind kind = KeyKind::Value;
};

class Run;
using Action = void (*)(Run&);

struct Command {
  std::string name;
  std::string summary;
  std::vector<Key> keys;
  Action action;
};

/// Resolved settings plus the run directory; every file written through it is
/// hashed into the manifest.
class Run {
 public:
  Run(const Command& command, Settings settings, fs::path dir)
      : command_(command), settings_(std::move(settings)), dir_(std::move(dir)) {}

  const std::string& str(const std::string& key) const {
    const auto it = settings_.find(key);
    if (it == settings_.end()) throw ConfigError("internal: no key '" + key + "'");
    return it->second;
  }
  bool has(const std::string& key) const { return !str(key).empty(); }

  long long integer(const std::string& key) const { return parse_number<long long>(key, str(key)); }
  double real(const std::string& key) const { return parse_number<double>(key, str(key)); }
  std::uint64_t seed(const std::string& key) const { return parse_number<std::uint64_t>(key, str(key)); }
  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split_list(str(key))) out.push_back(parse_number<double>(key, item));
    return out;
  }
  std::vector<std::uint64_t> seeds(const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const auto& item : split_list(str(key))) out.push_back(parse_number<std::uint64_t>(key, item));
    return out;
  }

  fs::path input(const std::string& key) const {
    if (!has(key)) throw ConfigError(command_.name + " needs " + key);
    return str(key);
  }
  Dataset dataset(const std::string& key) const { return load_dataset(input(key)); }
  std::optional<Dataset> optional_dataset(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return dataset(key);
  }
  Model model(const std::string& key = "model") const { return load_model(input(key)); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void bytes_file(const std::string& name, const std::vector<std::uint8_t>& bytes) {
    write_file_bytes(path(name), bytes);
    artifacts_[name] = hex64(fnv1a64(bytes.data(), bytes.size()));
  }
  void text_file(const std::string& name, const std::string& text) {
    bytes_file(name, std::vector<std::uint8_t>(text.begin(), text.end()));
  }
  void json_file(const std::string& name, const json& j) { text_file(name, j.dump(2) + "\n"); }
  void dataset_file(const std::string& name, const Dataset& d) { bytes_file(name, encode_dataset(d)); }
  void checkpoint(const std::string& name, const Model& m, std::span<const Parameter> extras = {}) {
    const json provenance = {{"command", command_.name}, {"config", portable_settings()}};
    bytes_file(name, encode_checkpoint(m, provenance, extras));
  }
  /// For files written by library calls that take a path.
  void record(const std::string& name) {
    const auto bytes = read_file_bytes(path(name));
    artifacts_[name] = hex64(fnv1a64(bytes.data(), bytes.size()));
  }

  json public_settings() const {
    json j = json::object();
    for (const auto& [k, v] : settings_) {
      if (k != "out") j[k] = v;
    }
    return j;
  }

  /// Settings with input paths replaced by content hashes.
  json portable_settings() const {
    json j = public_settings();
    for (const Key& k : command_.keys) {
      const std::string& v = str(k.name);
      if (v.empty() || k.kind == KeyKind::Value) continue;
      std::string hashed;
      for (const auto& p : k.kind == KeyKind::Path ? std::vector<std::string>{v} : split_list(v)) {
        hashed += (hashed.empty() ? "@" : ",@") + content_hash(p);
      }
      j[k.name] = hashed;
    }
    return j;
  }

  json manifest() const {
    json inputs = json::object(), seeds = json::object();
    for (const Key& k : command_.keys) {
      const std::string& v = str(k.name);
      if (k.name.find("seed") != std::string::npos) seeds[k.name] = v;
      if (v.empty() || k.kind == KeyKind::Value) continue;
      json entries = json::array();
      for (const auto& p : k.kind == KeyKind::Path ? std::vector<std::string>{v} : split_list(v)) {
        entries.push_back({{"path", p}, {"fnv", content_hash(p)}});
      }
      inputs[k.name] = entries;
    }
    return {{"schema", 1},
            {"tool", "spurlens"},
            {"command", command_.name},
            {"config", public_settings()},
            {"seeds", seeds},
            {"inputs", inputs},
            {"artifacts", artifacts_}};
  }

  static std::string content_hash(const std::string& p) {
    if (fs::is_directory(p)) return "dir:" + fs::path(p).filename().string();
    const auto bytes = read_file_bytes(p);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
  }

 private:
  template <class T>
  static T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const char* first = text.data();
    const char* last = first + text.size();
    if (!text.empty() && text.front() == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (text.empty() || ec != std::errc() || ptr != last) {
      throw ConfigError(key + ": expected a number, got '" + text + "'");
    }
    return v;
  }

  const Command& command_;
  Settings settings_;
  fs::path dir_;
  json artifacts_ = json::object();
};

class RunLock {
 public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      if (fs::exists(path_)) throw ContractError("run directory is locked: " + path_.string());
      throw IoError("cannot create lock file " + path_.string());
    }
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

// ---- settings shared by several commands ----

std::vector<Key> dataset_keys() {
  return {{"style", "patch"},      {"rho", "0.95"},     {"n_per_class", "500"}, {"one_sided", "false"},
          {"image_size", "32"},    {"patch_size", "6"}, {"contrast", "0.6"},    {"noise", "0.1"}};
}

std::vector<Key> train_keys() {
  return {{"arch", "cnn"}, {"epochs", "30"},  {"lr", "0.05"},       {"weight_decay", "0.0001"},
          {"batch", "32"},  {"cosine", "true"}, {"clip_norm", "0"}};
}

std::vector<Key> mask_keys() {
  return {{"keep", "0.8"},          {"epochs", "10"},           {"batch", "32"},
          {"lr", "0.05"},           {"init_logit", "2"},        {"sparsity_weight", "1"},
          {"floor_fraction", "0.01"}, {"seed", "0"}};
}

std::vector<Key> join(std::vector<Key> a, const std::vector<Key>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Index to_index(long long v) { return static_cast<Index>(v); }

SpuriousDatasetSpec dataset_spec(const Run& r) {
  SpuriousDatasetSpec spec;
  spec.style = style_from_string(r.str("style"));
  spec.rho = r.real("rho");
  spec.n_per_class = to_index(r.integer("n_per_class"));
  spec.one_sided = r.flag("one_sided");
  spec.image_size = to_index(r.integer("image_size"));
  spec.patch_size = to_index(r.integer("patch_size"));
  spec.core_contrast = static_cast<float>(r.real("contrast"));
  spec.noise = static_cast<float>(r.real("noise"));
  spec.seed = r.seed("seed");
  spec.validate();
  return spec;
}

ModelConfig architecture(const Run& r, Index image_size, Index channels) {
  const std::string& a = r.str("arch");
  if (a == "cnn") {
    SmallCnnConfig c;
    c.image_size = image_size;
    c.in_channels = channels;
    return c;
  }
  if (a == "vit") {
    SmallVitConfig c;
    c.image_size = image_size;
    c.in_channels = channels;
    return c;
  }
  throw ConfigError("arch: expected cnn or vit, got '" + a + "'");
}

TrainConfig train_config(const Run& r) {
  TrainConfig c;
  c.epochs = to_index(r.integer("epochs"));
  c.lr = r.real("lr");
  c.weight_decay = r.real("weight_decay");
  c.batch_size = to_index(r.integer("batch"));
  c.cosine = r.flag("cosine");
  c.clip_norm = r.real("clip_norm");
  c.seed = r.seed("seed");
  c.validate();
  return c;
}

MaskConfig mask_config(const Run& r) {
  MaskConfig c;
  c.keep = r.real("keep");
  c.epochs = to_index(r.integer("epochs"));
  c.batch_size = to_index(r.integer("batch"));
  c.lr = r.real("lr");
  c.init_logit = r.real("init_logit");
  c.sparsity_weight = r.real("sparsity_weight");
  c.floor_fraction = r.real("floor_fraction");
  c.seed = r.seed("seed");
  c.validate();
  return c;
}

json metrics_json(const GroupMetrics& m) {
  json j = to_json(m);
  j["minority"] = minority_accuracy(m);
  j["majority"] = majority_accuracy(m);
  return j;
}

/// Neurons whose head row is exactly zero.
ClassifierEdit zero_rows_edit(const Model& m) {
  ClassifierEdit e;
  e.head_weight = m.head_weight();
  e.head_bias = m.head_bias();
  const Index d = m.embed_dim(), C = m.num_classes();
  for (Index i = 0; i < d; ++i) {
    bool zero = true;
    for (Index c = 0; c < C; ++c) zero = zero && e.head_weight[i * C + c] == 0.0f;
    if (zero) e.zeroed.push_back(i);
  }
  return e;
}

// ---- subcommands ----

void cmd_gen(Run& r) {
  const SpuriousDatasetSpec spec = dataset_spec(r);
  const Dataset train = generate_dataset(spec);
  r.dataset_file("train.bin", train);
  r.text_file("census.csv", census_csv(train.census()));
  json j = {{"schema", 1}, {"style", r.str("style")}, {"train_census", train.census()}};
  const Index per_group = to_index(r.integer("test_per_group"));
  if (per_group > 0) {
    Dataset test = build_balanced_testset(spec, per_group);
    if (spec.one_sided) {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < test.size(); ++i) {
        if (test.samples[i].g != 3) keep.push_back(i);
      }
      test = test.subset(keep);
    }
    r.dataset_file("test.bin", test);
    j["test_census"] = test.census();
  }
  r.json_file("gen.json", j);
}

void cmd_train(Run& r) {
  const Dataset d = r.dataset("data");
  const ModelConfig mc = architecture(r, d.image_size, d.channels);
  const TrainConfig tc = train_config(r);
  const TrainResult res = train(Model::build(mc, tc.seed), d, tc);
  r.checkpoint("model.ckpt", res.model);
  r.text_file("train_log.csv", train_log_csv(res.log));
  json j = {{"schema", 1}, {"final_train_accuracy", res.log.final_train_accuracy}, {"log", to_json(res.log)}};
  if (const auto test = r.optional_dataset("test")) j["test"] = metrics_json(evaluate_groups(res.model, *test));
  r.json_file("train.json", j);
}

void cmd_eval(Run& r) {
  const Model m = r.model();
  const Dataset d = r.dataset("data");
  r.json_file("eval.json", {{"schema", 1}, {"metrics", metrics_json(evaluate_groups(m, d))}});
}

void cmd_sweep(Run& r) {
  const SpuriousDatasetSpec base = dataset_spec(r);
  SweepConfig sc;
  sc.model = architecture(r, base.image_size, 3);
  sc.train = train_config(r);
  sc.test_per_group = to_index(r.integer("test_per_group"));
  sc.test_seed = r.seed("test_seed");
  sc.seeds = r.seeds("seeds");
  if (sc.seeds.empty()) throw ConfigError("seeds: empty list");
  const std::vector<double> rhos = r.reals("rhos");
  if (rhos.empty()) throw ConfigError("rhos: empty list");
  const auto entries = minority_ratio_sweep(base, rhos, sc);
  r.json_file("sweep.json", to_json(std::span<const SweepEntry>(entries)));
  r.text_file("sweep.csv", sweep_csv(entries));
}

void cmd_sscore(Run& r) {
  const Model m = r.model();
  const Dataset d = r.dataset("data");
  const SScoreReport rep = sscore_report(m, d, to_index(r.integer("n")), r.real("alpha"), r.seed("seed"),
                                         to_index(r.integer("layer")));
  r.json_file("sscore.json", to_json(rep));
}

SScoreReport read_sscore(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
    return make_report(j.at("scores").get<std::vector<double>>(), j.at("alpha").get<double>(),
                       j.at("sample_ids").get<std::vector<std::uint64_t>>());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": not an s-score report (" + e.what() + ")");
  }
}

void cmd_prune(Run& r) {
  const Model m = r.model();
  const SScoreReport rep = read_sscore(r.input("sscore"));
  const ClassifierEdit edit = prune_classifier_by_sscore(m, rep, r.real("tau"));
  const Model pruned = apply_edit(m, edit);
  r.checkpoint("pruned.ckpt", pruned);
  json j = {{"schema", 1}, {"tau", r.real("tau")}, {"edit", to_json(edit)}};
  if (const auto test = r.optional_dataset("test")) {
    j["before"] = metrics_json(evaluate_groups(m, *test));
    j["after"] = metrics_json(evaluate_groups(pruned, *test));
  }
  r.json_file("prune.json", j);
}

void cmd_finetune(Run& r) {
  const Model m = r.model();
  const Dataset d = r.dataset("data");
  FinetuneConfig fc;
  fc.epochs = to_index(r.integer("epochs"));
  fc.lr = r.real("lr");
  fc.weight_decay = r.real("weight_decay");
  fc.batch_size = to_index(r.integer("batch"));
  fc.seed = r.seed("seed");
  const ClassifierEdit start = zero_rows_edit(m);
  const bool keep = r.flag("keep_zero_rows") && !start.zeroed.empty();
  const ClassifierEdit edit = finetune_classifier_balanced(m, d, fc, keep ? &start : nullptr);
  const Model tuned = apply_edit(m, edit);
  r.checkpoint("finetuned.ckpt", tuned);
  json j = {{"schema", 1}, {"edit", to_json(edit)}};
  if (const auto test = r.optional_dataset("test")) {
    j["before"] = metrics_json(evaluate_groups(m, *test));
    j["after"] = metrics_json(evaluate_groups(tuned, *test));
  }
  r.json_file("finetune.json", j);
}

void cmd_dfr(Run& r) {
  const Model m = r.model();
  const Dataset fit = r.dataset("fit"), tune = r.dataset("tune");
  const auto test = r.optional_dataset("test");
  const auto attribution = r.optional_dataset("attribution");
  std::vector<double> lambdas = r.has("lambdas") ? r.reals("lambdas") : default_dfr_lambdas();
  DfrOptions o;
  o.iterations = to_index(r.integer("iterations"));
  o.standardize = r.flag("standardize");
  o.evaluation = test ? &*test : nullptr;
  o.attribution = attribution ? &*attribution : nullptr;
  o.sscore_samples = to_index(r.integer("n"));
  o.alpha = r.real("alpha");
  o.sscore_seed = r.seed("seed");
  const DfrResult res = dfr_retrain(m, fit, tune, lambdas, o);
  r.checkpoint("dfr.ckpt", apply_edit(m, res.edit));
  r.json_file("dfr.json", to_json(res));
}

void cmd_mask(Run& r) {
  const Model m = r.model();
  const Dataset d = r.dataset("data");
  const MaskResult res = train_weight_mask(m, d, mask_config(r));
  const auto extras = mask_extras(res.mask);
  r.checkpoint("masked.ckpt", res.masked, extras);
  json j = {{"schema", 1}, {"mask", to_json(res.mask)}, {"epoch_loss", res.epoch_loss}};
  if (const auto test = r.optional_dataset("test")) {
    j["before"] = metrics_json(evaluate_groups(m, *test));
    j["after"] = metrics_json(evaluate_groups(res.masked, *test));
  }
  r.json_file("mask.json", j);
}

void cmd_ablate(Run& r) {
  const Model m = r.model();
  const Dataset d = r.dataset("data"), test = r.dataset("test");
  const AblationResult res = group_ablation_experiment(m, d, static_cast<int>(r.integer("group")), mask_config(r), test);
  const auto extras = mask_extras(res.mask);
  r.checkpoint("masked.ckpt", apply_mask(m, res.mask), extras);
  r.json_file("ablation.json", to_json(res));
}

void cmd_attn(Run& r) {
  const Model m = r.model();
  const Dataset d = r.dataset("data");
  const long long k = r.integer("sample");
  if (k < 0 || static_cast<std::size_t>(k) >= d.size()) {
    throw IndexError("sample " + std::to_string(k) + " outside [0, " + std::to_string(d.size()) + ")");
  }
  const LabeledSample& smp = d.samples[static_cast<std::size_t>(k)];
  const Index layer = to_index(r.integer("layer"));
  const long long neuron = r.integer("neuron");
  json j = {{"schema", 1}, {"sample", smp.id}, {"y", smp.y}, {"s", smp.s}, {"g", smp.g}};
  if (m.family() == ModelFamily::Vit) {
    const long long head = r.integer("head");
    const AttentionRow row = attention_row_map(m, smp.image, layer, head < 0 ? std::nullopt : std::optional<Index>(head),
                                               to_index(r.integer("target")));
    render_heatmap(row, r.path("attention.pgm"), m.image_size());
    r.record("attention.pgm");
    render_heatmap(row, r.path("attention_overlay.pgm"), m.image_size(), &smp);
    r.record("attention_overlay.pgm");
    j["attention"] = {{"layer", layer}, {"head", head}, {"target", r.integer("target")}, {"cls", row.cls}, {"row", row.row}};
  } else if (neuron < 0) {
    throw ConfigError("attn on a CNN needs neuron >= 0 (CNNs have no attention)");
  }
  if (neuron >= 0) {
    const Heatmap hm = gradcam_neuron(m, smp.image, to_index(neuron), layer);
    const BinaryMap b = binarize(hm, r.real("alpha"));
    render_heatmap(hm, r.path("gradcam.pgm"));
    r.record("gradcam.pgm");
    render_heatmap(hm, r.path("gradcam_overlay.pgm"), &smp);
    r.record("gradcam_overlay.pgm");
    render_heatmap(b, r.path("binary.pgm"));
    r.record("binary.pgm");
    j["gradcam"] = {{"neuron", neuron}, {"alpha", b.alpha}, {"active_pixels", b.count()}, {"overlap", overlap_term(b, smp.mask)}};
  }
  r.json_file("attn.json", j);
}

void cmd_embed(Run& r) {
  const Model m = r.model();
  const Dataset d = r.dataset("data");
  const EmbeddingSet e = export_embeddings(m, d, Run::content_hash(r.str("model")));
  r.text_file("embeddings.csv", embeddings_csv(e));
  r.json_file("embed.json", {{"schema", 1},
                             {"n", e.rows.rows()},
                             {"d", e.rows.cols()},
                             {"silhouette_by_class", cluster_alignment(e, ClusterBy::Label)},
                             {"silhouette_by_spurious", cluster_alignment(e, ClusterBy::Spurious)}});
}

void cmd_tsne(Run& r) {
  const EmbeddingSet e = parse_embeddings_csv(read_text_file(r.input("embeddings")));
  TsneConfig c;
  c.perplexity = r.real("perplexity");
  c.iterations = to_index(r.integer("iterations"));
  if (r.has("learning_rate")) c.learning_rate = r.real("learning_rate");
  c.exaggeration = r.real("exaggeration");
  c.exaggeration_iterations = to_index(r.integer("exaggeration_iterations"));
  c.momentum_switch = to_index(r.integer("momentum_switch"));
  c.seed = r.seed("seed");
  const Projection2D p = tsne_project(e, c);
  r.text_file("tsne.csv", projection_csv(p, e));
  json j = to_json(p);
  j["silhouette_by_class"] = cluster_alignment(p, e, ClusterBy::Label);
  j["silhouette_by_spurious"] = cluster_alignment(p, e, ClusterBy::Spurious);
  r.json_file("tsne.json", j);
}

void cmd_report(Run& r) {
  const auto dirs = split_list(r.str("inputs"));
  if (dirs.empty()) throw ConfigError("report needs inputs (comma-separated run directories)");
  json runs = json::object();
  for (const auto& dir : dirs) {
    if (!fs::is_directory(dir)) throw IoError("not a run directory: " + dir);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    json artifacts = json::object();
    std::string command;
    for (const auto& f : files) {
      json j;
      try {
        j = json::parse(read_text_file(f));
      } catch (const json::exception& e) {
        throw FormatError(f.string() + ": " + e.what());
      }
      if (f.filename() == "manifest.json") {
        command = j.value("command", "");
        continue;
      }
      artifacts[f.filename().string()] = std::move(j);
    }
    runs[fs::path(dir).lexically_normal().filename().string()] = {{"command", command}, {"artifacts", artifacts}};
  }
  r.json_file("report.json", {{"schema", 1}, {"runs", runs}});
}

const std::vector<Command>& commands() {
  static const std::vector<Command> table = [] {
    const Key seed{"seed", "0"};
    const Key model{"model", "", KeyKind::Path};
    const Key data{"data", "", KeyKind::Path};
    const Key test{"test", "", KeyKind::Path};
    std::vector<Command> t;
    t.push_back({"gen", "generate a training set and a balanced test set",
                 join(dataset_keys(), {seed, {"test_per_group", "100"}}), cmd_gen});
    t.push_back({"train", "train a model from scratch", join(train_keys(), {data, test, seed}), cmd_train});
    t.push_back({"eval", "per-group accuracy of a model", {model, data}, cmd_eval});
    t.push_back({"sweep", "train across spurious ratios and seeds",
                 join(join(dataset_keys(), train_keys()),
                      {seed, {"rhos", "0.5,0.75,0.9,0.95,1.0"}, {"seeds", "0,1,2"}, {"test_per_group", "100"},
                       {"test_seed", "1000"}}),
                 cmd_sweep});
    t.push_back({"sscore", "s-score report over the neurons of z",
                 {model, data, {"n", "50"}, {"alpha", "0.5"}, seed, {"layer", "-1"}}, cmd_sscore});
    t.push_back({"prune", "zero classifier rows of high s-score neurons",
                 {model, {"sscore", "", KeyKind::Path}, {"tau", "0.7"}, test}, cmd_prune});
    t.push_back({"finetune", "retrain the head on a group-balanced set",
                 {model, data, test, {"epochs", "100"}, {"lr", "0.05"}, {"weight_decay", "0"}, {"batch", "32"}, seed,
                  {"keep_zero_rows", "true"}},
                 cmd_finetune});
    t.push_back({"dfr", "sparse last-layer retraining",
                 {model,
                  {"fit", "", KeyKind::Path},
                  {"tune", "", KeyKind::Path},
                  test,
                  {"attribution", "", KeyKind::Path},
                  {"lambdas", ""},
                  {"iterations", "3000"},
                  {"standardize", "true"},
                  {"n", "50"},
                  {"alpha", "0.5"},
                  seed},
                 cmd_dfr});
    t.push_back({"mask", "train a binary weight mask", join({model, data, test}, mask_keys()), cmd_mask});
    t.push_back({"ablate", "mask-train without one group and compare",
                 join({model, data, test, {"group", "0"}}, mask_keys()), cmd_ablate});
    t.push_back({"attn", "attention and neuron heatmaps for one sample",
                 {model, data, {"sample", "0"}, {"layer", "-1"}, {"head", "-1"}, {"target", "0"}, {"neuron", "-1"},
                  {"alpha", "0.5"}},
                 cmd_attn});
    t.push_back({"embed", "export penultimate embeddings", {model, data}, cmd_embed});
    t.push_back({"tsne", "exact t-SNE of exported embeddings",
                 {{"embeddings", "", KeyKind::Path},
                  {"perplexity", "30"},
                  {"iterations", "500"},
                  {"learning_rate", ""},
                  {"exaggeration", "12"},
                  {"exaggeration_iterations", "100"},
                  {"momentum_switch", "250"},
                  seed},
                 cmd_tsne});
    t.push_back({"report", "collect the JSON artifacts of run directories", {{"inputs", "", KeyKind::PathList}},
                 cmd_report});
    for (auto& c : t) c.keys.push_back({"out", "runs"});
    return t;
  }();
  return table;
}

const Command& find_command(const std::string& name) {
  for (const auto& c : commands()) {
    if (c.name == name) return c;
  }
  throw ConfigError("unknown command '" + name + "'");
}

std::string joined_keys(const Command& c) {
  std::string s;
  for (const auto& k : cli_keys(c.name)) s += (s.empty() ? "" : ", ") + k;
  return s;
}

int execute(const Command& command, Settings resolved, std::ostream& out) {
  const fs::path dir = fs::path(resolved.at("out")) / run_name(command.name, resolved);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const RunLock lock(dir / ".lock");
  Run run(command, std::move(resolved), dir);
  command.action(run);
  const json manifest = run.manifest();
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  out << dir.string() << "\n";
  return 0;
}

}  // namespace

Settings parse_config(std::string_view text, const std::string& origin) {
  Settings s;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (!body.empty()) {
      const auto eq = body.find('=');
      const std::string key = eq == std::string::npos ? "" : trim(std::string_view(body).substr(0, eq));
      if (key.empty()) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key=value, got '" + body + "'");
      }
      s[key] = trim(std::string_view(body).substr(eq + 1));
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return s;
}

std::vector<std::string> cli_commands() {
  std::vector<std::string> out;
  for (const auto& c : commands()) out.push_back(c.name);
  return out;
}

std::vector<std::string> cli_keys(const std::string& command) {
  std::vector<std::string> out;
  for (const auto& k : find_command(command).keys) out.push_back(k.name);
  std::sort(out.begin(), out.end());
  return out;
}

std::string run_name(const std::string& command, const Settings& resolved) {
  const Command& c = find_command(command);
  std::string canon = command + "\n";
  for (const auto& [k, v] : resolved) {
    if (k == "out") continue;
    const auto key = std::find_if(c.keys.begin(), c.keys.end(), [&](const Key& x) { return x.name == k; });
    std::string value = v;
    if (key != c.keys.end() && key->kind != KeyKind::Value && !v.empty()) {
      value.clear();
      for (const auto& p : key->kind == KeyKind::Path ? std::vector<std::string>{v} : split_list(v)) {
        value += "@" + Run::content_hash(p);
      }
    }
    canon += k + "=" + value + "\n";
  }
  return command + "-" + hex64(fnv1a64(canon));
}

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spurious-feature probes for small CNN and ViT classifiers", args.empty() ? "spurlens" : args[0]};
  app.require_subcommand(1, 1);
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, std::map<std::string, CLI::Option*>> options;
  std::map<std::string, std::string> config_files;
  for (const auto& c : commands()) {
    CLI::App* sub = app.add_subcommand(c.name, c.summary);
    sub->add_option("--config", config_files[c.name], "key=value file; flags override it");
    for (const auto& k : c.keys) {
      options[c.name][k.name] =
          sub->add_option("--" + k.name, values[c.name][k.name], k.fallback.empty() ? "" : "default " + k.fallback);
    }
  }

  std::vector<std::string> reversed(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(reversed.begin(), reversed.end());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  try {
    const Command& command = find_command(app.get_subcommands().front()->get_name());
    Settings resolved;
    for (const auto& k : command.keys) resolved[k.name] = k.fallback;
    if (!config_files[command.name].empty()) {
      const Settings file = parse_config(read_text_file(config_files[command.name]), config_files[command.name]);
      for (const auto& [k, v] : file) {
        if (!resolved.contains(k)) {
          throw ConfigError("unknown key '" + k + "' for " + command.name + "; valid keys: " + joined_keys(command));
        }
        resolved[k] = v;
      }
    }
    for (const auto& k : command.keys) {
      if (options[command.name][k.name]->count() > 0) resolved[k.name] = values[command.name][k.name];
    }
    return execute(command, std::move(resolved), out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

int run_cli(int argc, const char* const* argv) {
  const std::vector<std::string> args(argv, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace spurlens
