// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [cache_dir] [--only 3,5]
//
// Trained models are cached in cache_dir (default ./acceptance_cache) keyed by
// their full recipe, so reruns skip training.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "spurlens/attribution.hpp"
#include "spurlens/binary_io.hpp"
#include "spurlens/checkpoint.hpp"
#include "spurlens/cli.hpp"
#include "spurlens/interventions.hpp"
#include "spurlens/optim.hpp"
#include "spurlens/reporting.hpp"
#include "spurlens/rng.hpp"
#include "spurlens/train.hpp"

using namespace spurlens;
namespace fs = std::filesystem;

namespace {

constexpr int kCacheVersion = 2;
const std::vector<std::uint64_t> kSeeds{0, 1, 2};
const std::vector<double> kRhos{0.5, 0.75, 0.9, 0.95, 1.0};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string groups(const GroupMetrics& m) {
  std::string s = "(";
  for (std::size_t g = 0; g < 4; ++g) {
    s += m.per_group_acc[g] ? fmt("%.2f", *m.per_group_acc[g]) : "-";
    s += g < 3 ? " " : ")";
  }
  return s;
}

bool majority(const std::vector<bool>& votes) {
  return 2 * std::count(votes.begin(), votes.end(), true) > static_cast<long>(votes.size());
}

std::string votes_str(const std::vector<bool>& votes) {
  return fmt("%ld/%zu seeds", static_cast<long>(std::count(votes.begin(), votes.end(), true)), votes.size());
}

// ---- shared experiment state ----

class Lab {
 public:
  explicit Lab(fs::path cache) : cache_(std::move(cache)) {
    fs::create_directories(cache_);
    base_.n_per_class = 500;
    sweep_.test_per_group = 100;
    sweep_.test_seed = 1000;
    test_ = sweep_testset(base_, sweep_);
  }

  const Dataset& test() const { return test_; }
  const SpuriousDatasetSpec& base() const { return base_; }
  Dataset train_set(double rho, std::uint64_t seed) const { return generate_dataset(sweep_spec(base_, rho, seed)); }

  const Model& cnn(double rho, std::uint64_t seed) { return model(SmallCnnConfig{}, base_, rho, seed); }
  const Model& vit(double rho, std::uint64_t seed) { return model(SmallVitConfig{}, base_, rho, seed); }

  SpuriousDatasetSpec one_sided() const {
    SpuriousDatasetSpec s = base_;
    s.one_sided = true;
    return s;
  }
  const Model& one_sided_cnn(std::uint64_t seed) { return model(SmallCnnConfig{}, one_sided(), 0.5, seed); }

  const SScoreReport& sscores(const Model& m, double rho, std::uint64_t seed) {
    const std::string key = m.architecture() + fmt("|%g|%llu", rho, static_cast<unsigned long long>(seed));
    auto it = reports_.find(key);
    if (it == reports_.end()) it = reports_.emplace(key, sscore_report(m, train_set(rho, seed), 50, 0.5, 0)).first;
    return it->second;
  }

 private:
  const Model& model(const ModelConfig& arch, const SpuriousDatasetSpec& base, double rho, std::uint64_t seed) {
    SweepConfig sc = sweep_;
    sc.model = arch;
    const SpuriousDatasetSpec spec = sweep_spec(base, rho, seed);
    const std::string recipe =
        fmt("v%d|%s|style=%s|one_sided=%d|n=%lld|rho=%.17g|seed=%llu|contrast=%g|noise=%g|", kCacheVersion,
            architecture_string(arch).c_str(), to_string(spec.style).c_str(), int(spec.one_sided),
            static_cast<long long>(spec.n_per_class), spec.rho, static_cast<unsigned long long>(spec.seed),
            double(spec.core_contrast), double(spec.noise)) +
        fmt("epochs=%lld|lr=%g|cosine=%d|clip=%g|wd=%g|batch=%lld|train_seed=%llu|init=%llu",
            static_cast<long long>(sc.train.epochs), sc.train.lr, int(sc.train.cosine), sc.train.clip_norm,
            sc.train.weight_decay, static_cast<long long>(sc.train.batch_size),
            static_cast<unsigned long long>(sc.train.seed), static_cast<unsigned long long>(seed));
    auto it = models_.find(recipe);
    if (it != models_.end()) return it->second;
    const fs::path path = cache_ / (hex64(fnv1a64(recipe)) + ".ckpt");
    if (fs::exists(path)) {
      it = models_.emplace(recipe, load_model(path, arch)).first;
    } else {
      const auto t0 = std::chrono::steady_clock::now();
      Model m = sweep_run(base, rho, seed, sc).model;
      save_checkpoint(path, m, {{"recipe", recipe}});
      std::fprintf(stderr, "  trained %s rho=%g seed=%llu in %.0f s\n", arch.index() == 0 ? "cnn" : "vit", rho,
                   static_cast<unsigned long long>(seed),
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      it = models_.emplace(recipe, std::move(m)).first;
    }
    return it->second;
  }

  fs::path cache_;
  SpuriousDatasetSpec base_;
  SweepConfig sweep_;
  Dataset test_;
  std::map<std::string, Model> models_;
  std::map<std::string, SScoreReport> reports_;
};

struct Verdict {
  bool pass = false;
  std::string detail;
};

double accuracy_on(const Model& m, const Dataset& d) {
  const auto pred = predict(m, d);
  Index hit = 0;
  for (std::size_t i = 0; i < d.size(); ++i) hit += pred[i] == d.samples[i].y;
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

// ---- criteria ----

template <class Scalar>
Tensor<Scalar> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

Var<float> weighted_sum(const Var<float>& y, std::uint64_t seed) {
  return sum(mul(y, y.tape().constant(random_tensor<float>(y.shape(), seed))));
}

Verdict gradient_correctness() {
  using P = const std::vector<Var<float>>&;
  struct Case {
    std::string name;
    LossFn<float> fn;
    std::vector<Tensorf> params;
    double eps = 1e-3;
  };
  const Tensorf x = random_tensor<float>({3, 4}, 21), y = random_tensor<float>({3, 4}, 22);
  const Tensorf b = random_tensor<float>({4}, 23);
  const std::vector<int> labels{0, 2, 1};
  const std::vector<Index> ids{2, 0, 2, 1};
  std::vector<Case> cases{
      {"matmul", [](Tape<float>&, P p) { return weighted_sum(matmul(p[0], p[1]), 1); },
       {random_tensor<float>({2, 3, 4}, 3), random_tensor<float>({2, 4, 2}, 4)}},
      {"relu", [](Tape<float>&, P p) { return weighted_sum(relu(p[0]), 2); }, {x}},
      {"gelu", [](Tape<float>&, P p) { return weighted_sum(gelu(p[0]), 3); }, {x}},
      {"sigmoid", [](Tape<float>&, P p) { return weighted_sum(sigmoid(p[0]), 4); }, {x}},
      {"layer_norm", [](Tape<float>&, P p) { return weighted_sum(layer_norm(p[0], p[1], p[2]), 5); },
       {x, random_tensor<float>({4}, 24, 0.5, 1.5), b}},
      {"softmax", [](Tape<float>&, P p) { return weighted_sum(softmax(p[0]), 6); }, {x}},
      {"add/mul/scale", [](Tape<float>&, P p) { return weighted_sum(scale(add(mul(p[0], p[1]), p[0]), 0.7f), 7); },
       {x, y}},
      {"add_bias", [](Tape<float>&, P p) { return weighted_sum(add_bias(p[0], p[1], 1), 8); }, {x, b}},
      {"sum/mean/mean_last",
       [](Tape<float>&, P p) { return add(mean(p[0]), sum(mul(mean_last(p[0]), mean_last(p[0])))); }, {x}},
      {"reshape/permute",
       [](Tape<float>&, P p) { return weighted_sum(reshape(permute(p[0], {2, 0, 1}), {4, 6}), 9); },
       {random_tensor<float>({2, 3, 4}, 26)}},
      {"slice/concat",
       [](Tape<float>&, P p) { return weighted_sum(concat(slice(p[0], 1, 4, 1), slice(p[0], 1, 1, 2), 1), 10); },
       {random_tensor<float>({2, 5, 3}, 27)}},
      {"embedding", [&ids](Tape<float>&, P p) { return weighted_sum(embedding(p[0], ids), 11); },
       {random_tensor<float>({3, 5}, 28)}},
      {"softmax_cross_entropy", [&labels](Tape<float>&, P p) { return softmax_cross_entropy(p[0], labels); },
       {random_tensor<float>({3, 3}, 29, -3.0, 3.0)}},
  };
  for (auto [stride, pad] : {std::pair<Index, Index>{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
    // Bilinear in each coordinate, so the wider step adds no truncation error.
    cases.push_back({fmt("conv2d s%lld p%lld", static_cast<long long>(stride), static_cast<long long>(pad)),
                     [stride, pad](Tape<float>&, P p) { return weighted_sum(conv2d(p[0], p[1], stride, pad), 12); },
                     {random_tensor<float>({2, 2, 5, 6}, 5), random_tensor<float>({3, 2, 3, 3}, 6)},
                     1e-2});
  }
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    GradCheckOptions o;
    o.epsilon = c.eps;
    const double e = finite_diff_check<float>(c.fn, c.params, o).max_rel_error;
    if (e > worst) {
      worst = e;
      worst_name = c.name;
    }
  }

  auto net_error = [](const Model& m, std::uint64_t seed) {
    Rng rng(seed);
    Tensorf images({2, 3, 32, 32});
    for (Index i = 0; i < images.size(); ++i) images[i] = static_cast<float>(rng.uniform());
    const std::vector<int> lab{0, 1};
    LossFn<float> fn = [&m, &images, &lab](Tape<float>& tape, P p) {
      return softmax_cross_entropy(forward(m, p, tape.constant(images)).logits, lab);
    };
    std::vector<Tensorf> params;
    for (const auto& p : m.parameters()) params.push_back(p.value);
    GradCheckOptions o;
    o.max_coordinates = 40;
    o.seed = seed;
    return finite_diff_check<float>(fn, params, o).max_rel_error;
  };
  const double cnn = net_error(Model::build(SmallCnnConfig{}, 7), 14);
  const double vit = net_error(Model::build(SmallVitConfig{}, 8), 15);
  return {worst < 1e-3 && cnn < 1e-2 && vit < 1e-2,
          fmt("%zu primitive checks, worst %.2e (%s) < 1e-3; full CNN %.2e, full ViT %.2e < 1e-2 (40 sampled coords each)",
              cases.size(), worst, worst_name.c_str(), cnn, vit)};
}

Verdict sscore_oracle() {
  SpuriousDatasetSpec spec;
  spec.n_per_class = 20;
  spec.rho = 0.5;
  spec.seed = 31;
  const Dataset d = generate_dataset(spec);
  std::vector<std::size_t> patched;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.samples[i].s == 1) patched.push_back(i);
  }
  Rng rng(2024);
  int agree = 0, zero_cases = 0;
  for (int trial = 0; trial < 10; ++trial) {
    Model m = trial % 3 == 2 ? Model::build(SmallVitConfig{}, 100 + trial) : Model::build(SmallCnnConfig{}, 100 + trial);
    if (trial == 0) {
      // Dead final block: every map is zero, so no pixel is active.
      for (Index c = 0; c < 64; ++c) m.parameter("conv2.bias").value[c] = -1e3f;
    }
    const Index neuron = static_cast<Index>(rng.below(64));
    const double alpha = trial == 0 ? 0.5 : rng.uniform(0.1, 0.9);
    std::vector<LabeledSample> chosen;
    const std::size_t n = 1 + rng.below(6);
    for (std::size_t j = 0; j < n; ++j) chosen.push_back(d.samples[patched[rng.below(patched.size())]]);

    const double fast = neuron_sscore(m, chosen, neuron, alpha);
    double total = 0.0;
    bool empty_map = false;
    for (const auto& s : chosen) {
      const Tensorf v = gradcam_neuron(m, s.image, neuron).values;
      long active = 0, hit = 0;
      for (Index r = 0; r < 32; ++r) {
        for (Index c = 0; c < 32; ++c) {
          if (static_cast<double>(v[r * 32 + c]) >= alpha) {
            ++active;
            hit += s.mask[static_cast<std::size_t>(r * 32 + c)];
          }
        }
      }
      empty_map = empty_map || active == 0;
      total += active == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(active);
    }
    const double slow = total / static_cast<double>(chosen.size());
    agree += fast == slow;
    zero_cases += empty_map;
  }
  return {agree == 10 && zero_cases > 0,
          fmt("%d/10 randomized cases bitwise equal (CNN and ViT); %d cases include an empty binary map", agree,
              zero_cases)};
}

Verdict shortcut_emerges(Lab& lab) {
  std::vector<bool> hi_votes, lo_votes;
  std::string d;
  for (auto seed : kSeeds) {
    const Model& hi = lab.cnn(0.95, seed);
    const Model& lo = lab.cnn(0.5, seed);
    const double train_acc = accuracy_on(hi, lab.train_set(0.95, seed));
    const GroupMetrics mh = evaluate_groups(hi, lab.test()), ml = evaluate_groups(lo, lab.test());
    hi_votes.push_back(train_acc >= 0.95 && mh.gap >= 0.15);
    lo_votes.push_back(ml.gap <= 0.05);
    d += fmt(" seed %llu: train %.3f gap %.3f | rho .5 gap %.3f;", static_cast<unsigned long long>(seed), train_acc,
             mh.gap, ml.gap);
  }
  return {majority(hi_votes) && majority(lo_votes),
          "rho .95 train>=.95 & gap>=.15 in " + votes_str(hi_votes) + ", rho .5 gap<=.05 in " + votes_str(lo_votes) +
              ";" + d};
}

Verdict ratio_sweep(Lab& lab) {
  std::vector<double> minority, majority_acc;
  for (double rho : kRhos) {
    double mi = 0.0, ma = 0.0;
    for (auto seed : kSeeds) {
      const GroupMetrics m = evaluate_groups(lab.cnn(rho, seed), lab.test());
      mi += minority_accuracy(m);
      ma += majority_accuracy(m);
    }
    minority.push_back(mi / double(kSeeds.size()));
    majority_acc.push_back(ma / double(kSeeds.size()));
  }
  bool ok = true;
  std::string d = "minority/majority by rho:";
  for (std::size_t k = 0; k < kRhos.size(); ++k) {
    if (k > 0 && minority[k] > minority[k - 1] + 0.05) ok = false;
    if (majority_acc[k] < 0.85) ok = false;
    d += fmt(" %.2f: %.3f/%.3f", kRhos[k], minority[k], majority_acc[k]);
  }
  return {ok, d};
}

Verdict cnn_disentanglement(Lab& lab) {
  std::vector<bool> votes;
  std::string d;
  for (auto seed : kSeeds) {
    const SScoreReport& r = lab.sscores(lab.cnn(0.95, seed), 0.95, seed);
    votes.push_back(!r.high.empty() && !r.low.empty());
    d += fmt(" seed %llu: low %zu high %zu max %.3f;", static_cast<unsigned long long>(seed), r.low.size(),
             r.high.size(), *std::max_element(r.scores.begin(), r.scores.end()));
  }
  return {majority(votes), "N=50 alpha=.5, >=1 high and >=1 low in " + votes_str(votes) + ";" + d};
}

Verdict vit_vs_cnn(Lab& lab) {
  std::vector<bool> votes;
  std::string d;
  for (auto seed : kSeeds) {
    const double v = lab.sscores(lab.vit(0.95, seed), 0.95, seed).mean;
    const double c = lab.sscores(lab.cnn(0.95, seed), 0.95, seed).mean;
    votes.push_back(v <= c);
    d += fmt(" seed %llu: vit %.3f cnn %.3f (vit wga %.2f);", static_cast<unsigned long long>(seed), v, c,
             evaluate_groups(lab.vit(0.95, seed), lab.test()).wga);
  }
  return {majority(votes), "mean s-score vit<=cnn in " + votes_str(votes) + ";" + d};
}

Verdict pruning_safety(Lab& lab) {
  bool ok = true;
  std::string d;
  for (auto seed : kSeeds) {
    const Model& m = lab.cnn(0.95, seed);
    const ClassifierEdit e = prune_classifier_by_sscore(m, lab.sscores(m, 0.95, seed), 0.7);
    const GroupMetrics before = evaluate_groups(m, lab.test());
    const GroupMetrics after = evaluate_groups(apply_edit(m, e), lab.test());
    const bool pass = std::abs(after.avg - before.avg) <= 0.02 && after.wga >= before.wga - 0.02;
    ok = ok && pass;
    d += fmt(" seed %llu: %zu pruned, avg %.3f->%.3f wga %.3f->%.3f %s%s;", static_cast<unsigned long long>(seed),
             e.zeroed.size(), before.avg, after.avg, before.wga, after.wga, groups(after).c_str(),
             e.zeroed.empty() ? " (vacuous)" : "");
  }
  return {ok, "tau=.7, every seed |dAVG|<=.02 and dWGA>=-.02;" + d};
}

Verdict dfr_effect(Lab& lab) {
  std::vector<bool> votes;
  std::string d;
  for (auto seed : kSeeds) {
    const Model& m = lab.cnn(0.95, seed);
    SpuriousDatasetSpec hold = sweep_spec(lab.base(), 0.5, seed);
    hold.n_per_class = 200;
    hold.seed = derive_seed(hold.seed, 0xDF7);
    const SplitResult split = balanced_split(generate_dataset(hold), 50, seed);
    const Dataset train = lab.train_set(0.95, seed);
    DfrOptions o;
    o.evaluation = &lab.test();
    o.attribution = &train;
    const auto lambdas = default_dfr_lambdas();
    const DfrResult r = dfr_retrain(m, split.subset, split.remainder, lambdas, o);
    const double ds = std::abs(*r.sscore_after - *r.sscore_before);
    votes.push_back(r.after.wga - r.before.wga >= 0.10 && r.prune_h >= 0.30 && ds <= 0.05);
    d += fmt(" seed %llu: wga %.3f->%.3f lambda %g prune %.3f s %.3f->%.3f;", static_cast<unsigned long long>(seed),
             r.before.wga, r.after.wga, r.lambda, r.prune_h, *r.sscore_before, *r.sscore_after);
  }
  return {majority(votes), "dWGA>=.10, prune_h>=.30, |ds|<=.05 in " + votes_str(votes) + ";" + d};
}

Verdict group_ablation(Lab& lab) {
  const Model& m = lab.one_sided_cnn(0);
  const Dataset train = generate_dataset(sweep_spec(lab.one_sided(), 0.5, 0));
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < lab.test().size(); ++i) {
    if (lab.test().samples[i].g != 3) keep.push_back(i);
  }
  const Dataset test = lab.test().subset(keep);
  MaskConfig mc;
  const AblationResult a0 = group_ablation_experiment(m, train, 0, mc, test);
  const AblationResult a1 = group_ablation_experiment(m, train, 1, mc, test);
  const double drop = -*a0.delta[0];
  const double other = std::max(std::abs(*a0.delta[1]), std::abs(*a0.delta[2]));
  const double within = std::abs(*a1.after.per_group_acc[0] - *a1.after.per_group_acc[1]);
  return {drop >= 0.30 && other <= 0.10 && within <= 0.05,
          fmt("keep %.2f; base %s; without BwoP %s (drop %.2f >= .30, others %.2f <= .10); without BwP %s "
              "(class-0 groups differ %.2f <= .05)",
              mc.keep, groups(a0.before).c_str(), groups(a0.after).c_str(), drop, other, groups(a1.after).c_str(),
              within)};
}

Verdict latent_clustering(Lab& lab) {
  std::vector<bool> votes;
  std::string d;
  for (auto seed : kSeeds) {
    const EmbeddingSet e = export_embeddings(lab.vit(0.95, seed), lab.test());
    const double by_s = cluster_alignment(e, ClusterBy::Spurious), by_y = cluster_alignment(e, ClusterBy::Label);
    votes.push_back(by_s >= by_y);
    d += fmt(" seed %llu: by s %.3f by y %.3f;", static_cast<unsigned long long>(seed), by_s, by_y);
  }
  return {majority(votes), "rho .95 ViT test embeddings, silhouette by s >= by y in " + votes_str(votes) + ";" + d};
}

Verdict tsne_properties(Lab& lab) {
  EmbeddingSet e = export_embeddings(lab.vit(0.95, 0), lab.test());
  const Index n = e.rows.rows();
  e.rows.conservativeResize(n + 1, Eigen::NoChange);
  e.rows.row(n) = e.rows.row(0);
  for (auto* v : {&e.y, &e.s, &e.g}) v->push_back((*v)[0]);
  e.ids.push_back(e.ids[0]);

  const TsneConfig c;
  const Projection2D p = tsne_project(e, c);
  const Projection2D again = tsne_project(e, c);
  const double dup = (p.coords.row(0) - p.coords.row(n)).norm();
  double nearest = INFINITY;
  for (Index k = 1; k < n; ++k) nearest = std::min(nearest, (p.coords.row(0) - p.coords.row(k)).norm());
  Index violations = 0;
  for (std::size_t t = 1; t < p.kl_trace.size(); ++t) violations += p.kl_trace[t] > p.kl_trace[t - 1] + 1e-6;
  const bool deterministic = again.coords == p.coords && again.kl == p.kl;

  // The duplicate pair attracts only while p_ij exceeds q_ij = 1/(1 + d^2)/Z.
  const Eigen::MatrixXd P = tsne_affinities(e.rows, c.perplexity);
  double Z = 0.0;
  for (Index i = 0; i <= n; ++i) {
    for (Index j = 0; j <= n; ++j) {
      if (i != j) Z += 1.0 / (1.0 + (p.coords.row(i) - p.coords.row(j)).squaredNorm());
    }
  }
  return {dup < 1e-3 && violations == 0 && deterministic,
          fmt("N=%lld perplexity %g: duplicate distance %.4f (< 1e-3; nearest other point %.3f, p_ij*Z = %.3f); "
              "post-exaggeration KL increases: %lld (KL %.4f -> %.4f); deterministic %s",
              static_cast<long long>(n + 1), c.perplexity, dup, nearest, P(0, n) * Z,
              static_cast<long long>(violations), p.kl_trace.front(), p.kl, deterministic ? "yes" : "no")};
}

std::string run_step(const std::vector<std::string>& args) {
  std::vector<std::string> full{"spurlens"};
  full.insert(full.end(), args.begin(), args.end());
  std::ostringstream out, err;
  if (run_cli(full, out, err) != 0) throw std::runtime_error("pipeline step failed: " + args[0] + ": " + err.str());
  const std::string s = out.str();
  return s.substr(0, s.find('\n'));
}

/// gen, train (CNN and ViT), sscore, prune, attn, embed, tsne, report.
void pipeline(const fs::path& root) {
  fs::remove_all(root);
  const std::string out = root.string();
  const std::string g = run_step({"gen", "--n_per_class", "100", "--rho", "0.95", "--seed", "3", "--test_per_group",
                                  "25", "--out", out});
  const std::string train = g + "/train.bin", test = g + "/test.bin";
  const std::string cnn = run_step({"train", "--data", train, "--test", test, "--epochs", "4", "--out", out});
  const std::string vit =
      run_step({"train", "--data", train, "--test", test, "--arch", "vit", "--epochs", "1", "--out", out});
  const std::string s = run_step({"sscore", "--model", cnn + "/model.ckpt", "--data", train, "--n", "20", "--out", out});
  const std::string p = run_step({"prune", "--model", cnn + "/model.ckpt", "--sscore", s + "/sscore.json", "--tau",
                                  "0.3", "--test", test, "--out", out});
  const std::string a1 = run_step({"attn", "--model", cnn + "/model.ckpt", "--data", test, "--sample", "30",
                                   "--neuron", "5", "--out", out});
  const std::string a2 = run_step({"attn", "--model", vit + "/model.ckpt", "--data", test, "--sample", "30",
                                   "--neuron", "5", "--out", out});
  const std::string e = run_step({"embed", "--model", cnn + "/model.ckpt", "--data", test, "--out", out});
  const std::string t = run_step({"tsne", "--embeddings", e + "/embeddings.csv", "--perplexity", "10",
                                  "--iterations", "300", "--out", out});
  run_step({"report", "--inputs", cnn + "," + vit + "," + s + "," + p + "," + a1 + "," + a2 + "," + e + "," + t,
            "--out", out});
}

Verdict end_to_end(const fs::path& scratch) {
  const fs::path a = scratch / "a", b = scratch / "b";
  pipeline(a);
  pipeline(b);
  std::set<fs::path> files_a, files_b;
  for (const auto& [root, files] : {std::pair{a, &files_a}, std::pair{b, &files_b}}) {
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      const auto ext = entry.path().extension();
      if (entry.is_regular_file() && (ext == ".json" || ext == ".pgm")) files->insert(fs::relative(entry.path(), root));
    }
  }
  Index json = 0, pgm = 0, differ = 0;
  for (const auto& rel : files_a) {
    (rel.extension() == ".pgm" ? pgm : json) += 1;
    if (!files_b.contains(rel)) {
      ++differ;
      continue;
    }
    std::string x = read_text_file(a / rel), y = read_text_file(b / rel);
    if (rel.filename() == "manifest.json") {
      // Manifests record input paths, which name the root.
      for (std::size_t at; (at = x.find(a.string())) != std::string::npos;) x.replace(at, a.string().size(), "@");
      for (std::size_t at; (at = y.find(b.string())) != std::string::npos;) y.replace(at, b.string().size(), "@");
    }
    differ += x != y;
  }
  const bool same_sets = files_a == files_b;
  return {same_sets && differ == 0 && pgm > 0,
          fmt("two CLI pipeline runs: %lld JSON and %lld PGM files, %lld differ%s", static_cast<long long>(json),
              static_cast<long long>(pgm), static_cast<long long>(differ), same_sets ? "" : " (file sets differ)")};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path cache = "acceptance_cache";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string item; std::getline(ss, item, ',');) only.insert(std::stoi(item));
    } else {
      cache = arg;
    }
  }

  Lab lab(cache / "models");
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient correctness", [] { return gradient_correctness(); }},
      {"s-score oracle equivalence", [] { return sscore_oracle(); }},
      {"shortcut learning emerges", [&] { return shortcut_emerges(lab); }},
      {"ratio-sweep monotonicity", [&] { return ratio_sweep(lab); }},
      {"CNN neuron disentanglement", [&] { return cnn_disentanglement(lab); }},
      {"ViT vs CNN s-score contrast", [&] { return vit_vs_cnn(lab); }},
      {"pruning safety", [&] { return pruning_safety(lab); }},
      {"DFR effect", [&] { return dfr_effect(lab); }},
      {"group ablation", [&] { return group_ablation(lab); }},
      {"latent-space clustering", [&] { return latent_clustering(lab); }},
      {"t-SNE properties", [&] { return tsne_properties(lab); }},
      {"end-to-end determinism", [&] { return end_to_end(cache / "pipeline"); }},
  };

  int passed = 0, ran = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    passed += v.pass;
    std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << id << " " << criteria[k].first << ": " << v.detail
              << fmt(" [%.1f s]", secs) << std::endl;
  }
  std::cout << passed << "/" << ran << " criteria pass" << std::endl;
  return passed == ran ? 0 : 1;
}
