#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "spurlens/binary_io.hpp"
#include "spurlens/checkpoint.hpp"
#include "spurlens/models.hpp"
#include "spurlens/optim.hpp"
#include "spurlens/rng.hpp"

using namespace spurlens;

namespace {

Tensorf random_images(Index n, Index channels, Index size, std::uint64_t seed) {
  Rng rng(seed);
  Tensorf t({n, channels, size, size});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform());
  return t;
}

Tensorf image_at(const Tensorf& batch, Index i) {
  const Index per = batch.size() / batch.dim(0);
  std::vector<float> v(batch.data() + i * per, batch.data() + (i + 1) * per);
  return Tensorf({batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(v));
}

SmallVitConfig tiny_vit() {
  SmallVitConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.layers = 1;
  c.mlp_dim = 16;
  return c;
}

template <class Scalar>
LossFn<Scalar> model_loss(const Model& model, const Tensorf& images, std::vector<int> labels) {
  return [&model, images, labels](Tape<Scalar>& tape, const std::vector<Var<Scalar>>& params) {
    auto x = tape.constant(images.template cast<Scalar>());
    return softmax_cross_entropy(forward(model, params, x).logits, labels);
  };
}

template <class Scalar>
std::vector<Tensor<Scalar>> parameter_values(const Model& model) {
  std::vector<Tensor<Scalar>> out;
  for (const Parameter& p : model.parameters()) out.push_back(p.value.template cast<Scalar>());
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("spurlens_test_" + name);
}

}  // namespace

TEST_CASE("default CNN parameter count matches a hand count") {
  const Model m = Model::build(SmallCnnConfig{}, 1);
  // conv 3→16: 16·3·9 + 16; conv 16→32: 32·16·9 + 32; conv 32→64: 64·32·9 + 64; head 64·2 + 2.
  const std::size_t hand = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + (64 * 2 + 2);
  CHECK(m.parameter_count() == hand);
  CHECK(hand == 23714);
  CHECK(m.embed_dim() == 64);
  CHECK(SmallCnnConfig{}.feature_size() == 8);
}

TEST_CASE("default ViT parameter count matches a hand count") {
  const Model m = Model::build(SmallVitConfig{}, 1);
  const std::size_t d = 64, mlp = 128, t = 65;
  const std::size_t block = 4 * d + 4 * (d * d + d) + (d * mlp + mlp) + (mlp * d + d);
  const std::size_t hand = (48 * d + d) + d + t * d + 4 * block + 2 * d + (d * 2 + 2);
  CHECK(m.parameter_count() == hand);
}

TEST_CASE("build is deterministic under a seed") {
  for (const ModelConfig& c : {ModelConfig{SmallCnnConfig{}}, ModelConfig{SmallVitConfig{}}}) {
    const Model a = Model::build(c, 42), b = Model::build(c, 42), other = Model::build(c, 43);
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      same = same && a.parameters()[i].value == b.parameters()[i].value;
      differs = differs || !(a.parameters()[i].value == other.parameters()[i].value);
    }
    CHECK(same);
    CHECK(differs);
  }
}

TEST_CASE("initialization follows the declared scheme") {
  const Model m = Model::build(SmallVitConfig{}, 3);
  for (const Parameter& p : m.parameters()) {
    if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
      CHECK(p.value.array().abs().maxCoeff() == 0.0f);
    } else if (p.name.ends_with(".gamma")) {
      CHECK(p.value.array().minCoeff() == 1.0f);
    } else if (p.name.ends_with(".weight")) {
      const float bound = std::sqrt(6.0f / static_cast<float>(p.value.dim(0)));
      CHECK(p.value.array().abs().maxCoeff() <= bound);
    }
  }
  const auto& pos = m.parameter("pos_embed").value;
  const double sd = std::sqrt(pos.array().template cast<double>().square().mean());
  CHECK(sd == doctest::Approx(0.02).epsilon(0.1));
}

TEST_CASE("inconsistent configs are rejected") {
  SmallVitConfig v;
  v.heads = 3;
  CHECK_THROWS_AS(Model::build(v, 0), ConfigError);
  SmallVitConfig p;
  p.patch_size = 5;
  CHECK_THROWS_AS(Model::build(p, 0), ConfigError);
  SmallCnnConfig c;
  c.blocks.clear();
  CHECK_THROWS_AS(Model::build(c, 0), ConfigError);
}

TEST_CASE("forward_with_trace: attention rows sum to one") {
  const Model m = Model::build(SmallVitConfig{}, 5);
  const Tensorf img = image_at(random_images(1, 3, 32, 9), 0);
  const auto [logits, trace] = forward_with_trace(m, img);
  CHECK(logits.size() == 2);
  REQUIRE(trace.attention.size() == 4);
  for (const Tensorf& a : trace.attention) {
    REQUIRE(a.shape() == Shape{4, 65, 65});
    const auto rows = a.matrix(4 * 65, 65).rowwise().sum();
    CHECK((rows.array() - 1.0f).abs().maxCoeff() < 1e-5f);
  }
  CHECK(trace.embedding.size() == 64);
  CHECK(trace.tokens.shape() == Shape{65, 64});
  CHECK(trace.token_layer == 3);
}

TEST_CASE("forward_with_trace: CNN embedding is the spatial mean of the final maps") {
  const Model m = Model::build(SmallCnnConfig{}, 5);
  const Tensorf img = image_at(random_images(1, 3, 32, 10), 0);
  const auto [logits, trace] = forward_with_trace(m, img);
  REQUIRE(trace.feature_maps.shape() == Shape{64, 8, 8});
  const auto maps = trace.feature_maps.matrix(64, 64);
  for (Index c = 0; c < 64; ++c) {
    double s = 0.0;
    for (Index k = 0; k < 64; ++k) s += maps(c, k);
    CHECK(trace.embedding[c] == doctest::Approx(s / 64.0).epsilon(1e-5));
  }
}

TEST_CASE("zero head gives uniform logits") {
  for (const ModelConfig& c : {ModelConfig{SmallCnnConfig{}}, ModelConfig{SmallVitConfig{}}}) {
    Model m = Model::build(c, 2);
    m.head_weight().fill(0.0f);
    const auto [logits, trace] = forward_with_trace(m, image_at(random_images(1, 3, 32, 11), 0));
    CHECK(logits[0] == logits[1]);
  }
}

TEST_CASE("input shape mismatch is a dimension error") {
  const Model m = Model::build(SmallCnnConfig{}, 2);
  CHECK_THROWS_AS(forward_with_trace(m, Tensorf({3, 16, 16})), DimensionError);
  CHECK_THROWS_AS(predict_logits(m, Tensorf({2, 1, 32, 32})), DimensionError);
}

TEST_CASE("encode agrees with the trace and batches are permutation equivariant") {
  for (const ModelConfig& c : {ModelConfig{SmallCnnConfig{}}, ModelConfig{SmallVitConfig{}}}) {
    const Model m = Model::build(c, 4);
    const Tensorf batch = random_images(5, 3, 32, 12);
    const Tensorf z = encode_batch(m, batch, 2);
    REQUIRE(z.shape() == Shape{5, m.embed_dim()});
    for (Index i = 0; i < 5; ++i) {
      const Tensorf img = image_at(batch, i);
      const Tensorf single = encode(m, img);
      CHECK(single == forward_with_trace(m, img).second.embedding);
      CHECK(single.size() == m.embed_dim());
    }
    const std::vector<Index> perm{3, 0, 4, 1, 2};
    std::vector<Tensorf> shuffled;
    for (Index p : perm) shuffled.push_back(image_at(batch, p));
    const Tensorf zp = encode_batch(m, stack(shuffled));
    for (Index i = 0; i < 5; ++i) {
      for (Index k = 0; k < m.embed_dim(); ++k) {
        CHECK(zp[i * m.embed_dim() + k] == doctest::Approx(z[perm[i] * m.embed_dim() + k]).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("gradients reach the input for both families") {
  for (const ModelConfig& c : {ModelConfig{SmallCnnConfig{}}, ModelConfig{SmallVitConfig{}}}) {
    const Model m = Model::build(c, 6);
    Tape<float> tape;
    const auto params = bind_parameters(tape, m, false);
    auto x = tape.leaf(random_images(2, 3, 32, 13));
    const auto act = forward(m, params, x);
    tape.backward(sum(act.logits));
    CHECK(x.grad().array().isFinite().all());
    CHECK(x.grad().array().abs().maxCoeff() > 0.0f);
  }
}

TEST_CASE("full CNN loss gradient against finite differences") {
  const Model m = Model::build(SmallCnnConfig{}, 7);
  GradCheckOptions opts;
  opts.max_coordinates = 20;
  opts.seed = 1;
  const auto report = finite_diff_check<float>(model_loss<float>(m, random_images(2, 3, 32, 14), {0, 1}),
                                               parameter_values<float>(m), opts);
  CHECK(report.checked == 20);
  CHECK(report.max_rel_error < 1e-2);
}

TEST_CASE("tiny ViT loss gradient against finite differences") {
  const Model m = Model::build(tiny_vit(), 8);
  GradCheckOptions opts;
  opts.seed = 2;
  const auto report = finite_diff_check<float>(model_loss<float>(m, random_images(2, 3, 8, 15), {1, 0}),
                                               parameter_values<float>(m), opts);
  CHECK(report.checked == m.parameter_count());
  CHECK(report.max_rel_error < 1e-2);
}

TEST_CASE("double shadow path: ViT gradients are tight") {
  const Model m = Model::build(tiny_vit(), 9);
  GradCheckOptions opts;
  opts.epsilon = 1e-6;
  opts.max_coordinates = 60;
  const auto report = finite_diff_check<double>(model_loss<double>(m, random_images(2, 3, 8, 16), {0, 1}),
                                                parameter_values<double>(m), opts);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("cut_at re-roots a gradient leaf") {
  SUBCASE("cnn") {
    const Model m = Model::build(SmallCnnConfig{}, 10);
    Tape<float> tape;
    const auto params = bind_parameters(tape, m, false);
    ForwardOptions opts;
    opts.cut_at = 0;
    const auto act = forward(m, params, tape.constant(random_images(1, 3, 32, 17)), opts);
    REQUIRE(act.cut.valid());
    tape.backward(slice(act.embedding, 1, 5, 1));
    // ∂z[5]/∂maps is 1/64 on channel 5 and zero elsewhere.
    const Tensorf& g = act.cut.grad();
    for (Index c = 0; c < 64; ++c) {
      for (Index k = 0; k < 64; ++k) CHECK(g[c * 64 + k] == (c == 5 ? 1.0f / 64.0f : 0.0f));
    }
  }
  SUBCASE("vit layer out of range") {
    const Model m = Model::build(tiny_vit(), 10);
    Tape<float> tape;
    const auto params = bind_parameters(tape, m, false);
    ForwardOptions opts;
    opts.cut_at = 1;
    CHECK_THROWS_AS(forward(m, params, tape.constant(random_images(1, 3, 8, 18)), opts), IndexError);
  }
}

TEST_CASE("checkpoint round trip reproduces logits bitwise") {
  for (const ModelConfig& c : {ModelConfig{SmallCnnConfig{}}, ModelConfig{SmallVitConfig{}}}) {
    const Model m = Model::build(c, 11);
    const auto path = temp_path("roundtrip.ckpt");
    const std::vector<Parameter> extras{{"mask/head.weight", Tensorf({m.embed_dim(), 2}, 1.0f)}};
    save_checkpoint(path, m, {{"method", "test"}}, extras);
    const Checkpoint ck = read_checkpoint(path);
    CHECK(ck.provenance.at("method") == "test");
    REQUIRE(ck.extras.size() == 1);
    CHECK(ck.extras[0].value == extras[0].value);
    const Model back = load_model(path, c);
    const Tensorf x = random_images(3, 3, 32, 19);
    CHECK(predict_logits(back, x) == predict_logits(m, x));
    std::filesystem::remove(path);
  }
}

TEST_CASE("checkpoint header embeds canonical sorted-key json") {
  const Model m = Model::build(SmallCnnConfig{}, 1);
  const std::string arch = m.architecture();
  CHECK(arch.find("\"blocks\"") < arch.find("\"family\""));
  CHECK(arch.find("\"family\"") < arch.find("\"image_size\""));
}

TEST_CASE("checkpoint format errors") {
  const Model m = Model::build(SmallCnnConfig{}, 12);
  auto bytes = encode_checkpoint(m);
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 7);
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
    bytes.resize(10);
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  }
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  }
  SUBCASE("version bump") {
    bytes[4] = 2;
    CHECK_THROWS_WITH_AS(decode_checkpoint(bytes), doctest::Contains("version 2"), FormatError);
  }
  SUBCASE("cnn checkpoint into a vit config") {
    const auto path = temp_path("arch.ckpt");
    write_file_bytes(path, bytes);
    CHECK_THROWS_AS(load_model(path, SmallVitConfig{}), ArchitectureError);
    std::filesystem::remove(path);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(read_checkpoint(temp_path("does_not_exist.ckpt")), IoError);
  }
}
