#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "spurlens/binary_io.hpp"
#include "spurlens/data.hpp"
#include "spurlens/error.hpp"
#include "spurlens/rng.hpp"

using namespace spurlens;

namespace {

SpuriousDatasetSpec patch_spec(double rho, Index n, std::uint64_t seed = 7) {
  SpuriousDatasetSpec s;
  s.rho = rho;
  s.n_per_class = n;
  s.seed = seed;
  return s;
}

using Census = std::array<Index, 4>;

/// Brute-force matcher over every admissible disk and cross placement,
/// scored by squared error on channel-mean luminance.
int match_template(const LabeledSample& smp, float background, float contrast) {
  const Index S = smp.image.dim(1);
  double best = 1e300;
  int best_class = -1;
  for (int cls = 0; cls < 2; ++cls) {
    for (Index cx = S / 2 - 3; cx <= S / 2 + 3; ++cx) {
      for (Index cy = S / 2 - 3; cy <= S / 2 + 3; ++cy) {
        for (Index r = 4; r <= 6; ++r) {
          double err = 0.0;
          for (Index y = 0; y < S; ++y) {
            for (Index x = 0; x < S; ++x) {
              const Index dx = x - cx, dy = y - cy, h = std::max<Index>(1, r / 3);
              const bool on = cls == 0 ? dx * dx + dy * dy <= r * r
                                       : (std::abs(dx) <= h && std::abs(dy) <= r) || (std::abs(dy) <= h && std::abs(dx) <= r);
              double lum = 0.0;
              for (Index c = 0; c < 3; ++c) lum += smp.image[(c * S + y) * S + x];
              const double d = lum / 3.0 - (background + (on ? contrast : 0.0f));
              err += d * d;
            }
          }
          if (err < best) {
            best = err;
            best_class = cls;
          }
        }
      }
    }
  }
  return best_class;
}

}  // namespace

TEST_CASE("generate_dataset census follows the group algebra") {
  CHECK(generate_dataset(patch_spec(0.95, 100)).census() == Census{95, 5, 5, 95});
  CHECK(generate_dataset(patch_spec(0.5, 100)).census() == Census{50, 50, 50, 50});
  CHECK(generate_dataset(patch_spec(1.0, 20)).census() == Census{20, 0, 0, 20});
  auto one_sided = patch_spec(0.5, 100);
  one_sided.one_sided = true;
  CHECK(generate_dataset(one_sided).census() == Census{50, 50, 100, 0});
  CHECK(expected_census(one_sided) == Census{50, 50, 100, 0});
}

TEST_CASE("every sample satisfies g = 2y + s and mask nonzero iff s = 1") {
  for (SpuriousStyle style : {SpuriousStyle::Patch, SpuriousStyle::Background}) {
    auto spec = patch_spec(0.75, 40);
    spec.style = style;
    const Dataset d = generate_dataset(spec);
    Index total = 0;
    for (Index c : d.census()) total += c;
    CHECK(total == static_cast<Index>(d.size()));
    for (const LabeledSample& s : d.samples) {
      CHECK(s.g == 2 * s.y + s.s);
      REQUIRE(s.mask.size() == 32 * 32);
      const bool any = std::any_of(s.mask.begin(), s.mask.end(), [](std::uint8_t v) { return v != 0; });
      CHECK(any == (s.s == 1));
      CHECK(s.image.array().minCoeff() >= 0.0f);
      CHECK(s.image.array().maxCoeff() <= 1.0f);
    }
  }
}

TEST_CASE("realized correlation is within integer rounding of rho") {
  for (double rho : {0.5, 0.75, 0.9, 0.95, 0.99, 1.0}) {
    for (Index n : {37, 100, 150}) {
      const Dataset d = generate_dataset(patch_spec(rho, n));
      Index aligned = 0;
      for (const LabeledSample& s : d.samples) aligned += s.s == s.y;
      const double realized = static_cast<double>(aligned) / static_cast<double>(d.size());
      CHECK(std::abs(realized - rho) < 1.0 / static_cast<double>(n));
    }
  }
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(generate_dataset(patch_spec(0.95, 3)), SpecError);
  CHECK_NOTHROW(generate_dataset(patch_spec(1.0, 3)));
  CHECK_THROWS_AS(generate_dataset(patch_spec(1.5, 10)), SpecError);
  auto bg = patch_spec(0.5, 10);
  bg.style = SpuriousStyle::Background;
  bg.one_sided = true;
  CHECK_THROWS_AS(generate_dataset(bg), SpecError);
}

TEST_CASE("patch masks mark exactly the injected pixels and never touch the core") {
  auto spec = patch_spec(0.5, 60);
  for (std::uint64_t k = 0; k < 60; ++k) {
    const LabeledSample with = render_sample(spec, static_cast<int>(k % 2), 1, k);
    const LabeledSample without = render_sample(spec, static_cast<int>(k % 2), 0, k);
    Index marked = 0;
    for (Index p = 0; p < 32 * 32; ++p) {
      bool differs = false;
      for (Index c = 0; c < 3; ++c) differs = differs || with.image[c * 1024 + p] != without.image[c * 1024 + p];
      CHECK(static_cast<bool>(with.mask[static_cast<std::size_t>(p)]) == differs);
      marked += with.mask[static_cast<std::size_t>(p)];
    }
    CHECK(marked == 36);
  }
}

TEST_CASE("background masks are the complement of the core bounding box") {
  auto spec = patch_spec(0.5, 10);
  spec.style = SpuriousStyle::Background;
  const LabeledSample s = render_sample(spec, 0, 1, 3);
  Index zeros = 0, min_r = 32, max_r = -1, min_c = 32, max_c = -1;
  for (Index r = 0; r < 32; ++r) {
    for (Index c = 0; c < 32; ++c) {
      if (s.mask[static_cast<std::size_t>(r * 32 + c)] == 0) {
        ++zeros;
        min_r = std::min(min_r, r), max_r = std::max(max_r, r);
        min_c = std::min(min_c, c), max_c = std::max(max_c, c);
      }
    }
  }
  // The unmasked region is one solid square.
  CHECK(max_r - min_r == max_c - min_c);
  CHECK(zeros == (max_r - min_r + 1) * (max_c - min_c + 1));
  CHECK(max_r - min_r + 1 >= 9);
}

TEST_CASE("core shape is decidable without the shortcut") {
  auto spec = patch_spec(0.5, 100, 21);
  const Dataset d = generate_dataset(spec);
  Index tested = 0, correct = 0;
  for (const LabeledSample& s : d.samples) {
    if (s.s != 0) continue;
    ++tested;
    correct += match_template(s, 0.3f, spec.core_contrast) == s.y;
  }
  CHECK(tested == 100);
  CHECK(correct == tested);
}

TEST_CASE("generation is deterministic under seed") {
  const Dataset a = generate_dataset(patch_spec(0.9, 30, 5));
  const Dataset b = generate_dataset(patch_spec(0.9, 30, 5));
  const Dataset c = generate_dataset(patch_spec(0.9, 30, 6));
  CHECK(encode_dataset(a) == encode_dataset(b));
  CHECK(encode_dataset(a) != encode_dataset(c));
}

TEST_CASE("build_balanced_testset") {
  const auto spec = patch_spec(0.95, 100, 3);
  const Dataset t = build_balanced_testset(spec, 50);
  CHECK(t.size() == 200);
  CHECK(t.census() == Census{50, 50, 50, 50});
  for (const LabeledSample& s : t.samples) {
    if (s.s == 1) CHECK(std::count(s.mask.begin(), s.mask.end(), 1) > 0);
  }
  CHECK(encode_dataset(t) == encode_dataset(build_balanced_testset(spec, 50)));
  // Test streams are disjoint from the training streams of the same seed.
  const Dataset train = generate_dataset(spec);
  std::set<std::vector<float>> seen;
  for (const auto& s : train.samples) seen.insert(s.image.storage());
  for (const auto& s : t.samples) CHECK(seen.count(s.image.storage()) == 0);
}

TEST_CASE("balanced_split") {
  const Dataset d = generate_dataset(patch_spec(0.95, 100));
  SUBCASE("sizes and partition") {
    const SplitResult r = balanced_split(d, 5, 1);
    CHECK(r.subset.census() == Census{5, 5, 5, 5});
    CHECK(r.subset.size() + r.remainder.size() == d.size());
    std::set<std::uint64_t> ids;
    for (const auto& s : r.subset.samples) ids.insert(s.id);
    for (const auto& s : r.remainder.samples) CHECK(ids.insert(s.id).second);
    CHECK(ids.size() == d.size());
    CHECK(is_group_balanced(r.subset));
    CHECK_FALSE(is_group_balanced(d));
  }
  SUBCASE("insufficient groups are named") {
    CHECK_THROWS_WITH_AS(balanced_split(d, 6, 1), doctest::Contains("1 (has 5), 2 (has 5)"), SplitError);
  }
  SUBCASE("explicitly requesting an empty group") {
    auto spec = patch_spec(0.5, 20);
    spec.one_sided = true;
    const Dataset o = generate_dataset(spec);
    CHECK(balanced_split(o, 5, 1).subset.census() == Census{5, 5, 5, 0});
    CHECK_THROWS_AS(balanced_split(o, 5, 1, std::vector<int>{0, 3}), SplitError);
  }
}

TEST_CASE("mask run-length codec") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    PixelMask m(1024);
    const double density = rng.uniform();
    for (auto& v : m) v = rng.bernoulli(density);
    CHECK(rle_decode(rle_encode(m), m.size()) == m);
  }
  const PixelMask ones(16, 1);
  CHECK(rle_encode(ones) == std::vector<std::uint32_t>{0, 16});
  const std::vector<std::uint32_t> bad{3, 4};
  CHECK_THROWS_AS(rle_decode(bad, 8), FormatError);
}

TEST_CASE("dataset container round trip and version check") {
  auto spec = patch_spec(0.9, 20);
  spec.style = SpuriousStyle::Background;
  const Dataset d = generate_dataset(spec);
  const auto path = std::filesystem::temp_directory_path() / "spurlens_test_ds.bin";
  save_dataset(path, d);
  const Dataset back = load_dataset(path);
  CHECK(encode_dataset(back) == encode_dataset(d));
  REQUIRE(back.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(back.samples[i].image == d.samples[i].image);
    CHECK(back.samples[i].mask == d.samples[i].mask);
  }
  auto bytes = encode_dataset(d);
  bytes[4] = 9;
  CHECK_THROWS_WITH_AS(decode_dataset(bytes), doctest::Contains("version 9 incompatible"), FormatError);
  bytes = encode_dataset(d);
  bytes.resize(bytes.size() / 2);
  CHECK_THROWS_AS(decode_dataset(bytes), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("census csv") {
  CHECK(census_csv({95, 5, 5, 95}) == "group,count\n0,95\n1,5\n2,5\n3,95\n");
}
