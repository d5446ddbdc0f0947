#include "spurlens/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "spurlens/binary_io.hpp"
#include "spurlens/error.hpp"
#include "spurlens/rng.hpp"

namespace spurlens {

namespace {

constexpr std::uint64_t kTestStreams = 1ULL << 40;

Index majority_count(const SpuriousDatasetSpec& spec) {
  return static_cast<Index>(std::floor(spec.rho * static_cast<double>(spec.n_per_class) + 1e-9));
}

struct Rgb {
  float r, g, b;
};

Rgb background_color(const SpuriousDatasetSpec& spec, int s) {
  if (spec.style == SpuriousStyle::Patch) return {0.3f, 0.3f, 0.3f};
  return s == 1 ? Rgb{0.20f, 0.35f, 0.60f} : Rgb{0.50f, 0.40f, 0.20f};
}

}  // namespace

std::string to_string(SpuriousStyle style) { return style == SpuriousStyle::Patch ? "patch" : "background"; }

SpuriousStyle style_from_string(const std::string& name) {
  if (name == "patch") return SpuriousStyle::Patch;
  if (name == "background") return SpuriousStyle::Background;
  throw SpecError("unknown style '" + name + "' (expected patch or background)");
}

void SpuriousDatasetSpec::validate() const {
  if (!(rho >= 0.0 && rho <= 1.0)) throw SpecError("rho must lie in [0, 1], got " + std::to_string(rho));
  if (n_per_class < 1) throw SpecError("n_per_class must be positive");
  if (rho != 0.0 && rho != 1.0 && n_per_class < 4) {
    throw SpecError("n_per_class=" + std::to_string(n_per_class) + " too small to realize rho=" + std::to_string(rho));
  }
  if (one_sided && style != SpuriousStyle::Patch) throw SpecError("one-sided injection requires the patch style");
  if (image_size < 32) throw SpecError("image_size must be at least 32");
  if (patch_size < 1 || patch_jitter < 0) throw SpecError("patch size must be positive and jitter non-negative");
  // Core bounding boxes start at image_size/2 - 9; corner patches must end before that.
  if (patch_size + patch_jitter > image_size / 2 - 9 + 1) throw SpecError("patch too large for the corner region");
  if (noise < 0.0f) throw SpecError("noise must be non-negative");
}

std::array<Index, 4> Dataset::census() const {
  std::array<Index, 4> out{};
  for (const LabeledSample& s : samples) ++out[static_cast<std::size_t>(s.g)];
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out{channels, image_size, {}};
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(samples.at(i));
  return out;
}

Tensorf Dataset::images(std::span<const std::size_t> indices) const {
  const Index n = indices.empty() ? static_cast<Index>(samples.size()) : static_cast<Index>(indices.size());
  if (n == 0) throw DimensionError("images() of an empty selection");
  const Index per = channels * image_size * image_size;
  Tensorf out({n, channels, image_size, image_size});
  for (Index k = 0; k < n; ++k) {
    const LabeledSample& s = samples.at(indices.empty() ? static_cast<std::size_t>(k) : indices[k]);
    std::copy_n(s.image.data(), per, out.data() + k * per);
  }
  return out;
}

std::vector<int> Dataset::labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  if (indices.empty()) {
    for (const LabeledSample& s : samples) out.push_back(s.y);
  } else {
    for (std::size_t i : indices) out.push_back(samples.at(i).y);
  }
  return out;
}

std::array<Index, 4> expected_census(const SpuriousDatasetSpec& spec) {
  spec.validate();
  const Index n = spec.n_per_class;
  if (spec.test_balanced) return {n / 2, n / 2, n / 2, n / 2};
  const Index a = majority_count(spec);
  if (spec.one_sided) return {n - a, a, n, 0};
  return {a, n - a, n - a, a};
}

LabeledSample render_sample(const SpuriousDatasetSpec& spec, int y, int s, std::uint64_t stream) {
  if ((y != 0 && y != 1) || (s != 0 && s != 1)) throw ContractError("y and s must be 0 or 1");
  Rng rng(derive_seed(spec.seed, stream));
  const Index S = spec.image_size, P = spec.patch_size;
  const Index cx = rng.between(S / 2 - 3, S / 2 + 3);
  const Index cy = rng.between(S / 2 - 3, S / 2 + 3);
  const Index radius = rng.between(4, 6);
  const Index corner = static_cast<Index>(rng.below(4));
  const Index jx = rng.between(0, spec.patch_jitter), jy = rng.between(0, spec.patch_jitter);
  const Index px = (corner & 1) ? S - P - jx : jx;
  const Index py = (corner & 2) ? S - P - jy : jy;

  auto in_core = [&](Index r, Index c) {
    const Index dx = c - cx, dy = r - cy;
    if (y == 0) return dx * dx + dy * dy <= radius * radius;
    const Index half = std::max<Index>(1, radius / 3);
    return (std::abs(dx) <= half && std::abs(dy) <= radius) || (std::abs(dy) <= half && std::abs(dx) <= radius);
  };
  auto in_patch = [&](Index r, Index c) { return r >= py && r < py + P && c >= px && c < px + P; };

  LabeledSample out;
  out.y = y;
  out.s = s;
  out.g = group_of(y, s);
  out.image = Tensorf({3, S, S});
  out.mask.assign(static_cast<std::size_t>(S * S), 0);
  const Rgb bg = background_color(spec, s);
  const float base[3] = {bg.r, bg.g, bg.b};
  const bool patched = s == 1 && spec.style == SpuriousStyle::Patch;

  for (Index r = 0; r < S; ++r) {
    for (Index c = 0; c < S; ++c) {
      const bool core = in_core(r, c);
      const bool patch = patched && in_patch(r, c);
      if (core && patch) throw ContractError("spurious patch overlaps the core shape");
      for (Index ch = 0; ch < 3; ++ch) {
        float v = base[ch] + (core ? spec.core_contrast : 0.0f);
        if (patch) v = spec.patch_color[static_cast<std::size_t>(ch)];
        out.image[(ch * S + r) * S + c] = v;
      }
      if (s == 1) {
        const bool outside_box = std::abs(c - cx) > radius || std::abs(r - cy) > radius;
        out.mask[static_cast<std::size_t>(r * S + c)] =
            spec.style == SpuriousStyle::Patch ? static_cast<std::uint8_t>(patch) : static_cast<std::uint8_t>(outside_box);
      }
    }
  }
  // Noise is drawn for every pixel whatever the flags, keeping streams aligned.
  for (Index i = 0; i < out.image.size(); ++i) {
    const float v = out.image[i] + static_cast<float>(rng.uniform(-spec.noise, spec.noise));
    out.image[i] = std::clamp(v, 0.0f, 1.0f);
  }
  return out;
}

Dataset generate_dataset(const SpuriousDatasetSpec& spec) {
  spec.validate();
  if (spec.test_balanced) return build_balanced_testset(spec, spec.n_per_class / 2);
  const Index n = spec.n_per_class;
  const Index a = majority_count(spec);
  Dataset out{3, spec.image_size, {}};
  out.samples.reserve(static_cast<std::size_t>(2 * n));
  for (int y = 0; y < 2; ++y) {
    for (Index k = 0; k < n; ++k) {
      int s;
      if (spec.one_sided) {
        s = (y == 0 && k < a) ? 1 : 0;
      } else {
        s = k < a ? y : 1 - y;
      }
      const std::uint64_t stream = (static_cast<std::uint64_t>(y) << 32) | static_cast<std::uint64_t>(k);
      LabeledSample smp = render_sample(spec, y, s, stream);
      smp.id = out.samples.size();
      out.samples.push_back(std::move(smp));
    }
  }
  return out;
}

Dataset build_balanced_testset(const SpuriousDatasetSpec& spec, Index n_per_group) {
  SpuriousDatasetSpec base = spec;
  base.test_balanced = false;
  base.validate();
  if (n_per_group < 1) throw SpecError("n_per_group must be positive");
  Dataset out{3, spec.image_size, {}};
  for (int g = 0; g < 4; ++g) {
    for (Index k = 0; k < n_per_group; ++k) {
      const std::uint64_t stream = kTestStreams | (static_cast<std::uint64_t>(g) << 32) | static_cast<std::uint64_t>(k);
      LabeledSample smp = render_sample(base, g / 2, g % 2, stream);
      smp.id = out.samples.size();
      out.samples.push_back(std::move(smp));
    }
  }
  return out;
}

SplitResult balanced_split(const Dataset& dataset, Index per_group, std::uint64_t seed,
                           std::optional<std::vector<int>> groups) {
  if (per_group < 1) throw SplitError("per_group must be positive");
  std::array<std::vector<std::size_t>, 4> members;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    members[static_cast<std::size_t>(dataset.samples[i].g)].push_back(i);
  }
  std::vector<int> wanted;
  if (groups) {
    wanted = *groups;
  } else {
    for (int g = 0; g < 4; ++g) {
      if (!members[static_cast<std::size_t>(g)].empty()) wanted.push_back(g);
    }
  }
  std::string short_groups;
  for (int g : wanted) {
    if (g < 0 || g > 3) throw SplitError("group " + std::to_string(g) + " does not exist");
    const Index have = static_cast<Index>(members[static_cast<std::size_t>(g)].size());
    if (have < per_group) {
      short_groups += (short_groups.empty() ? "" : ", ") + std::to_string(g) + " (has " + std::to_string(have) + ")";
    }
  }
  if (!short_groups.empty()) {
    throw SplitError("cannot draw " + std::to_string(per_group) + " per group from groups " + short_groups);
  }

  std::vector<char> chosen(dataset.samples.size(), 0);
  for (int g : wanted) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(g)));
    std::vector<std::size_t> m = members[static_cast<std::size_t>(g)];
    rng.shuffle(m);
    for (Index k = 0; k < per_group; ++k) chosen[m[static_cast<std::size_t>(k)]] = 1;
  }
  SplitResult out;
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < chosen.size(); ++i) (chosen[i] ? out.subset_indices : rest).push_back(i);
  out.subset = dataset.subset(out.subset_indices);
  out.remainder = dataset.subset(rest);
  return out;
}

bool is_group_balanced(const Dataset& dataset) {
  Index common = 0;
  for (Index c : dataset.census()) {
    if (c == 0) continue;
    if (common == 0) common = c;
    if (c != common) return false;
  }
  return common > 0;
}

std::vector<std::uint32_t> rle_encode(const PixelMask& mask) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t length = 0;
  for (std::uint8_t v : mask) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      runs.push_back(length);
      current = bit;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

PixelMask rle_decode(std::span<const std::uint32_t> runs, std::size_t pixels) {
  PixelMask out;
  out.reserve(pixels);
  std::uint8_t value = 0;
  for (std::uint32_t len : runs) {
    if (out.size() + len > pixels) throw FormatError("mask runs exceed " + std::to_string(pixels) + " pixels");
    out.insert(out.end(), len, value);
    value ^= 1;
  }
  if (out.size() != pixels) throw FormatError("mask runs cover " + std::to_string(out.size()) + " of " +
                                              std::to_string(pixels) + " pixels");
  return out;
}

namespace {
constexpr char kDatasetMagic[4] = {'S', 'P', 'D', 'S'};
}

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset) {
  ByteWriter w;
  w.raw(kDatasetMagic, 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(dataset.channels));
  w.u32(static_cast<std::uint32_t>(dataset.image_size));
  w.u64(dataset.samples.size());
  const std::size_t per = static_cast<std::size_t>(dataset.channels * dataset.image_size * dataset.image_size);
  for (const LabeledSample& s : dataset.samples) {
    if (static_cast<std::size_t>(s.image.size()) != per) throw DimensionError("sample image does not match dataset shape");
    w.u64(s.id);
    w.raw(s.image.data(), per * sizeof(float));
    w.u8(static_cast<std::uint8_t>(s.y));
    w.u8(static_cast<std::uint8_t>(s.s));
    w.u8(static_cast<std::uint8_t>(s.g));
    const auto runs = rle_encode(s.mask);
    w.u32(static_cast<std::uint32_t>(runs.size()));
    for (std::uint32_t r : runs) w.u32(r);
  }
  return w.bytes();
}

Dataset decode_dataset(std::vector<std::uint8_t> bytes, const std::string& origin) {
  ByteReader r(std::move(bytes), origin);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw FormatError(origin + ": not a dataset container (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError(origin + ": dataset version " + std::to_string(version) + " incompatible (expected " +
                      std::to_string(kDatasetVersion) + ")");
  }
  Dataset out;
  out.channels = r.u32();
  out.image_size = r.u32();
  if (out.channels < 1 || out.channels > 16 || out.image_size < 1 || out.image_size > 4096) {
    throw FormatError(origin + ": implausible image shape");
  }
  const std::uint64_t count = r.u64();
  const std::size_t per = static_cast<std::size_t>(out.channels * out.image_size * out.image_size);
  const std::size_t pixels = static_cast<std::size_t>(out.image_size * out.image_size);
  if (count > r.remaining() / (per * sizeof(float))) throw FormatError(origin + ": truncated (sample count)");
  out.samples.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    LabeledSample s;
    s.id = r.u64();
    std::vector<float> data(per);
    r.raw(data.data(), per * sizeof(float));
    s.image = Tensorf({out.channels, out.image_size, out.image_size}, std::move(data));
    s.y = r.u8();
    s.s = r.u8();
    s.g = r.u8();
    if (s.y > 1 || s.s > 1 || s.g != group_of(s.y, s.s)) throw FormatError(origin + ": inconsistent labels");
    const std::uint32_t n_runs = r.u32();
    if (n_runs > pixels + 1) throw FormatError(origin + ": too many mask runs");
    std::vector<std::uint32_t> runs(n_runs);
    for (auto& run : runs) run = r.u32();
    s.mask = rle_decode(runs, pixels);
    out.samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw FormatError(origin + ": trailing bytes");
  return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  write_file_bytes(path, encode_dataset(dataset));
}

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file_bytes(path), path.string()); }

std::string census_csv(const std::array<Index, 4>& census) {
  std::ostringstream out;
  out << "group,count\n";
  for (std::size_t g = 0; g < 4; ++g) out << g << ',' << census[g] << '\n';
  return out.str();
}

}  // namespace spurlens
