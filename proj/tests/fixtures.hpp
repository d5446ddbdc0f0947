#pragma once

#include <doctest.h>

#include "spurlens/data.hpp"
#include "spurlens/models.hpp"
#include "spurlens/rng.hpp"

namespace fixtures {

using namespace spurlens;

inline Tensorf random_image(std::uint64_t seed, Index size = 32) {
  Rng rng(seed);
  Tensorf t({3, size, size});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform());
  return t;
}

inline void set(Model& m, const std::string& name, std::vector<float> values) {
  Tensorf& t = m.parameter(name).value;
  REQUIRE(static_cast<Index>(values.size()) == t.size());
  t = Tensorf(t.shape(), std::move(values));
}

/// 1×1 conv model at full resolution: channel 0 fires on the patch colour
/// (red minus green), channel 1 on the bright core shape.
inline Model patch_cnn() {
  SmallCnnConfig c;
  c.blocks = {{2, 1, 1}};
  Model m = Model::build(c, 0);
  set(m, "conv0.weight", {1.0f, -1.0f, 0.0f, 1.0f / 3, 1.0f / 3, 1.0f / 3});
  set(m, "conv0.bias", {-2.0f, -1.0f});
  set(m, "head.weight", {-1.0f, 1.0f, -1.0f, 1.0f});
  return m;
}

}  // namespace fixtures
