#include "spurlens/checkpoint.hpp"

#include "spurlens/binary_io.hpp"

namespace spurlens {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'L', 'N'};

void write_record(ByteWriter& w, const std::string& name, const Tensorf& t) {
  w.string(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
  w.raw(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const nlohmann::json& provenance,
                                            std::span<const Parameter> extras) {
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.string(model.architecture());
  w.string(provenance.dump());
  w.u32(static_cast<std::uint32_t>(model.parameters().size() + extras.size()));
  for (const Parameter& p : model.parameters()) write_record(w, p.name, p.value);
  for (const Parameter& p : extras) write_record(w, p.name, p.value);
  return w.bytes();
}

Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& origin) {
  ByteReader r(std::move(bytes), origin);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(origin + ": not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(origin + ": checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::string arch = r.string();
  const std::string prov = r.string();
  ModelConfig config;
  nlohmann::json provenance;
  try {
    config = config_from_json(nlohmann::json::parse(arch));
    provenance = nlohmann::json::parse(prov);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": malformed header json: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(origin + ": invalid architecture: " + e.what());
  }

  const std::uint32_t count = r.u32();
  std::vector<Parameter> params, extras;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError(origin + ": bad rank " + std::to_string(rank) + " for " + name);
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.u64();
      if (d == 0 || d > (1ULL << 32)) throw FormatError(origin + ": bad dim for " + name);
      n *= d;
      shape.push_back(static_cast<Index>(d));
    }
    if (n * sizeof(float) > r.remaining()) throw FormatError(origin + ": truncated payload for " + name);
    std::vector<float> data(n);
    r.raw(data.data(), n * sizeof(float));
    Parameter p{std::move(name), Tensorf(std::move(shape), std::move(data))};
    (p.name.starts_with("mask/") ? extras : params).push_back(std::move(p));
  }
  if (!r.at_end()) throw FormatError(origin + ": trailing bytes");
  return Checkpoint{Model(std::move(config), std::move(params)), std::move(provenance), std::move(extras)};
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& provenance,
                     std::span<const Parameter> extras) {
  write_file_bytes(path, encode_checkpoint(model, provenance, extras));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), path.string());
}

Model load_model(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  Checkpoint ck = read_checkpoint(path);
  if (expected && architecture_string(*expected) != ck.model.architecture()) {
    throw ArchitectureError(path.string() + ": stored architecture " + ck.model.architecture() +
                            " does not match requested " + architecture_string(*expected));
  }
  return std::move(ck.model);
}

}  // namespace spurlens
