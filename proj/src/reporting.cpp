#include "spurlens/reporting.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include "spurlens/binary_io.hpp"
#include "spurlens/rng.hpp"

namespace spurlens {

namespace {

std::string number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

template <class T>
T parse_number(const std::string& s, const std::string& what) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw FormatError("bad " + what + " '" + s + "'");
  return v;
}

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd d = (-2.0 * x * x.transpose()).colwise() + sq;
  d.rowwise() += sq.transpose();
  d = d.cwiseMax(0.0);
  d.diagonal().setZero();
  return d;
}

Tensorf upsample_nearest(const Tensorf& grid, Index size) {
  const Index h = grid.dim(0), w = grid.dim(1);
  Tensorf out({size, size});
  for (Index r = 0; r < size; ++r) {
    for (Index c = 0; c < size; ++c) out[r * size + c] = grid[(r * h / size) * w + c * w / size];
  }
  return out;
}

void write_panels(const std::filesystem::path& path, const Tensorf& map, const LabeledSample* overlay) {
  if (!overlay) {
    write_file_bytes(path, encode_pgm(map));
    return;
  }
  const Index size = overlay->image.dim(1);
  Tensorf mask = overlay->mask.empty() ? Tensorf({size, size}) : mask_grid(overlay->mask, size);
  const Tensorf panels[3] = {grayscale(overlay->image), std::move(mask), map};
  write_file_bytes(path, encode_pgm(compose_panels(panels)));
}

}  // namespace

EmbeddingSet export_embeddings(const Model& model, const Dataset& dataset, std::string source) {
  if (dataset.empty()) throw ContractError("export_embeddings: dataset is empty");
  EmbeddingSet e;
  e.source = std::move(source);
  e.rows.resize(static_cast<Index>(dataset.size()), model.embed_dim());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const LabeledSample& s = dataset.samples[i];
    const Tensorf z = encode(model, s.image);
    for (Index j = 0; j < z.size(); ++j) e.rows(static_cast<Index>(i), j) = z[j];
    e.y.push_back(s.y);
    e.s.push_back(s.s);
    e.g.push_back(s.g);
    e.ids.push_back(s.id);
  }
  return e;
}

std::string embeddings_csv(const EmbeddingSet& e) {
  std::string out = "id,y,s,g";
  for (Index j = 0; j < e.rows.cols(); ++j) out += ",z" + std::to_string(j);
  out += '\n';
  for (Index i = 0; i < e.rows.rows(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    out += std::to_string(e.ids[k]) + ',' + std::to_string(e.y[k]) + ',' + std::to_string(e.s[k]) + ',' +
           std::to_string(e.g[k]);
    for (Index j = 0; j < e.rows.cols(); ++j) out += ',' + number(e.rows(i, j));
    out += '\n';
  }
  return out;
}

EmbeddingSet parse_embeddings_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("embeddings csv is empty");
  const auto header = split(line, ',');
  if (header.size() < 5 || header[0] != "id" || header[1] != "y" || header[2] != "s" || header[3] != "g") {
    throw FormatError("embeddings csv header must start with id,y,s,g and name at least one column");
  }
  const Index d = static_cast<Index>(header.size()) - 4;
  std::vector<std::vector<double>> rows;
  EmbeddingSet e;
  Index line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (static_cast<Index>(f.size()) != d + 4) {
      throw FormatError("embeddings csv line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                        " fields, expected " + std::to_string(d + 4));
    }
    e.ids.push_back(parse_number<std::uint64_t>(f[0], "id"));
    e.y.push_back(parse_number<int>(f[1], "y"));
    e.s.push_back(parse_number<int>(f[2], "s"));
    e.g.push_back(parse_number<int>(f[3], "g"));
    std::vector<double> r;
    for (Index j = 0; j < d; ++j) r.push_back(parse_number<double>(f[static_cast<std::size_t>(4 + j)], "value"));
    rows.push_back(std::move(r));
  }
  e.rows.resize(static_cast<Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Index j = 0; j < d; ++j) e.rows(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  }
  return e;
}

Eigen::MatrixXd tsne_affinities(const Eigen::MatrixXd& points, double perplexity) {
  const Index n = points.rows();
  if (!(perplexity > 0.0)) throw ContractError("perplexity must be positive");
  if (static_cast<double>(n) < 3.0 * perplexity) {
    throw ContractError("t-SNE needs at least 3·perplexity points: " + std::to_string(n) + " points, perplexity " +
                        number(perplexity));
  }
  const Eigen::MatrixXd d = squared_distances(points);
  const double target = std::log(perplexity);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd row(n);
  for (Index i = 0; i < n; ++i) {
    double lo = 0.0, hi = std::numeric_limits<double>::infinity(), beta = 1.0;
    double dmin = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < n; ++j) {
      if (j != i) dmin = std::min(dmin, d(i, j));
    }
    for (int it = 0; it < 200; ++it) {
      double sum = 0.0, weighted = 0.0;
      for (Index j = 0; j < n; ++j) {
        row(j) = j == i ? 0.0 : std::exp(-(d(i, j) - dmin) * beta);
        sum += row(j);
        weighted += (d(i, j) - dmin) * row(j);
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
    p.row(i) = row / row.sum();
  }
  Eigen::MatrixXd joint = p + p.transpose();
  joint /= joint.sum();
  joint = joint.cwiseMax(1e-12);
  joint.diagonal().setZero();
  return joint;
}

namespace {

/// Student-t kernel (zero diagonal) and its total.
std::pair<Eigen::MatrixXd, double> student_kernel(const Eigen::MatrixXd& y) {
  Eigen::MatrixXd num = (1.0 + squared_distances(y).array()).inverse().matrix();
  num.diagonal().setZero();
  return {num, num.sum()};
}

}  // namespace

double tsne_kl(const Eigen::MatrixXd& p, const Eigen::MatrixXd& coords) {
  const auto [num, total] = student_kernel(coords);
  double kl = 0.0;
  for (Index i = 0; i < p.rows(); ++i) {
    for (Index j = 0; j < p.cols(); ++j) {
      if (i == j) continue;
      const double q = std::max(num(i, j) / total, 1e-300);
      kl += p(i, j) * std::log(p(i, j) / q);
    }
  }
  return kl;
}

Projection2D tsne_project(const Eigen::MatrixXd& points, const TsneConfig& config) {
  const Index n = points.rows();
  if (n > kTsneMaxPoints) {
    throw ContractError("exact t-SNE is limited to " + std::to_string(kTsneMaxPoints) + " points, got " +
                        std::to_string(n));
  }
  if (config.iterations < config.exaggeration_iterations) {
    throw ContractError("t-SNE iterations must cover the exaggeration phase");
  }
  const double eta = config.learning_rate.value_or(
      std::max(static_cast<double>(n) / config.exaggeration / 4.0, 50.0));
  if (!(eta > 0.0)) throw ContractError("t-SNE learning rate must be positive");
  const Eigen::MatrixXd p = tsne_affinities(points, config.perplexity);

  Rng rng(config.seed);
  Eigen::MatrixXd y(n, 2);
  for (Index i = 0; i < n; ++i) {
    y(i, 0) = 1e-4 * rng.normal();
    y(i, 1) = 1e-4 * rng.normal();
  }
  Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(n, 2), gains = Eigen::MatrixXd::Ones(n, 2);

  Projection2D out;
  out.config = config;
  out.learning_rate = eta;
  double kl = 0.0;
  for (Index t = 0; t < config.iterations; ++t) {
    const bool exaggerating = t < config.exaggeration_iterations;
    if (t == config.exaggeration_iterations) {
      kl = tsne_kl(p, y);
      out.kl_trace.push_back(kl);
    }
    const double ex = exaggerating ? config.exaggeration : 1.0;
    const auto [num, total] = student_kernel(y);
    const Eigen::MatrixXd w = ((ex * p).array() - num.array() / total).matrix().cwiseProduct(num);
    const Eigen::MatrixXd grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);

    gains = (grad.array().sign() != velocity.array().sign()).select(gains.array() + 0.2, gains.array() * 0.8);
    gains = gains.cwiseMax(0.01);
    const double momentum = t < config.momentum_switch ? 0.5 : 0.8;
    Eigen::MatrixXd step = momentum * velocity - eta * gains.cwiseProduct(grad);

    if (exaggerating) {
      velocity = step;
      y += step;
      y.rowwise() -= y.colwise().mean();
      continue;
    }
    Eigen::MatrixXd candidate = y + step;
    candidate.rowwise() -= candidate.colwise().mean();
    double next = tsne_kl(p, candidate);
    if (next <= kl) {
      velocity = step;
    } else {
      // Drop momentum and halve the plain gain-scaled step until KL does not rise.
      velocity.setZero();
      bool accepted = false;
      double scale = 0.5;
      for (int k = 0; k < 40 && !accepted; ++k, scale *= 0.5) {
        step = -scale * eta * gains.cwiseProduct(grad);
        candidate = y + step;
        candidate.rowwise() -= candidate.colwise().mean();
        next = tsne_kl(p, candidate);
        accepted = next <= kl;
      }
      if (!accepted) {
        candidate = y;
        next = kl;
      }
    }
    y = std::move(candidate);
    kl = next;
    out.kl_trace.push_back(kl);
  }
  if (config.iterations == config.exaggeration_iterations) {
    kl = tsne_kl(p, y);
    out.kl_trace.push_back(kl);
  }
  out.coords = std::move(y);
  out.kl = kl;
  return out;
}

Projection2D tsne_project(const EmbeddingSet& e, const TsneConfig& config) { return tsne_project(e.rows, config); }

double silhouette(const Eigen::MatrixXd& points, std::span<const int> labels) {
  const Index n = points.rows();
  if (static_cast<Index>(labels.size()) != n) throw DimensionError("silhouette: one label per point required");
  std::map<int, Index> ids;
  for (int l : labels) ids.emplace(l, 0);
  if (ids.size() < 2) throw ContractError("silhouette needs at least two nonempty clusters");
  Index k = 0;
  for (auto& [label, id] : ids) id = k++;
  std::vector<Index> cluster(static_cast<std::size_t>(n)), counts(static_cast<std::size_t>(k), 0);
  for (Index i = 0; i < n; ++i) {
    cluster[static_cast<std::size_t>(i)] = ids[labels[static_cast<std::size_t>(i)]];
    ++counts[static_cast<std::size_t>(cluster[static_cast<std::size_t>(i)])];
  }
  const Eigen::MatrixXd d = squared_distances(points).cwiseSqrt();
  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(k));
  for (Index i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Index j = 0; j < n; ++j) sums[static_cast<std::size_t>(cluster[static_cast<std::size_t>(j)])] += d(i, j);
    const auto own = static_cast<std::size_t>(cluster[static_cast<std::size_t>(i)]);
    if (counts[own] == 1) continue;
    const double a = sums[own] / static_cast<double>(counts[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < sums.size(); ++c) {
      if (c != own) b = std::min(b, sums[c] / static_cast<double>(counts[c]));
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

double cluster_alignment(const EmbeddingSet& e, ClusterBy by) {
  return silhouette(e.rows, by == ClusterBy::Label ? e.y : e.s);
}

double cluster_alignment(const Projection2D& p, const EmbeddingSet& e, ClusterBy by) {
  return silhouette(p.coords, by == ClusterBy::Label ? e.y : e.s);
}

std::vector<std::uint8_t> encode_pgm(const Tensorf& grid) {
  if (grid.rank() != 2) throw DimensionError("PGM needs an [H×W] grid, got " + shape_string(grid.shape()));
  const std::string header = "P5\n" + std::to_string(grid.dim(1)) + " " + std::to_string(grid.dim(0)) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(grid.size()));
  for (Index i = 0; i < grid.size(); ++i) {
    const float v = grid[i];
    if (!std::isfinite(v)) throw ContractError("PGM value is not finite");
    out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(static_cast<double>(v), 0.0, 1.0))));
  }
  return out;
}

Tensorf decode_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    if (t.empty()) throw FormatError("PGM header is truncated");
    return t;
  };
  if (token() != "P5") throw FormatError("not a binary PGM (P5)");
  const auto w = parse_number<Index>(token(), "PGM width");
  const auto h = parse_number<Index>(token(), "PGM height");
  if (token() != "255") throw FormatError("only 8-bit PGM (maxval 255) is supported");
  ++pos;  // single whitespace before the raster
  if (w <= 0 || h <= 0) throw FormatError("PGM dimensions must be positive");
  if (bytes.size() - std::min(pos, bytes.size()) != static_cast<std::size_t>(w * h)) {
    throw FormatError("PGM raster has the wrong length");
  }
  Tensorf out({h, w});
  for (Index i = 0; i < w * h; ++i) out[i] = static_cast<float>(bytes[pos + static_cast<std::size_t>(i)]) / 255.0f;
  return out;
}

Tensorf compose_panels(std::span<const Tensorf> panels) {
  if (panels.empty()) throw ContractError("compose_panels: no panels");
  const Index h = panels.front().dim(0);
  Index w = 0;
  for (const Tensorf& p : panels) {
    if (p.rank() != 2 || p.dim(0) != h) throw DimensionError("compose_panels: panels must share their height");
    w += p.dim(1);
  }
  Tensorf out({h, w});
  Index offset = 0;
  for (const Tensorf& p : panels) {
    for (Index r = 0; r < h; ++r) std::copy_n(p.data() + r * p.dim(1), p.dim(1), out.data() + r * w + offset);
    offset += p.dim(1);
  }
  return out;
}

Tensorf grayscale(const Tensorf& image) {
  if (image.rank() != 3) throw DimensionError("grayscale expects [C×H×W]");
  const Index c = image.dim(0), hw = image.dim(1) * image.dim(2);
  Tensorf out({image.dim(1), image.dim(2)});
  for (Index i = 0; i < hw; ++i) {
    float s = 0.0f;
    for (Index k = 0; k < c; ++k) s += image[k * hw + i];
    out[i] = s / static_cast<float>(c);
  }
  return out;
}

Tensorf mask_grid(const PixelMask& mask, Index size) {
  if (static_cast<Index>(mask.size()) != size * size) throw DimensionError("mask does not match the image size");
  Tensorf out({size, size});
  for (Index i = 0; i < size * size; ++i) out[i] = mask[static_cast<std::size_t>(i)];
  return out;
}

void render_heatmap(const Heatmap& hm, const std::filesystem::path& path, const LabeledSample* overlay) {
  write_panels(path, hm.values, overlay);
}

void render_heatmap(const BinaryMap& map, const std::filesystem::path& path, const LabeledSample* overlay) {
  write_panels(path, mask_grid(map.bits, map.size), overlay);
}

void render_heatmap(const AttentionRow& row, const std::filesystem::path& path, Index image_size,
                    const LabeledSample* overlay) {
  Tensorf grid = row.grid;
  const float peak = grid.array().maxCoeff();
  if (peak > 0.0f) grid.array() /= peak;
  write_panels(path, upsample_nearest(grid, image_size), overlay);
}

nlohmann::json to_json(const Projection2D& p) {
  return {{"schema", 1},
          {"points", p.coords.rows()},
          {"kl", p.kl},
          {"kl_after_exaggeration", p.kl_trace.empty() ? p.kl : p.kl_trace.front()},
          {"perplexity", p.config.perplexity},
          {"iterations", p.config.iterations},
          {"learning_rate", p.learning_rate},
          {"exaggeration", p.config.exaggeration},
          {"exaggeration_iterations", p.config.exaggeration_iterations},
          {"momentum_switch", p.config.momentum_switch},
          {"seed", p.config.seed}};
}

std::string projection_csv(const Projection2D& p, const EmbeddingSet& e) {
  if (p.coords.rows() != e.rows.rows()) throw DimensionError("projection and embeddings differ in row count");
  std::string out = "id,y,s,g,tx,ty\n";
  for (Index i = 0; i < p.coords.rows(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    out += std::to_string(e.ids[k]) + ',' + std::to_string(e.y[k]) + ',' + std::to_string(e.s[k]) + ',' +
           std::to_string(e.g[k]) + ',' + number(p.coords(i, 0)) + ',' + number(p.coords(i, 1)) + '\n';
  }
  return out;
}

}  // namespace spurlens
