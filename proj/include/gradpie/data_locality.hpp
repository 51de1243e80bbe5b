#pragma once

// Dataset storage, z-score normalization, exact k-nearest-neighbor index,
// Gaussian local sampling and rank selection.

#include "gradpie/common.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace gradpie {

/// Per-dimension mean/std. Zero-variance dimensions store mean = 0, std = 1 so
/// they pass through normalization unchanged.
struct NormStats {
  Vector mean;
  Vector std;

  static NormStats identity(Index dim) { return {Vector::Zero(dim), Vector::Ones(dim)}; }

  static NormStats from_rows(const std::vector<Vector>& rows) {
    if (rows.empty()) throw std::invalid_argument("norm stats: empty data");
    const Index d = rows.front().size();
    Vector mean = Vector::Zero(d);
    for (const auto& r : rows) mean += r;
    mean /= double(rows.size());
    Vector var = Vector::Zero(d);
    for (const auto& r : rows) var += (r - mean).array().square().matrix();
    var /= double(rows.size());
    Vector sd = var.cwiseSqrt();
    for (Index i = 0; i < d; ++i) {
      if (!(sd[i] > 0.0)) {
        sd[i] = 1.0;
        mean[i] = 0.0;
      }
    }
    return {std::move(mean), std::move(sd)};
  }

  Index dim() const { return mean.size(); }
};

inline Vector normalize(const Vector& v, const NormStats& s) {
  require_dim(v.size(), s.dim(), "normalize");
  return ((v - s.mean).array() / s.std.array()).matrix();
}

inline Vector denormalize(const Vector& v, const NormStats& s) {
  require_dim(v.size(), s.dim(), "denormalize");
  return (v.array() * s.std.array()).matrix() + s.mean;
}

struct DatasetStats {
  NormStats input;
  NormStats output;
};

class Dataset {
 public:
  Dataset(Index input_dim, Index output_dim) : input_dim_(input_dim), output_dim_(output_dim) {
    if (input_dim < 1 || output_dim < 1) throw std::invalid_argument("dataset: dims must be positive");
  }

  void append(Vector x, Vector y) {
    require_dim(x.size(), input_dim_, "dataset input");
    require_dim(y.size(), output_dim_, "dataset output");
    inputs_.push_back(std::move(x));
    outputs_.push_back(std::move(y));
  }

  Index size() const { return Index(inputs_.size()); }
  bool empty() const { return inputs_.empty(); }
  Index input_dim() const { return input_dim_; }
  Index output_dim() const { return output_dim_; }
  const Vector& input(Index i) const { return inputs_.at(std::size_t(i)); }
  const Vector& output(Index i) const { return outputs_.at(std::size_t(i)); }
  const std::vector<Vector>& inputs() const { return inputs_; }
  const std::vector<Vector>& outputs() const { return outputs_; }

  const std::optional<DatasetStats>& norm_stats() const { return stats_; }
  void set_norm_stats(DatasetStats s) {
    require_dim(s.input.dim(), input_dim_, "dataset input stats");
    require_dim(s.output.dim(), output_dim_, "dataset output stats");
    stats_ = std::move(s);
  }
  const DatasetStats& compute_norm_stats() {
    stats_ = DatasetStats{NormStats::from_rows(inputs_), NormStats::from_rows(outputs_)};
    return *stats_;
  }

  /// Columns are samples (D x N).
  Matrix input_matrix() const { return stack(inputs_, input_dim_); }
  Matrix output_matrix() const { return stack(outputs_, output_dim_); }

 private:
  static Matrix stack(const std::vector<Vector>& rows, Index d) {
    Matrix m(d, Index(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) m.col(Index(i)) = rows[i];
    return m;
  }

  Index input_dim_;
  Index output_dim_;
  std::vector<Vector> inputs_;
  std::vector<Vector> outputs_;
  std::optional<DatasetStats> stats_;
};

/// Returns a copy with inputs and outputs z-scored; the copy keeps the stats.
inline Dataset normalize(const Dataset& data, const DatasetStats& stats) {
  Dataset out(data.input_dim(), data.output_dim());
  for (Index i = 0; i < data.size(); ++i) {
    out.append(normalize(data.input(i), stats.input), normalize(data.output(i), stats.output));
  }
  out.set_norm_stats(stats);
  return out;
}

inline Dataset normalize(const Dataset& data) {
  if (!data.norm_stats()) throw std::invalid_argument("normalize: dataset has no normalization stats");
  return normalize(data, *data.norm_stats());
}

inline Dataset denormalize(const Dataset& data, const DatasetStats& stats) {
  Dataset out(data.input_dim(), data.output_dim());
  for (Index i = 0; i < data.size(); ++i) {
    out.append(denormalize(data.input(i), stats.input), denormalize(data.output(i), stats.output));
  }
  out.set_norm_stats(stats);
  return out;
}

// ---- k nearest neighbors ----

struct NeighborIndex {
  Index k = 0;  // effective k, min(requested, N-1)
  std::vector<std::vector<Index>> neighbors;

  Index size() const { return Index(neighbors.size()); }
};

/// Exact brute-force Euclidean kNN over the given points. Ties go to the lower index.
inline NeighborIndex build_knn(const std::vector<Vector>& points, Index k) {
  const Index n = Index(points.size());
  if (n < 2) throw std::invalid_argument("build_knn: need at least 2 points");
  if (k < 1) throw std::invalid_argument("build_knn: k must be >= 1");
  NeighborIndex index;
  index.k = std::min(k, n - 1);
  index.neighbors.resize(std::size_t(n));
  const Index d = points.front().size();

  std::vector<std::pair<double, Index>> dist(std::size_t(n - 1));
  for (Index i = 0; i < n; ++i) {
    const Vector& xi = points[std::size_t(i)];
    std::size_t w = 0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const Vector& xj = points[std::size_t(j)];
      double s = 0.0;
      for (Index c = 0; c < d; ++c) {
        const double diff = xi[c] - xj[c];
        s += diff * diff;
      }
      dist[w++] = {s, j};
    }
    const auto mid = dist.begin() + std::ptrdiff_t(index.k);
    std::partial_sort(dist.begin(), mid, dist.end());
    auto& out = index.neighbors[std::size_t(i)];
    out.reserve(std::size_t(index.k));
    for (auto it = dist.begin(); it != mid; ++it) out.push_back(it->second);
  }
  return index;
}

/// kNN on the dataset inputs, in normalized coordinates when the dataset has stats.
inline NeighborIndex build_knn(const Dataset& data, Index k) {
  if (!data.norm_stats()) return build_knn(data.inputs(), k);
  std::vector<Vector> pts;
  pts.reserve(std::size_t(data.size()));
  for (const auto& x : data.inputs()) pts.push_back(normalize(x, data.norm_stats()->input));
  return build_knn(pts, k);
}

// ---- local sampling ----

struct LocalSamplerConfig {
  Index n_samples = 1;
  double sigma = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_samples < 0) throw std::invalid_argument("local sampler: n_samples must be >= 0");
    if (!(sigma >= 0.0)) throw std::invalid_argument("local sampler: sigma must be >= 0");
  }
};

/// Isotropic Gaussian samples N(center, (sigma*scale)^2) per dimension; `scale`
/// defaults to ones and carries per-dimension input std in normalized sampling.
template <typename Rng>
std::vector<Vector> local_sample(const Vector& center, Index n_samples, double sigma, Rng& rng,
                                 const Vector* scale = nullptr) {
  if (!all_finite(center)) throw NonFiniteError("local_sample: non-finite center");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vector> out;
  out.reserve(std::size_t(n_samples));
  for (Index s = 0; s < n_samples; ++s) {
    Vector x = center;
    for (Index d = 0; d < x.size(); ++d) {
      const double z = normal(rng);
      x[d] += sigma * (scale ? (*scale)[d] : 1.0) * z;
    }
    out.push_back(std::move(x));
  }
  return out;
}

inline std::vector<Vector> local_sample(const Vector& center, const LocalSamplerConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  return local_sample(center, cfg.n_samples, cfg.sigma, rng);
}

// ---- rank selection ----

/// Indices of the n_best best values; stable, so ties keep the lower index.
inline std::vector<Index> rank_select(std::span<const double> values, Index n_best, Direction direction) {
  if (values.empty()) throw std::invalid_argument("rank_select: empty values");
  if (n_best < 1) throw std::invalid_argument("rank_select: n_best must be >= 1");
  std::vector<Index> idx(values.size());
  std::iota(idx.begin(), idx.end(), Index(0));
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) {
    const double va = values[std::size_t(a)];
    const double vb = values[std::size_t(b)];
    return direction == Direction::maximize ? va > vb : va < vb;
  });
  idx.resize(std::size_t(std::min<Index>(n_best, Index(values.size()))));
  return idx;
}

// ---- CSV ----

/// Header `x0..x{Di-1},y0..y{Do-1}`.
inline void save_dataset_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write dataset file " + path.string());
  os << std::setprecision(17);
  for (Index i = 0; i < data.input_dim(); ++i) os << (i ? "," : "") << 'x' << i;
  for (Index i = 0; i < data.output_dim(); ++i) os << ",y" << i;
  os << '\n';
  for (Index r = 0; r < data.size(); ++r) {
    for (Index i = 0; i < data.input_dim(); ++i) os << (i ? "," : "") << data.input(r)[i];
    for (Index i = 0; i < data.output_dim(); ++i) os << ',' << data.output(r)[i];
    os << '\n';
  }
}

inline Dataset load_dataset_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read dataset file " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("dataset csv: missing header");
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      cells.push_back(cell);
    }
    return cells;
  };
  const auto header = split(line);
  Index n_in = 0;
  Index n_out = 0;
  for (const auto& h : header) {
    const bool is_x = !h.empty() && h[0] == 'x';
    const bool is_y = !h.empty() && h[0] == 'y';
    const Index expect = is_x ? n_in : n_out;
    if ((!is_x && !is_y) || h.substr(1) != std::to_string(expect) || (is_x && n_out > 0)) {
      throw std::invalid_argument("dataset csv: bad header column '" + h + "'");
    }
    (is_x ? n_in : n_out)++;
  }
  if (n_in == 0 || n_out == 0) throw std::invalid_argument("dataset csv: need x and y columns");
  Dataset data(n_in, n_out);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (Index(cells.size()) != n_in + n_out) {
      throw std::invalid_argument("dataset csv: line " + std::to_string(lineno) + " has " +
                                  std::to_string(cells.size()) + " columns, expected " +
                                  std::to_string(n_in + n_out));
    }
    Vector x(n_in);
    Vector y(n_out);
    for (Index i = 0; i < n_in; ++i) x[i] = std::stod(cells[std::size_t(i)]);
    for (Index i = 0; i < n_out; ++i) y[i] = std::stod(cells[std::size_t(n_in + i)]);
    data.append(std::move(x), std::move(y));
  }
  return data;
}

}  // namespace gradpie
