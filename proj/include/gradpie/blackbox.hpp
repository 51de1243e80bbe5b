#pragma once

#include "gradpie/common.hpp"

#include <atomic>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace gradpie {

/// Counts true black-box evaluations. Surrogate calls never touch it.
class QueryCounter {
 public:
  void add(std::uint64_t n) { count_.fetch_add(n, std::memory_order_relaxed); }
  std::uint64_t value() const { return count_.load(std::memory_order_relaxed); }
  void reset() { count_.store(0, std::memory_order_relaxed); }

 private:
  std::atomic<std::uint64_t> count_{0};
};

/// F: R^{D_i} -> R^{D_o}, evaluated through a query counter.
class BlackBox {
 public:
  virtual ~BlackBox() = default;

  virtual Index input_dim() const = 0;
  virtual Index output_dim() const = 0;
  virtual std::string name() const = 0;

  Vector evaluate(const Vector& x) {
    require_dim(x.size(), input_dim(), name().c_str());
    counter_.add(1);
    return compute(x);
  }

  std::vector<Vector> evaluate_batch(const std::vector<Vector>& xs) {
    for (const auto& x : xs) require_dim(x.size(), input_dim(), name().c_str());
    counter_.add(xs.size());
    std::vector<Vector> ys;
    ys.reserve(xs.size());
    for (const auto& x : xs) ys.push_back(compute(x));
    return ys;
  }

  /// Reference Jacobian (D_o x D_i), not counted as a query. Empty when the
  /// black-box has no reference derivative.
  virtual std::optional<Matrix> exact_jacobian(const Vector& x) const {
    (void)x;
    return std::nullopt;
  }

  QueryCounter& counter() { return counter_; }
  const QueryCounter& counter() const { return counter_; }

 protected:
  virtual Vector compute(const Vector& x) const = 0;

 private:
  QueryCounter counter_;
};

// ---- analytic test functions ----

enum class AnalyticKind { quadratic, rosenbrock, linear };

inline AnalyticKind parse_analytic_kind(const std::string& s) {
  if (s == "quadratic") return AnalyticKind::quadratic;
  if (s == "rosenbrock") return AnalyticKind::rosenbrock;
  if (s == "linear") return AnalyticKind::linear;
  throw std::invalid_argument("unknown analytic black-box kind '" + s + "'");
}

/// ||x||^2
class QuadraticBlackBox final : public BlackBox {
 public:
  explicit QuadraticBlackBox(Index dim) : dim_(dim) {
    if (dim < 1) throw std::invalid_argument("quadratic: dim must be >= 1");
  }
  Index input_dim() const override { return dim_; }
  Index output_dim() const override { return 1; }
  std::string name() const override { return "quadratic"; }
  std::optional<Matrix> exact_jacobian(const Vector& x) const override {
    require_dim(x.size(), dim_, "quadratic jacobian");
    return Matrix(2.0 * x.transpose());
  }

 protected:
  Vector compute(const Vector& x) const override { return Vector::Constant(1, x.squaredNorm()); }

 private:
  Index dim_;
};

/// sum_i 100 (x_{i+1} - x_i^2)^2 + (1 - x_i)^2
class RosenbrockBlackBox final : public BlackBox {
 public:
  explicit RosenbrockBlackBox(Index dim) : dim_(dim) {
    if (dim < 2) throw std::invalid_argument("rosenbrock: dim must be >= 2");
  }
  Index input_dim() const override { return dim_; }
  Index output_dim() const override { return 1; }
  std::string name() const override { return "rosenbrock"; }
  std::optional<Matrix> exact_jacobian(const Vector& x) const override {
    require_dim(x.size(), dim_, "rosenbrock jacobian");
    Matrix g = Matrix::Zero(1, dim_);
    for (Index i = 0; i + 1 < dim_; ++i) {
      const double t = x[i + 1] - x[i] * x[i];
      g(0, i) += -400.0 * x[i] * t - 2.0 * (1.0 - x[i]);
      g(0, i + 1) += 200.0 * t;
    }
    return g;
  }

 protected:
  Vector compute(const Vector& x) const override {
    double f = 0.0;
    for (Index i = 0; i + 1 < dim_; ++i) {
      const double t = x[i + 1] - x[i] * x[i];
      f += 100.0 * t * t + (1.0 - x[i]) * (1.0 - x[i]);
    }
    return Vector::Constant(1, f);
  }

 private:
  Index dim_;
};

/// F(x) = A x
class LinearBlackBox final : public BlackBox {
 public:
  explicit LinearBlackBox(Matrix a) : a_(std::move(a)) {
    if (a_.size() == 0) throw std::invalid_argument("linear: empty matrix");
  }
  Index input_dim() const override { return a_.cols(); }
  Index output_dim() const override { return a_.rows(); }
  std::string name() const override { return "linear"; }
  std::optional<Matrix> exact_jacobian(const Vector& x) const override {
    require_dim(x.size(), a_.cols(), "linear jacobian");
    return a_;
  }
  const Matrix& matrix() const { return a_; }

 protected:
  Vector compute(const Vector& x) const override { return a_ * x; }

 private:
  Matrix a_;
};

/// `matrix` is only read for the linear kind.
inline std::unique_ptr<BlackBox> analytic_blackbox(AnalyticKind kind, Index dim, const Matrix& matrix = {}) {
  switch (kind) {
    case AnalyticKind::quadratic: return std::make_unique<QuadraticBlackBox>(dim);
    case AnalyticKind::rosenbrock: return std::make_unique<RosenbrockBlackBox>(dim);
    case AnalyticKind::linear: {
      if (matrix.cols() != dim) throw DimensionError("linear black-box: matrix must have dim columns");
      return std::make_unique<LinearBlackBox>(matrix);
    }
  }
  throw std::invalid_argument("unknown analytic black-box kind");
}

inline std::unique_ptr<BlackBox> analytic_blackbox(const std::string& kind, Index dim, const Matrix& matrix = {}) {
  return analytic_blackbox(parse_analytic_kind(kind), dim, matrix);
}

}  // namespace gradpie
