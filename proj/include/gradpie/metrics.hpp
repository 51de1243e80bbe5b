#pragma once

// Gradient-quality diagnostics and numerical reference derivatives.

#include "gradpie/blackbox.hpp"

#include <algorithm>
#include <functional>
#include <vector>

namespace gradpie {

/// ||est - exact|| / ||exact||, 2-norm.
inline double relative_error(const Vector& est, const Vector& exact) {
  require_dim(est.size(), exact.size(), "relative_error");
  const double denom = exact.norm();
  if (!(denom > 0.0)) throw std::invalid_argument("relative_error: exact gradient is zero");
  return (est - exact).norm() / denom;
}

inline double cosine_similarity(const Vector& a, const Vector& b) {
  require_dim(a.size(), b.size(), "cosine_similarity");
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw std::invalid_argument("cosine_similarity: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

/// Central differences (f(x + h e_j) - f(x - h e_j)) / 2h.
inline Vector finite_difference_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                                         double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: h must be > 0");
  Vector g(x.size());
  Vector xp = x;
  for (Index j = 0; j < x.size(); ++j) {
    xp[j] = x[j] + h;
    const double fp = f(xp);
    xp[j] = x[j] - h;
    const double fm = f(xp);
    xp[j] = x[j];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NonFiniteError("finite_difference_gradient: non-finite value along dimension " + std::to_string(j));
    }
    g[j] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Sum of the 2-norms of the rows of a.
inline double row_norm(const Matrix& a) { return a.rowwise().norm().sum(); }

/// ||a - b||^row
inline double jacobian_rowdiff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("jacobian_rowdiff: shape mismatch");
  return row_norm(a - b);
}

struct SummaryStats {
  double mean = 0.0;
  double std = 0.0;  // sample (n-1) standard deviation; 0 for a single value
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
};

/// Quantile with linear interpolation between order statistics (position q*(n-1)).
inline double quantile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = q * double(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - double(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline SummaryStats summarize(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("summarize: empty input");
  SummaryStats s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / double(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / double(values.size() - 1));
  }
  s.median = quantile_linear(values, 0.5);
  s.q25 = quantile_linear(values, 0.25);
  s.q75 = quantile_linear(values, 0.75);
  return s;
}

struct GradientReport {
  std::vector<double> relative_errors;
  std::vector<double> cosine_similarities;

  SummaryStats relative_error_summary() const { return summarize(relative_errors); }
  SummaryStats cosine_summary() const { return summarize(cosine_similarities); }
  std::size_t size() const { return relative_errors.size(); }
};

/// Returns J^T u at x for an upstream vector u.
using InputGradientFn = std::function<Vector(const Vector& x, const Vector& upstream)>;

/// Compares estimated against reference gradients of psi(F(x)) at each point.
/// The upstream psi'(y) is taken at the true output, one query per point.
inline GradientReport surrogate_gradient_eval(const InputGradientFn& estimate, BlackBox& box,
                                              const std::function<Vector(const Vector&)>& objective_grad,
                                              const std::vector<Vector>& points) {
  GradientReport report;
  for (const auto& x : points) {
    const auto jac = box.exact_jacobian(x);
    if (!jac) throw std::invalid_argument("surrogate_gradient_eval: black-box has no reference Jacobian");
    const Vector up = objective_grad(box.evaluate(x));
    const Vector exact = jac->transpose() * up;
    const Vector est = estimate(x, up);
    report.relative_errors.push_back(relative_error(est, exact));
    report.cosine_similarities.push_back(cosine_similarity(est, exact));
  }
  return report;
}

}  // namespace gradpie
