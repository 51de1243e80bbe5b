#pragma once

// Coupled nonlinear oscillator network:
//   q'' = -sin(pi q) + Q sin(pi q) + e,   q(0) = q0, q'(0) = 0,
// integrated with classic RK4. The black-box maps q0 to q(t_end).

#include "gradpie/blackbox.hpp"

#include <nlohmann/json.hpp>

#include <numbers>
#include <random>
#include <string>

namespace gradpie {

struct CnonSystem {
  Matrix coupling;  // Q
  Vector drive;     // e
  double t_end = 0.5;
  double dt = 0.05;

  Index size() const { return drive.size(); }

  void validate() const {
    if (coupling.rows() != coupling.cols() || coupling.rows() != drive.size()) {
      throw DimensionError("cnon: coupling must be n x n with n = len(drive)");
    }
    if (drive.size() < 1) throw std::invalid_argument("cnon: need at least one oscillator");
    if (!(dt > 0.0)) throw std::invalid_argument("cnon: dt must be > 0");
    if (!(t_end >= 0.0)) throw std::invalid_argument("cnon: t_end must be >= 0");
    if (!all_finite(coupling) || !all_finite(drive)) throw NonFiniteError("cnon: non-finite system");
  }

  /// Q = ones + uniform[-1,1] noise, e uniform[-1,1].
  static CnonSystem random(Index n, std::uint64_t seed, double t_end = 0.5, double dt = 0.05) {
    if (n < 1) throw std::invalid_argument("cnon: n must be >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    CnonSystem s;
    s.coupling.resize(n, n);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) s.coupling(i, j) = 1.0 + u(rng);
    }
    s.drive.resize(n);
    for (Index i = 0; i < n; ++i) s.drive[i] = u(rng);
    s.t_end = t_end;
    s.dt = dt;
    s.validate();
    return s;
  }

  /// Symmetric coupling J = (S + S^T)/2 folded into Q: off-diagonals J_ij,
  /// diagonal -sum_{j != i} J_ij.
  static CnonSystem from_coupling(const Matrix& s_raw, Vector drive, double t_end = 0.5, double dt = 0.05) {
    if (s_raw.rows() != s_raw.cols()) throw DimensionError("cnon: S must be square");
    const Matrix j = 0.5 * (s_raw + s_raw.transpose());
    CnonSystem s;
    s.coupling = j;
    for (Index i = 0; i < j.rows(); ++i) {
      double off = 0.0;
      for (Index c = 0; c < j.cols(); ++c) {
        if (c != i) off += j(i, c);
      }
      s.coupling(i, i) = -off;
    }
    s.drive = std::move(drive);
    s.t_end = t_end;
    s.dt = dt;
    s.validate();
    return s;
  }

  /// Symmetric construction with S uniform in [-1,1] and e uniform in [-1,1].
  static CnonSystem random_symmetric(Index n, std::uint64_t seed, double t_end = 0.5, double dt = 0.05) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Matrix s_raw(n, n);
    for (Index i = 0; i < n; ++i) {
      for (Index c = 0; c < n; ++c) s_raw(i, c) = u(rng);
    }
    Vector e(n);
    for (Index i = 0; i < n; ++i) e[i] = u(rng);
    return from_coupling(s_raw, std::move(e), t_end, dt);
  }
};

namespace detail {

inline Vector cnon_accel(const CnonSystem& sys, const Vector& q) {
  const Vector s = (std::numbers::pi * q.array()).sin().matrix();
  return -s + sys.coupling * s + sys.drive;
}

}  // namespace detail

/// q(t_end) from q(0) = q0 at rest.
inline Vector cnon_evolve(const CnonSystem& sys, const Vector& q0) {
  sys.validate();
  require_dim(q0.size(), sys.size(), "cnon_evolve q0");
  if (!all_finite(q0)) throw NonFiniteError("cnon_evolve: non-finite initial state");
  Vector q = q0;
  Vector v = Vector::Zero(q0.size());
  const auto steps = static_cast<long>(std::ceil(sys.t_end / sys.dt - 1e-9));
  for (long k = 0; k < steps; ++k) {
    const double h = std::min(sys.dt, sys.t_end - double(k) * sys.dt);
    const Vector a1 = detail::cnon_accel(sys, q);
    const Vector q2 = q + 0.5 * h * v;
    const Vector v2 = v + 0.5 * h * a1;
    const Vector a2 = detail::cnon_accel(sys, q2);
    const Vector q3 = q + 0.5 * h * v2;
    const Vector v3 = v + 0.5 * h * a2;
    const Vector a3 = detail::cnon_accel(sys, q3);
    const Vector q4 = q + h * v3;
    const Vector v4 = v + h * a3;
    const Vector a4 = detail::cnon_accel(sys, q4);
    q += (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4);
    v += (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
    if (!all_finite(q) || !all_finite(v)) {
      throw NonFiniteError("cnon_evolve: non-finite state at RK4 step " + std::to_string(k));
    }
  }
  return q;
}

/// Reference Jacobian dq(t_end)/dq0 by central differences on the simulator.
inline Matrix cnon_exact_gradient(const CnonSystem& sys, const Vector& q0, double step = 1e-5) {
  require_dim(q0.size(), sys.size(), "cnon_exact_gradient q0");
  const Index n = q0.size();
  Matrix jac(n, n);
  Vector qp = q0;
  for (Index j = 0; j < n; ++j) {
    qp[j] = q0[j] + step;
    const Vector fp = cnon_evolve(sys, qp);
    qp[j] = q0[j] - step;
    const Vector fm = cnon_evolve(sys, qp);
    qp[j] = q0[j];
    jac.col(j) = (fp - fm) / (2.0 * step);
  }
  return jac;
}

class CnonBlackBox final : public BlackBox {
 public:
  explicit CnonBlackBox(CnonSystem sys) : sys_(std::move(sys)) { sys_.validate(); }

  Index input_dim() const override { return sys_.size(); }
  Index output_dim() const override { return sys_.size(); }
  std::string name() const override { return "cnon"; }
  std::optional<Matrix> exact_jacobian(const Vector& x) const override { return cnon_exact_gradient(sys_, x); }
  const CnonSystem& system() const { return sys_; }

 protected:
  Vector compute(const Vector& x) const override { return cnon_evolve(sys_, x); }

 private:
  CnonSystem sys_;
};

// ---- system definition files ----

inline nlohmann::json to_json(const CnonSystem& s) {
  nlohmann::json j;
  j["n"] = s.size();
  std::vector<std::vector<double>> q(std::size_t(s.size()));
  for (Index r = 0; r < s.size(); ++r) {
    for (Index c = 0; c < s.size(); ++c) q[std::size_t(r)].push_back(s.coupling(r, c));
  }
  j["Q"] = q;
  j["e"] = std::vector<double>(s.drive.data(), s.drive.data() + s.drive.size());
  j["t_end"] = s.t_end;
  j["dt"] = s.dt;
  return j;
}

/// {n, Q | seed, e | seed, t_end, dt}. Missing Q or e are drawn from `seed`
/// (Q = ones + U[-1,1], e = U[-1,1]).
inline CnonSystem cnon_from_json(const nlohmann::json& j) {
  const Index n = j.at("n").get<Index>();
  const double t_end = j.value("t_end", 0.5);
  const double dt = j.value("dt", 0.05);
  CnonSystem s = CnonSystem::random(n, j.value("seed", std::uint64_t{0}), t_end, dt);
  if (j.contains("Q")) {
    const auto rows = j.at("Q").get<std::vector<std::vector<double>>>();
    if (Index(rows.size()) != n) throw DimensionError("cnon json: Q must have n rows");
    for (Index r = 0; r < n; ++r) {
      if (Index(rows[std::size_t(r)].size()) != n) throw DimensionError("cnon json: Q must have n columns");
      for (Index c = 0; c < n; ++c) s.coupling(r, c) = rows[std::size_t(r)][std::size_t(c)];
    }
  }
  if (j.contains("e")) {
    const auto e = j.at("e").get<std::vector<double>>();
    if (Index(e.size()) != n) throw DimensionError("cnon json: e must have n entries");
    s.drive = Eigen::Map<const Vector>(e.data(), n);
  }
  s.validate();
  return s;
}

}  // namespace gradpie
