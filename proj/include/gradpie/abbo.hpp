#pragma once

// Offline and online surrogate-gradient optimization loops. The true
// black-box is always queried in the forward pass; the surrogate (or a
// reference Jacobian) only supplies the backward pass.

#include "gradpie/blackbox.hpp"
#include "gradpie/surrogate.hpp"

#include <chrono>
#include <fstream>
#include <functional>
#include <optional>

namespace gradpie {

struct Objective {
  std::string name;
  Direction direction = Direction::minimize;
  std::function<double(const Vector&)> evaluate;
  std::function<Vector(const Vector&)> gradient_wrt_y;

  /// Gradient of the quantity being minimized (negated when maximizing).
  Vector descent_gradient(const Vector& y) const {
    const Vector g = gradient_wrt_y(y);
    return direction == Direction::minimize ? g : Vector(-g);
  }

  bool better(double a, double b) const { return direction == Direction::minimize ? a < b : a > b; }
};

/// psi(y) = ||y - lambda||_1, minimized.
inline Objective l1_to_target(Vector lambda) {
  Objective o;
  o.name = "l1_to_target";
  o.direction = Direction::minimize;
  o.evaluate = [lambda](const Vector& y) {
    require_dim(y.size(), lambda.size(), "l1_to_target");
    return (y - lambda).lpNorm<1>();
  };
  o.gradient_wrt_y = [lambda](const Vector& y) {
    require_dim(y.size(), lambda.size(), "l1_to_target");
    return Vector((y - lambda).unaryExpr([](double v) { return sign_or_zero(v); }));
  };
  return o;
}

/// psi(y) = y_i.
inline Objective output_component(Index i, Direction direction) {
  if (i < 0) throw std::invalid_argument("output_component: negative index");
  Objective o;
  o.name = "output_component";
  o.direction = direction;
  o.evaluate = [i](const Vector& y) {
    if (i >= y.size()) throw DimensionError("output_component: index out of range");
    return y[i];
  };
  o.gradient_wrt_y = [i](const Vector& y) {
    Vector g = Vector::Zero(y.size());
    g[i] = 1.0;
    return g;
  };
  return o;
}

enum class GradientSource { locality, base, exact };

inline std::string to_string(GradientSource g) {
  switch (g) {
    case GradientSource::locality: return "locality";
    case GradientSource::base: return "base";
    case GradientSource::exact: return "exact";
  }
  return "?";
}

inline GradientSource parse_gradient_source(const std::string& s) {
  if (s == "locality" || s == "gradpie") return GradientSource::locality;
  if (s == "base" || s == "mae") return GradientSource::base;
  if (s == "exact") return GradientSource::exact;
  throw std::invalid_argument("unknown gradient source '" + s + "'");
}

inline LossKind loss_for(GradientSource g) {
  if (g == GradientSource::exact) throw std::invalid_argument("exact gradients need no surrogate loss");
  return g == GradientSource::locality ? LossKind::gradpie : LossKind::mae;
}

struct RunConfig {
  std::string task = "cnon";
  std::vector<Index> hidden = {256, 256};
  Activation activation = Activation::gelu;
  bool layernorm = false;
  Index k = 4;
  double eta1 = 1e-3;   // surrogate learning rate
  double eta2 = 0.05;   // input learning rate
  Index l_epochs = 100;
  double epsilon = 0.0;
  Index tau = 200;
  Index n_init = 100;
  Index n_s = 1;
  double sigma = 0.05;  // in units of the input std of the initial dataset
  Index n_best = 5;
  Index batch_size = 64;
  Index n_data = 1000;      // offline training set size
  double init_scale = 1.0;  // std of the normal initial draws
  bool warm_start = true;
  std::uint64_t seed = 0;
  Direction direction = Direction::minimize;
  GradientSource gradient = GradientSource::locality;

  void validate() const {
    if (tau < 0) throw std::invalid_argument("config: tau must be >= 0");
    if (n_init < 2) throw std::invalid_argument("config: n_init must be >= 2");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("config: epsilon must be >= 0");
    if (!(eta1 > 0.0) || !(eta2 > 0.0)) throw std::invalid_argument("config: eta1 and eta2 must be > 0");
    if (k < 1) throw std::invalid_argument("config: k must be >= 1");
    if (l_epochs < 1) throw std::invalid_argument("config: l_epochs must be >= 1");
    if (n_s < 0) throw std::invalid_argument("config: n_s must be >= 0");
    if (!(sigma >= 0.0)) throw std::invalid_argument("config: sigma must be >= 0");
    if (n_best < 1) throw std::invalid_argument("config: n_best must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (n_data < 2) throw std::invalid_argument("config: n_data must be >= 2");
    if (!(init_scale > 0.0)) throw std::invalid_argument("config: init_scale must be > 0");
    for (auto h : hidden) {
      if (h < 1) throw std::invalid_argument("config: hidden sizes must be positive");
    }
  }

  MlpArchitecture architecture(Index d_in, Index d_out) const {
    std::vector<Index> dims{d_in};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(d_out);
    return MlpArchitecture(std::move(dims), activation, layernorm);
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.loss = gradient == GradientSource::exact ? LossKind::gradpie : loss_for(gradient);
    t.k = k;
    t.batch_size = batch_size;
    t.epochs = l_epochs;
    t.epsilon = epsilon;
    t.adam.learning_rate = eta1;
    return t;
  }

  AdamConfig input_adam() const {
    AdamConfig a;
    a.learning_rate = eta2;
    return a;
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"task", c.task},         {"hidden", c.hidden},
          {"activation", to_string(c.activation)},
          {"layernorm", c.layernorm}, {"k", c.k},
          {"eta1", c.eta1},         {"eta2", c.eta2},
          {"l_epochs", c.l_epochs}, {"epsilon", c.epsilon},
          {"tau", c.tau},           {"n_init", c.n_init},
          {"n_s", c.n_s},           {"sigma", c.sigma},
          {"n_best", c.n_best},     {"batch_size", c.batch_size},
          {"n_data", c.n_data},     {"init_scale", c.init_scale},
          {"warm_start", c.warm_start}, {"seed", c.seed},
          {"direction", to_string(c.direction)},
          {"gradient", to_string(c.gradient)}};
}

struct TrajectoryRecord {
  Index iter = 0;
  double best_objective = 0.0;  // best-ever true objective up to this iteration
  double mean_objective = 0.0;  // mean over the points evaluated in this iteration
  std::uint64_t queries = 0;
  double surrogate_loss = std::numeric_limits<double>::quiet_NaN();
  double wall_time = 0.0;
  std::uint64_t seed = 0;
  std::vector<Vector> candidates;
  std::vector<double> objectives;
};

struct OptimizationResult {
  Vector best_x;
  double best_objective = 0.0;
  double initial_objective = 0.0;
  std::vector<TrajectoryRecord> trajectory;
  std::uint64_t total_queries = 0;
  std::string status = "ok";
  std::optional<Dataset> dataset;

  bool ok() const { return status == "ok"; }
};

/// g = J^T u at x, with u the upstream gradient at the true output.
using GradientFn = std::function<Vector(const Vector& x, const Vector& upstream)>;

template <typename S>
GradientFn surrogate_gradient(const Surrogate<S>& model) {
  return [&model](const Vector& x, const Vector& u) { return model.input_gradient(x, u); };
}

inline GradientFn exact_gradient(const BlackBox& box) {
  return [&box](const Vector& x, const Vector& u) -> Vector {
    const auto jac = box.exact_jacobian(x);
    if (!jac) throw std::invalid_argument(box.name() + " has no reference Jacobian");
    return jac->transpose() * u;
  };
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename Rng>
Vector normal_draw(Index dim, double scale, Rng& rng) {
  std::normal_distribution<double> nd(0.0, scale);
  Vector x(dim);
  for (Index i = 0; i < dim; ++i) x[i] = nd(rng);
  return x;
}

}  // namespace detail

/// N inputs drawn from N(0, init_scale^2 I) and their true outputs.
template <typename Rng>
Dataset sample_dataset(BlackBox& box, Index n, double init_scale, Rng& rng) {
  Dataset data(box.input_dim(), box.output_dim());
  for (Index i = 0; i < n; ++i) {
    Vector x = detail::normal_draw(box.input_dim(), init_scale, rng);
    Vector y = box.evaluate(x);
    data.append(std::move(x), std::move(y));
  }
  return data;
}

/// Trains a fresh surrogate on `data` with the loss implied by cfg.gradient.
template <typename S>
std::pair<Surrogate<S>, TrainResult> offline_train(const Dataset& data, const RunConfig& cfg) {
  cfg.validate();
  if (data.size() < 2) throw std::invalid_argument("offline_train: dataset needs at least 2 samples");
  const DatasetStats stats = data.norm_stats() ? *data.norm_stats() : Dataset(data).compute_norm_stats();
  Surrogate<S> model(Mlp<S>(cfg.architecture(data.input_dim(), data.output_dim()), derive_seed(cfg.seed, 1)),
                     stats);
  std::mt19937_64 rng(derive_seed(cfg.seed, 2));
  TrainResult res = train_surrogate(model, data, cfg.train_config(), rng);
  return {std::move(model), std::move(res)};
}

/// tau Adam steps on x from x0. Each step's upstream gradient is taken at the
/// true output of the current point, so the black-box is queried 1 + tau times.
inline OptimizationResult offline_optimize(const GradientFn& grad, BlackBox& box, const Objective& objective,
                                           const Vector& x0, const RunConfig& cfg, double surrogate_loss = 0.0) {
  require_dim(x0.size(), box.input_dim(), "offline_optimize x0");
  if (!all_finite(x0)) throw NonFiniteError("offline_optimize: non-finite x0");
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t q0 = box.counter().value();
  OptimizationResult res;
  Vector x = x0;
  Vector y = box.evaluate(x);
  double f = objective.evaluate(y);
  res.best_x = x;
  res.best_objective = f;
  res.initial_objective = f;
  VectorAdam adam(x.size());
  const AdamConfig acfg = cfg.input_adam();
  for (Index t = 1; t <= cfg.tau; ++t) {
    try {
      const Vector g = grad(x, objective.descent_gradient(y));
      adam.apply(x, g, acfg);
      y = box.evaluate(x);
      f = objective.evaluate(y);
    } catch (const std::exception& e) {
      res.status = std::string("aborted at iteration ") + std::to_string(t) + ": " + e.what();
      break;
    }
    if (objective.better(f, res.best_objective)) {
      res.best_objective = f;
      res.best_x = x;
    }
    TrajectoryRecord rec;
    rec.iter = t;
    rec.best_objective = res.best_objective;
    rec.mean_objective = f;
    rec.queries = box.counter().value() - q0;
    rec.surrogate_loss = surrogate_loss;
    rec.wall_time = detail::seconds_since(t0);
    rec.seed = cfg.seed;
    rec.candidates = {x};
    rec.objectives = {f};
    res.trajectory.push_back(std::move(rec));
  }
  res.total_queries = box.counter().value() - q0;
  return res;
}

/// Online loop. The pool is the whole dataset; each iteration steps the
/// n_best best points that have not been stepped from yet, each carrying the
/// Adam state of the point it descends from.
template <typename S>
OptimizationResult online_optimize(BlackBox& box, const Objective& objective, const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t q0 = box.counter().value();
  std::mt19937_64 rng(derive_seed(cfg.seed, 0));

  OptimizationResult res;
  Dataset data = sample_dataset(box, cfg.n_init, cfg.init_scale, rng);
  const DatasetStats stats = data.compute_norm_stats();

  std::vector<double> values;
  std::vector<VectorAdam> adam;
  std::vector<bool> expanded;
  auto add_point = [&](Vector x, Vector y, VectorAdam state) {
    const double f = objective.evaluate(y);
    values.push_back(f);
    adam.push_back(std::move(state));
    expanded.push_back(false);
    if (values.size() == 1 || objective.better(f, res.best_objective)) {
      res.best_objective = f;
      res.best_x = x;
    }
    data.append(std::move(x), std::move(y));
    return f;
  };
  {
    Dataset init = data;
    data = Dataset(box.input_dim(), box.output_dim());
    data.set_norm_stats(stats);
    for (Index i = 0; i < init.size(); ++i) add_point(init.input(i), init.output(i), VectorAdam(box.input_dim()));
  }
  res.initial_objective = res.best_objective;

  const bool use_surrogate = cfg.gradient != GradientSource::exact;
  std::optional<Surrogate<S>> model;
  const auto arch = cfg.architecture(box.input_dim(), box.output_dim());
  if (use_surrogate) model.emplace(Mlp<S>(arch, derive_seed(cfg.seed, 1)), stats);
  std::mt19937_64 train_rng(derive_seed(cfg.seed, 2));
  const TrainConfig tcfg = cfg.train_config();
  const AdamConfig acfg = cfg.input_adam();
  const GradientFn grad = use_surrogate ? surrogate_gradient(*model) : exact_gradient(box);

  for (Index t = 1; t <= cfg.tau; ++t) {
    TrajectoryRecord rec;
    rec.iter = t;
    rec.seed = cfg.seed;
    try {
      if (cfg.n_s > 0) {
        for (auto& x : local_sample(res.best_x, cfg.n_s, cfg.sigma, rng, &stats.input.std)) {
          Vector y = box.evaluate(x);
          rec.objectives.push_back(add_point(x, std::move(y), VectorAdam(box.input_dim())));
          rec.candidates.push_back(std::move(x));
        }
      }
      if (use_surrogate) {
        if (!cfg.warm_start) model.emplace(Mlp<S>(arch, derive_seed(cfg.seed, 1)), stats);
        rec.surrogate_loss = train_surrogate(*model, data, tcfg, train_rng).final_loss;
      }
      std::vector<double> open;
      std::vector<Index> open_idx;
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (!expanded[i]) {
          open.push_back(values[i]);
          open_idx.push_back(Index(i));
        }
      }
      if (open.empty()) throw std::runtime_error("candidate pool exhausted");
      for (Index sel : rank_select(open, cfg.n_best, cfg.direction)) {
        const Index i = open_idx[std::size_t(sel)];
        expanded[std::size_t(i)] = true;
        Vector x = data.input(i);
        VectorAdam state = adam[std::size_t(i)];
        state.apply(x, grad(x, objective.descent_gradient(data.output(i))), acfg);
        Vector y = box.evaluate(x);
        rec.objectives.push_back(add_point(x, std::move(y), std::move(state)));
        rec.candidates.push_back(std::move(x));
      }
    } catch (const std::exception& e) {
      res.status = std::string("aborted at iteration ") + std::to_string(t) + ": " + e.what();
      break;
    }
    double sum = 0.0;
    for (double v : rec.objectives) sum += v;
    rec.mean_objective = rec.objectives.empty() ? res.best_objective : sum / double(rec.objectives.size());
    rec.best_objective = res.best_objective;
    rec.queries = box.counter().value() - q0;
    rec.wall_time = detail::seconds_since(t0);
    res.trajectory.push_back(std::move(rec));
  }
  res.total_queries = box.counter().value() - q0;
  res.dataset = std::move(data);
  return res;
}

/// N_init normal draws, then n_best + n_s fresh draws per iteration so the
/// query budget matches online_optimize.
inline OptimizationResult random_search_baseline(BlackBox& box, const Objective& objective, const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t q0 = box.counter().value();
  std::mt19937_64 rng(derive_seed(cfg.seed, 0));
  OptimizationResult res;
  bool have = false;
  auto consider = [&](const Vector& x) {
    const double f = objective.evaluate(box.evaluate(x));
    if (!have || objective.better(f, res.best_objective)) {
      res.best_objective = f;
      res.best_x = x;
      have = true;
    }
    return f;
  };
  for (Index i = 0; i < cfg.n_init; ++i) consider(detail::normal_draw(box.input_dim(), cfg.init_scale, rng));
  res.initial_objective = res.best_objective;
  for (Index t = 1; t <= cfg.tau; ++t) {
    TrajectoryRecord rec;
    rec.iter = t;
    rec.seed = cfg.seed;
    double sum = 0.0;
    for (Index j = 0; j < cfg.n_best + cfg.n_s; ++j) {
      Vector x = detail::normal_draw(box.input_dim(), cfg.init_scale, rng);
      const double f = consider(x);
      sum += f;
      rec.candidates.push_back(std::move(x));
      rec.objectives.push_back(f);
    }
    rec.mean_objective = sum / double(rec.objectives.size());
    rec.best_objective = res.best_objective;
    rec.queries = box.counter().value() - q0;
    rec.wall_time = detail::seconds_since(t0);
    res.trajectory.push_back(std::move(rec));
  }
  res.total_queries = box.counter().value() - q0;
  return res;
}

// ---- artifacts ----

inline constexpr const char* kTrajectoryHeader = "iter,best_objective,mean_objective,queries,surrogate_loss,seed";

inline void write_trajectory_csv(const std::vector<TrajectoryRecord>& traj, std::ostream& os) {
  os << kTrajectoryHeader << '\n';
  os.precision(17);
  for (const auto& r : traj) {
    os << r.iter << ',' << r.best_objective << ',' << r.mean_objective << ',' << r.queries << ',';
    if (std::isfinite(r.surrogate_loss)) os << r.surrogate_loss;
    else os << "nan";
    os << ',' << r.seed << '\n';
  }
}

inline void write_trajectory_csv(const std::vector<TrajectoryRecord>& traj, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_trajectory_csv(traj, os);
}

inline nlohmann::json run_summary(const OptimizationResult& res, const RunConfig& cfg, const std::string& method) {
  nlohmann::json j;
  j["method"] = method;
  j["config"] = to_json(cfg);
  j["status"] = res.status;
  j["best_objective"] = res.best_objective;
  j["initial_objective"] = res.initial_objective;
  j["best_x"] = std::vector<double>(res.best_x.data(), res.best_x.data() + res.best_x.size());
  j["total_queries"] = res.total_queries;
  j["iterations"] = res.trajectory.size();
  j["wall_time"] = res.trajectory.empty() ? 0.0 : res.trajectory.back().wall_time;
  return j;
}

}  // namespace gradpie
