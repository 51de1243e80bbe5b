#pragma once

// Experiment specs (INI), per-seed runs and cross-seed aggregation.

#include "gradpie/abbo.hpp"
#include "gradpie/cnon.hpp"
#include "gradpie/metrics.hpp"
#include "gradpie/optics.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <map>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

namespace gradpie {

/// Invalid or unsupported experiment specification (CLI exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Mode { offline, online, random, grad_eval };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::offline: return "offline";
    case Mode::online: return "online";
    case Mode::random: return "random";
    case Mode::grad_eval: return "grad-eval";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "offline") return Mode::offline;
  if (s == "online") return Mode::online;
  if (s == "random") return Mode::random;
  if (s == "grad-eval" || s == "grad_eval") return Mode::grad_eval;
  throw ConfigError("unknown mode '" + s + "'");
}

struct CnonTaskConfig {
  Index n = 10;
  std::uint64_t system_seed = 0;
  bool vary_system = false;  // system seed = system_seed + run seed
  bool symmetric = false;
  double t_end = 0.5;
  double dt = 0.05;
  std::string system_file;  // JSON system definition, overrides the fields above
  std::vector<double> lambda{0.5};  // tiled to length n
};

struct AnalyticTaskConfig {
  std::string kind = "quadratic";
  Index dim = 5;
  std::uint64_t matrix_seed = 0;  // linear kind: A ~ N(0,1)
};

struct GradEvalConfig {
  std::vector<Index> k_sweep{1, 2, 4, 8, 16};
  Index n_test = 200;
};

struct ExperimentSpec {
  std::string task = "cnon";
  Mode mode = Mode::online;
  std::vector<std::string> methods{"locality", "base"};
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out = "results";
  std::vector<Index> checkpoints{50, 100, 200};
  std::string comparator = "base";
  bool double_precision = false;
  RunConfig run;
  CnonTaskConfig cnon;
  OpticalConfig owms;
  std::string owms_file;
  AnalyticTaskConfig analytic;
  GradEvalConfig grad_eval;

  void validate() const;
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename T>
T parse_number(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    T v;
    if constexpr (std::is_floating_point_v<T>) v = T(std::stod(s, &pos));
    else if constexpr (std::is_unsigned_v<T>) v = T(std::stoull(s, &pos));
    else v = T(std::stoll(s, &pos));
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid value '" + s + "' for " + key);
  }
}

template <typename T>
std::vector<T> parse_number_list(const std::string& s, const std::string& key) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) out.push_back(parse_number<T>(item, key));
  return out;
}

/// "0-9" or "0,3,5"
inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  static const std::regex range(R"(\s*(\d+)\s*-\s*(\d+)\s*)");
  std::smatch m;
  if (std::regex_match(s, m, range)) {
    const auto lo = std::stoull(m[1]);
    const auto hi = std::stoull(m[2]);
    if (hi < lo) throw ConfigError("empty seed range '" + s + "'");
    std::vector<std::uint64_t> out;
    for (auto v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  }
  return parse_number_list<std::uint64_t>(s, "seeds");
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("invalid boolean '" + s + "' for " + key);
}

class Section {
 public:
  Section(const boost::property_tree::ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  std::optional<std::string> raw(const std::string& key) const {
    if (!tree_) return std::nullopt;
    if (auto v = tree_->get_optional<std::string>(key)) return *v;
    return std::nullopt;
  }
  std::string key(const std::string& k) const { return "[" + name_ + "] " + k; }

  template <typename T>
  void read(const std::string& k, T& target) const {
    const auto v = raw(k);
    if (!v) return;
    if constexpr (std::is_same_v<T, bool>) target = parse_bool(*v, key(k));
    else if constexpr (std::is_same_v<T, std::string>) target = *v;
    else target = parse_number<T>(*v, key(k));
  }

  void check_known(const std::set<std::string>& known) const {
    if (!tree_) return;
    for (const auto& [k, _] : *tree_) {
      if (!known.count(k)) throw ConfigError("unknown key " + key(k));
    }
  }

 private:
  const boost::property_tree::ptree* tree_;
  std::string name_;
};

}  // namespace detail

inline void ExperimentSpec::validate() const {
  static const std::set<std::string> tasks{"cnon", "owms", "analytic"};
  if (!tasks.count(task)) throw ConfigError("unknown task '" + task + "'");
  if (seeds.empty()) throw ConfigError("seed list is empty");
  if (methods.empty() && mode != Mode::random) throw ConfigError("method list is empty");
  static const std::set<std::string> known{"locality", "base", "exact", "random"};
  for (const auto& m : methods) {
    if (!known.count(m)) throw ConfigError("unknown method '" + m + "'");
    if (mode == Mode::grad_eval && (m == "exact" || m == "random")) {
      throw ConfigError("grad-eval compares surrogates only (locality, base)");
    }
    if (mode == Mode::offline && m == "random") throw ConfigError("random is not an offline method");
  }
  if (task == "owms" && mode == Mode::grad_eval) throw ConfigError("grad-eval needs a reference Jacobian; owms has none");
  if (task == "owms" && std::find(methods.begin(), methods.end(), "exact") != methods.end() && mode != Mode::random) {
    throw ConfigError("owms has no exact gradient");
  }
  for (auto c : checkpoints) {
    if (c < 1) throw ConfigError("checkpoints must be >= 1");
  }
  if (grad_eval.n_test < 1) throw ConfigError("[grad_eval] n_test must be >= 1");
  for (auto k : grad_eval.k_sweep) {
    if (k < 1) throw ConfigError("[grad_eval] k_sweep entries must be >= 1");
  }
  if (cnon.n < 1) throw ConfigError("[cnon] n must be >= 1");
  if (cnon.lambda.empty()) throw ConfigError("[cnon] lambda must not be empty");
  if (analytic.dim < 1) throw ConfigError("[analytic] dim must be >= 1");
  try {
    run.validate();
    parse_analytic_kind(analytic.kind);
    if (owms_file.empty()) owms.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

/// Parses an INI document. Unknown sections or keys are rejected.
inline ExperimentSpec parse_experiment(std::istream& is) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("spec parse error: ") + e.what());
  }
  static const std::set<std::string> sections{"experiment", "run", "cnon", "owms", "analytic", "grad_eval"};
  for (const auto& [name, _] : tree) {
    if (!sections.count(name)) throw ConfigError("unknown section [" + name + "]");
  }
  auto section = [&](const std::string& name) {
    const auto it = tree.find(name);
    return detail::Section(it == tree.not_found() ? nullptr : &it->second, name);
  };

  ExperimentSpec spec;
  const auto ex = section("experiment");
  ex.check_known({"task", "mode", "methods", "seeds", "out", "checkpoints", "comparator", "precision"});
  ex.read("task", spec.task);
  if (auto v = ex.raw("mode")) spec.mode = parse_mode(*v);
  if (auto v = ex.raw("methods")) spec.methods = detail::split_list(*v);
  if (auto v = ex.raw("seeds")) spec.seeds = detail::parse_seeds(*v);
  if (auto v = ex.raw("out")) spec.out = *v;
  if (auto v = ex.raw("checkpoints")) spec.checkpoints = detail::parse_number_list<Index>(*v, "checkpoints");
  ex.read("comparator", spec.comparator);
  if (auto v = ex.raw("precision")) {
    if (*v != "float" && *v != "double") throw ConfigError("precision must be float or double");
    spec.double_precision = *v == "double";
  }
  if (spec.mode == Mode::random) spec.methods = {"random"};

  auto& r = spec.run;
  const auto run = section("run");
  run.check_known({"hidden", "activation", "layernorm", "k", "eta1", "eta2", "l_epochs", "epsilon", "tau", "n_init",
                   "n_s", "sigma", "n_best", "batch_size", "n_data", "init_scale", "warm_start", "direction"});
  if (auto v = run.raw("hidden")) r.hidden = detail::parse_number_list<Index>(*v, "[run] hidden");
  if (auto v = run.raw("activation")) {
    try {
      r.activation = parse_activation(*v);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  run.read("layernorm", r.layernorm);
  run.read("k", r.k);
  run.read("eta1", r.eta1);
  run.read("eta2", r.eta2);
  run.read("l_epochs", r.l_epochs);
  run.read("epsilon", r.epsilon);
  run.read("tau", r.tau);
  run.read("n_init", r.n_init);
  run.read("n_s", r.n_s);
  run.read("sigma", r.sigma);
  run.read("n_best", r.n_best);
  run.read("batch_size", r.batch_size);
  run.read("n_data", r.n_data);
  run.read("init_scale", r.init_scale);
  run.read("warm_start", r.warm_start);
  if (auto v = run.raw("direction")) {
    try {
      r.direction = parse_direction(*v);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  r.task = spec.task;

  const auto cn = section("cnon");
  cn.check_known({"n", "seed", "vary_system", "symmetric", "t_end", "dt", "system", "lambda"});
  cn.read("n", spec.cnon.n);
  cn.read("seed", spec.cnon.system_seed);
  cn.read("vary_system", spec.cnon.vary_system);
  cn.read("symmetric", spec.cnon.symmetric);
  cn.read("t_end", spec.cnon.t_end);
  cn.read("dt", spec.cnon.dt);
  cn.read("system", spec.cnon.system_file);
  if (auto v = cn.raw("lambda")) spec.cnon.lambda = detail::parse_number_list<double>(*v, "[cnon] lambda");

  const auto ow = section("owms");
  ow.check_known({"grid", "pitch", "wavelength", "waist", "z", "system"});
  ow.read("grid", spec.owms.grid);
  ow.read("pitch", spec.owms.pitch);
  ow.read("wavelength", spec.owms.wavelength);
  ow.read("waist", spec.owms.waist);
  ow.read("z", spec.owms.distance);
  ow.read("system", spec.owms_file);

  const auto an = section("analytic");
  an.check_known({"kind", "dim", "matrix_seed"});
  an.read("kind", spec.analytic.kind);
  an.read("dim", spec.analytic.dim);
  an.read("matrix_seed", spec.analytic.matrix_seed);

  const auto ge = section("grad_eval");
  ge.check_known({"k_sweep", "n_test"});
  if (auto v = ge.raw("k_sweep")) spec.grad_eval.k_sweep = detail::parse_number_list<Index>(*v, "[grad_eval] k_sweep");
  ge.read("n_test", spec.grad_eval.n_test);

  spec.validate();
  return spec;
}

inline ExperimentSpec load_experiment(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open spec file " + path.string());
  return parse_experiment(is);
}

inline nlohmann::json to_json(const ExperimentSpec& s) {
  nlohmann::json j;
  j["task"] = s.task;
  j["mode"] = to_string(s.mode);
  j["methods"] = s.methods;
  j["seeds"] = s.seeds;
  j["out"] = s.out.string();
  j["checkpoints"] = s.checkpoints;
  j["comparator"] = s.comparator;
  j["precision"] = s.double_precision ? "double" : "float";
  j["run"] = to_json(s.run);
  if (s.task == "cnon") {
    j["cnon"] = {{"n", s.cnon.n},           {"seed", s.cnon.system_seed}, {"vary_system", s.cnon.vary_system},
                 {"symmetric", s.cnon.symmetric}, {"t_end", s.cnon.t_end}, {"dt", s.cnon.dt},
                 {"system", s.cnon.system_file}, {"lambda", s.cnon.lambda}};
  } else if (s.task == "owms") {
    j["owms"] = to_json(s.owms);
    j["owms"]["system"] = s.owms_file;
  } else {
    j["analytic"] = {{"kind", s.analytic.kind}, {"dim", s.analytic.dim}, {"matrix_seed", s.analytic.matrix_seed}};
  }
  if (s.mode == Mode::grad_eval) j["grad_eval"] = {{"k_sweep", s.grad_eval.k_sweep}, {"n_test", s.grad_eval.n_test}};
  return j;
}

// ---- task construction ----

struct Task {
  std::unique_ptr<BlackBox> box;
  Objective objective;
  nlohmann::json system;  // resolved system definition for the run summary
};

inline Vector tile(const std::vector<double>& v, Index n) {
  Vector out(n);
  for (Index i = 0; i < n; ++i) out[i] = v[std::size_t(i) % v.size()];
  return out;
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot open system file " + p.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const std::exception& e) {
    throw ConfigError("invalid JSON in " + p.string() + ": " + e.what());
  }
}

inline Task make_task(const ExperimentSpec& spec, std::uint64_t seed) {
  Task t;
  if (spec.task == "cnon") {
    CnonSystem sys;
    if (!spec.cnon.system_file.empty()) {
      sys = cnon_from_json(read_json_file(spec.cnon.system_file));
    } else {
      const auto s = spec.cnon.system_seed + (spec.cnon.vary_system ? seed : 0);
      sys = spec.cnon.symmetric ? CnonSystem::random_symmetric(spec.cnon.n, s, spec.cnon.t_end, spec.cnon.dt)
                                : CnonSystem::random(spec.cnon.n, s, spec.cnon.t_end, spec.cnon.dt);
    }
    t.system = to_json(sys);
    const Vector lambda = tile(spec.cnon.lambda, sys.size());
    t.box = std::make_unique<CnonBlackBox>(std::move(sys));
    t.objective = l1_to_target(lambda);
  } else if (spec.task == "owms") {
    const OpticalConfig cfg = spec.owms_file.empty() ? spec.owms : optical_config_from_json(read_json_file(spec.owms_file));
    t.system = to_json(cfg);
    auto box = std::make_unique<OwmsBlackBox>(cfg);
    t.objective = l1_to_target(box->target_modulus());
    t.box = std::move(box);
  } else {
    const auto kind = parse_analytic_kind(spec.analytic.kind);
    Matrix a;
    if (kind == AnalyticKind::linear) {
      std::mt19937_64 rng(spec.analytic.matrix_seed);
      std::normal_distribution<double> nd;
      a.resize(spec.analytic.dim, spec.analytic.dim);
      for (Index i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
    }
    t.box = analytic_blackbox(kind, spec.analytic.dim, a);
    t.system = {{"kind", spec.analytic.kind}, {"dim", spec.analytic.dim}, {"matrix_seed", spec.analytic.matrix_seed}};
    if (kind == AnalyticKind::linear) t.objective = l1_to_target(Vector::Zero(spec.analytic.dim));
    else t.objective = output_component(0, Direction::minimize);
  }
  t.objective.direction = spec.run.direction == Direction::minimize ? t.objective.direction : spec.run.direction;
  return t;
}

// ---- runners ----

struct RunOptions {
  unsigned threads = 1;
  std::ostream* log = nullptr;
};

namespace detail {

inline void write_json(const nlohmann::json& j, const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

/// Runs fn(seed) for every seed on up to `threads` workers; the first
/// exception is rethrown after all workers finish.
template <typename Fn>
void for_each_seed(const std::vector<std::uint64_t>& seeds, unsigned threads, Fn fn) {
  threads = std::max(1u, std::min<unsigned>(threads, unsigned(seeds.size())));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        fn(seeds[i]);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

inline void log_line(const RunOptions& opt, const std::string& msg) {
  static std::mutex m;
  if (!opt.log) return;
  std::lock_guard lock(m);
  *opt.log << msg << std::endl;
}

template <typename S>
void run_seed(const ExperimentSpec& spec, std::uint64_t seed, const RunOptions& opt) {
  RunConfig cfg = spec.run;
  cfg.seed = seed;
  auto finish = [&](const std::string& method, const OptimizationResult& res, const Task& task,
                    nlohmann::json extra = {}) {
    const auto stem = spec.out / (method + "_seed" + std::to_string(seed));
    write_trajectory_csv(res.trajectory, stem.string() + ".csv");
    nlohmann::json j = run_summary(res, cfg, method);
    j["experiment"] = to_json(spec);
    j["system"] = task.system;
    for (auto& [k, v] : extra.items()) j[k] = v;
    write_json(j, stem.string() + ".json");
    log_line(opt, method + " seed " + std::to_string(seed) + ": best " + std::to_string(res.best_objective) + " (" +
                      res.status + ")");
    if (!res.ok()) throw std::runtime_error(method + " seed " + std::to_string(seed) + " " + res.status);
  };

  if (spec.mode == Mode::online || spec.mode == Mode::random) {
    for (const auto& method : spec.methods) {
      Task task = make_task(spec, seed);
      RunConfig c = cfg;
      OptimizationResult res;
      if (method == "random") {
        res = random_search_baseline(*task.box, task.objective, c);
      } else {
        c.gradient = parse_gradient_source(method);
        res = online_optimize<S>(*task.box, task.objective, c);
      }
      finish(method, res, task);
    }
    return;
  }

  // offline: one dataset and one start point per seed, shared by all methods
  Task task = make_task(spec, seed);
  std::mt19937_64 rng(derive_seed(seed, 10));
  Dataset data = sample_dataset(*task.box, cfg.n_data, cfg.init_scale, rng);
  data.compute_norm_stats();
  const Vector x0 = detail::normal_draw(task.box->input_dim(), cfg.init_scale, rng);
  for (const auto& method : spec.methods) {
    RunConfig c = cfg;
    c.gradient = parse_gradient_source(method);
    task.box->counter().reset();
    if (c.gradient == GradientSource::exact) {
      auto res = offline_optimize(exact_gradient(*task.box), *task.box, task.objective, x0, c,
                                  std::numeric_limits<double>::quiet_NaN());
      finish(method, res, task, {{"dataset_queries", 0}});
      continue;
    }
    auto [model, train] = offline_train<S>(data, c);
    auto res = offline_optimize(surrogate_gradient(model), *task.box, task.objective, x0, c, train.final_loss);
    finish(method, res, task, {{"dataset_queries", data.size()}, {"train_epochs", train.epochs_run}});
  }
}

}  // namespace detail

// ---- gradient-quality evaluation ----

struct GradEvalEntry {
  std::string method;
  Index k = 0;  // 0 for the MAE surrogate
  std::uint64_t seed = 0;
  GradientReport report;
  double train_loss = 0.0;
};

inline void write_report_csv(const GradientReport& r, const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os.precision(17);
  os << "point_id,rel_err,cos_sim\n";
  for (std::size_t i = 0; i < r.size(); ++i) {
    os << i << ',' << r.relative_errors[i] << ',' << r.cosine_similarities[i] << '\n';
  }
}

inline nlohmann::json to_json(const SummaryStats& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"median", s.median}, {"q25", s.q25}, {"q75", s.q75}};
}

/// Trains one surrogate per method (and per K for locality) on N = n_data
/// samples and compares input gradients against the reference Jacobian at
/// n_test held-out points from the same distribution.
template <typename S>
std::vector<GradEvalEntry> grad_eval_seed(const ExperimentSpec& spec, std::uint64_t seed) {
  Task task = make_task(spec, seed);
  RunConfig cfg = spec.run;
  cfg.seed = seed;
  std::mt19937_64 rng(derive_seed(seed, 20));
  Dataset data = sample_dataset(*task.box, cfg.n_data, cfg.init_scale, rng);
  data.compute_norm_stats();
  std::vector<Vector> test;
  for (Index i = 0; i < spec.grad_eval.n_test; ++i) {
    test.push_back(detail::normal_draw(task.box->input_dim(), cfg.init_scale, rng));
  }
  auto upstream = [&](const Vector& y) { return task.objective.descent_gradient(y); };
  std::vector<GradEvalEntry> out;
  for (const auto& method : spec.methods) {
    const auto src = parse_gradient_source(method);
    const std::vector<Index> ks = src == GradientSource::locality ? spec.grad_eval.k_sweep : std::vector<Index>{0};
    for (Index k : ks) {
      RunConfig c = cfg;
      c.gradient = src;
      if (k > 0) c.k = k;
      auto [model, train] = offline_train<S>(data, c);
      GradEvalEntry e{method, k, seed, surrogate_gradient_eval(surrogate_gradient(model), *task.box, upstream, test),
                      train.final_loss};
      out.push_back(std::move(e));
    }
  }
  return out;
}

/// Per (method, K): mean over seeds of the per-seed mean relative error and
/// cosine similarity, plus pooled per-point statistics.
inline nlohmann::json grad_eval_summary(const std::vector<GradEvalEntry>& entries) {
  std::map<std::pair<std::string, Index>, std::vector<const GradEvalEntry*>> groups;
  for (const auto& e : entries) groups[{e.method, e.k}].push_back(&e);
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json best;
  for (const auto& [key, list] : groups) {
    std::vector<double> rel_means, cos_means, rel_all, cos_all;
    for (const auto* e : list) {
      rel_means.push_back(e->report.relative_error_summary().mean);
      cos_means.push_back(e->report.cosine_summary().mean);
      rel_all.insert(rel_all.end(), e->report.relative_errors.begin(), e->report.relative_errors.end());
      cos_all.insert(cos_all.end(), e->report.cosine_similarities.begin(), e->report.cosine_similarities.end());
    }
    const auto rel = summarize(rel_means);
    const auto cos = summarize(cos_means);
    nlohmann::json row{{"method", key.first},
                       {"k", key.second},
                       {"seeds", list.size()},
                       {"rel_err", to_json(rel)},
                       {"cos_sim", to_json(cos)},
                       {"rel_err_points", to_json(summarize(rel_all))},
                       {"cos_sim_points", to_json(summarize(cos_all))}};
    rows.push_back(row);
    auto& b = best[key.first];
    if (b.is_null() || rel.mean < b["rel_err"]["mean"].get<double>()) b = row;
  }
  return {{"groups", rows}, {"best_by_rel_err", best}};
}

// ---- aggregation ----

struct TrajectoryFile {
  std::string method;
  std::uint64_t seed = 0;
  std::filesystem::path path;
  std::vector<Index> iters;
  std::vector<double> best;
  std::vector<std::uint64_t> queries;
};

inline TrajectoryFile read_trajectory_csv(const std::filesystem::path& p) {
  static const std::regex name(R"((.+)_seed(\d+)\.csv)");
  std::smatch m;
  const std::string fname = p.filename().string();
  if (!std::regex_match(fname, m, name)) throw std::invalid_argument("not a trajectory file: " + p.string());
  TrajectoryFile f;
  f.method = m[1];
  f.seed = std::stoull(m[2]);
  f.path = p;
  std::ifstream is(p);
  std::string line;
  if (!std::getline(is, line) || line != kTrajectoryHeader) {
    throw std::invalid_argument(p.string() + ": unexpected header");
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cols = detail::split_list(line);
    if (cols.size() != 6) throw std::invalid_argument(p.string() + ": malformed row '" + line + "'");
    f.iters.push_back(std::stoll(cols[0]));
    f.best.push_back(std::stod(cols[1]));
    f.queries.push_back(std::stoull(cols[3]));
  }
  return f;
}

/// Summary of best_objective across seeds at each checkpoint, plus for every
/// method the first iteration whose cross-seed mean matches the comparator's
/// mean at the last checkpoint. Quantiles use linear interpolation.
inline nlohmann::json aggregate(const std::vector<TrajectoryFile>& files, const std::vector<Index>& checkpoints,
                                const std::string& comparator, Direction direction) {
  if (files.empty()) throw std::invalid_argument("aggregate: no trajectory files");
  std::vector<std::string> offenders;
  for (const auto& f : files) {
    if (f.iters != files.front().iters) offenders.push_back(f.path.filename().string());
  }
  if (!offenders.empty()) {
    std::string msg = "aggregate: iteration grids differ from " + files.front().path.filename().string() + ":";
    for (const auto& o : offenders) msg += " " + o;
    throw std::invalid_argument(msg);
  }
  const auto& grid = files.front().iters;
  if (grid.empty()) throw std::invalid_argument("aggregate: trajectory files have no rows");

  std::map<std::string, std::vector<const TrajectoryFile*>> by_method;
  for (const auto& f : files) by_method[f.method].push_back(&f);

  auto mean_curve = [&](const std::vector<const TrajectoryFile*>& list) {
    std::vector<double> m(grid.size(), 0.0), q(grid.size(), 0.0);
    for (const auto* f : list) {
      for (std::size_t i = 0; i < grid.size(); ++i) {
        m[i] += f->best[i];
        q[i] += double(f->queries[i]);
      }
    }
    for (std::size_t i = 0; i < grid.size(); ++i) {
      m[i] /= double(list.size());
      q[i] /= double(list.size());
    }
    return std::pair{m, q};
  };

  std::vector<Index> cps;
  for (auto c : checkpoints) {
    if (std::find(grid.begin(), grid.end(), c) != grid.end()) cps.push_back(c);
  }
  if (cps.empty()) cps.push_back(grid.back());

  nlohmann::json out;
  out["percentile_method"] = "linear interpolation between order statistics, position q*(n-1)";
  out["std"] = "sample standard deviation (n-1); 0 for a single seed";
  out["direction"] = to_string(direction);
  out["checkpoints"] = cps;
  nlohmann::json methods;
  for (const auto& [method, list] : by_method) {
    nlohmann::json mj;
    std::vector<std::uint64_t> seeds;
    for (const auto* f : list) seeds.push_back(f->seed);
    mj["seeds"] = seeds;
    for (auto c : cps) {
      const auto idx = std::size_t(std::find(grid.begin(), grid.end(), c) - grid.begin());
      std::vector<double> v;
      for (const auto* f : list) v.push_back(f->best[idx]);
      mj["at"][std::to_string(c)] = to_json(summarize(v));
    }
    methods[method] = mj;
  }
  out["methods"] = methods;

  if (by_method.count(comparator)) {
    const auto [cmp_curve, cmp_q] = mean_curve(by_method.at(comparator));
    const auto last_idx = std::size_t(std::find(grid.begin(), grid.end(), cps.back()) - grid.begin());
    const double target = cmp_curve[last_idx];
    nlohmann::json budget;
    budget["comparator"] = comparator;
    budget["comparator_iteration"] = cps.back();
    budget["target_mean"] = target;
    for (const auto& [method, list] : by_method) {
      const auto [curve, q] = mean_curve(list);
      nlohmann::json b{{"iteration", nullptr}, {"queries", nullptr}};
      for (std::size_t i = 0; i < grid.size(); ++i) {
        const bool match = direction == Direction::minimize ? curve[i] <= target : curve[i] >= target;
        if (match) {
          b["iteration"] = grid[i];
          b["queries"] = q[i];
          b["ratio_to_comparator"] = double(grid[i]) / double(cps.back());
          break;
        }
      }
      budget["methods"][method] = b;
    }
    out["budget_to_match"] = budget;
  }
  return out;
}

inline std::vector<TrajectoryFile> read_trajectory_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::invalid_argument("aggregate: not a directory: " + dir.string());
  std::vector<std::filesystem::path> paths;
  static const std::regex name(R"(.+_seed\d+\.csv)");
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && std::regex_match(e.path().filename().string(), name)) paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<TrajectoryFile> files;
  for (const auto& p : paths) files.push_back(read_trajectory_csv(p));
  return files;
}

/// aggregate.json in `dir`. Checkpoints, comparator and direction come from the
/// run summaries when present.
inline nlohmann::json aggregate_dir(const std::filesystem::path& dir) {
  const auto files = read_trajectory_dir(dir);
  if (files.empty()) throw std::invalid_argument("aggregate: no trajectory files in " + dir.string());
  std::vector<Index> checkpoints{50, 100, 200};
  std::string comparator = "base";
  Direction direction = Direction::minimize;
  auto summary = files.front().path;
  summary.replace_extension(".json");
  if (std::filesystem::exists(summary)) {
    std::ifstream is(summary);
    const auto j = nlohmann::json::parse(is);
    if (j.contains("experiment")) {
      checkpoints = j["experiment"].value("checkpoints", checkpoints);
      comparator = j["experiment"].value("comparator", comparator);
    }
    if (j.contains("config")) direction = parse_direction(j["config"].value("direction", "minimize"));
  }
  auto out = aggregate(files, checkpoints, comparator, direction);
  detail::write_json(out, dir / "aggregate.json");
  return out;
}

/// Runs every seed, then aggregates. Config problems surface as ConfigError
/// before any file is written.
inline nlohmann::json run_experiment(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  spec.validate();
  for (auto seed : spec.seeds) (void)make_task(spec, seed);  // surfaces bad system files early
  std::filesystem::create_directories(spec.out);
  if (spec.mode == Mode::grad_eval) {
    std::vector<GradEvalEntry> entries;
    std::mutex m;
    detail::for_each_seed(spec.seeds, opt.threads, [&](std::uint64_t seed) {
      auto part = spec.double_precision ? grad_eval_seed<double>(spec, seed) : grad_eval_seed<float>(spec, seed);
      for (const auto& e : part) {
        const std::string stem = e.method + (e.k > 0 ? "_k" + std::to_string(e.k) : "") + "_seed" + std::to_string(seed);
        write_report_csv(e.report, spec.out / ("grad_" + stem + ".csv"));
      }
      detail::log_line(opt, "grad-eval seed " + std::to_string(seed) + " done");
      std::lock_guard lock(m);
      entries.insert(entries.end(), part.begin(), part.end());
    });
    nlohmann::json out = grad_eval_summary(entries);
    out["experiment"] = to_json(spec);
    detail::write_json(out, spec.out / "grad_eval.json");
    return out;
  }
  detail::for_each_seed(spec.seeds, opt.threads, [&](std::uint64_t seed) {
    if (spec.double_precision) detail::run_seed<double>(spec, seed, opt);
    else detail::run_seed<float>(spec, seed, opt);
  });
  std::vector<TrajectoryFile> files;
  for (const auto& method : spec.methods) {
    for (auto seed : spec.seeds) {
      files.push_back(read_trajectory_csv(spec.out / (method + "_seed" + std::to_string(seed) + ".csv")));
    }
  }
  auto out = aggregate(files, spec.checkpoints, spec.comparator, spec.run.direction);
  out["experiment"] = to_json(spec);
  detail::write_json(out, spec.out / "aggregate.json");
  return out;
}

}  // namespace gradpie
