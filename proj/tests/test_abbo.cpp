#include "gradpie/abbo.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace gradpie;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.hidden = {16};
  c.l_epochs = 2;
  c.tau = 6;
  c.n_init = 20;
  c.n_s = 1;
  c.n_best = 3;
  c.batch_size = 16;
  c.k = 2;
  c.eta2 = 0.05;
  return c;
}

// Throws once more than `limit` queries have been made.
class Fragile final : public BlackBox {
 public:
  explicit Fragile(std::uint64_t limit) : limit_(limit) {}
  Index input_dim() const override { return 2; }
  Index output_dim() const override { return 1; }
  std::string name() const override { return "fragile"; }
  std::optional<Matrix> exact_jacobian(const Vector& x) const override { return Matrix(2.0 * x.transpose()); }

 protected:
  Vector compute(const Vector& x) const override {
    if (counter().value() > limit_) throw NonFiniteError("simulated divergence");
    return Vector::Constant(1, x.squaredNorm());
  }

 private:
  std::uint64_t limit_;
};

}  // namespace

TEST(Objective, L1ToTarget) {
  const auto o = l1_to_target((Vector(2) << 1.0, -1.0).finished());
  const Vector y = (Vector(2) << 3.0, -1.0).finished();
  EXPECT_EQ(o.evaluate(y), 2.0);
  EXPECT_EQ(o.gradient_wrt_y(y), (Vector(2) << 1.0, 0.0).finished());
  EXPECT_TRUE(o.better(1.0, 2.0));
  EXPECT_THROW(o.evaluate(Vector::Zero(3)), DimensionError);
}

TEST(Objective, MaximizeNegatesDescentGradient) {
  const auto o = output_component(1, Direction::maximize);
  const Vector y = (Vector(3) << 5.0, 2.0, 1.0).finished();
  EXPECT_EQ(o.evaluate(y), 2.0);
  EXPECT_EQ(o.descent_gradient(y), (Vector(3) << 0.0, -1.0, 0.0).finished());
  EXPECT_TRUE(o.better(3.0, 2.0));
  EXPECT_THROW(o.evaluate(Vector::Zero(1)), DimensionError);
}

TEST(GradientSourceNames, Parsing) {
  EXPECT_EQ(parse_gradient_source("locality"), GradientSource::locality);
  EXPECT_EQ(parse_gradient_source("base"), GradientSource::base);
  EXPECT_EQ(parse_gradient_source("exact"), GradientSource::exact);
  EXPECT_THROW(parse_gradient_source("fd"), std::invalid_argument);
  EXPECT_EQ(loss_for(GradientSource::base), LossKind::mae);
  EXPECT_THROW(loss_for(GradientSource::exact), std::invalid_argument);
}

TEST(RunConfigValidation, RejectsBadValues) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  c.tau = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = RunConfig{};
  c.n_init = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = RunConfig{};
  c.k = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = RunConfig{};
  c.hidden = {8, 0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = RunConfig{};
  c.eta2 = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Offline, QueryCountAndMonotoneBest) {
  QuadraticBlackBox box(4);
  auto cfg = small_config();
  cfg.tau = 50;
  cfg.eta2 = 0.1;
  const Vector x0 = Vector::Constant(4, 2.0);
  const auto obj = output_component(0, Direction::minimize);
  const auto res = offline_optimize(exact_gradient(box), box, obj, x0, cfg);
  EXPECT_TRUE(res.ok());
  EXPECT_EQ(res.total_queries, 51u);
  ASSERT_EQ(res.trajectory.size(), 50u);
  EXPECT_EQ(res.initial_objective, 16.0);
  for (std::size_t i = 1; i < res.trajectory.size(); ++i) {
    EXPECT_LE(res.trajectory[i].best_objective, res.trajectory[i - 1].best_objective);
    EXPECT_EQ(res.trajectory[i].queries, i + 2);
  }
  EXPECT_LT(res.best_objective, 1.0);
  EXPECT_NEAR(obj.evaluate(box.evaluate(res.best_x)), res.best_objective, 1e-12);
}

TEST(Offline, FirstStepIsSignedLearningRate) {
  QuadraticBlackBox box(3);
  auto cfg = small_config();
  cfg.tau = 1;
  const Vector x0 = (Vector(3) << 1.0, -2.0, 0.5).finished();
  const auto res = offline_optimize(exact_gradient(box), box, output_component(0, Direction::minimize), x0, cfg);
  const Vector x1 = res.trajectory[0].candidates[0];
  EXPECT_LT((x1 - (x0 - cfg.eta2 * x0.cwiseSign())).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Offline, MaximizationClimbs) {
  LinearBlackBox box((Matrix(1, 2) << 1.0, -1.0).finished());
  auto cfg = small_config();
  cfg.tau = 20;
  const auto res =
      offline_optimize(exact_gradient(box), box, output_component(0, Direction::maximize), Vector::Zero(2), cfg);
  EXPECT_GT(res.best_objective, 1.5);
}

TEST(Offline, AbortKeepsPartialTrajectory) {
  Fragile box(5);
  auto cfg = small_config();
  cfg.tau = 20;
  const auto res =
      offline_optimize(exact_gradient(box), box, output_component(0, Direction::minimize), Vector::Ones(2), cfg);
  EXPECT_FALSE(res.ok());
  EXPECT_NE(res.status.find("aborted at iteration"), std::string::npos);
  EXPECT_NE(res.status.find("simulated divergence"), std::string::npos);
  EXPECT_EQ(res.trajectory.size(), 4u);
}

TEST(Online, QueryBudgetExact) {
  QuadraticBlackBox box(3);
  auto cfg = small_config();
  cfg.gradient = GradientSource::exact;
  const auto res = online_optimize<double>(box, output_component(0, Direction::minimize), cfg);
  ASSERT_TRUE(res.ok()) << res.status;
  const auto per_iter = std::uint64_t(cfg.n_s + cfg.n_best);
  EXPECT_EQ(res.total_queries, std::uint64_t(cfg.n_init) + std::uint64_t(cfg.tau) * per_iter);
  ASSERT_EQ(res.trajectory.size(), std::size_t(cfg.tau));
  for (std::size_t t = 0; t < res.trajectory.size(); ++t) {
    EXPECT_EQ(res.trajectory[t].queries, std::uint64_t(cfg.n_init) + (t + 1) * per_iter);
    EXPECT_EQ(res.trajectory[t].candidates.size(), per_iter);
  }
  ASSERT_TRUE(res.dataset);
  EXPECT_EQ(std::uint64_t(res.dataset->size()), res.total_queries);
}

TEST(Online, SurrogateRunIsReproducible) {
  auto cfg = small_config();
  QuadraticBlackBox a(3), b(3);
  const auto obj = output_component(0, Direction::minimize);
  const auto r1 = online_optimize<double>(a, obj, cfg);
  const auto r2 = online_optimize<double>(b, obj, cfg);
  ASSERT_TRUE(r1.ok()) << r1.status;
  EXPECT_EQ(r1.best_x, r2.best_x);
  for (std::size_t t = 0; t < r1.trajectory.size(); ++t) {
    EXPECT_EQ(r1.trajectory[t].objectives, r2.trajectory[t].objectives);
    EXPECT_EQ(r1.trajectory[t].surrogate_loss, r2.trajectory[t].surrogate_loss);
    EXPECT_TRUE(std::isfinite(r1.trajectory[t].surrogate_loss));
  }
  cfg.seed = 1;
  QuadraticBlackBox c(3);
  EXPECT_NE(online_optimize<double>(c, obj, cfg).best_x, r1.best_x);
}

TEST(Online, BestIsMonotoneAndNoWorseThanInitial) {
  QuadraticBlackBox box(5);
  auto cfg = small_config();
  cfg.tau = 15;
  cfg.gradient = GradientSource::base;
  cfg.warm_start = false;
  const auto res = online_optimize<float>(box, output_component(0, Direction::minimize), cfg);
  ASSERT_TRUE(res.ok()) << res.status;
  double prev = res.initial_objective;
  for (const auto& r : res.trajectory) {
    EXPECT_LE(r.best_objective, prev);
    prev = r.best_objective;
    for (double f : r.objectives) EXPECT_GE(f, r.best_objective);
  }
}

TEST(Online, ZeroSigmaSamplesDuplicateTheIncumbent) {
  QuadraticBlackBox box(2);
  auto cfg = small_config();
  cfg.gradient = GradientSource::exact;
  cfg.sigma = 0.0;
  cfg.n_s = 2;
  cfg.tau = 1;
  const auto res = online_optimize<double>(box, output_component(0, Direction::minimize), cfg);
  const auto& rec = res.trajectory[0];
  // local samples come first and sit exactly on the best initial point
  EXPECT_EQ(rec.candidates[0], rec.candidates[1]);
  EXPECT_EQ(rec.objectives[0], res.initial_objective);
}

TEST(Online, ExactGradientStepsFromTheBestPoints) {
  QuadraticBlackBox box(2);
  auto cfg = small_config();
  cfg.gradient = GradientSource::exact;
  cfg.n_s = 0;
  cfg.n_best = 1;
  cfg.tau = 1;
  const auto res = online_optimize<double>(box, output_component(0, Direction::minimize), cfg);
  const Dataset& d = *res.dataset;
  Index best = 0;
  for (Index i = 0; i < cfg.n_init; ++i) {
    if (d.output(i)[0] < d.output(best)[0]) best = i;
  }
  const Vector x = d.input(best);
  const Vector expect = x - cfg.eta2 * x.cwiseSign();
  EXPECT_LT((res.trajectory[0].candidates[0] - expect).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Online, ExpandedPointsAreNotReselected) {
  // n_best = n_init: the first iteration expands every initial point, so the
  // second can only step from the points created in the first.
  QuadraticBlackBox box(2);
  auto cfg = small_config();
  cfg.gradient = GradientSource::exact;
  cfg.n_s = 0;
  cfg.n_init = 4;
  cfg.n_best = 4;
  cfg.tau = 2;
  const auto res = online_optimize<double>(box, output_component(0, Direction::minimize), cfg);
  ASSERT_TRUE(res.ok());
  const Dataset& d = *res.dataset;
  ASSERT_EQ(d.size(), 12);
  for (Index i = 8; i < 12; ++i) {
    double nearest = 1e300;
    for (Index j = 4; j < 8; ++j) nearest = std::min(nearest, (d.input(i) - d.input(j)).norm());
    EXPECT_LT(nearest, 0.2);  // a second Adam step moves each coordinate by about eta2
  }
}

TEST(Online, AbortReportsIteration) {
  Fragile box(25);
  auto cfg = small_config();
  cfg.gradient = GradientSource::exact;
  const auto res = online_optimize<double>(box, output_component(0, Direction::minimize), cfg);
  EXPECT_FALSE(res.ok());
  EXPECT_NE(res.status.find("aborted at iteration 2"), std::string::npos) << res.status;
  EXPECT_EQ(res.trajectory.size(), 1u);
}

TEST(RandomSearch, MatchesOnlineBudget) {
  QuadraticBlackBox box(3);
  auto cfg = small_config();
  const auto res = random_search_baseline(box, output_component(0, Direction::minimize), cfg);
  EXPECT_EQ(res.total_queries, std::uint64_t(cfg.n_init + cfg.tau * (cfg.n_s + cfg.n_best)));
  EXPECT_EQ(res.trajectory.size(), std::size_t(cfg.tau));
}

TEST(Artifacts, TrajectoryCsv) {
  QuadraticBlackBox box(2);
  auto cfg = small_config();
  cfg.tau = 3;
  const auto res =
      offline_optimize(exact_gradient(box), box, output_component(0, Direction::minimize), Vector::Ones(2), cfg,
                       std::numeric_limits<double>::quiet_NaN());
  std::ostringstream os;
  write_trajectory_csv(res.trajectory, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, kTrajectoryHeader);
  int rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_NE(line.find(",nan,"), std::string::npos);
  }
  EXPECT_EQ(rows, 3);
  const auto j = run_summary(res, cfg, "exact");
  EXPECT_EQ(j["total_queries"], 4);
  EXPECT_EQ(j["config"]["tau"], 3);
}
