#include "cmpc/nlp.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace cmpc;
using cmpc::testing::central_difference;
using cmpc::testing::relative_error;
using cmpc::testing::uniform_vector;

namespace {

// Three-link arm above a stiff floor at y = -1, target pressed 2 cm into it.
Plant arm_plant() {
  Plant p;
  p.robot = RobotModel::default_arm();
  p.gains = {Vec::Constant(2, 100.0), Vec::Constant(2, 20.0)};
  p.dt = 0.04;
  p.modes = {{0, "free", {}}, {1, "floor", {{Vec{{0.0, 1e4}}, Vec{{0.0, -1.0}}, Vec::Zero(2)}}}};
  return p;
}

NlpParams arm_params(int h) {
  NlpParams np;
  np.h = h;
  np.lo = Vec::Constant(2, -3.0);
  np.hi = Vec::Constant(2, 3.0);
  np.F_max = 25.0;
  return np;
}

JointState arm_start() { return {Vec{{1.0, -1.4, -1.0}}, Vec::Zero(3)}; }

// Two-link arm, two modes, short horizon.
Plant small_plant() {
  Plant p;
  p.robot = RobotModel::planar_arm(Vec{{0.8, 0.6}}, Vec{{1.0, 0.7}}, Vec{{0.3, 0.2}}, Vec{{0.0, -9.81}});
  p.gains = {Vec{{80.0, 120.0}}, Vec{{15.0, 20.0}}};
  p.dt = 0.05;
  p.modes = {{0, "free", {}}, {1, "wall", {{Vec{{2e3, 500.0}}, Vec{{1.0, 0.2}}, Vec::Zero(2)}}}};
  return p;
}

CostParams small_cost() {
  CostParams c = CostParams::uniform(Vec{{0.9, 0.4}}, 2, 50.0, 0.05, 0.2);
  c.Q_x(0, 1) = c.Q_x(1, 0) = 10.0;
  c.x_d[1] = Vec{{1.1, 0.1}};
  c.track[1] = Vec{{1.0, 0.0}};
  return c;
}

Mat stacked_states(const std::vector<JointState>& xs) {
  Mat out(xs.front().q.size() * 2, static_cast<Eigen::Index>(xs.size()));
  for (std::size_t k = 0; k < xs.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = xs[k].stacked();
  return out;
}

// Least-squares problem min 0.5 |A x - b|^2 with a loose box, for the generic solver.
struct LeastSquares {
  Mat A;
  Vec b;
  double bound = 100.0;
  int n_vars() const { return static_cast<int>(A.cols()); }
  int n_ineq() const { return 2 * n_vars(); }
  int n_eq() const { return 0; }
  double evaluate_objective(const Vec& x) { return 0.5 * (A * x - b).squaredNorm(); }
  void evaluate_constraints(const Vec& x, Vec& g, Vec& c) {
    g.resize(n_ineq());
    g << (x.array() + bound).matrix(), (bound - x.array()).matrix();
    c.resize(0);
  }
  void evaluate(const Vec& x, NlpEval& e) {
    e.f = evaluate_objective(x);
    e.grad = A.transpose() * (A * x - b);
    evaluate_constraints(x, e.g, e.c);
    std::vector<Eigen::Triplet<double>> t;
    for (int i = 0; i < n_vars(); ++i) {
      t.emplace_back(i, i, 1.0);
      t.emplace_back(n_vars() + i, i, -1.0);
    }
    e.Jg.resize(n_ineq(), n_vars());
    e.Jg.setFromTriplets(t.begin(), t.end());
    e.Jc.resize(0, n_vars());
  }
  void hessian(const Vec&, const Vec&, Mat& H) { H = A.transpose() * A; }
};

}  // namespace

TEST(NlpCensus, PivotSizedProblem) {
  const NlpCensus c = nlp_census(13, 3, 3, 2, 1e-6, true);
  EXPECT_EQ(c.n_vars, 2 * 13 + 3 * 6 * 13);
  EXPECT_EQ(c.n_vars, 260);
  EXPECT_EQ(c.n_ineq, 3 * 13 * (4 * 3 + 1) + 2 * 2 * 13);
  EXPECT_EQ(c.n_ineq, 559);
  EXPECT_EQ(c.n_eq, 0);
  const NlpCensus e = nlp_census(13, 3, 3, 2, 0.0, true);
  EXPECT_EQ(e.n_ineq, 3 * 13 + 52);
  EXPECT_EQ(e.n_eq, 3 * 13 * 6);
}

TEST(NlpCensus, BuiltProblemMatchesCensus) {
  Plant p = arm_plant();
  p.modes.push_back({2, "wall", {{Vec{{1e4, 0.0}}, Vec{{2.0, 0.0}}, Vec::Zero(2)}}});
  CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 3, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  NlpProblem pr = build_nlp(Vec{{0.2, 0.5, 0.3}}, {s, s, s}, nullptr, arm_params(13), cost, p);
  EXPECT_EQ(pr.n_vars(), 260);
  EXPECT_EQ(pr.n_ineq(), 559);
  NlpEval e;
  pr.evaluate(pr.initial_point(), e);
  EXPECT_EQ(e.g.size(), 559);
  EXPECT_EQ(e.Jg.rows(), 559);
  EXPECT_EQ(e.Jg.cols(), 260);
  EXPECT_EQ(e.grad.size(), 260);
}

TEST(BuildNlp, DropsUnlikelyModesAndRenormalizes) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  NlpProblem pr = build_nlp(Vec{{0.9995, 0.0005}}, {s, s}, nullptr, arm_params(5), cost, p);
  ASSERT_EQ(pr.modes().size(), 1u);
  EXPECT_EQ(pr.modes()[0], 0);
  EXPECT_DOUBLE_EQ(pr.weights()[0], 1.0);
  NlpProblem both = build_nlp(Vec{{0.6, 0.4}}, {s, s}, nullptr, arm_params(5), cost, p);
  EXPECT_EQ(both.modes().size(), 2u);
  EXPECT_NEAR(both.weights().sum(), 1.0, 1e-15);
}

TEST(BuildNlp, RejectsEmptyActiveSetAndBadBelief) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  NlpParams np = arm_params(5);
  np.p_min = 0.6;
  EXPECT_THROW(build_nlp(Vec{{0.5, 0.5}}, {s, s}, nullptr, np, cost, p), std::invalid_argument);
  EXPECT_THROW(build_nlp(Vec{{0.5, 0.6}}, {s, s}, nullptr, arm_params(5), cost, p), std::invalid_argument);
  EXPECT_THROW(build_nlp(Vec{{1.0}}, {s}, nullptr, arm_params(5), cost, p), std::invalid_argument);
}

TEST(BuildNlp, ZeroVelocityHoldWithoutGuess) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s{Vec{{1.0, -1.4, -1.0}}, Vec{{0.3, -0.2, 0.1}}};
  NlpProblem pr = build_nlp(Vec{{1.0, 0.0}}, {s, s}, nullptr, arm_params(4), cost, p);
  const Vec x = pr.initial_point();
  const Vec hold = forward_kinematics(s.q, p.robot).x;
  for (int t = 0; t < 4; ++t) EXPECT_TRUE(pr.actions(x).col(t).isApprox(hold));
  const auto xs = pr.states(x, 0);
  EXPECT_TRUE(xs[0].qd.isApprox(s.qd));
  for (int k = 1; k <= 4; ++k) {
    EXPECT_TRUE(xs[k].q.isApprox(s.q));
    EXPECT_TRUE(xs[k].qd.isZero());
  }
}

TEST(BuildNlp, CemWarmstartIsInjectedExactly) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  CemParams cp;
  cp.n_samples = 16;
  cp.elite = 4;
  cp.n_iter = 2;
  cp.lo = Vec::Constant(2, -3.0);
  cp.hi = Vec::Constant(2, 3.0);
  const int h = 6;
  std::mt19937_64 rng(3);
  const Vec hold = forward_kinematics(s.q, p.robot).x;
  const CemResult cem =
      icem_plan({{s, 0.5, 0}, {s, 0.5, 1}}, hold.replicate(1, h), cp, cost, p, {s, s}, rng);
  const NlpGuess guess = NlpGuess::from_cem(cem);
  NlpProblem pr = build_nlp(Vec{{0.5, 0.5}}, {s, s}, &guess, arm_params(h), cost, p);
  const Vec x = pr.initial_point();
  EXPECT_EQ(pr.actions(x), cem.best_actions);
  for (int a = 0; a < 2; ++a) {
    EXPECT_EQ(stacked_states(pr.states(x, a)), stacked_states(cem.mode_rollouts[a].states));
  }
}

TEST(BuildNlp, MissingGuessStatesAreRolledOut) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  const int h = 4;
  NlpGuess guess;
  guess.actions = forward_kinematics(s.q, p.robot).x.replicate(1, h);
  guess.actions.row(1).array() -= 0.1;
  NlpProblem pr = build_nlp(Vec{{0.0, 1.0}}, {s, s}, &guess, arm_params(h), cost, p);
  const auto roll = rollout_cost(s, 1, guess.actions, cost, p).states;
  EXPECT_EQ(stacked_states(pr.states(pr.initial_point(), 0)), stacked_states(roll));
}

TEST(NlpObjective, SingleModeIsPlainStageCostSum) {
  const Plant p = small_plant();
  const CostParams cost = small_cost();
  std::mt19937_64 rng(4);
  const JointState s{uniform_vector(rng, 2, -1, 1), uniform_vector(rng, 2, -1, 1)};
  NlpParams np = arm_params(3);
  NlpProblem pr = build_nlp(Vec{{0.0, 1.0}}, {s, s}, nullptr, np, cost, p);
  const Vec x = uniform_vector(rng, pr.n_vars(), -1, 1);
  double expect = 0.0;
  for (int t = 0; t < 3; ++t) expect += stage_cost(pr.state(x, 0, t), pr.actions(x).col(t), 1, cost, p.robot);
  EXPECT_NEAR(pr.evaluate_objective(x), expect, 1e-12 * (1.0 + expect));
  NlpEval e;
  pr.evaluate(x, e);
  EXPECT_NEAR(e.f, expect, 1e-10 * (1.0 + expect));
}

TEST(NlpObjective, BeliefWeightingIsLinear) {
  const Plant p = small_plant();
  const CostParams cost = small_cost();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const JointState s0{uniform_vector(rng, 2, -1, 1), uniform_vector(rng, 2, -1, 1)};
    const JointState s1{uniform_vector(rng, 2, -1, 1), uniform_vector(rng, 2, -1, 1)};
    const double w = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
    const NlpParams np = arm_params(3);
    NlpProblem mixed = build_nlp(Vec{{w, 1.0 - w}}, {s0, s1}, nullptr, np, cost, p);
    NlpProblem only0 = build_nlp(Vec{{1.0, 0.0}}, {s0, s1}, nullptr, np, cost, p);
    NlpProblem only1 = build_nlp(Vec{{0.0, 1.0}}, {s0, s1}, nullptr, np, cost, p);
    const Vec x = uniform_vector(rng, mixed.n_vars(), -1, 1);
    const Mat u = mixed.actions(x);
    const Vec x0 = only0.pack(u, {mixed.states(x, 0)});
    const Vec x1 = only1.pack(u, {mixed.states(x, 1)});
    const double lhs = mixed.evaluate_objective(x);
    const double rhs = w * only0.evaluate_objective(x0) + (1.0 - w) * only1.evaluate_objective(x1);
    EXPECT_NEAR(lhs, rhs, 1e-12 * (1.0 + std::abs(rhs)));
  }
}

TEST(NlpDerivatives, GradientAndJacobianMatchFiniteDifferences) {
  const Plant p = small_plant();
  const CostParams cost = small_cost();
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const JointState s0{uniform_vector(rng, 2, -1, 1), uniform_vector(rng, 2, -1, 1)};
    const JointState s1{uniform_vector(rng, 2, -1, 1), uniform_vector(rng, 2, -1, 1)};
    const double w = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
    NlpParams np = arm_params(3);
    np.rho = trial % 2 == 0 ? 1e-6 : 0.0;
    NlpProblem pr = build_nlp(Vec{{w, 1.0 - w}}, {s0, s1}, nullptr, np, cost, p);
    const Vec x = uniform_vector(rng, pr.n_vars(), -1, 1);
    NlpEval e;
    pr.evaluate(x, e);
    const Mat g_fd = central_difference([&](const Vec& v) { return Vec::Constant(1, pr.evaluate_objective(v)); }, x);
    EXPECT_LE(relative_error(e.grad.transpose(), g_fd), 1e-4) << "trial " << trial;
    const Mat Jg_fd = central_difference(
        [&](const Vec& v) {
          Vec g, c;
          pr.evaluate_constraints(v, g, c);
          return g;
        },
        x);
    EXPECT_LE(relative_error(Mat(e.Jg), Jg_fd), 1e-5) << "trial " << trial;
    if (pr.n_eq() > 0) {
      const Mat Jc_fd = central_difference(
          [&](const Vec& v) {
            Vec g, c;
            pr.evaluate_constraints(v, g, c);
            return c;
          },
          x);
      EXPECT_LE(relative_error(Mat(e.Jc), Jc_fd), 1e-5) << "trial " << trial;
    }
  }
}

TEST(NlpDerivatives, HessianModelIsGaussNewtonOfResiduals) {
  // With no force rows the model is 2 sum_a p_a J_r^T J_r, which is PSD and
  // reproduces the exact gradient along any direction through H * 0.
  const Plant p = small_plant();
  const CostParams cost = small_cost();
  std::mt19937_64 rng(7);
  const JointState s{uniform_vector(rng, 2, -1, 1), uniform_vector(rng, 2, -1, 1)};
  NlpParams np = arm_params(3);
  np.force_limit = false;
  NlpProblem pr = build_nlp(Vec{{0.3, 0.7}}, {s, s}, nullptr, np, cost, p);
  const Vec x = uniform_vector(rng, pr.n_vars(), -1, 1);
  Mat H;
  pr.hessian(x, Vec::Zero(pr.n_ineq()), H);
  EXPECT_LE((H - H.transpose()).norm(), 1e-10 * H.norm());
  EXPECT_GE(Eigen::SelfAdjointEigenSolver<Mat>(H).eigenvalues().minCoeff(), -1e-9 * H.norm());
}

TEST(InteriorPoint, UnconstrainedLeastSquaresMatchesNormalEquations) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  LeastSquares ls;
  ls.A = Mat(12, 6);
  ls.b = Vec(12);
  for (Eigen::Index i = 0; i < ls.A.size(); ++i) ls.A.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < ls.b.size(); ++i) ls.b[i] = normal(rng);
  const Vec expect = (ls.A.transpose() * ls.A).ldlt().solve(ls.A.transpose() * ls.b);
  IpPoint start;
  start.x = Vec::Zero(6);
  const IpResult r = interior_point(ls, start);
  EXPECT_EQ(r.status, SolveStatus::kConverged);
  EXPECT_LE((r.point.x - expect).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(InteriorPoint, LinearMpcMatchesClosedFormKkt) {
  const auto r = cmpc::testing::linear_mpc_qp();
  ASSERT_EQ(r.status, SolveStatus::kConverged);
  EXPECT_LE(r.cost_error, 1e-8);
  EXPECT_LE(r.action_error, 1e-8);
  EXPECT_LE(r.state_error, 1e-8);
}

TEST(Solve, ForceLimitIsActiveAndRespected) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  for (const Vec& b : {Vec{{1.0, 0.0}}, Vec{{0.0, 1.0}}, Vec{{0.5, 0.5}}}) {
    NlpProblem pr = build_nlp(b, {s, s}, nullptr, arm_params(13), cost, p);
    const NlpSolution sol = solve(pr);
    ASSERT_EQ(sol.stats.status, SolveStatus::kConverged);
    double peak = 0.0;
    for (std::size_t a = 0; a < sol.modes.size(); ++a) {
      for (int t = 0; t < 13; ++t) {
        peak = std::max(peak, impedance_force_norm(sol.states[a][t].q, sol.actions.col(t), p.gains, p.robot));
      }
    }
    EXPECT_LE(peak, 25.0 + 1e-3);
    EXPECT_GE(peak, 25.0 - 1e-3);  // the limit binds
  }
}

TEST(Solve, ConvergedSolutionSatisfiesInvariants) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  const NlpParams np = arm_params(8);
  NlpProblem pr = build_nlp(Vec{{0.4, 0.6}}, {s, s}, nullptr, np, cost, p);
  IpOptions opts;
  const NlpSolution sol = solve(pr, opts);
  ASSERT_EQ(sol.stats.status, SolveStatus::kConverged);
  EXPECT_LE(sol.stats.kkt, opts.tol);
  EXPECT_LE(sol.stats.violation, opts.tol);
  for (std::size_t a = 0; a < sol.modes.size(); ++a) {
    for (int t = 0; t < np.h; ++t) {
      const JointState f =
          step(sol.states[a][t], p.modes[sol.modes[a]], sol.actions.col(t), p.dt, p.robot, p.gains);
      EXPECT_LE((sol.states[a][t + 1].stacked() - f.stacked()).cwiseAbs().maxCoeff(), np.rho + opts.tol);
      EXPECT_GE(force_constraint(sol.states[a][t].q, sol.actions.col(t), p.gains, np.F_max, p.robot),
                -opts.tol * np.F_max * np.F_max);
    }
  }
  for (int t = 0; t < np.h; ++t) {
    EXPECT_TRUE((sol.actions.col(t).array() >= np.lo.array()).all());
    EXPECT_TRUE((sol.actions.col(t).array() <= np.hi.array()).all());
  }
  for (const auto& it : sol.trace) EXPECT_LE(it.merit_after, it.merit_before);
}

TEST(Solve, EqualityContinuityAgreesWithRelaxedForm) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  NlpParams np = arm_params(8);
  NlpProblem relaxed = build_nlp(Vec{{0.0, 1.0}}, {s, s}, nullptr, np, cost, p);
  np.rho = 0.0;
  NlpProblem exact = build_nlp(Vec{{0.0, 1.0}}, {s, s}, nullptr, np, cost, p);
  const NlpSolution a = solve(relaxed);
  const NlpSolution b = solve(exact);
  ASSERT_EQ(a.stats.status, SolveStatus::kConverged);
  ASSERT_EQ(b.stats.status, SolveStatus::kConverged);
  EXPECT_LE((a.actions - b.actions).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_NEAR(a.stats.cost, b.stats.cost, 1e-3 * b.stats.cost);
}

TEST(Solve, WarmstartAtOptimumResolvesQuickly) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  NlpProblem pr = build_nlp(Vec{{0.5, 0.5}}, {s, s}, nullptr, arm_params(13), cost, p);
  const NlpSolution first = solve(pr);
  ASSERT_EQ(first.stats.status, SolveStatus::kConverged);
  const NlpSolution again = solve(pr, {}, &first.point);
  EXPECT_EQ(again.stats.status, SolveStatus::kConverged);
  EXPECT_LE(again.stats.iterations, 3);
  EXPECT_LE((again.actions - first.actions).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Solve, FailuresAreReportedNotThrown) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  NlpProblem pr = build_nlp(Vec{{1.0, 0.0}}, {s, s}, nullptr, arm_params(6), cost, p);
  IpOptions opts;
  opts.max_iter = 2;
  const NlpSolution capped = solve(pr, opts);
  EXPECT_EQ(capped.stats.status, SolveStatus::kMaxIter);
  EXPECT_EQ(capped.stats.iterations, 2);
  opts.max_iter = 200;
  opts.min_step = 2.0;  // no step can be accepted
  const NlpSolution stuck = solve(pr, opts);
  EXPECT_EQ(stuck.stats.status, SolveStatus::kLineSearchFailure);
  EXPECT_EQ(stuck.point.x, pr.initial_point());
}

TEST(Solve, TraceCsvHasOneRowPerIteration) {
  const Plant p = arm_plant();
  const CostParams cost = CostParams::uniform(Vec{{1.4, -1.02}}, 2, 100.0, 0.05, 0.1);
  const JointState s = arm_start();
  NlpProblem pr = build_nlp(Vec{{1.0, 0.0}}, {s, s}, nullptr, arm_params(5), cost, p);
  const NlpSolution sol = solve(pr);
  std::ostringstream os;
  write_solver_trace(os, sol.trace);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "# cmpc-solver-trace v1");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("iter,mu,kkt", 0), 0u);
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, sol.stats.iterations);
  EXPECT_EQ(static_cast<int>(sol.trace.size()), sol.stats.iterations);
}

TEST(ShiftSolution, AdvancesActionsAndStates) {
  NlpSolution sol;
  sol.actions = Mat{{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}};
  sol.modes = {1};
  sol.states.assign(1, std::vector<JointState>(4));
  for (int k = 0; k <= 3; ++k) sol.states[0][k] = {Vec::Constant(1, k), Vec::Constant(1, -k)};
  const NlpGuess g = shift_solution(sol, 2);
  EXPECT_EQ(g.actions, (Mat{{2.0, 3.0, 3.0}, {5.0, 6.0, 6.0}}));
  ASSERT_EQ(g.states.size(), 2u);
  EXPECT_TRUE(g.states[0].empty());
  ASSERT_EQ(g.states[1].size(), 4u);
  EXPECT_DOUBLE_EQ(g.states[1][0].q[0], 1.0);
  EXPECT_DOUBLE_EQ(g.states[1][3].q[0], 3.0);
}
