#include "cmpc/planner.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace cmpc;
using cmpc::testing::central_difference;
using cmpc::testing::uniform_vector;

namespace {

std::string scenario_path(const std::string& name) { return std::string(CMPC_SCENARIO_DIR) + "/" + name; }

// Planar point mass in free space tracking (0.3, 0.2).
Json point_mass_doc() {
  return Json::parse(R"({
    "name": "point",
    "robot": { "type": "point_mass", "dim": 2, "mass_kg": 1.0, "damping_Nspm": 0.5 },
    "impedance": { "stiffness_Npm": 100.0, "damping_Nspm": 20.0 },
    "modes": [ { "label": "free" } ],
    "initial_state": { "q_rad": [0.0, 0.0] },
    "episode": { "steps": 60, "dt_s": 0.04, "substeps": 1 },
    "transition_matrix": [[1.0]],
    "noise": { "process_std_q_rad": 1e-4, "process_std_qd_radps": 1e-3,
               "measurement_std_q_rad": 1e-5, "measurement_std_tau_Nm": 0.1,
               "simulate_measurement_noise": false },
    "estimator": { "particles": 10, "initial_std_q_rad": 1e-9, "initial_std_qd_radps": 1e-9 },
    "cost": { "Q_x": 100.0, "Q_u": 0.05, "Q_xd": 0.1, "targets": [ { "x_d_m": [0.3, 0.2] } ] },
    "constraints": { "F_max_N": 25.0, "u_min_m": -1.0, "u_max_m": 1.0 },
    "mpc": { "horizon": 10 },
    "cem": { "iterations": 0, "samples": 32, "elite": 5, "std_init_m": 0.1 }
  })");
}

Scenario point_mass(int cem_iters = 0) {
  Json doc = point_mass_doc();
  doc["cem"]["iterations"] = cem_iters;
  return parse_scenario(doc);
}

// Same plant with a second mode whose contact is never reached.
Scenario point_mass_with_unused_mode() {
  Json doc = point_mass_doc();
  doc["modes"].push_back(Json::parse(R"({ "label": "far", "contacts": [ { "stiffness_Npm": [0.0, 1e4],
      "rest_m": [0.0, -10.0] } ], "active_when": [ { "tcp_axis": 1, "max_m": -10.0 } ] })"));
  doc["transition_matrix"] = Json::parse("[[1.0, 0.0], [0.0, 1.0]]");
  doc["cost"]["targets"].push_back(doc["cost"]["targets"][0]);
  return parse_scenario(doc);
}

Vec measure(const JointState& xi, const Scenario& sc) {
  return observe(xi, sc.modes[static_cast<std::size_t>(sc.true_mode(xi))], sc.robot);
}

}  // namespace

TEST(TrueStep, AboveSurfaceIsFreeSpaceDynamics) {
  const Scenario sc = load_scenario(scenario_path("vertical.json"));
  const JointState xi = sc.initial;
  const Vec u = forward_kinematics(xi.q, sc.robot).x + Vec{{0.01, 0.02}};
  const TrueStep out = true_step(xi, u, sc, nullptr);
  JointState expect = xi;
  for (int k = 0; k < sc.substeps; ++k) expect = step(expect, sc.modes[0], u, sc.dt / sc.substeps, sc.robot, sc.gains);
  EXPECT_EQ(out.mode, 0);
  EXPECT_EQ(out.xi.stacked(), expect.stacked());
  EXPECT_EQ(out.y.tail(sc.robot.n), Vec::Zero(sc.robot.n));
}

TEST(TrueStep, BelowSurfaceMeasuresContactTorque) {
  const Scenario sc = load_scenario(scenario_path("vertical.json"));
  JointState xi = sc.initial;
  const Vec u = forward_kinematics(xi.q, sc.robot).x + Vec{{0.0, -0.2}};
  TrueStep out{xi, 0, Vec()};
  for (int t = 0; t < 40 && out.mode == 0; ++t) out = true_step(out.xi, u, sc, nullptr);
  ASSERT_EQ(out.mode, 1);

  // Predicate and contact torque recomputed from scratch: the table pushes up
  // with K (0.02 - y), mapped through a finite-difference TCP Jacobian.
  const Vec x = forward_kinematics(out.xi.q, sc.robot).x;
  ASSERT_LE(x[1], 0.02);
  const Mat J = central_difference([&](const Vec& q) { return forward_kinematics(q, sc.robot).x; }, out.xi.q);
  const Vec F{{0.0, 1e4 * (0.02 - x[1])}};
  const Vec tau = J.transpose() * F;
  EXPECT_GT(tau.norm(), 0.0);
  EXPECT_LE((out.y.tail(sc.robot.n) - tau).norm(), 1e-6 * std::max(1.0, tau.norm()));
  EXPECT_EQ(out.y.head(sc.robot.n), out.xi.q);
}

TEST(TrueStep, ModeIsReevaluatedEverySubstep) {
  Scenario sc = load_scenario(scenario_path("vertical.json"));
  sc.substeps = 1;
  const Vec u = forward_kinematics(sc.initial.q, sc.robot).x + Vec{{0.0, -0.2}};
  Scenario fine = sc;
  fine.substeps = 5;
  fine.dt = sc.dt * 5;
  JointState a = sc.initial, b = sc.initial;
  for (int k = 0; k < 40; ++k) {
    for (int j = 0; j < 5; ++j) a = true_step(a, u, sc, nullptr).xi;
    b = true_step(b, u, fine, nullptr).xi;
  }
  EXPECT_LE((a.stacked() - b.stacked()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TrueStep, NoiselessRunIsDeterministic) {
  const Scenario sc = load_scenario(scenario_path("vertical.json"));
  const Vec u = forward_kinematics(sc.initial.q, sc.robot).x + Vec{{0.0, -0.2}};
  JointState a = sc.initial, b = sc.initial;
  for (int k = 0; k < 20; ++k) {
    a = true_step(a, u, sc, nullptr).xi;
    b = true_step(b, u, sc, nullptr).xi;
  }
  EXPECT_EQ(a.stacked(), b.stacked());
}

TEST(SafeAction, AlwaysInBoxAndWithinForceLimit) {
  const Scenario sc = load_scenario(scenario_path("pivot.json"));
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const Vec x = uniform_vector(rng, 2, -2.5, 2.5);
    const Vec u = uniform_vector(rng, 2, -6.0, 6.0);
    const Vec s = safe_action(u, x, sc.gains, sc.nlp);
    EXPECT_TRUE((s.array() >= sc.nlp.lo.array()).all() && (s.array() <= sc.nlp.hi.array()).all());
    EXPECT_LE(sc.gains.stiffness.cwiseProduct(x - s).norm(), sc.nlp.F_max);
    EXPECT_EQ(safe_action(s, x, sc.gains, sc.nlp), s);
  }
}

TEST(SafeAction, FeasibleActionIsUntouched) {
  const Scenario sc = load_scenario(scenario_path("pivot.json"));
  const Vec x{{0.5, 0.1}};
  const Vec u{{0.6, 0.05}};
  EXPECT_EQ(safe_action(u, x, sc.gains, sc.nlp), u);
}

TEST(PlanStep, StaticWorldResolvesInThreeIterations) {
  Scenario sc = point_mass();
  sc.initial.q = Vec{{0.3, 0.2}};
  PlannerState ps = init_planner(sc, 3);
  JointState xi = sc.initial;
  PlanResult first = plan_step(ps, measure(xi, sc), sc, {});
  ASSERT_EQ(first.diag.status, SolveStatus::kConverged);
  for (int t = 0; t < 5; ++t) {
    const Mat plan = ps.previous->actions;
    xi = true_step(xi, first.u, sc, nullptr).xi;
    const PlanResult next = plan_step(ps, measure(xi, sc), sc, {});
    EXPECT_EQ(next.diag.status, SolveStatus::kConverged);
    EXPECT_LE(next.diag.mpc_iterations, 3) << "step " << t;
    EXPECT_LE((next.u - plan.col(1)).cwiseAbs().maxCoeff(), 1e-6);
    first = next;
  }
}

TEST(PlanStep, SingleModeBeliefReducesToSingleModePipeline) {
  const Scenario one = [] {
    Scenario s = point_mass(3);
    s.transition = Mat::Identity(1, 1);
    return s;
  }();
  const Scenario two = [] {
    Scenario s = point_mass_with_unused_mode();
    s.cem.n_iter = 3;
    return s;
  }();
  PlannerState a = init_planner(one, 5), b = init_planner(two, 5);
  JointState xi = one.initial;
  for (int t = 0; t < 4; ++t) {
    const Vec y = measure(xi, one);
    const PlanResult ra = plan_step(a, y, one, {});
    const PlanResult rb = plan_step(b, y, two, {});
    EXPECT_EQ(rb.diag.belief[1], 0.0);
    EXPECT_EQ(ra.u, rb.u) << "step " << t;
    EXPECT_EQ(ra.diag.mpc_iterations, rb.diag.mpc_iterations);
    xi = true_step(xi, ra.u, one, nullptr).xi;
  }
}

TEST(PlanStep, RecedingHorizonShiftKeepsPredictedCost) {
  // Noiseless and correctly modeled: the simulator integrates with the
  // planner's step, so the shifted plan stays feasible and the re-solve can
  // only improve on it.
  Scenario sc = point_mass();
  PlannerState ps = init_planner(sc, 8);
  const Plant plant = sc.planner_plant();
  JointState xi = sc.initial;
  PlanResult prev = plan_step(ps, measure(xi, sc), sc, {});
  for (int t = 0; t < 20; ++t) {
    ASSERT_EQ(prev.diag.status, SolveStatus::kConverged) << "step " << t;
    const NlpSolution plan = *ps.previous;
    const double l0 = stage_cost(plan.states[0][0], plan.actions.col(0), 0, sc.cost, sc.robot);
    xi = true_step(xi, prev.u, sc, nullptr).xi;
    const Mat tail = shift_plan(plan.actions);
    const double shifted = rollout_cost(xi, 0, tail, sc.cost, plant).cost;
    const int h = sc.nlp.h;
    const double predicted =
        prev.diag.plan_cost - l0 + stage_cost(plan.states[0][h], tail.col(h - 1), 0, sc.cost, sc.robot);
    const PlanResult next = plan_step(ps, measure(xi, sc), sc, {});
    EXPECT_NEAR(shifted, predicted, 1e-4 * std::max(1.0, predicted)) << "step " << t;
    EXPECT_LE(next.diag.plan_cost, shifted + 1e-6 * std::max(1.0, shifted)) << "step " << t;
    prev = next;
  }
}

TEST(PlanStep, FallbackAppliesSafeCemIncumbent) {
  Scenario sc = load_scenario(scenario_path("vertical.json"));
  sc.ip.max_iter = 1;
  sc.cem.n_samples = 32;
  sc.cem.n_iter = 2;
  PlannerState ps = init_planner(sc, 2);
  const Vec y = observe(sc.initial, sc.modes[0], sc.robot);
  const Vec x_meas = forward_kinematics(Vec(y.head(sc.robot.n)), sc.robot).x;
  const PlanResult r = plan_step(ps, y, sc, {});
  EXPECT_TRUE(r.diag.fallback);
  EXPECT_NE(r.diag.status, SolveStatus::kConverged);
  EXPECT_GT(r.diag.cem_time, 0.0);
  EXPECT_TRUE((r.u.array() >= sc.nlp.lo.array()).all() && (r.u.array() <= sc.nlp.hi.array()).all());
  EXPECT_LE(sc.gains.stiffness.cwiseProduct(x_meas - r.u).norm(), sc.nlp.F_max);
  ASSERT_TRUE(ps.previous.has_value());
  EXPECT_EQ(ps.previous->actions.cols(), sc.nlp.h);
}

TEST(PlanStep, FallbackWithoutCemHoldsMeasuredPose) {
  Scenario sc = load_scenario(scenario_path("vertical.json"));
  sc.ip.max_iter = 1;
  PlannerState ps = init_planner(sc, 2);
  const Vec y = observe(sc.initial, sc.modes[0], sc.robot);
  PlannerConfig cfg;
  cfg.use_cem = false;
  const PlanResult r = plan_step(ps, y, sc, cfg);
  EXPECT_TRUE(r.diag.fallback);
  EXPECT_LE((r.u - forward_kinematics(Vec(y.head(sc.robot.n)), sc.robot).x).norm(), 1e-12);
}

TEST(PlanStep, GroundTruthPredicateNeverReachesThePlanner) {
  const Scenario sc = load_scenario(scenario_path("vertical.json"));
  Scenario other = sc;
  for (auto& r : other.rules[1]) r.max_m = -5.0;
  PlannerState a = init_planner(sc, 9), b = init_planner(other, 9);
  JointState xi = sc.initial;
  for (int t = 0; t < 3; ++t) {
    const Vec y = measure(xi, sc);
    const PlanResult ra = plan_step(a, y, sc, {});
    const PlanResult rb = plan_step(b, y, other, {});
    EXPECT_EQ(ra.u, rb.u);
    xi = true_step(xi, ra.u, sc, nullptr).xi;
  }
}

TEST(PlanStep, DiagnosticsSeparateCemAndMpcTime) {
  const Scenario sc = load_scenario(scenario_path("vertical.json"));
  PlannerState ps = init_planner(sc, 1);
  const PlanResult r = plan_step(ps, measure(sc.initial, sc), sc, {});
  EXPECT_GT(r.diag.cem_time, 0.0);
  EXPECT_GT(r.diag.mpc_time, 0.0);
  EXPECT_GT(r.diag.cem_wall, 0.0);
  EXPECT_GT(r.diag.mpc_wall, 0.0);
  PlannerState ps2 = init_planner(sc, 1);
  PlannerConfig no_cem;
  no_cem.use_cem = false;
  const PlanResult r2 = plan_step(ps2, measure(sc.initial, sc), sc, no_cem);
  EXPECT_EQ(r2.diag.cem_time, 0.0);
  EXPECT_GT(r2.diag.mpc_time, 0.0);
}

TEST(Episode, FreeSpaceTracksTarget) {
  const Scenario sc = point_mass(2);
  const EpisodeLog log = simulate_episode(sc, {}, 1);
  ASSERT_EQ(static_cast<int>(log.rows.size()), sc.steps);
  EXPECT_EQ(log.fallbacks(), 0);
  for (std::size_t k = log.rows.size() - 10; k < log.rows.size(); ++k)
    EXPECT_LE((log.rows[k].tcp - sc.cost.x_d[0]).norm(), 1e-2) << "step " << k;
  EXPECT_LE(log.max_impedance_force(), sc.nlp.F_max + 1e-3);
}

TEST(Episode, VerticalApproachDetectsContact) {
  const Scenario sc = load_scenario(scenario_path("vertical.json"));
  const EpisodeLog log = simulate_episode(sc, {}, 100);
  EXPECT_EQ(first_visit_order(log), (std::vector<int>{0, 1}));
  const int delay = detection_delay(log, 1);
  EXPECT_GE(delay, 0);
  EXPECT_LE(delay, 3);
  EXPECT_LE(log.max_impedance_force(), sc.nlp.F_max + 1e-3);
}

TEST(Episode, CsvIsDeterministicPerSeed) {
  Scenario sc = load_scenario(scenario_path("vertical.json"));
  sc.steps = 3;
  auto csv = [&](std::uint64_t seed) {
    std::ostringstream os;
    write_episode_csv(os, simulate_episode(sc, {}, seed));
    return os.str();
  };
  const std::string a = csv(4), b = csv(4), c = csv(5);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);

  std::istringstream in(a);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "# cmpc-episode v1");
  std::getline(in, line);
  const auto columns = std::count(line.begin(), line.end(), ',') + 1;
  // step, mode, 2 beliefs, map, 3 q, 3 qd, 2 tcp, 6 y, 2 u, force, 2 contact, 7 diagnostics
  EXPECT_EQ(columns, 31);
  int rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ',') + 1, columns);
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}

TEST(Helpers, DetectionDelayAndVisitOrder) {
  EpisodeLog log;
  log.n_modes = 2;
  const std::vector<int> truth{0, 0, 1, 1, 0, 1};
  const std::vector<int> map{0, 0, 0, 1, 1, 1};
  for (std::size_t k = 0; k < truth.size(); ++k) {
    EpisodeRow r;
    r.step = static_cast<int>(k);
    r.true_mode = truth[k];
    r.diag.belief = map[k] == 0 ? Vec{{0.9, 0.1}} : Vec{{0.2, 0.8}};
    log.rows.push_back(r);
  }
  EXPECT_EQ(detection_delay(log, 1), 1);
  EXPECT_EQ(detection_delay(log, 0), 0);
  EXPECT_EQ(first_visit_order(log), (std::vector<int>{0, 1}));
  log.rows.resize(2);
  EXPECT_EQ(detection_delay(log, 1), -1);
}
