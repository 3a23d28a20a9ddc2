#pragma once

// Closed loop: ground-truth hybrid simulator, hybrid particle filter, iCEM
// warm start, belief-weighted MPC and receding-horizon execution.

#include "cmpc/scenario.hpp"

#include <algorithm>
#include <chrono>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace cmpc {

struct TrueStep {
  JointState xi;
  int mode = 0;
  Vec y;
};

// Advances the ground truth by one control period with `substeps` integrator
// steps; the contact mode is re-evaluated from the TCP before every substep.
// Measurement noise is drawn from `rng` when given and enabled.
inline TrueStep true_step(const JointState& xi, const Vec& u, const Scenario& sc, std::mt19937_64* rng) {
  const double h = sc.dt / sc.substeps;
  TrueStep out{xi, 0, Vec()};
  for (int k = 0; k < sc.substeps; ++k) {
    const int z = sc.true_mode(out.xi);
    out.xi = step(out.xi, sc.modes[z], u, h, sc.robot, sc.gains);
  }
  out.mode = sc.true_mode(out.xi);
  const NoiseModel nm = sc.measurement_model();
  const bool noisy = rng != nullptr && sc.measurement_noise;
  out.y = observe(out.xi, sc.modes[out.mode], sc.robot, noisy ? &nm : nullptr, noisy ? rng : nullptr);
  return out;
}

// Clips u to the action box, then pulls it toward the measured TCP until the
// impedance force limit holds.
inline Vec safe_action(Vec u, const Vec& x_meas, const ImpedanceGains& gains, const NlpParams& p) {
  u = u.cwiseMax(p.lo).cwiseMin(p.hi);
  if (!p.force_limit) return u;
  const double F = gains.stiffness.cwiseProduct(x_meas - u).norm();
  if (F > p.F_max) {
    u = x_meas + (u - x_meas) * (p.F_max * (1.0 - 1e-9) / F);
    u = u.cwiseMax(p.lo).cwiseMin(p.hi);
  }
  return u;
}

struct PlannerConfig {
  bool use_cem = true;
  int workers = 1;  // CEM rollout threads
};

struct PlanDiagnostics {
  Vec belief;
  double cem_time = 0.0;  // work-clock seconds
  double mpc_time = 0.0;
  double cem_wall = 0.0;  // measured seconds
  double mpc_wall = 0.0;
  int mpc_iterations = 0;
  SolveStatus status = SolveStatus::kConverged;
  bool fallback = false;
  double plan_cost = 0.0;
};

struct PlannerState {
  HybridBelief belief;
  std::optional<NlpSolution> previous;
  std::optional<Vec> u_prev;
  std::mt19937_64 pf_rng;
  std::mt19937_64 cem_rng;
};

inline PlannerState init_planner(const Scenario& sc, std::uint64_t seed) {
  PlannerState ps;
  const Mat Sigma0 = sc.initial_std.cwiseAbs2().asDiagonal();
  ps.belief = initial_belief(sc.particles, sc.initial.stacked(), Sigma0, sc.prior);
  ps.pf_rng.seed(derive_seed(seed, 1));
  ps.cem_rng.seed(derive_seed(seed, 2));
  return ps;
}

struct PlanResult {
  Vec u;
  PlanDiagnostics diag;
};

// One receding-horizon step from measurement y. Only y and the filter reach
// the planner; the true mode never does.
inline PlanResult plan_step(PlannerState& ps, const Vec& y, const Scenario& sc, const PlannerConfig& cfg) {
  const Plant plant = sc.planner_plant();
  const int n = sc.robot.n;
  const int M = sc.n_modes();
  const int h = sc.nlp.h;

  if (ps.u_prev) ps.belief = pf_step(ps.belief, sc.transition, *ps.u_prev, y, sc.filter_model(), ps.pf_rng);
  PlanDiagnostics diag;
  diag.belief = ps.belief.mode_belief;

  std::vector<JointState> xi0(M);
  for (int z = 0; z < M; ++z) xi0[z] = JointState::from_stacked(mode_conditioned_state(ps.belief, z).mean);
  const Vec x_meas = forward_kinematics(Vec(y.head(n)), sc.robot).x;

  std::optional<NlpGuess> shifted;
  if (ps.previous) shifted = shift_solution(*ps.previous, M);
  const Mat warm_mean = shifted ? shifted->actions : Mat(x_meas.replicate(1, h));

  std::optional<CemResult> cem;
  if (cfg.use_cem && sc.cem.n_iter > 0) {
    std::vector<PlannerParticle> particles;
    particles.reserve(ps.belief.particles.size());
    for (const auto& p : ps.belief.particles)
      particles.push_back({JointState::from_stacked(p.mu), p.weight, p.sampled_mode < 0 ? 0 : p.sampled_mode});
    CemParams cp = sc.cem;
    cp.workers = cfg.workers;
    const auto t0 = std::chrono::steady_clock::now();
    cem = icem_plan(particles, warm_mean, cp, sc.cost, plant, xi0, ps.cem_rng);
    diag.cem_wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    diag.cem_time = sc.clock.cem_seconds(*cem);
  }

  std::optional<NlpGuess> guess;
  if (cem) guess = NlpGuess::from_cem(*cem);
  else if (shifted) guess = shifted;
  NlpProblem problem = build_nlp(diag.belief, xi0, guess ? &*guess : nullptr, sc.nlp, sc.cost, plant);
  // Without a CEM guess, a converged previous solution over the same modes
  // also hands over its shifted slacks and multipliers.
  std::optional<IpPoint> warm;
  if (!cem && ps.previous && ps.previous->modes == problem.modes() &&
      ps.previous->point.x.size() == problem.n_vars() &&
      ps.previous->point.has_duals(problem.n_ineq(), problem.n_eq()))
    warm = problem.shifted_point(ps.previous->point);
  NlpSolution sol = solve(problem, sc.ip, warm ? &*warm : nullptr);
  diag.mpc_wall = sol.stats.wall_time;
  diag.mpc_time = sc.clock.mpc_seconds(sol.stats);
  diag.mpc_iterations = sol.stats.iterations;
  diag.status = sol.stats.status;
  diag.plan_cost = sol.stats.cost;

  Vec u;
  if (sol.stats.status == SolveStatus::kConverged) {
    u = sol.actions.col(0);
    ps.previous = std::move(sol);
  } else {
    diag.fallback = true;
    if (cem) u = cem->best_actions.col(0);
    else if (shifted) u = shifted->actions.col(0);
    else u = x_meas;
    // Keep the plan that produced u so the next shift continues from it.
    NlpSolution keep;
    keep.actions = cem ? cem->best_actions : (shifted ? shifted->actions : warm_mean);
    ps.previous = std::move(keep);
  }
  u = safe_action(u, x_meas, sc.gains, sc.nlp);
  ps.u_prev = u;
  return {u, diag};
}

struct EpisodeRow {
  int step = 0;
  int true_mode = 0;
  JointState xi;
  Vec y;
  Vec u;
  Vec tcp;
  double impedance_force = 0.0;  // |K_imp (x - u)| at the true state when u is applied
  Vec contact_force;             // sum of contact forces on the TCP
  double stage_cost = 0.0;       // realized, under the true mode
  PlanDiagnostics diag;
};

struct EpisodeLog {
  int n_modes = 0;
  int n = 0;
  int m = 0;
  std::vector<EpisodeRow> rows;

  int fallbacks() const {
    int k = 0;
    for (const auto& r : rows) k += r.diag.fallback ? 1 : 0;
    return k;
  }
  double max_impedance_force() const {
    double f = 0.0;
    for (const auto& r : rows) f = std::max(f, r.impedance_force);
    return f;
  }
  double total_cost() const {
    double c = 0.0;
    for (const auto& r : rows) c += r.stage_cost;
    return c;
  }
};

inline Vec total_contact_force(const JointState& xi, const ContactMode& mode, const RobotModel& robot) {
  Vec F = Vec::Zero(robot.m);
  for (const auto& cp : mode.contacts) F += contact_force(xi.q, cp, robot);
  return F;
}

inline EpisodeLog simulate_episode(const Scenario& sc, const PlannerConfig& cfg, std::uint64_t seed) {
  EpisodeLog log;
  log.n_modes = sc.n_modes();
  log.n = sc.robot.n;
  log.m = sc.robot.m;
  std::mt19937_64 sim_rng(derive_seed(seed, 0));
  PlannerState ps = init_planner(sc, seed);

  JointState xi = sc.initial;
  int mode = sc.true_mode(xi);
  const NoiseModel nm = sc.measurement_model();
  Vec y = observe(xi, sc.modes[mode], sc.robot, sc.measurement_noise ? &nm : nullptr,
                  sc.measurement_noise ? &sim_rng : nullptr);
  for (int t = 0; t < sc.steps; ++t) {
    PlanResult pr = plan_step(ps, y, sc, cfg);
    EpisodeRow row;
    row.step = t;
    row.true_mode = mode;
    row.xi = xi;
    row.y = y;
    row.u = pr.u;
    row.tcp = forward_kinematics(xi.q, sc.robot).x;
    row.impedance_force = sc.gains.stiffness.cwiseProduct(row.tcp - pr.u).norm();
    row.contact_force = total_contact_force(xi, sc.modes[mode], sc.robot);
    row.stage_cost = stage_cost(xi, pr.u, mode, sc.cost, sc.robot);
    row.diag = std::move(pr.diag);
    log.rows.push_back(std::move(row));

    TrueStep next = true_step(xi, pr.u, sc, &sim_rng);
    xi = next.xi;
    mode = next.mode;
    y = std::move(next.y);
  }
  return log;
}

// CSV with a versioned comment header; the column order is fixed.
inline void write_episode_csv(std::ostream& os, const EpisodeLog& log) {
  os << "# cmpc-episode v1\n";
  os << "step,true_mode";
  for (int z = 0; z < log.n_modes; ++z) os << ",belief_" << z;
  os << ",map_mode";
  for (int i = 0; i < log.n; ++i) os << ",q_" << i;
  for (int i = 0; i < log.n; ++i) os << ",qd_" << i;
  for (int i = 0; i < log.m; ++i) os << ",tcp_" << i;
  for (int i = 0; i < 2 * log.n; ++i) os << ",y_" << i;
  for (int i = 0; i < log.m; ++i) os << ",u_" << i;
  os << ",impedance_force_N";
  for (int i = 0; i < log.m; ++i) os << ",contact_force_" << i << "_N";
  os << ",cem_time_s,mpc_time_s,mpc_iterations,mpc_status,fallback,plan_cost,stage_cost\n";
  const auto old_precision = os.precision(17);
  for (const auto& r : log.rows) {
    Eigen::Index map = 0;
    r.diag.belief.maxCoeff(&map);
    os << r.step << ',' << r.true_mode;
    for (int z = 0; z < log.n_modes; ++z) os << ',' << r.diag.belief[z];
    os << ',' << map;
    for (int i = 0; i < log.n; ++i) os << ',' << r.xi.q[i];
    for (int i = 0; i < log.n; ++i) os << ',' << r.xi.qd[i];
    for (int i = 0; i < log.m; ++i) os << ',' << r.tcp[i];
    for (int i = 0; i < 2 * log.n; ++i) os << ',' << r.y[i];
    for (int i = 0; i < log.m; ++i) os << ',' << r.u[i];
    os << ',' << r.impedance_force;
    for (int i = 0; i < log.m; ++i) os << ',' << r.contact_force[i];
    os << ',' << r.diag.cem_time << ',' << r.diag.mpc_time << ',' << r.diag.mpc_iterations << ','
       << to_string(r.diag.status) << ',' << (r.diag.fallback ? 1 : 0) << ',' << r.diag.plan_cost << ','
       << r.stage_cost << '\n';
  }
  os.precision(old_precision);
}

// Steps from the first true switch into `mode` until the belief argmax first
// equals `mode` at or after it; -1 if either never happens.
inline int detection_delay(const EpisodeLog& log, int mode) {
  int switch_step = -1;
  for (const auto& r : log.rows) {
    if (r.true_mode == mode) {
      switch_step = r.step;
      break;
    }
  }
  if (switch_step < 0) return -1;
  for (const auto& r : log.rows) {
    if (r.step < switch_step) continue;
    Eigen::Index map = 0;
    r.diag.belief.maxCoeff(&map);
    if (map == mode) return r.step - switch_step;
  }
  return -1;
}

// Modes in the order they were first visited by the ground truth.
inline std::vector<int> first_visit_order(const EpisodeLog& log) {
  std::vector<int> order;
  for (const auto& r : log.rows) {
    if (std::find(order.begin(), order.end(), r.true_mode) == order.end()) order.push_back(r.true_mode);
  }
  return order;
}

}  // namespace cmpc
