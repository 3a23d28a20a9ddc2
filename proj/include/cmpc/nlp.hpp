#pragma once

// Belief-weighted multiple-shooting MPC problem and its interior-point solve.
//
// Decision vector: u_0..u_{h-1} (d each), then for every active mode a the
// states xi^a_1..xi^a_h (2n each). xi^a_0 is pinned to the mode-conditioned
// estimate. Inequality rows per (a, tau): rho - c, rho + c (c the continuity
// residual, 2n each) and the force limit; then u - lo, hi - u per tau. With
// rho = 0 the continuity rows become equalities.

#include "cmpc/cem.hpp"
#include "cmpc/cost.hpp"
#include "cmpc/interior_point.hpp"

#include <chrono>
#include <cmath>
#include <vector>

namespace cmpc {

struct NlpParams {
  int h = 13;
  double rho = 1e-6;
  Vec lo;  // action box
  Vec hi;
  double F_max = 25.0;
  bool force_limit = true;
  double p_min = 1e-3;

  void validate(int d) const {
    require(h >= 1, "nlp: horizon must be positive");
    require(rho >= 0.0, "nlp: rho must be non-negative");
    require(lo.size() == d && hi.size() == d && (lo.array() < hi.array()).all(),
            "nlp: action bounds must have d entries with lo < hi");
    require(!force_limit || F_max > 0.0, "nlp: F_max must be positive");
    require(p_min >= 0.0 && p_min < 1.0, "nlp: p_min must be in [0, 1)");
  }
};

struct NlpCensus {
  int n_vars = 0;
  int n_ineq = 0;
  int n_eq = 0;
};

inline NlpCensus nlp_census(int h, int n_active, int n, int d, double rho, bool force_limit) {
  NlpCensus c;
  c.n_vars = d * h + n_active * 2 * n * h;
  c.n_ineq = n_active * h * ((rho > 0.0 ? 4 * n : 0) + (force_limit ? 1 : 0)) + 2 * d * h;
  c.n_eq = rho > 0.0 ? 0 : n_active * h * 2 * n;
  return c;
}

// Initial guess. states[z] holds h + 1 states (the first is ignored) or h
// states for mode id z; an empty entry is filled by rolling out `actions`.
struct NlpGuess {
  Mat actions;
  std::vector<std::vector<JointState>> states;

  static NlpGuess from_cem(const CemResult& cem) {
    NlpGuess g;
    g.actions = cem.best_actions;
    for (const auto& r : cem.mode_rollouts) g.states.push_back(r.states);
    return g;
  }
};

struct SolveStats {
  int iterations = 0;
  double wall_time = 0.0;
  double cost = 0.0;
  double kkt = 0.0;
  double violation = 0.0;
  SolveStatus status = SolveStatus::kMaxIter;
  IpWork work;
  long linearizations = 0;  // dynamics_jacobians calls
  long steps = 0;           // plain dynamics steps in the line search
};

struct NlpSolution {
  Mat actions;                                  // d x h
  std::vector<int> modes;                       // active mode ids
  std::vector<std::vector<JointState>> states;  // per active mode, h + 1 states
  SolveStats stats;
  IpPoint point;
  std::vector<IpIterate> trace;
};

class NlpProblem {
 public:
  NlpProblem(Plant plant, CostParams cost, NlpParams params, std::vector<int> modes, Vec weights,
             std::vector<JointState> xi0)
      : plant_(std::move(plant)),
        cost_(std::move(cost)),
        factors_(cost_),
        params_(std::move(params)),
        modes_(std::move(modes)),
        p_(std::move(weights)),
        xi0_(std::move(xi0)) {
    n_ = plant_.robot.n;
    d_ = plant_.robot.m;
    census_ = nlp_census(params_.h, static_cast<int>(modes_.size()), n_, d_, params_.rho, params_.force_limit);
    x0_ = Vec::Zero(census_.n_vars);
  }

  int n_vars() const { return census_.n_vars; }
  int n_ineq() const { return census_.n_ineq; }
  int n_eq() const { return census_.n_eq; }
  const NlpCensus& census() const { return census_; }
  int horizon() const { return params_.h; }
  const std::vector<int>& modes() const { return modes_; }
  const Vec& weights() const { return p_; }
  const NlpParams& params() const { return params_; }
  const Plant& plant() const { return plant_; }
  const CostParams& cost() const { return cost_; }
  const Vec& initial_point() const { return x0_; }
  void set_initial_point(const Vec& x) {
    require(x.size() == n_vars(), "nlp: initial point has wrong dimension");
    x0_ = x;
  }
  long linearizations() const { return linearizations_; }
  long steps() const { return steps_; }
  void reset_counters() { linearizations_ = steps_ = 0; }

  int u_index(int t) const { return t * d_; }
  int xi_index(int a, int k) const { return d_ * params_.h + (a * params_.h + (k - 1)) * 2 * n_; }

  Mat actions(const Vec& x) const {
    Mat u(d_, params_.h);
    for (int t = 0; t < params_.h; ++t) u.col(t) = x.segment(u_index(t), d_);
    return u;
  }

  JointState state(const Vec& x, int a, int k) const {
    if (k == 0) return xi0_[a];
    return JointState::from_stacked(x.segment(xi_index(a, k), 2 * n_));
  }

  std::vector<JointState> states(const Vec& x, int a) const {
    std::vector<JointState> out;
    for (int k = 0; k <= params_.h; ++k) out.push_back(state(x, a, k));
    return out;
  }

  Vec pack(const Mat& u, const std::vector<std::vector<JointState>>& xs) const {
    require(u.rows() == d_ && u.cols() == params_.h, "nlp: actions must be d x h");
    require(xs.size() == modes_.size(), "nlp: need one trajectory per active mode");
    Vec x(n_vars());
    for (int t = 0; t < params_.h; ++t) x.segment(u_index(t), d_) = u.col(t);
    for (std::size_t a = 0; a < modes_.size(); ++a) {
      require(static_cast<int>(xs[a].size()) == params_.h + 1, "nlp: trajectories must have h + 1 states");
      for (int k = 1; k <= params_.h; ++k) x.segment(xi_index(static_cast<int>(a), k), 2 * n_) = xs[a][k].stacked();
    }
    return x;
  }

  double evaluate_objective(const Vec& x) {
    double f = 0.0;
    for (std::size_t a = 0; a < modes_.size(); ++a) {
      for (int t = 0; t < params_.h; ++t) {
        f += p_[a] * stage_cost(state(x, static_cast<int>(a), t), x.segment(u_index(t), d_), modes_[a], cost_,
                                plant_.robot);
      }
    }
    return f;
  }

  void evaluate_constraints(const Vec& x, Vec& g, Vec& c) {
    g.resize(n_ineq());
    c.resize(n_eq());
    for (std::size_t ai = 0; ai < modes_.size(); ++ai) {
      const int a = static_cast<int>(ai);
      for (int t = 0; t < params_.h; ++t) {
        const JointState xi = state(x, a, t);
        const Vec u = x.segment(u_index(t), d_);
        const JointState f = step(xi, plant_.modes[modes_[a]], u, plant_.dt, plant_.robot, plant_.gains);
        ++steps_;
        const Vec r = state(x, a, t + 1).stacked() - f.stacked();
        write_block_values(a, t, r, force_constraint(xi.q, u, plant_.gains, params_.F_max, plant_.robot), g, c);
      }
    }
    write_box_values(x, g);
  }

  void evaluate(const Vec& x, NlpEval& e) {
    const int nv = n_vars();
    const int m = d_;
    e.f = 0.0;
    e.grad = Vec::Zero(nv);
    e.g.resize(n_ineq());
    e.c.resize(n_eq());
    H_cost_ = Mat::Zero(nv, nv);
    force_.clear();
    std::vector<Eigen::Triplet<double>> tg, tc;

    const int tot = 2 * n_ + d_;
    std::vector<int> idx(tot);
    for (std::size_t ai = 0; ai < modes_.size(); ++ai) {
      const int a = static_cast<int>(ai);
      const int z = modes_[a];
      for (int t = 0; t < params_.h; ++t) {
        const JointState xi = state(x, a, t);
        const Vec u = x.segment(u_index(t), d_);
        for (int k = 0; k < 2 * n_; ++k) idx[k] = t > 0 ? xi_index(a, t) + k : -1;
        for (int k = 0; k < d_; ++k) idx[2 * n_ + k] = u_index(t) + k;

        // Continuity.
        const StepLinearization lin = dynamics_jacobians(xi, plant_.modes[z], u, plant_.dt, plant_.robot, plant_.gains);
        ++linearizations_;
        const Vec r = state(x, a, t + 1).stacked() - lin.next.stacked();
        const int next = xi_index(a, t + 1);
        const auto emit = [&](std::vector<Eigen::Triplet<double>>& trip, int row, double sign, int i) {
          trip.emplace_back(row, next + i, sign);
          for (int k = 0; k < 2 * n_; ++k) {
            if (idx[k] >= 0 && lin.A(i, k) != 0.0) trip.emplace_back(row, idx[k], -sign * lin.A(i, k));
          }
          for (int k = 0; k < d_; ++k) {
            if (lin.Bu(i, k) != 0.0) trip.emplace_back(row, idx[2 * n_ + k], -sign * lin.Bu(i, k));
          }
        };
        if (params_.rho > 0.0) {
          const int base = block_row(a, t);
          for (int i = 0; i < 2 * n_; ++i) {
            emit(tg, base + i, -1.0, i);
            emit(tg, base + 2 * n_ + i, 1.0, i);
          }
        } else {
          const int base = (a * params_.h + t) * 2 * n_;
          for (int i = 0; i < 2 * n_; ++i) emit(tc, base + i, 1.0, i);
        }

        // Stage cost.
        const VecT<AD> qa = seed(xi.q, 0, tot);
        const VecT<AD> qda = seed(xi.qd, n_, tot);
        const VecT<AD> ua = seed(u, 2 * n_, tot);
        const VecT<AD> res = stage_residual<AD>(qa, qda, ua, z, cost_, factors_, plant_.robot);
        const Vec rv = values_of<AD>(res);
        const Mat Jr = jacobian_of(res, tot);
        e.f += p_[a] * rv.squaredNorm();
        const Vec gr = 2.0 * p_[a] * (Jr.transpose() * rv);
        const Mat Hr = 2.0 * p_[a] * (Jr.transpose() * Jr);
        for (int i = 0; i < tot; ++i) {
          if (idx[i] < 0) continue;
          e.grad[idx[i]] += gr[i];
          for (int j = 0; j < tot; ++j) {
            if (idx[j] >= 0) H_cost_(idx[i], idx[j]) += Hr(i, j);
          }
        }

        // Force limit: g = F^2 - |r_f|^2, r_f = K_imp (x - u).
        const double gf = force_constraint(xi.q, u, plant_.gains, params_.F_max, plant_.robot);
        write_block_values(a, t, r, gf, e.g, e.c);
        if (params_.force_limit) {
          const int ft = n_ + d_;
          const VecT<AD> qf = seed(xi.q, 0, ft);
          const VecT<AD> uf = seed(u, n_, ft);
          const auto pose = forward_kinematics<AD>(qf, plant_.robot);
          VecT<AD> rf(m);
          for (int i = 0; i < m; ++i) rf[i] = plant_.gains.stiffness[i] * (pose.x[i] - uf[i]);
          ForceBlock fb;
          fb.row = force_row(a, t);
          fb.J = jacobian_of(rf, ft);
          fb.idx.resize(ft);
          for (int k = 0; k < n_; ++k) fb.idx[k] = idx[k];
          for (int k = 0; k < d_; ++k) fb.idx[n_ + k] = idx[2 * n_ + k];
          const Vec dg = -2.0 * force_scale() * (fb.J.transpose() * values_of<AD>(rf));
          for (int k = 0; k < ft; ++k) {
            if (fb.idx[k] >= 0 && dg[k] != 0.0) tg.emplace_back(fb.row, fb.idx[k], dg[k]);
          }
          force_.push_back(std::move(fb));
        }
      }
    }

    write_box_values(x, e.g);
    const int box = box_row();
    for (int t = 0; t < params_.h; ++t) {
      for (int i = 0; i < d_; ++i) {
        tg.emplace_back(box + 2 * d_ * t + i, u_index(t) + i, 1.0);
        tg.emplace_back(box + 2 * d_ * t + d_ + i, u_index(t) + i, -1.0);
      }
    }
    e.Jg.resize(n_ineq(), nv);
    e.Jg.setFromTriplets(tg.begin(), tg.end());
    e.Jc.resize(n_eq(), nv);
    e.Jc.setFromTriplets(tc.begin(), tc.end());
    cached_x_ = x;
  }

  // Gauss-Newton Hessian of the Lagrangian f - lambda^T g. Continuity
  // curvature is dropped; the force rows contribute 2 lambda J_f^T J_f.
  void hessian(const Vec& x, const Vec& lambda, Mat& H) {
    if (cached_x_.size() != x.size() || cached_x_ != x) {
      NlpEval e;
      evaluate(x, e);
    }
    H = H_cost_;
    for (const auto& fb : force_) {
      const double l = lambda[fb.row] * force_scale();
      const Mat Hf = 2.0 * l * (fb.J.transpose() * fb.J);
      for (std::size_t i = 0; i < fb.idx.size(); ++i) {
        if (fb.idx[i] < 0) continue;
        for (std::size_t j = 0; j < fb.idx.size(); ++j) {
          if (fb.idx[j] >= 0) H(fb.idx[i], fb.idx[j]) += Hf(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
      }
    }
  }

  // A complete point of a problem with the same layout, advanced one stage:
  // every per-stage block of x, slacks and multipliers moves from t + 1 to t
  // and the last stage is repeated. The primal part matches shift_solution.
  IpPoint shifted_point(const IpPoint& p) const {
    require(p.x.size() == n_vars() && p.has_duals(n_ineq(), n_eq()), "nlp: shift needs a complete point");
    const int h = params_.h;
    const int A = static_cast<int>(modes_.size());
    const auto next = [h](int t) { return std::min(t + 1, h - 1); };
    IpPoint out = p;
    for (int t = 0; t < h; ++t) out.x.segment(u_index(t), d_) = p.x.segment(u_index(next(t)), d_);
    for (int a = 0; a < A; ++a) {
      for (int k = 1; k <= h; ++k)
        out.x.segment(xi_index(a, k), 2 * n_) = p.x.segment(xi_index(a, std::min(k + 1, h)), 2 * n_);
    }
    const int rb = rows_per_block();
    for (int a = 0; a < A; ++a) {
      for (int t = 0; t < h; ++t) {
        out.s.segment(block_row(a, t), rb) = p.s.segment(block_row(a, next(t)), rb);
        out.lambda.segment(block_row(a, t), rb) = p.lambda.segment(block_row(a, next(t)), rb);
        if (params_.rho == 0.0)
          out.y.segment((a * h + t) * 2 * n_, 2 * n_) = p.y.segment((a * h + next(t)) * 2 * n_, 2 * n_);
      }
    }
    for (int t = 0; t < h; ++t) {
      out.s.segment(box_row() + 2 * d_ * t, 2 * d_) = p.s.segment(box_row() + 2 * d_ * next(t), 2 * d_);
      out.lambda.segment(box_row() + 2 * d_ * t, 2 * d_) = p.lambda.segment(box_row() + 2 * d_ * next(t), 2 * d_);
    }
    return out;
  }

 private:
  struct ForceBlock {
    int row = 0;
    std::vector<int> idx;  // q then u columns, -1 for the pinned state
    Mat J;                 // d r_f / d(q, u)
  };

  // Force rows are divided by F_max^2 so they are O(1) next to the continuity rows.
  double force_scale() const { return 1.0 / (params_.F_max * params_.F_max); }

  int rows_per_block() const { return (params_.rho > 0.0 ? 4 * n_ : 0) + (params_.force_limit ? 1 : 0); }
  int block_row(int a, int t) const { return (a * params_.h + t) * rows_per_block(); }
  int force_row(int a, int t) const { return block_row(a, t) + (params_.rho > 0.0 ? 4 * n_ : 0); }
  int box_row() const { return static_cast<int>(modes_.size()) * params_.h * rows_per_block(); }

  void write_block_values(int a, int t, const Vec& r, double gf, Vec& g, Vec& c) const {
    if (params_.rho > 0.0) {
      const int base = block_row(a, t);
      g.segment(base, 2 * n_) = (params_.rho - r.array()).matrix();
      g.segment(base + 2 * n_, 2 * n_) = (params_.rho + r.array()).matrix();
    } else {
      c.segment((a * params_.h + t) * 2 * n_, 2 * n_) = r;
    }
    if (params_.force_limit) g[force_row(a, t)] = gf * force_scale();
  }

  void write_box_values(const Vec& x, Vec& g) const {
    const int box = box_row();
    for (int t = 0; t < params_.h; ++t) {
      const Vec u = x.segment(u_index(t), d_);
      g.segment(box + 2 * d_ * t, d_) = u - params_.lo;
      g.segment(box + 2 * d_ * t + d_, d_) = params_.hi - u;
    }
  }

  Plant plant_;
  CostParams cost_;
  CostFactors factors_;
  NlpParams params_;
  std::vector<int> modes_;
  Vec p_;
  std::vector<JointState> xi0_;
  int n_ = 0;
  int d_ = 0;
  NlpCensus census_;
  Vec x0_;
  Vec cached_x_;
  Mat H_cost_;
  std::vector<ForceBlock> force_;
  long linearizations_ = 0;
  long steps_ = 0;
};

// Builds the problem over modes with belief >= p_min (renormalized). `xi0`
// holds one conditioned state per mode id. Without a guess the robot holds
// still at the most likely mode's pose.
inline NlpProblem build_nlp(const Vec& belief, const std::vector<JointState>& xi0, const NlpGuess* guess,
                            const NlpParams& params, const CostParams& cost, const Plant& plant) {
  plant.validate();
  const int nz = plant.n_modes();
  const int d = plant.robot.m;
  params.validate(d);
  cost.validate(d, nz);
  require(belief.size() == nz && static_cast<int>(xi0.size()) == nz, "nlp: need one belief entry and state per mode");
  require((belief.array() >= 0.0).all() && std::abs(belief.sum() - 1.0) <= 1e-6, "nlp: belief must be normalized");

  std::vector<int> active;
  for (int z = 0; z < nz; ++z) {
    if (belief[z] >= params.p_min && belief[z] > 0.0) active.push_back(z);
  }
  require(!active.empty(), "nlp: no mode has belief above p_min");
  Vec p(active.size());
  std::vector<JointState> starts;
  for (std::size_t a = 0; a < active.size(); ++a) {
    p[static_cast<Eigen::Index>(a)] = belief[active[a]];
    starts.push_back(xi0[active[a]]);
  }
  p /= p.sum();

  NlpProblem problem(plant, cost, params, active, p, starts);
  const int h = params.h;
  Mat u(d, h);
  std::vector<std::vector<JointState>> xs(active.size());
  if (guess != nullptr) {
    require(guess->actions.rows() == d && guess->actions.cols() == h, "nlp: guess actions must be d x h");
    u = guess->actions;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const int z = active[a];
      const std::vector<JointState>* given =
          z < static_cast<int>(guess->states.size()) && !guess->states[z].empty() ? &guess->states[z] : nullptr;
      if (given != nullptr) {
        require(static_cast<int>(given->size()) == h || static_cast<int>(given->size()) == h + 1,
                "nlp: guess trajectories must have h or h + 1 states");
        xs[a].push_back(starts[a]);
        const std::size_t off = given->size() == static_cast<std::size_t>(h) ? 0 : 1;
        for (int k = 0; k < h; ++k) xs[a].push_back((*given)[off + k]);
      } else {
        xs[a] = rollout_cost(starts[a], z, u, cost, plant).states;
      }
    }
  } else {
    Eigen::Index best = 0;
    p.maxCoeff(&best);
    const Vec hold = forward_kinematics(starts[best].q, plant.robot).x;
    for (int t = 0; t < h; ++t) u.col(t) = hold;
    for (std::size_t a = 0; a < active.size(); ++a) {
      xs[a].assign(h + 1, JointState{starts[a].q, Vec::Zero(plant.robot.n)});
      xs[a][0] = starts[a];
    }
  }
  problem.set_initial_point(problem.pack(u, xs));
  return problem;
}

// Previous solution advanced one step, last action and state repeated.
inline NlpGuess shift_solution(const NlpSolution& prev, int n_modes) {
  NlpGuess g;
  g.actions = shift_plan(prev.actions);
  g.states.assign(n_modes, {});
  for (std::size_t a = 0; a < prev.modes.size(); ++a) {
    auto s = prev.states[a];
    if (s.size() >= 2) {
      s.erase(s.begin());
      s.push_back(s.back());
    }
    g.states[prev.modes[a]] = std::move(s);
  }
  return g;
}

// Solves from the problem's initial point, or from a full primal-dual warm
// start when `warm` is given.
inline NlpSolution solve(NlpProblem& problem, const IpOptions& opts = {}, const IpPoint* warm = nullptr) {
  IpPoint start;
  if (warm != nullptr) {
    start = *warm;
  } else {
    start.x = problem.initial_point();
  }
  problem.reset_counters();
  const auto t0 = std::chrono::steady_clock::now();
  IpResult r = interior_point(problem, start, opts);
  const auto t1 = std::chrono::steady_clock::now();

  NlpSolution sol;
  sol.actions = problem.actions(r.point.x);
  sol.modes = problem.modes();
  for (std::size_t a = 0; a < sol.modes.size(); ++a) sol.states.push_back(problem.states(r.point.x, static_cast<int>(a)));
  sol.stats.iterations = r.iterations;
  sol.stats.wall_time = std::chrono::duration<double>(t1 - t0).count();
  sol.stats.cost = r.objective;
  sol.stats.kkt = r.kkt;
  sol.stats.violation = r.violation;
  sol.stats.status = r.status;
  sol.stats.work = r.work;
  sol.stats.linearizations = problem.linearizations();
  sol.stats.steps = problem.steps();
  sol.point = std::move(r.point);
  sol.trace = std::move(r.trace);
  return sol;
}

}  // namespace cmpc
