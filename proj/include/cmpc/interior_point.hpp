#pragma once

// Dense primal-dual interior point method for
//   min f(x)  s.t.  g(x) >= 0,  c(x) = 0
// with slacks g(x) - s = 0, s > 0. Newton steps on the perturbed KKT system,
// fraction-to-boundary rule, l1 merit backtracking, barrier reduced x0.1 on
// inner convergence.
//
// A problem type provides
//   int n_vars(), n_ineq(), n_eq();
//   void evaluate(const Vec& x, NlpEval& e);  // values and first derivatives
//   void hessian(const Vec& x, const Vec& lambda, Mat& H);  // PSD Lagrangian Hessian model
//   double evaluate_objective(const Vec& x);  // f only
//   void evaluate_constraints(const Vec& x, Vec& g, Vec& c);
// and may count its own evaluation work.

#include "cmpc/common.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace cmpc {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct NlpEval {
  double f = 0.0;
  Vec grad;
  Vec g;
  SpMat Jg;
  Vec c;
  SpMat Jc;
};

enum class SolveStatus { kConverged, kMaxIter, kLineSearchFailure };

inline std::string to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::kConverged:
      return "converged";
    case SolveStatus::kMaxIter:
      return "max_iter";
    case SolveStatus::kLineSearchFailure:
      return "line_search_failure";
  }
  return "unknown";
}

struct IpOptions {
  double tol = 1e-8;
  int max_iter = 200;
  double mu0 = 0.1;
  double tau_min = 0.99;     // fraction-to-boundary, tau = max(tau_min, 1 - mu)
  double armijo = 1e-4;
  double min_step = 1e-10;
  double slack_floor = 1e-2; // cold-start slacks are at least this
  bool slack_reset = true;   // merit-minimizing slack reset at trial points
};

// Primal-dual point; a complete one can warm start the solver.
struct IpPoint {
  Vec x;
  Vec s;       // slacks, one per inequality
  Vec lambda;  // inequality multipliers
  Vec y;       // equality multipliers
  double mu = 0.0;

  bool has_duals(int m_ineq, int m_eq) const {
    return s.size() == m_ineq && lambda.size() == m_ineq && y.size() == m_eq && mu > 0.0;
  }
};

struct IpIterate {
  int iter;
  double mu;
  double kkt;
  double objective;
  double violation;
  double alpha_primal;
  double alpha_dual;
  int backtracks;
  double merit_before;  // merit at the barrier parameter of this iteration
  double merit_after;
};

struct IpWork {
  int evaluations = 0;       // derivative evaluations
  int merit_evaluations = 0; // value-only evaluations in the line search
  int factorizations = 0;
  double factor_flops = 0.0; // dense factorization and Schur-complement assembly
};

struct IpResult {
  IpPoint point;
  SolveStatus status = SolveStatus::kMaxIter;
  int iterations = 0;
  double objective = 0.0;
  double kkt = 0.0;        // scaled KKT error at mu = 0
  double violation = 0.0;  // max(|g - s|, max(-g, 0), |c|)
  std::vector<IpIterate> trace;
  IpWork work;
};

namespace detail {

inline double fraction_to_boundary(const Vec& v, const Vec& dv, double tau) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (dv[i] < 0.0) alpha = std::min(alpha, -tau * v[i] / dv[i]);
  }
  return alpha;
}

inline double inf_norm(const Vec& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

// Scaled optimality error in the style of Ipopt; the dual residual is taken
// relative to the objective gradient.
inline double kkt_error(const NlpEval& e, const IpPoint& p, double mu) {
  const Vec rd = e.grad - e.Jg.transpose() * p.lambda - e.Jc.transpose() * p.y;
  const double smax = 100.0;
  const auto m = static_cast<double>(p.lambda.size() + p.y.size());
  const double lsum = p.lambda.cwiseAbs().sum() + p.y.cwiseAbs().sum();
  const double sd = m > 0 ? std::max(smax, lsum / m) / smax : 1.0;
  const double sc = p.lambda.size() > 0 ? std::max(smax, p.lambda.cwiseAbs().sum() / p.lambda.size()) / smax : 1.0;
  const double dual = inf_norm(rd) / (sd * (1.0 + inf_norm(e.grad)));
  const double primal = std::max(inf_norm(e.g - p.s), inf_norm(e.c));
  const double compl_ = p.s.size() > 0 ? inf_norm(Vec(p.s.cwiseProduct(p.lambda).array() - mu)) / sc : 0.0;
  return std::max({dual, primal, compl_});
}

inline double violation(const NlpEval& e, const Vec& s) {
  double v = std::max(inf_norm(e.g - s), inf_norm(e.c));
  if (e.g.size() > 0) v = std::max(v, -std::min(0.0, e.g.minCoeff()));
  return v;
}

}  // namespace detail

template <class Problem>
IpResult interior_point(Problem& problem, const IpPoint& start, const IpOptions& opt = {}) {
  const int n = problem.n_vars();
  const int mi = problem.n_ineq();
  const int me = problem.n_eq();
  require(start.x.size() == n, "interior point: start has wrong dimension");

  IpResult res;
  IpPoint p = start;
  NlpEval e;
  problem.evaluate(p.x, e);
  ++res.work.evaluations;

  double mu = opt.mu0;
  if (start.has_duals(mi, me) && (start.s.array() > 0).all() && (start.lambda.array() > 0).all()) {
    mu = start.mu;
  } else {
    p.s = e.g.cwiseMax(opt.slack_floor);
    p.lambda = (mu / p.s.array()).matrix();
    p.y = Vec::Zero(me);
  }

  double nu = 1.0;  // merit penalty
  Mat H(n, n), W(n, n);
  const double mu_min = opt.tol / 10.0;

  // With `floor`, slacks of rows whose value clears both mu / nu and the floor
  // are reset to that value, which minimizes the merit over those slacks.
  const auto merit = [&](const Vec& x, Vec& s, double& f_out, double& viol_out, const Vec* floor = nullptr) {
    Vec g, c;
    f_out = problem.evaluate_objective(x);
    problem.evaluate_constraints(x, g, c);
    ++res.work.merit_evaluations;
    if (floor != nullptr) {
      const double lo = mu / nu;
      for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (g[i] >= lo && g[i] >= (*floor)[i]) s[i] = g[i];
      }
    }
    viol_out = (g - s).lpNorm<1>() + (c.size() > 0 ? c.lpNorm<1>() : 0.0);
    return f_out - mu * s.array().log().sum() + nu * viol_out;
  };

  for (int iter = 0;; ++iter) {
    // Barrier update on inner convergence.
    while (mu > mu_min && detail::kkt_error(e, p, mu) <= 10.0 * mu) mu = std::max(mu_min, 0.1 * mu);

    res.kkt = detail::kkt_error(e, p, 0.0);
    res.violation = detail::violation(e, p.s);
    res.objective = e.f;
    res.iterations = iter;
    if (res.kkt <= opt.tol && res.violation <= opt.tol) {
      res.status = SolveStatus::kConverged;
      break;
    }
    if (iter >= opt.max_iter) {
      res.status = SolveStatus::kMaxIter;
      break;
    }

    // Newton system reduced to the primal variables (and equality multipliers).
    problem.hessian(p.x, p.lambda, H);
    const Vec sigma = p.lambda.cwiseQuotient(p.s);
    const Vec rp = e.g - p.s;
    const Vec rc = (mu - p.s.cwiseProduct(p.lambda).array()).matrix();
    const Vec rd = e.grad - e.Jg.transpose() * p.lambda - e.Jc.transpose() * p.y;
    W = H;
    if (mi > 0) W += Mat(e.Jg.transpose() * sigma.asDiagonal() * e.Jg);
    res.work.factor_flops += static_cast<double>(e.Jg.nonZeros()) * n;

    const Vec rhs_x = -rd + e.Jg.transpose() * (rc - p.lambda.cwiseProduct(rp)).cwiseQuotient(p.s);
    Vec dx, dy = Vec::Zero(me);
    double delta = 0.0;
    for (int attempt = 0;; ++attempt) {
      ++res.work.factorizations;
      if (me == 0) {
        Eigen::LLT<Mat> llt(W + delta * Mat::Identity(n, n));
        res.work.factor_flops += std::pow(static_cast<double>(n), 3) / 3.0;
        if (llt.info() == Eigen::Success) {
          dx = llt.solve(rhs_x);
          if (dx.allFinite()) break;
        }
      } else {
        Mat K = Mat::Zero(n + me, n + me);
        K.topLeftCorner(n, n) = W + delta * Mat::Identity(n, n);
        const Mat Jc = e.Jc;
        K.topRightCorner(n, me) = Jc.transpose();
        K.bottomLeftCorner(me, n) = Jc;
        K.bottomRightCorner(me, me) = -1e-12 * Mat::Identity(me, me);
        Vec rhs(n + me);
        rhs << rhs_x, -e.c;
        Eigen::PartialPivLU<Mat> lu(K);
        res.work.factor_flops += 2.0 * std::pow(static_cast<double>(n + me), 3) / 3.0;
        const Vec sol = lu.solve(rhs);  // (dx, -dy)
        if (sol.allFinite() && (K * sol - rhs).norm() <= 1e-8 * (1.0 + rhs.norm())) {
          dx = sol.head(n);
          dy = -sol.tail(me);
          break;
        }
      }
      const double scale = 1.0 + W.diagonal().cwiseAbs().maxCoeff();
      delta = delta == 0.0 ? 1e-10 * scale : 10.0 * delta;
      require(attempt < 30, "interior point: could not factor the Newton system");
    }

    const Vec ds = e.Jg * dx + rp;
    const Vec dlambda = (rc - p.lambda.cwiseProduct(ds)).cwiseQuotient(p.s);

    const double tau = std::max(opt.tau_min, 1.0 - mu);
    double alpha_p = detail::fraction_to_boundary(p.s, ds, tau);
    const double alpha_d = detail::fraction_to_boundary(p.lambda, dlambda, tau);

    // Merit penalty large enough for dx to be a descent direction.
    const double viol0 = rp.lpNorm<1>() + (me > 0 ? e.c.lpNorm<1>() : 0.0);
    const double barrier_slope = e.grad.dot(dx) - mu * ds.cwiseQuotient(p.s).sum();
    if (viol0 > 0.0) {
      const double need = (barrier_slope + 0.5 * dx.dot(H * dx)) / (0.9 * viol0);
      if (need > nu) nu = need + 1.0;
    }
    const double slope = barrier_slope - nu * viol0;

    double f0 = 0.0, v0 = 0.0;
    Vec s0 = p.s;
    const double phi0 = merit(p.x, s0, f0, v0);
    int backtracks = 0;
    bool accepted = false;
    Vec x_new, s_new;
    double phi_new = phi0;
    const Vec s_floor = (1.0 - tau) * p.s;
    while (alpha_p >= opt.min_step) {
      x_new = p.x + alpha_p * dx;
      s_new = p.s + alpha_p * ds;
      double f1 = 0.0, v1 = 0.0;
      const double phi1 = merit(x_new, s_new, f1, v1, opt.slack_reset ? &s_floor : nullptr);
      const double target = phi0 + opt.armijo * alpha_p * std::min(slope, 0.0);
      if (std::isfinite(phi1) && phi1 <= target) {
        accepted = true;
        phi_new = phi1;
        break;
      }
      alpha_p *= 0.5;
      ++backtracks;
    }
    if (!accepted) {
      res.status = SolveStatus::kLineSearchFailure;
      res.trace.push_back({iter, mu, res.kkt, e.f, res.violation, 0.0, 0.0, backtracks, phi0, phi0});
      break;
    }

    p.x = x_new;
    p.s = s_new;
    p.lambda += alpha_d * dlambda;
    p.y += alpha_p * dy;
    // Keep multipliers within a band around mu / s so the barrier Hessian
    // stays meaningful.
    for (Eigen::Index i = 0; i < p.lambda.size(); ++i) {
      const double c = mu / p.s[i];
      p.lambda[i] = std::clamp(p.lambda[i], c / 1e10, c * 1e10);
    }
    problem.evaluate(p.x, e);
    ++res.work.evaluations;
    res.trace.push_back({iter, mu, res.kkt, e.f, detail::violation(e, p.s), alpha_p, alpha_d, backtracks, phi0, phi_new});
  }
  p.mu = mu;
  res.point = p;
  return res;
}

inline void write_solver_trace(std::ostream& os, const std::vector<IpIterate>& trace) {
  os << "# cmpc-solver-trace v1\n";
  os << "iter,mu,kkt,objective,violation,alpha_primal,alpha_dual,backtracks,merit_before,merit_after\n";
  for (const auto& t : trace) {
    os << t.iter << ',' << t.mu << ',' << t.kkt << ',' << t.objective << ',' << t.violation << ',' << t.alpha_primal
       << ',' << t.alpha_dual << ',' << t.backtracks << ',' << t.merit_before << ',' << t.merit_after << '\n';
  }
}

}  // namespace cmpc
