#pragma once

// Stage cost and impedance-force constraint shared by the CEM and the MPC.

#include "cmpc/dynamics.hpp"

#include <vector>

namespace cmpc {

// Controlled robot, mode set and step size used by the planners.
struct Plant {
  RobotModel robot;
  ModeSet modes;
  ImpedanceGains gains;
  double dt = 0.05;

  int n_modes() const { return static_cast<int>(modes.size()); }
  void validate() const {
    robot.validate();
    validate_modes(modes, robot.m);
    gains.validate(robot.m);
    require(dt > 0.0, "plant: dt must be positive");
  }
};

struct CostParams {
  Mat Q_x;   // tracking weight, m x m
  Mat Q_u;   // setpoint deviation weight
  Mat Q_xd;  // Cartesian velocity weight
  std::vector<Vec> x_d;    // target per mode id
  std::vector<Vec> track;  // per mode id, 1 = tracked axis, 0 = ignored

  void validate(int m, int n_modes) const {
    require(Q_x.rows() == m && Q_x.cols() == m && Q_u.rows() == m && Q_u.cols() == m &&
                Q_xd.rows() == m && Q_xd.cols() == m,
            "cost: weights must be m x m");
    for (const Mat* Q : {&Q_x, &Q_u, &Q_xd}) {
      require((*Q - Q->transpose()).norm() <= 1e-12 * (1.0 + Q->norm()), "cost: weights must be symmetric");
      require(Eigen::SelfAdjointEigenSolver<Mat>(*Q).eigenvalues().minCoeff() >= -1e-12,
              "cost: weights must be positive semi-definite");
    }
    require(static_cast<int>(x_d.size()) == n_modes && static_cast<int>(track.size()) == n_modes,
            "cost: need one target and one mask per mode");
    for (int z = 0; z < n_modes; ++z) {
      require(x_d[z].size() == m && track[z].size() == m, "cost: target and mask must have m entries");
    }
  }

  // Every axis tracked, the same target in every mode.
  static CostParams uniform(const Vec& target, int n_modes, double qx, double qu, double qxd) {
    const auto m = target.size();
    CostParams c;
    c.Q_x = qx * Mat::Identity(m, m);
    c.Q_u = qu * Mat::Identity(m, m);
    c.Q_xd = qxd * Mat::Identity(m, m);
    c.x_d.assign(n_modes, target);
    c.track.assign(n_modes, Vec::Ones(m));
    return c;
  }
};

// L with L^T L = Q for symmetric PSD Q.
inline Mat sqrt_psd(const Mat& Q) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (Q + Q.transpose()));
  return eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

struct CostFactors {
  Mat L_x, L_u, L_xd;
  explicit CostFactors(const CostParams& c) : L_x(sqrt_psd(c.Q_x)), L_u(sqrt_psd(c.Q_u)), L_xd(sqrt_psd(c.Q_xd)) {}
};

inline double stage_cost(const JointState& xi, const Vec& u, int z, const CostParams& cost,
                         const RobotModel& model) {
  const Vec x = forward_kinematics(xi.q, model).x;
  const Vec xd = jacobian(xi.q, model) * xi.qd;
  const Vec e = cost.track[z].cwiseProduct(cost.x_d[z] - x);
  const Vec du = u - x;
  return e.dot(cost.Q_x * e) + du.dot(cost.Q_u * du) + xd.dot(cost.Q_xd * xd);
}

// Residual r with stage_cost = |r|^2, stacked as [tracking; setpoint; velocity].
template <class S>
VecT<S> stage_residual(const VecT<S>& q, const VecT<S>& qd, const VecT<S>& u, int z, const CostParams& cost,
                       const CostFactors& f, const RobotModel& model) {
  const int m = model.m;
  const auto pose = forward_kinematics<S>(q, model);
  const MatT<S> J = jacobian<S>(q, model, Vec::Zero(m));
  const VecT<S> xd = J * qd;
  VecT<S> e(m), du(m);
  for (int i = 0; i < m; ++i) {
    e[i] = cost.track[z][i] * (cost.x_d[z][i] - pose.x[i]);
    du[i] = u[i] - pose.x[i];
  }
  VecT<S> r(3 * m);
  r << f.L_x.cast<S>() * e, f.L_u.cast<S>() * du, f.L_xd.cast<S>() * xd;
  return r;
}

// Smooth force limit F_max^2 - |K_imp (x - u)|^2; non-negative iff the
// impedance force is within F_max.
template <class S>
S force_constraint(const VecT<S>& q, const VecT<S>& u, const ImpedanceGains& gains, double F_max,
                   const RobotModel& model) {
  const auto pose = forward_kinematics<S>(q, model);
  S g = S(F_max * F_max);
  for (int i = 0; i < model.m; ++i) {
    const S f = gains.stiffness[i] * (pose.x[i] - u[i]);
    g -= f * f;
  }
  return g;
}

inline double force_constraint(const Vec& q, const Vec& u, const ImpedanceGains& gains, double F_max,
                               const RobotModel& model) {
  return force_constraint<double>(q, u, gains, F_max, model);
}

inline double impedance_force_norm(const Vec& q, const Vec& u, const ImpedanceGains& gains, const RobotModel& model) {
  const Vec x = forward_kinematics(q, model).x;
  return gains.stiffness.cwiseProduct(x - u).norm();
}

}  // namespace cmpc
