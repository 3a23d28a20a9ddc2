#pragma once

// Robot kinematics and dynamics with switched 1-DOF stiffness contacts.
//
// A robot is either a point mass (n = m, identity kinematics) or a planar
// serial arm with point masses at the link tips. Every model function is
// templated on the scalar type so the same code path evaluates values (double)
// and forward-mode derivatives (AD).

#include "cmpc/common.hpp"

#include <random>
#include <string>
#include <vector>

namespace cmpc {

enum class RobotKind { kPointMass, kPlanarArm };

// kSemiImplicit: contact and controller forces explicit, joint damping
// implicit. kLinearlyImplicit additionally treats the contact springs and the
// impedance spring/damper implicitly through their linearization, which keeps
// stiff contacts (K >= 1e4 N/m) stable at control-rate step sizes.
enum class Integrator { kSemiImplicit, kLinearlyImplicit };

struct RobotModel {
  RobotKind kind = RobotKind::kPlanarArm;
  int n = 3;
  int m = 2;
  Vec link_lengths;  // planar arm only [m]
  Vec link_masses;   // [kg]; per-axis mass for the point mass
  Vec damping;       // diagonal of B
  Vec gravity;       // [m/s^2], size m
  Integrator integrator = Integrator::kLinearlyImplicit;

  static RobotModel point_mass(int dim, double mass, double damping = 0.0) {
    RobotModel r;
    r.kind = RobotKind::kPointMass;
    r.n = dim;
    r.m = dim;
    r.link_masses = Vec::Constant(dim, mass);
    r.damping = Vec::Constant(dim, damping);
    r.gravity = Vec::Zero(dim);
    r.validate();
    return r;
  }

  static RobotModel planar_arm(const Vec& lengths, const Vec& masses, const Vec& damping,
                               const Vec& gravity = Vec::Zero(2)) {
    RobotModel r;
    r.kind = RobotKind::kPlanarArm;
    r.n = static_cast<int>(lengths.size());
    r.m = 2;
    r.link_lengths = lengths;
    r.link_masses = masses;
    r.damping = damping;
    r.gravity = gravity;
    r.validate();
    return r;
  }

  // Three unit-length 1 kg links, B = 0.5 I, gravity along -y.
  static RobotModel default_arm() {
    return planar_arm(Vec::Ones(3), Vec::Ones(3), Vec::Constant(3, 0.5), Vec{{0.0, -9.81}});
  }

  void validate() const {
    require(n >= 1, "robot: n must be >= 1");
    require(m == 2 || m == 3, "robot: m must be 2 or 3");
    require(link_masses.size() == n && (link_masses.array() > 0).all(),
            "robot: link_masses must have n strictly positive entries");
    require(damping.size() == n && (damping.array() >= 0).all(),
            "robot: damping must have n non-negative entries");
    require(gravity.size() == m, "robot: gravity must have m entries");
    if (kind == RobotKind::kPointMass) {
      require(n == m, "robot: point mass requires n == m");
    } else {
      require(m == 2, "robot: planar arm works in the plane (m == 2)");
      require(link_lengths.size() == n && (link_lengths.array() > 0).all(),
              "robot: link_lengths must have n strictly positive entries");
    }
  }
};

struct JointState {
  Vec q;
  Vec qd;

  Vec stacked() const {
    Vec xi(q.size() + qd.size());
    xi << q, qd;
    return xi;
  }
  static JointState from_stacked(const Vec& xi) {
    const auto n = xi.size() / 2;
    return {xi.head(n), xi.tail(n)};
  }
  static JointState zero(int n) { return {Vec::Zero(n), Vec::Zero(n)}; }
};

// One stiffness element. The direction of K is the contact normal and its norm
// the stiffness; `rest` is in world frame, `attach` in the TCP frame.
struct ContactPoint {
  Vec K;
  Vec rest;
  Vec attach;
};

struct ContactMode {
  int id = 0;
  std::string label;
  std::vector<ContactPoint> contacts;
};

using ModeSet = std::vector<ContactMode>;

inline void validate_contact(const ContactPoint& cp, int m) {
  require(cp.K.size() == m && cp.rest.size() == m && cp.attach.size() == m,
          "contact: K, rest and attach must have m entries");
  require(cp.K.norm() > 0.0, "contact: stiffness vector K must be nonzero");
}

inline void validate_modes(const ModeSet& modes, int m) {
  require(!modes.empty(), "mode set is empty");
  for (std::size_t i = 0; i < modes.size(); ++i) {
    require(modes[i].id == static_cast<int>(i), "mode ids must be contiguous from 0");
    for (const auto& cp : modes[i].contacts) validate_contact(cp, m);
  }
}

// Diagonal Cartesian impedance gains.
struct ImpedanceGains {
  Vec stiffness;
  Vec damping;

  void validate(int m) const {
    require(stiffness.size() == m && damping.size() == m, "impedance gains must have m entries");
    require((stiffness.array() >= 0).all() && (damping.array() >= 0).all(),
            "impedance gains must be non-negative");
    require((stiffness.array() > 0).any(), "at least one impedance stiffness must be positive");
  }
};

struct NoiseModel {
  Mat Q;    // process covariance, 2n x 2n
  Mat R_y;  // measurement covariance, 2n x 2n
};

namespace detail {

template <class S>
Eigen::Matrix<S, 2, 1> perp(const Eigen::Matrix<S, 2, 1>& v) {
  return {-v[1], v[0]};
}

// Joint origins o_0..o_n (o_n is the arm tip) and absolute link angles.
template <class S>
void planar_chain(const RobotModel& model, const VecT<S>& q,
                  std::vector<Eigen::Matrix<S, 2, 1>>& origins, std::vector<S>& angles) {
  using std::cos;
  using std::sin;
  origins.assign(model.n + 1, Eigen::Matrix<S, 2, 1>(S(0.0), S(0.0)));
  angles.assign(model.n, S(0.0));
  S theta = S(0.0);
  for (int j = 0; j < model.n; ++j) {
    theta = theta + q[j];
    angles[j] = theta;
    origins[j + 1][0] = origins[j][0] + model.link_lengths[j] * cos(theta);
    origins[j + 1][1] = origins[j][1] + model.link_lengths[j] * sin(theta);
  }
}

// Jacobian of a point rigidly attached to link `link` of a planar arm.
template <class S>
MatT<S> planar_point_jacobian(const std::vector<Eigen::Matrix<S, 2, 1>>& origins,
                              const Eigen::Matrix<S, 2, 1>& p, int link, int n) {
  MatT<S> J(2, n);
  for (int j = 0; j < n; ++j) {
    if (j <= link) {
      J.col(j) = perp<S>(p - origins[j]);
    } else {
      J(0, j) = S(0.0);
      J(1, j) = S(0.0);
    }
  }
  return J;
}

// LDL^T solve for a small symmetric positive definite system, written on the
// scalar type so derivatives propagate through it.
template <class S>
VecT<S> solve_spd(MatT<S> H, VecT<S> b) {
  const auto n = H.rows();
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index k = 0; k < j; ++k) H(j, j) -= H(j, k) * H(j, k) * H(k, k);
    if (!(value_of(H(j, j)) > 0.0)) {
      throw std::runtime_error("step: (M + dt B) factorization failed (non-positive pivot)");
    }
    for (Eigen::Index i = j + 1; i < n; ++i) {
      for (Eigen::Index k = 0; k < j; ++k) H(i, j) -= H(i, k) * H(j, k) * H(k, k);
      H(i, j) /= H(j, j);
    }
  }
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < i; ++k) b[i] -= H(i, k) * b[k];
  for (Eigen::Index i = 0; i < n; ++i) b[i] /= H(i, i);
  for (Eigen::Index i = n - 1; i >= 0; --i)
    for (Eigen::Index k = i + 1; k < n; ++k) b[i] -= H(k, i) * b[k];
  return b;
}

inline void check_q(const RobotModel& model, Eigen::Index qsize) {
  if (qsize != model.n) {
    throw std::invalid_argument("dimension mismatch: q has " + std::to_string(qsize) +
                                " entries, robot has n=" + std::to_string(model.n));
  }
}

}  // namespace detail

template <class S>
struct Pose {
  VecT<S> x;  // TCP position
  MatT<S> R;  // TCP orientation
};

template <class S>
Pose<S> forward_kinematics(const VecT<S>& q, const RobotModel& model) {
  detail::check_q(model, q.size());
  if (model.kind == RobotKind::kPointMass) {
    return {q, MatT<S>::Identity(model.m, model.m)};
  }
  std::vector<Eigen::Matrix<S, 2, 1>> origins;
  std::vector<S> angles;
  detail::planar_chain<S>(model, q, origins, angles);
  using std::cos;
  using std::sin;
  const S th = angles.back();
  MatT<S> R(2, 2);
  R << cos(th), -sin(th), sin(th), cos(th);
  return {VecT<S>(origins.back()), R};
}

inline Pose<double> forward_kinematics(const Vec& q, const RobotModel& model) {
  return forward_kinematics<double>(q, model);
}

// d(R(q) attach + x(q))/dq. attach = 0 gives the TCP Jacobian J = dx/dq.
template <class S>
MatT<S> jacobian(const VecT<S>& q, const RobotModel& model, const Vec& attach) {
  detail::check_q(model, q.size());
  if (model.kind == RobotKind::kPointMass) {
    return MatT<S>::Identity(model.m, model.n);
  }
  std::vector<Eigen::Matrix<S, 2, 1>> origins;
  std::vector<S> angles;
  detail::planar_chain<S>(model, q, origins, angles);
  using std::cos;
  using std::sin;
  const S th = angles.back();
  Eigen::Matrix<S, 2, 1> p = origins.back();
  p[0] += cos(th) * attach[0] - sin(th) * attach[1];
  p[1] += sin(th) * attach[0] + cos(th) * attach[1];
  return detail::planar_point_jacobian<S>(origins, p, model.n - 1, model.n);
}

inline Mat jacobian(const Vec& q, const RobotModel& model) {
  return jacobian<double>(q, model, Vec::Zero(model.m));
}

template <class S>
MatT<S> mass_matrix(const VecT<S>& q, const RobotModel& model) {
  if (model.kind == RobotKind::kPointMass) {
    MatT<S> M = MatT<S>::Zero(model.n, model.n);
    for (int i = 0; i < model.n; ++i) M(i, i) = S(model.link_masses[i]);
    return M;
  }
  std::vector<Eigen::Matrix<S, 2, 1>> origins;
  std::vector<S> angles;
  detail::planar_chain<S>(model, q, origins, angles);
  MatT<S> M = MatT<S>::Zero(model.n, model.n);
  for (int k = 0; k < model.n; ++k) {
    const MatT<S> Jk = detail::planar_point_jacobian<S>(origins, origins[k + 1], k, model.n);
    M += model.link_masses[k] * (Jk.transpose() * Jk);
  }
  return M;
}

// Coriolis/centripetal torque C(q, qd) and gravity torque G(q).
template <class S>
void bias_torques(const VecT<S>& q, const VecT<S>& qd, const RobotModel& model, VecT<S>& C,
                  VecT<S>& G) {
  C = VecT<S>::Constant(model.n, S(0.0));
  G = VecT<S>::Constant(model.n, S(0.0));
  if (model.kind == RobotKind::kPointMass) {
    for (int i = 0; i < model.n; ++i) G[i] = S(-model.link_masses[i] * model.gravity[i]);
    return;
  }
  std::vector<Eigen::Matrix<S, 2, 1>> origins;
  std::vector<S> angles;
  detail::planar_chain<S>(model, q, origins, angles);
  using std::cos;
  using std::sin;
  Eigen::Matrix<S, 2, 1> accel(S(0.0), S(0.0));
  S omega = S(0.0);
  for (int k = 0; k < model.n; ++k) {
    omega = omega + qd[k];
    // centripetal acceleration of tip k: -sum_j L_j w_j^2 (cos th_j, sin th_j)
    accel[0] -= model.link_lengths[k] * omega * omega * cos(angles[k]);
    accel[1] -= model.link_lengths[k] * omega * omega * sin(angles[k]);
    const MatT<S> Jk = detail::planar_point_jacobian<S>(origins, origins[k + 1], k, model.n);
    C += model.link_masses[k] * (Jk.transpose() * accel);
    Eigen::Matrix<S, 2, 1> g(S(model.gravity[0]), S(model.gravity[1]));
    G -= model.link_masses[k] * (Jk.transpose() * g);
  }
}

// Force vector of one stiffness element: n (K^T (x^o - (R attach + x))).
template <class S>
VecT<S> contact_force(const VecT<S>& q, const ContactPoint& cp, const RobotModel& model) {
  validate_contact(cp, model.m);
  const auto pose = forward_kinematics<S>(q, model);
  VecT<S> p = pose.x;
  for (int i = 0; i < model.m; ++i)
    for (int j = 0; j < model.m; ++j) p[i] += pose.R(i, j) * cp.attach[j];
  S f = S(0.0);
  for (int i = 0; i < model.m; ++i) f += cp.K[i] * (cp.rest[i] - p[i]);
  const double knorm = cp.K.norm();
  VecT<S> F(model.m);
  for (int i = 0; i < model.m; ++i) F[i] = f * (cp.K[i] / knorm);
  return F;
}

inline Vec contact_force(const Vec& q, const ContactPoint& cp, const RobotModel& model) {
  return contact_force<double>(q, cp, model);
}

template <class S>
VecT<S> external_torque(const VecT<S>& q, const ContactMode& mode, const RobotModel& model) {
  detail::check_q(model, q.size());
  VecT<S> tau = VecT<S>::Constant(model.n, S(0.0));
  for (const auto& cp : mode.contacts) {
    const VecT<S> F = contact_force<S>(q, cp, model);
    const MatT<S> Ji = jacobian<S>(q, model, cp.attach);
    tau += Ji.transpose() * F;
  }
  return tau;
}

inline Vec external_torque(const Vec& q, const ContactMode& mode, const RobotModel& model) {
  return external_torque<double>(q, mode, model);
}

// Cartesian impedance law with gravity/Coriolis compensation:
// tau_m = J^T(-D xdot - K (x - x0)) + G + C.
template <class S>
VecT<S> impedance_torque(const VecT<S>& q, const VecT<S>& qd, const VecT<S>& x0,
                         const ImpedanceGains& gains, const RobotModel& model) {
  detail::check_q(model, q.size());
  const auto pose = forward_kinematics<S>(q, model);
  const MatT<S> J = jacobian<S>(q, model, Vec::Zero(model.m));
  const VecT<S> xd = J * qd;
  VecT<S> F(model.m);
  for (int i = 0; i < model.m; ++i) {
    F[i] = -gains.damping[i] * xd[i] - gains.stiffness[i] * (pose.x[i] - x0[i]);
  }
  VecT<S> C, G;
  bias_torques<S>(q, qd, model, C, G);
  return J.transpose() * F + G + C;
}

inline Vec impedance_torque(const JointState& s, const Vec& x0, const ImpedanceGains& gains,
                            const RobotModel& model) {
  return impedance_torque<double>(s.q, s.qd, x0, gains, model);
}

namespace detail {

// One integration step under applied torque `tau_m`.
// (M + dt (B + D_v) + dt^2 K_q) qd' = M qd + dt (tau_m + tau_e - C - G) + dt D_v qd
// q' = q + dt qd'
// D_v and K_q are zero for the semi-implicit scheme.
template <class S>
void integrate(const VecT<S>& q, const VecT<S>& qd, const VecT<S>& tau_m, const MatT<S>& Dv,
               const MatT<S>& Kq, const ContactMode& mode, double dt, const RobotModel& model,
               VecT<S>& q_next, VecT<S>& qd_next) {
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be positive");
  const MatT<S> M = mass_matrix<S>(q, model);
  VecT<S> C, G;
  bias_torques<S>(q, qd, model, C, G);
  const VecT<S> tau_e = external_torque<S>(q, mode, model);
  MatT<S> H = M + dt * Dv + (dt * dt) * Kq;
  for (int i = 0; i < model.n; ++i) H(i, i) += dt * model.damping[i];
  const VecT<S> rhs = M * qd + dt * (tau_m + tau_e - C - G) + dt * (Dv * qd);
  qd_next = solve_spd<S>(H, rhs);
  q_next = q + dt * qd_next;
}

// Linearized contact stiffness sum_i J_i^T (K_i K_i^T / |K_i|) J_i.
template <class S>
MatT<S> contact_stiffness(const VecT<S>& q, const ContactMode& mode, const RobotModel& model) {
  MatT<S> Kq = MatT<S>::Constant(model.n, model.n, S(0.0));
  for (const auto& cp : mode.contacts) {
    const MatT<S> Ji = jacobian<S>(q, model, cp.attach);
    const Mat Kc = cp.K * cp.K.transpose() / cp.K.norm();
    Kq += Ji.transpose() * (Kc.cast<S>() * Ji);
  }
  return Kq;
}

}  // namespace detail

template <class S>
void step(const VecT<S>& q, const VecT<S>& qd, const ContactMode& mode, const VecT<S>& x0,
          double dt, const RobotModel& model, const ImpedanceGains& gains, VecT<S>& q_next,
          VecT<S>& qd_next) {
  detail::check_q(model, q.size());
  const VecT<S> tau_m = impedance_torque<S>(q, qd, x0, gains, model);
  MatT<S> Dv = MatT<S>::Constant(model.n, model.n, S(0.0));
  MatT<S> Kq = Dv;
  if (model.integrator == Integrator::kLinearlyImplicit) {
    const MatT<S> J = jacobian<S>(q, model, Vec::Zero(model.m));
    const Mat Dimp = gains.damping.asDiagonal();
    const Mat Kimp = gains.stiffness.asDiagonal();
    Dv = J.transpose() * (Dimp.cast<S>() * J);
    Kq = J.transpose() * (Kimp.cast<S>() * J) + detail::contact_stiffness<S>(q, mode, model);
  }
  detail::integrate<S>(q, qd, tau_m, Dv, Kq, mode, dt, model, q_next, qd_next);
}

// One control step of the impedance-controlled robot in contact mode `mode`.
inline JointState step(const JointState& state, const ContactMode& mode, const Vec& x0, double dt,
                       const RobotModel& model, const ImpedanceGains& gains) {
  JointState out;
  step<double>(state.q, state.qd, mode, x0, dt, model, gains, out.q, out.qd);
  return out;
}

// Step under a raw joint torque instead of the impedance law.
inline JointState step_with_torque(const JointState& state, const ContactMode& mode,
                                   const Vec& tau_m, double dt, const RobotModel& model) {
  detail::check_q(model, state.q.size());
  Mat Dv = Mat::Zero(model.n, model.n);
  Mat Kq = Dv;
  if (model.integrator == Integrator::kLinearlyImplicit) {
    Kq = detail::contact_stiffness<double>(state.q, mode, model);
  }
  JointState out;
  detail::integrate<double>(state.q, state.qd, tau_m, Dv, Kq, mode, dt, model, out.q, out.qd);
  return out;
}

// y = [q; tau_e(q, z)], plus N(0, R_y) noise when `noise` and `rng` are given.
inline Vec observe(const JointState& state, const ContactMode& mode, const RobotModel& model,
                   const NoiseModel* noise = nullptr, std::mt19937_64* rng = nullptr) {
  Vec y(2 * model.n);
  y << state.q, external_torque(state.q, mode, model);
  if (noise != nullptr && rng != nullptr) {
    const Eigen::LLT<Mat> llt(noise->R_y);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("observe: R_y not positive definite");
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec e(y.size());
    for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = normal(*rng);
    y += llt.matrixL() * e;
  }
  return y;
}

struct StepLinearization {
  JointState next;
  Mat A;   // d xi' / d xi
  Mat Bu;  // d xi' / d x0
};

inline StepLinearization dynamics_jacobians(const JointState& state, const ContactMode& mode,
                                            const Vec& x0, double dt, const RobotModel& model,
                                            const ImpedanceGains& gains) {
  const int n = model.n;
  const int total = 2 * n + model.m;
  const VecT<AD> q = seed(state.q, 0, total);
  const VecT<AD> qd = seed(state.qd, n, total);
  const VecT<AD> u = seed(x0, 2 * n, total);
  VecT<AD> qn, qdn;
  step<AD>(q, qd, mode, u, dt, model, gains, qn, qdn);
  VecT<AD> out(2 * n);
  out << qn, qdn;
  const Mat Jfull = jacobian_of(out, total);
  StepLinearization lin;
  lin.next = {values_of<AD>(qn), values_of<AD>(qdn)};
  lin.A = Jfull.leftCols(2 * n);
  lin.Bu = Jfull.rightCols(model.m);
  return lin;
}

// C_z = [[I, 0], [d tau_e / dq, 0]].
inline Mat observation_jacobian(const JointState& state, const ContactMode& mode,
                                const RobotModel& model) {
  const int n = model.n;
  Mat C = Mat::Zero(2 * n, 2 * n);
  C.topLeftCorner(n, n).setIdentity();
  if (!mode.contacts.empty()) {
    const VecT<AD> q = seed(state.q, 0, n);
    const VecT<AD> tau = external_torque<AD>(q, mode, model);
    C.bottomLeftCorner(n, n) = jacobian_of(tau, n);
  }
  return C;
}

}  // namespace cmpc
