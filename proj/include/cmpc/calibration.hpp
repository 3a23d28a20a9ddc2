#pragma once

// Least-squares identification of stiffness contacts from joint torque data.

#include "cmpc/dynamics.hpp"

#include <unsupported/Eigen/LevenbergMarquardt>

#include <vector>

namespace cmpc {

struct TorqueSample {
  Vec q;
  Vec tau;  // measured external joint torque
};

struct CalibrationOptions {
  bool fit_attachment = false;  // also fit the TCP-frame contact point (needs rich excitation)
  int max_evaluations = 2000;
};

struct CalibrationResult {
  std::vector<ContactPoint> contacts;
  double residual = 0.0;  // sum of squared torque residuals
  int evaluations = 0;
  bool converged = false;
  bool identifiable = true;
};

namespace detail {

// Per contact the parameters are [K (m), b = K^T x^o, attach (m, optional)].
struct ContactParamLayout {
  int m = 2;
  int contacts = 1;
  bool attach = false;
  int per_contact() const { return m + 1 + (attach ? m : 0); }
  int total() const { return contacts * per_contact(); }
};

template <class S>
VecT<S> predicted_external_torque(const Vec& q, const VecT<S>& params, const ContactParamLayout& layout,
                                  const RobotModel& model) {
  const auto pose = forward_kinematics<double>(q, model);
  std::vector<Eigen::Matrix<double, 2, 1>> origins;
  std::vector<double> angles;
  if (model.kind == RobotKind::kPlanarArm) planar_chain<double>(model, q, origins, angles);

  VecT<S> tau = VecT<S>::Constant(model.n, S(0.0));
  for (int c = 0; c < layout.contacts; ++c) {
    const int off = c * layout.per_contact();
    VecT<S> K = params.segment(off, layout.m);
    const S b = params[off + layout.m];
    VecT<S> p(layout.m);
    for (int i = 0; i < layout.m; ++i) p[i] = S(pose.x[i]);
    if (layout.attach) {
      const VecT<S> a = params.segment(off + layout.m + 1, layout.m);
      p += pose.R.cast<S>() * a;
    }
    using std::sqrt;
    S knorm2 = S(0.0);
    for (int i = 0; i < layout.m; ++i) knorm2 += K[i] * K[i];
    const S knorm = sqrt(knorm2);
    S f = b;
    for (int i = 0; i < layout.m; ++i) f -= K[i] * p[i];
    VecT<S> F(layout.m);
    for (int i = 0; i < layout.m; ++i) F[i] = f * K[i] / knorm;
    if (model.kind == RobotKind::kPointMass) {
      tau += F;
    } else {
      for (int j = 0; j < model.n; ++j) {
        const S rx = p[0] - origins[j][0];
        const S ry = p[1] - origins[j][1];
        tau[j] += -ry * F[0] + rx * F[1];
      }
    }
  }
  return tau;
}

struct ContactFitFunctor : Eigen::DenseFunctor<double> {
  const std::vector<TorqueSample>* data;
  const RobotModel* model;
  ContactParamLayout layout;

  ContactFitFunctor(const std::vector<TorqueSample>& d, const RobotModel& r, ContactParamLayout l)
      : Eigen::DenseFunctor<double>(l.total(), static_cast<int>(d.size()) * r.n),
        data(&d),
        model(&r),
        layout(l) {}

  int operator()(const Vec& params, Vec& fvec) const {
    const int n = model->n;
    for (std::size_t t = 0; t < data->size(); ++t) {
      const auto& s = (*data)[t];
      fvec.segment(t * n, n) = s.tau - predicted_external_torque<double>(s.q, params, layout, *model);
    }
    return 0;
  }

  int df(const Vec& params, Mat& fjac) const {
    const int n = model->n;
    const int P = layout.total();
    const VecT<AD> p = seed(params, 0, P);
    for (std::size_t t = 0; t < data->size(); ++t) {
      const auto& s = (*data)[t];
      const VecT<AD> tau = predicted_external_torque<AD>(s.q, p, layout, *model);
      fjac.block(t * n, 0, n, P) = -jacobian_of(tau, P);
    }
    return 0;
  }
};

// Linear initial guess: Cartesian forces per sample from J^T F = tau, an
// affine fit F = -S x + c, and the leading eigenpairs of S as contact normals.
inline Vec initial_contact_guess(const std::vector<TorqueSample>& data, int n_contacts,
                                 const RobotModel& model, const ContactParamLayout& layout) {
  const int m = model.m;
  const auto N = static_cast<Eigen::Index>(data.size());
  Mat A(N, m + 1);
  Mat Fs(N, m);
  for (Eigen::Index t = 0; t < N; ++t) {
    const auto& s = data[t];
    const Mat J = jacobian(s.q, model);
    const Vec F = J.transpose().colPivHouseholderQr().solve(s.tau);
    A.row(t) << -forward_kinematics(s.q, model).x.transpose(), 1.0;
    Fs.row(t) = F.transpose();
  }
  const Mat coef = A.colPivHouseholderQr().solve(Fs);  // (m+1) x m
  // F = sum_k n_k b_k - (sum_k K_k K_k^T / |K_k|) x
  Mat S = coef.topRows(m).transpose();
  S = 0.5 * (S + S.transpose());
  const Vec c = coef.row(m).transpose();
  Eigen::SelfAdjointEigenSolver<Mat> eig(S);
  Vec params = Vec::Zero(layout.total());
  for (int k = 0; k < n_contacts; ++k) {
    const int idx = m - 1 - (k % m);
    Vec nrm = eig.eigenvectors().col(idx);
    const double lambda = std::max(std::abs(eig.eigenvalues()[idx]), 1e-9);
    const int off = k * layout.per_contact();
    params.segment(off, m) = lambda * nrm;
    params[off + m] = nrm.dot(c);
  }
  return params;
}

}  // namespace detail

// Fits n_contacts stiffness elements to (q, tau) samples by Levenberg-Marquardt
// on sum_t |tau_t - tau_e(q_t)|^2. The rest pose is identifiable only along the
// contact normal; the returned rest pose is the point on that normal line
// closest to the origin.
inline CalibrationResult calibrate_contact(const std::vector<TorqueSample>& data, int n_contacts,
                                           const RobotModel& model,
                                           const CalibrationOptions& options = {}) {
  require(n_contacts >= 1, "calibrate: n_contacts must be >= 1");
  detail::ContactParamLayout layout{model.m, n_contacts, options.fit_attachment};
  require(static_cast<int>(data.size()) >= 10 * layout.total(),
          "calibrate: dataset needs at least 10x the parameter count (" +
              std::to_string(10 * layout.total()) + " samples)");
  for (const auto& s : data) {
    require(s.q.size() == model.n && s.tau.size() == model.n, "calibrate: sample dimension mismatch");
  }

  CalibrationResult result;
  double max_tau = 0.0;
  for (const auto& s : data) max_tau = std::max(max_tau, s.tau.cwiseAbs().maxCoeff());
  if (max_tau <= 1e-12) {
    // Every zero-stiffness configuration explains the data.
    result.identifiable = false;
    result.converged = true;
    for (int k = 0; k < n_contacts; ++k) {
      result.contacts.push_back({Vec::Zero(model.m), Vec::Zero(model.m), Vec::Zero(model.m)});
    }
    return result;
  }

  Vec params = detail::initial_contact_guess(data, n_contacts, model, layout);
  detail::ContactFitFunctor functor(data, model, layout);
  Eigen::LevenbergMarquardt<detail::ContactFitFunctor> lm(functor);
  lm.setMaxfev(options.max_evaluations);
  lm.setXtol(1e-14);
  lm.setFtol(1e-14);
  const auto status = lm.minimize(params);

  Vec fvec(functor.values());
  functor(params, fvec);
  result.residual = fvec.squaredNorm();
  result.evaluations = static_cast<int>(lm.nfev());
  result.converged = status != Eigen::LevenbergMarquardtSpace::TooManyFunctionEvaluation &&
                     status != Eigen::LevenbergMarquardtSpace::ImproperInputParameters &&
                     params.allFinite();

  Mat fjac(functor.values(), functor.inputs());
  functor.df(params, fjac);
  Eigen::ColPivHouseholderQR<Mat> qr(fjac);
  qr.setThreshold(1e-9);
  result.identifiable = qr.rank() == layout.total();

  for (int k = 0; k < n_contacts; ++k) {
    const int off = k * layout.per_contact();
    ContactPoint cp;
    cp.K = params.segment(off, model.m);
    // F is invariant under (K, b) -> (-K, -b); report the largest component positive.
    Eigen::Index imax;
    cp.K.cwiseAbs().maxCoeff(&imax);
    double b = params[off + model.m];
    if (cp.K[imax] < 0) {
      cp.K = -cp.K;
      b = -b;
    }
    const double k2 = cp.K.squaredNorm();
    cp.rest = k2 > 0 ? Vec(cp.K * (b / k2)) : Vec::Zero(model.m);
    cp.attach = options.fit_attachment ? Vec(params.segment(off + model.m + 1, model.m))
                                       : Vec::Zero(model.m);
    result.contacts.push_back(cp);
  }
  return result;
}

}  // namespace cmpc
