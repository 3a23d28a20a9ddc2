#pragma once

// Hybrid particle filter: each particle carries a mode-conditioned EKF.

#include "cmpc/dynamics.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <vector>

namespace cmpc {

struct Particle {
  Vec mu;
  Mat Sigma;
  Vec mode_probs;
  int sampled_mode = -1;  // -1 until the first step
  double weight = 0.0;
};

struct HybridBelief {
  std::vector<Particle> particles;
  Vec mode_belief;
  bool diverged = false;  // set when every likelihood underflowed on the last step
};

struct EkfResult {
  Vec mu;
  Mat Sigma;
  Vec y_pred;
  Mat S;
  double log_likelihood = 0.0;  // log N(y; y_pred, S)
  bool regularized = false;
};

struct FilterOptions {
  bool ess_gate = false;  // resample only when ESS < ess_fraction * N
  double ess_fraction = 0.5;
};

// Impedance-controlled robot under a fixed mode set, as seen by the filter.
struct RobotHybridModel {
  RobotModel robot;
  ModeSet modes;
  ImpedanceGains gains;
  NoiseModel noise;
  double dt = 0.05;

  int state_dim() const { return 2 * robot.n; }
  int n_modes() const { return static_cast<int>(modes.size()); }
  const Mat& process_noise() const { return noise.Q; }
  const Mat& measurement_noise() const { return noise.R_y; }

  void predict(const Vec& xi, int z, const Vec& u, Vec& xi_next, Mat& A) const {
    const auto lin = dynamics_jacobians(JointState::from_stacked(xi), modes[z], u, dt, robot, gains);
    xi_next = lin.next.stacked();
    A = lin.A;
  }
  void measure(const Vec& xi, int z, Vec& y, Mat& C) const {
    const auto s = JointState::from_stacked(xi);
    y = observe(s, modes[z], robot);
    C = observation_jacobian(s, modes[z], robot);
  }
};

// Switched affine system x' = A_z x + b_z + w, y = C_z x + d_z + v.
struct LinearHybridModel {
  std::vector<Mat> A, C;
  std::vector<Vec> b, d;
  Mat Q, R;

  int state_dim() const { return static_cast<int>(Q.rows()); }
  int n_modes() const { return static_cast<int>(A.size()); }
  const Mat& process_noise() const { return Q; }
  const Mat& measurement_noise() const { return R; }

  void predict(const Vec& x, int z, const Vec& /*u*/, Vec& x_next, Mat& Az) const {
    Az = A[z];
    x_next = A[z] * x + b[z];
  }
  void measure(const Vec& x, int z, Vec& y, Mat& Cz) const {
    Cz = C[z];
    y = C[z] * x + d[z];
  }
};

namespace detail {

inline Mat clamp_psd(const Mat& P) {
  const Mat sym = 0.5 * (P + P.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> eig(sym);
  if (eig.eigenvalues().minCoeff() >= 0.0) return sym;
  const Vec lam = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

inline void validate_transition(const Mat& T) {
  require(T.rows() == T.cols() && T.rows() >= 1, "transition matrix must be square");
  for (Eigen::Index a = 0; a < T.rows(); ++a) {
    require((T.row(a).array() >= 0.0).all(), "transition matrix entries must be non-negative");
    require(std::abs(T.row(a).sum() - 1.0) <= 1e-9, "transition matrix rows must sum to 1");
    for (Eigen::Index b = 0; b < T.cols(); ++b) {
      require(T(a, a) >= T(a, b), "transition matrix must be diagonally dominant");
    }
  }
}

inline int sample_categorical(const Vec& p, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * p.sum();
  double acc = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    acc += p[k];
    if (u < acc) return static_cast<int>(k);
  }
  for (Eigen::Index k = p.size() - 1; k >= 0; --k) {
    if (p[k] > 0.0) return static_cast<int>(k);
  }
  return 0;
}

}  // namespace detail

// One EKF predict/update under mode z. S is regularized by 1e-9 I if it is
// not positive definite.
template <class Model>
EkfResult ekf_step(const Model& model, const Vec& mu, const Mat& Sigma, int z, const Vec& u,
                   const Vec& y) {
  EkfResult r;
  Vec mu_pred;
  Mat A;
  model.predict(mu, z, u, mu_pred, A);
  const Mat P = A * Sigma * A.transpose() + model.process_noise();

  Mat C;
  model.measure(mu_pred, z, r.y_pred, C);
  r.S = C * P * C.transpose() + model.measurement_noise();
  r.S = 0.5 * (r.S + r.S.transpose());
  Eigen::LLT<Mat> llt(r.S);
  if (llt.info() != Eigen::Success) {
    r.S += 1e-9 * Mat::Identity(r.S.rows(), r.S.cols());
    llt.compute(r.S);
    r.regularized = true;
  }
  const Vec e = y - r.y_pred;
  const Mat PCt = P * C.transpose();
  const Mat K = llt.solve(PCt.transpose()).transpose();
  r.mu = mu_pred + K * e;
  const Mat IKC = Mat::Identity(P.rows(), P.cols()) - K * C;
  r.Sigma = detail::clamp_psd(IKC * P * IKC.transpose() + K * model.measurement_noise() * K.transpose());

  const Vec white = llt.matrixL().solve(e);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  r.log_likelihood =
      -0.5 * (white.squaredNorm() + logdet + static_cast<double>(e.size()) * std::log(2.0 * std::numbers::pi));
  return r;
}

// Low-variance resampling: one uniform offset, N evenly spaced pointers.
inline std::vector<int> systematic_resample(const Vec& weights, std::mt19937_64& rng) {
  const auto N = static_cast<int>(weights.size());
  require(N > 0, "resample: empty weight vector");
  const double total = weights.sum();
  require(total > 0.0 && std::isfinite(total), "resample: weights must have positive finite sum");
  std::vector<int> idx(N);
  const double step = total / N;
  double pointer = std::uniform_real_distribution<double>(0.0, step)(rng);
  double cumulative = weights[0];
  int i = 0;
  for (int k = 0; k < N; ++k) {
    while (pointer > cumulative && i < N - 1) {
      ++i;
      cumulative += weights[i];
    }
    idx[k] = i;
    pointer += step;
  }
  return idx;
}

// Normalized weight mass per sampled mode.
inline Vec mode_belief(const std::vector<Particle>& particles, int n_modes) {
  Vec b = Vec::Zero(n_modes);
  for (const auto& p : particles) {
    if (p.sampled_mode >= 0) b[p.sampled_mode] += p.weight;
  }
  const double s = b.sum();
  if (s > 0.0) return b / s;
  // Before the first step the belief is the weighted prior.
  for (const auto& p : particles) b += p.weight * p.mode_probs;
  return b / b.sum();
}

inline Vec mode_belief(const HybridBelief& belief) {
  require(!belief.particles.empty(), "mode_belief: no particles");
  return mode_belief(belief.particles, static_cast<int>(belief.particles.front().mode_probs.size()));
}

struct ConditionedState {
  Vec mean;
  bool found = false;
};

// Weighted mean of mu over particles whose sampled mode is z, falling back to
// the overall weighted mean.
inline ConditionedState mode_conditioned_state(const HybridBelief& belief, int z) {
  require(!belief.particles.empty(), "mode_conditioned_state: no particles");
  const auto dim = belief.particles.front().mu.size();
  Vec acc = Vec::Zero(dim), all = Vec::Zero(dim);
  double w = 0.0, w_all = 0.0;
  for (const auto& p : belief.particles) {
    all += p.weight * p.mu;
    w_all += p.weight;
    if (p.sampled_mode == z) {
      acc += p.weight * p.mu;
      w += p.weight;
    }
  }
  if (w > 0.0) return {acc / w, true};
  if (w_all > 0.0) return {all / w_all, false};
  Vec mean = Vec::Zero(dim);
  for (const auto& p : belief.particles) mean += p.mu;
  return {mean / static_cast<double>(belief.particles.size()), false};
}

inline HybridBelief initial_belief(int count, const Vec& mu0, const Mat& Sigma0, const Vec& prior) {
  require(count >= 1, "filter: need at least one particle");
  require(std::abs(prior.sum() - 1.0) <= 1e-9 && (prior.array() >= 0).all(),
          "filter: mode prior must lie on the simplex");
  HybridBelief b;
  b.particles.assign(count, Particle{mu0, Sigma0, prior, -1, 1.0 / count});
  b.mode_belief = prior;
  return b;
}

// One step of the hybrid particle filter. A particle that has sampled a mode
// propagates its mode probabilities from that mode's row of T; before the
// first sample the carried distribution is pushed through T.
template <class Model>
HybridBelief pf_step(const HybridBelief& belief, const Mat& T, const Vec& u, const Vec& y,
                     const Model& model, std::mt19937_64& rng, const FilterOptions& options = {}) {
  require(!belief.particles.empty(), "pf_step: no particles");
  require(T.rows() == model.n_modes(), "pf_step: transition matrix does not match the mode count");
  detail::validate_transition(T);
  const int N = static_cast<int>(belief.particles.size());

  HybridBelief next;
  next.particles.resize(N);
  std::vector<int> modes(N);
  for (int i = 0; i < N; ++i) {
    const auto& p = belief.particles[i];
    Vec probs = p.sampled_mode >= 0 ? Vec(T.row(p.sampled_mode).transpose())
                                    : Vec(T.transpose() * p.mode_probs);
    probs /= probs.sum();
    next.particles[i].mode_probs = probs;
    modes[i] = detail::sample_categorical(probs, rng);
  }

  std::vector<double> logw(N);
  for (int i = 0; i < N; ++i) {
    const auto& p = belief.particles[i];
    auto r = ekf_step(model, p.mu, p.Sigma, modes[i], u, y);
    auto& q = next.particles[i];
    q.mu = std::move(r.mu);
    q.Sigma = std::move(r.Sigma);
    q.sampled_mode = modes[i];
    logw[i] = std::log(std::max(p.weight, std::numeric_limits<double>::min())) + r.log_likelihood;
  }

  double lmax = -std::numeric_limits<double>::infinity();
  for (double l : logw) {
    if (std::isfinite(l)) lmax = std::max(lmax, l);
  }
  Vec w(N);
  if (!std::isfinite(lmax)) {
    w.setConstant(1.0 / N);
    next.diverged = true;
  } else {
    for (int i = 0; i < N; ++i) w[i] = std::isfinite(logw[i]) ? std::exp(logw[i] - lmax) : 0.0;
    w /= w.sum();
  }
  for (int i = 0; i < N; ++i) next.particles[i].weight = w[i];
  next.mode_belief = mode_belief(next.particles, model.n_modes());

  const double ess = 1.0 / w.squaredNorm();
  if (!options.ess_gate || ess < options.ess_fraction * N) {
    const auto idx = systematic_resample(w, rng);
    std::vector<Particle> resampled(N);
    for (int k = 0; k < N; ++k) {
      resampled[k] = next.particles[idx[k]];
      resampled[k].weight = 1.0 / N;
    }
    next.particles = std::move(resampled);
  }
  return next;
}

// One CSV block per step: a row per particle and one belief row.
inline void write_filter_header(std::ostream& os, int state_dim, int n_modes) {
  os << "# cmpc-filter-state v1\n";
  os << "step,kind,index,weight,mode";
  for (int i = 0; i < state_dim; ++i) os << ",mu_" << i;
  for (int z = 0; z < n_modes; ++z) os << ",p_" << z;
  os << '\n';
}

inline void write_filter_rows(std::ostream& os, int step, const HybridBelief& belief) {
  const auto nz = belief.mode_belief.size();
  const auto dim = belief.particles.empty() ? 0 : belief.particles.front().mu.size();
  for (std::size_t i = 0; i < belief.particles.size(); ++i) {
    const auto& p = belief.particles[i];
    os << step << ",particle," << i << ',' << p.weight << ',' << p.sampled_mode;
    for (Eigen::Index k = 0; k < dim; ++k) os << ',' << p.mu[k];
    for (Eigen::Index z = 0; z < nz; ++z) os << ',' << p.mode_probs[z];
    os << '\n';
  }
  os << step << ",belief,-1,1,-1";
  for (Eigen::Index k = 0; k < dim; ++k) os << ',';
  for (Eigen::Index z = 0; z < nz; ++z) os << ',' << belief.mode_belief[z];
  os << '\n';
}

}  // namespace cmpc
