#pragma once

// Weighted iCEM over the hybrid particle set.

#include "cmpc/colored_noise.hpp"
#include "cmpc/cost.hpp"
#include "cmpc/parallel.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace cmpc {

struct CemParams {
  int n_samples = 128;
  int n_iter = 5;
  int elite = 10;
  double beta = 2.0;
  Vec lo;  // action box, d entries
  Vec hi;
  double weight_floor = 1e-3;
  double std_floor = 1e-4;
  double std_init = 1.0;
  int workers = 1;

  void validate(int d) const {
    require(n_samples >= 1, "cem: n_samples must be positive");
    require(n_iter >= 0, "cem: n_iter must be non-negative");
    require(elite >= 1 && elite <= n_samples, "cem: elite size must be in [1, n_samples]");
    require(beta >= 0.0, "cem: beta must be non-negative");
    require(lo.size() == d && hi.size() == d && (lo.array() < hi.array()).all(),
            "cem: action bounds must have d entries with lo < hi");
    require(weight_floor > 0.0 && std_floor > 0.0 && std_init > 0.0, "cem: floors must be positive");
  }
};

// One filter particle as seen by the planner.
struct PlannerParticle {
  JointState xi;
  double weight = 1.0;
  int mode = 0;
};

struct Rollout {
  std::vector<JointState> states;  // h + 1 states, states[0] = xi0
  double cost = 0.0;
};

struct CemIteration {
  double best_cost;        // best so far
  double elite_mean_cost;  // mean normalized cost of this iteration's elite set
  double std_norm;
};

struct CemResult {
  Mat best_actions;  // d x h
  double best_cost = 0.0;
  std::vector<Rollout> mode_rollouts;  // best actions from each mode's conditioned state
  Mat mean;
  Mat std;
  std::vector<CemIteration> trace;
  long rollout_steps = 0;  // dynamics steps taken, a deterministic work measure
};

// Cost of applying `actions` (d x h) from xi0 under mode z:
// sum over tau < h of l(xi_tau, u_tau, z).
inline Rollout rollout_cost(const JointState& xi0, int z, const Mat& actions, const CostParams& cost,
                            const Plant& plant) {
  Rollout r;
  const auto h = actions.cols();
  r.states.reserve(h + 1);
  r.states.push_back(xi0);
  for (Eigen::Index t = 0; t < h; ++t) {
    const Vec u = actions.col(t);
    r.cost += stage_cost(r.states.back(), u, z, cost, plant.robot);
    r.states.push_back(step(r.states.back(), plant.modes[z], u, plant.dt, plant.robot, plant.gains));
  }
  return r;
}

// Rollout cost of a particle divided by its weight.
inline double normalized_cost(const PlannerParticle& p, const Mat& actions, const CostParams& cost,
                              const Plant& plant, double weight_floor) {
  return rollout_cost(p.xi, p.mode, actions, cost, plant).cost / std::max(p.weight, weight_floor);
}

namespace detail {

inline Mat clip_actions(Mat u, const Vec& lo, const Vec& hi) {
  for (Eigen::Index t = 0; t < u.cols(); ++t) u.col(t) = u.col(t).cwiseMax(lo).cwiseMin(hi);
  return u;
}

inline Mat sample_noise(double beta, int d, int h, std::mt19937_64& rng) {
  if (h >= 2) return colored_noise(beta, d, h, 1, rng).front();
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat e(d, h);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = normal(rng);
  return e;
}

}  // namespace detail

// Core iCEM loop over a generic sample cost `evaluate(k, actions)`, where k is
// the sample's index within its iteration. The incumbent best sample is
// re-injected as sample 0 of every iteration.
template <class Evaluate>
CemResult icem_optimize(const Mat& warm_mean, const CemParams& params, Evaluate&& evaluate, std::mt19937_64& rng) {
  const int d = static_cast<int>(warm_mean.rows());
  const int h = static_cast<int>(warm_mean.cols());
  require(h >= 1, "cem: horizon must be positive");
  params.validate(d);

  CemResult res;
  res.mean = detail::clip_actions(warm_mean, params.lo, params.hi);
  res.std = Mat::Constant(d, h, params.std_init);
  res.best_actions = res.mean;
  res.best_cost = evaluate(0, res.best_actions);
  res.rollout_steps += h;

  const unsigned long long base = rng();
  const int N = params.n_samples;
  std::vector<Mat> samples(N);
  std::vector<double> costs(N);
  for (int it = 0; it < params.n_iter; ++it) {
    samples[0] = res.best_actions;
    for (int k = 1; k < N; ++k) {
      std::mt19937_64 stream(derive_seed(base, static_cast<unsigned long long>(it), static_cast<unsigned long long>(k)));
      const Mat noise = detail::sample_noise(params.beta, d, h, stream);
      samples[k] = detail::clip_actions(res.mean + noise.cwiseProduct(res.std), params.lo, params.hi);
    }
    parallel_for(N, params.workers, [&](int k) { costs[k] = evaluate(k, samples[k]); });
    res.rollout_steps += static_cast<long>(N) * h;

    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return costs[a] < costs[b]; });
    if (costs[order[0]] < res.best_cost) {
      res.best_cost = costs[order[0]];
      res.best_actions = samples[order[0]];
    }

    const int K = params.elite;
    Mat mean = Mat::Zero(d, h);
    double elite_cost = 0.0;
    for (int e = 0; e < K; ++e) {
      mean += samples[order[e]];
      elite_cost += costs[order[e]];
    }
    mean /= K;
    Mat var = Mat::Zero(d, h);
    for (int e = 0; e < K; ++e) var += (samples[order[e]] - mean).cwiseAbs2();
    res.mean = mean;
    res.std = (var / K).cwiseSqrt().cwiseMax(params.std_floor);
    res.trace.push_back({res.best_cost, elite_cost / K, res.std.norm()});
  }
  return res;
}

// Weighted iCEM on the hybrid plant. Sample k is rolled out from particle
// k mod N_p under that particle's mode, and its cost is divided by
// max(w, weight_floor). `mode_states` gives, per mode id, the state from which
// the best actions are re-rolled for the MPC warm start.
inline CemResult icem_plan(const std::vector<PlannerParticle>& particles, const Mat& warm_mean,
                           const CemParams& params, const CostParams& cost, const Plant& plant,
                           const std::vector<JointState>& mode_states, std::mt19937_64& rng) {
  require(!particles.empty(), "cem: particle list is empty");
  require(warm_mean.rows() == plant.robot.m, "cem: action dimension must equal the Cartesian dimension");
  require(static_cast<int>(mode_states.size()) == plant.n_modes(), "cem: need one conditioned state per mode");
  const auto evaluate = [&](int k, const Mat& u) {
    return normalized_cost(particles[static_cast<std::size_t>(k) % particles.size()], u, cost, plant,
                           params.weight_floor);
  };
  CemResult res = icem_optimize(warm_mean, params, evaluate, rng);
  res.mode_rollouts.reserve(plant.n_modes());
  for (int z = 0; z < plant.n_modes(); ++z) {
    res.mode_rollouts.push_back(rollout_cost(mode_states[z], z, res.best_actions, cost, plant));
    res.rollout_steps += warm_mean.cols();
  }
  return res;
}

// Previous plan shifted one step with the last action repeated.
inline Mat shift_plan(const Mat& actions) {
  Mat out(actions.rows(), actions.cols());
  if (actions.cols() == 0) return out;
  out.leftCols(actions.cols() - 1) = actions.rightCols(actions.cols() - 1);
  out.col(actions.cols() - 1) = actions.col(actions.cols() - 1);
  return out;
}

}  // namespace cmpc
