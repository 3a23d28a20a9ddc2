#pragma once

// Deterministic solve-time model. Times are charged per unit of work so that
// benchmark CSVs do not depend on the machine or its load.

#include "cmpc/cem.hpp"
#include "cmpc/dynamics.hpp"
#include "cmpc/nlp.hpp"

namespace cmpc {

struct WorkClock {
  double step_s = 7.9e-6;           // one dynamics step
  double linearization_s = 119e-6;  // one dynamics_jacobians call plus its cost derivatives
  double flop_s = 0.2e-9;           // dense factorization work

  static WorkClock for_robot(const RobotModel& robot) {
    if (robot.kind == RobotKind::kPointMass) return {2.7e-6, 27.7e-6, 0.2e-9};
    return {};
  }

  void validate() const {
    require(step_s > 0.0 && linearization_s > 0.0 && flop_s > 0.0, "work clock: costs must be positive");
  }

  double mpc_seconds(const SolveStats& s) const {
    return static_cast<double>(s.linearizations) * linearization_s + static_cast<double>(s.steps) * step_s +
           s.work.factor_flops * flop_s;
  }
  double cem_seconds(const CemResult& r) const { return static_cast<double>(r.rollout_steps) * step_s; }
};

}  // namespace cmpc
