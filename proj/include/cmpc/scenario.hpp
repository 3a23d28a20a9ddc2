#pragma once

// Scenario documents: JSON with unit-suffixed field names, validated on load.
// Every error message starts with the JSON path of the offending field.

#include "cmpc/cem.hpp"
#include "cmpc/estimator.hpp"
#include "cmpc/interior_point.hpp"
#include "cmpc/nlp.hpp"
#include "cmpc/work_clock.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmpc {

using Json = nlohmann::json;

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// A JSON node together with its path from the document root.
class Node {
 public:
  Node(const Json& j, std::string path) : j_(&j), path_(std::move(path)) {}

  const std::string& path() const { return path_; }
  [[noreturn]] void fail(const std::string& what) const { throw ScenarioError(path_ + ": " + what); }

  bool has(const char* key) const { return j_->is_object() && j_->contains(key); }
  Node at(const char* key) const {
    if (!j_->is_object()) fail("expected an object");
    if (!j_->contains(key)) throw ScenarioError(child_path(key) + ": missing required field");
    return {(*j_)[key], child_path(key)};
  }
  std::optional<Node> opt(const char* key) const {
    if (!has(key)) return std::nullopt;
    return at(key);
  }
  Node operator[](std::size_t i) const {
    if (!j_->is_array()) fail("expected an array");
    if (i >= j_->size()) fail("index " + std::to_string(i) + " out of range");
    return {(*j_)[i], path_ + "[" + std::to_string(i) + "]"};
  }
  std::size_t size() const {
    if (!j_->is_array()) fail("expected an array");
    return j_->size();
  }
  void only(std::initializer_list<const char*> keys) const {
    if (!j_->is_object()) fail("expected an object");
    for (auto it = j_->begin(); it != j_->end(); ++it) {
      bool known = false;
      for (const char* k : keys) known = known || it.key() == k;
      if (!known) throw ScenarioError(child_path(it.key()) + ": unknown field");
    }
  }

  double number() const {
    if (!j_->is_number()) fail("expected a number");
    const double v = j_->get<double>();
    if (!std::isfinite(v)) fail("expected a finite number");
    return v;
  }
  double positive() const {
    const double v = number();
    if (!(v > 0.0)) fail("must be positive");
    return v;
  }
  double non_negative() const {
    const double v = number();
    if (v < 0.0) fail("must be non-negative");
    return v;
  }
  long integer() const {
    if (!j_->is_number_integer() && !j_->is_number_unsigned()) fail("expected an integer");
    return j_->get<long>();
  }
  int count(int min_value) const {
    const long v = integer();
    if (v < min_value || v > 1000000000L) fail("must be an integer >= " + std::to_string(min_value));
    return static_cast<int>(v);
  }
  std::uint64_t seed() const {
    if (!j_->is_number_unsigned() && !(j_->is_number_integer() && j_->get<long long>() >= 0))
      fail("expected a non-negative integer");
    return j_->get<std::uint64_t>();
  }
  bool boolean() const {
    if (!j_->is_boolean()) fail("expected true or false");
    return j_->get<bool>();
  }
  std::string string() const {
    if (!j_->is_string()) fail("expected a string");
    return j_->get<std::string>();
  }
  Vec vec(int expected = -1) const {
    const auto n = size();
    if (expected >= 0 && static_cast<int>(n) != expected)
      fail("expected " + std::to_string(expected) + " numbers, got " + std::to_string(n));
    Vec v(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) v[static_cast<Eigen::Index>(i)] = (*this)[i].number();
    return v;
  }
  Mat mat(int rows, int cols) const {
    if (static_cast<int>(size()) != rows) fail("expected " + std::to_string(rows) + " rows");
    Mat M(rows, cols);
    for (int r = 0; r < rows; ++r) M.row(r) = (*this)[static_cast<std::size_t>(r)].vec(cols).transpose();
    return M;
  }
  // A scalar broadcast to `n` entries, or a list of `n` numbers.
  Vec diag(int n) const {
    if (j_->is_number()) return Vec::Constant(n, number());
    return vec(n);
  }

 private:
  std::string child_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const Json* j_;
  std::string path_;
};

}  // namespace detail

// Mode i is active when every rule holds for the TCP position; the last
// active mode in list order wins, so mode 0 (no rules) is the fallback.
struct ActivationRule {
  int axis = 0;
  double max_m = 0.0;
};

struct PlannerMismatch {
  double stiffness_scale = 1.0;
  double rest_offset_m = 0.0;  // along each contact normal
};

struct Scenario {
  std::string name;
  RobotModel robot;
  ImpedanceGains gains;
  ModeSet modes;                                   // ground truth
  std::vector<std::vector<ActivationRule>> rules;  // per mode
  PlannerMismatch mismatch;
  JointState initial;
  int steps = 100;
  double dt = 0.04;
  int substeps = 5;
  Mat transition;
  Vec process_std;      // 2n, filter process noise
  Vec measurement_std;  // 2n, [q; tau_e]
  bool measurement_noise = true;
  int particles = 50;
  Vec initial_std;  // 2n
  Vec prior;
  CostParams cost;
  NlpParams nlp;
  IpOptions ip;
  CemParams cem;
  WorkClock clock;
  std::uint64_t seed = 1;

  int n_modes() const { return static_cast<int>(modes.size()); }

  ModeSet planner_modes() const {
    ModeSet out = modes;
    for (auto& mode : out) {
      for (auto& cp : mode.contacts) {
        const Vec nrm = cp.K / cp.K.norm();
        cp.K *= mismatch.stiffness_scale;
        cp.rest += mismatch.rest_offset_m * nrm;
      }
    }
    return out;
  }
  Plant planner_plant() const { return {robot, planner_modes(), gains, dt}; }
  RobotHybridModel filter_model() const {
    RobotHybridModel m;
    m.robot = robot;
    m.modes = planner_modes();
    m.gains = gains;
    m.noise.Q = process_std.cwiseAbs2().asDiagonal();
    m.noise.R_y = measurement_std.cwiseAbs2().asDiagonal();
    m.dt = dt;
    return m;
  }
  NoiseModel measurement_model() const {
    NoiseModel nm;
    nm.Q = Mat::Zero(2 * robot.n, 2 * robot.n);
    nm.R_y = measurement_std.cwiseAbs2().asDiagonal();
    return nm;
  }

  int true_mode(const Vec& tcp) const {
    int active = 0;
    for (int z = 0; z < n_modes(); ++z) {
      bool ok = true;
      for (const auto& r : rules[z]) ok = ok && tcp[r.axis] <= r.max_m;
      if (ok) active = z;
    }
    return active;
  }
  int true_mode(const JointState& s) const { return true_mode(forward_kinematics(s.q, robot).x); }
};

namespace detail {

inline RobotModel parse_robot(const Node& n) {
  const std::string type = n.at("type").string();
  if (type == "planar_arm") {
    n.only({"type", "link_lengths_m", "link_masses_kg", "joint_damping_Nms", "gravity_mps2", "integrator"});
    const Vec L = n.at("link_lengths_m").vec();
    const int dof = static_cast<int>(L.size());
    if (dof < 1) n.at("link_lengths_m").fail("need at least one link");
    if ((L.array() <= 0).any()) n.at("link_lengths_m").fail("lengths must be positive");
    const Vec mass = n.at("link_masses_kg").vec(dof);
    if ((mass.array() <= 0).any()) n.at("link_masses_kg").fail("masses must be positive");
    const Vec damp = n.opt("joint_damping_Nms") ? n.at("joint_damping_Nms").diag(dof) : Vec::Zero(dof);
    const Vec grav = n.opt("gravity_mps2") ? n.at("gravity_mps2").vec(2) : Vec::Zero(2);
    RobotModel r = RobotModel::planar_arm(L, mass, damp, grav);
    if (auto integ = n.opt("integrator")) {
      const std::string s = integ->string();
      if (s == "linearly_implicit") r.integrator = Integrator::kLinearlyImplicit;
      else if (s == "semi_implicit") r.integrator = Integrator::kSemiImplicit;
      else integ->fail("expected \"linearly_implicit\" or \"semi_implicit\"");
    }
    return r;
  }
  if (type == "point_mass") {
    n.only({"type", "dim", "mass_kg", "damping_Nspm", "integrator"});
    const int dim = n.at("dim").count(1);
    RobotModel r = RobotModel::point_mass(dim, n.at("mass_kg").positive(),
                                          n.opt("damping_Nspm") ? n.at("damping_Nspm").non_negative() : 0.0);
    if (auto integ = n.opt("integrator")) {
      const std::string s = integ->string();
      if (s == "linearly_implicit") r.integrator = Integrator::kLinearlyImplicit;
      else if (s == "semi_implicit") r.integrator = Integrator::kSemiImplicit;
      else integ->fail("expected \"linearly_implicit\" or \"semi_implicit\"");
    }
    return r;
  }
  n.at("type").fail("expected \"planar_arm\" or \"point_mass\"");
}

inline ContactPoint parse_contact(const Node& n, int m) {
  n.only({"stiffness_Npm", "rest_m", "attach_m"});
  ContactPoint cp;
  cp.K = n.at("stiffness_Npm").vec(m);
  if (cp.K.norm() == 0.0) n.at("stiffness_Npm").fail("stiffness vector must be nonzero");
  cp.rest = n.at("rest_m").vec(m);
  cp.attach = n.opt("attach_m") ? n.at("attach_m").vec(m) : Vec::Zero(m);
  return cp;
}

inline Vec parse_state_part(const Node& n, int size) { return n.diag(size); }

}  // namespace detail

inline Scenario parse_scenario(const Json& doc) {
  using detail::Node;
  const Node root(doc, "");
  root.only({"schema", "name", "robot", "impedance", "modes", "planner_mismatch", "initial_state", "episode",
             "transition_matrix", "noise", "estimator", "cost", "constraints", "mpc", "cem", "work_clock", "seed"});
  if (const auto schema = root.opt("schema"); schema && schema->string() != "cmpc-scenario/1")
    schema->fail("unsupported schema, expected \"cmpc-scenario/1\"");

  Scenario s;
  s.name = root.opt("name") ? root.at("name").string() : std::string("scenario");
  s.robot = detail::parse_robot(root.at("robot"));
  const int n = s.robot.n;
  const int m = s.robot.m;

  const Node imp = root.at("impedance");
  imp.only({"stiffness_Npm", "damping_Nspm"});
  s.gains.stiffness = imp.at("stiffness_Npm").diag(m);
  s.gains.damping = imp.at("damping_Nspm").diag(m);
  if ((s.gains.stiffness.array() <= 0).any()) imp.at("stiffness_Npm").fail("gains must be positive");
  if ((s.gains.damping.array() < 0).any()) imp.at("damping_Nspm").fail("gains must be non-negative");

  const Node modes = root.at("modes");
  if (modes.size() == 0) modes.fail("need at least one mode");
  for (std::size_t z = 0; z < modes.size(); ++z) {
    const Node mn = modes[z];
    mn.only({"label", "contacts", "active_when"});
    ContactMode cm;
    cm.id = static_cast<int>(z);
    cm.label = mn.opt("label") ? mn.at("label").string() : "mode" + std::to_string(z);
    if (const auto cs = mn.opt("contacts")) {
      for (std::size_t i = 0; i < cs->size(); ++i) cm.contacts.push_back(detail::parse_contact((*cs)[i], m));
    }
    std::vector<ActivationRule> rules;
    if (const auto aw = mn.opt("active_when")) {
      for (std::size_t i = 0; i < aw->size(); ++i) {
        const Node r = (*aw)[i];
        r.only({"tcp_axis", "max_m"});
        ActivationRule rule;
        rule.axis = r.at("tcp_axis").count(0);
        if (rule.axis >= m) r.at("tcp_axis").fail("axis must be below " + std::to_string(m));
        rule.max_m = r.at("max_m").number();
        rules.push_back(rule);
      }
    }
    if (z == 0 && !rules.empty()) mn.at("active_when").fail("mode 0 is the fallback and takes no rules");
    if (z > 0 && rules.empty()) mn.fail("every mode after the first needs an active_when rule");
    s.modes.push_back(std::move(cm));
    s.rules.push_back(std::move(rules));
  }
  const int M = s.n_modes();

  if (const auto mm = root.opt("planner_mismatch")) {
    mm->only({"stiffness_scale", "rest_offset_m"});
    if (mm->has("stiffness_scale")) s.mismatch.stiffness_scale = mm->at("stiffness_scale").positive();
    if (mm->has("rest_offset_m")) s.mismatch.rest_offset_m = mm->at("rest_offset_m").number();
  }

  const Node init = root.at("initial_state");
  init.only({"q_rad", "qd_radps"});
  s.initial.q = init.at("q_rad").vec(n);
  s.initial.qd = init.opt("qd_radps") ? init.at("qd_radps").diag(n) : Vec::Zero(n);

  const Node ep = root.at("episode");
  ep.only({"steps", "dt_s", "substeps"});
  s.steps = ep.at("steps").count(1);
  s.dt = ep.at("dt_s").positive();
  s.substeps = ep.opt("substeps") ? ep.at("substeps").count(1) : 5;

  const Node T = root.at("transition_matrix");
  s.transition = T.mat(M, M);
  for (int a = 0; a < M; ++a) {
    const Node row = T[static_cast<std::size_t>(a)];
    if ((s.transition.row(a).array() < 0).any()) row.fail("entries must be non-negative");
    if (std::abs(s.transition.row(a).sum() - 1.0) > 1e-9) row.fail("row must sum to 1");
  }

  const Node noise = root.at("noise");
  noise.only({"process_std_q_rad", "process_std_qd_radps", "measurement_std_q_rad", "measurement_std_tau_Nm",
              "simulate_measurement_noise"});
  s.process_std.resize(2 * n);
  s.process_std << noise.at("process_std_q_rad").diag(n), noise.at("process_std_qd_radps").diag(n);
  s.measurement_std.resize(2 * n);
  s.measurement_std << noise.at("measurement_std_q_rad").diag(n), noise.at("measurement_std_tau_Nm").diag(n);
  if ((s.process_std.array() <= 0).any()) noise.fail("process standard deviations must be positive");
  if ((s.measurement_std.array() <= 0).any()) noise.fail("measurement standard deviations must be positive");
  if (noise.has("simulate_measurement_noise"))
    s.measurement_noise = noise.at("simulate_measurement_noise").boolean();

  const Node est = root.at("estimator");
  est.only({"particles", "initial_std_q_rad", "initial_std_qd_radps", "mode_prior"});
  s.particles = est.at("particles").count(1);
  s.initial_std.resize(2 * n);
  s.initial_std << est.at("initial_std_q_rad").diag(n), est.at("initial_std_qd_radps").diag(n);
  if ((s.initial_std.array() <= 0).any()) est.fail("initial standard deviations must be positive");
  if (est.has("mode_prior")) {
    s.prior = est.at("mode_prior").vec(M);
    if ((s.prior.array() < 0).any() || std::abs(s.prior.sum() - 1.0) > 1e-9)
      est.at("mode_prior").fail("must lie on the probability simplex");
  } else {
    s.prior = Vec::Zero(M);
    s.prior[0] = 1.0;
  }

  const Node cost = root.at("cost");
  cost.only({"Q_x", "Q_u", "Q_xd", "targets"});
  s.cost.Q_x = cost.at("Q_x").diag(m).asDiagonal();
  s.cost.Q_u = cost.at("Q_u").diag(m).asDiagonal();
  s.cost.Q_xd = cost.at("Q_xd").diag(m).asDiagonal();
  for (const char* k : {"Q_x", "Q_u", "Q_xd"}) {
    if ((cost.at(k).diag(m).array() < 0).any()) cost.at(k).fail("weights must be non-negative");
  }
  const Node targets = cost.at("targets");
  if (static_cast<int>(targets.size()) != M) targets.fail("need one target per mode");
  for (std::size_t z = 0; z < targets.size(); ++z) {
    const Node t = targets[z];
    t.only({"x_d_m", "track"});
    s.cost.x_d.push_back(t.at("x_d_m").vec(m));
    Vec mask = t.opt("track") ? t.at("track").vec(m) : Vec::Ones(m);
    if (((mask.array() != 0.0) && (mask.array() != 1.0)).any()) t.at("track").fail("entries must be 0 or 1");
    s.cost.track.push_back(mask);
  }

  const Node con = root.at("constraints");
  con.only({"F_max_N", "force_limit", "rho", "u_min_m", "u_max_m", "p_min"});
  s.nlp.F_max = con.at("F_max_N").positive();
  s.nlp.force_limit = con.opt("force_limit") ? con.at("force_limit").boolean() : true;
  s.nlp.rho = con.opt("rho") ? con.at("rho").non_negative() : 1e-6;
  s.nlp.lo = con.at("u_min_m").diag(m);
  s.nlp.hi = con.at("u_max_m").diag(m);
  if (!(s.nlp.lo.array() < s.nlp.hi.array()).all()) con.at("u_max_m").fail("must exceed u_min_m entrywise");
  s.nlp.p_min = con.opt("p_min") ? con.at("p_min").non_negative() : 1e-3;
  if (s.nlp.p_min >= 1.0) con.at("p_min").fail("must be below 1");

  const Node mpc = root.at("mpc");
  mpc.only({"horizon", "tol", "max_iter", "mu0"});
  s.nlp.h = mpc.at("horizon").count(1);
  if (mpc.has("tol")) s.ip.tol = mpc.at("tol").positive();
  if (mpc.has("max_iter")) s.ip.max_iter = mpc.at("max_iter").count(1);
  s.ip.mu0 = mpc.opt("mu0") ? mpc.at("mu0").positive() : 1e-3;

  const Node cem = root.at("cem");
  cem.only({"iterations", "samples", "elite", "beta", "std_init_m", "weight_floor"});
  s.cem.n_iter = cem.at("iterations").count(0);
  s.cem.n_samples = cem.opt("samples") ? cem.at("samples").count(1) : 128;
  s.cem.elite = cem.opt("elite") ? cem.at("elite").count(1) : 10;
  if (s.cem.elite > s.cem.n_samples) cem.at("elite").fail("must not exceed samples");
  s.cem.beta = cem.opt("beta") ? cem.at("beta").non_negative() : 2.0;
  if (cem.has("std_init_m")) s.cem.std_init = cem.at("std_init_m").positive();
  if (cem.has("weight_floor")) s.cem.weight_floor = cem.at("weight_floor").positive();
  s.cem.lo = s.nlp.lo;
  s.cem.hi = s.nlp.hi;

  s.clock = WorkClock::for_robot(s.robot);
  if (const auto wc = root.opt("work_clock")) {
    wc->only({"step_s", "linearization_s", "flop_s"});
    if (wc->has("step_s")) s.clock.step_s = wc->at("step_s").positive();
    if (wc->has("linearization_s")) s.clock.linearization_s = wc->at("linearization_s").positive();
    if (wc->has("flop_s")) s.clock.flop_s = wc->at("flop_s").positive();
  }
  if (root.has("seed")) s.seed = root.at("seed").seed();
  return s;
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError(path + ": cannot open file");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ScenarioError(path + ": invalid JSON: " + e.what());
  }
}

inline Scenario load_scenario(const std::string& path) { return parse_scenario(read_json_file(path)); }

}  // namespace cmpc
