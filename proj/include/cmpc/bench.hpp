#pragma once

// Solve-time studies on the contact-transition protocol: converge the MPC in
// free space, switch the plant to the contact mode, then re-solve with and
// without an iCEM warm start.

#include "cmpc/parallel.hpp"
#include "cmpc/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <locale>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace cmpc {

enum class SweepVariable { kCemIters, kStiffness, kHorizon };

inline std::string to_string(SweepVariable v) {
  switch (v) {
    case SweepVariable::kCemIters:
      return "cem_iters";
    case SweepVariable::kStiffness:
      return "stiffness";
    case SweepVariable::kHorizon:
      return "horizon";
  }
  return "unknown";
}

struct SweepSpec {
  SweepVariable variable = SweepVariable::kCemIters;
  std::vector<double> values;
  int repetitions = 20;
  double perturbation_std = 0.1;  // on every entry of q and qd
  int proposed_cem_iters = 5;     // CEM arm of stiffness and horizon sweeps
  Scenario scenario;
  std::uint64_t seed = 1;
};

inline SweepSpec parse_sweep_spec(const Json& doc, const std::filesystem::path& base_dir) {
  using detail::Node;
  const Node root(doc, "");
  root.only({"schema", "variable", "values", "repetitions", "perturbation_std", "proposed_cem_iters", "scenario",
             "seed"});
  if (const auto schema = root.opt("schema"); schema && schema->string() != "cmpc-sweep/1")
    schema->fail("unsupported schema, expected \"cmpc-sweep/1\"");
  SweepSpec s;
  const Node var = root.at("variable");
  const std::string v = var.string();
  if (v == "cem_iters") s.variable = SweepVariable::kCemIters;
  else if (v == "stiffness") s.variable = SweepVariable::kStiffness;
  else if (v == "horizon") s.variable = SweepVariable::kHorizon;
  else var.fail("expected \"cem_iters\", \"stiffness\" or \"horizon\"");

  const Node values = root.at("values");
  if (values.size() == 0) values.fail("need at least one value");
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Node x = values[i];
    if (s.variable == SweepVariable::kStiffness) s.values.push_back(x.positive());
    else if (s.variable == SweepVariable::kHorizon) s.values.push_back(x.count(1));
    else s.values.push_back(x.count(0));
  }
  s.repetitions = root.at("repetitions").count(2);
  if (root.has("perturbation_std")) s.perturbation_std = root.at("perturbation_std").non_negative();
  if (root.has("proposed_cem_iters")) s.proposed_cem_iters = root.at("proposed_cem_iters").count(1);
  if (root.has("seed")) s.seed = root.at("seed").seed();

  const Node sc = root.at("scenario");
  std::filesystem::path p = sc.string();
  if (p.is_relative()) p = base_dir / p;
  try {
    s.scenario = load_scenario(p.string());
  } catch (const ScenarioError& e) {
    sc.fail(e.what());
  }
  if (s.scenario.n_modes() < 2) sc.fail("the protocol needs a free mode 0 and a contact mode 1");
  return s;
}

inline SweepSpec load_sweep_spec(const std::string& path) {
  return parse_sweep_spec(read_json_file(path), std::filesystem::path(path).parent_path());
}

struct SweepRow {
  double value = 0.0;
  int cem_iters = 0;
  int rep = 0;
  double cem_time = 0.0;  // work-clock seconds
  double mpc_time = 0.0;
  double total_time = 0.0;
  int iterations = 0;
  SolveStatus status = SolveStatus::kConverged;
  double cost = 0.0;
};

struct SweepStat {
  double value = 0.0;
  int cem_iters = 0;
  int runs = 0;
  double time_mean = 0.0, time_std = 0.0;
  double iter_mean = 0.0, iter_std = 0.0;
  double cost_mean = 0.0, cost_std = 0.0;
};

struct SweepResult {
  SweepVariable variable = SweepVariable::kCemIters;
  std::vector<SweepRow> rows;
  std::vector<SweepStat> stats;

  bool all_converged() const {
    for (const auto& r : rows)
      if (r.status != SolveStatus::kConverged) return false;
    return true;
  }
  const SweepStat& stat(double value, int cem_iters) const {
    for (const auto& s : stats)
      if (s.value == value && s.cem_iters == cem_iters) return s;
    throw std::out_of_range("sweep: no statistics for value " + std::to_string(value) + ", cem_iters " +
                            std::to_string(cem_iters));
  }
};

// Mean and sample standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

// Statistics per (value, cem_iters), in order of first appearance.
inline std::vector<SweepStat> summarize(const std::vector<SweepRow>& rows) {
  std::vector<std::pair<double, int>> keys;
  for (const auto& r : rows) {
    const std::pair<double, int> k{r.value, r.cem_iters};
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  std::vector<SweepStat> out;
  for (const auto& [value, iters] : keys) {
    std::vector<double> t, it, c;
    for (const auto& r : rows) {
      if (r.value != value || r.cem_iters != iters) continue;
      t.push_back(r.total_time);
      it.push_back(r.iterations);
      c.push_back(r.cost);
    }
    SweepStat s;
    s.value = value;
    s.cem_iters = iters;
    s.runs = static_cast<int>(t.size());
    std::tie(s.time_mean, s.time_std) = mean_std(t);
    std::tie(s.iter_mean, s.iter_std) = mean_std(it);
    std::tie(s.cost_mean, s.cost_std) = mean_std(c);
    out.push_back(s);
  }
  return out;
}

// One repetition of the contact-transition protocol. The initial state is
// perturbed, the MPC is solved cold in free space, and the plant switches to
// mode 1. Each entry of `arms` is a CEM iteration count; 0 re-solves from the
// free-space solution alone. All arms share the perturbation and the free solve.
inline std::vector<SweepRow> transition_trial(const Scenario& sc, double sigma, std::uint64_t seed, int rep,
                                              const std::vector<int>& arms, double value) {
  const Plant plant = sc.planner_plant();
  const int M = sc.n_modes();
  std::mt19937_64 rng(derive_seed(seed, static_cast<unsigned long long>(rep)));
  std::normal_distribution<double> nd(0.0, sigma);
  JointState s = sc.initial;
  for (int i = 0; i < sc.robot.n; ++i) s.q[i] += nd(rng);
  for (int i = 0; i < sc.robot.n; ++i) s.qd[i] += nd(rng);
  const std::vector<JointState> xi0(M, s);

  Vec free_belief = Vec::Zero(M);
  free_belief[0] = 1.0;
  Vec contact_belief = Vec::Zero(M);
  contact_belief[1] = 1.0;

  IpOptions cold = sc.ip;
  cold.mu0 = 0.1;
  NlpProblem fp = build_nlp(free_belief, xi0, nullptr, sc.nlp, sc.cost, plant);
  const NlpSolution fs = solve(fp, cold);

  std::vector<SweepRow> rows;
  for (int iters : arms) {
    SweepRow row;
    row.value = value;
    row.cem_iters = iters;
    row.rep = rep;
    NlpGuess guess;
    if (iters == 0) {
      guess.actions = fs.actions;
      guess.states.assign(M, {});
      guess.states[1] = fs.states[0];
    } else {
      CemParams cp = sc.cem;
      cp.n_iter = iters;
      cp.workers = 1;
      std::mt19937_64 crng(derive_seed(seed, static_cast<unsigned long long>(rep), 1));
      const CemResult cem = icem_plan({{s, 1.0, 1}}, fs.actions, cp, sc.cost, plant, xi0, crng);
      guess = NlpGuess::from_cem(cem);
      row.cem_time = sc.clock.cem_seconds(cem);
    }
    NlpProblem cpb = build_nlp(contact_belief, xi0, &guess, sc.nlp, sc.cost, plant);
    const NlpSolution cs = solve(cpb, sc.ip);
    row.mpc_time = sc.clock.mpc_seconds(cs.stats);
    row.total_time = row.cem_time + row.mpc_time;
    row.iterations = cs.stats.iterations;
    row.status = cs.stats.status;
    row.cost = cs.stats.cost;
    rows.push_back(row);
  }
  return rows;
}

namespace detail {

struct SweepTask {
  Scenario scenario;
  double value = 0.0;
  int rep = 0;
  std::vector<int> arms;
};

inline SweepResult run_tasks(const std::vector<SweepTask>& tasks, const SweepSpec& spec, int workers) {
  std::vector<std::vector<SweepRow>> slots(tasks.size());
  parallel_for(static_cast<int>(tasks.size()), workers, [&](int i) {
    const auto& t = tasks[static_cast<std::size_t>(i)];
    slots[static_cast<std::size_t>(i)] =
        transition_trial(t.scenario, spec.perturbation_std, spec.seed, t.rep, t.arms, t.value);
  });
  SweepResult res;
  res.variable = spec.variable;
  for (auto& s : slots) res.rows.insert(res.rows.end(), s.begin(), s.end());
  return res;
}

// Rows ordered by value, then arm, then repetition.
inline void order_rows(SweepResult& res, const std::vector<double>& values, const std::vector<int>& arms,
                       bool arms_are_values) {
  std::vector<SweepRow> ordered;
  for (std::size_t v = 0; v < values.size(); ++v) {
    for (int a : arms) {
      if (arms_are_values && a != static_cast<int>(values[v])) continue;
      for (const auto& r : res.rows)
        if (r.value == values[v] && r.cem_iters == a) ordered.push_back(r);
    }
  }
  res.rows = std::move(ordered);
  res.stats = summarize(res.rows);
}

}  // namespace detail

// N_iter sweep; every repetition runs all values from one shared free solve.
inline SweepResult run_warmstart_sweep(const SweepSpec& spec, int workers = 1) {
  require(spec.variable == SweepVariable::kCemIters, "sweep: warmstart sweep needs variable cem_iters");
  std::vector<int> arms;
  for (double v : spec.values) arms.push_back(static_cast<int>(v));
  std::vector<detail::SweepTask> tasks;
  for (int r = 0; r < spec.repetitions; ++r) tasks.push_back({spec.scenario, 0.0, r, arms});
  SweepResult res = detail::run_tasks(tasks, spec, workers);
  for (auto& row : res.rows) row.value = row.cem_iters;
  detail::order_rows(res, spec.values, arms, true);
  return res;
}

// Stiffness or horizon sweep with an MPC-only arm and a CEM-warmed arm.
inline SweepResult run_param_sweep(const SweepSpec& spec, int workers = 1) {
  require(spec.variable != SweepVariable::kCemIters, "sweep: parameter sweep needs stiffness or horizon");
  const std::vector<int> arms{0, spec.proposed_cem_iters};
  std::vector<detail::SweepTask> tasks;
  for (double v : spec.values) {
    Scenario sc = spec.scenario;
    if (spec.variable == SweepVariable::kStiffness) {
      for (auto& cp : sc.modes[1].contacts) cp.K *= v / cp.K.norm();
    } else {
      sc.nlp.h = static_cast<int>(v);
    }
    for (int r = 0; r < spec.repetitions; ++r) tasks.push_back({sc, v, r, arms});
  }
  SweepResult res = detail::run_tasks(tasks, spec, workers);
  detail::order_rows(res, spec.values, arms, false);
  return res;
}

inline SweepResult run_sweep(const SweepSpec& spec, int workers = 1) {
  return spec.variable == SweepVariable::kCemIters ? run_warmstart_sweep(spec, workers)
                                                   : run_param_sweep(spec, workers);
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kSweepCsvVersion = "# cmpc-sweep v1";
inline constexpr const char* kSweepColumns =
    "variable,value,cem_iters,rep,cem_time_s,mpc_time_s,total_time_s,mpc_iterations,status,cost";
inline constexpr const char* kSummaryCsvVersion = "# cmpc-sweep-summary v1";
inline constexpr const char* kSummaryColumns =
    "variable,value,cem_iters,runs,time_mean_s,time_std_s,iterations_mean,iterations_std,cost_mean,cost_std";

inline std::string format_number(double x) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(17);
  os << x;
  return os.str();
}

inline void write_sweep_csv(std::ostream& os, const SweepResult& res) {
  os << kSweepCsvVersion << "\n" << kSweepColumns << "\n";
  const std::string var = to_string(res.variable);
  for (const auto& r : res.rows) {
    os << var << ',' << format_number(r.value) << ',' << r.cem_iters << ',' << r.rep << ','
       << format_number(r.cem_time) << ',' << format_number(r.mpc_time) << ',' << format_number(r.total_time) << ','
       << r.iterations << ',' << to_string(r.status) << ',' << format_number(r.cost) << "\n";
  }
}

inline void write_summary_csv(std::ostream& os, const SweepResult& res) {
  os << kSummaryCsvVersion << "\n" << kSummaryColumns << "\n";
  const std::string var = to_string(res.variable);
  for (const auto& s : res.stats) {
    os << var << ',' << format_number(s.value) << ',' << s.cem_iters << ',' << s.runs << ','
       << format_number(s.time_mean) << ',' << format_number(s.time_std) << ',' << format_number(s.iter_mean) << ','
       << format_number(s.iter_std) << ',' << format_number(s.cost_mean) << ',' << format_number(s.cost_std) << "\n";
  }
}

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Reads raw rows back from a sweep CSV.
inline SweepResult read_sweep_csv(std::istream& in, const std::string& name = "csv") {
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) -> void { throw CsvError(name + ":" + std::to_string(lineno) + ": " + what); };
  if (!std::getline(in, line)) {
    lineno = 1;
    fail("empty file");
  }
  ++lineno;
  if (line != kSweepCsvVersion) fail("expected header \"" + std::string(kSweepCsvVersion) + "\"");
  if (!std::getline(in, line) || line != kSweepColumns) {
    ++lineno;
    fail("unexpected column row");
  }
  ++lineno;
  SweepResult res;
  bool have_var = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 10) fail("expected 10 columns, got " + std::to_string(c.size()));
    SweepVariable var;
    if (c[0] == "cem_iters") var = SweepVariable::kCemIters;
    else if (c[0] == "stiffness") var = SweepVariable::kStiffness;
    else if (c[0] == "horizon") var = SweepVariable::kHorizon;
    else {
      fail("unknown variable \"" + c[0] + "\"");
      return res;
    }
    if (have_var && var != res.variable) fail("mixed sweep variables");
    res.variable = var;
    have_var = true;
    SweepRow r;
    try {
      r.value = std::stod(c[1]);
      r.cem_iters = std::stoi(c[2]);
      r.rep = std::stoi(c[3]);
      r.cem_time = std::stod(c[4]);
      r.mpc_time = std::stod(c[5]);
      r.total_time = std::stod(c[6]);
      r.iterations = std::stoi(c[7]);
      r.cost = std::stod(c[9]);
    } catch (const std::exception&) {
      fail("malformed number");
    }
    if (c[8] == "converged") r.status = SolveStatus::kConverged;
    else if (c[8] == "max_iter") r.status = SolveStatus::kMaxIter;
    else if (c[8] == "line_search_failure") r.status = SolveStatus::kLineSearchFailure;
    else fail("unknown status \"" + c[8] + "\"");
    res.rows.push_back(r);
  }
  if (res.rows.empty()) fail("no data rows");
  res.stats = summarize(res.rows);
  return res;
}

inline SweepResult read_sweep_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CsvError(path + ": cannot open file");
  return read_sweep_csv(in, path);
}

// ---------------------------------------------------------------------------
// SVG

enum class PlotMetric { kTime, kIterations, kCost };

struct PlotRange {
  double lo = 0.0;
  double hi = 1.0;
};

// Covers zero, every raw run and every mean +- std bar.
inline PlotRange plot_range(const SweepResult& res, PlotMetric metric) {
  PlotRange r{0.0, 0.0};
  auto take = [&](double v) {
    r.lo = std::min(r.lo, v);
    r.hi = std::max(r.hi, v);
  };
  for (const auto& row : res.rows) {
    take(metric == PlotMetric::kTime ? row.total_time
                                     : metric == PlotMetric::kIterations ? row.iterations : row.cost);
  }
  for (const auto& s : res.stats) {
    const double m = metric == PlotMetric::kTime ? s.time_mean : metric == PlotMetric::kIterations ? s.iter_mean
                                                                                                  : s.cost_mean;
    const double sd = metric == PlotMetric::kTime ? s.time_std : metric == PlotMetric::kIterations ? s.iter_std
                                                                                                  : s.cost_std;
    take(m - sd);
    take(m + sd);
  }
  if (r.hi == r.lo) r.hi = r.lo + 1.0;
  const double pad = 0.05 * (r.hi - r.lo);
  if (r.lo < 0.0) r.lo -= pad;
  r.hi += pad;
  return r;
}

// Bar groups per sweep value, one bar per CEM iteration count.
inline std::string render_svg(const SweepResult& res, PlotMetric metric) {
  if (res.stats.empty()) throw CsvError("plot: no data");
  std::vector<double> values;
  std::vector<int> arms;
  for (const auto& s : res.stats) {
    if (std::find(values.begin(), values.end(), s.value) == values.end()) values.push_back(s.value);
    if (std::find(arms.begin(), arms.end(), s.cem_iters) == arms.end()) arms.push_back(s.cem_iters);
  }
  const bool one_per_group = res.variable == SweepVariable::kCemIters;
  const PlotRange range = plot_range(res, metric);
  const double W = 640, H = 400, left = 70, right = 20, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  auto ymap = [&](double v) { return top + ph * (range.hi - v) / (range.hi - range.lo); };
  const std::vector<std::string> palette{"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};
  const char* label = metric == PlotMetric::kTime ? "total solve time [s]"
                                                  : metric == PlotMetric::kIterations ? "MPC iterations" : "cost";

  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 "
     << W << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
     << label << " vs " << to_string(res.variable) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << ymap(std::max(range.lo, 0.0)) << "\" x2=\"" << left + pw
     << "\" y2=\"" << ymap(std::max(range.lo, 0.0)) << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = range.lo + (range.hi - range.lo) * k / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << ymap(v) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << v << "</text>\n";
  }
  const double gw = pw / static_cast<double>(values.size());
  const int bars = one_per_group ? 1 : static_cast<int>(arms.size());
  const double bw = 0.7 * gw / bars;
  for (std::size_t g = 0; g < values.size(); ++g) {
    const double gx = left + gw * static_cast<double>(g) + 0.15 * gw;
    int slot = 0;
    for (std::size_t a = 0; a < arms.size(); ++a) {
      const SweepStat* s = nullptr;
      for (const auto& st : res.stats)
        if (st.value == values[g] && st.cem_iters == arms[a]) s = &st;
      if (s == nullptr) continue;
      const double m = metric == PlotMetric::kTime ? s->time_mean
                                                   : metric == PlotMetric::kIterations ? s->iter_mean : s->cost_mean;
      const double sd = metric == PlotMetric::kTime ? s->time_std
                                                    : metric == PlotMetric::kIterations ? s->iter_std : s->cost_std;
      const double x = gx + bw * slot++;
      const double y0 = ymap(std::max(range.lo, 0.0));
      const double y1 = ymap(m);
      os << "<rect x=\"" << x << "\" y=\"" << std::min(y0, y1) << "\" width=\"" << bw * 0.9 << "\" height=\""
         << std::abs(y0 - y1) << "\" fill=\"" << palette[a % palette.size()] << "\"/>\n";
      const double cx = x + bw * 0.45;
      os << "<line x1=\"" << cx << "\" y1=\"" << ymap(m - sd) << "\" x2=\"" << cx << "\" y2=\"" << ymap(m + sd)
         << "\" stroke=\"black\"/>\n";
    }
    os << "<text x=\"" << left + gw * (static_cast<double>(g) + 0.5) << "\" y=\"" << top + ph + 18
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << values[g] << "</text>\n";
  }
  if (!one_per_group) {
    for (std::size_t a = 0; a < arms.size(); ++a) {
      const double lx = left + 10 + 120 * static_cast<double>(a);
      os << "<rect x=\"" << lx << "\" y=\"" << H - 22 << "\" width=\"12\" height=\"12\" fill=\""
         << palette[a % palette.size()] << "\"/>\n";
      os << "<text x=\"" << lx + 16 << "\" y=\"" << H - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">"
         << (arms[a] == 0 ? std::string("MPC only") : "CEM " + std::to_string(arms[a]) + " + MPC") << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

// Writes <stem>_time.svg, <stem>_iterations.svg and <stem>_cost.svg next to
// the CSV. Nothing is written when the CSV has no data.
inline std::vector<std::string> emit_plots(const std::string& csv_path) {
  const SweepResult res = read_sweep_csv_file(csv_path);
  const std::filesystem::path p(csv_path);
  const std::string stem = (p.parent_path() / p.stem()).string();
  std::vector<std::pair<std::string, std::string>> files;
  files.emplace_back(stem + "_time.svg", render_svg(res, PlotMetric::kTime));
  files.emplace_back(stem + "_iterations.svg", render_svg(res, PlotMetric::kIterations));
  files.emplace_back(stem + "_cost.svg", render_svg(res, PlotMetric::kCost));
  std::vector<std::string> out;
  for (const auto& [path, svg] : files) {
    std::ofstream f(path);
    if (!f) throw CsvError(path + ": cannot write");
    f << svg;
    out.push_back(path);
  }
  return out;
}

}  // namespace cmpc
