// plan: run closed-loop episodes, solve-time sweeps, plots and contact calibration.
//
// Exit codes: 0 success, 1 usage or input error, 2 a solver did not converge.

#include "cmpc/bench.hpp"
#include "cmpc/calibration.hpp"
#include "cmpc/planner.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace cmpc;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kDiverged = 2;

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path.string() + ": cannot write");
  return f;
}

int run_cmd(const std::string& scenario_path, std::optional<std::uint64_t> seed, bool no_cem,
            std::optional<int> cem_iters, const std::string& out_dir) {
  Scenario sc = load_scenario(scenario_path);
  if (cem_iters) sc.cem.n_iter = *cem_iters;
  PlannerConfig cfg;
  cfg.use_cem = !no_cem;
  cfg.workers = default_workers();
  const std::uint64_t s = seed.value_or(sc.seed);
  const EpisodeLog log = simulate_episode(sc, cfg, s);

  const fs::path csv = fs::path(out_dir) / (sc.name + "_seed" + std::to_string(s) + (no_cem ? "_nocem" : "") + ".csv");
  {
    auto f = open_out(csv);
    write_episode_csv(f, log);
  }
  double cem_time = 0.0, mpc_time = 0.0;
  int not_converged = 0;
  for (const auto& r : log.rows) {
    cem_time += r.diag.cem_time;
    mpc_time += r.diag.mpc_time;
    not_converged += r.diag.status == SolveStatus::kConverged ? 0 : 1;
  }
  std::cout << "scenario " << sc.name << " seed " << s << (no_cem ? " (MPC only)" : "") << "\n";
  std::cout << "steps " << log.rows.size() << ", fallbacks " << log.fallbacks() << "\n";
  std::cout << "modes visited:";
  for (int z : first_visit_order(log)) std::cout << ' ' << sc.modes[static_cast<std::size_t>(z)].label;
  std::cout << "\nmax impedance force " << log.max_impedance_force() << " N (limit " << sc.nlp.F_max << ")\n";
  std::cout << "total cost " << log.total_cost() << "\n";
  std::cout << "work-clock time: CEM " << cem_time << " s, MPC " << mpc_time << " s\n";
  std::cout << "wrote " << csv.string() << "\n";
  return not_converged > 0 ? kDiverged : kOk;
}

int sweep_cmd(const std::string& spec_path, const std::string& out_dir) {
  const SweepSpec spec = load_sweep_spec(spec_path);
  const SweepResult res = run_sweep(spec, default_workers());
  const std::string stem = fs::path(spec_path).stem().string();
  const fs::path raw = fs::path(out_dir) / (stem + ".csv");
  const fs::path summary = fs::path(out_dir) / (stem + "_summary.csv");
  {
    auto f = open_out(raw);
    write_sweep_csv(f, res);
  }
  {
    auto f = open_out(summary);
    write_summary_csv(f, res);
  }
  std::cout << to_string(res.variable) << " sweep, " << res.rows.size() << " runs\n";
  for (const auto& s : res.stats) {
    std::cout << "  value " << s.value << "  cem_iters " << s.cem_iters << "  time " << s.time_mean << " +- "
              << s.time_std << " s  iterations " << s.iter_mean << "  cost " << s.cost_mean << "\n";
  }
  std::cout << "wrote " << raw.string() << " and " << summary.string() << "\n";
  return res.all_converged() ? kOk : kDiverged;
}

int plot_cmd(const std::string& csv_path) {
  for (const auto& p : emit_plots(csv_path)) std::cout << "wrote " << p << "\n";
  return kOk;
}

// Columns q_0..q_{n-1}, tau_0..tau_{n-1}, one header row.
std::vector<TorqueSample> read_torque_csv(const std::string& path, int n) {
  std::ifstream in(path);
  if (!in) throw CsvError(path + ": cannot open file");
  std::string line;
  int lineno = 1;
  if (!std::getline(in, line)) throw CsvError(path + ":1: empty file");
  if (static_cast<int>(split_csv_line(line).size()) != 2 * n)
    throw CsvError(path + ":1: expected " + std::to_string(2 * n) + " columns for a " + std::to_string(n) +
                   "-joint robot");
  std::vector<TorqueSample> data;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (static_cast<int>(c.size()) != 2 * n)
      throw CsvError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(2 * n) + " columns");
    TorqueSample s{Vec(n), Vec(n)};
    try {
      for (int i = 0; i < n; ++i) {
        s.q[i] = std::stod(c[static_cast<std::size_t>(i)]);
        s.tau[i] = std::stod(c[static_cast<std::size_t>(n + i)]);
      }
    } catch (const std::exception&) {
      throw CsvError(path + ":" + std::to_string(lineno) + ": malformed number");
    }
    data.push_back(s);
  }
  return data;
}

int calibrate_cmd(const std::string& data_path, const std::string& scenario_path, int contacts, bool attachment) {
  const RobotModel robot = scenario_path.empty() ? RobotModel::default_arm() : load_scenario(scenario_path).robot;
  const auto data = read_torque_csv(data_path, robot.n);
  CalibrationOptions opt;
  opt.fit_attachment = attachment;
  const CalibrationResult r = calibrate_contact(data, contacts, robot, opt);
  std::cout.precision(10);
  for (std::size_t i = 0; i < r.contacts.size(); ++i) {
    const auto& cp = r.contacts[i];
    std::cout << "contact " << i << ": stiffness_Npm [" << cp.K.transpose() << "]  rest_m [" << cp.rest.transpose()
              << "]";
    if (attachment) std::cout << "  attach_m [" << cp.attach.transpose() << "]";
    std::cout << "\n";
  }
  std::cout << "residual " << r.residual << ", evaluations " << r.evaluations << ", identifiable "
            << (r.identifiable ? "yes" : "no") << "\n";
  return r.converged ? kOk : kDiverged;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Belief-space contact MPC with iCEM warm starts"};
  app.require_subcommand(1);

  std::string path, out_dir = ".", scenario_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> cem_iters;
  bool no_cem = false, attachment = false;
  int contacts = 1;

  auto* run = app.add_subcommand("run", "Run one closed-loop episode and write its CSV log");
  run->add_option("scenario", path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Episode seed (default: the scenario's)");
  run->add_flag("--no-cem", no_cem, "MPC only, warm started from the shifted previous solution");
  run->add_option("--cem-iters", cem_iters, "Override the CEM iteration count")->check(CLI::NonNegativeNumber);
  run->add_option("--out", out_dir, "Output directory");

  auto* sweep = app.add_subcommand("sweep", "Run a solve-time sweep and write raw and summary CSVs");
  sweep->add_option("spec", path, "Sweep spec JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", out_dir, "Output directory");

  auto* plot = app.add_subcommand("plot", "Render mean +- std bar charts from a sweep CSV");
  plot->add_option("results", path, "Raw sweep CSV")->required()->check(CLI::ExistingFile);

  auto* calib = app.add_subcommand("calibrate", "Fit contact stiffness and rest pose from torque data");
  calib->add_option("data", path, "CSV with columns q_0..q_{n-1}, tau_0..tau_{n-1}")
      ->required()
      ->check(CLI::ExistingFile);
  calib->add_option("--scenario", scenario_path, "Scenario whose robot model to use (default: 3-link arm)")
      ->check(CLI::ExistingFile);
  calib->add_option("--contacts", contacts, "Number of contacts")->check(CLI::PositiveNumber);
  calib->add_flag("--attachment", attachment, "Also fit the TCP-frame contact point");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*run) return run_cmd(path, seed, no_cem, cem_iters, out_dir);
    if (*sweep) return sweep_cmd(path, out_dir);
    if (*plot) return plot_cmd(path);
    if (*calib) return calibrate_cmd(path, scenario_path, contacts, attachment);
  } catch (const ScenarioError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CsvError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
