/// @file gridreconf_cli.cpp
/// @brief Command-line front end: load feeders, run solve / sweep / oracle /
///        baseline / sca / validate / report, and emit CSV/JSON artifacts.
///
/// Exit codes: 0 success with an optimal solve, 2 solver non-optimal or a
/// validation threshold breach, 1 usage or model errors.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <gridreconf/gridreconf.hpp>
#include <gridreconf/validation.hpp>

namespace fs = std::filesystem;
using namespace gridreconf;

namespace {

constexpr double kGroupEps = 1e-4;

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

ObjectiveSpec objective_from_name(const std::string& name) {
  ObjectiveSpec obj;
  if (name == "loss")
    obj.kind = ObjectiveKind::loss;
  else if (name == "operational")
    obj.kind = ObjectiveKind::operational;
  else if (name == "balancing")
    obj.kind = ObjectiveKind::balancing;
  else if (name == "mixed")
    obj.kind = ObjectiveKind::mixed;
  else
    throw ModelError("unknown objective: " + name);
  return obj;
}

VoltageSpec voltage_from_flags(const Network& net, const std::string& mode, double vmin,
                               double vmax) {
  if (mode == "none") return VoltageSpec{};
  if (mode == "box") return VoltageSpec::uniform_box(net, vmin, vmax);
  if (mode == "magnitude") return VoltageSpec::uniform_magnitude(net, vmin, vmax);
  throw ModelError("unknown voltage mode: " + mode);
}

/// Weights file: JSON object mapping line indices to regularization weights,
/// e.g. {"7": 2000.0, "33": 2000.0}.
void apply_weights(Network& net, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open weights file: " + path);
  json j = json::parse(in);
  if (!j.is_object()) throw ModelError("weights file must be a JSON object of line -> weight");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const int e = std::stoi(it.key());
    if (e < 0 || e >= net.line_count())
      throw ModelError("weights file references unknown line " + it.key());
    const double w = it.value().get<double>();
    if (w < 0.0) throw ModelError("weights must be nonnegative");
    net.lines[e].lambda_weight = w;
  }
}

void ensure_outdir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ModelError("cannot create output directory: " + out);
}

void write_summary(const std::string& out, const json& j) {
  write_text_file((fs::path(out) / "summary.json").string(), j.dump(2) + "\n");
}

bool network_has_load(const Network& net) {
  for (const auto& nd : net.nodes)
    if (nd.has_load()) return true;
  return false;
}

LoadDeviation safe_deviation(const Network& net, const Topology& topo,
                             const std::vector<Vec>& xi_pu, const std::vector<Vec>& sigma_pu) {
  if (!network_has_load(net) || !topo.is_connected) return LoadDeviation{};
  std::vector<Vec> xi_si = xi_si_of(net, xi_pu);
  std::vector<Vec> sigma_si(sigma_pu.size());
  const double s1 = net.base().s_phase_base();
  for (size_t v = 0; v < sigma_pu.size(); ++v)
    if (sigma_pu[v].size()) sigma_si[v] = sigma_pu[v] * s1;
  return load_deviation(net, topo.closed, xi_si, sigma_si);
}

void write_single_point_curve(const std::string& out, double lambda, double loss, int closed_sw) {
  SweepResult sr;
  SweepPoint pt;
  pt.lambda_si = lambda;
  pt.ok = true;
  pt.refit_loss_si = loss;
  pt.closed_switchable = closed_sw;
  sr.points.push_back(pt);
  write_loss_curve_csv((fs::path(out) / "loss_curve.csv").string(), sr);
}

struct VoltageFlags {
  std::string mode = "none";
  double vmin = 0.95;
  double vmax = 1.05;
};

int run_solve(const std::string& input, const std::string& weights, const std::string& objective,
              double lambda, int target_closed, const VoltageFlags& vf, bool radial_only,
              const std::string& out, double tol) {
  Timer total;
  Network net = Network::load_file(input);
  if (!weights.empty()) apply_weights(net, weights);
  ObjectiveSpec obj = objective_from_name(objective);
  VoltageSpec vs = voltage_from_flags(net, vf.mode, vf.vmin, vf.vmax);
  ConicOptions opt;
  opt.tol = tol;
  ensure_outdir(out);

  json summary;
  summary["command"] = "solve";
  summary["input"] = input;
  summary["objective"] = objective;

  if (target_closed >= 0) {
    AutoLambdaResult ar = auto_lambda(net, obj, target_closed, vs, kGroupEps, opt);
    lambda = ar.lambda_si;
    json trace = json::array();
    for (const auto& [lam, cnt] : ar.trace) trace.push_back({{"lambda", lam}, {"closed", cnt}});
    summary["weight_search"] = {{"target_closed", target_closed},
                                {"lambda", ar.lambda_si},
                                {"closed_switchable", ar.closed_switchable},
                                {"achieved", ar.achieved},
                                {"bracket", {ar.bracket_lo, ar.bracket_hi}},
                                {"trace", trace}};
  }
  summary["lambda"] = lambda;

  DsrSolution sel;
  json sca_info;
  Timer t_solve;
  if (vs.mode == VoltageMode::magnitude) {
    ScaResult res = sca_solve(net, obj, lambda, vs, {}, opt);
    sel = res.sol;
    sca_info = {{"iterations", res.iterations},
                {"converged", res.converged},
                {"used_restoration", res.used_restoration},
                {"min_lower_margin", res.min_lower_margin},
                {"lower_feasible", res.lower_feasible},
                {"objective_trace", res.objective_trace}};
  } else {
    DsrProblem pr = build_p2(net, obj, lambda, vs);
    sel = solve_p2(pr, opt);
    if (sel.status == ConicStatus::optimal && sel.has_duals) {
      try {
        summary["verification"] = verification_json(verify_solution(pr, sel, tol));
      } catch (const std::exception& ex) {
        summary["verification"] = {{"error", ex.what()}};
      }
    }
  }
  const double solve_s = t_solve.seconds();
  summary["selection"] = solution_json(sel);
  if (!sca_info.is_null()) summary["sca"] = sca_info;
  if (sel.status != ConicStatus::optimal) {
    summary["timings"] = {{"solve_s", solve_s}, {"total_s", total.seconds()}};
    write_summary(out, summary);
    std::cerr << "solver finished with status " << to_string(sel.status) << "\n";
    return 2;
  }

  // Switch states come from the shrunk currents of the selection solve.
  DsrProblem layout = build_p2(net, obj, lambda);
  Topology topo = extract_topology(layout, sel, kGroupEps);
  if (radial_only) topo = radialize_topology(net, topo, sel.xi_pu);
  summary["topology"] = topology_json(net, topo);

  Timer t_refit;
  std::vector<Vec> xi;
  std::vector<Vec> sigma;
  double refit_loss = 0.0;
  if (vs.mode == VoltageMode::magnitude) {
    ScaResult rf = sca_solve(without_regularization(net), obj, 0.0, vs, topo.closed, opt);
    xi = rf.sol.xi_pu;
    sigma = rf.sol.sigma_pu;
    refit_loss = resistive_loss_si(net, xi);
  } else {
    RefitResult rr = refit(net, topo, obj, vs, opt);
    xi = rr.xi_pu;
    sigma = rr.sol.sigma_pu;
    refit_loss = rr.loss_si;
  }
  const double refit_s = t_refit.seconds();
  summary["losses"] = {{"refit_loss_w", refit_loss},
                       {"selection_objective_si", sel.objective_si}};

  LoadDeviation dev = safe_deviation(net, topo, xi, sigma);
  summary["deviation"] = {{"dp_w", dev.dp_w}, {"dq_var", dev.dq_var}};
  summary["timings"] = {{"solve_s", solve_s}, {"refit_s", refit_s}, {"total_s", total.seconds()}};

  write_currents_csv((fs::path(out) / "currents.csv").string(), net,
                     {{lambda, xi_si_of(net, xi)}});
  write_single_point_curve(out, lambda, refit_loss, topo.closed_switchable(net));
  write_deviation_csv((fs::path(out) / "deviation.csv").string(), dev);
  write_summary(out, summary);
  return 0;
}

int run_sweep(const std::string& input, const std::string& weights, const std::string& objective,
              const std::string& grid_spec, const VoltageFlags& vf, const std::string& out,
              double tol) {
  Timer total;
  Network net = Network::load_file(input);
  if (!weights.empty()) apply_weights(net, weights);
  ObjectiveSpec obj = objective_from_name(objective);
  VoltageSpec vs = voltage_from_flags(net, vf.mode, vf.vmin, vf.vmax);
  ConicOptions opt;
  opt.tol = tol;
  ensure_outdir(out);

  double lo = 0.0, hi = 0.0;
  int n = 0;
  {
    char colon1 = 0, colon2 = 0;
    std::istringstream iss(grid_spec);
    if (!(iss >> lo >> colon1 >> hi >> colon2 >> n) || colon1 != ':' || colon2 != ':')
      throw ModelError("--lambda-grid expects lo:hi:n");
  }
  const std::vector<double> grid = log_grid(lo, hi, n);
  SweepResult sweep = lambda_sweep(net, obj, grid, vs, kGroupEps, opt);

  json summary;
  summary["command"] = "sweep";
  summary["input"] = input;
  summary["objective"] = objective;
  summary["grid"] = {{"lo", lo}, {"hi", hi}, {"n", n}};
  json pts = json::array();
  bool all_ok = true;
  int best = -1;
  for (size_t i = 0; i < sweep.points.size(); ++i) {
    const SweepPoint& pt = sweep.points[i];
    json pj;
    pj["lambda"] = pt.lambda_si;
    pj["ok"] = pt.ok;
    if (pt.ok) {
      pj["refit_loss_w"] = pt.refit_loss_si;
      pj["closed_switchable"] = pt.closed_switchable;
      pj["open"] = pt.topo.open_lines();
      if (best < 0 || pt.refit_loss_si < sweep.points[best].refit_loss_si)
        best = static_cast<int>(i);
    } else {
      pj["error"] = pt.error;
      all_ok = false;
    }
    pts.push_back(pj);
  }
  summary["points"] = pts;

  std::vector<CurrentsColumn> cols;
  for (const auto& pt : sweep.points)
    if (pt.ok) cols.push_back({pt.lambda_si, xi_si_of(net, pt.refit_xi_pu)});
  write_currents_csv((fs::path(out) / "currents.csv").string(), net, cols);
  write_loss_curve_csv((fs::path(out) / "loss_curve.csv").string(), sweep);

  LoadDeviation dev;
  if (best >= 0) {
    const SweepPoint& pt = sweep.points[best];
    dev = safe_deviation(net, pt.topo, pt.refit_xi_pu, {});
    summary["best_point"] = {{"lambda", pt.lambda_si}, {"refit_loss_w", pt.refit_loss_si}};
  }
  write_deviation_csv((fs::path(out) / "deviation.csv").string(), dev);
  summary["deviation"] = {{"dp_w", dev.dp_w}, {"dq_var", dev.dq_var}};
  summary["timings"] = {{"total_s", total.seconds()}};
  write_summary(out, summary);
  if (!all_ok) {
    std::cerr << "one or more sweep points failed\n";
    return 2;
  }
  return 0;
}

int run_oracle(const std::string& input, const std::string& objective, bool radial_only,
               const std::string& out, double tol) {
  Timer total;
  Network net = Network::load_file(input);
  OracleOptions oo;
  oo.mode = radial_only ? OracleMode::radial_only : OracleMode::subset;
  oo.objective = objective_from_name(objective);
  oo.conic.tol = tol;
  ensure_outdir(out);
  OracleResult res = exhaustive_oracle(net, oo);
  RefitResult rr = refit(net, res.best_topo, oo.objective, VoltageSpec{}, oo.conic);

  json summary;
  summary["command"] = "oracle";
  summary["input"] = input;
  summary["mode"] = radial_only ? "radial_only" : "subset";
  summary["examined"] = res.examined;
  summary["feasible"] = res.feasible;
  summary["best"] = {{"loss_w", res.best_loss_si}};
  summary["topology"] = topology_json(net, res.best_topo);
  LoadDeviation dev = safe_deviation(net, res.best_topo, rr.xi_pu, rr.sol.sigma_pu);
  summary["deviation"] = {{"dp_w", dev.dp_w}, {"dq_var", dev.dq_var}};
  summary["timings"] = {{"total_s", total.seconds()}};

  write_currents_csv((fs::path(out) / "currents.csv").string(), net,
                     {{0.0, xi_si_of(net, rr.xi_pu)}});
  write_single_point_curve(out, 0.0, res.best_loss_si, res.best_topo.closed_switchable(net));
  write_deviation_csv((fs::path(out) / "deviation.csv").string(), dev);
  write_summary(out, summary);
  return 0;
}

int run_baseline(const std::string& input, const std::string& out, double tol) {
  Timer total;
  Network net = Network::load_file(input);
  ConicOptions opt;
  opt.tol = tol;
  ensure_outdir(out);
  BaselineResult res = heuristic_baseline(net, opt);
  RefitResult rr = refit(net, res.topo, ObjectiveSpec{}, VoltageSpec{}, opt);

  json summary;
  summary["command"] = "baseline";
  summary["input"] = input;
  summary["loss_w"] = res.loss_si;
  summary["opened_order"] = res.opened_order;
  summary["topology"] = topology_json(net, res.topo);
  LoadDeviation dev = safe_deviation(net, res.topo, rr.xi_pu, rr.sol.sigma_pu);
  summary["deviation"] = {{"dp_w", dev.dp_w}, {"dq_var", dev.dq_var}};
  summary["timings"] = {{"total_s", total.seconds()}};

  write_currents_csv((fs::path(out) / "currents.csv").string(), net,
                     {{0.0, xi_si_of(net, rr.xi_pu)}});
  write_single_point_curve(out, 0.0, res.loss_si, res.topo.closed_switchable(net));
  write_deviation_csv((fs::path(out) / "deviation.csv").string(), dev);
  write_summary(out, summary);
  return 0;
}

int run_sca(const std::string& input, const std::string& weights, const std::string& objective,
            double lambda, const VoltageFlags& vf, const std::string& out, double tol) {
  VoltageFlags flags = vf;
  if (flags.mode == "none") flags.mode = "magnitude";
  if (flags.mode != "magnitude")
    throw ModelError("the sca command requires magnitude voltage bounds");
  return run_solve(input, weights, objective, lambda, -1, flags, false, out, tol);
}

int run_validate(unsigned seed, const std::string& out, double tol) {
  Timer total;
  ConicOptions opt;
  opt.tol = tol;
  RecoverySuiteResult rec = run_recovery_suite(seed, 100, 10.0, opt);
  SurrogateSuiteResult sur = run_surrogate_suite(seed + 1, 40, opt);

  const double recovery_tol = 1e-4;
  const double scale_tol = 1e-8;
  const bool pass = rec.max_direct_residual <= recovery_tol &&
                    rec.max_shrinkage_residual <= recovery_tol &&
                    rec.max_scale_gap <= scale_tol && sur.c1_violation <= 1e-8 &&
                    sur.c2_gap <= 1e-10 && sur.c3_gap <= 1e-4 &&
                    sur.worst_final_margin <= 1e-6;

  std::cout << "recovery: instances=" << rec.instances << " solved=" << rec.solved
            << " worst_direct=" << rec.max_direct_residual
            << " worst_shrinkage=" << rec.max_shrinkage_residual
            << " worst_scale_gap=" << rec.max_scale_gap << "\n";
  std::cout << "surrogate: instances=" << sur.instances << " solved=" << sur.solved
            << " binding=" << sur.with_binding_lower << " max_iters=" << sur.max_iterations
            << " worst_monotonicity=" << sur.worst_monotonicity
            << " worst_final_margin=" << sur.worst_final_margin << " c1=" << sur.c1_violation
            << " c2=" << sur.c2_gap << " c3=" << sur.c3_gap << "\n";
  std::cout << (pass ? "validate: PASS" : "validate: FAIL") << "\n";

  if (!out.empty()) {
    ensure_outdir(out);
    json summary;
    summary["command"] = "validate";
    summary["seed"] = seed;
    summary["recovery"] = {{"instances", rec.instances},
                           {"solved", rec.solved},
                           {"max_direct_residual", rec.max_direct_residual},
                           {"max_shrinkage_residual", rec.max_shrinkage_residual},
                           {"max_scale_gap", rec.max_scale_gap}};
    summary["surrogate"] = {{"instances", sur.instances},
                            {"solved", sur.solved},
                            {"with_binding_lower", sur.with_binding_lower},
                            {"max_iterations", sur.max_iterations},
                            {"worst_monotonicity", sur.worst_monotonicity},
                            {"worst_final_margin", sur.worst_final_margin},
                            {"c1_violation", sur.c1_violation},
                            {"c2_gap", sur.c2_gap},
                            {"c3_gap", sur.c3_gap}};
    summary["passed"] = pass;
    summary["timings"] = {{"total_s", total.seconds()}};
    write_summary(out, summary);
  }
  return pass ? 0 : 2;
}

int run_report(const std::string& out) {
  const fs::path p = fs::path(out) / "summary.json";
  std::ifstream in(p);
  if (!in) throw ModelError("no summary found at " + p.string());
  json j = json::parse(in);
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Three-phase feeder reconfiguration via group-sparse conic optimization"};
  app.require_subcommand(1);

  std::string input, weights, out = ".", objective = "loss", grid_spec, voltage_mode = "none";
  double lambda = 0.0, vmin = 0.95, vmax = 1.05, tol = 1e-8;
  int target_closed = -1;
  bool radial_only = true;
  unsigned seed = 1;

  auto add_common = [&](CLI::App* cmd, bool needs_input) {
    if (needs_input) cmd->add_option("--input", input, "network JSON file")->required();
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--tol", tol, "solver tolerance");
  };
  auto add_model_flags = [&](CLI::App* cmd) {
    cmd->add_option("--objective", objective, "loss|operational|balancing|mixed")
        ->check(CLI::IsMember({"loss", "operational", "balancing", "mixed"}));
    cmd->add_option("--weights", weights, "JSON file mapping line index -> weight");
    cmd->add_option("--voltage", voltage_mode, "none|box|magnitude")
        ->check(CLI::IsMember({"none", "box", "magnitude"}));
    cmd->add_option("--vmin", vmin, "lower voltage bound [pu]");
    cmd->add_option("--vmax", vmax, "upper voltage bound [pu]");
  };

  CLI::App* c_solve = app.add_subcommand("solve", "select switch states at one weight");
  add_common(c_solve, true);
  add_model_flags(c_solve);
  c_solve->add_option("--lambda", lambda, "regularization weight [V]");
  c_solve->add_option("--target-closed", target_closed,
                      "search for a weight yielding this many closed switches");
  c_solve->add_flag("--radial-only", solve_radial,
                    "open further weak switches until the topology is a spanning tree");

  CLI::App* c_sweep = app.add_subcommand("sweep", "sweep the regularization weight");
  add_common(c_sweep, true);
  add_model_flags(c_sweep);
  c_sweep->add_option("--lambda-grid", grid_spec, "lo:hi:n logarithmic grid")->required();

  CLI::App* c_oracle = app.add_subcommand("oracle", "exhaustive switch-state enumeration");
  add_common(c_oracle, true);
  c_oracle->add_option("--objective", objective, "loss|operational|balancing|mixed")
      ->check(CLI::IsMember({"loss", "operational", "balancing", "mixed"}));
  c_oracle->add_option("--radial-only", radial_only, "restrict to spanning trees (default true)");

  CLI::App* c_baseline = app.add_subcommand("baseline", "greedy loop-opening heuristic");
  add_common(c_baseline, true);

  CLI::App* c_sca = app.add_subcommand("sca", "solve with magnitude voltage bounds");
  add_common(c_sca, true);
  add_model_flags(c_sca);
  c_sca->add_option("--lambda", lambda, "regularization weight [V]");

  CLI::App* c_validate = app.add_subcommand("validate", "randomized self-checks");
  c_validate->add_option("--seed", seed, "random seed");
  c_validate->add_option("--out", out, "optional output directory");
  c_validate->add_option("--tol", tol, "solver tolerance");

  CLI::App* c_report = app.add_subcommand("report", "pretty-print a stored summary");
  c_report->add_option("--out", out, "directory holding summary.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    VoltageFlags vf{voltage_mode, vmin, vmax};
    if (c_solve->parsed())
      return run_solve(input, weights, objective, lambda, target_closed, vf, out, tol);
    if (c_sweep->parsed()) return run_sweep(input, weights, objective, grid_spec, vf, out, tol);
    if (c_oracle->parsed()) return run_oracle(input, objective, radial_only, out, tol);
    if (c_baseline->parsed()) return run_baseline(input, out, tol);
    if (c_sca->parsed()) return run_sca(input, weights, objective, lambda, vf, out, tol);
    if (c_validate->parsed()) return run_validate(seed, out, tol);
    if (c_report->parsed()) return run_report(out);
    std::cerr << "no command given\n";
    return 1;
  } catch (const ModelError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return 1;
  } catch (const SolveError& e) {
    std::cerr << "solver error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
