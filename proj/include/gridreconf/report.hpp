#pragma once

/// @file report.hpp
/// @brief Artifact writers: deterministic CSV tables (12 significant digits,
///        header rows, '\n' line endings) and structured summary fragments.

#include <fstream>
#include <string>
#include <vector>

#include "gridreconf/common.hpp"
#include "gridreconf/formulation.hpp"
#include "gridreconf/load_model.hpp"
#include "gridreconf/network.hpp"
#include "gridreconf/pipeline.hpp"
#include "gridreconf/verification.hpp"

namespace gridreconf {

inline std::string csv_num(double v) { return format_sig(v, 12); }

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot open output file: " + path);
  out << content;
  if (!out) throw ModelError("failed writing output file: " + path);
}

/// One column of the line-current table: a weight value and the operating
/// currents it produced (per line, stacked [Re; Im] in amperes; empty for
/// open lines).
struct CurrentsColumn {
  double lambda_si = 0.0;
  std::vector<Vec> xi_si;
};

inline std::vector<Vec> xi_si_of(const Network& net, const std::vector<Vec>& xi_pu) {
  std::vector<Vec> out(xi_pu.size());
  const double ib = net.base().i_base();
  for (size_t e = 0; e < xi_pu.size(); ++e)
    if (xi_pu[e].size()) out[e] = xi_pu[e] * ib;
  return out;
}

/// Current-magnitude matrix: one row per (line, phase), one magnitude column
/// per weight value.
inline void write_currents_csv(const std::string& path, const Network& net,
                               const std::vector<CurrentsColumn>& columns) {
  std::string s = "line,from,to,phase";
  for (const auto& c : columns) s += ",i_mag_amp_lambda=" + csv_num(c.lambda_si);
  s += "\n";
  for (int e = 0; e < net.line_count(); ++e) {
    const Line& ln = net.lines[e];
    const int p = static_cast<int>(ln.phases.size());
    for (int k = 0; k < p; ++k) {
      s += std::to_string(e) + "," + std::to_string(ln.from) + "," + std::to_string(ln.to) +
           "," + std::to_string(ln.phases[k]);
      for (const auto& c : columns) {
        double mag = 0.0;
        if (e < static_cast<int>(c.xi_si.size()) && c.xi_si[e].size() == 2 * p)
          mag = std::hypot(c.xi_si[e](k), c.xi_si[e](p + k));
        s += "," + csv_num(mag);
      }
      s += "\n";
    }
  }
  write_text_file(path, s);
}

/// Weight-sweep curve: weight, refit loss, switch count, status.
inline void write_loss_curve_csv(const std::string& path, const SweepResult& sweep) {
  std::string s = "lambda,refit_loss_w,closed_switchable,ok\n";
  for (const auto& pt : sweep.points) {
    s += csv_num(pt.lambda_si) + "," + (pt.ok ? csv_num(pt.refit_loss_si) : std::string("nan")) +
         "," + std::to_string(pt.closed_switchable) + "," + (pt.ok ? "1" : "0") + "\n";
  }
  write_text_file(path, s);
}

/// Served-load deviation metrics (mean absolute, per loaded phase).
inline void write_deviation_csv(const std::string& path, const LoadDeviation& dev) {
  std::string s = "dp_w,dq_var\n";
  s += csv_num(dev.dp_w) + "," + csv_num(dev.dq_var) + "\n";
  write_text_file(path, s);
}

// --------------------------------------------------------- summary fragments

inline json topology_json(const Network& net, const Topology& topo) {
  json j;
  json open = json::array();
  for (int e : topo.open_lines())
    open.push_back({{"line", e}, {"from", net.lines[e].from}, {"to", net.lines[e].to}});
  j["open"] = open;
  j["closed_count"] = topo.closed_count();
  j["closed_switchable"] = topo.closed_switchable(net);
  j["radial"] = topo.is_radial;
  j["connected"] = topo.is_connected;
  return j;
}

inline json solution_json(const DsrSolution& sol) {
  json j;
  j["status"] = to_string(sol.status);
  j["iterations"] = sol.iters;
  j["objective_si"] = sol.objective_si;
  j["kkt"] = {{"primal_residual", sol.pres},
              {"dual_residual", sol.dres},
              {"relative_gap", sol.relgap}};
  j["slater_margin"] = sol.slater_margin;
  j["slater_flag"] = sol.slater_margin < 1e-6;
  return j;
}

inline json verification_json(const VerificationReport& rep) {
  json j;
  j["max_direct_residual"] = rep.max_direct_residual;
  j["max_shrinkage_residual"] = rep.max_shrinkage_residual;
  j["max_group_head_gap"] = rep.max_group_head_gap;
  j["threshold"] = rep.threshold;
  j["passed"] = rep.passed;
  return j;
}

}  // namespace gridreconf
