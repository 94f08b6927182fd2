#pragma once

/// @file formulation.hpp
/// @brief Assembly of the convex reconfiguration program in standard conic form.
///
/// Variables (all per-unit): stacked line currents xi = [Re; Im] per line,
/// dispatchable generation components sigma, and one epigraph scalar t per
/// regularized switchable line. The program is
///   min  quadratic cost + sum lambda_mn t_mn
///   s.t. per-node per-phase current balance (equalities),
///        ||xi_mn|| <= t_mn (group cones), per-phase ampacity cones,
///        generator boxes, and optional voltage constraints (component box,
///        or magnitude upper cones plus linearized lower surrogates).
///
/// Internally everything is per-unit: impedances / z_base, currents / i_base,
/// powers / s_phase_base, regularization weights / lambda_base. The quadratic
/// cost equals (SI cost)/s_phase_base, so SI objective values are recovered by
/// a single multiplication.

#include <map>
#include <optional>
#include <set>
#include <vector>

#include "gridreconf/common.hpp"
#include "gridreconf/conic.hpp"
#include "gridreconf/load_model.hpp"
#include "gridreconf/network.hpp"

namespace gridreconf {

enum class ObjectiveKind { loss, operational, balancing, mixed };

inline const char* to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::loss: return "loss";
    case ObjectiveKind::operational: return "operational";
    case ObjectiveKind::balancing: return "balancing";
    case ObjectiveKind::mixed: return "mixed";
  }
  return "?";
}

namespace detail {

struct SocBlock {
  Mat rows;
  Vec rhs;
};

inline Mat zbar_of(const CMat& z_pu) {
  const int p = static_cast<int>(z_pu.rows());
  Mat zb = Mat::Zero(2 * p, 2 * p);
  zb.topLeftCorner(p, p) = z_pu.real();
  zb.bottomRightCorner(p, p) = z_pu.real();
  return zb;
}

/// [[ReZ, -ImZ], [ImZ, ReZ]] voltage-drop operator of a line (pu).
inline Mat psi_of(const CMat& z_pu) {
  const int p = static_cast<int>(z_pu.rows());
  Mat ps(2 * p, 2 * p);
  ps.topLeftCorner(p, p) = z_pu.real();
  ps.topRightCorner(p, p) = -z_pu.imag();
  ps.bottomLeftCorner(p, p) = z_pu.imag();
  ps.bottomRightCorner(p, p) = z_pu.real();
  return ps;
}

}  // namespace detail

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::loss;
  double c0 = 1.0;          ///< cost per watt of losses (operational)
  double mix_weight = 0.5;  ///< mixed = w * operational + (1-w) * balancing
  std::optional<std::vector<int>> balance_set;  ///< E_B; all capped lines when absent
};

enum class VoltageMode { none, box, magnitude };

struct VoltageSpec {
  VoltageMode mode = VoltageMode::none;
  /// box mode: per node index, stacked [Re; Im] lower/upper bounds (pu).
  std::map<int, std::pair<Vec, Vec>> box_pu;
  /// magnitude mode: per node index, (lower, upper) voltage magnitude bounds (pu).
  std::map<int, std::pair<double, double>> mag_pu;

  /// Component box around each constrained node's nominal phasor so that the
  /// magnitude stays within [vmin, vmax] pu: half-width min(1-vmin, vmax-1)/sqrt(2).
  static VoltageSpec uniform_box(const Network& net, double vmin_pu, double vmax_pu) {
    if (!(vmin_pu < 1.0 && 1.0 < vmax_pu))
      throw ModelError("box voltage bounds must bracket the nominal magnitude 1 pu");
    VoltageSpec vs;
    vs.mode = VoltageMode::box;
    const double delta = std::min(1.0 - vmin_pu, vmax_pu - 1.0) / std::sqrt(2.0);
    for (int v = 0; v < net.node_count(); ++v) {
      if (v == net.substation_index()) continue;
      Vec ref = nominal_phasor_vec(net.nodes[v].phases, std::sqrt(3.0));
      vs.box_pu[v] = {ref.array() - delta, ref.array() + delta};
    }
    return vs;
  }

  static VoltageSpec uniform_magnitude(const Network& net, double vmin_pu, double vmax_pu) {
    if (!(0.0 < vmin_pu && vmin_pu <= vmax_pu))
      throw ModelError("magnitude voltage bounds require 0 < vmin <= vmax");
    VoltageSpec vs;
    vs.mode = VoltageMode::magnitude;
    for (int v = 0; v < net.node_count(); ++v) {
      if (v == net.substation_index()) continue;
      vs.mag_pu[v] = {vmin_pu, vmax_pu};
    }
    return vs;
  }
};

/// Per-line program metadata.
struct LineVars {
  int xi_off = -1;        ///< first index of the stacked [Re; Im] current block
  int np = 0;             ///< phase count
  int t_idx = -1;         ///< epigraph variable index (-1: not regularized)
  double lambda_pu = 0.0; ///< effective regularization weight (pu)
  bool active = true;     ///< false when the line is excluded (open) from the program
  double cap_pu = 0.0;    ///< per-phase current cap (pu amperes), 0 when absent
  bool has_cap = false;
};

/// A dispatchable-generation component that is a free variable.
struct DgVar {
  int node = -1;
  int phase_pos = -1;  ///< position within the node's phase list
  bool is_active = true;  ///< true: P component, false: Q component
  int idx = -1;
  double lo = 0.0, hi = 0.0;  ///< pu bounds
  double cost = 0.0;          ///< SI cost per watt (applies to P components)
};

/// Voltage-constraint bookkeeping for one constrained node.
struct VoltageEntry {
  int node = -1;
  int ref_node = -1;
  std::vector<Network::PathStep> path;  ///< walk ref -> node over switch-free lines
  Vec nu_ref;                           ///< reference phasor components (pu)
  Vec box_lo, box_hi;                   ///< box mode (pu), empty otherwise
  double vmin = 0.0, vmax = 0.0;        ///< magnitude mode (pu)
};

struct DsrProblem {
  const Network* net = nullptr;
  ObjectiveSpec objective;
  VoltageSpec voltage;
  double lambda_si = 0.0;

  // Standard form (per-unit).
  Mat P;
  Vec q;
  Mat A;
  Vec b;
  Mat G;
  Vec h;
  ConeSpec cone;

  // Layout.
  int n_vars = 0;
  std::vector<LineVars> line_vars;
  std::vector<DgVar> dg_vars;
  std::vector<Vec> sigma_fixed_pu;  ///< per node: stacked fixed [P; Q] parts (may be empty)
  std::vector<int> node_row_off;    ///< equality row offset per node (-1: substation)
  std::vector<std::vector<int>> cap_block;  ///< per line, per phase: SOC block ordinal (-1 none)
  std::vector<int> group_block;             ///< per line: group-cone ordinal (-1 none)
  std::vector<VoltageEntry> voltage_entries;
  std::vector<int> sca_row;  ///< per voltage entry x phase: LP row of the lower surrogate
  bool has_sca_rows = false;

  /// Per-line impedance (pu) and its resistive quadratic form Zbar = I2 x Re(Z).
  std::vector<CMat> z_pu;
  std::vector<Mat> zbar_pu;

  double s_phase_base() const { return net->base().s_phase_base(); }
  double lambda_pu(int line) const { return line_vars[line].lambda_pu; }
};

/// Dense coefficient rows (2p x n_vars) of a constrained node's affine
/// voltage expression nu(x) = nu_ref + [rows] x, accumulated over the
/// switch-free walk from the reference.
inline Mat voltage_coefficients(const DsrProblem& pr, const VoltageEntry& en) {
  const Network& net = *pr.net;
  const int p = static_cast<int>(net.nodes[en.node].phases.size());
  Mat rows = Mat::Zero(2 * p, pr.n_vars);
  for (const auto& st : en.path) {
    const LineVars& lv = pr.line_vars[st.line];
    Mat psi = detail::psi_of(pr.z_pu[st.line]);
    for (int k = 0; k < lv.np; ++k) {
      const int kp = Network::phase_pos(net.nodes[en.node].phases, net.lines[st.line].phases[k]);
      if (kp < 0) continue;
      for (int c = 0; c < lv.np; ++c) {
        rows(kp, lv.xi_off + c) += st.alpha * psi(k, c);
        rows(kp, lv.xi_off + lv.np + c) += st.alpha * psi(k, lv.np + c);
        rows(p + kp, lv.xi_off + c) += st.alpha * psi(lv.np + k, c);
        rows(p + kp, lv.xi_off + lv.np + c) += st.alpha * psi(lv.np + k, lv.np + c);
      }
    }
  }
  return rows;
}

/// Voltage magnitudes (pu) of every constrained node at a solver-space point.
/// Returns pairs of (entry index, per-phase magnitudes).
inline std::vector<std::pair<int, Vec>> voltage_magnitudes(const DsrProblem& pr, const Vec& x) {
  std::vector<std::pair<int, Vec>> out;
  for (size_t i = 0; i < pr.voltage_entries.size(); ++i) {
    const VoltageEntry& en = pr.voltage_entries[i];
    const int p = static_cast<int>(pr.net->nodes[en.node].phases.size());
    Vec nu = en.nu_ref + voltage_coefficients(pr, en) * x;
    Vec mags(p);
    for (int k = 0; k < p; ++k) mags(k) = std::hypot(nu(k), nu(p + k));
    out.emplace_back(static_cast<int>(i), mags);
  }
  return out;
}

/// Build the convex reconfiguration program.
///
/// `lambda_si`: global regularization weight in SI volts; per-line
/// `lambda_weight` values override it. `closed`: optional line mask — open
/// lines are excluded from the program entirely (used by refits); when empty
/// all lines participate. `sca_iterate`: previous stacked-current iterate
/// (pu, concatenated per active line in line order) enabling the linear
/// lower-bound surrogates in magnitude mode.
inline DsrProblem build_p2(const Network& net, const ObjectiveSpec& objective, double lambda_si,
                           const VoltageSpec& voltage = VoltageSpec{},
                           const std::vector<char>& closed = {},
                           const std::optional<Vec>& sca_iterate = std::nullopt) {
  if (lambda_si < 0.0) throw ModelError("lambda must be nonnegative");
  const BaseUnits bu = net.base();
  DsrProblem pr;
  pr.net = &net;
  pr.objective = objective;
  pr.voltage = voltage;
  pr.lambda_si = lambda_si;

  const int E = net.line_count();
  const int N = net.node_count();
  std::vector<char> mask = closed.empty() ? std::vector<char>(E, 1) : closed;
  if (static_cast<int>(mask.size()) != E) throw ModelError("line mask size mismatch");

  // ---- objective weighting per kind
  double w_loss = 0.0, w_op = 0.0, w_bal = 0.0;
  switch (objective.kind) {
    case ObjectiveKind::loss: w_loss = 1.0; break;
    case ObjectiveKind::operational: w_op = 1.0; break;
    case ObjectiveKind::balancing: w_bal = 1.0; break;
    case ObjectiveKind::mixed:
      if (objective.mix_weight < 0.0 || objective.mix_weight > 1.0)
        throw ModelError("mix_weight must lie in [0, 1]");
      w_op = objective.mix_weight;
      w_bal = 1.0 - objective.mix_weight;
      break;
  }
  std::set<int> balance;
  if (w_bal > 0.0) {
    if (objective.balance_set) {
      for (int e : *objective.balance_set) {
        if (e < 0 || e >= E) throw ModelError("balance_set references unknown line");
        balance.insert(e);
      }
    } else {
      for (int e = 0; e < E; ++e)
        if (mask[e] && net.lines[e].i_max_amp) balance.insert(e);
    }
    if (balance.empty()) throw ModelError("balancing objective requires a nonempty balance set");
    for (int e : balance)
      if (!net.lines[e].i_max_amp)
        throw ModelError("balancing objective requires i_max_amp on line " + std::to_string(e));
  }

  // ---- variable layout
  pr.line_vars.assign(E, LineVars{});
  pr.z_pu.assign(E, CMat{});
  pr.zbar_pu.assign(E, Mat{});
  int nv = 0;
  for (int e = 0; e < E; ++e) {
    LineVars& lv = pr.line_vars[e];
    lv.active = mask[e] != 0;
    lv.np = static_cast<int>(net.lines[e].phases.size());
    pr.z_pu[e] = net.lines[e].z_ohm / bu.z_base();
    pr.zbar_pu[e] = detail::zbar_of(pr.z_pu[e]);
    if (!lv.active) continue;
    lv.xi_off = nv;
    nv += 2 * lv.np;
    const Line& ln = net.lines[e];
    double lam = ln.switchable ? ln.lambda_weight.value_or(lambda_si) : 0.0;
    lv.lambda_pu = lam / bu.lambda_base();
    if (ln.i_max_amp) {
      lv.has_cap = true;
      lv.cap_pu = *ln.i_max_amp / bu.i_base();
    }
  }
  for (int e = 0; e < E; ++e) {
    LineVars& lv = pr.line_vars[e];
    if (lv.active && net.lines[e].switchable && lv.lambda_pu > 0.0) lv.t_idx = nv++;
  }
  pr.sigma_fixed_pu.assign(N, Vec{});
  const double fix_eps = 1e-12;
  for (int v = 0; v < N; ++v) {
    const Node& nd = net.nodes[v];
    if (!nd.has_dg()) continue;
    const int p = static_cast<int>(nd.phases.size());
    pr.sigma_fixed_pu[v] = Vec::Zero(2 * p);
    for (int k = 0; k < p; ++k) {
      const auto& g = nd.dg[nd.phases[k]];
      if (!g) continue;
      const double plo = g->p_min_w / bu.s_phase_base(), phi = g->p_max_w / bu.s_phase_base();
      const double qlo = g->q_min_var / bu.s_phase_base(), qhi = g->q_max_var / bu.s_phase_base();
      if (phi - plo <= fix_eps) {
        pr.sigma_fixed_pu[v](k) = 0.5 * (plo + phi);
      } else {
        pr.dg_vars.push_back({v, k, true, nv++, plo, phi, g->cost_per_w});
      }
      if (qhi - qlo <= fix_eps) {
        pr.sigma_fixed_pu[v](p + k) = 0.5 * (qlo + qhi);
      } else {
        pr.dg_vars.push_back({v, k, false, nv++, qlo, qhi, 0.0});
      }
    }
  }
  pr.n_vars = nv;

  // ---- objective
  pr.P = Mat::Zero(nv, nv);
  pr.q = Vec::Zero(nv);
  for (int e = 0; e < E; ++e) {
    const LineVars& lv = pr.line_vars[e];
    if (!lv.active) continue;
    Mat block = Mat::Zero(2 * lv.np, 2 * lv.np);
    if (w_loss > 0.0) block += w_loss * pr.zbar_pu[e];
    if (w_op > 0.0) block += w_op * 2.0 * objective.c0 * pr.zbar_pu[e];
    if (w_bal > 0.0 && balance.count(e)) {
      const double cap_sq = lv.cap_pu * lv.cap_pu;
      block += w_bal * (2.0 / (cap_sq * bu.s_phase_base())) * Mat::Identity(2 * lv.np, 2 * lv.np);
    }
    pr.P.block(lv.xi_off, lv.xi_off, 2 * lv.np, 2 * lv.np) = block;
    if (lv.t_idx >= 0) pr.q(lv.t_idx) = lv.lambda_pu;
  }
  if (w_op > 0.0) {
    for (const DgVar& g : pr.dg_vars)
      if (g.is_active) pr.q(g.idx) += w_op * g.cost;
  }
  {
    Eigen::SelfAdjointEigenSolver<Mat> es(pr.P);
    if (es.eigenvalues().minCoeff() < -1e-9 * std::max(1.0, pr.P.norm()))
      throw ModelError("assembled quadratic cost is not positive semidefinite");
  }

  // ---- equality rows: per non-substation node, per phase, Re and Im balance
  pr.node_row_off.assign(N, -1);
  int n_eq = 0;
  for (int v = 0; v < N; ++v) {
    if (v == net.substation_index()) continue;
    pr.node_row_off[v] = n_eq;
    n_eq += 2 * static_cast<int>(net.nodes[v].phases.size());
  }
  pr.A = Mat::Zero(n_eq, nv);
  pr.b = Vec::Zero(n_eq);
  for (int e = 0; e < E; ++e) {
    const LineVars& lv = pr.line_vars[e];
    if (!lv.active) continue;
    const Line& ln = net.lines[e];
    const int m = net.node_index(ln.from), n2 = net.node_index(ln.to);
    for (int end = 0; end < 2; ++end) {
      const int v = end == 0 ? m : n2;
      const double sgn = end == 0 ? 1.0 : -1.0;  // leaves the tail, enters the head
      if (pr.node_row_off[v] < 0) continue;      // substation row dropped (slack bus)
      const int pn = static_cast<int>(net.nodes[v].phases.size());
      for (int k = 0; k < lv.np; ++k) {
        const int kp = Network::phase_pos(net.nodes[v].phases, ln.phases[k]);
        pr.A(pr.node_row_off[v] + kp, lv.xi_off + k) = sgn;
        pr.A(pr.node_row_off[v] + pn + kp, lv.xi_off + lv.np + k) = sgn;
      }
    }
  }
  for (int v = 0; v < N; ++v) {
    if (pr.node_row_off[v] < 0) continue;
    const Node& nd = net.nodes[v];
    const int p = static_cast<int>(nd.phases.size());
    // Per-unit injection operator: with V_N = sqrt(3) pu the prefactor is 1.
    Mat B = injection_matrix(nd.phases, std::sqrt(3.0));
    Vec sigma_l = load_power_vec(nd) / bu.s_phase_base();
    Vec fixed = pr.sigma_fixed_pu[v].size() ? pr.sigma_fixed_pu[v] : Vec::Zero(2 * p);
    pr.b.segment(pr.node_row_off[v], 2 * p) = B * (sigma_l - fixed);
    pr.b.segment(pr.node_row_off[v], 2 * p) *= -1.0;  // rows read: out - in - B sigma_G = -B sigma_L
    for (const DgVar& g : pr.dg_vars) {
      if (g.node != v) continue;
      const int comp = g.is_active ? g.phase_pos : p + g.phase_pos;
      pr.A.block(pr.node_row_off[v], g.idx, 2 * p, 1) = -B.col(comp);
    }
  }

  // ---- voltage bookkeeping (needed before inequality assembly)
  if (voltage.mode != VoltageMode::none) {
    auto make_entry = [&](int v) {
      auto ref = net.switch_free_path(v);
      if (!ref)
        throw ModelError("voltage constraint on node " + std::to_string(net.nodes[v].id) +
                         ": no switch-free path to an admissible reference");
      VoltageEntry en;
      en.node = v;
      en.ref_node = ref->ref_node;
      en.path = ref->path;
      en.nu_ref = nominal_phasor_vec(net.nodes[v].phases, std::sqrt(3.0));
      for (const auto& st : en.path)
        if (!pr.line_vars[st.line].active)
          throw ModelError("voltage constraint on node " + std::to_string(net.nodes[v].id) +
                           ": reference path uses an excluded line");
      return en;
    };
    if (voltage.mode == VoltageMode::box) {
      for (const auto& [v, bounds] : voltage.box_pu) {
        VoltageEntry en = make_entry(v);
        en.box_lo = bounds.first;
        en.box_hi = bounds.second;
        const int tp = 2 * static_cast<int>(net.nodes[v].phases.size());
        if (en.box_lo.size() != tp || en.box_hi.size() != tp)
          throw ModelError("box bounds dimension mismatch on node " + std::to_string(net.nodes[v].id));
        if (((en.box_hi - en.box_lo).array() < 0.0).any())
          throw ModelError("box bounds inverted on node " + std::to_string(net.nodes[v].id));
        pr.voltage_entries.push_back(std::move(en));
      }
    } else {
      for (const auto& [v, bounds] : voltage.mag_pu) {
        VoltageEntry en = make_entry(v);
        en.vmin = bounds.first;
        en.vmax = bounds.second;
        pr.voltage_entries.push_back(std::move(en));
      }
    }
  }

  auto voltage_rows = [&](const VoltageEntry& en) { return voltage_coefficients(pr, en); };

  // ---- inequality assembly: LP rows first, then SOC blocks.
  std::vector<Vec> lp_rows;
  std::vector<double> lp_rhs;
  auto push_lp = [&](const Vec& row, double rhs) {
    lp_rows.push_back(row);
    lp_rhs.push_back(rhs);
  };
  for (const DgVar& g : pr.dg_vars) {
    Vec row = Vec::Zero(nv);
    row(g.idx) = -1.0;
    push_lp(row, -g.lo);
    row(g.idx) = 1.0;
    push_lp(row, g.hi);
  }
  if (voltage.mode == VoltageMode::box) {
    for (const VoltageEntry& en : pr.voltage_entries) {
      Mat rows = voltage_rows(en);
      const int tp = static_cast<int>(rows.rows());
      for (int r = 0; r < tp; ++r) {
        push_lp(rows.row(r), en.box_hi(r) - en.nu_ref(r));
        push_lp(-rows.row(r), en.nu_ref(r) - en.box_lo(r));
      }
    }
  }
  pr.sca_row.clear();
  if (voltage.mode == VoltageMode::magnitude && sca_iterate) {
    pr.has_sca_rows = true;
    if (sca_iterate->size() != nv)
      throw ModelError("iterate dimension does not match the assembled variable layout");
    const Vec& xi_prev = *sca_iterate;
    for (const VoltageEntry& en : pr.voltage_entries) {
      Mat rows = voltage_rows(en);
      const int p = static_cast<int>(net.nodes[en.node].phases.size());
      Vec nu_prev = en.nu_ref + rows.leftCols(nv) * xi_prev.head(nv);
      for (int k = 0; k < p; ++k) {
        // Lower bound |V|^2 >= vmin^2 linearized at the previous iterate:
        // a'(xi_prev - xi) - b + vmin^2 <= 0.
        Vec a = 2.0 * (rows.row(k).transpose() * nu_prev(k) +
                       rows.row(p + k).transpose() * nu_prev(p + k));
        const double bq = nu_prev(k) * nu_prev(k) + nu_prev(p + k) * nu_prev(p + k);
        const double vmin2 = en.vmin * en.vmin;
        pr.sca_row.push_back(static_cast<int>(lp_rows.size()));
        push_lp(-a, bq - a.dot(xi_prev.head(nv)) - vmin2);
      }
    }
  }

  std::vector<detail::SocBlock> socs;
  pr.cap_block.assign(E, {});
  pr.group_block.assign(E, -1);
  int blk = 0;
  for (int e = 0; e < E; ++e) {
    const LineVars& lv = pr.line_vars[e];
    pr.cap_block[e].assign(lv.np, -1);
    if (!lv.active || !lv.has_cap) continue;
    for (int k = 0; k < lv.np; ++k) {
      detail::SocBlock sb;
      sb.rows = Mat::Zero(3, nv);
      sb.rhs = Vec::Zero(3);
      sb.rhs(0) = lv.cap_pu;
      sb.rows(1, lv.xi_off + k) = -1.0;
      sb.rows(2, lv.xi_off + lv.np + k) = -1.0;
      pr.cap_block[e][k] = blk++;
      socs.push_back(std::move(sb));
    }
  }
  for (int e = 0; e < E; ++e) {
    const LineVars& lv = pr.line_vars[e];
    if (lv.t_idx < 0) continue;
    detail::SocBlock sb;
    sb.rows = Mat::Zero(1 + 2 * lv.np, nv);
    sb.rhs = Vec::Zero(1 + 2 * lv.np);
    sb.rows(0, lv.t_idx) = -1.0;
    for (int c = 0; c < 2 * lv.np; ++c) sb.rows(1 + c, lv.xi_off + c) = -1.0;
    pr.group_block[e] = blk++;
    socs.push_back(std::move(sb));
  }
  if (voltage.mode == VoltageMode::magnitude) {
    for (const VoltageEntry& en : pr.voltage_entries) {
      Mat rows = voltage_rows(en);
      const int p = static_cast<int>(net.nodes[en.node].phases.size());
      for (int k = 0; k < p; ++k) {
        detail::SocBlock sb;
        sb.rows = Mat::Zero(3, nv);
        sb.rhs = Vec::Zero(3);
        sb.rhs(0) = en.vmax;
        sb.rows.row(1) = -rows.row(k);
        sb.rhs(1) = en.nu_ref(k);
        sb.rows.row(2) = -rows.row(p + k);
        sb.rhs(2) = en.nu_ref(p + k);
        ++blk;
        socs.push_back(std::move(sb));
      }
    }
  }

  const int n_lp = static_cast<int>(lp_rows.size());
  int m_total = n_lp;
  pr.cone.lp = n_lp;
  for (const auto& sb : socs) {
    pr.cone.socs.push_back(static_cast<int>(sb.rhs.size()));
    m_total += static_cast<int>(sb.rhs.size());
  }
  pr.G = Mat::Zero(m_total, nv);
  pr.h = Vec::Zero(m_total);
  for (int r = 0; r < n_lp; ++r) {
    pr.G.row(r) = lp_rows[r];
    pr.h(r) = lp_rhs[r];
  }
  int o = n_lp;
  for (const auto& sb : socs) {
    const int d = static_cast<int>(sb.rhs.size());
    pr.G.block(o, 0, d, nv) = sb.rows;
    pr.h.segment(o, d) = sb.rhs;
    o += d;
  }
  return pr;
}

/// Box-constrained variant (spec'd as a separate operation).
inline DsrProblem add_voltage_box(const Network& net, const ObjectiveSpec& objective,
                                  double lambda_si, const VoltageSpec& box_spec) {
  if (box_spec.mode != VoltageMode::box) throw ModelError("add_voltage_box requires box mode");
  return build_p2(net, objective, lambda_si, box_spec);
}

/// Convex subproblem of the magnitude-bound scheme at a given iterate.
inline DsrProblem build_sca_subproblem(const Network& net, const ObjectiveSpec& objective,
                                       double lambda_si, const VoltageSpec& mag_spec,
                                       const Vec& xi_iterate,
                                       const std::vector<char>& closed = {}) {
  if (mag_spec.mode != VoltageMode::magnitude)
    throw ModelError("build_sca_subproblem requires magnitude mode");
  return build_p2(net, objective, lambda_si, mag_spec, closed, xi_iterate);
}

// --------------------------------------------------------------- solutions

struct DsrSolution {
  ConicStatus status = ConicStatus::numerical_failure;
  int iters = 0;
  double pres = 0.0, dres = 0.0, relgap = 0.0;
  double objective_pu = 0.0;   ///< solved objective (pu; quadratic + epigraph terms)
  double objective_si = 0.0;   ///< objective * s_phase_base
  std::vector<Vec> xi_pu;      ///< per line, stacked [Re; Im] (empty when line excluded)
  std::vector<double> t;       ///< per line epigraph value (NaN when absent)
  std::vector<Vec> sigma_pu;   ///< per node, stacked [P; Q] dispatched generation (pu)
  std::vector<Vec> mu_pu;      ///< per node, stacked multiplier (pu volts; zeros at substation)
  std::vector<Vec> rho_pu;     ///< per line, per phase ampacity multiplier (pu ohm)
  double slater_margin = 0.0;  ///< min cone margin of the primal slack at the solution
  bool has_duals = false;
  Vec raw_x;                   ///< solver-space primal (for warm iterates)
  ConicResult raw;             ///< full solver output (kept for certificate checks)
};

inline DsrSolution extract_solution(const DsrProblem& pr, const ConicResult& cr) {
  const Network& net = *pr.net;
  DsrSolution sol;
  sol.status = cr.status;
  sol.iters = cr.iters;
  sol.pres = cr.pres;
  sol.dres = cr.dres;
  sol.relgap = cr.relgap;
  sol.objective_pu = cr.pobj;
  sol.objective_si = cr.pobj * pr.s_phase_base();
  sol.raw_x = cr.x;
  sol.raw = cr;
  const int E = net.line_count();
  const int N = net.node_count();
  sol.xi_pu.assign(E, Vec{});
  sol.t.assign(E, std::numeric_limits<double>::quiet_NaN());
  sol.rho_pu.assign(E, Vec{});
  sol.sigma_pu.assign(N, Vec{});
  sol.mu_pu.assign(N, Vec{});
  if (cr.x.size() == 0) return sol;
  for (int e = 0; e < E; ++e) {
    const LineVars& lv = pr.line_vars[e];
    sol.rho_pu[e] = Vec::Zero(lv.np);
    if (!lv.active) continue;
    sol.xi_pu[e] = cr.x.segment(lv.xi_off, 2 * lv.np);
    if (lv.t_idx >= 0) sol.t[e] = cr.x(lv.t_idx);
  }
  for (int v = 0; v < N; ++v) {
    const int p = static_cast<int>(net.nodes[v].phases.size());
    sol.sigma_pu[v] = pr.sigma_fixed_pu[v].size() ? pr.sigma_fixed_pu[v] : Vec::Zero(2 * p);
    sol.mu_pu[v] = Vec::Zero(2 * p);
  }
  for (const DgVar& g : pr.dg_vars) {
    const int p = static_cast<int>(net.nodes[g.node].phases.size());
    sol.sigma_pu[g.node](g.is_active ? g.phase_pos : p + g.phase_pos) = cr.x(g.idx);
  }
  if (cr.y.size() > 0) {
    sol.has_duals = true;
    for (int v = 0; v < N; ++v) {
      if (pr.node_row_off[v] < 0) continue;
      const int tp = 2 * static_cast<int>(net.nodes[v].phases.size());
      sol.mu_pu[v] = -cr.y.segment(pr.node_row_off[v], tp);
    }
    int o = pr.cone.lp;
    std::vector<double> heads;
    for (int d : pr.cone.socs) {
      heads.push_back(cr.z(o));
      o += d;
    }
    for (int e = 0; e < E; ++e) {
      const LineVars& lv = pr.line_vars[e];
      for (int k = 0; k < lv.np; ++k) {
        if (pr.cap_block[e].empty() || pr.cap_block[e][k] < 0) continue;
        sol.rho_pu[e](k) = heads[pr.cap_block[e][k]] / lv.cap_pu;
      }
    }
  }
  if (cr.s.size() > 0) sol.slater_margin = conic_detail::mineig(cr.s, pr.cone);
  return sol;
}

inline DsrSolution solve_p2(const DsrProblem& pr, const ConicOptions& opt = ConicOptions{}) {
  ConicResult cr = solve_conic(pr.P, pr.q, pr.A, pr.b, pr.G, pr.h, pr.cone, opt);
  return extract_solution(pr, cr);
}

/// Resistive loss of a current assignment, evaluated directly (SI watts):
/// sum over lines of xi' (I2 x Re Z) xi — the figure quoted in all reports.
inline double resistive_loss_si(const Network& net, const std::vector<Vec>& xi_pu) {
  const BaseUnits bu = net.base();
  double loss_pu = 0.0;
  for (int e = 0; e < net.line_count(); ++e) {
    if (e >= static_cast<int>(xi_pu.size()) || xi_pu[e].size() == 0) continue;
    loss_pu += xi_pu[e].dot(detail::zbar_of(net.lines[e].z_ohm / bu.z_base()) * xi_pu[e]);
  }
  return loss_pu * bu.s_phase_base();
}

inline double direct_loss_si(const DsrProblem& pr, const std::vector<Vec>& xi_pu) {
  double loss_pu = 0.0;
  for (int e = 0; e < pr.net->line_count(); ++e) {
    if (xi_pu[e].size() == 0) continue;
    loss_pu += xi_pu[e].dot(pr.zbar_pu[e] * xi_pu[e]);
  }
  return loss_pu * pr.s_phase_base();
}

/// Structured-text dump of the assembled standard form (solver interchange).
inline json dump_standard_form(const DsrProblem& pr) {
  auto mat = [](const Mat& M) {
    json rows = json::array();
    for (int r = 0; r < M.rows(); ++r) {
      json row = json::array();
      for (int c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
      rows.push_back(row);
    }
    return rows;
  };
  auto vec = [](const Vec& v) {
    json out = json::array();
    for (int i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
  };
  json j;
  j["n_vars"] = pr.n_vars;
  j["P"] = mat(pr.P);
  j["q"] = vec(pr.q);
  j["A"] = mat(pr.A);
  j["b"] = vec(pr.b);
  j["G"] = mat(pr.G);
  j["h"] = vec(pr.h);
  j["cone"] = {{"lp", pr.cone.lp}, {"socs", pr.cone.socs}};
  return j;
}

/// Inverse of dump_standard_form.
inline StandardForm parse_standard_form(const json& j) {
  auto mat = [](const json& rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r ? static_cast<int>(rows[0].size()) : 0;
    Mat M(r, c);
    for (int i = 0; i < r; ++i)
      for (int k = 0; k < c; ++k) M(i, k) = rows[i][k].get<double>();
    return M;
  };
  auto vec = [](const json& vals) {
    Vec v(vals.size());
    for (size_t i = 0; i < vals.size(); ++i) v(i) = vals[i].get<double>();
    return v;
  };
  StandardForm f;
  f.P = mat(j.at("P"));
  f.q = vec(j.at("q"));
  f.A = mat(j.at("A"));
  f.b = vec(j.at("b"));
  f.G = mat(j.at("G"));
  f.h = vec(j.at("h"));
  f.cone.lp = j.at("cone").at("lp").get<int>();
  f.cone.socs = j.at("cone").at("socs").get<std::vector<int>>();
  return f;
}

}  // namespace gridreconf
