#pragma once

/// @file load_model.hpp
/// @brief Load-to-current models: nominal phasors, linearized injections,
///        exponential voltage dependence, transformer loss adjustment, and the
///        served-load deviation metric.

#include <cmath>
#include <deque>
#include <limits>
#include <vector>

#include "gridreconf/common.hpp"
#include "gridreconf/network.hpp"

namespace gridreconf {

/// Nominal per-phase voltage phasor [V]: magnitude V_N/sqrt(3), angle from the
/// balanced three-phase reference (0, -120, +120 degrees).
inline cplx nominal_phasor(int phase, double v_nominal_v) {
  const double vm = v_nominal_v / std::sqrt(3.0);
  return std::polar(vm, phase_angle(phase));
}

/// Stacked [Re; Im] nominal phasor components for a node's phase list.
inline Vec nominal_phasor_vec(const std::vector<int>& phases, double v_nominal_v) {
  const int p = static_cast<int>(phases.size());
  Vec out(2 * p);
  for (int k = 0; k < p; ++k) {
    cplx v = nominal_phasor(phases[k], v_nominal_v);
    out(k) = v.real();
    out(p + k) = v.imag();
  }
  return out;
}

/// Linearized injection matrix: maps stacked per-phase power [P; Q] to the
/// stacked equivalent current [Re; Im] injected at the node,
///   (sqrt(3)/V_N) * [[Re(Phi), Im(Phi)], [Im(Phi), -Re(Phi)]],
/// where Phi = diag(exp(j * nominal phase angle)).
inline Mat injection_matrix(const std::vector<int>& phases, double v_nominal_v) {
  const int p = static_cast<int>(phases.size());
  const double s = std::sqrt(3.0) / v_nominal_v;
  Mat B = Mat::Zero(2 * p, 2 * p);
  for (int k = 0; k < p; ++k) {
    const double c = std::cos(phase_angle(phases[k]));
    const double sn = std::sin(phase_angle(phases[k]));
    B(k, k) = s * c;
    B(k, p + k) = s * sn;
    B(p + k, k) = s * sn;
    B(p + k, p + k) = -s * c;
  }
  return B;
}

/// Stacked per-phase load power [P; Q] of a node [W; var].
inline Vec load_power_vec(const Node& node) {
  const int p = static_cast<int>(node.phases.size());
  Vec s = Vec::Zero(2 * p);
  for (int k = 0; k < p; ++k) {
    if (const auto& L = node.load[node.phases[k]]) {
      s(k) = L->p_w;
      s(p + k) = L->q_var;
    }
  }
  return s;
}

/// Equivalent current drawn by a load at the nominal phasor (linear model):
/// I = conj(S / V_nominal_phase).
inline cplx linear_injection(cplx s_va, int phase, double v_nominal_v) {
  return std::conj(s_va / nominal_phasor(phase, v_nominal_v));
}

/// Current drawn by an exponential-model load at an actual voltage V:
/// V * conj(I) = S * |sqrt(3) V / V_N|^kappa  =>  I = conj(S |sqrt(3)V/V_N|^kappa / V).
inline cplx exponential_injection(cplx s_va, int kappa, cplx v_actual, double v_nominal_v) {
  const double ratio = std::abs(std::sqrt(3.0) * v_actual / v_nominal_v);
  return std::conj(s_va * std::pow(ratio, kappa) / v_actual);
}

/// Active power demanded at the primary of a distribution transformer:
/// secondary demand plus core loss plus winding loss |I|^2 R with the primary
/// current evaluated at nominal voltage, |I| = sqrt(3) |S| / V_N.
inline double transformer_adjusted_load(double secondary_p_w, double core_loss_w,
                                        double winding_r_ohm, double s_va_mag,
                                        double v_nominal_v) {
  const double i = std::sqrt(3.0) * s_va_mag / v_nominal_v;
  return secondary_p_w + core_loss_w + i * i * winding_r_ohm;
}

/// Deviation between specified and served load power [W, var].
struct LoadDeviation {
  double dp_w = 0.0;    ///< mean absolute active-power deviation per loaded phase
  double dq_var = 0.0;  ///< mean absolute reactive-power deviation per loaded phase
};

/// Per-node complex voltages [V] implied by solved line currents: the
/// substation is held at nominal and drops v_to = v_from - Z i accumulate
/// root-down along a spanning tree of the closed subgraph — the
/// minimum-total-resistance tree when the subgraph is meshed. Phases not
/// carried by the tree line fall back to nominal.
///
/// `xi_si`: per line, stacked [Re; Im] currents in amperes (empty for open
/// lines). Throws when the closed subgraph is disconnected.
inline std::vector<CVec> voltage_profile_si(const Network& net, const std::vector<char>& closed,
                                            const std::vector<Vec>& xi_si) {
  const double vn = net.v_nominal_v;
  const int N = net.node_count();
  std::vector<int> parent = net.min_resistance_tree(closed);

  std::vector<CVec> iline(net.line_count());
  for (int e = 0; e < net.line_count(); ++e) {
    if (!closed[e] || xi_si[e].size() == 0) continue;
    const int p = static_cast<int>(net.lines[e].phases.size());
    iline[e] = CVec(p);
    for (int k = 0; k < p; ++k) iline[e](k) = cplx(xi_si[e](k), xi_si[e](p + k));
  }

  std::vector<CVec> volt(N);
  std::vector<char> done(N, 0);
  const int root = net.substation_index();
  volt[root] = CVec(net.nodes[root].phases.size());
  for (size_t k = 0; k < net.nodes[root].phases.size(); ++k)
    volt[root](k) = nominal_phasor(net.nodes[root].phases[k], vn);
  done[root] = 1;
  std::deque<int> bfs{root};
  while (!bfs.empty()) {
    int u = bfs.front();
    bfs.pop_front();
    for (const auto& [e, w] : net.adjacency()[u]) {
      if (done[w] || parent[w] != e) continue;
      const Line& ln = net.lines[e];
      const int m = net.node_index(ln.from);
      CVec drop = ln.z_ohm * (iline[e].size() ? iline[e] : CVec::Zero(ln.phases.size()));
      volt[w] = CVec(net.nodes[w].phases.size());
      for (size_t k = 0; k < net.nodes[w].phases.size(); ++k) {
        int ph = net.nodes[w].phases[k];
        int ppos = Network::phase_pos(ln.phases, ph);
        int upos = Network::phase_pos(net.nodes[u].phases, ph);
        if (ppos < 0 || upos < 0) {
          volt[w](k) = nominal_phasor(ph, vn);
          continue;
        }
        volt[w](k) = (u == m) ? volt[u](upos) - drop(ppos) : volt[u](upos) + drop(ppos);
      }
      done[w] = 1;
      bfs.push_back(w);
    }
  }
  return volt;
}

/// Minimum per-unit voltage magnitude over non-substation node phases.
inline double min_voltage_pu(const Network& net, const std::vector<char>& closed,
                             const std::vector<Vec>& xi_si) {
  const auto volt = voltage_profile_si(net, closed, xi_si);
  const double vb = net.base().v_phase();
  double vmin = std::numeric_limits<double>::infinity();
  for (int v = 0; v < net.node_count(); ++v) {
    if (v == net.substation_index()) continue;
    for (int k = 0; k < volt[v].size(); ++k) vmin = std::min(vmin, std::abs(volt[v](k)) / vb);
  }
  return vmin;
}

/// Compare the specified loads against the power recovered from solved line
/// currents at the propagated voltages. Per loaded node-phase the served
/// power is V * conj(net inward line current + dispatched generation
/// current), and the reported figures are mean absolute deviations over
/// loaded node-phases (substation excluded).
///
/// `xi_si`: per line, stacked [Re; Im] currents in amperes (empty vector for
/// open lines). `sigma_dg_si`: per node, stacked [P; Q] dispatched generation
/// in watts/vars (may be empty when the node has no generator).
inline LoadDeviation load_deviation(const Network& net, const std::vector<char>& closed,
                                    const std::vector<Vec>& xi_si,
                                    const std::vector<Vec>& sigma_dg_si) {
  const double vn = net.v_nominal_v;
  const int N = net.node_count();
  const int root = net.substation_index();
  const std::vector<CVec> volt = voltage_profile_si(net, closed, xi_si);

  std::vector<CVec> iline(net.line_count());
  for (int e = 0; e < net.line_count(); ++e) {
    if (!closed[e] || xi_si[e].size() == 0) continue;
    const int p = static_cast<int>(net.lines[e].phases.size());
    iline[e] = CVec(p);
    for (int k = 0; k < p; ++k) iline[e](k) = cplx(xi_si[e](k), xi_si[e](p + k));
  }

  // Net inward current per node-phase from the solved line flows.
  std::vector<CVec> inward(N);
  for (int v = 0; v < N; ++v) inward[v] = CVec::Zero(net.nodes[v].phases.size());
  for (int e = 0; e < net.line_count(); ++e) {
    if (!closed[e] || iline[e].size() == 0) continue;
    const Line& ln = net.lines[e];
    const int m = net.node_index(ln.from), n = net.node_index(ln.to);
    for (size_t k = 0; k < ln.phases.size(); ++k) {
      int pm = Network::phase_pos(net.nodes[m].phases, ln.phases[k]);
      int pn = Network::phase_pos(net.nodes[n].phases, ln.phases[k]);
      inward[m](pm) -= iline[e](k);  // current leaves the tail
      inward[n](pn) += iline[e](k);  // current enters the head
    }
  }

  LoadDeviation dev;
  int loaded_phases = 0;
  for (int v = 0; v < N; ++v) {
    if (v == root) continue;
    const Node& nd = net.nodes[v];
    const int p = static_cast<int>(nd.phases.size());
    for (int k = 0; k < p; ++k) {
      const auto& L = nd.load[nd.phases[k]];
      if (!L || (L->p_w == 0.0 && L->q_var == 0.0)) continue;
      ++loaded_phases;
      cplx idrawn = inward[v](k);
      if (sigma_dg_si.size() > static_cast<size_t>(v) && sigma_dg_si[v].size() == 2 * p) {
        // Generation current (linear model) adds to what the loads can draw.
        Vec g = injection_matrix(nd.phases, vn) * sigma_dg_si[v];
        idrawn += cplx(g(k), g(p + k));
      }
      cplx served = volt[v](k) * std::conj(idrawn);
      dev.dp_w += std::abs(served.real() - L->p_w);
      dev.dq_var += std::abs(served.imag() - L->q_var);
    }
  }
  if (loaded_phases > 0) {
    dev.dp_w /= loaded_phases;
    dev.dq_var /= loaded_phases;
  }
  return dev;
}

}  // namespace gridreconf
