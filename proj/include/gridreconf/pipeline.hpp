#pragma once

/// @file pipeline.hpp
/// @brief End-to-end reconfiguration workflows on top of the program builder.
///
/// The sequence is: solve the regularized program, read the open/closed
/// switch states off the shrunk line currents, then re-solve the chosen
/// topology without regularization to obtain the operating point and its
/// resistive loss. Also provided: weight sweeps, a bisection search for a
/// weight hitting a target switch count, a successive-convex scheme for
/// magnitude-bounded voltages, an exhaustive enumeration oracle, and a
/// physically-motivated greedy baseline for comparisons.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "gridreconf/common.hpp"
#include "gridreconf/formulation.hpp"
#include "gridreconf/load_model.hpp"
#include "gridreconf/network.hpp"

namespace gridreconf {

/// Worker count: GRIDRECONF_THREADS when set, else the hardware concurrency.
inline int thread_count() {
  if (const char* env = std::getenv("GRIDRECONF_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

/// Runs fn(0..n-1) on up to `threads` workers (contiguous chunks). The first
/// exception (by index order) is rethrown after all workers join, so failures
/// are as deterministic as the single-threaded run.
inline void parallel_for(int n, const std::function<void(int)>& fn, int threads = 0) {
  if (n <= 0) return;
  int nw = threads > 0 ? threads : thread_count();
  nw = std::min(nw, n);
  if (nw <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errs(n);
  std::vector<std::thread> pool;
  const int chunk = (n + nw - 1) / nw;
  for (int w = 0; w < nw; ++w) {
    const int lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] {
      for (int i = lo; i < hi; ++i) {
        try {
          fn(i);
        } catch (...) {
          errs[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (int i = 0; i < n; ++i)
    if (errs[i]) std::rethrow_exception(errs[i]);
}

/// Copy of the network with all per-line regularization weights removed, so a
/// global weight of zero really means an unregularized program.
inline Network without_regularization(const Network& net) {
  Network out = net;
  for (auto& ln : out.lines) ln.lambda_weight.reset();
  return out;
}

// ----------------------------------------------------------------- topology

struct Topology {
  std::vector<char> closed;  ///< per line
  bool is_connected = false;
  bool is_radial = false;

  std::vector<int> open_lines() const {
    std::vector<int> out;
    for (size_t e = 0; e < closed.size(); ++e)
      if (!closed[e]) out.push_back(static_cast<int>(e));
    return out;
  }
  int closed_count() const {
    int c = 0;
    for (char v : closed) c += v ? 1 : 0;
    return c;
  }
  int closed_switchable(const Network& net) const {
    int c = 0;
    for (size_t e = 0; e < closed.size(); ++e)
      if (closed[e] && net.lines[e].switchable) ++c;
    return c;
  }
};

inline Topology make_topology(const Network& net, const std::vector<char>& closed) {
  if (static_cast<int>(closed.size()) != net.line_count())
    throw ModelError("topology mask size mismatch");
  Topology t;
  t.closed = closed;
  t.is_connected = net.connected(closed);
  t.is_radial = net.radial(closed);
  return t;
}

inline Topology topology_from_open(const Network& net, const std::vector<int>& open) {
  std::vector<char> closed(net.line_count(), 1);
  for (int e : open) {
    if (e < 0 || e >= net.line_count()) throw ModelError("open set references unknown line");
    closed[e] = 0;
  }
  return make_topology(net, closed);
}

/// Switch selection by thresholding the solved group norms: a regularized
/// line is opened when ||xi|| falls at or below group_eps scaled by the
/// line's ampacity (when present). Unregularized lines stay as built.
inline Topology extract_topology(const DsrProblem& pr, const DsrSolution& sol,
                                 double group_eps = 1e-4) {
  const int E = pr.net->line_count();
  std::vector<char> closed(E, 1);
  for (int e = 0; e < E; ++e) {
    const LineVars& lv = pr.line_vars[e];
    if (!lv.active) {
      closed[e] = 0;
      continue;
    }
    if (lv.t_idx < 0) continue;
    const double eps = group_eps * (lv.has_cap ? lv.cap_pu : 1.0);
    if (sol.xi_pu[e].norm() <= eps) closed[e] = 0;
  }
  return make_topology(*pr.net, closed);
}

/// Complete a connected topology to a spanning tree by opening further
/// switchable lines, weakest solved current first, while preserving
/// connectivity. Currents are read from `xi_pu` (per line, stacked [Re; Im];
/// empty entries count as zero). Returns the input unchanged when it is
/// already radial; the result may stay meshed when the remaining cycles
/// contain no switchable line.
inline Topology radialize_topology(const Network& net, const Topology& topo,
                                   const std::vector<Vec>& xi_pu) {
  if (topo.is_radial || !topo.is_connected) return topo;
  std::vector<std::pair<double, int>> order;
  for (int e = 0; e < net.line_count(); ++e) {
    if (!topo.closed[e] || !net.lines[e].switchable) continue;
    const double nrm = (e < static_cast<int>(xi_pu.size()) && xi_pu[e].size()) ? xi_pu[e].norm() : 0.0;
    order.emplace_back(nrm, e);
  }
  std::sort(order.begin(), order.end());
  std::vector<char> closed = topo.closed;
  int excess = 0;
  {
    Topology cur = make_topology(net, closed);
    excess = cur.closed_count() - (net.node_count() - 1);
    if (excess <= 0) return cur;
  }
  for (const auto& [nrm, e] : order) {
    if (excess == 0) break;
    closed[e] = 0;
    if (net.connected(closed)) {
      --excess;
    } else {
      closed[e] = 1;
    }
  }
  return make_topology(net, closed);
}

// -------------------------------------------------------------------- refit

struct RefitResult {
  Topology topo;
  double loss_si = 0.0;  ///< direct resistive loss of the operating point
  bool used_fast_path = false;
  DsrSolution sol;
  std::vector<Vec> xi_pu;  ///< per line stacked currents (empty when open)
};

namespace pipeline_detail {

/// Direct current accumulation on a radial, generation-free network under
/// the linear load model: each line carries the sum of the nominal-voltage
/// load currents of the subtree hanging below it. Returns false (leaving
/// `out` untouched) when a structural prerequisite fails.
inline bool tree_currents(const Network& net, const std::vector<char>& closed,
                          std::vector<CVec>& out) {
  const int N = net.node_count();
  const double s1 = net.base().s_phase_base();
  std::vector<std::vector<std::pair<int, int>>> adj(N);  // (line, other node)
  for (int e = 0; e < net.line_count(); ++e) {
    if (!closed[e]) continue;
    const int u = net.node_index(net.lines[e].from), v = net.node_index(net.lines[e].to);
    adj[u].push_back({e, v});
    adj[v].push_back({e, u});
  }
  const int root = net.substation_index();
  std::vector<int> order, parent_line(N, -1), parent(N, -1);
  std::vector<char> seen(N, 0);
  order.push_back(root);
  seen[root] = 1;
  for (size_t qi = 0; qi < order.size(); ++qi) {
    const int u = order[qi];
    for (auto [e, v] : adj[u]) {
      if (seen[v]) continue;
      seen[v] = 1;
      parent[v] = u;
      parent_line[v] = e;
      order.push_back(v);
    }
  }
  if (static_cast<int>(order.size()) != N) return false;
  // Subtree load currents per global phase (0..2).
  std::vector<std::array<cplx, 3>> acc(N, {cplx(0, 0), cplx(0, 0), cplx(0, 0)});
  for (int v = 0; v < N; ++v) {
    const Node& nd = net.nodes[v];
    for (int ph : nd.phases) {
      if (!nd.load[ph]) continue;
      const cplx s(nd.load[ph]->p_w / s1, nd.load[ph]->q_var / s1);
      const cplx vnom = std::polar(1.0, phase_angle(ph));
      acc[v][ph] += std::conj(s / vnom);
    }
  }
  out.assign(net.line_count(), CVec{});
  for (int qi = N - 1; qi >= 1; --qi) {
    const int v = order[qi];
    const int e = parent_line[v];
    const Line& ln = net.lines[e];
    // Every phase carrying current must exist on the line.
    for (int ph = 0; ph < 3; ++ph) {
      if (std::abs(acc[v][ph]) > 0.0 && Network::phase_pos(ln.phases, ph) < 0) return false;
    }
    const double dir = net.node_index(ln.from) == parent[v] ? 1.0 : -1.0;
    CVec cur = CVec::Zero(static_cast<int>(ln.phases.size()));
    for (size_t k = 0; k < ln.phases.size(); ++k) cur(k) = dir * acc[v][ln.phases[k]];
    out[e] = cur;
    for (int ph = 0; ph < 3; ++ph) acc[parent[v]][ph] += acc[v][ph];
  }
  for (int e = 0; e < net.line_count(); ++e)
    if (closed[e] && out[e].size() == 0) out[e] = CVec::Zero(static_cast<int>(net.lines[e].phases.size()));
  return true;
}

/// Nodes reachable from the substation over closed lines.
inline std::vector<char> reachable_from_substation(const Network& net,
                                                   const std::vector<char>& closed) {
  std::vector<char> seen(net.node_count(), 0);
  std::vector<int> stack{net.substation_index()};
  seen[net.substation_index()] = 1;
  while (!stack.empty()) {
    const int u = stack.back();
    stack.pop_back();
    for (const auto& [e, v] : net.adjacency()[u]) {
      if (!closed[e] || seen[v]) continue;
      seen[v] = 1;
      stack.push_back(v);
    }
  }
  return seen;
}

}  // namespace pipeline_detail

/// Re-solve a fixed topology without regularization and report its loss.
/// Radial generation-free loss-objective cases are computed directly from
/// the tree structure; everything else goes through the conic solver.
inline RefitResult refit(const Network& net, const Topology& topo,
                         const ObjectiveSpec& objective = ObjectiveSpec{},
                         const VoltageSpec& voltage = VoltageSpec{},
                         const ConicOptions& opt = ConicOptions{}) {
  if (!topo.is_connected) {
    // Tolerate islands only when they serve nothing and host no generation.
    const auto seen = pipeline_detail::reachable_from_substation(net, topo.closed);
    for (int v = 0; v < net.node_count(); ++v)
      if (!seen[v] && (net.nodes[v].has_load() || net.nodes[v].has_dg()))
        throw ModelError("refit: the open set disconnects served load from the substation");
  }
  RefitResult rr;
  rr.topo = topo;
  const double s1 = net.base().s_phase_base();

  bool no_dg = true;
  for (const auto& nd : net.nodes)
    if (nd.has_dg()) no_dg = false;
  bool caps_ok = true;
  if (topo.is_radial && no_dg && objective.kind == ObjectiveKind::loss &&
      voltage.mode == VoltageMode::none) {
    std::vector<CVec> cur;
    if (pipeline_detail::tree_currents(net, topo.closed, cur)) {
      const BaseUnits bu = net.base();
      for (int e = 0; e < net.line_count() && caps_ok; ++e) {
        if (!topo.closed[e] || !net.lines[e].i_max_amp) continue;
        const double cap = *net.lines[e].i_max_amp / bu.i_base();
        for (int k = 0; k < cur[e].size(); ++k)
          if (std::abs(cur[e](k)) > cap * (1.0 + 1e-9)) caps_ok = false;
      }
      if (caps_ok) {
        rr.used_fast_path = true;
        rr.xi_pu.assign(net.line_count(), Vec{});
        double loss_pu = 0.0;
        for (int e = 0; e < net.line_count(); ++e) {
          if (!topo.closed[e]) continue;
          const int p = static_cast<int>(cur[e].size());
          Vec xi(2 * p);
          xi.head(p) = cur[e].real();
          xi.tail(p) = cur[e].imag();
          rr.xi_pu[e] = xi;
          const Mat zb = detail::zbar_of(net.lines[e].z_ohm / bu.z_base());
          loss_pu += xi.dot(zb * xi);
        }
        rr.loss_si = loss_pu * s1;
        rr.sol.status = ConicStatus::optimal;
        rr.sol.xi_pu = rr.xi_pu;
        rr.sol.objective_pu = 0.5 * loss_pu;
        rr.sol.objective_si = 0.5 * loss_pu * s1;
        return rr;
      }
    }
  }

  const Network bare = without_regularization(net);
  DsrProblem pr = build_p2(bare, objective, 0.0, voltage, topo.closed);
  rr.sol = solve_p2(pr, opt);
  if (rr.sol.status != ConicStatus::optimal)
    throw SolveError("refit solve did not reach optimality: " + std::string(to_string(rr.sol.status)));
  rr.xi_pu = rr.sol.xi_pu;
  rr.loss_si = direct_loss_si(pr, rr.sol.xi_pu);
  return rr;
}

// -------------------------------------------------------------------- sweep

struct SweepPoint {
  double lambda_si = 0.0;
  bool ok = false;
  std::string error;
  Topology topo;
  int closed_switchable = 0;
  double refit_loss_si = 0.0;
  std::vector<Vec> refit_xi_pu;  ///< operating currents of the refit topology
  double shrink_objective_si = 0.0;
  ConicStatus shrink_status = ConicStatus::numerical_failure;
};

struct SweepResult {
  std::vector<SweepPoint> points;
};

/// Geometric grid lo..hi with n points (n >= 2, 0 < lo <= hi).
inline std::vector<double> log_grid(double lo, double hi, int n) {
  if (n < 2 || lo <= 0.0 || hi < lo) throw ModelError("log grid requires n >= 2, 0 < lo <= hi");
  std::vector<double> g(n);
  const double step = std::log(hi / lo) / (n - 1);
  for (int i = 0; i < n; ++i) g[i] = lo * std::exp(step * i);
  g.back() = hi;
  return g;
}

inline SweepResult lambda_sweep(const Network& net, const ObjectiveSpec& objective,
                                const std::vector<double>& lambdas,
                                const VoltageSpec& voltage = VoltageSpec{},
                                double group_eps = 1e-4,
                                const ConicOptions& opt = ConicOptions{}) {
  SweepResult out;
  out.points.resize(lambdas.size());
  parallel_for(static_cast<int>(lambdas.size()), [&](int i) {
    SweepPoint& pt = out.points[i];
    pt.lambda_si = lambdas[i];
    try {
      DsrProblem pr = build_p2(net, objective, lambdas[i], voltage);
      DsrSolution sol = solve_p2(pr, opt);
      pt.shrink_status = sol.status;
      pt.shrink_objective_si = sol.objective_si;
      if (sol.status != ConicStatus::optimal)
        throw SolveError("selection solve: " + std::string(to_string(sol.status)));
      pt.topo = extract_topology(pr, sol, group_eps);
      pt.closed_switchable = pt.topo.closed_switchable(net);
      RefitResult rr = refit(net, pt.topo, objective, voltage, opt);
      pt.refit_loss_si = rr.loss_si;
      pt.refit_xi_pu = rr.xi_pu;
      pt.ok = true;
    } catch (const std::exception& ex) {
      pt.ok = false;
      pt.error = ex.what();
    }
  });
  return out;
}

// -------------------------------------------------------------- auto lambda

struct AutoLambdaResult {
  double lambda_si = 0.0;
  Topology topo;
  int closed_switchable = 0;
  bool achieved = false;  ///< closed_switchable equals the requested target
  /// Tightest examined weight interval straddling the target; equal endpoints
  /// when the search never bracketed it (count unreachable within the bounds).
  double bracket_lo = 0.0, bracket_hi = 0.0;
  std::vector<std::pair<double, int>> trace;  ///< (lambda, closed switchable; -1 = failed solve)
};

/// Bisection on the regularization weight within [lambda_lo, lambda_hi] for a
/// target closed-switch count. The count tends to fall as the weight grows but
/// is not guaranteed monotone, and some feeders cannot reach every count, so an
/// unreachable target is answered with the nearest evaluated point plus the
/// final bracket rather than an exception (ties: more closed switches, then
/// smaller weight). Failed solves at extreme weights shrink the interval.
inline AutoLambdaResult auto_lambda(const Network& net, const ObjectiveSpec& objective,
                                    int target_closed, const VoltageSpec& voltage = VoltageSpec{},
                                    double group_eps = 1e-4,
                                    const ConicOptions& opt = ConicOptions{},
                                    double lambda_lo = 0.0, double lambda_hi = 1e6,
                                    int iters = 40) {
  struct Eval {
    double lam;
    int count;
    Topology topo;
  };
  std::vector<Eval> evals;
  std::vector<std::pair<double, int>> trace;
  auto eval = [&](double lam) -> const Eval* {
    DsrProblem pr = build_p2(net, objective, lam, voltage);
    DsrSolution sol = solve_p2(pr, opt);
    if (sol.status != ConicStatus::optimal) {
      trace.emplace_back(lam, -1);
      return nullptr;
    }
    Topology t = extract_topology(pr, sol, group_eps);
    evals.push_back({lam, t.closed_switchable(net), std::move(t)});
    trace.emplace_back(lam, evals.back().count);
    return &evals.back();
  };
  const int total_switchable = static_cast<int>(net.switchable_lines().size());
  if (target_closed < 0 || target_closed > total_switchable)
    throw ModelError("target closed-switch count out of range");
  if (!(lambda_lo >= 0.0) || !(lambda_hi > lambda_lo))
    throw ModelError("weight search interval is invalid");

  const Eval* base = eval(lambda_lo);
  if (!base) throw SolveError("weight search failed at the lower lambda bound");
  double lo = lambda_lo;
  int lo_count = base->count;
  double hi = lo;
  int hi_count = lo_count;

  if (lo_count > target_closed) {
    // Geometric escalation until the count reaches the target, a failed solve
    // walls off the top, or the upper bound is hit while still above target.
    double wall = lambda_hi;
    bool bracketed = false;
    for (int guard = 0; guard < 80; ++guard) {
      const double cand = hi > 0.0 ? std::min(4.0 * hi, wall) : std::min(1.0, wall);
      if (!(cand > hi)) break;
      const Eval* ev = eval(cand);
      if (!ev) {
        wall = 0.5 * (hi + cand);
        continue;
      }
      if (ev->count <= target_closed) {
        hi = cand;
        hi_count = ev->count;
        bracketed = true;
        break;
      }
      lo = hi = cand;
      lo_count = hi_count = ev->count;
      if (cand >= wall) break;
    }
    if (bracketed) {
      for (int it = 0; it < iters && hi_count != target_closed && lo_count != target_closed;
           ++it) {
        const double mid = 0.5 * (lo + hi);
        if (!(mid > lo && mid < hi)) break;
        const Eval* ev = eval(mid);
        if (!ev) break;
        if (ev->count > target_closed) {
          lo = mid;
          lo_count = ev->count;
        } else {
          hi = mid;
          hi_count = ev->count;
        }
      }
    }
  }

  const Eval* best = nullptr;
  for (const Eval& ev : evals) {
    if (!best) {
      best = &ev;
      continue;
    }
    const int da = std::abs(ev.count - target_closed), db = std::abs(best->count - target_closed);
    if (da < db || (da == db && (ev.count > best->count ||
                                 (ev.count == best->count && ev.lam < best->lam))))
      best = &ev;
  }
  AutoLambdaResult out;
  out.lambda_si = best->lam;
  out.topo = best->topo;
  out.closed_switchable = best->count;
  out.achieved = best->count == target_closed;
  out.bracket_lo = lo;
  out.bracket_hi = hi;
  out.trace = std::move(trace);
  return out;
}

// ---------------------------------------------------------------------- SCA

struct ScaResult {
  DsrSolution sol;
  std::vector<double> objective_trace;  ///< solved objective (SI) per iteration
  int iterations = 0;
  bool converged = false;
  bool used_restoration = false;
  double min_lower_margin = 0.0;  ///< min over constrained phases of |V| - vmin
  bool lower_feasible = false;    ///< min_lower_margin >= -1e-6
};

namespace pipeline_detail {

/// Feasibility restoration for magnitude lower bounds: minimize the total
/// slack u >= 0 subject to the physical constraints and the conservative
/// half-spaces Re{V e^{-j theta_nom}} >= vmin - u (which imply |V| >= vmin
/// when u = 0). Returns the stacked-current part of the solution scattered
/// into a vector shaped for `layout_like`.
inline std::optional<Vec> restore_lower_bounds(const Network& net, const VoltageSpec& mag,
                                               const std::vector<char>& closed,
                                               const DsrProblem& layout_like,
                                               const ConicOptions& opt) {
  const Network bare = without_regularization(net);
  ObjectiveSpec loss_obj;  // quadratic part is irrelevant; reuse the assembler
  DsrProblem base = build_p2(bare, loss_obj, 0.0, mag, closed);
  int n_u = 0;
  for (const VoltageEntry& en : base.voltage_entries)
    n_u += static_cast<int>(net.nodes[en.node].phases.size());
  const int nv = base.n_vars, n = nv + n_u;

  Mat P = Mat::Zero(n, n);
  Vec q = Vec::Zero(n);
  q.tail(n_u).setOnes();
  Mat A = Mat::Zero(base.A.rows(), n);
  A.leftCols(nv) = base.A;
  Mat G = Mat::Zero(base.G.rows() + 2 * n_u, n);
  Vec h = Vec::Zero(base.G.rows() + 2 * n_u);
  // Base LP rows first, then the new rows, then the base SOC blocks.
  const int lp0 = base.cone.lp;
  G.topLeftCorner(lp0, nv) = base.G.topRows(lp0);
  h.head(lp0) = base.h.head(lp0);
  int r = lp0;
  int ui = 0;
  for (const VoltageEntry& en : base.voltage_entries) {
    Mat rows = voltage_coefficients(base, en);
    const int p = static_cast<int>(net.nodes[en.node].phases.size());
    for (int k = 0; k < p; ++k) {
      const double c = en.nu_ref(k), s = en.nu_ref(p + k);  // unit nominal phasor
      G.row(r).head(nv) = -(c * rows.row(k) + s * rows.row(p + k));
      G(r, nv + ui) = -1.0;
      h(r) = c * en.nu_ref(k) + s * en.nu_ref(p + k) - en.vmin;
      ++r;
      G(r, nv + ui) = -1.0;
      h(r) = 0.0;
      ++r;
      ++ui;
    }
  }
  const int soc_rows = static_cast<int>(base.G.rows()) - lp0;
  G.block(r, 0, soc_rows, nv) = base.G.bottomRows(soc_rows);
  h.segment(r, soc_rows) = base.h.tail(soc_rows);
  ConeSpec cone;
  cone.lp = lp0 + 2 * n_u;
  cone.socs = base.cone.socs;

  ConicResult cr = solve_conic(P, q, A, base.b, G, h, cone, opt);
  if (cr.status != ConicStatus::optimal) return std::nullopt;
  Vec x0 = Vec::Zero(layout_like.n_vars);
  for (int e = 0; e < net.line_count(); ++e) {
    const LineVars& a = base.line_vars[e];
    const LineVars& b = layout_like.line_vars[e];
    if (!a.active || !b.active) continue;
    x0.segment(b.xi_off, 2 * b.np) = cr.x.segment(a.xi_off, 2 * a.np);
  }
  return x0;
}

}  // namespace pipeline_detail

/// Successive convex scheme for magnitude-bounded voltages: solve with upper
/// bounds only, restore lower-bound feasibility if needed, then iterate the
/// linearized lower-bound subproblem until the objective settles.
inline ScaResult sca_solve(const Network& net, const ObjectiveSpec& objective, double lambda_si,
                           const VoltageSpec& mag, const std::vector<char>& closed = {},
                           const ConicOptions& opt = ConicOptions{}, int max_iter = 50,
                           double rel_tol = 1e-6) {
  if (mag.mode != VoltageMode::magnitude)
    throw ModelError("sca_solve requires magnitude-mode voltage bounds");
  DsrProblem base = build_p2(net, objective, lambda_si, mag, closed);
  DsrSolution sol0 = solve_p2(base, opt);
  ScaResult out;
  Vec x = Vec::Zero(base.n_vars);
  bool need_restore = true;
  if (sol0.status == ConicStatus::optimal) {
    x = sol0.raw_x;
    double margin = std::numeric_limits<double>::infinity();
    for (const auto& [ei, mags] : voltage_magnitudes(base, x)) {
      const double vmin = base.voltage_entries[ei].vmin;
      margin = std::min(margin, mags.minCoeff() - vmin);
    }
    need_restore = margin < -1e-9;
  }
  if (need_restore) {
    out.used_restoration = true;
    if (auto x0 = pipeline_detail::restore_lower_bounds(net, mag, closed.empty()
                                                                     ? std::vector<char>(net.line_count(), 1)
                                                                     : closed,
                                                        base, opt))
      x = *x0;
  }

  DsrProblem sub;
  DsrSolution sol;
  for (int it = 0; it < max_iter; ++it) {
    sub = build_sca_subproblem(net, objective, lambda_si, mag, x, closed);
    DsrSolution cand = solve_p2(sub, opt);
    if (cand.status != ConicStatus::optimal) {
      if (out.iterations == 0)
        throw SolveError("linearized subproblem failed at the first iterate: " +
                         std::string(to_string(cand.status)));
      break;
    }
    sol = std::move(cand);
    out.objective_trace.push_back(sol.objective_si);
    ++out.iterations;
    x = sol.raw_x;
    const size_t m = out.objective_trace.size();
    if (m >= 2) {
      const double prev = out.objective_trace[m - 2], curr = out.objective_trace[m - 1];
      if (std::abs(curr - prev) <= rel_tol * std::max(1.0, std::abs(prev))) {
        out.converged = true;
        break;
      }
    }
  }
  if (out.iterations == 0) throw SolveError("no linearized subproblem succeeded");
  out.sol = sol;
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& [ei, mags] : voltage_magnitudes(sub, x)) {
    const double vmin = sub.voltage_entries[ei].vmin;
    margin = std::min(margin, mags.minCoeff() - vmin);
  }
  out.min_lower_margin = margin;
  out.lower_feasible = margin >= -1e-6;
  return out;
}

// ------------------------------------------------------------------- oracle

enum class OracleMode { radial_only, subset };

struct OracleOptions {
  OracleMode mode = OracleMode::radial_only;
  double guard = 33554432.0;  ///< refuse enumerations above this many configurations
  bool keep_table = false;
  ObjectiveSpec objective;
  VoltageSpec voltage;
  ConicOptions conic;
};

struct OracleEntry {
  std::vector<int> open;
  double loss_si = 0.0;
};

struct OracleResult {
  Topology best_topo;
  double best_loss_si = std::numeric_limits<double>::infinity();
  std::uint64_t examined = 0;  ///< configurations enumerated
  std::uint64_t feasible = 0;  ///< connected (and radial, in radial mode) configurations
  std::vector<OracleEntry> table;
};

namespace pipeline_detail {

inline std::uint64_t binomial(int n, int k) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / i;
  return r;
}

/// rank -> k-combination of {0..n-1} in lexicographic order.
inline void unrank_combination(std::uint64_t rank, int n, int k, std::vector<int>& out) {
  out.clear();
  int start = 0;
  for (int slot = 0; slot < k; ++slot) {
    for (int v = start; v <= n - (k - slot); ++v) {
      const std::uint64_t block = binomial(n - v - 1, k - slot - 1);
      if (rank < block) {
        out.push_back(v);
        start = v + 1;
        break;
      }
      rank -= block;
    }
  }
}

}  // namespace pipeline_detail

/// Enumerate candidate switch states exhaustively and refit each feasible
/// one. radial_only opens exactly enough switchable lines to leave a spanning
/// tree; subset tries every subset of the switchable lines that keeps the
/// network connected. Throws when the enumeration would exceed the guard.
inline OracleResult exhaustive_oracle(const Network& net, const OracleOptions& options = {}) {
  const int E = net.line_count();
  const int N = net.node_count();
  const std::vector<int> er = net.switchable_lines();
  const int R = static_cast<int>(er.size());

  struct Slot {
    bool any = false;
    double loss = std::numeric_limits<double>::infinity();
    std::vector<int> open;
    std::uint64_t feasible = 0;
    std::vector<OracleEntry> table;
  };

  std::uint64_t total = 0;
  int k_open = 0;
  if (options.mode == OracleMode::radial_only) {
    k_open = E - (N - 1);
    if (k_open < 0) throw ModelError("network has fewer lines than a spanning tree needs");
    if (k_open > R)
      throw ModelError("a spanning tree would require opening non-switchable lines");
    total = pipeline_detail::binomial(R, k_open);
  } else {
    if (R >= 63) throw ModelError("too many switchable lines for subset enumeration");
    total = std::uint64_t{1} << R;
  }
  if (static_cast<double>(total) > options.guard)
    throw SolveError("enumeration of " + std::to_string(total) +
                     " configurations exceeds the guard of " +
                     std::to_string(static_cast<std::uint64_t>(options.guard)));

  const int nw = static_cast<int>(
      std::min<std::uint64_t>(static_cast<std::uint64_t>(thread_count()), std::max<std::uint64_t>(total, 1)));
  std::vector<Slot> slots(nw);
  const std::uint64_t chunk = (total + nw - 1) / nw;

  auto evaluate = [&](std::uint64_t rank, Slot& slot, std::vector<int>& scratch) {
    std::vector<char> closed(E, 1);
    if (options.mode == OracleMode::radial_only) {
      pipeline_detail::unrank_combination(rank, R, k_open, scratch);
      for (int pos : scratch) closed[er[pos]] = 0;
    } else {
      scratch.clear();
      for (int i = 0; i < R; ++i)
        if (rank >> i & 1) {
          closed[er[i]] = 0;
          scratch.push_back(i);
        }
    }
    Topology topo = make_topology(net, closed);
    if (!topo.is_connected) return;
    if (options.mode == OracleMode::radial_only && !topo.is_radial) return;
    RefitResult rr;
    try {
      rr = refit(net, topo, options.objective, options.voltage, options.conic);
    } catch (const SolveError&) {
      return;  // infeasible operating point; skip
    }
    ++slot.feasible;
    std::vector<int> open = topo.open_lines();
    if (options.keep_table) slot.table.push_back({open, rr.loss_si});
    if (!slot.any || rr.loss_si < slot.loss - 1e-12 ||
        (std::abs(rr.loss_si - slot.loss) <= 1e-12 && open < slot.open)) {
      slot.any = true;
      slot.loss = rr.loss_si;
      slot.open = std::move(open);
    }
  };

  parallel_for(nw, [&](int w) {
    const std::uint64_t lo = static_cast<std::uint64_t>(w) * chunk;
    const std::uint64_t hi = std::min<std::uint64_t>(total, lo + chunk);
    std::vector<int> scratch;
    for (std::uint64_t rank = lo; rank < hi; ++rank) evaluate(rank, slots[w], scratch);
  }, nw);

  OracleResult out;
  out.examined = total;
  for (const Slot& s : slots) {
    out.feasible += s.feasible;
    if (options.keep_table)
      out.table.insert(out.table.end(), s.table.begin(), s.table.end());
    if (!s.any) continue;
    if (out.best_loss_si == std::numeric_limits<double>::infinity() ||
        s.loss < out.best_loss_si - 1e-12 ||
        (std::abs(s.loss - out.best_loss_si) <= 1e-12 &&
         (out.best_topo.closed.empty() || s.open < out.best_topo.open_lines())))
      {
        out.best_loss_si = s.loss;
        out.best_topo = topology_from_open(net, s.open);
      }
  }
  if (out.best_loss_si == std::numeric_limits<double>::infinity())
    throw SolveError("no feasible configuration found by the oracle");
  return out;
}

// ----------------------------------------------------------------- baseline

struct BaselineResult {
  Topology topo;
  double loss_si = 0.0;
  std::vector<int> opened_order;  ///< lines opened, in decision order
};

namespace pipeline_detail {

/// Steady-state currents of the closed subcircuit with loads modeled as
/// nominal-voltage current draws and generation idle: assemble the complex
/// nodal admittance from the full line impedance matrices, pin the feeder
/// head at nominal, and solve. Returns per-line per-phase complex currents
/// oriented tail -> head (pu).
inline std::vector<CVec> meshed_circuit_currents(const Network& net,
                                                 const std::vector<char>& closed) {
  const int N = net.node_count();
  const BaseUnits bu = net.base();
  const int root = net.substation_index();
  std::vector<int> off(N, -1);
  int nu = 0;
  for (int v = 0; v < N; ++v) {
    if (v == root) continue;
    off[v] = nu;
    nu += static_cast<int>(net.nodes[v].phases.size());
  }
  CMat Y = CMat::Zero(nu, nu);
  CVec rhs = CVec::Zero(nu);
  auto nominal = [&](int v, int pos) {
    return std::polar(1.0, phase_angle(net.nodes[v].phases[pos]));
  };
  std::vector<CMat> yline(net.line_count());
  for (int e = 0; e < net.line_count(); ++e) {
    if (!closed[e]) continue;
    const Line& ln = net.lines[e];
    yline[e] = (ln.z_ohm / bu.z_base()).inverse();
    const int a = net.node_index(ln.from), b = net.node_index(ln.to);
    const int p = static_cast<int>(ln.phases.size());
    for (int i = 0; i < p; ++i) {
      const int ia = Network::phase_pos(net.nodes[a].phases, ln.phases[i]);
      const int ib = Network::phase_pos(net.nodes[b].phases, ln.phases[i]);
      for (int j = 0; j < p; ++j) {
        const int ja = Network::phase_pos(net.nodes[a].phases, ln.phases[j]);
        const int jb = Network::phase_pos(net.nodes[b].phases, ln.phases[j]);
        const cplx y = yline[e](i, j);
        // Self blocks (rows of pinned nodes do not exist).
        if (off[a] >= 0) Y(off[a] + ia, off[a] + ja) += y;
        if (off[b] >= 0) Y(off[b] + ib, off[b] + jb) += y;
        // Coupling blocks (move fixed-voltage columns to the right-hand side).
        if (off[a] >= 0) {
          if (off[b] >= 0)
            Y(off[a] + ia, off[b] + jb) -= y;
          else
            rhs(off[a] + ia) += y * nominal(b, jb);
        }
        if (off[b] >= 0) {
          if (off[a] >= 0)
            Y(off[b] + ib, off[a] + ja) -= y;
          else
            rhs(off[b] + ib) += y * nominal(a, ja);
        }
      }
    }
  }
  const double s1 = bu.s_phase_base();
  for (int v = 0; v < N; ++v) {
    if (off[v] < 0) continue;
    const Node& nd = net.nodes[v];
    for (size_t k = 0; k < nd.phases.size(); ++k) {
      const int ph = nd.phases[k];
      if (!nd.load[ph]) continue;
      const cplx s(nd.load[ph]->p_w / s1, nd.load[ph]->q_var / s1);
      const cplx vnom = std::polar(1.0, phase_angle(ph));
      rhs(off[v] + static_cast<int>(k)) -= std::conj(s / vnom);
    }
  }
  Eigen::PartialPivLU<CMat> lu(Y);
  CVec vsol = lu.solve(rhs);
  auto volt = [&](int v, int pos) {
    return off[v] < 0 ? nominal(v, pos) : vsol(off[v] + pos);
  };
  std::vector<CVec> cur(net.line_count());
  for (int e = 0; e < net.line_count(); ++e) {
    if (!closed[e]) continue;
    const Line& ln = net.lines[e];
    const int a = net.node_index(ln.from), b = net.node_index(ln.to);
    const int p = static_cast<int>(ln.phases.size());
    CVec dv(p);
    for (int i = 0; i < p; ++i) {
      const int ia = Network::phase_pos(net.nodes[a].phases, ln.phases[i]);
      const int ib = Network::phase_pos(net.nodes[b].phases, ln.phases[i]);
      dv(i) = volt(a, ia) - volt(b, ib);
    }
    cur[e] = yline[e] * dv;
  }
  return cur;
}

}  // namespace pipeline_detail

/// Greedy loop-opening heuristic: while the closed subgraph has a cycle,
/// solve the physical circuit and open the connectivity-preserving
/// switchable line with the smallest total squared current (ties: lowest
/// line index). The final radial topology is refit for its loss.
inline BaselineResult heuristic_baseline(const Network& net,
                                         const ConicOptions& opt = ConicOptions{}) {
  const int N = net.node_count();
  std::vector<char> closed(net.line_count(), 1);
  BaselineResult out;
  int count = net.line_count();
  while (count > N - 1) {
    auto cur = pipeline_detail::meshed_circuit_currents(net, closed);
    int pick = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int e = 0; e < net.line_count(); ++e) {
      if (!closed[e] || !net.lines[e].switchable) continue;
      std::vector<char> trial = closed;
      trial[e] = 0;
      if (!net.connected(trial)) continue;
      const double score = cur[e].squaredNorm();
      if (score < best) {
        best = score;
        pick = e;
      }
    }
    if (pick < 0)
      throw SolveError("no connectivity-preserving switchable line can be opened");
    closed[pick] = 0;
    out.opened_order.push_back(pick);
    --count;
  }
  out.topo = make_topology(net, closed);
  RefitResult rr = refit(net, out.topo, ObjectiveSpec{}, VoltageSpec{}, opt);
  out.loss_si = rr.loss_si;
  return out;
}

}  // namespace gridreconf
