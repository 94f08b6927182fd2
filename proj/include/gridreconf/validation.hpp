#pragma once

/// @file validation.hpp
/// @brief Randomized self-validation: deterministic instance generation, an
///        independent scalar-minimization oracle for the shrinkage scale, and
///        property suites over the recovery maps and the linearized
///        voltage-bound surrogates. Used by the `validate` CLI command and by
///        the test suites.

#include <random>
#include <string>
#include <vector>

#include "gridreconf/common.hpp"
#include "gridreconf/formulation.hpp"
#include "gridreconf/pipeline.hpp"
#include "gridreconf/verification.hpp"

namespace gridreconf {

// Deterministic uniforms built from raw 32-bit draws, so results do not
// depend on the standard library's distribution implementations.
inline double urand(std::mt19937& rng) { return std::ldexp(static_cast<double>(rng()), -32); }
inline double urand(std::mt19937& rng, double lo, double hi) {
  return lo + (hi - lo) * urand(rng);
}
inline int irand(std::mt19937& rng, int lo, int hi) {  // inclusive
  return lo + static_cast<int>(rng() % static_cast<unsigned>(hi - lo + 1));
}

struct RandomNetConfig {
  int min_nodes = 3, max_nodes = 10;
  int ties_min = 0, ties_max = 3;
  double load_scale = 1.0;
  double impedance_scale = 1.0;
  bool allow_dg = true;
  bool allow_caps = true;
  bool switch_free_tree = false;  ///< keep spanning-tree lines non-switchable
  double switchable_prob = 0.5;   ///< per tree line (ties are always switchable)
};

/// Random connected network on unity bases (v_nominal = sqrt(3) V, s_base =
/// 3 VA, so every base quantity equals 1): a random spanning tree plus a few
/// ties, 1-3 phases network-wide, symmetric positive-definite resistive
/// parts, random loads and optional generation/ampacities.
inline Network random_network(std::mt19937& rng, const RandomNetConfig& cfg = RandomNetConfig{}) {
  Network net;
  net.v_nominal_v = std::sqrt(3.0);
  net.s_base_va = 3.0;
  const int N = irand(rng, cfg.min_nodes, cfg.max_nodes);
  const int P = irand(rng, 1, 3);
  std::vector<int> phases(P);
  for (int p = 0; p < P; ++p) phases[p] = p;

  for (int v = 0; v < N; ++v) {
    Node nd;
    nd.id = v;
    nd.phases = phases;
    nd.substation = v == 0;
    if (v != 0) {
      for (int ph : phases) {
        if (urand(rng) < 0.75) {
          PhaseLoad L;
          L.p_w = cfg.load_scale * urand(rng, 0.05, 0.5);
          L.q_var = cfg.load_scale * urand(rng, -0.1, 0.25);
          L.kappa = irand(rng, 0, 2);
          nd.load[ph] = L;
        }
      }
      if (cfg.allow_dg && urand(rng) < 0.3) {
        for (int ph : phases) {
          if (urand(rng) < 0.7) {
            PhaseDg g;
            g.p_min_w = 0.0;
            g.p_max_w = urand(rng, 0.05, 0.3);
            g.q_min_var = -0.1;
            g.q_max_var = 0.1;
            g.cost_per_w = urand(rng, 0.5, 2.0);
            nd.dg[ph] = g;
          }
        }
      }
    }
    net.nodes.push_back(std::move(nd));
  }

  auto random_z = [&](int p) {
    Mat a(p, p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) a(i, j) = urand(rng, -1.0, 1.0);
    Mat r = 0.08 * cfg.impedance_scale * (a * a.transpose() + 0.6 * Mat::Identity(p, p));
    Mat bx(p, p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j <= i; ++j) {
        bx(i, j) = urand(rng, -0.08, 0.08) * cfg.impedance_scale;
        bx(j, i) = bx(i, j);
      }
    CMat z(p, p);
    z.real() = r;
    z.imag() = bx;
    return z;
  };
  auto add_line = [&](int u, int v, bool sw) {
    Line ln;
    if (urand(rng) < 0.5) std::swap(u, v);
    ln.from = u;
    ln.to = v;
    ln.phases = phases;
    ln.z_ohm = random_z(P);
    ln.switchable = sw;
    if (cfg.allow_caps && urand(rng) < 0.3) ln.i_max_amp = urand(rng, 0.8, 4.0);
    net.lines.push_back(std::move(ln));
  };
  for (int v = 1; v < N; ++v) {
    const int u = irand(rng, 0, v - 1);
    const bool sw = cfg.switch_free_tree ? false : urand(rng) < cfg.switchable_prob;
    add_line(u, v, sw);
  }
  const int ties = irand(rng, cfg.ties_min, cfg.ties_max);
  for (int t = 0; t < ties && N >= 3; ++t) {
    int u = irand(rng, 0, N - 1), v = irand(rng, 0, N - 1);
    if (u == v) continue;
    add_line(u, v, true);
  }
  net.validate();
  return net;
}

// ----------------------------------------------------- independent eta oracle

/// Value of the scalar objective whose minimizer is the shrinkage scale.
inline double shrinkage_objective(double eta, const Vec& mu, const Mat& zt, double lambda) {
  const int d = static_cast<int>(mu.size());
  Mat B = eta * zt + (lambda * lambda / 2.0) * Mat::Identity(d, d);
  return eta - 0.5 * eta * mu.dot(B.ldlt().solve(mu));
}

/// Grid scan plus golden-section refinement; independent of the derivative
/// bisection used by shrinkage_scale.
inline double shrinkage_scale_by_search(const Vec& mu, const Mat& zt, double lambda) {
  if (mu.norm() <= lambda) return 0.0;
  auto f = [&](double eta) { return shrinkage_objective(eta, mu, zt, lambda); };
  // Find an upper end beyond the minimizer: expand until f turns upward.
  double hi = 1.0;
  int guard = 0;
  while (f(hi * 2.0) < f(hi) && ++guard < 200) hi *= 2.0;
  hi *= 2.0;
  // Coarse grid to bracket the minimum.
  const int G = 400;
  double best = 0.0, fbest = f(0.0);
  for (int i = 1; i <= G; ++i) {
    const double eta = hi * i / G;
    const double fe = f(eta);
    if (fe < fbest) {
      fbest = fe;
      best = eta;
    }
  }
  double a = std::max(0.0, best - hi / G), b = best + hi / G;
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
  double f1 = f(x1), f2 = f(x2);
  while (b - a > 1e-11 * std::max(1.0, b)) {
    if (f1 < f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - gr * (b - a);
      f1 = f(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + gr * (b - a);
      f2 = f(x2);
    }
  }
  return 0.5 * (a + b);
}

// ------------------------------------------------------------ recovery suite

struct RecoverySuiteResult {
  int instances = 0;
  int solved = 0;
  double max_direct_residual = 0.0;
  double max_shrinkage_residual = 0.0;
  double max_scale_gap = 0.0;  ///< |eta(bisection) - eta(search)| / max(1, eta)
  std::string note;
};

/// Solve random instances with random weights and re-derive every line
/// current from the duals; also cross-check the shrinkage scale against the
/// independent search oracle.
inline RecoverySuiteResult run_recovery_suite(unsigned seed, int instances,
                                              double lambda_hi = 10.0,
                                              const ConicOptions& opt = ConicOptions{}) {
  std::mt19937 rng(seed);
  RecoverySuiteResult out;
  out.instances = instances;
  for (int i = 0; i < instances; ++i) {
    Network net = random_network(rng);
    const double lambda = urand(rng, 0.0, lambda_hi);
    DsrProblem pr = build_p2(net, ObjectiveSpec{}, lambda);
    DsrSolution sol = solve_p2(pr, opt);
    if (sol.status != ConicStatus::optimal) continue;  // e.g. ampacity infeasible draw
    ++out.solved;
    VerificationReport rep = verify_solution(pr, sol, opt.tol);
    out.max_direct_residual = std::max(out.max_direct_residual, rep.max_direct_residual);
    out.max_shrinkage_residual = std::max(out.max_shrinkage_residual, rep.max_shrinkage_residual);
    for (int e = 0; e < net.line_count(); ++e) {
      const LineVars& lv = pr.line_vars[e];
      if (lv.t_idx < 0) continue;
      const Mat zt = line_quadratic(pr, sol, e);
      const Vec mu = line_effective_multiplier(pr, sol, e);
      if (mu.norm() <= lv.lambda_pu) continue;
      const double e1 = shrinkage_scale(mu, zt, lv.lambda_pu);
      const double e2 = shrinkage_scale_by_search(mu, zt, lv.lambda_pu);
      out.max_scale_gap =
          std::max(out.max_scale_gap, std::abs(e1 - e2) / std::max(1.0, e1));
    }
  }
  return out;
}

// ----------------------------------------------------------- surrogate suite

/// Surrogate-quality measurements for the linearized voltage lower bounds of
/// one subproblem at its iterate. With g(x) = vmin^2 - |V(x)|^2 (original)
/// and ghat its linearization at the iterate:
///   c1: ghat >= g everywhere        (checked by sampling)
///   c2: ghat = g at the iterate     (checked exactly)
///   c3: grad ghat = grad g there    (checked by finite differences)
struct SurrogateCheck {
  double c1_violation = 0.0;  ///< max over samples of g - ghat (should be <= 0)
  double c2_gap = 0.0;        ///< |ghat - g| at the iterate
  double c3_gap = 0.0;        ///< max |directional derivative mismatch|
};

inline SurrogateCheck check_surrogates(const DsrProblem& sub, const Vec& iterate,
                                       std::mt19937& rng, int samples = 1000,
                                       double fd_step = 1e-6) {
  if (!sub.has_sca_rows) throw ModelError("subproblem carries no linearized lower bounds");
  SurrogateCheck out;
  const int nv = sub.n_vars;
  for (const VoltageEntry& en : sub.voltage_entries) {
    const Mat rows = voltage_coefficients(sub, en);
    const int p = static_cast<int>(sub.net->nodes[en.node].phases.size());
    const Vec nu_j = en.nu_ref + rows * iterate;
    for (int k = 0; k < p; ++k) {
      auto g = [&](const Vec& x) {
        const Vec nu = en.nu_ref + rows * x;
        return en.vmin * en.vmin - (nu(k) * nu(k) + nu(p + k) * nu(p + k));
      };
      const Vec a = 2.0 * (rows.row(k).transpose() * nu_j(k) +
                           rows.row(p + k).transpose() * nu_j(p + k));
      const double bq = nu_j(k) * nu_j(k) + nu_j(p + k) * nu_j(p + k);
      auto ghat = [&](const Vec& x) {
        return en.vmin * en.vmin - (bq + a.dot(x - iterate));
      };
      out.c2_gap = std::max(out.c2_gap, std::abs(ghat(iterate) - g(iterate)));
      for (int s = 0; s < samples; ++s) {
        Vec x = iterate;
        for (int c = 0; c < nv; ++c) x(c) += urand(rng, -1.0, 1.0);
        out.c1_violation = std::max(out.c1_violation, g(x) - ghat(x));
      }
      // Directional finite differences along random unit directions.
      for (int s = 0; s < 8; ++s) {
        Vec d(nv);
        for (int c = 0; c < nv; ++c) d(c) = urand(rng, -1.0, 1.0);
        if (d.norm() == 0.0) continue;
        d /= d.norm();
        const double dg =
            (g(iterate + fd_step * d) - g(iterate - fd_step * d)) / (2.0 * fd_step);
        const double dh = -a.dot(d);
        out.c3_gap = std::max(out.c3_gap, std::abs(dg - dh));
      }
    }
  }
  return out;
}

struct SurrogateSuiteResult {
  int instances = 0;
  int solved = 0;
  int with_binding_lower = 0;
  int max_iterations = 0;
  double worst_monotonicity = 0.0;  ///< max positive objective jump (SI)
  double worst_final_margin = 0.0;  ///< max final lower-bound violation (pu)
  double c1_violation = 0.0;
  double c2_gap = 0.0;
  double c3_gap = 0.0;
};

/// Random magnitude-bounded instances driven until the lower bounds bind;
/// runs the successive scheme and checks monotone objectives, termination,
/// final feasibility and the surrogate conditions at every iterate.
inline SurrogateSuiteResult run_surrogate_suite(unsigned seed, int instances,
                                                const ConicOptions& opt = ConicOptions{}) {
  std::mt19937 rng(seed);
  SurrogateSuiteResult out;
  out.instances = instances;
  for (int i = 0; i < instances; ++i) {
    RandomNetConfig cfg;
    cfg.allow_caps = false;
    cfg.allow_dg = false;
    cfg.switch_free_tree = true;
    cfg.min_nodes = 4;
    cfg.load_scale = urand(rng, 2.0, 4.0);
    cfg.impedance_scale = urand(rng, 1.5, 3.0);
    Network net = random_network(rng, cfg);
    const double vmax = 1.1;
    // Pick vmin just under the unconstrained sag so the bound binds.
    double sag;
    {
      Topology all = make_topology(net, std::vector<char>(net.line_count(), 1));
      RefitResult rr = refit(net, all);
      std::vector<Vec> xi_si = rr.xi_pu;
      for (auto& x : xi_si)
        if (x.size()) x *= net.base().i_base();
      sag = min_voltage_pu(net, all.closed, xi_si);
    }
    if (!(sag < 1.0)) continue;  // no sag, no binding bound possible
    const double vmin = std::min(0.995, sag + urand(rng, 0.2, 0.6) * (1.0 - sag));
    VoltageSpec mag = VoltageSpec::uniform_magnitude(net, vmin, vmax);
    const double lambda = urand(rng, 0.0, 0.5);

    ScaResult res;
    try {
      res = sca_solve(net, ObjectiveSpec{}, lambda, mag, {}, opt);
    } catch (const SolveError&) {
      continue;
    }
    ++out.solved;
    out.max_iterations = std::max(out.max_iterations, res.iterations);
    for (size_t j = 1; j < res.objective_trace.size(); ++j)
      out.worst_monotonicity = std::max(
          out.worst_monotonicity, res.objective_trace[j] - res.objective_trace[j - 1]);
    out.worst_final_margin = std::max(out.worst_final_margin, -res.min_lower_margin);

    // Surrogate conditions at a fresh subproblem around the final iterate.
    DsrProblem sub = build_sca_subproblem(net, ObjectiveSpec{}, lambda, mag, res.sol.raw_x);
    SurrogateCheck chk = check_surrogates(sub, res.sol.raw_x, rng, 1000, 1e-6);
    out.c1_violation = std::max(out.c1_violation, chk.c1_violation);
    out.c2_gap = std::max(out.c2_gap, chk.c2_gap);
    out.c3_gap = std::max(out.c3_gap, chk.c3_gap);

    // Count instances where the lower bound is genuinely active.
    bool binding = false;
    for (const auto& [ei, mags] : voltage_magnitudes(sub, res.sol.raw_x))
      if ((mags.array() - sub.voltage_entries[ei].vmin).minCoeff() < 1e-4) binding = true;
    if (binding) ++out.with_binding_lower;
  }
  return out;
}

}  // namespace gridreconf
