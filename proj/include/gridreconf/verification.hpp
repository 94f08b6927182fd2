#pragma once

/// @file verification.hpp
/// @brief Closed-form optimality certificates for solved reconfiguration programs.
///
/// At an optimum, each line's stacked current solves a small per-line problem
///   min  (1/2) xi' Zt xi + lambda ||xi|| - mu' xi
/// where Zt is the line's quadratic (including ampacity multipliers) and mu
/// collects the balance multipliers of its endpoints. That problem has a
/// closed-form solution — a plain linear solve when lambda = 0, and a
/// shrinkage map governed by a scalar eta otherwise — so every solver answer
/// can be re-derived independently and compared coordinate by coordinate.

#include <cmath>

#include "gridreconf/common.hpp"
#include "gridreconf/formulation.hpp"

namespace gridreconf {

/// Quadratic of line e's per-line problem: the objective block plus the
/// ampacity multipliers on the per-phase selector diagonals.
inline Mat line_quadratic(const DsrProblem& pr, const DsrSolution& sol, int e) {
  const LineVars& lv = pr.line_vars[e];
  if (!lv.active) throw ModelError("line is not part of the program");
  Mat zt = pr.P.block(lv.xi_off, lv.xi_off, 2 * lv.np, 2 * lv.np);
  for (int k = 0; k < lv.np; ++k) {
    const double rho = sol.rho_pu[e].size() ? sol.rho_pu[e](k) : 0.0;
    zt(k, k) += rho;
    zt(lv.np + k, lv.np + k) += rho;
  }
  return zt;
}

/// Balance-multiplier difference across line e = (m, n): the tail's stacked
/// multiplier minus the head's, mapped onto the line's phase slots.
inline Vec line_group_multiplier(const DsrProblem& pr, const DsrSolution& sol, int e) {
  const Network& net = *pr.net;
  const Line& ln = net.lines[e];
  const LineVars& lv = pr.line_vars[e];
  const int m = net.node_index(ln.from), n2 = net.node_index(ln.to);
  const int pm = static_cast<int>(net.nodes[m].phases.size());
  const int pn = static_cast<int>(net.nodes[n2].phases.size());
  Vec mu = Vec::Zero(2 * lv.np);
  for (int k = 0; k < lv.np; ++k) {
    const int km = Network::phase_pos(net.nodes[m].phases, ln.phases[k]);
    const int kn = Network::phase_pos(net.nodes[n2].phases, ln.phases[k]);
    mu(k) = sol.mu_pu[m](km) - sol.mu_pu[n2](kn);
    mu(lv.np + k) = sol.mu_pu[m](pm + km) - sol.mu_pu[n2](pn + kn);
  }
  return mu;
}

/// Multiplier seen by line e's block in the stationarity condition:
/// -(A'y + G'z)|block with the line's own ampacity and group cones excluded
/// (their effect is carried by line_quadratic and the shrinkage map). For
/// programs without voltage constraints this equals line_group_multiplier.
inline Vec line_effective_multiplier(const DsrProblem& pr, const DsrSolution& sol, int e) {
  const LineVars& lv = pr.line_vars[e];
  if (!lv.active) throw ModelError("line is not part of the program");
  if (!sol.has_duals) throw SolveError("solution carries no dual variables");
  Vec grad = pr.A.transpose() * sol.raw.y;
  // G'z over LP rows and any SOC blocks that are neither ampacity nor group cones.
  int off = 0;
  if (pr.cone.lp > 0) {
    grad += pr.G.topRows(pr.cone.lp).transpose() * sol.raw.z.head(pr.cone.lp);
    off = pr.cone.lp;
  }
  std::vector<char> skip(pr.cone.socs.size(), 0);
  for (int le = 0; le < pr.net->line_count(); ++le) {
    for (int bidx : pr.cap_block[le])
      if (bidx >= 0) skip[bidx] = 1;
    if (pr.group_block[le] >= 0) skip[pr.group_block[le]] = 1;
  }
  for (size_t bi = 0; bi < pr.cone.socs.size(); ++bi) {
    const int d = pr.cone.socs[bi];
    if (!skip[bi])
      grad += pr.G.middleRows(off, d).transpose() * sol.raw.z.segment(off, d);
    off += d;
  }
  return -grad.segment(lv.xi_off, 2 * lv.np);
}

/// Unregularized recovery: xi = Zt^{-1} mu.
inline Vec recover_current_direct(const Mat& zt, const Vec& mu) {
  return zt.ldlt().solve(mu);
}

/// Scalar scale eta >= 0 of the shrinkage map. eta minimizes
///   f(eta) = eta - (eta/2) mu' (eta Zt + (lambda^2/2) I)^{-1} mu,
/// whose derivative f'(eta) = 1 - (lambda^2/4) mu' B(eta)^{-2} mu is strictly
/// increasing, so a bracketed bisection on f' is exact. eta = 0 iff
/// ||mu|| <= lambda.
inline double shrinkage_scale(const Vec& mu, const Mat& zt, double lambda) {
  if (lambda <= 0.0) throw ModelError("shrinkage_scale requires lambda > 0");
  const double nmu = mu.norm();
  if (nmu <= lambda) return 0.0;
  const int d = static_cast<int>(mu.size());
  auto fprime = [&](double eta) {
    Mat B = eta * zt + (lambda * lambda / 2.0) * Mat::Identity(d, d);
    Vec w = B.ldlt().solve(mu);
    return 1.0 - (lambda * lambda / 4.0) * w.squaredNorm();
  };
  double lo = 0.0, hi = 1.0;
  int guard = 0;
  while (fprime(hi) < 0.0) {
    lo = hi;
    hi *= 2.0;
    if (++guard > 200) throw SolveError("shrinkage scale bracket did not close");
  }
  for (int it = 0; it < 200 && hi - lo > 1e-10 * std::max(1.0, hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (fprime(mid) < 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

/// Regularized recovery: zero when ||mu|| <= lambda, otherwise
/// xi = eta (eta Zt + (lambda^2/2) I)^{-1} mu with eta = shrinkage_scale(...).
inline Vec recover_current_shrinkage(const Vec& mu, const Mat& zt, double lambda) {
  const int d = static_cast<int>(mu.size());
  if (mu.norm() <= lambda) return Vec::Zero(d);
  const double eta = shrinkage_scale(mu, zt, lambda);
  Mat B = eta * zt + (lambda * lambda / 2.0) * Mat::Identity(d, d);
  return eta * B.ldlt().solve(mu);
}

/// Single-phase specialization (line quadratic r I2): zero when
/// ||mu|| <= lambda, else ((||mu|| - lambda) / (r ||mu||)) mu.
inline Vec recover_current_shrinkage_1p(const Vec& mu, double r, double lambda) {
  if (mu.size() != 2) throw ModelError("single-phase recovery expects a 2-vector");
  const double nmu = mu.norm();
  if (nmu <= lambda) return Vec::Zero(2);
  return ((nmu - lambda) / (r * nmu)) * mu;
}

struct VerificationReport {
  double max_direct_residual = 0.0;     ///< unregularized lines, relative
  double max_shrinkage_residual = 0.0;  ///< regularized lines, relative
  double max_group_head_gap = 0.0;      ///< max |z0 - lambda| over group cones, relative
  double slater_margin = 0.0;           ///< min cone margin of the primal slack
  double threshold = 0.0;               ///< 10 sqrt(solver tol)
  bool passed = false;
};

/// Re-derive every line current from the dual variables and compare with the
/// solver's answer. Residuals are measured relative to max(1, ||xi||) and the
/// report passes when all of them stay within 10 sqrt(tol).
inline VerificationReport verify_solution(const DsrProblem& pr, const DsrSolution& sol,
                                          double solver_tol = 1e-8) {
  if (!sol.has_duals) throw SolveError("verification requires dual variables");
  VerificationReport rep;
  rep.threshold = 10.0 * std::sqrt(solver_tol);
  rep.slater_margin = sol.slater_margin;
  std::vector<double> group_heads;
  {
    int off = pr.cone.lp;
    for (int d : pr.cone.socs) {
      group_heads.push_back(sol.raw.z(off));
      off += d;
    }
  }
  for (int e = 0; e < pr.net->line_count(); ++e) {
    const LineVars& lv = pr.line_vars[e];
    if (!lv.active) continue;
    const Mat zt = line_quadratic(pr, sol, e);
    const Vec mu = line_effective_multiplier(pr, sol, e);
    const Vec& xi = sol.xi_pu[e];
    if (lv.t_idx >= 0) {
      const Vec pred = recover_current_shrinkage(mu, zt, lv.lambda_pu);
      const double res = (xi - pred).norm() / std::max(1.0, xi.norm());
      rep.max_shrinkage_residual = std::max(rep.max_shrinkage_residual, res);
      const double head = group_heads[pr.group_block[e]];
      rep.max_group_head_gap =
          std::max(rep.max_group_head_gap,
                   std::abs(head - lv.lambda_pu) / std::max(1.0, lv.lambda_pu));
    } else {
      const Vec pred = recover_current_direct(zt, mu);
      const double res = (xi - pred).norm() / std::max(1.0, xi.norm());
      rep.max_direct_residual = std::max(rep.max_direct_residual, res);
    }
  }
  rep.passed = rep.max_direct_residual <= rep.threshold &&
               rep.max_shrinkage_residual <= rep.threshold &&
               rep.max_group_head_gap <= rep.threshold;
  return rep;
}

}  // namespace gridreconf
