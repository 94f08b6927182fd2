#pragma once

/// @file conic.hpp
/// @brief Dense primal-dual interior-point solver for quadratic conic programs
///        min 1/2 x'Px + q'x  s.t.  Ax = b,  Gx + s = h,  s in K,
///        with K a product of a nonnegative orthant and second-order cones.
///
/// Nesterov-Todd scaling with a Mehrotra predictor-corrector loop; the
/// unsymmetric 3x3 KKT system is solved by an LU factorization of a
/// statically regularized matrix followed by iterative refinement against the
/// unregularized matrix. Deterministic: identical inputs produce identical
/// iterates and outputs.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#ifdef GRIDRECONF_CONIC_TRACE
#include <cstdio>
#endif

#include "gridreconf/common.hpp"

namespace gridreconf {

/// Cone layout: `lp` nonnegative entries followed by second-order cone blocks.
struct ConeSpec {
  int lp = 0;
  std::vector<int> socs;

  int dim() const {
    int d = lp;
    for (int s : socs) d += s;
    return d;
  }
  int degree() const { return lp + static_cast<int>(socs.size()); }
};

enum class ConicStatus { optimal, max_iter, infeasible, unbounded, numerical_failure };

inline const char* to_string(ConicStatus s) {
  switch (s) {
    case ConicStatus::optimal: return "optimal";
    case ConicStatus::max_iter: return "max_iter";
    case ConicStatus::infeasible: return "infeasible";
    case ConicStatus::unbounded: return "unbounded";
    case ConicStatus::numerical_failure: return "numerical_failure";
  }
  return "?";
}

struct ConicOptions {
  double tol = 1e-8;  ///< relative KKT tolerance
  int max_iter = 200;
};

struct ConicResult {
  ConicStatus status = ConicStatus::numerical_failure;
  Vec x, y, z, s;
  int iters = 0;
  double pres = std::numeric_limits<double>::quiet_NaN();
  double dres = std::numeric_limits<double>::quiet_NaN();
  double gap = std::numeric_limits<double>::quiet_NaN();
  double relgap = std::numeric_limits<double>::quiet_NaN();
  double pobj = std::numeric_limits<double>::quiet_NaN();
};

namespace conic_detail {

/// Smallest cone "eigenvalue": plain entries on the orthant, u0 - ||u1|| per SOC.
inline double mineig(const Vec& u, const ConeSpec& K) {
  double m = std::numeric_limits<double>::infinity();
  for (int i = 0; i < K.lp; ++i) m = std::min(m, u(i));
  int o = K.lp;
  for (int d : K.socs) {
    m = std::min(m, u(o) - u.segment(o + 1, d - 1).norm());
    o += d;
  }
  return m;
}

inline Vec unit_e(const ConeSpec& K) {
  Vec e = Vec::Zero(K.dim());
  for (int i = 0; i < K.lp; ++i) e(i) = 1.0;
  int o = K.lp;
  for (int d : K.socs) {
    e(o) = 1.0;
    o += d;
  }
  return e;
}

/// Hyperbolic inner product u0 v0 - u1.v1 on a SOC block.
inline double jdot(const Vec& u, const Vec& v, int o, int d) {
  return u(o) * v(o) - u.segment(o + 1, d - 1).dot(v.segment(o + 1, d - 1));
}

/// Jordan product u o v.
inline Vec jprod(const Vec& u, const Vec& v, const ConeSpec& K) {
  Vec w(K.dim());
  for (int i = 0; i < K.lp; ++i) w(i) = u(i) * v(i);
  int o = K.lp;
  for (int d : K.socs) {
    w(o) = u.segment(o, d).dot(v.segment(o, d));
    w.segment(o + 1, d - 1) =
        u(o) * v.segment(o + 1, d - 1) + v(o) * u.segment(o + 1, d - 1);
    o += d;
  }
  return w;
}

/// Solve lam o x = d for x.
inline Vec jinv_apply(const Vec& lam, const Vec& dvec, const ConeSpec& K) {
  Vec x(K.dim());
  for (int i = 0; i < K.lp; ++i) x(i) = dvec(i) / lam(i);
  int o = K.lp;
  for (int d : K.socs) {
    const double l0 = lam(o);
    const auto l1 = lam.segment(o + 1, d - 1);
    const double det = l0 * l0 - l1.squaredNorm();
    const double d0 = dvec(o);
    const auto d1 = dvec.segment(o + 1, d - 1);
    const double x0 = (l0 * d0 - l1.dot(d1)) / det;
    x(o) = x0;
    x.segment(o + 1, d - 1) = (d1 - x0 * l1) / l0;
    o += d;
  }
  return x;
}

/// Nesterov-Todd scaling point. Orthant: w = sqrt(s/z) elementwise. Per SOC
/// block: W = beta (2 v v' - J) with J = diag(1, -I).
class Scaling {
 public:
  Scaling(const ConeSpec& K, const Vec& s, const Vec& z) : K_(K) {
    wlp_.resize(K.lp);
    for (int i = 0; i < K.lp; ++i) wlp_(i) = std::sqrt(s(i) / z(i));
    int o = K.lp;
    for (int d : K.socs) {
      const double sn = std::sqrt(jdot(s, s, o, d));
      const double zn = std::sqrt(jdot(z, z, o, d));
      Vec sb = s.segment(o, d) / sn;
      Vec zb = z.segment(o, d) / zn;
      const double gam = std::sqrt((1.0 + sb.dot(zb)) / 2.0);
      Vec wb(d);
      wb(0) = (sb(0) + zb(0)) / (2.0 * gam);
      wb.tail(d - 1) = (sb.tail(d - 1) - zb.tail(d - 1)) / (2.0 * gam);
      Vec v = wb;
      v(0) += 1.0;
      v /= std::sqrt(2.0 * (wb(0) + 1.0));
      beta_.push_back(std::sqrt(sn / zn));
      v_.push_back(v);
      o += d;
    }
  }

  /// W u.
  Vec apply(const Vec& u) const {
    Vec r(K_.dim());
    for (int i = 0; i < K_.lp; ++i) r(i) = wlp_(i) * u(i);
    int o = K_.lp, blk = 0;
    for (int d : K_.socs) {
      const Vec& v = v_[blk];
      const double beta = beta_[blk];
      Vec ub = u.segment(o, d);
      Vec Ju(d);
      Ju(0) = ub(0);
      Ju.tail(d - 1) = -ub.tail(d - 1);
      r.segment(o, d) = beta * (2.0 * v * v.dot(ub) - Ju);
      o += d;
      ++blk;
    }
    return r;
  }

  /// W^{-1} u = beta^{-1} (2 J v (v'J u) - J u).
  Vec apply_inv(const Vec& u) const {
    Vec r(K_.dim());
    for (int i = 0; i < K_.lp; ++i) r(i) = u(i) / wlp_(i);
    int o = K_.lp, blk = 0;
    for (int d : K_.socs) {
      const Vec& v = v_[blk];
      const double beta = beta_[blk];
      Vec Ju(d);
      Ju(0) = u(o);
      Ju.tail(d - 1) = -u.segment(o + 1, d - 1);
      Vec t = 2.0 * v * v.dot(Ju);
      t(0) -= Ju(0);
      t.tail(d - 1) += Ju.tail(d - 1);
      r(o) = t(0) / beta;
      r.segment(o + 1, d - 1) = -t.tail(d - 1) / beta;
      o += d;
      ++blk;
    }
    return r;
  }

  /// Dense W'W (symmetric).
  Mat wtw() const {
    const int m = K_.dim();
    Mat M = Mat::Zero(m, m);
    for (int i = 0; i < K_.lp; ++i) M(i, i) = wlp_(i) * wlp_(i);
    int o = K_.lp, blk = 0;
    for (int d : K_.socs) {
      const Vec& v = v_[blk];
      const double beta = beta_[blk];
      Mat J = -Mat::Identity(d, d);
      J(0, 0) = 1.0;
      Mat H = 2.0 * v * v.transpose() - J;
      M.block(o, o, d, d) = (beta * beta) * (H * H);
      o += d;
      ++blk;
    }
    return M;
  }

 private:
  const ConeSpec& K_;
  Vec wlp_;
  std::vector<double> beta_;
  std::vector<Vec> v_;
};

/// Largest step alpha >= 0 with u + alpha du in K (u strictly interior).
inline double step_to_boundary(const Vec& u, const Vec& du, const ConeSpec& K) {
  double amax = std::numeric_limits<double>::infinity();
  for (int i = 0; i < K.lp; ++i)
    if (du(i) < 0.0) amax = std::min(amax, -u(i) / du(i));
  int o = K.lp;
  for (int d : K.socs) {
    // q(alpha) = jdot(u + a du) = a al^2 + b al + c with c > 0 at interior u;
    // the boundary is the smallest positive root when one exists.
    const double a = jdot(du, du, o, d);
    const double b = 2.0 * jdot(u, du, o, d);
    const double c = std::max(jdot(u, u, o, d), 0.0);
    double lim = std::numeric_limits<double>::infinity();
    if (std::abs(a) <= 1e-300) {
      if (b < 0.0) lim = -c / b;
    } else {
      const double disc = b * b - 4.0 * a * c;
      if (a > 0.0) {
        if (disc >= 0.0 && b < 0.0) lim = (-b - std::sqrt(disc)) / (2.0 * a);
      } else {
        const double sq = std::sqrt(std::max(disc, 0.0));
        const double r1 = (-b - sq) / (2.0 * a);
        const double r2 = (-b + sq) / (2.0 * a);
        lim = (r1 >= 0.0) ? r1 : r2;
      }
    }
    amax = std::min(amax, lim);
    o += d;
  }
  return amax;
}

/// LU of the statically regularized KKT matrix with two rounds of iterative
/// refinement against the true (unregularized) matrix.
class RegSolver {
 public:
  RegSolver(const Mat& KK, int n, double delta = 1e-9) : KK_(KK) {
    const int N = static_cast<int>(KK.rows());
    Mat R = KK;
    for (int i = 0; i < N; ++i) R(i, i) += (i < n) ? delta : -delta;
    lu_.compute(R);
  }
  Vec solve(const Vec& rhs) const {
    Vec x = lu_.solve(rhs);
    for (int r = 0; r < 2; ++r) x += lu_.solve(rhs - KK_ * x);
    return x;
  }

 private:
  const Mat& KK_;
  Eigen::PartialPivLU<Mat> lu_;
};

}  // namespace conic_detail

inline ConicResult solve_conic(const Mat& P, const Vec& q, const Mat& A, const Vec& b,
                               const Mat& G, const Vec& h, const ConeSpec& K,
                               const ConicOptions& opt = ConicOptions{}) {
  using namespace conic_detail;
  const int n = static_cast<int>(q.size());
  const int p = static_cast<int>(A.rows());
  const int m = K.dim();
  if (G.rows() != m || G.cols() != n || static_cast<int>(h.size()) != m ||
      P.rows() != n || P.cols() != n || (p > 0 && A.cols() != n) ||
      static_cast<int>(b.size()) != p)
    throw SolveError("conic solver: dimension mismatch");

  ConicResult res;
  const Vec e = unit_e(K);

  Mat KK = Mat::Zero(n + p + m, n + p + m);
  KK.block(0, 0, n, n) = P;
  if (p > 0) {
    KK.block(0, n, n, p) = A.transpose();
    KK.block(n, 0, p, n) = A;
  }
  KK.block(0, n + p, n, m) = G.transpose();
  KK.block(n + p, 0, m, n) = G;
  KK.block(n + p, n + p, m, m) = -Mat::Identity(m, m);

  // Initial point: one KKT solve with identity scaling, shifted into the cone.
  Vec x, y, z, s;
  {
    Vec rhs(n + p + m);
    rhs.segment(0, n) = -q;
    rhs.segment(n, p) = b;
    rhs.segment(n + p, m) = h;
    Vec sol = RegSolver(KK, n).solve(rhs);
    x = sol.segment(0, n);
    y = sol.segment(n, p);
    z = sol.segment(n + p, m);
    s = -z;
    const double ap = -mineig(s, K);
    if (ap >= 0.0) s += (1.0 + ap) * e;
    const double ad = -mineig(z, K);
    if (ad >= 0.0) z += (1.0 + ad) * e;
  }

  const double resx0 = std::max(1.0, q.norm());
  const double resy0 = std::max(1.0, b.norm());
  const double resz0 = std::max(1.0, h.norm());
  double mu0 = s.dot(z) / K.degree();

  for (int it = 0; it < opt.max_iter; ++it) {
    const Vec rx = P * x + q + A.transpose() * y + G.transpose() * z;
    const Vec ry = A * x - b;
    const Vec rz = G * x + s - h;
    const double gap = s.dot(z);
    const double mu = gap / K.degree();
    const double f0 = 0.5 * x.dot(P * x) + q.dot(x);
    const double pres = std::max(ry.norm() / resy0, rz.norm() / resz0);
    const double dres = rx.norm() / resx0;
    const double relgap = gap / std::max(1.0, std::abs(f0));

    res.x = x;
    res.y = y;
    res.z = z;
    res.s = s;
    res.iters = it;
    res.pres = pres;
    res.dres = dres;
    res.gap = gap;
    res.relgap = relgap;
    res.pobj = f0;

#ifdef GRIDRECONF_CONIC_TRACE
    std::printf("it %2d: pres %.3e dres %.3e gap %.6e mins %.3e minz %.3e\n", it, pres,
                dres, gap, mineig(s, K), mineig(z, K));
#endif
    if (!std::isfinite(pres) || !std::isfinite(dres) || !std::isfinite(gap)) {
      res.status = ConicStatus::numerical_failure;
      return res;
    }
    if (pres <= opt.tol && dres <= opt.tol && (relgap <= opt.tol || mu <= opt.tol * 1e-2)) {
      res.status = ConicStatus::optimal;
      return res;
    }
    // Best-effort pathology classification (never reported as optimal):
    // complementarity collapsed but feasibility stalled -> infeasible;
    // objective diverging to -inf with feasibility intact -> unbounded.
    if (mu <= 1e-10 * std::max(mu0, 1.0) && pres > 1e3 * opt.tol) {
      res.status = ConicStatus::infeasible;
      return res;
    }
    if (f0 < -1e14 && pres <= 1e-6) {
      res.status = ConicStatus::unbounded;
      return res;
    }

    const Scaling W(K, s, z);
    const Vec lam = W.apply(z);
    KK.block(n + p, n + p, m, m) = -W.wtw();
    const RegSolver slv(KK, n);

    auto direction = [&](const Vec& dvec, Vec& dx, Vec& dy, Vec& dz, Vec& ds) {
      const Vec g = jinv_apply(lam, dvec, K);
      Vec rhs(n + p + m);
      rhs.segment(0, n) = -rx;
      rhs.segment(n, p) = -ry;
      rhs.segment(n + p, m) = -rz - W.apply(g);
      const Vec sol = slv.solve(rhs);
      dx = sol.segment(0, n);
      dy = sol.segment(n, p);
      dz = sol.segment(n + p, m);
      ds = W.apply(g - W.apply(dz));
    };

    Vec dx, dy, dz, ds;
    const Vec lam2 = jprod(lam, lam, K);
    direction(-lam2, dx, dy, dz, ds);
    const double a_aff =
        std::min({1.0, step_to_boundary(s, ds, K), step_to_boundary(z, dz, K)});
    const double gap_aff = (s + a_aff * ds).dot(z + a_aff * dz);
    double sigma = std::max(0.0, std::min(1.0, gap_aff / gap));
    sigma = sigma * sigma * sigma;

    const Vec corr = jprod(W.apply_inv(ds), W.apply(dz), K);
    direction(sigma * mu * e - lam2 - corr, dx, dy, dz, ds);
    const double alpha =
        std::min(1.0, 0.99 * std::min(step_to_boundary(s, ds, K), step_to_boundary(z, dz, K)));
#ifdef GRIDRECONF_CONIC_TRACE
    std::printf("       a_aff %.6e sigma %.6e alpha %.6e\n", a_aff, sigma, alpha);
#endif
    if (!std::isfinite(alpha) || alpha <= 0.0) {
      res.status = ConicStatus::numerical_failure;
      return res;
    }
    x += alpha * dx;
    y += alpha * dy;
    z += alpha * dz;
    s += alpha * ds;
  }
  res.status = ConicStatus::max_iter;
  return res;
}

/// A standard-form conic program (dense data plus cone layout), the unit of
/// interchange for the text dump/parse round trip.
struct StandardForm {
  Mat P;
  Vec q;
  Mat A;
  Vec b;
  Mat G;
  Vec h;
  ConeSpec cone;
};

}  // namespace gridreconf
