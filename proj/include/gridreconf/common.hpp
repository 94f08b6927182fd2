#pragma once

/// @file common.hpp
/// @brief Shared scalar types, per-unit bases, and small numeric helpers.

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace gridreconf {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;
using cplx = std::complex<double>;

inline constexpr double kPi = 3.141592653589793238462643383279502884;

/// Nominal phase angle (radians) for phase index 0/1/2 (a/b/c).
inline double phase_angle(int phase) {
  switch (phase) {
    case 0: return 0.0;
    case 1: return -2.0 * kPi / 3.0;
    case 2: return 2.0 * kPi / 3.0;
    default: throw std::invalid_argument("phase index must be 0, 1 or 2");
  }
}

/// Per-unit base quantities derived from the line-to-line nominal voltage
/// and a three-phase apparent-power base.
struct BaseUnits {
  double v_nominal_v = 0.0;  ///< nominal line-to-line voltage [V]
  double s_base_va = 0.0;    ///< three-phase apparent power base [VA]

  double v_phase() const { return v_nominal_v / std::sqrt(3.0); }      ///< [V]
  double i_base() const { return s_base_va / (std::sqrt(3.0) * v_nominal_v); }  ///< [A]
  double z_base() const { return v_nominal_v * v_nominal_v / s_base_va; }       ///< [ohm]
  double s_phase_base() const { return s_base_va / 3.0; }              ///< [VA]
  /// Regularization weights scale like voltage when moving to per-unit.
  double lambda_base() const { return v_phase(); }
};

/// Format a double with a fixed number of significant digits (report contract).
inline std::string format_sig(double value, int digits = 12) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, value);
  return std::string(buf);
}

/// Generic error for invalid model data or invalid operation inputs.
class ModelError : public std::runtime_error {
 public:
  explicit ModelError(const std::string& what) : std::runtime_error(what) {}
};

/// Error raised by solver/pipeline operations (distinct from model errors).
class SolveError : public std::runtime_error {
 public:
  explicit SolveError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace gridreconf
