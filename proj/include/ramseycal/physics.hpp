#pragma once

// Closed-form light-shift physics and the Ramsey two-pulse sequence.
//
// Conventions: angular frequencies in rad/s, times in s, intensities as
// s = I / I_sat, detunings as delta_bar = delta / Gamma. Phases returned by
// the models are unwrapped; wrap only when comparing against measurements.

#include <array>
#include <cmath>
#include <complex>
#include <string>

#include "ramseycal/constants.hpp"
#include "ramseycal/errors.hpp"

namespace ramseycal {

struct AtomSpec {
  double gamma = 0;    // natural linewidth, rad/s
  double lambda = 0;   // probe wavelength, m
  double delta_g = 0;  // ground hyperfine splitting, rad/s
  double delta_e = 0;  // excited hyperfine splitting (F'=3 to F'=2), rad/s
  double i_sat = 0;    // cycling-transition saturation intensity, W/m^2

  void validate() const {
    if (!(gamma > 0 && lambda > 0 && delta_g > 0 && delta_e > 0 && i_sat > 0))
      throw DomainError("AtomSpec: all fields must be strictly positive");
    if (!(delta_g > delta_e)) throw DomainError("AtomSpec: delta_G must exceed delta_E");
  }

  // Resonant scattering cross-section 3 lambda^2 / (2 pi).
  double sigma0() const { return 3.0 * lambda * lambda / kTwoPi; }
};

// 87Rb D2 line (Steck, "Rubidium 87 D Line Data").
inline AtomSpec rb87_d2() {
  AtomSpec a;
  a.gamma = kTwoPi * 6.0666e6;
  a.lambda = 780.241209686e-9;
  a.delta_g = kTwoPi * 6.834682610904e9;
  a.delta_e = kTwoPi * 266.6500e6;
  a.i_sat = 16.6933;  // 1.66933 mW/cm^2, sigma+ cycling transition
  return a;
}

struct ProbePulse {
  double s = 0;          // I / I_sat
  double delta_bar = 0;  // delta / Gamma
  double t_p = 0;        // commanded duration, s
  double dt0 = 0;        // hardware dead time, s

  double t_m() const { return t_p - dt0 > 0 ? t_p - dt0 : 0.0; }

  void validate() const {
    if (!(t_p >= 0)) throw DomainError("ProbePulse: t_p must be >= 0");
    if (delta_bar == 0) throw DomainError("ProbePulse: delta_bar must be nonzero");
  }
};

struct RamseyParams {
  double contrast = 1;      // A
  double phase = 0;         // phi, reported in (-pi, pi]
  double center_shift = 0;  // b
  double leakage_phase = 0; // phi0
};

// Maps any angle to (-pi, pi].
inline double wrap_phase(double x) {
  double y = std::remainder(x, kTwoPi);  // [-pi, pi]
  if (y <= -kPi) y += kTwoPi;
  return y;
}

// Maps any angle to [0, 2 pi).
inline double wrap_phase_positive(double x) {
  double y = std::fmod(x, kTwoPi);
  if (y < 0) y += kTwoPi;
  if (y >= kTwoPi) y -= kTwoPi;
  return y;
}

// Two-level ground-state light shift V_ac / hbar = Omega^2 / (4 delta), rad/s.
inline double stark_shift_two_level(double omega, double delta) {
  if (delta == 0) throw DomainError("stark_shift_two_level: zero detuning");
  return omega * omega / (4.0 * delta);
}

// V_ac / (hbar Gamma) = s / (8 delta_bar).
inline double stark_from_intensity(double s, double delta_bar) {
  if (delta_bar == 0) throw DomainError("stark_from_intensity: zero detuning");
  return s / (8.0 * delta_bar);
}

namespace detail {
// Shared by both phase models so the two-level limit is bit-identical.
inline double phase_from_bracket(const ProbePulse& p, double gamma, double bracket) {
  return -(gamma / 8.0) * p.t_m() * p.s * bracket;
}
}  // namespace detail

// Dimensionless bracket Gamma/delta - Gamma/(2 delta_12).
inline double light_shift_bracket(double gamma, double delta, double delta12) {
  if (delta == 0) throw DomainError("light_shift_bracket: zero detuning");
  if (delta12 == 0)
    throw DomainError("light_shift_bracket: probe resonant with the g1 -> e2 transition");
  return gamma / delta - gamma / (2.0 * delta12);
}

// phi = -V_ac t_m / hbar for the bare two-level picture.
inline double ramsey_phase_two_level(const ProbePulse& pulse, const AtomSpec& atom) {
  pulse.validate();
  return detail::phase_from_bracket(pulse, atom.gamma, 1.0 / pulse.delta_bar);
}

// Total phase including the weak g1 -> e2 shift. With include_g1_shift = false
// the result equals ramsey_phase_two_level bit-for-bit.
inline double ramsey_phase_full(const ProbePulse& pulse, const AtomSpec& atom,
                                bool include_g1_shift = true) {
  pulse.validate();
  if (!include_g1_shift) return detail::phase_from_bracket(pulse, atom.gamma, 1.0 / pulse.delta_bar);
  const double delta = pulse.delta_bar * atom.gamma;
  const double delta12 = delta - atom.delta_g + atom.delta_e;
  if (delta12 == 0)
    throw DomainError("ramsey_phase_full: probe resonant with the g1 -> e2 transition");
  const double bracket = 1.0 / pulse.delta_bar - atom.gamma / (2.0 * delta12);
  return detail::phase_from_bracket(pulse, atom.gamma, bracket);
}

struct Occupations {
  double f1 = 0;
  double f2 = 0;
};

using Mat2 = std::array<std::array<std::complex<double>, 2>, 2>;

// pi/2 rotation about an equatorial axis rotated by theta from e_y:
// [I + i (sin theta sigma_x - cos theta sigma_y)] / sqrt 2.
inline Mat2 half_pi_rotation(double theta) {
  using C = std::complex<double>;
  const double r = 1.0 / std::sqrt(2.0);
  const C i{0.0, 1.0};
  const double s = std::sin(theta), c = std::cos(theta);
  // sigma_x = [[0,1],[1,0]], sigma_y = [[0,-i],[i,0]]
  Mat2 m{};
  m[0][0] = C{r, 0};
  m[0][1] = r * (i * s + i * (-c) * (-i));
  m[1][0] = r * (i * s + i * (-c) * i);
  m[1][1] = C{r, 0};
  return m;
}

// |g2><g2| e^{i phi} + |g1><g1|.
inline Mat2 free_evolution(double phi) {
  Mat2 m{};
  m[0][0] = 1.0;
  m[1][1] = std::polar(1.0, phi);
  return m;
}

inline std::array<std::complex<double>, 2> mat_vec(const Mat2& m,
                                                 const std::array<std::complex<double>, 2>& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]};
}

// |psi_f> = R(theta) U(phi) R(0) |g1>, returned as occupation probabilities.
inline Occupations ramsey_sequence(double theta, double phi) {
  std::array<std::complex<double>, 2> psi{1.0, 0.0};
  psi = mat_vec(half_pi_rotation(0.0), psi);
  psi = mat_vec(free_evolution(phi), psi);
  psi = mat_vec(half_pi_rotation(theta), psi);
  return {std::norm(psi[0]), std::norm(psi[1])};
}

// f2 = [1 + A cos(dphi_P - phi)] / 2 + b.
inline double fringe_model(double dphi_p, const RamseyParams& p) {
  return 0.5 * (1.0 + p.contrast * std::cos(dphi_p - p.phase)) + p.center_shift;
}

// Effective I_sat scale (1 - 14 eps / 15)^-1 for a fractional polarization impurity eps.
inline double polarization_isat_scale(double epsilon) {
  if (!(epsilon >= 0)) throw DomainError("polarization_isat_scale: epsilon must be >= 0");
  if (epsilon >= 15.0 / 14.0)
    throw DomainError("polarization_isat_scale: epsilon must be below 15/14");
  return 1.0 / (1.0 - 14.0 * epsilon / 15.0);
}

}  // namespace ramseycal
