#pragma once

// Photon accounting (QE, intensity <-> counts, system efficiency) and the
// saturated-absorption imaging model with its noise and SNR.

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "ramseycal/constants.hpp"
#include "ramseycal/datasets.hpp"
#include "ramseycal/errors.hpp"
#include "ramseycal/fits.hpp"
#include "ramseycal/image.hpp"

namespace ramseycal {

struct ImagingGeometry {
  double pixel_pitch = 13e-6;  // m, at the sensor
  double magnification = 36;

  // object-plane area of one pixel, m^2
  double area() const {
    const double a = pixel_pitch / magnification;
    return a * a;
  }
  void validate() const {
    if (!(pixel_pitch > 0 && magnification > 0)) throw DomainError("ImagingGeometry: pitch and M must be > 0");
  }
};

inline double photon_energy(double lambda) { return kPlanck * kSpeedOfLight / lambda; }

// N_ph = P t_m lambda / (h c)
inline double photons_in_pulse(double power, double t_m, double lambda) {
  if (!(power >= 0 && t_m >= 0 && lambda > 0)) throw DomainError("photons_in_pulse: inputs must be non-negative");
  return power * t_m / photon_energy(lambda);
}

inline double quantum_efficiency(double n_adu_integrated, double conversion, double n_ph) {
  if (!(n_adu_integrated > 0 && conversion > 0 && n_ph > 0))
    throw DomainError("quantum_efficiency: inputs must be positive");
  const double qe = n_adu_integrated / (conversion * n_ph);
  if (qe > 1.0) throw DomainError("quantum_efficiency: QE > 1 is unphysical (" + std::to_string(qe) + ")");
  return qe;
}

// Object-plane intensity, W/m^2, from counts per pixel over t_m.
inline double intensity_from_counts(double n_adu, const SensorModel& sensor, double transfer,
                                    const ImagingGeometry& geom, double t_m, double lambda) {
  if (!(n_adu >= 0 && transfer > 0 && t_m > 0 && lambda > 0))
    throw DomainError("intensity_from_counts: inputs must be positive");
  sensor.validate();
  geom.validate();
  return n_adu * photon_energy(lambda) / (sensor.conversion * sensor.qe * transfer * geom.area() * t_m);
}

// Inverse of intensity_from_counts.
inline double counts_from_intensity(double intensity, const SensorModel& sensor, double transfer,
                                    const ImagingGeometry& geom, double t_m, double lambda) {
  return intensity * sensor.conversion * sensor.qe * transfer * geom.area() * t_m / photon_energy(lambda);
}

// QE * T implied by N_sat (counts/pixel/us at I_sat).
inline double system_efficiency(double n_sat, double conversion, const ImagingGeometry& geom, double lambda,
                                double i_sat) {
  if (!(n_sat > 0 && conversion > 0 && lambda > 0 && i_sat > 0))
    throw DomainError("system_efficiency: inputs must be positive");
  geom.validate();
  return n_sat * photon_energy(lambda) / (conversion * geom.area() * kMicrosecond * i_sat);
}

// ---------------------------------------------------------------------------
// QE from a Gaussian beam exposure

struct QeMeasurement {
  double power = 0;       // W, as read on the power meter
  double n_ph = 0;
  double n_adu = 0;       // integrated counts of the fitted Gaussian
  double qe = 0;
  double qe_sigma = 0;
  Gaussian2DFit fit;
};

// power_rel_sigma is the fractional uncertainty of the power reading.
inline QeMeasurement measure_qe(const Image& exposure, double power, double t_m, double lambda, double conversion,
                                double power_rel_sigma = 0.0) {
  QeMeasurement m;
  m.power = power;
  m.fit = fit_gaussian2d(exposure);
  if (!m.fit.fit.converged) throw FitError("measure_qe: Gaussian fit did not converge: " + m.fit.fit.diagnostic);
  m.n_ph = photons_in_pulse(power, t_m, lambda);
  m.n_adu = m.fit.model.integrated();
  m.qe = quantum_efficiency(m.n_adu, conversion, m.n_ph);
  // relative variance of A sx sy from the fit covariance (A, sx, sy are params 0, 3, 4)
  const auto& C = m.fit.fit.covariance;
  const Eigen::Vector3d g(1.0 / m.fit.model.amplitude, 1.0 / m.fit.model.width_x, 1.0 / m.fit.model.width_y);
  const int idx[3] = {0, 3, 4};
  double rel2 = 0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) rel2 += g(a) * g(b) * C(idx[a], idx[b]);
  rel2 += power_rel_sigma * power_rel_sigma;
  m.qe_sigma = m.qe * std::sqrt(std::max(rel2, 0.0));
  return m;
}

struct QeCampaign {
  std::vector<QeMeasurement> points;
  double mean = 0, mean_sigma = 0;    // inverse-variance weighted
  double slope = 0, slope_sigma = 0;  // dQE/dP, 1/W
  double chi2 = 0;                    // about the weighted mean
};

inline QeCampaign summarize_qe(std::vector<QeMeasurement> points) {
  if (points.size() < 2) throw DomainError("summarize_qe: need at least 2 measurements");
  QeCampaign c;
  double sw = 0, swx = 0, swy = 0, swxx = 0, swxy = 0;
  for (const auto& p : points) {
    if (!(p.qe_sigma > 0)) throw DomainError("summarize_qe: every point needs a positive qe_sigma");
    const double w = 1.0 / (p.qe_sigma * p.qe_sigma);
    sw += w;
    swx += w * p.power;
    swy += w * p.qe;
    swxx += w * p.power * p.power;
    swxy += w * p.power * p.qe;
  }
  c.mean = swy / sw;
  c.mean_sigma = std::sqrt(1.0 / sw);
  const double det = sw * swxx - swx * swx;
  if (det > 0) {
    c.slope = (sw * swxy - swx * swy) / det;
    c.slope_sigma = std::sqrt(sw / det);
  }
  for (const auto& p : points) c.chi2 += std::pow((p.qe - c.mean) / p.qe_sigma, 2);
  c.points = std::move(points);
  return c;
}

// ---------------------------------------------------------------------------
// Saturated Beer-Lambert absorption, dI/dz = -sigma0 rho I / (1 + I / I_sat)

// Line density sigma0 * rho(z), 1/m, supported on [z0, z1].
struct DensityProfile {
  std::function<double(double)> density;
  double z0 = 0, z1 = 0;
  double column = 0;           // integral of density, i.e. the resonant OD
  std::vector<double> breaks;  // interior points where the density is not smooth
};

inline DensityProfile gaussian_profile(double od, double sigma_z) {
  if (!(od >= 0 && sigma_z > 0)) throw DomainError("gaussian_profile: need od >= 0 and sigma_z > 0");
  const double norm = od / (std::sqrt(kTwoPi) * sigma_z);
  DensityProfile p;
  p.density = [norm, sigma_z](double z) { return norm * std::exp(-0.5 * z * z / (sigma_z * sigma_z)); };
  p.z0 = -12 * sigma_z;  // tails beyond 12 sigma are below 1e-31 of the peak
  p.z1 = 12 * sigma_z;
  p.column = od;
  return p;
}

inline DensityProfile slab_profile(double od, double length) {
  if (!(od >= 0 && length > 0)) throw DomainError("slab_profile: need od >= 0 and length > 0");
  DensityProfile p;
  const double rho = od / length;
  p.density = [rho](double) { return rho; };
  p.z0 = 0;
  p.z1 = length;
  p.column = od;
  return p;
}

// Piecewise-linear density through samples (z_k, sigma0 rho_k).
inline DensityProfile sampled_profile(std::vector<double> z, std::vector<double> rho) {
  if (z.size() != rho.size() || z.size() < 2) throw DomainError("sampled_profile: need >= 2 matching samples");
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (rho[i] < 0) throw DomainError("sampled_profile: density must be non-negative");
    if (i > 0 && !(z[i] > z[i - 1])) throw DomainError("sampled_profile: z must increase");
  }
  DensityProfile p;
  p.z0 = z.front();
  p.z1 = z.back();
  for (std::size_t i = 1; i < z.size(); ++i) p.column += 0.5 * (rho[i] + rho[i - 1]) * (z[i] - z[i - 1]);
  p.breaks.assign(z.begin() + 1, z.end() - 1);
  p.density = [z = std::move(z), rho = std::move(rho)](double x) {
    if (x <= z.front()) return rho.front();
    if (x >= z.back()) return rho.back();
    const auto it = std::upper_bound(z.begin(), z.end(), x);
    const auto k = static_cast<std::size_t>(it - z.begin());
    const double t = (x - z[k - 1]) / (z[k] - z[k - 1]);
    return rho[k - 1] + t * (rho[k] - rho[k - 1]);
  };
  return p;
}

// Transmitted intensity in units of I_sat. Integrated in u = ln I:
// du/dz = -sigma0 rho / (1 + e^u).
inline double beer_lambert_saturated(const DensityProfile& profile, double i_in, double tol = 1e-12) {
  if (!(i_in > 0)) throw DomainError("beer_lambert_saturated: input intensity must be positive");
  if (!(profile.z1 >= profile.z0)) throw DomainError("beer_lambert_saturated: empty profile range");
  namespace ode = boost::numeric::odeint;
  using State = std::array<double, 1>;
  auto rhs = [&](const State& u, State& du, double z) {
    const double rho = profile.density(z);
    if (rho < 0) throw DomainError("beer_lambert_saturated: negative density");
    du[0] = -rho / (1.0 + std::exp(u[0]));
  };
  State u{std::log(i_in)};
  std::vector<double> edges{profile.z0};
  for (double b : profile.breaks) edges.push_back(b);
  edges.push_back(profile.z1);
  auto stepper = ode::make_controlled(tol, tol, ode::runge_kutta_dopri5<State>());
  for (std::size_t k = 1; k < edges.size(); ++k) {
    const double a = edges[k - 1], b = edges[k];
    if (!(b > a)) continue;
    const std::size_t steps = ode::integrate_adaptive(stepper, rhs, u, a, b, (b - a) / 64);
    if (!std::isfinite(u[0]))
      throw FitError("beer_lambert_saturated: integrator failed after " + std::to_string(steps) + " steps");
  }
  return std::exp(u[0]);
}

// ---------------------------------------------------------------------------
// Corrected optical depth, its noise and the imaging SNR

struct OdSample {
  double n_plus = 0;          // with atoms, dark subtracted
  double n_minus = 0;         // without atoms, dark subtracted, ensemble averaged
  double n_sat_exposure = 0;  // N_sat scaled to the pulse duration
};

inline double od_corrected(const OdSample& s) {
  if (!(s.n_plus > 0)) throw DomainError("od_corrected: n_plus must be positive");
  if (!(s.n_minus > 0 && s.n_sat_exposure > 0)) throw DomainError("od_corrected: n_minus and n_sat must be positive");
  return -std::log(s.n_plus / s.n_minus) - (s.n_plus - s.n_minus) / s.n_sat_exposure;
}

// Standard deviation of OD_corr from shot noise in n_plus. The reference image is
// treated as noiseless (ensemble averaged). F^2 defaults to classical shot noise.
inline double od_noise(double n_plus, double n_sat_exposure, double excess_noise_factor = 1.0) {
  if (!(n_plus > 0 && n_sat_exposure > 0)) throw DomainError("od_noise: inputs must be positive");
  return std::sqrt(excess_noise_factor / n_plus) * (1.0 + n_plus / n_sat_exposure);
}

// n_plus producing a given OD_corr for fixed n_minus; safeguarded bisection in ln n_plus.
inline double invert_od(double od, double n_minus, double n_sat_exposure) {
  if (!(od >= 0)) throw DomainError("invert_od: od must be non-negative");
  if (!(n_minus > 0 && n_sat_exposure > 0)) throw DomainError("invert_od: counts must be positive");
  if (od == 0) return n_minus;
  // n_minus e^{-od} <= n_plus <= min(n_minus, n_minus e^{-od + n_minus / n_sat})
  double lo = std::log(n_minus) - od;
  double hi = std::min(std::log(n_minus), lo + n_minus / n_sat_exposure);
  if (std::exp(lo) < std::numeric_limits<double>::min() * 1e4)
    throw DomainError("invert_od: od too large for the probe level; transmitted counts underflow");
  auto g = [&](double x) {
    const double np = std::exp(x);
    return -(x - std::log(n_minus)) - (np - n_minus) / n_sat_exposure - od;
  };
  // g decreases in x; g(lo) >= 0 >= g(hi)
  for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (g(mid) > 0) lo = mid;
    else hi = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

struct SnrResult {
  double snr = 0;
  double n_plus = 0;
  double od_noise = 0;
  double snr_low_intensity = 0;   // sqrt(N-) e^{-OD/2} OD, valid for N- << N_sat
  double snr_high_intensity = 0;  // (N_sat / sqrt(N-)) OD, valid for N- >> N_sat
};

inline SnrResult snr_model(double od, double n_minus, double n_sat_exposure, double excess_noise_factor = 1.0) {
  SnrResult r;
  r.n_plus = invert_od(od, n_minus, n_sat_exposure);
  r.od_noise = od_noise(r.n_plus, n_sat_exposure, excess_noise_factor);
  r.snr = od / r.od_noise;
  const double f = std::sqrt(excess_noise_factor);
  r.snr_low_intensity = std::sqrt(n_minus) * std::exp(-od / 2) * od / f;
  r.snr_high_intensity = n_sat_exposure / std::sqrt(n_minus) * od / f;
  return r;
}

// Probe level minimizing the OD noise at a given OD, by golden-section search in ln N-.
inline double optimal_probe_counts(double od, double n_sat_exposure, double lo_factor = 1e-3, double hi_factor = 1e3) {
  auto f = [&](double x) {
    const double nm = std::exp(x);
    return od_noise(invert_od(od, nm, n_sat_exposure), n_sat_exposure);
  };
  double a = std::log(n_sat_exposure * lo_factor), b = std::log(n_sat_exposure * hi_factor);
  const double gr = (std::sqrt(5.0) - 1) / 2;
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > 1e-10) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = f(d);
    }
  }
  return std::exp(0.5 * (a + b));
}

}  // namespace ramseycal
