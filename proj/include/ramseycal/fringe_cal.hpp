#pragma once

// N_sat calibration from Ramsey fringe campaigns.
//
// Intensity normalization: a probe recorded as n_adu counts/pixel over an
// exposure of T microseconds has s = n_adu / (N_sat * T). T defaults to the
// commanded pulse duration t_p; ProbeMeta::n_adu_exposure_s overrides it when
// the probe was imaged for a different duration than it was applied.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ramseycal/constants.hpp"
#include "ramseycal/datasets.hpp"
#include "ramseycal/errors.hpp"
#include "ramseycal/fits.hpp"
#include "ramseycal/least_squares.hpp"
#include "ramseycal/parallel.hpp"
#include "ramseycal/physics.hpp"

namespace ramseycal {

struct PhasePoint {
  double phi = 0;        // wrapped to (-pi, pi]
  double phi_sigma = 0;
  double n_adu = 0;
  double n_adu_exposure_s = 0;  // 0 means t_p
  double delta_bar = 0;
  double t_p = 0;
  // fringe diagnostics
  double contrast = 0;
  double center_shift = 0;

  double exposure() const { return n_adu_exposure_s > 0 ? n_adu_exposure_s : t_p; }
  // s * N_sat, i.e. intensity in counts/pixel/us
  double counts_per_us() const { return n_adu == 0 ? 0.0 : n_adu / (exposure() / kMicrosecond); }
};

struct FringeFailure {
  std::size_t index = 0;
  std::string message;
};

struct PhaseExtraction {
  std::vector<PhasePoint> points;
  std::vector<FringeFailure> failures;
};

inline PhaseExtraction extract_phases(const std::vector<FringeDataset>& campaign, std::size_t workers = 1) {
  std::vector<PhasePoint> pts(campaign.size());
  std::vector<std::string> err(campaign.size());
  parallel_for(campaign.size(), workers, [&](std::size_t i) {
    try {
      const auto& ds = campaign[i];
      const auto f = fit_fringe(ds);
      if (!f.fit.converged) {
        err[i] = "fringe fit did not converge: " + f.fit.diagnostic;
        return;
      }
      PhasePoint p;
      p.phi = f.params.phase;
      p.phi_sigma = f.fit.sigma(1);
      p.n_adu = ds.probe.n_adu;
      p.n_adu_exposure_s = ds.probe.n_adu_exposure_s;
      p.delta_bar = ds.probe.delta_bar;
      p.t_p = ds.probe.t_p;
      p.contrast = f.params.contrast;
      p.center_shift = f.params.center_shift;
      pts[i] = p;
    } catch (const std::exception& e) {
      err[i] = e.what();
    }
  });
  PhaseExtraction out;
  for (std::size_t i = 0; i < campaign.size(); ++i) {
    if (err[i].empty()) out.points.push_back(pts[i]);
    else out.failures.push_back({i, err[i]});
  }
  return out;
}

// Light-induced phase of a point, without phi0, for a given N_sat and dead time.
inline double model_phase(const PhasePoint& p, double n_sat, double dt0, const AtomSpec& atom) {
  if (p.n_adu == 0) return 0.0;
  ProbePulse pulse{p.counts_per_us() / n_sat, p.delta_bar, p.t_p, dt0};
  return ramsey_phase_full(pulse, atom);
}

struct JointFitOptions {
  bool fit_dt0 = false;
  double dt0 = 0;          // fixed dead time, or the starting value when fitted, s
  bool weighted = true;    // inverse-variance weights from phi_sigma
  double sigma_floor = 1e-6;
  double n_sat_min = 0.5;  // scan range for the initial guess
  double n_sat_max = 1e4;
  int min_axes = 2;
  LsqOptions lsq;
};

struct NsatCalibration {
  bool identifiable = true;
  double n_sat = 0, n_sat_sigma = 0;
  double phi0 = 0, phi0_sigma = 0;
  double dt0 = 0, dt0_sigma = 0;
  bool dt0_fitted = false;
  Eigen::MatrixXd covariance;  // order: n_sat, phi0[, dt0 in s]
  double residual_rms = 0;     // rad, unweighted circular residuals
  std::size_t n_points = 0;
  FitResult fit;
  std::string diagnostic;
};

namespace detail {

inline int axes_spanned(const std::vector<PhasePoint>& pts) {
  auto distinct = [&](auto key) {
    std::vector<double> v;
    for (const auto& p : pts)
      if (p.n_adu > 0) v.push_back(key(p));
    std::sort(v.begin(), v.end());
    int count = v.empty() ? 0 : 1;
    for (std::size_t i = 1; i < v.size(); ++i)
      if (v[i] - v[i - 1] > 1e-9 * std::max(std::abs(v[i]), 1e-300)) ++count;
    return count;
  };
  int axes = 0;
  axes += distinct([](const PhasePoint& p) { return p.counts_per_us(); }) >= 2;
  axes += distinct([](const PhasePoint& p) { return p.delta_bar; }) >= 2;
  axes += distinct([](const PhasePoint& p) { return p.t_p; }) >= 2;
  return axes;
}

inline double weighted_circular_mean(const std::vector<double>& angles, const std::vector<double>& w) {
  double c = 0, s = 0;
  for (std::size_t i = 0; i < angles.size(); ++i) {
    c += w[i] * std::cos(angles[i]);
    s += w[i] * std::sin(angles[i]);
  }
  return std::atan2(s, c);
}

}  // namespace detail

// Joint fit of (N_sat, phi0[, dt0]) against the wrapped phase model. Leakage
// points (n_adu = 0) only constrain phi0.
inline NsatCalibration joint_fit_nsat(const std::vector<PhasePoint>& points,
                                      const std::vector<PhasePoint>& leakage, const AtomSpec& atom,
                                      const JointFitOptions& opt = {}) {
  atom.validate();
  std::vector<PhasePoint> all = points;
  for (auto p : leakage) {
    p.n_adu = 0;
    all.push_back(p);
  }
  if (all.empty()) throw FitError("joint_fit_nsat: no phase points");
  for (const auto& p : all) {
    if (!(p.n_adu >= 0)) throw DomainError("joint_fit_nsat: negative n_adu");
    if (p.n_adu > 0 && (p.delta_bar == 0 || !(p.exposure() > 0)))
      throw DomainError("joint_fit_nsat: point needs nonzero detuning and exposure");
  }

  const std::size_t m = all.size();
  std::vector<double> w(m, 1.0);
  if (opt.weighted)
    for (std::size_t i = 0; i < m; ++i) {
      const double s = all[i].phi_sigma;
      w[i] = 1.0 / (std::isfinite(s) ? std::max(s, opt.sigma_floor) : opt.sigma_floor);
    }

  NsatCalibration cal;
  cal.n_points = m;
  cal.dt0 = opt.dt0;

  const bool any_light = std::any_of(all.begin(), all.end(), [](const PhasePoint& p) { return p.n_adu > 0; });
  if (!any_light) {
    // Only phi0 is constrained.
    std::vector<double> ang, ww;
    for (std::size_t i = 0; i < m; ++i) {
      ang.push_back(all[i].phi);
      ww.push_back(w[i] * w[i]);
    }
    cal.identifiable = false;
    cal.n_sat = cal.n_sat_sigma = std::numeric_limits<double>::quiet_NaN();
    cal.phi0 = detail::weighted_circular_mean(ang, ww);
    double ss = 0, sw = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = wrap_phase(all[i].phi - cal.phi0);
      ss += d * d;
      sw += ww[i];
    }
    cal.residual_rms = std::sqrt(ss / static_cast<double>(m));
    cal.phi0_sigma = m > 1 ? cal.residual_rms / std::sqrt(static_cast<double>(m - 1)) : 0.0;
    cal.diagnostic = "N_sat unidentifiable: all points have zero probe intensity";
    return cal;
  }

  const int axes = detail::axes_spanned(all);
  if (axes < opt.min_axes)
    throw FitError("joint_fit_nsat: points span " + std::to_string(axes) + " of the intensity, detuning and " +
                   "pulse-time axes; need " + std::to_string(opt.min_axes));
  double min_tp = std::numeric_limits<double>::infinity();
  for (const auto& p : all)
    if (p.n_adu > 0) min_tp = std::min(min_tp, p.t_p);
  if (opt.fit_dt0) {
    std::vector<PhasePoint> lit;
    for (const auto& p : all)
      if (p.n_adu > 0) lit.push_back(p);
    std::sort(lit.begin(), lit.end(), [](auto& a, auto& b) { return a.t_p < b.t_p; });
    if (lit.front().t_p == lit.back().t_p)
      throw FitError("joint_fit_nsat: floating dt0 requires a pulse-time sweep");
  }
  if (!(opt.dt0 >= 0) || opt.dt0 >= min_tp) throw DomainError("joint_fit_nsat: dt0 must lie in [0, min t_p)");

  // Phase without phi0 is K_i * t_m,i / N_sat.
  std::vector<double> k(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    if (all[i].n_adu > 0) {
      ProbePulse unit{all[i].counts_per_us(), all[i].delta_bar, 1.0, 0.0};
      k[i] = ramsey_phase_full(unit, atom);
    }
  auto t_m = [&](std::size_t i, double dt0) { return std::max(all[i].t_p - dt0, 0.0); };

  // Initial guess: scan u = 1/N_sat with phi0 at its closed-form optimum.
  struct Candidate {
    double cost, u, phi0, dt0;
  };
  std::vector<double> dt0_grid{opt.dt0};
  if (opt.fit_dt0)
    for (int j = 0; j < 16; ++j) dt0_grid.push_back(min_tp * j / 16.0);
  std::vector<Candidate> cand;
  for (double d0 : dt0_grid) {
    double kmax = 0;
    for (std::size_t i = 0; i < m; ++i) kmax = std::max(kmax, std::abs(k[i] * t_m(i, d0)));
    const double u_lo = 1.0 / opt.n_sat_max, u_hi = 1.0 / opt.n_sat_min;
    const double du = kmax > 0 ? 0.1 / kmax : (u_hi - u_lo);
    const auto steps = static_cast<long>(std::ceil((u_hi - u_lo) / du));
    std::vector<double> ang(m), ww(m);
    for (std::size_t i = 0; i < m; ++i) ww[i] = w[i] * w[i];
    std::vector<Candidate> trail;
    for (long j = 0; j <= steps; ++j) {
      const double u = u_lo + (u_hi - u_lo) * static_cast<double>(j) / static_cast<double>(steps);
      for (std::size_t i = 0; i < m; ++i) ang[i] = all[i].phi - k[i] * t_m(i, d0) * u;
      const double ph0 = detail::weighted_circular_mean(ang, ww);
      double cost = 0;
      for (std::size_t i = 0; i < m; ++i) cost += ww[i] * (1.0 - std::cos(ang[i] - ph0));
      trail.push_back({cost, u, ph0, d0});
    }
    // keep local minima only
    for (std::size_t j = 0; j < trail.size(); ++j) {
      const bool left = j == 0 || trail[j].cost <= trail[j - 1].cost;
      const bool right = j + 1 == trail.size() || trail[j].cost <= trail[j + 1].cost;
      if (left && right) cand.push_back(trail[j]);
    }
  }
  std::sort(cand.begin(), cand.end(), [](auto& a, auto& b) { return a.cost < b.cost; });
  if (cand.size() > 4) cand.resize(4);

  const Eigen::Index np = opt.fit_dt0 ? 3 : 2;
  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    const double d0 = opt.fit_dt0 ? p(2) * kMicrosecond : opt.dt0;
    for (std::size_t i = 0; i < m; ++i) {
      const double model = k[i] * t_m(i, d0) / p(0) + p(1);
      r(static_cast<Eigen::Index>(i)) = w[i] * wrap_phase(model - all[i].phi);
    }
  };
  auto jacobian = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    const double d0 = opt.fit_dt0 ? p(2) * kMicrosecond : opt.dt0;
    for (std::size_t i = 0; i < m; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      J(row, 0) = -w[i] * k[i] * t_m(i, d0) / (p(0) * p(0));
      J(row, 1) = w[i];
      if (opt.fit_dt0) J(row, 2) = all[i].t_p > d0 ? -w[i] * k[i] * kMicrosecond / p(0) : 0.0;
    }
  };
  Bounds b = Bounds::unbounded(np);
  b.lower(0) = std::min(opt.n_sat_min, 1.0 / cand.front().u) * 0.5;
  b.upper(0) = opt.n_sat_max * 2.0;
  if (opt.fit_dt0) {
    b.lower(2) = 0.0;
    b.upper(2) = min_tp / kMicrosecond;
  }
  if (static_cast<Eigen::Index>(m) < np) throw FitError("joint_fit_nsat: fewer points than parameters");

  FitResult best;
  bool have = false;
  for (const auto& c : cand) {
    Eigen::VectorXd p0(np);
    p0(0) = 1.0 / c.u;
    p0(1) = c.phi0;
    if (opt.fit_dt0) p0(2) = std::min(c.dt0 / kMicrosecond, 0.999 * b.upper(2));
    p0 = b.clamp(p0);
    FitResult f = least_squares_residuals(residual, jacobian, p0, static_cast<Eigen::Index>(m), opt.lsq, b);
    if (!have || f.cost < best.cost) {
      best = std::move(f);
      have = true;
    }
  }

  cal.fit = best;
  cal.n_sat = best.params(0);
  cal.n_sat_sigma = best.sigma(0);
  cal.phi0 = wrap_phase(best.params(1));
  cal.phi0_sigma = best.sigma(1);
  cal.dt0_fitted = opt.fit_dt0;
  Eigen::MatrixXd cov = best.covariance;
  if (opt.fit_dt0) {
    cal.dt0 = best.params(2) * kMicrosecond;
    cal.dt0_sigma = best.sigma(2) * kMicrosecond;
    cov.row(2) *= kMicrosecond;
    cov.col(2) *= kMicrosecond;
  }
  cal.covariance = cov;
  double ss = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double d = wrap_phase(k[i] * t_m(i, cal.dt0) / cal.n_sat + cal.phi0 - all[i].phi);
    ss += d * d;
  }
  cal.residual_rms = std::sqrt(ss / static_cast<double>(m));
  cal.diagnostic = best.diagnostic;
  return cal;
}

// ---------------------------------------------------------------------------
// Sawtooth collapse: -phi against V_ac t_m / hbar should follow a slope-1 line mod 2 pi.

struct SawtoothOptions {
  // A point is excluded when it is both near resonance and intense.
  double near_resonant_delta_bar = 0;
  double high_intensity_s = std::numeric_limits<double>::infinity();
};

struct SawtoothRow {
  double x = 0;          // V_ac t_m / hbar from the calibrated model, rad
  double y = 0;          // -(phi - phi0) wrapped to [0, 2 pi)
  double deviation = 0;  // circular y - x, (-pi, pi]
  double s = 0;
  double delta_bar = 0;
  double t_p = 0;
  bool excluded = false;
};

struct SawtoothCollapse {
  std::vector<SawtoothRow> rows;
  double rms_deviation = 0;  // rad, over included rows
  std::size_t n_included = 0;
};

inline SawtoothCollapse sawtooth_collapse(const std::vector<PhasePoint>& points, const NsatCalibration& cal,
                                          const AtomSpec& atom, const SawtoothOptions& opt = {}) {
  if (!cal.identifiable || !(cal.n_sat > 0)) throw DomainError("sawtooth_collapse: calibration has no N_sat");
  SawtoothCollapse out;
  double ss = 0;
  for (const auto& p : points) {
    if (p.n_adu <= 0) continue;
    SawtoothRow r;
    r.s = p.counts_per_us() / cal.n_sat;
    r.delta_bar = p.delta_bar;
    r.t_p = p.t_p;
    r.x = -model_phase(p, cal.n_sat, cal.dt0, atom);
    r.y = wrap_phase_positive(-(p.phi - cal.phi0));
    r.deviation = wrap_phase(r.y - r.x);
    r.excluded = std::abs(p.delta_bar) < opt.near_resonant_delta_bar && r.s > opt.high_intensity_s;
    if (!r.excluded) {
      ss += r.deviation * r.deviation;
      ++out.n_included;
    }
    out.rows.push_back(r);
  }
  out.rms_deviation = out.n_included ? std::sqrt(ss / static_cast<double>(out.n_included)) : 0.0;
  return out;
}

}  // namespace ramseycal
