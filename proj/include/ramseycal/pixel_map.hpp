#pragma once

// Spatial probe-intensity maps from TOF shots: register the two Stern-Gerlach
// clouds, rescale to in situ coordinates, form f2 images, remove imaging
// stripes, fit a fringe per pixel and finally a local N_sat per pixel.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <optional>
#include <string>
#include <vector>

#include <boost/numeric/odeint.hpp>
#include <unsupported/Eigen/FFT>

#include "ramseycal/errors.hpp"
#include "ramseycal/fits.hpp"
#include "ramseycal/fringe_cal.hpp"
#include "ramseycal/image.hpp"
#include "ramseycal/parallel.hpp"
#include "ramseycal/physics.hpp"
#include "ramseycal/synth.hpp"

namespace ramseycal {

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Cloud registration

struct CenterOptions {
  Eigen::Index half_width = 36;   // registered subimage is (2 hw + 1) x (2 hh + 1)
  Eigen::Index half_height = 30;
  double threshold_fraction = 0.02;  // of the peak row sum, for separating the clouds
  Eigen::Index smooth_rows = 5;
  // Stern-Gerlach displacement of cloud 2 relative to cloud 1, pixels. When set,
  // both clouds are placed by fitting one TF profile to n1 + n2, which stays
  // unbiased when f2 varies across the cloud; otherwise each cloud is centred
  // on its own TF fit, which is only unbiased for spatially uniform f2.
  std::optional<std::array<double, 2>> sg_displacement;
  int max_iterations = 20;
  double tolerance_px = 1e-4;
};

// Cloud 1 is the upper one (smaller y), cloud 2 the lower one.
struct RegisteredPair {
  Image n1, n2;  // background-subtracted counts, cloud center at (hw, hh)
  ThomasFermiFit fit1, fit2;  // individual fits, full-image coordinates
  ThomasFermiFit combined;    // fit to n1 + n2 in subimage coordinates
  double center_x = 0, center_y = 0;  // cloud 1 position used for registration
  int iterations = 0;                 // common-mode refinement steps
};

namespace detail {

// Row splitting the two heaviest above-threshold segments of the row profile.
inline Eigen::Index split_row(const Image& img, const CenterOptions& opt) {
  const Eigen::Index R = img.rows();
  const Eigen::VectorXd raw = img.rowwise().sum().matrix();
  Eigen::VectorXd prof(R);
  const Eigen::Index h = std::max<Eigen::Index>(0, opt.smooth_rows / 2);
  for (Eigen::Index y = 0; y < R; ++y) {
    const Eigen::Index a = std::max<Eigen::Index>(0, y - h), b = std::min(R - 1, y + h);
    prof(y) = raw.segment(a, b - a + 1).mean();
  }
  const double base = median(std::vector<double>(prof.data(), prof.data() + R));
  prof.array() -= base;
  const double thresh = opt.threshold_fraction * prof.maxCoeff();
  struct Segment {
    Eigen::Index begin, end;
    double mass;
  };
  std::vector<Segment> segs;
  for (Eigen::Index y = 0; y < R;) {
    if (prof(y) <= thresh) {
      ++y;
      continue;
    }
    Segment s{y, y, 0};
    while (y < R && prof(y) > thresh) s.mass += prof(y++);
    s.end = y;
    if (s.end - s.begin >= 3) segs.push_back(s);
  }
  if (segs.size() < 2) throw FitError("center_clouds: could not resolve two clouds in the row profile");
  std::partial_sort(segs.begin(), segs.begin() + 2, segs.end(),
                    [](const Segment& a, const Segment& b) { return a.mass > b.mass; });
  const Segment& a = segs[0].begin < segs[1].begin ? segs[0] : segs[1];
  const Segment& b = segs[0].begin < segs[1].begin ? segs[1] : segs[0];
  return (a.end + b.begin) / 2;
}

inline Image sample_around(const Image& img, double cx, double cy, Eigen::Index hw, Eigen::Index hh,
                           double offset) {
  Image out(2 * hh + 1, 2 * hw + 1);
  for (Eigen::Index y = 0; y < out.rows(); ++y)
    for (Eigen::Index x = 0; x < out.cols(); ++x) {
      const double sx = cx + static_cast<double>(x - hw), sy = cy + static_cast<double>(y - hh);
      const bool inside = sx >= 0 && sy >= 0 && sx <= static_cast<double>(img.cols() - 1) &&
                          sy <= static_cast<double>(img.rows() - 1);
      out(y, x) = inside ? sample_bilinear(img, sx, sy) - offset : 0.0;
    }
  return out;
}

}  // namespace detail

inline RegisteredPair center_clouds(const Image& shot, const CenterOptions& opt = {}) {
  if (opt.half_width < 1 || opt.half_height < 1) throw DomainError("center_clouds: ROI half sizes must be >= 1");
  const Eigen::Index split = detail::split_row(shot, opt);
  RegisteredPair out;
  auto fit_part = [&](Eigen::Index y0, Eigen::Index n, int which) {
    const Image part = shot.middleRows(y0, n);
    ThomasFermiFit f;
    try {
      f = fit_thomas_fermi2d(part);
    } catch (const FitError& e) {
      throw FitError("center_clouds: cloud " + std::to_string(which) + ": " + e.what());
    }
    if (!f.fit.converged)
      throw FitError("center_clouds: cloud " + std::to_string(which) + " fit did not converge: " + f.fit.diagnostic);
    f.model.center_y += static_cast<double>(y0);
    return f;
  };
  out.fit1 = fit_part(0, split, 1);
  out.fit2 = fit_part(split, shot.rows() - split, 2);
  // one background level for both clouds keeps n1 and n2 on a common footing
  const double bg = 0.5 * (out.fit1.model.offset + out.fit2.model.offset);
  const auto& m1 = out.fit1.model;
  const auto& m2 = out.fit2.model;
  if (!opt.sg_displacement) {
    out.center_x = m1.center_x;
    out.center_y = m1.center_y;
    out.n1 = detail::sample_around(shot, m1.center_x, m1.center_y, opt.half_width, opt.half_height, bg);
    out.n2 = detail::sample_around(shot, m2.center_x, m2.center_y, opt.half_width, opt.half_height, bg);
    out.combined = fit_thomas_fermi2d(Image(out.n1 + out.n2));
    return out;
  }
  const auto [dx, dy] = *opt.sg_displacement;
  // start from the atom-weighted mean of the two individual estimates
  const double w1 = std::max(m1.integrated(), 0.0), w2 = std::max(m2.integrated(), 0.0);
  const double wsum = w1 + w2 > 0 ? w1 + w2 : 1.0;
  double cx = (w1 * m1.center_x + w2 * (m2.center_x - dx)) / wsum;
  double cy = (w1 * m1.center_y + w2 * (m2.center_y - dy)) / wsum;
  const double hw = static_cast<double>(opt.half_width), hh = static_cast<double>(opt.half_height);
  for (out.iterations = 1;; ++out.iterations) {
    out.n1 = detail::sample_around(shot, cx, cy, opt.half_width, opt.half_height, bg);
    out.n2 = detail::sample_around(shot, cx + dx, cy + dy, opt.half_width, opt.half_height, bg);
    try {
      out.combined = fit_thomas_fermi2d(Image(out.n1 + out.n2));
    } catch (const FitError& e) {
      throw FitError(std::string("center_clouds: combined profile: ") + e.what());
    }
    const double ex = out.combined.model.center_x - hw, ey = out.combined.model.center_y - hh;
    if (std::hypot(ex, ey) < opt.tolerance_px) break;
    if (out.iterations == opt.max_iterations)
      throw FitError("center_clouds: common-mode centring did not converge");
    cx += ex;
    cy += ey;
  }
  out.center_x = cx;
  out.center_y = cy;
  return out;
}

// Displacement of cloud 2 relative to cloud 1 from shots with spatially uniform
// f2 (for example without probe light), mean over shots.
inline std::array<double, 2> estimate_sg_displacement(const std::vector<Image>& reference,
                                                      CenterOptions opt = {}) {
  if (reference.empty()) throw FitError("estimate_sg_displacement: no reference shots");
  opt.sg_displacement.reset();
  double dx = 0, dy = 0;
  for (const auto& img : reference) {
    const auto p = center_clouds(img, opt);
    dx += p.fit2.model.center_x - p.fit1.model.center_x;
    dy += p.fit2.model.center_y - p.fit1.model.center_y;
  }
  const auto n = static_cast<double>(reference.size());
  return {dx / n, dy / n};
}

// ---------------------------------------------------------------------------
// TOF -> in situ

// Castin-Dum scaling: lambda_i'' = w_i^2 / (lambda_i lambda_x lambda_y lambda_z),
// lambda_i(0) = 1, lambda_i'(0) = 0.
inline std::array<double, 3> castin_dum_scales(const std::array<double, 3>& omega, double t, double tol = 1e-12) {
  for (double w : omega)
    if (!(w > 0)) throw DomainError("castin_dum_scales: trap frequencies must be positive");
  if (!(t >= 0)) throw DomainError("castin_dum_scales: time must be non-negative");
  if (t == 0) return {1.0, 1.0, 1.0};
  namespace ode = boost::numeric::odeint;
  using State = std::array<double, 6>;
  auto rhs = [&](const State& s, State& ds, double) {
    const double prod = s[0] * s[1] * s[2];
    for (int i = 0; i < 3; ++i) {
      ds[i] = s[3 + i];
      ds[3 + i] = omega[i] * omega[i] / (s[i] * prod);
    }
  };
  State s{1, 1, 1, 0, 0, 0};
  const double w_max = *std::max_element(omega.begin(), omega.end());
  std::size_t steps = 0;
  try {
    steps = ode::integrate_adaptive(ode::make_controlled(tol, tol, ode::runge_kutta_dopri5<State>()), rhs, s, 0.0,
                                    t, std::min(t, 1e-3 / w_max));
  } catch (const std::exception& e) {
    throw FitError(std::string("castin_dum_scales: integrator failed: ") + e.what());
  }
  for (double v : s)
    if (!std::isfinite(v))
      throw FitError("castin_dum_scales: non-finite state after " + std::to_string(steps) + " steps");
  return {s[0], s[1], s[2]};
}

// Compresses the vertical axis by lambda_y, integrating counts over each output
// bin so the total is preserved. `oversample` output rows per in situ TOF-pixel
// height; oversample = lambda_y keeps the row count. Columns are untouched.
inline Image rescale_to_insitu(const Image& img, const std::array<double, 3>& scales, double oversample = 1.0) {
  const double ly = scales[1];
  if (!(ly >= 1.0)) throw DomainError("rescale_to_insitu: the vertical scale must be >= 1");
  if (!(oversample > 0)) throw DomainError("rescale_to_insitu: oversample must be positive");
  const double bin = ly / oversample;  // input rows per output row
  const double rows_in = static_cast<double>(img.rows());
  const auto rows_out = static_cast<Eigen::Index>(std::ceil(rows_in / bin - 1e-9));
  Image out = Image::Zero(rows_out, img.cols());
  for (Eigen::Index k = 0; k < rows_out; ++k) {
    const double a = static_cast<double>(k) * bin, b = std::min(rows_in, a + bin);
    for (auto r = static_cast<Eigen::Index>(std::floor(a)); r < img.rows() && static_cast<double>(r) < b; ++r) {
      const double w = std::min(b, static_cast<double>(r + 1)) - std::max(a, static_cast<double>(r));
      if (w > 0) out.row(k) += w * img.row(r);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// f2 maps

struct PixelScale {
  double x = 1, y = 1;  // um / pixel
};

struct F2Map {
  Image values;
  Mask mask;  // true where the ratio was in range
  PixelScale pixel_scale;
};

inline constexpr double kF2Low = -0.1, kF2High = 1.1, kF2Fill = 0.5;

inline F2Map compute_f2_map(const Image& n1, const Image& n2, PixelScale scale = {}) {
  if (n1.rows() != n2.rows() || n1.cols() != n2.cols()) throw DomainError("compute_f2_map: shape mismatch");
  F2Map m;
  m.values.resize(n1.rows(), n1.cols());
  m.mask.resize(n1.rows(), n1.cols());
  m.pixel_scale = scale;
  for (Eigen::Index i = 0; i < n1.size(); ++i) {
    const double d = n1(i) + n2(i);
    const double f = d != 0 ? n2(i) / d : std::numeric_limits<double>::quiet_NaN();
    const bool ok = std::isfinite(f) && f >= kF2Low && f <= kF2High;
    m.mask(i) = ok;
    m.values(i) = ok ? std::clamp(f, 0.0, 1.0) : kF2Fill;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Stripe removal

// Elliptical notch centred on (kx, ky) in cycles / pixel, mirrored to (-kx, -ky).
// The notch is 1 inside radius (1 - taper) and falls to 0 at the ellipse with a
// cosine (Tukey) edge. Zero semi-axes make the band empty.
struct StopBand {
  double kx = 0, ky = 0;
  double semi_x = 0, semi_y = 0;
  double taper = 0.5;
};

namespace detail {

inline double fft_freq(Eigen::Index i, Eigen::Index n) {
  const Eigen::Index k = i < (n + 1) / 2 ? i : i - n;
  return static_cast<double>(k) / static_cast<double>(n);
}

inline double tukey_notch(double rho, double taper) {
  if (rho >= 1.0) return 0.0;
  if (taper <= 0 || rho <= 1.0 - taper) return 1.0;
  return 0.5 * (1.0 + std::cos(kPi * (rho - (1.0 - taper)) / taper));
}

using CImage = Eigen::Array<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline CImage fft2(const CImage& in, bool inverse) {
  Eigen::FFT<double> fft;
  CImage out = in;
  std::vector<std::complex<double>> a, b;
  for (Eigen::Index y = 0; y < out.rows(); ++y) {
    a.assign(out.row(y).data(), out.row(y).data() + out.cols());
    if (inverse) fft.inv(b, a);
    else fft.fwd(b, a);
    for (Eigen::Index x = 0; x < out.cols(); ++x) out(y, x) = b[static_cast<std::size_t>(x)];
  }
  a.resize(static_cast<std::size_t>(out.rows()));
  for (Eigen::Index x = 0; x < out.cols(); ++x) {
    for (Eigen::Index y = 0; y < out.rows(); ++y) a[static_cast<std::size_t>(y)] = out(y, x);
    if (inverse) fft.inv(b, a);
    else fft.fwd(b, a);
    for (Eigen::Index y = 0; y < out.rows(); ++y) out(y, x) = b[static_cast<std::size_t>(y)];
  }
  return out;
}

}  // namespace detail

inline Image notch_window(Eigen::Index rows, Eigen::Index cols, const std::vector<StopBand>& bands) {
  Image w = Image::Ones(rows, cols);
  for (const auto& b : bands) {
    if (!(b.taper >= 0 && b.taper <= 1)) throw DomainError("stop band taper must lie in [0, 1]");
    if (b.semi_x < 0 || b.semi_y < 0) throw DomainError("stop band semi-axes must be >= 0");
    if (b.semi_x == 0 || b.semi_y == 0) continue;
    auto notch = [&](double fx, double fy) {
      const double u1 = (fx - b.kx) / b.semi_x, v1 = (fy - b.ky) / b.semi_y;
      const double u2 = (fx + b.kx) / b.semi_x, v2 = (fy + b.ky) / b.semi_y;
      const double n1 = detail::tukey_notch(std::sqrt(u1 * u1 + v1 * v1), b.taper);
      const double n2 = detail::tukey_notch(std::sqrt(u2 * u2 + v2 * v2), b.taper);
      return (1.0 - n1) * (1.0 - n2);
    };
    if (notch(0.0, 0.0) < 1.0) throw DomainError("stripe_filter: stop band covers the DC component");
    for (Eigen::Index y = 0; y < rows; ++y)
      for (Eigen::Index x = 0; x < cols; ++x)
        w(y, x) *= notch(detail::fft_freq(x, cols), detail::fft_freq(y, rows));
  }
  return w;
}

inline Image stripe_filter(const Image& img, const std::vector<StopBand>& bands) {
  const Image w = notch_window(img.rows(), img.cols(), bands);
  if ((w == 1.0).all()) return img;
  detail::CImage c = img.cast<std::complex<double>>();
  c = detail::fft2(c, false);
  c *= w.cast<std::complex<double>>();
  return detail::fft2(c, true).real();
}

inline F2Map stripe_filter(const F2Map& map, const std::vector<StopBand>& bands) {
  F2Map out = map;
  out.values = stripe_filter(map.values, bands);
  return out;
}

// Mean-subtracted power spectrum with DC at the center, for choosing stop bands.
// Axis k maps to frequency (k - n/2) / n cycles / pixel.
inline Image power_spectrum(const Image& img) {
  detail::CImage c = (img - img.mean()).cast<std::complex<double>>();
  c = detail::fft2(c, false);
  const Eigen::Index R = img.rows(), C = img.cols();
  Image out(R, C);
  for (Eigen::Index y = 0; y < R; ++y)
    for (Eigen::Index x = 0; x < C; ++x) out((y + R / 2) % R, (x + C / 2) % C) = std::norm(c(y, x));
  return out;
}

// ---------------------------------------------------------------------------
// Per-pixel fringe and N_sat fits

struct PhaseMapOptions {
  std::size_t min_points = 4;
  double min_contrast = 0.1;
};

struct PhaseMap {
  Image phi;    // rad, (-pi, pi]
  Image sigma;  // rad
  Image contrast;
  Mask valid;
};

inline PhaseMap fit_phase_map(const std::vector<F2Map>& maps, const std::vector<double>& dphi_grid,
                              const PhaseMapOptions& opt = {}, std::size_t workers = 1) {
  if (maps.size() != dphi_grid.size()) throw DomainError("fit_phase_map: one map per grid phase required");
  if (maps.size() < std::max<std::size_t>(4, opt.min_points))
    throw FitError("fit_phase_map: need at least 4 phase-grid points");
  const Eigen::Index R = maps[0].values.rows(), C = maps[0].values.cols();
  for (const auto& m : maps)
    if (m.values.rows() != R || m.values.cols() != C) throw DomainError("fit_phase_map: map shapes differ");
  PhaseMap out;
  out.phi = Image::Zero(R, C);
  out.sigma = Image::Constant(R, C, std::numeric_limits<double>::infinity());
  out.contrast = Image::Zero(R, C);
  out.valid = Mask::Constant(R, C, false);
  parallel_for(static_cast<std::size_t>(R), workers, [&](std::size_t yy) {
    const auto y = static_cast<Eigen::Index>(yy);
    FringeDataset ds;
    for (Eigen::Index x = 0; x < C; ++x) {
      ds.dphi.clear();
      ds.f2.clear();
      for (std::size_t k = 0; k < maps.size(); ++k)
        if (maps[k].mask(y, x)) {
          ds.dphi.push_back(dphi_grid[k]);
          ds.f2.push_back(maps[k].values(y, x));
        }
      if (ds.f2.size() < opt.min_points) continue;
      try {
        const FringeFit f = fit_fringe(ds);
        if (!std::isfinite(f.params.phase) || f.params.contrast < opt.min_contrast) continue;
        out.phi(y, x) = f.params.phase;
        out.sigma(y, x) = f.fit.sigma.size() > 1 ? f.fit.sigma(1) : std::numeric_limits<double>::infinity();
        out.contrast(y, x) = f.params.contrast;
        out.valid(y, x) = true;
      } catch (const FitError&) {
      }
    }
  });
  return out;
}

struct RoiEllipse {
  double cx = 0, cy = 0;  // pixels
  double ax = 0, ay = 0;  // semi-axes, pixels

  bool contains(double x, double y) const {
    if (!(ax > 0 && ay > 0)) return false;
    const double u = (x - cx) / ax, v = (y - cy) / ay;
    return u * u + v * v <= 1.0;
  }
};

struct IntensityMap {
  Image frac;        // fractional intensity difference, N_sat / N_sat(local) - 1
  Image sigma;       // 1-sigma of frac
  Image n_sat_local; // counts / pixel / us
  Mask valid;
  RoiEllipse roi_ellipse;
  double global_n_sat = 0;
  double roi_mean = 0, roi_rms = 0;  // over valid pixels inside the ellipse
  std::size_t roi_pixels = 0;
};

struct NsatMapOptions {
  bool share_phi0 = true;      // false fits a local phi0 as well
  std::size_t min_levels = 3;
  double scan_low = 0.6, scan_high = 1.6;  // initial-guess scan, fractions of the global N_sat
  std::size_t scan_points = 41;
};

struct LocalNsat {
  bool ok = false;
  double n_sat = 0, n_sat_sigma = 0, phi0 = 0;
};

namespace detail {

inline LocalNsat fit_local_nsat(const std::vector<double>& phi, const std::vector<PhasePoint>& levels,
                                const AtomSpec& atom, const NsatCalibration& global, const NsatMapOptions& opt) {
  LocalNsat out;
  const std::size_t n = phi.size();
  const std::size_t n_par = opt.share_phi0 ? 1 : 2;
  if (n < std::max(opt.min_levels, n_par + 1)) return out;
  const double G = global.n_sat;
  auto model = [&](std::size_t k, double N) { return model_phase(levels[k], N, global.dt0, atom); };
  auto cost_at = [&](double N, double phi0) {
    double c = 0;
    for (std::size_t k = 0; k < n; ++k) c += std::pow(wrap_phase(phi[k] - model(k, N) - phi0), 2);
    return c;
  };
  double best = G, best_cost = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < opt.scan_points; ++i) {
    const double N = G * (opt.scan_low + (opt.scan_high - opt.scan_low) * static_cast<double>(i) /
                                             static_cast<double>(std::max<std::size_t>(1, opt.scan_points - 1)));
    const double c = cost_at(N, global.phi0);
    if (c < best_cost) {
      best_cost = c;
      best = N;
    }
  }
  Eigen::VectorXd p0(static_cast<Eigen::Index>(n_par));
  p0(0) = best;
  if (n_par == 2) p0(1) = global.phi0;
  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    const double phi0 = n_par == 2 ? p(1) : global.phi0;
    for (std::size_t k = 0; k < n; ++k) r(static_cast<Eigen::Index>(k)) = wrap_phase(phi[k] - model(k, p(0)) - phi0);
  };
  // the model is proportional to 1 / N
  auto jacobian = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    for (std::size_t k = 0; k < n; ++k) {
      const auto i = static_cast<Eigen::Index>(k);
      J(i, 0) = model(k, p(0)) / p(0);
      if (n_par == 2) J(i, 1) = -1.0;
    }
  };
  Bounds b = Bounds::unbounded(static_cast<Eigen::Index>(n_par));
  b.lower(0) = 1e-6 * G;
  const FitResult f = least_squares_residuals(residual, jacobian, p0, static_cast<Eigen::Index>(n), {}, b);
  if (!std::isfinite(f.params(0)) || f.singular) return out;
  out.ok = true;
  out.n_sat = f.params(0);
  out.n_sat_sigma = f.sigma(0);
  out.phi0 = n_par == 2 ? f.params(1) : global.phi0;
  return out;
}

inline PhasePoint level_point(const ProbeMeta& m) {
  PhasePoint p;
  p.n_adu = m.n_adu;
  p.n_adu_exposure_s = m.n_adu_exposure_s;
  p.delta_bar = m.delta_bar;
  p.t_p = m.t_p;
  return p;
}

}  // namespace detail

inline IntensityMap fit_nsat_map(const std::vector<PhaseMap>& phases, const std::vector<ProbeMeta>& levels,
                                 const AtomSpec& atom, const NsatCalibration& global, const RoiEllipse& roi,
                                 const NsatMapOptions& opt = {}, std::size_t workers = 1) {
  if (phases.size() != levels.size()) throw DomainError("fit_nsat_map: one phase map per level required");
  if (levels.size() < 3) throw FitError("fit_nsat_map: need at least 3 intensity levels");
  if (!global.identifiable || !(global.n_sat > 0)) throw FitError("fit_nsat_map: global calibration is not usable");
  const Eigen::Index R = phases[0].phi.rows(), C = phases[0].phi.cols();
  for (const auto& p : phases)
    if (p.phi.rows() != R || p.phi.cols() != C) throw DomainError("fit_nsat_map: phase map shapes differ");
  std::vector<PhasePoint> all_levels;
  for (const auto& m : levels) all_levels.push_back(detail::level_point(m));

  IntensityMap out;
  out.global_n_sat = global.n_sat;
  out.roi_ellipse = roi;
  out.frac = Image::Zero(R, C);
  out.sigma = Image::Constant(R, C, std::numeric_limits<double>::infinity());
  out.n_sat_local = Image::Zero(R, C);
  out.valid = Mask::Constant(R, C, false);
  const double G = global.n_sat;
  parallel_for(static_cast<std::size_t>(R), workers, [&](std::size_t yy) {
    const auto y = static_cast<Eigen::Index>(yy);
    std::vector<double> phi;
    std::vector<PhasePoint> lv;
    for (Eigen::Index x = 0; x < C; ++x) {
      phi.clear();
      lv.clear();
      for (std::size_t k = 0; k < phases.size(); ++k)
        if (phases[k].valid(y, x)) {
          phi.push_back(phases[k].phi(y, x));
          lv.push_back(all_levels[k]);
        }
      const auto r = detail::fit_local_nsat(phi, lv, atom, global, opt);
      if (!r.ok) continue;
      out.n_sat_local(y, x) = r.n_sat;
      out.frac(y, x) = G / r.n_sat - 1.0;
      out.sigma(y, x) = G * r.n_sat_sigma / (r.n_sat * r.n_sat);
      out.valid(y, x) = true;
    }
  });
  double s = 0, s2 = 0;
  for (Eigen::Index y = 0; y < R; ++y)
    for (Eigen::Index x = 0; x < C; ++x)
      if (out.valid(y, x) && roi.contains(static_cast<double>(x), static_cast<double>(y))) {
        s += out.frac(y, x);
        s2 += out.frac(y, x) * out.frac(y, x);
        ++out.roi_pixels;
      }
  if (out.roi_pixels > 0) {
    out.roi_mean = s / static_cast<double>(out.roi_pixels);
    out.roi_rms = std::sqrt(std::max(0.0, s2 / static_cast<double>(out.roi_pixels) - out.roi_mean * out.roi_mean));
  }
  return out;
}

// Local N_sat fitted to the circular mean phase of each level over the ROI.
inline LocalNsat fit_nsat_roi_mean(const std::vector<PhaseMap>& phases, const std::vector<ProbeMeta>& levels,
                                   const AtomSpec& atom, const NsatCalibration& global, const RoiEllipse& roi,
                                   const NsatMapOptions& opt = {}) {
  std::vector<double> phi;
  std::vector<PhasePoint> lv;
  for (std::size_t k = 0; k < phases.size(); ++k) {
    std::complex<double> acc = 0;
    for (Eigen::Index y = 0; y < phases[k].phi.rows(); ++y)
      for (Eigen::Index x = 0; x < phases[k].phi.cols(); ++x)
        if (phases[k].valid(y, x) && roi.contains(static_cast<double>(x), static_cast<double>(y)))
          acc += std::polar(1.0, phases[k].phi(y, x));
    if (std::abs(acc) == 0) continue;
    phi.push_back(std::arg(acc));
    lv.push_back(detail::level_point(levels[k]));
  }
  return detail::fit_local_nsat(phi, lv, atom, global, opt);
}

// ---------------------------------------------------------------------------
// Whole pipeline over a map campaign

struct MapPipelineOptions {
  CenterOptions center;
  std::array<double, 3> trap_omega{kTwoPi * 9.61, kTwoPi * 113.9, kTwoPi * 163.2};
  double t_tof = 20e-3;
  bool rescale = true;
  double oversample = 0;            // <= 0 keeps the row count (oversample = lambda_y)
  double tof_pixel_um = 13.0 / 36;  // object-plane pixel size
  std::vector<StopBand> stop_bands;
  double roi_fraction = 0.5;  // ROI semi-axes as a fraction of the fitted TF radii
  PhaseMapOptions phase;
  NsatMapOptions nsat;
  std::size_t workers = 1;
};

struct MapPipelineResult {
  IntensityMap map;
  std::vector<PhaseMap> phases;                // per level
  std::vector<std::vector<F2Map>> f2;          // [level][dphi], after stripe filtering
  std::vector<std::string> rejected;           // one diagnostic per rejected shot
  Image power_spectrum;                        // averaged over the unfiltered f2 maps
  std::array<double, 3> scales{1, 1, 1};
  PixelScale pixel_scale;
  std::array<double, 2> sg_displacement{0, 0};
};

inline MapPipelineResult map_intensity(const MapCampaign& campaign, const NsatCalibration& global,
                                       const AtomSpec& atom, const MapPipelineOptions& opt = {}) {
  if (campaign.shots.size() != campaign.probes.size()) throw DomainError("map_intensity: malformed campaign");
  MapPipelineResult res;
  res.scales = opt.rescale ? castin_dum_scales(opt.trap_omega, opt.t_tof) : std::array<double, 3>{1, 1, 1};
  const double over = opt.oversample > 0 ? opt.oversample : res.scales[1];
  res.pixel_scale = {opt.tof_pixel_um, opt.tof_pixel_um / over};
  const double bin = res.scales[1] / over;

  // flatten shots for parallel registration
  struct Job {
    std::size_t level, dphi;
    const Image* img;
  };
  std::vector<Job> jobs;
  for (std::size_t l = 0; l < campaign.shots.size(); ++l) {
    if (campaign.shots[l].size() != campaign.dphi_grid.size()) throw DomainError("map_intensity: malformed level");
    for (std::size_t d = 0; d < campaign.shots[l].size(); ++d)
      for (const auto& img : campaign.shots[l][d]) jobs.push_back({l, d, &img});
  }
  CenterOptions center = opt.center;
  if (!center.sg_displacement) {
    if (campaign.reference.empty())
      throw FitError("map_intensity: need reference shots or a configured Stern-Gerlach displacement");
    center.sg_displacement = estimate_sg_displacement(campaign.reference, center);
  }
  res.sg_displacement = *center.sg_displacement;
  std::vector<RegisteredPair> pairs(jobs.size());
  std::vector<std::string> errors(jobs.size());
  parallel_for(jobs.size(), opt.workers, [&](std::size_t i) {
    try {
      pairs[i] = center_clouds(*jobs[i].img, center);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  const Eigen::Index H = 2 * opt.center.half_height + 1, W = 2 * opt.center.half_width + 1;
  std::vector<std::vector<Image>> sum1(campaign.shots.size()), sum2(campaign.shots.size());
  std::vector<std::vector<int>> count(campaign.shots.size());
  for (std::size_t l = 0; l < campaign.shots.size(); ++l) {
    sum1[l].assign(campaign.dphi_grid.size(), Image::Zero(H, W));
    sum2[l].assign(campaign.dphi_grid.size(), Image::Zero(H, W));
    count[l].assign(campaign.dphi_grid.size(), 0);
  }
  double rx = 0, ry = 0;
  int n_fits = 0;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!errors[i].empty()) {
      res.rejected.push_back("level " + std::to_string(jobs[i].level) + " phase " + std::to_string(jobs[i].dphi) +
                             ": " + errors[i]);
      continue;
    }
    sum1[jobs[i].level][jobs[i].dphi] += pairs[i].n1;
    sum2[jobs[i].level][jobs[i].dphi] += pairs[i].n2;
    ++count[jobs[i].level][jobs[i].dphi];
    rx += pairs[i].combined.model.radius_x;
    ry += pairs[i].combined.model.radius_y;
    ++n_fits;
  }
  if (n_fits == 0) throw FitError("map_intensity: every shot was rejected");

  for (std::size_t l = 0; l < campaign.shots.size(); ++l) {
    auto& maps = res.f2.emplace_back();
    for (std::size_t d = 0; d < campaign.dphi_grid.size(); ++d) {
      Image a = sum1[l][d], b = sum2[l][d];
      if (opt.rescale) {
        a = rescale_to_insitu(a, res.scales, over);
        b = rescale_to_insitu(b, res.scales, over);
      }
      F2Map m = compute_f2_map(a, b, res.pixel_scale);
      if (count[l][d] == 0) m.mask.setConstant(false);
      const Image ps = power_spectrum(m.values);
      if (res.power_spectrum.size() == 0) res.power_spectrum = ps;
      else res.power_spectrum += ps;
      maps.push_back(opt.stop_bands.empty() ? m : stripe_filter(m, opt.stop_bands));
    }
    res.phases.push_back(fit_phase_map(maps, campaign.dphi_grid, opt.phase, opt.workers));
  }

  // ellipse center: registered center row hh maps to output row (hh + 0.5) / bin - 0.5
  RoiEllipse roi;
  roi.cx = static_cast<double>(opt.center.half_width);
  roi.cy = opt.rescale ? (static_cast<double>(opt.center.half_height) + 0.5) / bin - 0.5
                       : static_cast<double>(opt.center.half_height);
  roi.ax = opt.roi_fraction * rx / n_fits;
  roi.ay = opt.roi_fraction * (ry / n_fits) / (opt.rescale ? bin : 1.0);
  res.map = fit_nsat_map(res.phases, campaign.probes, atom, global, roi, opt.nsat, opt.workers);
  return res;
}

}  // namespace ramseycal
