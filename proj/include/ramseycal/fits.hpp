#pragma once

// Model fits built on the LM core: Ramsey fringe, RF sinusoid segment,
// 1/e^2 Gaussian beam, column-integrated Thomas-Fermi cloud and closed-form
// quadratic.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ramseycal/constants.hpp"
#include "ramseycal/datasets.hpp"
#include "ramseycal/errors.hpp"
#include "ramseycal/image.hpp"
#include "ramseycal/least_squares.hpp"
#include "ramseycal/physics.hpp"

namespace ramseycal {

// ---------------------------------------------------------------------------
// Ramsey fringe

struct FringeFit {
  RamseyParams params;
  FitResult fit;  // params order: contrast, phase, center_shift
};

namespace detail {

// Linear projection onto {1, cos x, sin x}. On a uniform full-period grid this
// is the single-bin DFT at unit frequency; it stays exact for noiseless data
// on any grid.
inline Eigen::Vector3d fringe_linear_guess(std::span<const double> x, std::span<const double> y) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(x.size()), 3);
  Eigen::VectorXd Y(static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    X(k, 0) = 1.0;
    X(k, 1) = std::cos(x[i]);
    X(k, 2) = std::sin(x[i]);
    Y(k) = y[i];
  }
  const Eigen::Vector3d c = X.colPivHouseholderQr().solve(Y);
  const double amp = 2.0 * std::hypot(c(1), c(2));
  const double phase = std::atan2(c(2), c(1));
  return {amp, phase, c(0) - 0.5};
}

}  // namespace detail

inline FringeFit fit_fringe(const FringeDataset& data, const LsqOptions& opt = {}) {
  const auto n = data.dphi.size();
  if (n != data.f2.size()) throw FitError("fit_fringe: dphi and f2 differ in length");
  if (n < 4) throw FitError("fit_fringe: need at least 4 points");
  const auto [lo, hi] = std::minmax_element(data.dphi.begin(), data.dphi.end());
  if (*hi - *lo < kPi) throw FitError("fit_fringe: points must span at least half a period");
  const bool weighted = !data.f2_sigma.empty();
  if (weighted && data.f2_sigma.size() != n) throw FitError("fit_fringe: sigma length mismatch");

  const Eigen::Vector3d guess = detail::fringe_linear_guess(data.dphi, data.f2);
  const auto m = static_cast<Eigen::Index>(n);
  auto inv_sigma = [&](std::size_t i) { return weighted ? 1.0 / data.f2_sigma[i] : 1.0; };
  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    for (std::size_t i = 0; i < n; ++i)
      r(static_cast<Eigen::Index>(i)) =
          inv_sigma(i) * (0.5 * (1.0 + p(0) * std::cos(data.dphi[i] - p(1))) + p(2) - data.f2[i]);
  };
  auto jacobian = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      const double c = std::cos(data.dphi[i] - p(1)), s = std::sin(data.dphi[i] - p(1));
      J(k, 0) = inv_sigma(i) * 0.5 * c;
      J(k, 1) = inv_sigma(i) * 0.5 * p(0) * s;
      J(k, 2) = inv_sigma(i);
    }
  };
  LsqOptions o = opt;
  if (weighted) o.absolute_sigma = true;
  FitResult fit = least_squares_residuals(residual, jacobian, Eigen::VectorXd(guess), m, o);

  if (fit.params(0) < 0) {
    fit.params(0) = -fit.params(0);
    fit.params(1) += kPi;
  }
  fit.params(1) = wrap_phase(fit.params(1));
  FringeFit out;
  out.params.contrast = fit.params(0);
  out.params.phase = fit.params(1);
  out.params.center_shift = fit.params(2);
  out.fit = std::move(fit);
  return out;
}

// ---------------------------------------------------------------------------
// RF sinusoid segment: g(t) = A sin(2 pi f (t - t_origin) + pi phi_e) + g0

struct SineFit {
  double amplitude = 0;
  double frequency = 0;  // Hz
  double phi_e = 0;      // phase in units of pi, wrapped to (-1, 1]
  double offset = 0;
  FitResult fit;         // params order: A, f - f_nominal, phi_e, g0
};

struct TimeWindow {
  double start = 0;
  double stop = 0;
};

inline constexpr double kDefaultFrequencyTolerance = 2e3;  // 0.002 MHz

inline SineFit fit_sine_segment(const Trace& trace, TimeWindow window, double f_nominal,
                                double f_tol = kDefaultFrequencyTolerance, double t_origin = 0.0,
                                const LsqOptions& opt = {}) {
  trace.validate();
  if (!(f_nominal > 0)) throw FitError("fit_sine_segment: nominal frequency must be positive");
  if ((window.stop - window.start) * f_nominal < 3.0)
    throw FitError("fit_sine_segment: window shorter than 3 cycles at the nominal frequency");
  std::vector<double> t, v;
  for (std::size_t i = 0; i < trace.t.size(); ++i)
    if (trace.t[i] >= window.start && trace.t[i] <= window.stop) {
      t.push_back(trace.t[i] - t_origin);
      v.push_back(trace.v[i]);
    }
  if (t.size() < 8) throw FitError("fit_sine_segment: fewer than 8 samples in window");
  const auto m = static_cast<Eigen::Index>(t.size());

  // Linear guess at the nominal frequency.
  Eigen::MatrixXd X(m, 3);
  Eigen::VectorXd Y(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double ph = kTwoPi * f_nominal * t[static_cast<std::size_t>(i)];
    X(i, 0) = std::sin(ph);
    X(i, 1) = std::cos(ph);
    X(i, 2) = 1.0;
    Y(i) = v[static_cast<std::size_t>(i)];
  }
  const Eigen::Vector3d c = X.colPivHouseholderQr().solve(Y);
  // A sin(ph + psi) = A cos psi sin ph + A sin psi cos ph
  Eigen::VectorXd p0(4);
  p0 << std::hypot(c(0), c(1)), 0.0, std::atan2(c(1), c(0)) / kPi, c(2);

  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    const double f = f_nominal + p(1);
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto k = static_cast<std::size_t>(i);
      r(i) = p(0) * std::sin(kTwoPi * f * t[k] + kPi * p(2)) + p(3) - v[k];
    }
  };
  auto jacobian = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    const double f = f_nominal + p(1);
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double arg = kTwoPi * f * t[k] + kPi * p(2);
      const double cs = std::cos(arg);
      J(i, 0) = std::sin(arg);
      J(i, 1) = p(0) * cs * kTwoPi * t[k];
      J(i, 2) = p(0) * cs * kPi;
      J(i, 3) = 1.0;
    }
  };
  Bounds b = Bounds::unbounded(4);
  b.lower(1) = -f_tol;
  b.upper(1) = f_tol;
  FitResult fit = least_squares_residuals(residual, jacobian, p0, m, opt, b);

  if (fit.params(0) < 0) {
    fit.params(0) = -fit.params(0);
    fit.params(2) += 1.0;
  }
  fit.params(2) = wrap_phase(kPi * fit.params(2)) / kPi;
  SineFit out;
  out.amplitude = fit.params(0);
  out.frequency = f_nominal + fit.params(1);
  out.phi_e = fit.params(2);
  out.offset = fit.params(3);
  out.fit = std::move(fit);
  return out;
}

// ---------------------------------------------------------------------------
// 2D Gaussian, 1/e^2 radius convention:
// G(x, y) = A exp[-2 ((x - bx)/sx)^2 - 2 ((y - by)/sy)^2] + d

struct Gaussian2D {
  double amplitude = 0;
  double center_x = 0, center_y = 0;
  double width_x = 0, width_y = 0;
  double offset = 0;

  // pi sx sy A / 2, the integral of the peak above offset.
  double integrated() const { return kPi * width_x * width_y * amplitude / 2.0; }
  double operator()(double x, double y) const {
    const double u = (x - center_x) / width_x, v = (y - center_y) / width_y;
    return amplitude * std::exp(-2.0 * (u * u + v * v)) + offset;
  }
};

struct Gaussian2DFit {
  Gaussian2D model;
  FitResult fit;  // params order: A, bx, by, sx, sy, d
};

namespace detail {

// Robust noise scale of the image border (MAD * 1.4826).
inline double border_noise(const Image& img) {
  auto b = border_pixels(img);
  const double med = median(b);
  for (auto& v : b) v = std::abs(v - med);
  return 1.4826 * median(b);
}

struct Moments {
  double total = 0, cx = 0, cy = 0, vx = 0, vy = 0, peak = 0, offset = 0;
};

inline Moments image_moments(const Image& img) {
  Moments mo;
  mo.offset = median(border_pixels(img));
  double sw = 0, sx = 0, sy = 0;
  mo.peak = -std::numeric_limits<double>::infinity();
  for (Eigen::Index y = 0; y < img.rows(); ++y)
    for (Eigen::Index x = 0; x < img.cols(); ++x) {
      const double w = std::max(img(y, x) - mo.offset, 0.0);
      sw += w;
      sx += w * static_cast<double>(x);
      sy += w * static_cast<double>(y);
      mo.peak = std::max(mo.peak, img(y, x) - mo.offset);
    }
  if (!(sw > 0)) throw FitError("image moments: no signal above the border level");
  mo.total = sw;
  mo.cx = sx / sw;
  mo.cy = sy / sw;
  double vx = 0, vy = 0;
  for (Eigen::Index y = 0; y < img.rows(); ++y)
    for (Eigen::Index x = 0; x < img.cols(); ++x) {
      const double w = std::max(img(y, x) - mo.offset, 0.0);
      vx += w * (static_cast<double>(x) - mo.cx) * (static_cast<double>(x) - mo.cx);
      vy += w * (static_cast<double>(y) - mo.cy) * (static_cast<double>(y) - mo.cy);
    }
  mo.vx = vx / sw;
  mo.vy = vy / sw;
  return mo;
}

}  // namespace detail

inline Gaussian2DFit fit_gaussian2d(const Image& img, const LsqOptions& opt = {}) {
  if (img.rows() < 5 || img.cols() < 5) throw FitError("fit_gaussian2d: image too small");
  const auto mo = detail::image_moments(img);
  const double noise = detail::border_noise(img);
  if (!(mo.peak >= 5.0 * noise) || !(mo.peak > 0))
    throw FitError("fit_gaussian2d: peak is not 5x above the pixel noise scale");

  const Eigen::Index W = img.cols();
  const Eigen::Index m = img.size();
  Eigen::VectorXd p0(6);
  p0 << mo.peak, mo.cx, mo.cy, 2.0 * std::sqrt(mo.vx), 2.0 * std::sqrt(mo.vy), mo.offset;

  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    for (Eigen::Index k = 0; k < m; ++k) {
      const double u = (static_cast<double>(k % W) - p(1)) / p(3);
      const double v = (static_cast<double>(k / W) - p(2)) / p(4);
      r(k) = p(0) * std::exp(-2.0 * (u * u + v * v)) + p(5) - img(k / W, k % W);
    }
  };
  auto jacobian = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    for (Eigen::Index k = 0; k < m; ++k) {
      const double u = (static_cast<double>(k % W) - p(1)) / p(3);
      const double v = (static_cast<double>(k / W) - p(2)) / p(4);
      const double e = std::exp(-2.0 * (u * u + v * v));
      const double ae = p(0) * e;
      J(k, 0) = e;
      J(k, 1) = ae * 4.0 * u / p(3);
      J(k, 2) = ae * 4.0 * v / p(4);
      J(k, 3) = ae * 4.0 * u * u / p(3);
      J(k, 4) = ae * 4.0 * v * v / p(4);
      J(k, 5) = 1.0;
    }
  };
  Bounds b = Bounds::unbounded(6);
  b.lower(3) = 1e-3;
  b.lower(4) = 1e-3;
  FitResult fit = least_squares_residuals(residual, jacobian, p0, m, opt, b);
  Gaussian2DFit out;
  const auto& q = fit.params;
  out.model = {q(0), q(1), q(2), q(3), q(4), q(5)};
  out.fit = std::move(fit);
  return out;
}

// ---------------------------------------------------------------------------
// Column-integrated Thomas-Fermi profile:
// n(x, y) = peak * max(0, 1 - X^2 - Y^2)^(3/2) + offset

struct ThomasFermi2D {
  double peak = 0;
  double center_x = 0, center_y = 0;
  double radius_x = 0, radius_y = 0;
  double offset = 0;

  double operator()(double x, double y) const {
    const double u = (x - center_x) / radius_x, v = (y - center_y) / radius_y;
    const double q = 1.0 - u * u - v * v;
    return (q > 0 ? peak * q * std::sqrt(q) : 0.0) + offset;
  }
  // Integral of the profile above offset: 2 pi peak Rx Ry / 5.
  double integrated() const { return 2.0 * kPi * peak * radius_x * radius_y / 5.0; }
};

struct ThomasFermiFit {
  ThomasFermi2D model;
  FitResult fit;  // params order: peak, cx, cy, Rx, Ry, offset
};

inline ThomasFermiFit fit_thomas_fermi2d(const Image& img, const LsqOptions& opt = {}) {
  if (img.rows() < 5 || img.cols() < 5) throw FitError("fit_thomas_fermi2d: image too small");
  const auto mo = detail::image_moments(img);
  const Eigen::Index W = img.cols();
  const Eigen::Index m = img.size();
  // For (1 - r^2)^(3/2) on the unit disk <X^2> = 1/7.
  Eigen::VectorXd p0(6);
  p0 << mo.peak, mo.cx, mo.cy, std::sqrt(7.0 * mo.vx), std::sqrt(7.0 * mo.vy), mo.offset;

  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    for (Eigen::Index k = 0; k < m; ++k) {
      const double u = (static_cast<double>(k % W) - p(1)) / p(3);
      const double v = (static_cast<double>(k / W) - p(2)) / p(4);
      const double q = 1.0 - u * u - v * v;
      r(k) = (q > 0 ? p(0) * q * std::sqrt(q) : 0.0) + p(5) - img(k / W, k % W);
    }
  };
  auto jacobian = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    for (Eigen::Index k = 0; k < m; ++k) {
      const double u = (static_cast<double>(k % W) - p(1)) / p(3);
      const double v = (static_cast<double>(k / W) - p(2)) / p(4);
      const double q = 1.0 - u * u - v * v;
      if (q > 0) {
        const double sq = std::sqrt(q);
        const double g = 3.0 * p(0) * sq;  // d/dq of peak q^{3/2}, times 2
        J(k, 0) = q * sq;
        J(k, 1) = g * u / p(3);
        J(k, 2) = g * v / p(4);
        J(k, 3) = g * u * u / p(3);
        J(k, 4) = g * v * v / p(4);
      } else {
        J.row(k).head<5>().setZero();
      }
      J(k, 5) = 1.0;
    }
  };
  Bounds b = Bounds::unbounded(6);
  b.lower(3) = 0.5;
  b.lower(4) = 0.5;
  FitResult fit = least_squares_residuals(residual, jacobian, p0, m, opt, b);
  ThomasFermiFit out;
  const auto& q = fit.params;
  out.model = {q(0), q(1), q(2), q(3), q(4), q(5)};
  out.fit = std::move(fit);
  return out;
}

// ---------------------------------------------------------------------------
// Closed-form weighted quadratic y = c0 + c1 x + c2 x^2

struct QuadraticFit {
  double c0 = 0, c1 = 0, c2 = 0;
  FitResult fit;  // params order: c0, c1, c2

  double operator()(double x) const { return c0 + x * (c1 + x * c2); }
};

inline QuadraticFit fit_quadratic(std::span<const double> x, std::span<const double> y,
                                  std::span<const double> weights = {}) {
  const auto n = x.size();
  if (n != y.size()) throw FitError("fit_quadratic: x and y differ in length");
  if (!weights.empty() && weights.size() != n) throw FitError("fit_quadratic: weights length mismatch");
  std::vector<double> distinct(x.begin(), x.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 3) throw FitError("fit_quadratic: rank-deficient design (need 3 distinct x)");

  // Centre and scale x for conditioning, then map coefficients back.
  const double mu = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double sc = 0;
  for (double xi : x) sc = std::max(sc, std::abs(xi - mu));
  const auto m = static_cast<Eigen::Index>(n);
  Eigen::MatrixXd X(m, 3);
  Eigen::VectorXd Y(m), sw(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double t = (x[k] - mu) / sc;
    sw(i) = weights.empty() ? 1.0 : std::sqrt(weights[k]);
    X(i, 0) = sw(i);
    X(i, 1) = sw(i) * t;
    X(i, 2) = sw(i) * t * t;
    Y(i) = sw(i) * y[k];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < 3) throw FitError("fit_quadratic: rank-deficient design");
  const Eigen::Vector3d a = qr.solve(Y);
  const Eigen::VectorXd res = X * a - Y;

  // c = T a for y = a0 + a1 t + a2 t^2, t = (x - mu) / sc.
  Eigen::Matrix3d T;
  T << 1.0, -mu / sc, mu * mu / (sc * sc),
       0.0, 1.0 / sc, -2.0 * mu / (sc * sc),
       0.0, 0.0, 1.0 / (sc * sc);
  const Eigen::Vector3d cvec = T * a;

  FitResult fr;
  fr.params = cvec;
  fr.cost = res.squaredNorm();
  fr.n_residuals = m;
  fr.residual_rms = std::sqrt(fr.cost / static_cast<double>(m));
  fr.converged = true;
  fr.iterations = 0;
  fr.diagnostic = "closed form";
  const Eigen::Matrix3d XtX_inv = (X.transpose() * X).inverse();
  const double s2 = m > 3 ? fr.cost / static_cast<double>(m - 3) : 0.0;
  Eigen::Matrix3d cov = T * XtX_inv * T.transpose() * s2;
  fr.covariance = 0.5 * (cov + cov.transpose());
  fr.sigma = fr.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  fr.gradient_norm = (X.transpose() * res).lpNorm<Eigen::Infinity>();
  return {cvec(0), cvec(1), cvec(2), std::move(fr)};
}

}  // namespace ramseycal
