#pragma once

// Photon-transfer calibration with leave-one-out PCA structure removal.
//
// For frame i the other n-1 frames (dark subtracted, cropped to the roi) are
// centred on their ensemble mean mu and decomposed through the small Gram
// matrix. Projecting N_i onto mu + span(PCs) gives <N_i>; the remainder is the
// noise image dN_i. Everything is computed from one n x n Gram matrix of the
// raw frames, so each leave-one-out step costs O(n^3 + m n).

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ramseycal/errors.hpp"
#include "ramseycal/fits.hpp"
#include "ramseycal/image.hpp"
#include "ramseycal/parallel.hpp"

namespace ramseycal {

struct NoiseDecomposition {
  Rect roi;
  std::vector<Image> mean;   // <N_i> over the roi
  std::vector<Image> noise;  // dN_i = N_i - <N_i>
  std::vector<double> frame_mean;      // spatial mean of N_i over the roi
  std::vector<double> noise_variance;  // per-frame dN variance, deflation corrected
  std::vector<double> raw_variance;    // per-frame mean of dN^2, uncorrected
  std::vector<std::size_t> retained;   // PCs used for each frame
  std::vector<Eigen::VectorXd> eigenvalues;  // leave-one-out Gram spectrum, descending
};

struct PtcPoint {
  double mean_adu = 0;
  double var_adu = 0;
  std::size_t n_frames = 0;
  Rect roi;
};

namespace detail {

// Dark-subtracted roi pixels of every frame as columns.
inline Eigen::MatrixXd roi_columns(const ImageStack& stack, const Rect& roi) {
  const auto m = roi.area();
  Eigen::MatrixXd X(m, static_cast<Eigen::Index>(stack.frames.size()));
  for (std::size_t j = 0; j < stack.frames.size(); ++j) {
    Image f = stack.frames[j].block(roi.y0, roi.x0, roi.height, roi.width);
    if (stack.dark) f -= stack.dark->block(roi.y0, roi.x0, roi.height, roi.width);
    X.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(f.data(), m);
  }
  return X;
}

inline void check_stack(const ImageStack& stack, const Rect& roi) {
  stack.validate();
  if (stack.frames.size() < 8) throw DomainError("loo_pca_decompose: need at least 8 frames");
  if (!roi.inside(stack.frames.front())) throw DomainError("loo_pca_decompose: roi outside the sensor");
  if (roi.area() <= static_cast<Eigen::Index>(stack.frames.size()))
    throw DomainError("loo_pca_decompose: roi must have more pixels than frames");
}

struct LooProjection {
  std::vector<Eigen::Index> others;
  Eigen::VectorXd coeff;  // <N_i> = X_others * coeff
  Eigen::MatrixXd vectors;  // retained Gram eigenvectors (n-1 x k)
  Eigen::VectorXd values;   // all Gram eigenvalues, descending
  Eigen::VectorXd retained_values;
};

inline LooProjection loo_projection(const Eigen::MatrixXd& K, Eigen::Index i) {
  const Eigen::Index n = K.rows(), q = n - 1;
  LooProjection out;
  for (Eigen::Index j = 0; j < n; ++j)
    if (j != i) out.others.push_back(j);
  Eigen::MatrixXd Kss(q, q);
  Eigen::VectorXd Ksi(q);
  for (Eigen::Index a = 0; a < q; ++a) {
    Ksi(a) = K(out.others[a], i);
    for (Eigen::Index b = 0; b < q; ++b) Kss(a, b) = K(out.others[a], out.others[b]);
  }
  const Eigen::MatrixXd P = Eigen::MatrixXd::Identity(q, q) - Eigen::MatrixXd::Constant(q, q, 1.0 / q);
  const Eigen::MatrixXd G = P * Kss * P;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (G + G.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().reverse();
  const Eigen::MatrixXd V = es.eigenvectors().rowwise().reverse();
  const double lmax = std::max(ev(0), 0.0);
  Eigen::Index k = 0;
  while (k < q && ev(k) > 1e-12 * lmax) ++k;

  // D^T (N_i - mu) with D = X_S P and mu = X_S 1 / q
  const Eigen::VectorXd dtr = P * (Ksi - Kss * Eigen::VectorXd::Constant(q, 1.0 / q));
  Eigen::VectorXd w = Eigen::VectorXd::Zero(q);
  for (Eigen::Index c = 0; c < k; ++c) w += V.col(c) * (V.col(c).dot(dtr) / ev(c));
  // raw-frame coefficients: mu + D w = X_S (w + (1 - sum w) / q)
  out.coeff = w - Eigen::VectorXd::Constant(q, w.sum() / q) + Eigen::VectorXd::Constant(q, 1.0 / q);
  out.vectors = V.leftCols(k);
  out.values = ev;
  out.retained_values = ev.head(k);
  return out;
}

}  // namespace detail

inline NoiseDecomposition loo_pca_decompose(const ImageStack& stack, const Rect& roi, std::size_t workers = 1) {
  detail::check_stack(stack, roi);
  const Eigen::MatrixXd X = detail::roi_columns(stack, roi);
  const Eigen::Index n = X.cols(), m = X.rows(), q = n - 1;
  const Eigen::MatrixXd K = X.transpose() * X;

  NoiseDecomposition out;
  out.roi = roi;
  const auto un = static_cast<std::size_t>(n);
  out.mean.resize(un);
  out.noise.resize(un);
  out.frame_mean.resize(un);
  out.noise_variance.resize(un);
  out.raw_variance.resize(un);
  out.retained.resize(un);
  out.eigenvalues.resize(un);
  const double deflation = 1.0 - static_cast<double>(q) / static_cast<double>(m);

  parallel_for(un, workers, [&](std::size_t ui) {
    const auto i = static_cast<Eigen::Index>(ui);
    const auto pr = detail::loo_projection(K, i);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(m);
    for (Eigen::Index a = 0; a < q; ++a) mean += pr.coeff(a) * X.col(pr.others[a]);
    const Eigen::VectorXd x = X.col(i);
    Eigen::VectorXd noise = x - mean;
    // make <N_i> + dN_i reproduce N_i bit-for-bit
    for (Eigen::Index p = 0; p < m; ++p)
      for (int it = 0; it < 4 && mean(p) + noise(p) != x(p); ++it) {
        mean(p) = x(p) - noise(p);
        noise(p) = x(p) - mean(p);
      }
    Image mi(roi.height, roi.width), ni(roi.height, roi.width);
    Eigen::Map<Eigen::VectorXd>(mi.data(), m) = mean;
    Eigen::Map<Eigen::VectorXd>(ni.data(), m) = noise;
    out.mean[ui] = std::move(mi);
    out.noise[ui] = std::move(ni);
    out.frame_mean[ui] = x.mean();
    const double raw = noise.squaredNorm() / static_cast<double>(m);
    out.raw_variance[ui] = raw;
    // Noise of the other frames leaks into <N_i> with weight |c*|^2, c* being the
    // structure-only coefficients. The fitted c also absorbs ~q/m of noise-fitting
    // spread, |c|^2 ~ |c*|^2 + (q/m)(1 + |c*|^2), which is undone here.
    const double leak = (1.0 + pr.coeff.squaredNorm()) / (1.0 + static_cast<double>(q) / static_cast<double>(m));
    out.noise_variance[ui] = raw / (deflation * leak);
    out.retained[ui] = static_cast<std::size_t>(pr.retained_values.size());
    out.eigenvalues[ui] = pr.values;
  });
  return out;
}

// Orthonormal PC images (as columns over the roi) of the leave-one-out ensemble for frame i.
inline Eigen::MatrixXd loo_pca_basis(const ImageStack& stack, const Rect& roi, std::size_t i) {
  detail::check_stack(stack, roi);
  if (i >= stack.frames.size()) throw DomainError("loo_pca_basis: frame index out of range");
  const Eigen::MatrixXd X = detail::roi_columns(stack, roi);
  const Eigen::Index n = X.cols(), q = n - 1;
  const auto pr = detail::loo_projection(X.transpose() * X, static_cast<Eigen::Index>(i));
  Eigen::MatrixXd Xs(X.rows(), q);
  for (Eigen::Index a = 0; a < q; ++a) Xs.col(a) = X.col(pr.others[a]);
  const Eigen::VectorXd mu = Xs.rowwise().mean();
  const Eigen::MatrixXd D = Xs.colwise() - mu;
  Eigen::MatrixXd U = D * pr.vectors;
  for (Eigen::Index c = 0; c < U.cols(); ++c) U.col(c) /= std::sqrt(pr.retained_values(c));
  return U;
}

inline PtcPoint ptc_point(const NoiseDecomposition& d) {
  PtcPoint p;
  p.roi = d.roi;
  p.n_frames = d.noise.size();
  for (std::size_t i = 0; i < p.n_frames; ++i) {
    p.mean_adu += d.frame_mean[i];
    p.var_adu += d.noise_variance[i];
  }
  p.mean_adu /= static_cast<double>(p.n_frames);
  p.var_adu /= static_cast<double>(p.n_frames);
  return p;
}

inline std::vector<PtcPoint> ptc_curve(const std::vector<NoiseDecomposition>& levels) {
  if (levels.size() < 3) throw DomainError("ptc_curve: need at least 3 intensity levels");
  std::vector<PtcPoint> out;
  for (const auto& d : levels) out.push_back(ptc_point(d));
  return out;
}

struct ConversionResult {
  double conversion = 0, conversion_sigma = 0;
  double read_noise_adu = 0, read_noise_sigma = 0;
  double quad_coeff = 0;
  double quadratic_fraction = 0;  // c2 x^2 / (c1 x) at the brightest point
  double excess_noise_factor = 1;
  QuadraticFit fit;
};

// var = c0 + c1 mean + c2 mean^2 with C = c1 / F^2 and read noise sqrt(c0).
inline ConversionResult extract_conversion(const std::vector<PtcPoint>& points, double excess_noise_factor) {
  if (points.size() < 3) throw DomainError("extract_conversion: need at least 3 points");
  if (!(excess_noise_factor > 0)) throw DomainError("extract_conversion: excess noise factor must be > 0");
  std::vector<double> x, y;
  for (const auto& p : points) {
    x.push_back(p.mean_adu);
    y.push_back(p.var_adu);
  }
  ConversionResult r;
  r.fit = fit_quadratic(x, y);
  if (!(r.fit.c1 > 0)) throw FitError("extract_conversion: non-positive linear coefficient is unphysical");
  r.excess_noise_factor = excess_noise_factor;
  r.conversion = r.fit.c1 / excess_noise_factor;
  r.conversion_sigma = r.fit.fit.sigma(1) / excess_noise_factor;
  r.read_noise_adu = std::sqrt(std::max(r.fit.c0, 0.0));
  // d sqrt(c0) = dc0 / (2 sqrt c0); fall back to sqrt(sigma) when c0 is near zero
  r.read_noise_sigma = r.read_noise_adu > 0 ? std::min(r.fit.fit.sigma(0) / (2 * r.read_noise_adu),
                                                       std::sqrt(r.fit.fit.sigma(0)))
                                            : std::sqrt(r.fit.fit.sigma(0));
  r.quad_coeff = r.fit.c2;
  const double xmax = *std::max_element(x.begin(), x.end());
  r.quadratic_fraction = r.fit.c2 * xmax / r.fit.c1;
  return r;
}

struct PeRescale {
  double a = 0, a_sigma = 0;
  double expected = 0;  // F^2
  QuadraticFit fit;
};

// Photoelectron units: mean / C and var / C^2; the linear coefficient should equal F^2.
inline PeRescale pe_rescale_check(const std::vector<PtcPoint>& points, double conversion, double excess_noise_factor) {
  if (!(conversion > 0)) throw DomainError("pe_rescale_check: conversion must be > 0");
  std::vector<double> x, y;
  for (const auto& p : points) {
    x.push_back(p.mean_adu / conversion);
    y.push_back(p.var_adu / (conversion * conversion));
  }
  PeRescale r;
  r.fit = fit_quadratic(x, y);
  r.a = r.fit.c1;
  r.a_sigma = r.fit.fit.sigma(1);
  r.expected = excess_noise_factor;
  return r;
}

// Comparison diagnostic only: variance of each frame minus its box-blurred self.
// Residual structure at the blur scale leaks in and shows up as a quadratic term.
inline PtcPoint highpass_ptc_point(const ImageStack& stack, const Rect& roi, Eigen::Index radius = 2) {
  stack.validate();
  if (!roi.inside(stack.frames.front())) throw DomainError("highpass_ptc_point: roi outside the sensor");
  PtcPoint p;
  p.roi = roi;
  p.n_frames = stack.frames.size();
  const double side = static_cast<double>(2 * radius + 1);
  // A pixel minus its local mean has variance s^2 (1 - 1/k) for white noise.
  const double white = 1.0 - 1.0 / (side * side);
  for (const auto& frame : stack.frames) {
    Image f = frame;
    if (stack.dark) f -= *stack.dark;
    double sum = 0, sum2 = 0, cnt = 0;
    for (Eigen::Index y = roi.y0 + radius; y < roi.y0 + roi.height - radius; ++y)
      for (Eigen::Index x = roi.x0 + radius; x < roi.x0 + roi.width - radius; ++x) {
        const double local = f.block(y - radius, x - radius, 2 * radius + 1, 2 * radius + 1).mean();
        const double d = f(y, x) - local;
        sum += f(y, x);
        sum2 += d * d;
        cnt += 1;
      }
    p.mean_adu += sum / cnt;
    p.var_adu += sum2 / cnt / white;
  }
  p.mean_adu /= static_cast<double>(p.n_frames);
  p.var_adu /= static_cast<double>(p.n_frames);
  return p;
}

}  // namespace ramseycal
