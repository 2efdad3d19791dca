#pragma once

// Damped Gauss-Newton (Levenberg-Marquardt) with box bounds and covariance.
//
// The core works on a residual callback r(p) of fixed length m. Jacobians are
// either supplied analytically or taken by central differences; the
// difference step is cbrt(eps) * max(|p_j|, 1), so parameters that pass
// through zero should be O(1)-scaled by the caller.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>

#include <Eigen/Dense>

#include "ramseycal/errors.hpp"

namespace ramseycal {

struct LsqOptions {
  double xtol = 1e-10;  // relative parameter step
  double gtol = 1e-12;  // infinity norm of J^T r
  int max_iterations = 200;
  double initial_damping = 1e-3;
  // true: residuals are already scaled by known 1-sigma errors, so the
  // covariance is (J^T J)^-1 without rescaling by the reduced chi^2.
  bool absolute_sigma = false;
};

struct Bounds {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  static Bounds unbounded(Eigen::Index n) {
    const double inf = std::numeric_limits<double>::infinity();
    return {Eigen::VectorXd::Constant(n, -inf), Eigen::VectorXd::Constant(n, inf)};
  }
  bool contains(const Eigen::VectorXd& p) const {
    return ((p.array() >= lower.array()) && (p.array() <= upper.array())).all();
  }
  Eigen::VectorXd clamp(const Eigen::VectorXd& p) const {
    return p.cwiseMax(lower).cwiseMin(upper);
  }
};

struct FitResult {
  Eigen::VectorXd params;
  Eigen::VectorXd sigma;
  Eigen::MatrixXd covariance;
  double residual_rms = 0;
  double cost = 0;  // sum of squared (weighted) residuals
  double gradient_norm = 0;
  bool converged = false;
  bool singular = false;
  int iterations = 0;
  Eigen::Index n_residuals = 0;
  std::string diagnostic;
};

namespace detail {

inline void finalize_covariance(FitResult& out, const Eigen::MatrixXd& J, const LsqOptions& opt) {
  const Eigen::Index n = J.cols(), m = J.rows();
  const Eigen::MatrixXd A = J.transpose() * J;
  Eigen::VectorXd d = A.diagonal().cwiseSqrt();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(d(i) > 0)) d(i) = 1.0;
  const Eigen::VectorXd dinv = d.cwiseInverse();
  const Eigen::MatrixXd As = dinv.asDiagonal() * A * dinv.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(As);
  const Eigen::VectorXd ev = es.eigenvalues();
  const double max_ev = ev.cwiseAbs().maxCoeff();
  const double threshold = 1e-12 * max_ev;
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (ev(i) > threshold && max_ev > 0) {
      inv(i) = 1.0 / ev(i);
    } else {
      out.singular = true;
    }
  }
  const Eigen::MatrixXd pinv_s = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  const double s2 = opt.absolute_sigma ? 1.0 : out.cost / static_cast<double>(std::max<Eigen::Index>(m - n, 1));
  Eigen::MatrixXd cov = dinv.asDiagonal() * pinv_s * dinv.asDiagonal() * s2;
  cov = 0.5 * (cov + cov.transpose());
  out.covariance = cov;
  out.sigma = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  if (out.singular) {
    out.converged = false;
    out.diagnostic += (out.diagnostic.empty() ? "" : "; ");
    out.diagnostic += "singular Jacobian: at least one parameter combination is unidentifiable";
  }
}

}  // namespace detail

// Central-difference Jacobian of a residual callback.
template <class Residual>
void numeric_jacobian(Residual& residual, const Eigen::VectorXd& p, Eigen::Index m,
                      Eigen::MatrixXd& J) {
  const double base = std::cbrt(std::numeric_limits<double>::epsilon());
  Eigen::VectorXd q = p, rp(m), rm(m);
  J.resize(m, p.size());
  for (Eigen::Index j = 0; j < p.size(); ++j) {
    const double h = base * std::max(std::abs(p(j)), 1.0);
    q(j) = p(j) + h;
    residual(q, rp);
    q(j) = p(j) - h;
    residual(q, rm);
    q(j) = p(j);
    J.col(j) = (rp - rm) / (2.0 * h);
  }
}

// Minimizes sum r_i(p)^2. `residual(p, r)` fills r (length m);
// `jacobian(p, J)` fills the m x n matrix dr/dp.
template <class Residual, class Jacobian>
FitResult least_squares_residuals(Residual&& residual, Jacobian&& jacobian, Eigen::VectorXd p0,
                                  Eigen::Index m, const LsqOptions& opt = {},
                                  const std::optional<Bounds>& bounds = std::nullopt) {
  const Eigen::Index n = p0.size();
  if (m < n) throw FitError("least_squares: fewer residuals than parameters");
  if (bounds && !bounds->contains(p0)) throw FitError("least_squares: initial parameters outside bounds");

  FitResult out;
  out.n_residuals = m;
  Eigen::VectorXd p = std::move(p0);
  Eigen::VectorXd r(m), rn(m);
  residual(p, r);
  double cost = r.squaredNorm();
  if (!std::isfinite(cost)) {
    out.params = p;
    out.sigma = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::quiet_NaN());
    out.covariance = Eigen::MatrixXd::Constant(n, n, std::numeric_limits<double>::quiet_NaN());
    out.cost = cost;
    out.residual_rms = std::numeric_limits<double>::quiet_NaN();
    out.diagnostic = "non-finite residual at initial parameters";
    return out;
  }
  Eigen::MatrixXd J(m, n);
  jacobian(p, J);
  double lambda = opt.initial_damping;
  bool converged = false;
  int iter = 0;
  for (; iter < opt.max_iterations; ++iter) {
    const Eigen::VectorXd g = J.transpose() * r;
    if (cost == 0.0 || g.lpNorm<Eigen::Infinity>() < opt.gtol) {
      converged = true;
      out.diagnostic = "gradient below tolerance";
      break;
    }
    const Eigen::MatrixXd A = J.transpose() * J;
    Eigen::VectorXd scale = A.diagonal();
    const double smax = scale.maxCoeff();
    for (Eigen::Index i = 0; i < n; ++i)
      scale(i) = std::max(scale(i), 1e-12 * std::max(smax, 1e-300));

    bool accepted = false;
    bool blocked = false;
    Eigen::VectorXd pn;
    double cn = cost;
    while (lambda < 1e20) {
      Eigen::MatrixXd M = A;
      M.diagonal() += lambda * scale;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
      Eigen::VectorXd step = -ldlt.solve(g);
      if (ldlt.info() != Eigen::Success || !step.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      pn = p + step;
      if (bounds) pn = bounds->clamp(pn);
      if ((pn - p).norm() == 0.0) {
        blocked = true;
        break;
      }
      residual(pn, rn);
      cn = rn.squaredNorm();
      if (std::isfinite(cn) && cn < cost) {
        accepted = true;
        lambda = std::max(lambda * 0.1, 1e-15);
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) {
      converged = true;
      out.diagnostic = blocked ? "step blocked by bounds" : "no further decrease at numerical precision";
      break;
    }
    const double step_norm = (pn - p).norm();
    p = pn;
    r = rn;
    cost = cn;
    jacobian(p, J);
    if (step_norm <= opt.xtol * (p.norm() + opt.xtol)) {
      converged = true;
      out.diagnostic = "relative step below tolerance";
      ++iter;
      break;
    }
  }
  if (!converged) out.diagnostic = "iteration limit reached";

  out.params = p;
  out.cost = cost;
  out.iterations = iter;
  out.converged = converged;
  out.residual_rms = std::sqrt(cost / static_cast<double>(m));
  out.gradient_norm = (J.transpose() * r).lpNorm<Eigen::Infinity>();
  detail::finalize_covariance(out, J, opt);
  return out;
}

// Numeric-Jacobian overload.
template <class Residual>
FitResult least_squares_residuals(Residual&& residual, Eigen::VectorXd p0, Eigen::Index m,
                                  const LsqOptions& opt = {},
                                  const std::optional<Bounds>& bounds = std::nullopt) {
  auto jac = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) { numeric_jacobian(residual, p, m, J); };
  return least_squares_residuals(residual, jac, std::move(p0), m, opt, bounds);
}

// Curve fit of y ~ model(x, p). Optional weights w_i multiply the squared residuals.
template <class Model>
FitResult least_squares(Model&& model, Eigen::VectorXd p0, std::span<const double> x,
                        std::span<const double> y, const std::optional<Bounds>& bounds = std::nullopt,
                        std::span<const double> weights = {}, const LsqOptions& opt = {}) {
  if (x.size() != y.size()) throw FitError("least_squares: x and y differ in length");
  if (!weights.empty() && weights.size() != x.size())
    throw FitError("least_squares: weights differ in length from data");
  const auto m = static_cast<Eigen::Index>(x.size());
  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const double w = weights.empty() ? 1.0 : std::sqrt(weights[static_cast<std::size_t>(i)]);
      r(i) = w * (model(x[static_cast<std::size_t>(i)], p) - y[static_cast<std::size_t>(i)]);
    }
  };
  return least_squares_residuals(residual, std::move(p0), m, opt, bounds);
}

}  // namespace ramseycal
