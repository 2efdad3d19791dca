#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ramseycal/sensor_cal.hpp"
#include "ramseycal/synth.hpp"

using namespace ramseycal;

namespace {

std::vector<DriftMode> three_modes(Eigen::Index rows, Eigen::Index cols) {
  return {{fringe_pattern(rows, cols, 0.21, 0.05, 0.3), 0.05, 1e-3},
          {fringe_pattern(rows, cols, -0.08, 0.17, 1.1), 0.05, 1e-3},
          {fringe_pattern(rows, cols, 0.33, -0.27, 2.0), 0.05, 1e-3}};
}

ProbeStackSpec em_spec(double mean_adu) {
  ProbeStackSpec s;
  s.mean_adu = mean_adu;
  s.rows = 72;
  s.cols = 72;
  s.drift_modes = three_modes(s.rows, s.cols);
  return s;
}

const Rect kRoi{4, 4, 64, 64};

double sample_variance(const std::vector<double>& v) {
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= v.size();
  for (double x : v) s += (x - m) * (x - m);
  return s / (v.size() - 1);
}

}  // namespace

TEST(LooPca, IdenticalFramesGiveZeroNoise) {
  ImageStack st;
  const Image f = fringe_pattern(20, 20, 0.3, 0.2, 0.0) * 50 + 500;
  for (int i = 0; i < 10; ++i) st.frames.push_back(f);
  const auto d = loo_pca_decompose(st, {0, 0, 20, 20});
  for (const auto& n : d.noise) EXPECT_LT(n.abs().maxCoeff(), 1e-9);
}

TEST(LooPca, TooFewFramesThrows) {
  ImageStack st;
  for (int i = 0; i < 7; ++i) st.frames.push_back(Image::Constant(10, 10, 1.0));
  EXPECT_THROW(loo_pca_decompose(st, {0, 0, 10, 10}), DomainError);
}

TEST(LooPca, RoiOutsideThrows) {
  ImageStack st;
  for (int i = 0; i < 8; ++i) st.frames.push_back(Image::Constant(10, 10, 1.0));
  EXPECT_THROW(loo_pca_decompose(st, {5, 5, 10, 10}), DomainError);
}

TEST(LooPca, ReconstructionIsBitExact) {
  auto spec = em_spec(2000);
  const auto st = synth_probe_stack(spec, 1);
  const auto d = loo_pca_decompose(st, kRoi);
  for (std::size_t i = 0; i < st.frames.size(); ++i) {
    const Image raw = (st.frames[i] - *st.dark).block(kRoi.y0, kRoi.x0, kRoi.height, kRoi.width);
    const Image sum = d.mean[i] + d.noise[i];
    EXPECT_TRUE((sum == raw).all()) << "frame " << i;
    EXPECT_LT(std::abs(d.noise[i].mean()), 3 * std::sqrt(d.noise_variance[i] / kRoi.area()));
  }
}

TEST(LooPca, FixedPatternPlusWhiteNoise) {
  // Known injected variance; the deflation-corrected estimate recovers it.
  std::mt19937_64 rng(7);
  std::normal_distribution<double> N(0.0, 1.0);
  const double sigma = 12.0;
  ImageStack st;
  const Image pattern = fringe_pattern(64, 64, 0.2, 0.1, 0.5) * 300 + 1000;
  for (int i = 0; i < 35; ++i) {
    Image f = pattern;
    for (Eigen::Index p = 0; p < f.size(); ++p) f(p) += sigma * N(rng);
    st.frames.push_back(f);
  }
  const auto d = loo_pca_decompose(st, {0, 0, 64, 64});
  const auto p = ptc_point(d);
  EXPECT_NEAR(p.var_adu / (sigma * sigma), 1.0, 0.03);
  // without a drifting component the leave-one-out mean leaks 1/(n-1) of the
  // other frames' noise, so the uncorrected residual sits high
  double raw = 0;
  for (double v : d.raw_variance) raw += v;
  raw /= d.raw_variance.size();
  EXPECT_NEAR(raw / (sigma * sigma), (1 + 1.0 / 34) * (1 - 34.0 / 4096), 0.015);
}

TEST(LooPca, DriftModesLandInLeadingComponentsAndShotNoiseSurvives) {
  auto spec = em_spec(4000);
  spec.sensor.read_noise_adu = 0;
  const auto st = synth_probe_stack(spec, 2);
  const auto d = loo_pca_decompose(st, kRoi);
  // three drift modes stand well above the noise floor of the spectrum
  const auto& ev = d.eigenvalues[0];
  EXPECT_GT(ev(2), 3 * ev(3));
  EXPECT_LT(ev(3), 1.6 * ev(ev.size() - 3));  // flat noise floor below the modes
  const double expected = spec.sensor.excess_noise_factor * spec.sensor.conversion * 4000;
  EXPECT_NEAR(ptc_point(d).var_adu / expected, 1.0, 0.03);
}

TEST(LooPca, BasisOrthonormal) {
  const auto st = synth_probe_stack(em_spec(3000), 3);
  for (std::size_t i : {0u, 17u, 34u}) {
    const Eigen::MatrixXd U = loo_pca_basis(st, kRoi, i);
    const Eigen::MatrixXd G = U.transpose() * U;
    EXPECT_LT((G - Eigen::MatrixXd::Identity(G.rows(), G.cols())).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(LooPca, NoiseUncorrelatedWithOwnComponents) {
  const auto st = synth_probe_stack(em_spec(3000), 4);
  const auto d = loo_pca_decompose(st, kRoi);
  const double bound = 3.0 / std::sqrt(double(kRoi.area()));
  for (std::size_t i : {0u, 9u, 30u}) {
    const Eigen::MatrixXd U = loo_pca_basis(st, kRoi, i);
    Eigen::VectorXd r = Eigen::Map<const Eigen::VectorXd>(d.noise[i].data(), kRoi.area());
    r.array() -= r.mean();
    for (Eigen::Index c = 0; c < U.cols(); ++c) {
      Eigen::VectorXd u = U.col(c);
      u.array() -= u.mean();
      const double corr = r.dot(u) / (r.norm() * u.norm());
      EXPECT_LT(std::abs(corr), bound) << "frame " << i << " pc " << c;
    }
  }
}

TEST(Ptc, NeedsThreeLevels) {
  std::vector<NoiseDecomposition> two(2);
  EXPECT_THROW(ptc_curve(two), DomainError);
}

TEST(Ptc, DarkStack) {
  ProbeStackSpec spec;
  spec.mean_adu = 1e-9;  // effectively dark
  spec.rows = spec.cols = 48;
  spec.sensor.dark_level_adu = 400;
  auto st = synth_probe_stack(spec, 5);
  st.dark.reset();  // keep the dark level in the data
  const auto p = ptc_point(loo_pca_decompose(st, {0, 0, 48, 48}));
  EXPECT_NEAR(p.mean_adu, 400, 1.0);
  EXPECT_NEAR(p.var_adu / (32.0 * 32.0), 1.0, 0.05);
}

TEST(Ptc, DoublingExposureDoublesMeanAndShotNoise) {
  auto a = em_spec(2000), b = em_spec(4000);
  a.sensor.read_noise_adu = b.sensor.read_noise_adu = 0;
  const auto pa = ptc_point(loo_pca_decompose(synth_probe_stack(a, 6), kRoi));
  const auto pb = ptc_point(loo_pca_decompose(synth_probe_stack(b, 7), kRoi));
  EXPECT_NEAR(pb.mean_adu / pa.mean_adu, 2.0, 0.02);
  EXPECT_NEAR(pb.var_adu / pa.var_adu, 2.0, 0.08);
}

TEST(Ptc, PoissonIdentityWithoutDrift) {
  ProbeStackSpec spec;
  spec.mean_adu = 300;
  spec.rows = spec.cols = 64;
  spec.sensor.conversion = 1;
  spec.sensor.excess_noise_factor = 1;
  spec.sensor.read_noise_adu = 0;
  spec.dark_frames = 0;
  const auto st = synth_probe_stack(spec, 8);
  std::vector<double> px;
  for (const auto& f : st.frames) px.push_back(f(10, 10));
  // per-pixel variance over frames, pooled over a patch
  double pooled = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      std::vector<double> v;
      for (const auto& f : st.frames) v.push_back(f(y, x));
      pooled += sample_variance(v);
    }
  pooled /= 1024;
  EXPECT_NEAR(pooled / 300, 1.0, 0.05);
}

TEST(ExtractConversion, UnitPoisson) {
  std::vector<PtcPoint> pts;
  for (double m : {100.0, 400.0, 900.0, 1600.0}) pts.push_back({m, m, 35, {}});
  const auto r = extract_conversion(pts, 1.0);
  EXPECT_NEAR(r.conversion, 1.0, 1e-9);
  EXPECT_NEAR(r.read_noise_adu, 0.0, 1e-3);
}

TEST(ExtractConversion, NonPositiveSlopeThrows) {
  std::vector<PtcPoint> pts{{100, 50, 35, {}}, {200, 40, 35, {}}, {300, 30, 35, {}}};
  EXPECT_THROW(extract_conversion(pts, 2.0), FitError);
}

TEST(ExtractConversion, TooFewPoints) {
  std::vector<PtcPoint> pts{{100, 50, 35, {}}, {200, 40, 35, {}}};
  EXPECT_THROW(extract_conversion(pts, 2.0), DomainError);
}

TEST(ExtractConversion, EmccdRoundTrip) {
  std::vector<PtcPoint> pts;
  int level = 0;
  for (double m : {500.0, 1000.0, 2000.0, 3000.0, 4500.0, 6000.0, 8000.0}) {
    const auto st = synth_probe_stack(em_spec(m), 100 + level++);
    pts.push_back(ptc_point(loo_pca_decompose(st, kRoi)));
  }
  const auto r = extract_conversion(pts, 2.0);
  EXPECT_NEAR(r.conversion / 7.65, 1.0, 0.02);
  // read noise has a large uncertainty; check consistency only
  EXPECT_LT(std::abs(r.read_noise_adu - 32.0), 3 * r.read_noise_sigma + 5.0);
  const auto a = pe_rescale_check(pts, r.conversion, 2.0);
  EXPECT_NEAR(a.a, 2.0, 0.05);
}

TEST(ExtractConversion, ImperfectStructureRemovalAddsQuadraticTerm) {
  // A per-frame multiplicative speckle that the PCA cannot model.
  std::vector<PtcPoint> pts;
  std::mt19937_64 rng(31);
  std::normal_distribution<double> N(0.0, 1.0);
  int level = 0;
  for (double m : {500.0, 1000.0, 2000.0, 3000.0, 4500.0, 6000.0, 8000.0}) {
    auto st = synth_probe_stack(em_spec(m), 200 + level++);
    for (auto& f : st.frames)
      for (Eigen::Index p = 0; p < f.size(); ++p) f(p) += 0.013 * m * N(rng);
    pts.push_back(ptc_point(loo_pca_decompose(st, kRoi)));
  }
  const auto r = extract_conversion(pts, 2.0);
  EXPECT_GT(r.quad_coeff, 0.0);
  EXPECT_GT(r.quadratic_fraction, 0.03);
  EXPECT_NEAR(r.conversion / 7.65, 1.0, 0.02);
}

TEST(ExtractConversion, EquivariantUnderScaling) {
  std::vector<ImageStack> stacks;
  int level = 0;
  for (double m : {800.0, 2500.0, 5000.0, 8000.0}) stacks.push_back(synth_probe_stack(em_spec(m), 300 + level++));
  auto calibrate = [&](double k) {
    std::vector<PtcPoint> pts;
    for (auto st : stacks) {
      for (auto& f : st.frames) f *= k;
      *st.dark *= k;
      pts.push_back(ptc_point(loo_pca_decompose(st, kRoi)));
    }
    return extract_conversion(pts, 2.0);
  };
  const auto a = calibrate(1.0), b = calibrate(3.0);
  EXPECT_NEAR(b.conversion / a.conversion, 3.0, 1e-9);
  EXPECT_NEAR(b.read_noise_adu / a.read_noise_adu, 3.0, 1e-6);
}

TEST(PeRescale, ConventionalSensorSlopeOne) {
  std::vector<PtcPoint> pts;
  for (double m : {100.0, 500.0, 1000.0, 3000.0}) pts.push_back({m, 1e2 + 3.1 * m, 35, {}});
  const auto r = pe_rescale_check(pts, 3.1, 1.0);
  EXPECT_NEAR(r.a, 1.0, 1e-9);
}

TEST(PeRescale, InvariantUnderAduRescaling) {
  std::vector<PtcPoint> pts, scaled;
  for (double m : {100.0, 500.0, 1000.0, 3000.0}) {
    pts.push_back({m, 900 + 15.3 * m + 1e-4 * m * m, 35, {}});
    scaled.push_back({4 * m, 16 * (900 + 15.3 * m + 1e-4 * m * m), 35, {}});
  }
  EXPECT_NEAR(pe_rescale_check(pts, 7.65, 2).a, pe_rescale_check(scaled, 4 * 7.65, 2).a, 1e-9);
}

TEST(HighPass, ComparisonDiagnosticSeesStructure) {
  auto spec = em_spec(6000);
  spec.drift_modes = {{fringe_pattern(72, 72, 1.2, 0.9, 0.0), 0.05, 1e-3}};
  const auto st = synth_probe_stack(spec, 9);
  const auto pca = ptc_point(loo_pca_decompose(st, kRoi));
  const auto hp = highpass_ptc_point(st, kRoi);
  EXPECT_GT(hp.var_adu, 1.2 * pca.var_adu);
}
