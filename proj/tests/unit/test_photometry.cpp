#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ramseycal/photometry.hpp"
#include "ramseycal/synth.hpp"

using namespace ramseycal;

namespace {

constexpr double kLambda = 780e-9;
constexpr double kIsat = 16.7;  // W/m^2

}  // namespace

TEST(Photons, ImpliedPulseDuration) {
  EXPECT_NEAR(photons_in_pulse(13.05e-6, 1.8539380727885667e-05, kLambda), 9.5e8, 1e-3);
  EXPECT_EQ(photons_in_pulse(0.0, 1e-6, kLambda), 0.0);
  EXPECT_THROW(photons_in_pulse(-1.0, 1e-6, kLambda), DomainError);
}

TEST(QuantumEfficiency, Oracle) {
  EXPECT_NEAR(quantum_efficiency(2.9e9, 7.65, 9.5e8), 0.39903680770553834, 1e-15);
  EXPECT_THROW(quantum_efficiency(8e9, 7.65, 9.5e8), DomainError);
  EXPECT_THROW(quantum_efficiency(0.0, 7.65, 9.5e8), DomainError);
}

TEST(SystemEfficiency, Oracle) {
  ImagingGeometry g{13e-6, 36};
  EXPECT_NEAR(system_efficiency(27.2, 7.65, g, kLambda, kIsat), 0.4158066438693966, 1e-13);
}

TEST(IntensityFromCounts, OracleAndRoundTrip) {
  SensorModel s;
  s.conversion = 7.65;
  s.qe = 0.401;
  ImagingGeometry g{13e-6, 36};
  const double i = intensity_from_counts(27.2, s, 1.0, g, 1e-6, kLambda);
  EXPECT_NEAR(i, 17.316635792067135, 1e-11);
  EXPECT_NEAR(counts_from_intensity(i, s, 1.0, g, 1e-6, kLambda), 27.2, 1e-12);
  // linear in counts, inverse in transfer
  EXPECT_NEAR(intensity_from_counts(54.4, s, 0.5, g, 1e-6, kLambda), 4 * i, 1e-10);
}

TEST(IntensityFromCounts, SystemEfficiencyConsistency) {
  // With QE*T equal to the system efficiency, N_sat maps back to I_sat.
  ImagingGeometry g{13e-6, 36};
  const double eta = system_efficiency(27.2, 7.65, g, kLambda, kIsat);
  SensorModel s;
  s.qe = eta;
  EXPECT_NEAR(intensity_from_counts(27.2, s, 1.0, g, 1e-6, kLambda), kIsat, 1e-12);
}

TEST(MeasureQe, NoiselessBeamIsExact) {
  BeamSpec b;
  b.noiseless = true;
  const auto e = synth_gaussian_beam(b, 1);
  const auto m = measure_qe(e.image, b.power_w, b.t_m, b.lambda, b.sensor.conversion);
  // the synthetic beam is normalized over the finite sensor; the fitted integral is not
  EXPECT_NEAR(m.qe, b.sensor.qe, 1e-4 * b.sensor.qe);
}

TEST(MeasureQe, NoisyBeamWithinOnePercent) {
  BeamSpec b;
  b.sensor.dark_level_adu = 500;
  for (std::uint64_t seed : {3u, 4u}) {
    const auto e = synth_gaussian_beam(b, seed);
    const auto m = measure_qe(e.image, b.power_w, b.t_m, b.lambda, b.sensor.conversion, 0.0015);
    EXPECT_NEAR(m.qe, b.sensor.qe, 0.01 * b.sensor.qe);
    EXPECT_GT(m.qe_sigma, 0.0015 * m.qe);
    EXPECT_LT(m.qe_sigma, 0.01 * m.qe);
  }
}

TEST(QeCampaign, IndependentOfPower) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> N(0.0, 1.0);
  std::vector<QeMeasurement> pts;
  BeamSpec b;
  b.rows = 300;
  b.cols = 240;
  b.width_x = 50;
  b.width_y = 60;
  int k = 0;
  for (double p : {4e-6, 8e-6, 13.05e-6, 20e-6}) {
    b.power_w = p;
    const auto e = synth_gaussian_beam(b, 100 + k++);
    const double read = p * (1 + 0.0015 * N(rng));
    pts.push_back(measure_qe(e.image, read, b.t_m, b.lambda, b.sensor.conversion, 0.0015));
  }
  const auto c = summarize_qe(pts);
  EXPECT_NEAR(c.mean, b.sensor.qe, 0.01 * b.sensor.qe);
  EXPECT_LT(std::abs(c.slope), 3 * c.slope_sigma);
  EXPECT_THROW(summarize_qe({pts[0]}), DomainError);
}

TEST(BeerLambert, LowIntensityIsExponential) {
  for (double od : {0.1, 1.0, 3.0}) {
    const double out = beer_lambert_saturated(gaussian_profile(od, 5e-6), 1e-9);
    EXPECT_NEAR(out / 1e-9, std::exp(-od), 1e-8);
  }
}

TEST(BeerLambert, HighIntensityIsLinear) {
  const double i_in = 1e6, od = 2.0;
  const double out = beer_lambert_saturated(slab_profile(od, 1e-5), i_in);
  EXPECT_NEAR(i_in - out, od, 1e-4);
}

TEST(BeerLambert, ImplicitSolutionAcrossProfiles) {
  const std::vector<double> z{0, 1e-6, 2e-6, 5e-6, 6e-6};
  const std::vector<double> r{0, 3e5, 8e5, 1e5, 0};
  const std::vector<DensityProfile> profiles{gaussian_profile(1.7, 3e-6), slab_profile(1.7, 4e-6),
                                             sampled_profile(z, r)};
  for (const auto& p : profiles)
    for (double i_in : {0.05, 0.8, 3.0, 40.0}) {
      const double out = beer_lambert_saturated(p, i_in);
      EXPECT_NEAR(std::log(i_in / out) + (i_in - out), p.column, 1e-9 * std::max(1.0, p.column));
    }
}

TEST(BeerLambert, OnlyColumnDensityMatters) {
  const double a = beer_lambert_saturated(gaussian_profile(2.5, 1e-6), 1.3);
  const double b = beer_lambert_saturated(slab_profile(2.5, 7e-5), 1.3);
  EXPECT_NEAR(a, b, 1e-10);
}

TEST(BeerLambert, Domain) {
  EXPECT_NEAR(beer_lambert_saturated(slab_profile(0.0, 1e-6), 2.0), 2.0, 1e-14);
  EXPECT_THROW(beer_lambert_saturated(slab_profile(1.0, 1e-6), 0.0), DomainError);
  EXPECT_THROW(sampled_profile({0, 1}, {1, -1}), DomainError);
  EXPECT_THROW(sampled_profile({0, 0}, {1, 1}), DomainError);
}

TEST(OdCorrected, RecoversColumnDensity) {
  const double n_sat = 500;
  for (double od : {0.3, 1.2, 2.5})
    for (double i_in : {0.1, 1.0, 5.0}) {
      const double out = beer_lambert_saturated(gaussian_profile(od, 4e-6), i_in);
      EXPECT_NEAR(od_corrected({out * n_sat, i_in * n_sat, n_sat}), od, 1e-9);
    }
  EXPECT_THROW(od_corrected({0.0, 10, 10}), DomainError);
}

TEST(OdNoise, MatchesMonteCarlo) {
  const double n_sat = 800, n_minus = 1500, od = 0.8;
  const double n_plus = invert_od(od, n_minus, n_sat);
  std::mt19937_64 rng(5);
  std::poisson_distribution<long> P(n_plus);
  double s = 0, s2 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = od_corrected({static_cast<double>(std::max(1L, P(rng))), n_minus, n_sat});
    s += v;
    s2 += v * v;
  }
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_NEAR(sd / od_noise(n_plus, n_sat), 1.0, 0.02);
  EXPECT_NEAR(od_noise(n_plus, n_sat, 2.0), std::sqrt(2.0) * od_noise(n_plus, n_sat), 1e-14);
}

TEST(Snr, InversionIsConsistent) {
  for (double od : {0.01, 0.5, 2.0, 6.0})
    for (double nm : {10.0, 300.0, 5e4}) {
      const double np = invert_od(od, nm, 300);
      EXPECT_NEAR(od_corrected({np, nm, 300}), od, 1e-9);
    }
}

TEST(Snr, LowAndHighIntensityLimits) {
  const double n_sat = 1000, od = 1.0;
  const auto lo = snr_model(od, 1e-3 * n_sat, n_sat);
  EXPECT_NEAR(lo.snr / lo.snr_low_intensity, 1.0, 2e-3);
  const auto hi = snr_model(od, 1e3 * n_sat, n_sat);
  EXPECT_NEAR(hi.snr / hi.snr_high_intensity, 1.0, 0.01);
  EXPECT_LT(snr_model(1e-9, 1e3, n_sat).snr, 1e-7);
}

TEST(Snr, OptimumNearSaturationForThinClouds) {
  const double n_sat = 640;
  EXPECT_NEAR(optimal_probe_counts(1e-3, n_sat) / n_sat, 1.0, 0.01);
  // thicker clouds push the optimum to brighter probes
  EXPECT_GT(optimal_probe_counts(2.0, n_sat), n_sat);
}

TEST(Snr, ExcessNoiseScalesSnr) {
  const auto a = snr_model(1.0, 500, 400, 1.0);
  const auto b = snr_model(1.0, 500, 400, 2.0);
  EXPECT_NEAR(a.snr / b.snr, std::sqrt(2.0), 1e-12);
}

TEST(Snr, InversionFailures) {
  EXPECT_THROW(snr_model(-0.1, 100, 100), DomainError);
  EXPECT_THROW(snr_model(800.0, 100, 100), DomainError);
  EXPECT_EQ(snr_model(0.0, 100, 100).snr, 0.0);
}
