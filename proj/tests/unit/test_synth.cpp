#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ramseycal/physics.hpp"
#include "ramseycal/synth.hpp"

using namespace ramseycal;

namespace {

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double var_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

// Per-pixel temporal variance averaged over the frame.
double temporal_variance(const ImageStack& st) {
  const auto n = static_cast<double>(st.frames.size());
  Image mean = Image::Zero(st.rows(), st.cols()), sq = mean;
  for (const auto& f : st.frames) {
    mean += f;
    sq += f * f;
  }
  mean /= n;
  return ((sq - n * mean * mean) / (n - 1)).mean();
}

}  // namespace

// ---------------------------------------------------------------------------
// Fringes

TEST(SynthFringe, NoiselessMatchesModel) {
  GroundTruth g;
  g.phi0 = 0.3;
  g.dt0 = 1.6e-6;
  const ProbePulse p{0.8, 63.4, 20e-6, 0};
  const auto grid = uniform_phase_grid(9);
  const auto ds = synth_fringe_set(g, p, grid, 0, 0, 1, {0.85, 0.02});
  ProbePulse with_dt0 = p;
  with_dt0.dt0 = g.dt0;
  const RamseyParams rp{0.85, ramsey_phase_full(with_dt0, g.atom) + g.phi0, 0.02, g.phi0};
  ASSERT_EQ(ds.f2.size(), grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(ds.f2[i], fringe_model(grid[i], rp), 1e-15);
  EXPECT_DOUBLE_EQ(ds.probe.n_adu, n_adu_for(0.8, g.n_sat, 20e-6));
  EXPECT_DOUBLE_EQ(ds.probe.n_adu, 0.8 * 27.2 * 20);
}

TEST(SynthFringe, GaussianNoiseLevel) {
  GroundTruth g;
  const ProbePulse p{1.0, 63.4, 20e-6, 0};
  const auto grid = uniform_phase_grid(400);
  const auto clean = synth_fringe_set(g, p, grid, 0, 0, 1);
  const auto noisy = synth_fringe_set(g, p, grid, 0, 0.03, 2);
  std::vector<double> r;
  for (std::size_t i = 0; i < grid.size(); ++i) r.push_back(noisy.f2[i] - clean.f2[i]);
  EXPECT_NEAR(std::sqrt(var_of(r)), 0.03, 0.003);
  EXPECT_NEAR(mean_of(r), 0.0, 0.006);
}

TEST(SynthFringe, ProjectionNoiseIsBinomial) {
  GroundTruth g;
  const ProbePulse p{0.0, 63.4, 20e-6, 0};
  const std::vector<double> grid(2000, kPi / 2);  // f2 = 0.5 for contrast 1
  const auto ds = synth_fringe_set(g, p, grid, 400, 0, 5, {1.0, 0.0});
  for (double v : ds.f2) EXPECT_NEAR(v * 400, std::round(v * 400), 1e-9);
  EXPECT_NEAR(mean_of(ds.f2), 0.5, 0.003);
  EXPECT_NEAR(var_of(ds.f2), 0.25 / 400, 0.1 * 0.25 / 400);
}

TEST(SynthFringe, CampaignLayout) {
  GroundTruth g;
  FringeCampaignSpec s;
  const auto c = synth_fringe_campaign(g, s, 11);
  ASSERT_EQ(c.sweeps.size(), 2 * 12 + 10 + 10u);
  EXPECT_EQ(c.leakage.size(), 8u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_NEAR(c.sweeps[i].probe.n_adu, s.intensity_sweep_n_adu[i], 1e-9);
    EXPECT_DOUBLE_EQ(c.sweeps[i].probe.delta_bar, 63.4);
    EXPECT_DOUBLE_EQ(c.sweeps[12 + i].probe.delta_bar, 116.2);
  }
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& d = c.sweeps[24 + i];
    EXPECT_NEAR(d.probe.n_adu, 5250, 1e-9);
    EXPECT_DOUBLE_EQ(d.probe.delta_bar, s.detuning_sweep_delta_bar[i]);
  }
  // pulse-time sweep: N_ADU quoted at the reference duration, so it stays fixed
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& d = c.sweeps[34 + i];
    EXPECT_NEAR(d.probe.n_adu, 3190, 1e-9);
    EXPECT_DOUBLE_EQ(d.probe.n_adu_exposure_s, 20e-6);
    EXPECT_DOUBLE_EQ(d.probe.t_p, s.pulse_sweep_t_p[i]);
  }
  for (const auto& d : c.leakage) EXPECT_DOUBLE_EQ(d.probe.n_adu, 0.0);
}

TEST(SynthFringe, DeterministicPerSeed) {
  GroundTruth g;
  FringeCampaignSpec s;
  const auto a = synth_fringe_campaign(g, s, 3), b = synth_fringe_campaign(g, s, 3), c = synth_fringe_campaign(g, s, 4);
  for (std::size_t i = 0; i < a.sweeps.size(); ++i) EXPECT_EQ(a.sweeps[i].f2, b.sweeps[i].f2);
  EXPECT_NE(a.sweeps[0].f2, c.sweeps[0].f2);
  // different fringes draw from distinct streams
  EXPECT_NE(a.leakage[0].f2, a.leakage[1].f2);
}

// ---------------------------------------------------------------------------
// Probe stacks

TEST(SynthStack, MeanLevelAndDark) {
  ProbeStackSpec s;
  s.mean_adu = 3000;
  s.sensor.dark_level_adu = 200;
  s.n_frames = 20;
  const auto st = synth_probe_stack(s, 7);
  ASSERT_EQ(st.frames.size(), 20u);
  ASSERT_TRUE(st.dark.has_value());
  double m = 0;
  for (const auto& f : st.frames) m += (f - *st.dark).mean();
  EXPECT_NEAR(m / 20, 3000, 3000 * 2e-3);
  EXPECT_NEAR(st.dark->mean(), 200, 0.5);
  // master dark of 32 frames: per-pixel spread read_noise / sqrt(32)
  EXPECT_NEAR(std::sqrt((*st.dark - st.dark->mean()).square().mean()), 32 / std::sqrt(32.0), 0.5);
  EXPECT_DOUBLE_EQ(st.exposure_s, s.exposure_s);
}

TEST(SynthStack, VarianceScalesWithExcessNoise) {
  // Without drift, var = F^2 C S + sigma_r^2 (+ dark averaging noise, which cancels in time)
  for (double f2 : {1.0, 2.0}) {
    ProbeStackSpec s;
    s.mean_adu = 4000;
    s.sensor.excess_noise_factor = f2;
    s.n_frames = 40;
    const auto st = synth_probe_stack(s, 9);
    const double expected = f2 * s.sensor.conversion * s.mean_adu + s.sensor.read_noise_adu * s.sensor.read_noise_adu;
    EXPECT_NEAR(temporal_variance(st) / expected, 1.0, 0.02) << "F^2 = " << f2;
  }
}

TEST(SynthStack, LowLevelPoissonBranch) {
  // below 20 pe per pixel the sampler is a scaled Poisson variable
  ProbeStackSpec s;
  s.sensor.read_noise_adu = 0;
  s.sensor.excess_noise_factor = 2.0;
  s.mean_adu = 5 * s.sensor.conversion;  // 5 pe
  s.n_frames = 60;
  s.dark_frames = 0;
  const auto st = synth_probe_stack(s, 13);
  const double expected = 2.0 * s.sensor.conversion * s.mean_adu;
  EXPECT_NEAR(temporal_variance(st) / expected, 1.0, 0.03);
  for (Eigen::Index i = 0; i < 50; ++i) {
    const double pe = st.frames[0](i) / s.sensor.conversion;
    EXPECT_NEAR(std::fmod(pe + 1e-9, 2.0), 0.0, 1e-6);
  }
}

TEST(SynthStack, DriftAddsCorrelatedVariance) {
  ProbeStackSpec s;
  s.mean_adu = 4000;
  s.n_frames = 35;
  DriftMode m;
  m.pattern = fringe_pattern(s.rows, s.cols, 0.2, 0.1, 0.0);
  m.amplitude = 0.05;
  m.timescale_s = 1e-3;  // much shorter than the frame interval: independent weights
  s.drift_modes = {m};
  const auto st = synth_probe_stack(s, 21);
  const double shot = s.sensor.excess_noise_factor * s.sensor.conversion * s.mean_adu + 32.0 * 32.0;
  const double drift = std::pow(0.05 * 4000, 2) * 0.5;  // <cos^2> = 1/2
  EXPECT_NEAR(temporal_variance(st) / (shot + drift), 1.0, 0.3);
  EXPECT_GT(temporal_variance(st), 1.1 * shot);
}

TEST(SynthStack, DeterministicAndShapeChecked) {
  ProbeStackSpec s;
  s.n_frames = 4;
  const auto a = synth_probe_stack(s, 5), b = synth_probe_stack(s, 5), c = synth_probe_stack(s, 6);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_TRUE((a.frames[i] == b.frames[i]).all());
  EXPECT_FALSE((a.frames[0] == c.frames[0]).all());
  DriftMode m;
  m.pattern = Image::Zero(3, 3);
  s.drift_modes = {m};
  EXPECT_THROW(synth_probe_stack(s, 1), DomainError);
  s.drift_modes.clear();
  s.mean_adu = 0;
  EXPECT_THROW(synth_probe_stack(s, 1), DomainError);
}

// ---------------------------------------------------------------------------
// Beams

TEST(SynthBeam, PhotonNumberAndNormalization) {
  BeamSpec b;
  b.lambda = 780e-9;
  b.noiseless = true;
  const auto e = synth_gaussian_beam(b, 1);
  EXPECT_NEAR(e.n_photons / 950031732.9104596 - 1, 0.0, 1e-12);
  EXPECT_NEAR((e.image - b.sensor.dark_level_adu).sum() / e.expected_total_adu - 1, 0.0, 1e-12);
  EXPECT_NEAR(e.expected_total_adu, b.sensor.conversion * b.sensor.qe * e.n_photons, 1e-6 * e.expected_total_adu);
  // peak at the image centre
  Eigen::Index r, c;
  e.image.maxCoeff(&r, &c);
  EXPECT_NEAR(static_cast<double>(r), 0.5 * static_cast<double>(b.rows - 1), 0.5);
  EXPECT_NEAR(static_cast<double>(c), 0.5 * static_cast<double>(b.cols - 1), 0.5);
}

TEST(SynthBeam, NoisyTotalWithinShotNoise) {
  BeamSpec b;
  const auto e = synth_gaussian_beam(b, 2);
  const double total = (e.image - b.sensor.dark_level_adu).sum();
  const double pe = e.expected_total_adu / b.sensor.conversion;
  const double sd = b.sensor.conversion * std::sqrt(b.sensor.excess_noise_factor * pe) +
                    b.sensor.read_noise_adu * std::sqrt(static_cast<double>(b.rows * b.cols));
  EXPECT_LT(std::abs(total - e.expected_total_adu), 5 * sd);
}

TEST(SynthBeam, MarginAndSaturationGuards) {
  BeamSpec b;
  b.width_x = 100;  // 2 radii = 200 > 179.5
  EXPECT_THROW(synth_gaussian_beam(b, 1), DomainError);
  b = BeamSpec{};
  b.saturation_adu = 100;
  EXPECT_THROW(synth_gaussian_beam(b, 1), DomainError);
}

// ---------------------------------------------------------------------------
// Time-of-flight shots and map campaigns

TEST(SynthTof, AtomNumberConserved) {
  TofShotSpec s;
  s.shot_noise = false;
  s.f2 = [](double dx, double) { return 0.3 + 0.002 * dx; };
  const auto shot = synth_tof_shot(s, 1);
  EXPECT_NEAR(shot.image.sum() / s.atom_number, 1.0, 0.01);
  // cloud 1 carries 1 - f2, cloud 2 carries f2
  const double top = shot.image.topRows(80).sum(), bottom = shot.image.bottomRows(80).sum();
  EXPECT_NEAR(bottom / (top + bottom), 0.3, 0.01);
}

TEST(SynthTof, GeometryGuards) {
  TofShotSpec s;
  s.sg_dy = 30;
  EXPECT_THROW(synth_tof_shot(s, 1), DomainError);
  s = TofShotSpec{};
  s.center_x = 20;
  EXPECT_THROW(synth_tof_shot(s, 1), DomainError);
}

TEST(SynthMap, LayoutAndUniformMapEquivalence) {
  GroundTruth g;
  MapCampaignSpec s;
  s.shots_per_point = 2;
  s.n_adu_levels = {1000, 3000};
  s.dphi_grid = uniform_phase_grid(3);
  const auto a = synth_map_campaign(g, s, 17);
  ASSERT_EQ(a.shots.size(), 2u);
  ASSERT_EQ(a.shots[0].size(), 3u);
  ASSERT_EQ(a.shots[0][0].size(), 2u);
  EXPECT_EQ(a.reference.size(), 4u);
  EXPECT_EQ(a.probes[1].n_adu, 3000);
  // an all-ones intensity map is the same as no map
  GroundTruth ones = g;
  ones.intensity_map = Image::Ones(160, 120);
  const auto b = synth_map_campaign(ones, s, 17);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t d = 0; d < 3; ++d) EXPECT_TRUE((a.shots[l][d][1] == b.shots[l][d][1]).all());
  // and a non-uniform one changes the second cloud
  GroundTruth grad = g;
  grad.intensity_map = Image::Ones(160, 120);
  for (Eigen::Index x = 0; x < 120; ++x) grad.intensity_map.col(x) *= 1 + 0.004 * (static_cast<double>(x) - 59.5);
  const auto c = synth_map_campaign(grad, s, 17);
  EXPECT_FALSE((a.shots[1][1][0] == c.shots[1][1][0]).all());
  EXPECT_TRUE((a.reference[0] == c.reference[0]).all());
}

// ---------------------------------------------------------------------------
// RF traces

TEST(SynthRf, NoiselessTraceFollowsModel) {
  RfTraceSpec s;
  s.phase_before = 0.1;
  s.phase_cmd = 0.35;
  s.t0_jitter = 30e-9;
  const auto tr = synth_rf_trace(s, 8);
  EXPECT_LE(std::abs(tr.realized_t0 - tr.update_time), 30e-9);
  ASSERT_EQ(tr.trace.t.size(), 10000u);
  for (std::size_t i = 0; i < tr.trace.t.size(); i += 37) {
    const double t = tr.trace.t[i];
    const double want = t < tr.realized_t0 ? std::sin(kTwoPi * s.frequency * (t - tr.update_time) + kTwoPi * 0.1)
                                           : std::sin(kTwoPi * s.frequency * (t - tr.realized_t0) + kTwoPi * 0.35);
    EXPECT_NEAR(tr.trace.v[i], want, 1e-12);
  }
  EXPECT_NEAR(tr.realized_dphi,
              wrap_phase(kTwoPi * 0.25 - kTwoPi * s.frequency * (tr.realized_t0 - tr.update_time)), 1e-12);
  EXPECT_NEAR(tr.commanded_dphi, wrap_phase(kTwoPi * 0.35), 1e-15);
}

TEST(SynthRf, JitterIsUniformWithinBound) {
  RfTraceSpec s;
  s.t0_jitter = 30e-9;
  s.duration = 200e-9;
  std::vector<double> d;
  for (std::uint64_t k = 0; k < 4000; ++k) {
    const auto tr = synth_rf_trace(s, k);
    d.push_back(tr.realized_t0 - tr.update_time);
    ASSERT_LE(std::abs(d.back()), 30e-9);
  }
  EXPECT_NEAR(mean_of(d), 0, 1.5e-9);
  EXPECT_NEAR(std::sqrt(var_of(d)), 30e-9 / std::sqrt(3.0), 1e-9);
}

TEST(SynthRf, NyquistGuard) {
  RfTraceSpec s;
  s.sample_rate = 3.9e8;
  EXPECT_THROW(synth_rf_trace(s, 1), DomainError);
}
