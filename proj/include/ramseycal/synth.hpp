#pragma once

// Forward simulator. Every generator takes explicit ground truth and a seed,
// and is deterministic for fixed inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "ramseycal/constants.hpp"
#include "ramseycal/datasets.hpp"
#include "ramseycal/errors.hpp"
#include "ramseycal/image.hpp"
#include "ramseycal/physics.hpp"
#include "ramseycal/random.hpp"

namespace ramseycal {

struct GroundTruth {
  double n_sat = 27.2;  // counts / pixel / us at I_sat
  double phi0 = 0;      // leakage phase, rad
  double dt0 = 0;       // dead time, s
  AtomSpec atom = rb87_d2();
  SensorModel sensor;
  Image intensity_map;  // relative probe intensity (mean 1); empty means uniform

  void validate() const {
    if (!(n_sat > 0)) throw DomainError("GroundTruth: n_sat must be > 0");
    if (intensity_map.size() > 0 && !(intensity_map > 0).all())
      throw DomainError("GroundTruth: intensity map must be strictly positive");
    atom.validate();
    sensor.validate();
  }
};

// ---------------------------------------------------------------------------
// Ramsey fringes

struct FringeShape {
  double contrast = 0.9;
  double center_shift = 0.0;
};

// N_ADU that a probe of s = I / I_sat produces over `exposure_s`.
inline double n_adu_for(double s, double n_sat, double exposure_s) {
  return s * n_sat * exposure_s / kMicrosecond;
}

inline std::vector<double> uniform_phase_grid(std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = kTwoPi * static_cast<double>(i) / static_cast<double>(n);
  return g;
}

// One fringe. pulse.dt0 is ignored; the truth's dead time applies.
// atoms_per_shot > 0 adds binomial projection noise before the Gaussian noise.
inline FringeDataset synth_fringe_set(const GroundTruth& truth, ProbePulse pulse,
                                      const std::vector<double>& dphi_grid, long atoms_per_shot,
                                      double noise_sigma, std::uint64_t seed,
                                      const FringeShape& shape = {}, double n_adu_exposure_s = 0) {
  if (dphi_grid.size() < 2) throw DomainError("synth_fringe_set: degenerate phase grid");
  pulse.dt0 = truth.dt0;
  pulse.validate();
  const double phi = ramsey_phase_full(pulse, truth.atom) + truth.phi0;
  RamseyParams p{shape.contrast, phi, shape.center_shift, truth.phi0};

  FringeDataset ds;
  ds.dphi = dphi_grid;
  ds.probe.delta_bar = pulse.delta_bar;
  ds.probe.t_p = pulse.t_p;
  ds.probe.n_adu_exposure_s = n_adu_exposure_s > 0 ? n_adu_exposure_s : pulse.t_p;
  ds.probe.n_adu = n_adu_for(pulse.s, truth.n_sat, ds.probe.exposure());
  Rng rng = make_rng(seed);
  for (double x : dphi_grid) {
    double f2 = fringe_model(x, p);
    if (atoms_per_shot > 0) {
      const double q = std::clamp(f2, 0.0, 1.0);
      f2 = static_cast<double>(std::binomial_distribution<long>(atoms_per_shot, q)(rng)) /
           static_cast<double>(atoms_per_shot);
    }
    if (noise_sigma > 0) f2 += noise_sigma * normal(rng);
    ds.f2.push_back(f2);
  }
  return ds;
}

// Sampling plan replicating the intensity / detuning / pulse-time sweeps
// plus an s = 0 leakage set.
struct FringeCampaignSpec {
  std::vector<double> intensity_sweep_n_adu = {250, 500, 750, 1000, 1500, 2000, 2500,
                                               3000, 3500, 4000, 5000, 6000};
  std::vector<double> intensity_sweep_delta_bar = {63.4, 116.2};
  double intensity_sweep_t_p = 20e-6;

  std::vector<double> detuning_sweep_delta_bar = {30, 40, 50, 63.4, 80, 100, 116.2, 140, 170, 200};
  double detuning_sweep_n_adu = 5250;
  double detuning_sweep_t_p = 20e-6;

  std::vector<double> pulse_sweep_t_p = {2e-6, 4e-6, 6e-6, 8e-6, 10e-6, 14e-6,
                                         20e-6, 26e-6, 32e-6, 40e-6};
  double pulse_sweep_delta_bar = 63.4;
  double pulse_sweep_n_adu = 3190;       // recorded at the reference duration below
  double pulse_sweep_reference_t_p = 20e-6;

  std::size_t leakage_fringes = 8;
  double leakage_delta_bar = 63.4;
  double leakage_t_p = 20e-6;

  std::size_t points_per_fringe = 12;
  double noise_sigma = 0.03;
  long atoms_per_shot = 0;
  FringeShape shape;
};

struct FringeCampaign {
  std::vector<FringeDataset> sweeps;
  std::vector<FringeDataset> leakage;
};

inline FringeCampaign synth_fringe_campaign(const GroundTruth& truth, const FringeCampaignSpec& spec,
                                            std::uint64_t seed) {
  truth.validate();
  FringeCampaign out;
  const auto grid = uniform_phase_grid(spec.points_per_fringe);
  std::uint64_t stream = 0;
  auto next_seed = [&] { return mix_seed(seed ^ mix_seed(++stream)); };
  auto s_for = [&](double n_adu, double exposure) {
    return n_adu / (truth.n_sat * exposure / kMicrosecond);
  };
  for (double db : spec.intensity_sweep_delta_bar)
    for (double n : spec.intensity_sweep_n_adu) {
      ProbePulse p{s_for(n, spec.intensity_sweep_t_p), db, spec.intensity_sweep_t_p, 0};
      out.sweeps.push_back(synth_fringe_set(truth, p, grid, spec.atoms_per_shot, spec.noise_sigma,
                                            next_seed(), spec.shape));
    }
  for (double db : spec.detuning_sweep_delta_bar) {
    ProbePulse p{s_for(spec.detuning_sweep_n_adu, spec.detuning_sweep_t_p), db, spec.detuning_sweep_t_p, 0};
    out.sweeps.push_back(synth_fringe_set(truth, p, grid, spec.atoms_per_shot, spec.noise_sigma,
                                          next_seed(), spec.shape));
  }
  for (double tp : spec.pulse_sweep_t_p) {
    ProbePulse p{s_for(spec.pulse_sweep_n_adu, spec.pulse_sweep_reference_t_p), spec.pulse_sweep_delta_bar,
                 tp, 0};
    out.sweeps.push_back(synth_fringe_set(truth, p, grid, spec.atoms_per_shot, spec.noise_sigma,
                                          next_seed(), spec.shape, spec.pulse_sweep_reference_t_p));
  }
  for (std::size_t i = 0; i < spec.leakage_fringes; ++i) {
    ProbePulse p{0.0, spec.leakage_delta_bar, spec.leakage_t_p, 0};
    out.leakage.push_back(synth_fringe_set(truth, p, grid, spec.atoms_per_shot, spec.noise_sigma,
                                           next_seed(), spec.shape));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Probe image stacks

// Relative spatial pattern whose weight drifts from frame to frame.
struct DriftMode {
  Image pattern;           // relative modulation, typically zero-mean with unit amplitude
  double amplitude = 0.05; // rms weight as a fraction of the mean level
  double timescale_s = 1e-3;
};

struct ProbeStackSpec {
  double mean_adu = 1000;  // mean signal above dark, ADU
  Eigen::Index rows = 64, cols = 64;
  Image static_pattern;    // relative mean map (mean 1); empty means flat
  std::vector<DriftMode> drift_modes;
  SensorModel sensor;
  std::size_t n_frames = 35;
  double frame_interval_s = 0.5;
  std::size_t dark_frames = 32;  // averaged into the master dark; 0 stores an exact dark level
  double pixel_pitch_m = 13e-6;
  double exposure_s = 20e-6;
};

// Sinusoidal fringe pattern cos(kx x + ky y + phase), k in rad/pixel.
inline Image fringe_pattern(Eigen::Index rows, Eigen::Index cols, double kx, double ky, double phase) {
  Image img(rows, cols);
  for (Eigen::Index y = 0; y < rows; ++y)
    for (Eigen::Index x = 0; x < cols; ++x)
      img(y, x) = std::cos(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
  return img;
}

inline Image dark_frame(const SensorModel& s, Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Image d(rows, cols);
  for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = s.dark_level_adu + s.read_noise_adu * normal(rng);
  return d;
}

// Converts an expected photoelectron map to ADU with shot, excess and read noise.
inline Image expose(const Image& expected_pe, const SensorModel& s, Rng& rng) {
  Image out(expected_pe.rows(), expected_pe.cols());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double pe = sample_photoelectrons(expected_pe(i), s.excess_noise_factor, rng);
    out(i) = s.conversion * pe + s.read_noise_adu * normal(rng) + s.dark_level_adu;
  }
  return out;
}

inline ImageStack synth_probe_stack(const ProbeStackSpec& spec, std::uint64_t seed) {
  if (!(spec.mean_adu > 0)) throw DomainError("synth_probe_stack: mean_adu must be > 0");
  spec.sensor.validate();
  for (const auto& m : spec.drift_modes)
    if (m.pattern.rows() != spec.rows || m.pattern.cols() != spec.cols)
      throw DomainError("synth_probe_stack: drift mode shape mismatch");
  const Image base = spec.static_pattern.size() > 0 ? spec.static_pattern
                                                    : Image::Ones(spec.rows, spec.cols).eval();

  ImageStack st;
  st.pixel_pitch_m = spec.pixel_pitch_m;
  st.exposure_s = spec.exposure_s;

  // Drift weights follow an AR(1) process with correlation exp(-dt / tau).
  Rng weights_rng = make_rng(seed, 0);
  std::vector<std::vector<double>> w(spec.drift_modes.size(), std::vector<double>(spec.n_frames));
  for (std::size_t k = 0; k < spec.drift_modes.size(); ++k) {
    const auto& mode = spec.drift_modes[k];
    const double rho = std::exp(-spec.frame_interval_s / mode.timescale_s);
    double c = mode.amplitude * normal(weights_rng);
    for (std::size_t i = 0; i < spec.n_frames; ++i) {
      if (i > 0) c = rho * c + std::sqrt(1.0 - rho * rho) * mode.amplitude * normal(weights_rng);
      w[k][i] = c;
    }
  }
  for (std::size_t i = 0; i < spec.n_frames; ++i) {
    Image rel = base;
    for (std::size_t k = 0; k < spec.drift_modes.size(); ++k) rel += w[k][i] * spec.drift_modes[k].pattern;
    const Image expected_pe = (spec.mean_adu * rel / spec.sensor.conversion).cwiseMax(0.0);
    Rng rng = make_rng(seed, 1000 + i);
    st.frames.push_back(expose(expected_pe, spec.sensor, rng));
  }
  if (spec.dark_frames == 0) {
    st.dark = Image::Constant(spec.rows, spec.cols, spec.sensor.dark_level_adu);
  } else {
    Image acc = Image::Zero(spec.rows, spec.cols);
    Rng rng = make_rng(seed, 1);
    for (std::size_t i = 0; i < spec.dark_frames; ++i) acc += dark_frame(spec.sensor, spec.rows, spec.cols, rng);
    st.dark = acc / static_cast<double>(spec.dark_frames);
  }
  return st;
}

// ---------------------------------------------------------------------------
// Time-of-flight shots with two Stern-Gerlach separated clouds

struct StripeSpec {
  double kx = 0, ky = 0;  // rad / pixel
  double amplitude = 0;   // relative density modulation
};

struct TofShotSpec {
  Eigen::Index rows = 160, cols = 120;
  double radius_x = 30, radius_y = 24;  // Thomas-Fermi radii in TOF pixels
  double center_x = 60, center_y = 40;  // nominal g1 cloud center
  double sg_dx = 0, sg_dy = 80;         // g2 displacement relative to g1
  double atom_number = 7e4;
  double counts_per_atom = 1.0;
  double read_noise = 0;
  bool shot_noise = true;
  double jitter_px = 0;  // rms global center jitter
  StripeSpec stripes;
  // f2 as a function of the offset (dx, dy) from the cloud center, TOF pixels.
  std::function<double(double, double)> f2 = [](double, double) { return 0.5; };
};

struct TofShot {
  Image image;
  double g1_x = 0, g1_y = 0, g2_x = 0, g2_y = 0;  // realized centers
};

inline TofShot synth_tof_shot(const TofShotSpec& spec, std::uint64_t seed) {
  const double ex = spec.sg_dx / (2.0 * spec.radius_x), ey = spec.sg_dy / (2.0 * spec.radius_y);
  if (ex * ex + ey * ey < 1.0) throw DomainError("synth_tof_shot: clouds overlap after displacement");
  Rng rng = make_rng(seed);
  TofShot shot;
  const double jx = spec.jitter_px * normal(rng), jy = spec.jitter_px * normal(rng);
  shot.g1_x = spec.center_x + jx;
  shot.g1_y = spec.center_y + jy;
  shot.g2_x = shot.g1_x + spec.sg_dx;
  shot.g2_y = shot.g1_y + spec.sg_dy;
  auto inside = [&](double cx, double cy) {
    return cx - spec.radius_x >= 0 && cy - spec.radius_y >= 0 &&
           cx + spec.radius_x <= static_cast<double>(spec.cols - 1) &&
           cy + spec.radius_y <= static_cast<double>(spec.rows - 1);
  };
  if (!inside(shot.g1_x, shot.g1_y) || !inside(shot.g2_x, shot.g2_y))
    throw DomainError("synth_tof_shot: a cloud extends beyond the image");

  const double peak = spec.atom_number * 5.0 / (2.0 * kPi * spec.radius_x * spec.radius_y);
  const double ph1 = kTwoPi * std::uniform_real_distribution<double>()(rng);
  const double ph2 = kTwoPi * std::uniform_real_distribution<double>()(rng);
  auto profile = [&](double dx, double dy) {
    const double u = dx / spec.radius_x, v = dy / spec.radius_y;
    const double q = 1.0 - u * u - v * v;
    return q > 0 ? peak * q * std::sqrt(q) : 0.0;
  };
  shot.image.resize(spec.rows, spec.cols);
  for (Eigen::Index y = 0; y < spec.rows; ++y)
    for (Eigen::Index x = 0; x < spec.cols; ++x) {
      const double X = static_cast<double>(x), Y = static_cast<double>(y);
      const double d1x = X - shot.g1_x, d1y = Y - shot.g1_y;
      const double d2x = X - shot.g2_x, d2y = Y - shot.g2_y;
      double n1 = profile(d1x, d1y), n2 = profile(d2x, d2y);
      if (n1 > 0) n1 *= 1.0 - spec.f2(d1x, d1y);
      if (n2 > 0) n2 *= spec.f2(d2x, d2y);
      if (spec.stripes.amplitude != 0) {
        n1 *= 1.0 + spec.stripes.amplitude * std::cos(spec.stripes.kx * d1x + spec.stripes.ky * d1y + ph1);
        n2 *= 1.0 + spec.stripes.amplitude * std::cos(spec.stripes.kx * d2x + spec.stripes.ky * d2y + ph2);
      }
      double atoms = std::max(n1 + n2, 0.0);
      if (spec.shot_noise) atoms = sample_photoelectrons(atoms, 1.0, rng);
      shot.image(y, x) = spec.counts_per_atom * atoms + spec.read_noise * normal(rng);
    }
  return shot;
}

// ---------------------------------------------------------------------------
// Pixel-map campaign: TOF shots over a grid of probe levels and Ramsey phases

struct MapCampaignSpec {
  TofShotSpec shot;
  std::vector<double> n_adu_levels = {1000, 2000, 3000, 4000, 5000};
  double delta_bar = 63.4;
  double t_p = 20e-6;
  std::vector<double> dphi_grid = uniform_phase_grid(5);
  std::size_t shots_per_point = 1;
  std::size_t reference_shots = 4;  // probe off: spatially uniform f2
  FringeShape shape;
  // Probe intensity at the atoms relative to the calibrated level, as a function
  // of the offset (dx, dy) from the cloud center in TOF pixels. When unset, the
  // truth's intensity_map is sampled about its center; when both are empty it is 1.
  std::function<double(double, double)> relative_intensity;
};

struct MapCampaign {
  std::vector<double> dphi_grid;
  std::vector<ProbeMeta> probes;                        // one per level
  std::vector<std::vector<std::vector<Image>>> shots;  // [level][dphi][repeat]
  std::vector<Image> reference;                        // probe off, for cloud registration
};

inline MapCampaign synth_map_campaign(const GroundTruth& truth, const MapCampaignSpec& spec, std::uint64_t seed) {
  truth.validate();
  if (spec.n_adu_levels.empty() || spec.dphi_grid.empty() || spec.shots_per_point == 0)
    throw DomainError("synth_map_campaign: empty level, phase or repeat grid");
  std::function<double(double, double)> rel = spec.relative_intensity;
  if (!rel && truth.intensity_map.size() > 0) {
    const Image map = truth.intensity_map;
    const double cx = 0.5 * static_cast<double>(map.cols() - 1), cy = 0.5 * static_cast<double>(map.rows() - 1);
    rel = [map, cx, cy](double dx, double dy) {
      const double x = std::clamp(cx + dx, 0.0, static_cast<double>(map.cols() - 1));
      const double y = std::clamp(cy + dy, 0.0, static_cast<double>(map.rows() - 1));
      return sample_bilinear(map, x, y);
    };
  }
  if (!rel) rel = [](double, double) { return 1.0; };

  MapCampaign out;
  out.dphi_grid = spec.dphi_grid;
  std::uint64_t stream = 0;
  for (std::size_t r = 0; r < spec.reference_shots; ++r) {
    TofShotSpec shot = spec.shot;
    const double dphi = spec.dphi_grid[r % spec.dphi_grid.size()];
    const RamseyParams p{spec.shape.contrast, truth.phi0, spec.shape.center_shift, truth.phi0};
    const double f2 = std::clamp(fringe_model(dphi, p), 0.0, 1.0);
    shot.f2 = [f2](double, double) { return f2; };
    out.reference.push_back(synth_tof_shot(shot, mix_seed(seed ^ mix_seed(++stream))).image);
  }
  for (double n_adu : spec.n_adu_levels) {
    ProbeMeta meta{n_adu, 0, spec.delta_bar, spec.t_p};
    out.probes.push_back(meta);
    const double s = n_adu / (truth.n_sat * spec.t_p / kMicrosecond);
    auto& level = out.shots.emplace_back();
    for (double dphi : spec.dphi_grid) {
      TofShotSpec shot = spec.shot;
      shot.f2 = [&, s, dphi](double dx, double dy) {
        const ProbePulse pulse{s * rel(dx, dy), spec.delta_bar, spec.t_p, truth.dt0};
        const RamseyParams p{spec.shape.contrast, ramsey_phase_full(pulse, truth.atom) + truth.phi0,
                             spec.shape.center_shift, truth.phi0};
        return std::clamp(fringe_model(dphi, p), 0.0, 1.0);
      };
      auto& reps = level.emplace_back();
      for (std::size_t r = 0; r < spec.shots_per_point; ++r)
        reps.push_back(synth_tof_shot(shot, mix_seed(seed ^ mix_seed(++stream))).image);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// RF traces with a phase update at a jittered time

struct RfTraceSpec {
  double frequency = 100e6;      // Hz
  double phase_before = 0;       // cycles, phase of the waveform before the update
  double phase_cmd = 0;          // cycles, commanded phase after the update
  double t0_jitter = 0;          // s, half-width of the uniform update-time jitter
  double noise_sigma = 0;        // additive white noise, in units of the amplitude
  double amplitude = 1.0;
  double offset = 0.0;
  double duration = 2e-6;        // s
  double sample_rate = 5e9;      // samples / s
  double update_time = -1;       // s; negative means duration / 2
};

struct RfTrace {
  Trace trace;
  double update_time = 0;    // nominal update time
  double realized_t0 = 0;    // actual update time including jitter
  double realized_dphi = 0;  // rad in (-pi, pi], phase after minus phase before
  double commanded_dphi = 0; // rad in (-pi, pi]
};

// Before the update the waveform is sin(2 pi f (t - t_u) + 2 pi phase_before);
// after it the synthesizer restarts from phase_cmd at the jittered time t0:
// sin(2 pi f (t - t0) + 2 pi phase_cmd).
inline RfTrace synth_rf_trace(const RfTraceSpec& spec, std::uint64_t seed) {
  if (!(spec.sample_rate > 4.0 * spec.frequency)) throw DomainError("synth_rf_trace: sample_rate must exceed 4 f");
  Rng rng = make_rng(seed);
  RfTrace out;
  out.update_time = spec.update_time >= 0 ? spec.update_time : 0.5 * spec.duration;
  out.realized_t0 = out.update_time + spec.t0_jitter * std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
  const auto n = static_cast<std::size_t>(std::floor(spec.duration * spec.sample_rate));
  out.trace.f_nominal = spec.frequency;
  out.trace.t.resize(n);
  out.trace.v.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / spec.sample_rate;
    const double arg = t < out.realized_t0
                           ? kTwoPi * spec.frequency * (t - out.update_time) + kTwoPi * spec.phase_before
                           : kTwoPi * spec.frequency * (t - out.realized_t0) + kTwoPi * spec.phase_cmd;
    out.trace.t[i] = t;
    out.trace.v[i] = spec.amplitude * (std::sin(arg) + spec.noise_sigma * normal(rng)) + spec.offset;
  }
  // Both segments referenced to t_u: the after-phase is 2 pi (phase_cmd - f (t0 - t_u)).
  out.realized_dphi = wrap_phase(kTwoPi * (spec.phase_cmd - spec.phase_before) -
                                 kTwoPi * spec.frequency * (out.realized_t0 - out.update_time));
  out.commanded_dphi = wrap_phase(kTwoPi * spec.phase_cmd);
  return out;
}

// ---------------------------------------------------------------------------
// Collimated Gaussian beam on the sensor

struct BeamSpec {
  double power_w = 13.05e-6;
  double t_m = 18.54e-6;
  double width_x = 80, width_y = 120;  // 1/e^2 radii, pixels
  double center_x = -1, center_y = -1; // negative means image center
  Eigen::Index rows = 520, cols = 360;
  double lambda = 780e-9;
  SensorModel sensor;
  double saturation_adu = std::numeric_limits<double>::infinity();
  bool noiseless = false;
};

struct BeamExposure {
  Image image;                 // raw ADU including the dark level
  double n_photons = 0;
  double expected_total_adu = 0;  // above dark, C * QE * N_ph
};

inline BeamExposure synth_gaussian_beam(const BeamSpec& spec, std::uint64_t seed) {
  spec.sensor.validate();
  const double cx = spec.center_x >= 0 ? spec.center_x : 0.5 * static_cast<double>(spec.cols - 1);
  const double cy = spec.center_y >= 0 ? spec.center_y : 0.5 * static_cast<double>(spec.rows - 1);
  // 4 standard deviations (two 1/e^2 radii) of margin on every side.
  if (cx - 2 * spec.width_x < 0 || cy - 2 * spec.width_y < 0 ||
      cx + 2 * spec.width_x > static_cast<double>(spec.cols - 1) ||
      cy + 2 * spec.width_y > static_cast<double>(spec.rows - 1))
    throw DomainError("synth_gaussian_beam: beam does not fit within the sensor with 4 sigma margins");

  BeamExposure out;
  out.n_photons = spec.power_w * spec.t_m * spec.lambda / (kPlanck * kSpeedOfLight);
  const double total_pe = spec.sensor.qe * out.n_photons;
  out.expected_total_adu = spec.sensor.conversion * total_pe;

  Image prof(spec.rows, spec.cols);
  for (Eigen::Index y = 0; y < spec.rows; ++y)
    for (Eigen::Index x = 0; x < spec.cols; ++x) {
      const double u = (static_cast<double>(x) - cx) / spec.width_x;
      const double v = (static_cast<double>(y) - cy) / spec.width_y;
      prof(y, x) = std::exp(-2.0 * (u * u + v * v));
    }
  const Image expected_pe = prof * (total_pe / prof.sum());
  const double peak_adu = spec.sensor.conversion * expected_pe.maxCoeff() + spec.sensor.dark_level_adu;
  if (peak_adu > spec.saturation_adu) throw DomainError("synth_gaussian_beam: pixels would saturate");

  if (spec.noiseless) {
    out.image = spec.sensor.conversion * expected_pe + spec.sensor.dark_level_adu;
  } else {
    Rng rng = make_rng(seed);
    out.image = expose(expected_pe, spec.sensor, rng);
  }
  return out;
}

}  // namespace ramseycal
