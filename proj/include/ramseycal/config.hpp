#pragma once

// Run configuration. Every physical quantity is SI with the unit spelled out as
// a key suffix (dt0_s, lambda_m, gamma_rad_per_s). One schema description drives
// both parsing and the resolved-config echo, so the two cannot drift apart.

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "ramseycal/errors.hpp"
#include "ramseycal/fringe_cal.hpp"
#include "ramseycal/rf_phase.hpp"
#include "ramseycal/io.hpp"
#include "ramseycal/photometry.hpp"
#include "ramseycal/pixel_map.hpp"
#include "ramseycal/synth.hpp"

namespace ramseycal {

struct SensorCampaignConfig {
  std::vector<double> levels_adu = {500, 900, 1400, 2000, 3000, 4200, 6000, 8000};
  std::size_t frames = 35;
  Eigen::Index rows = 72, cols = 72;
  std::size_t drift_modes = 3;
  double drift_amplitude = 0.05;  // rms weight, fraction of the mean level
  double drift_timescale_s = 1e-3;
  double frame_interval_s = 0.5;
  std::size_t dark_frames = 32;
  Rect roi{4, 4, 64, 64};
};

struct QeCampaignConfig {
  std::vector<double> powers_w = {6e-6, 9e-6, 13.05e-6, 17e-6, 21e-6};
  double t_m_s = 18.54e-6;
  double width_x_px = 80, width_y_px = 120;  // 1/e^2 radii
  Eigen::Index rows = 520, cols = 360;
  double power_rel_sigma = 1.5e-3;
};

struct SnrConfig {
  std::vector<double> od = {0.1, 0.5, 1.0, 2.0, 3.0};
  double exposure_s = 20e-6;  // N_sat per pixel = n_sat * exposure
  double ratio_min = 0.01, ratio_max = 100;  // n_minus / N_sat range of the curves
  std::size_t points = 81;
};

struct RfConfig {
  RfTraceSpec trace;
  std::size_t traces = 500;
  double guard_s = 0;  // 0 means the jitter bound plus two periods
};

struct MapConfig {
  MapCampaignSpec campaign;
  std::size_t phase_points = 5;
  double gradient_x_per_px = 0;  // relative intensity slope across the cloud, per TOF pixel
  double gradient_y_per_px = 0;
  MapPipelineOptions analysis;
};

struct FringeConfig {
  FringeCampaignSpec campaign;
  JointFitOptions fit;
  double exclude_delta_bar_below = 0;  // sawtooth outliers: near resonant and
  double exclude_saturation_above = 0; // intense; 0 disables the intensity limit
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  GroundTruth truth;
  ImagingGeometry geometry;
  FringeConfig fringe;
  MapConfig map;
  SensorCampaignConfig sensor;
  QeCampaignConfig qe;
  SnrConfig snr;
  RfConfig rf;
  std::vector<std::string> simulate = {"fringe_campaign", "map_campaign", "sensor_stacks", "qe_beams", "rf_traces"};

  SawtoothOptions sawtooth() const {
    SawtoothOptions o;
    o.near_resonant_delta_bar = fringe.exclude_delta_bar_below;
    if (fringe.exclude_saturation_above > 0) o.high_intensity_s = fringe.exclude_saturation_above;
    return o;
  }
  double snr_n_sat_counts() const { return truth.n_sat * snr.exposure_s / kMicrosecond; }
  double rf_guard() const {
    return rf.guard_s > 0 ? rf.guard_s : rf.trace.t0_jitter + default_guard(rf.trace.frequency);
  }
};

inline const std::vector<std::string>& dataset_kinds() {
  static const std::vector<std::string> k = {"fringe_campaign", "map_campaign", "sensor_stacks", "qe_beams",
                                             "rf_traces"};
  return k;
}

// ---------------------------------------------------------------------------
// Schema visitors

enum class Rule { any, positive, nonneg, unit_interval, nonzero };

namespace detail {

inline std::string pointer_escape(std::string_view key) {
  std::string out;
  for (char c : key) {
    if (c == '~') out += "~0";
    else if (c == '/') out += "~1";
    else out += c;
  }
  return out;
}

inline std::string key_of(std::string_view stem, std::string_view unit) {
  return unit.empty() ? std::string(stem) : std::string(stem) + "_" + std::string(unit);
}

inline const char* rule_violation(double v, Rule r) {
  switch (r) {
    case Rule::positive: return v > 0 ? nullptr : "must be > 0";
    case Rule::nonneg: return v >= 0 ? nullptr : "must be >= 0";
    case Rule::unit_interval: return v >= 0 && v <= 1 ? nullptr : "must lie in [0, 1]";
    case Rule::nonzero: return v != 0 ? nullptr : "must be nonzero";
    case Rule::any: break;
  }
  return std::isfinite(v) ? nullptr : "must be finite";
}

template <class T> struct is_std_vector : std::false_type {};
template <class T> struct is_std_vector<std::vector<T>> : std::true_type {};
template <class T> struct is_std_array : std::false_type {};
template <class T, std::size_t N> struct is_std_array<std::array<T, N>> : std::true_type {};

}  // namespace detail

class SchemaReader {
 public:
  SchemaReader(const json& j, std::string ptr, std::vector<std::string>& errs)
      : j_(j), ptr_(std::move(ptr)), errs_(errs) {}
  SchemaReader(const SchemaReader&) = delete;
  SchemaReader& operator=(const SchemaReader&) = delete;

  template <class T>
  void field(std::string_view stem, std::string_view unit, T& out, Rule rule = Rule::any) {
    const std::string key = detail::key_of(stem, unit);
    known_.push_back({std::string(stem), key});
    if (!j_.contains(key)) return;
    const json& v = j_[key];
    const std::string at = ptr_ + "/" + detail::pointer_escape(key);
    read_value(v, at, out, rule);
  }

  template <class Fn>
  void section(std::string_view key, Fn&& fn) {
    known_.push_back({std::string(key), std::string(key)});
    if (!j_.contains(std::string(key))) return;
    const json& v = j_[std::string(key)];
    const std::string at = ptr_ + "/" + detail::pointer_escape(key);
    if (!v.is_object()) {
      errs_.push_back(at + ": expected an object");
      return;
    }
    SchemaReader sub(v, at, errs_);
    fn(sub);
    sub.finish();
  }

  // Array of objects; a present array replaces the default list.
  template <class T, class Fn>
  void list(std::string_view key, std::vector<T>& out, Fn&& fn) {
    known_.push_back({std::string(key), std::string(key)});
    if (!j_.contains(std::string(key))) return;
    const json& v = j_[std::string(key)];
    const std::string at = ptr_ + "/" + detail::pointer_escape(key);
    if (!v.is_array()) {
      errs_.push_back(at + ": expected an array");
      return;
    }
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string ai = at + "/" + std::to_string(i);
      if (!v[i].is_object()) {
        errs_.push_back(ai + ": expected an object");
        continue;
      }
      T item{};
      SchemaReader sub(v[i], ai, errs_);
      fn(sub, item);
      sub.finish();
      out.push_back(item);
    }
  }

  void error(std::string_view key, const std::string& msg) {
    errs_.push_back(ptr_ + "/" + detail::pointer_escape(key) + ": " + msg);
  }

  // Reports keys the schema does not know. A key that extends a known stem with a
  // different suffix is reported as a unit error naming the accepted spelling.
  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [key, _] : j_.items()) {
      bool ok = false;
      for (const auto& k : known_) ok = ok || k.key == key;
      if (ok) continue;
      const Known* match = nullptr;
      for (const auto& k : known_)
        if ((key == k.stem || key.rfind(k.stem + "_", 0) == 0) && (!match || k.stem.size() > match->stem.size()))
          match = &k;
      const std::string at = ptr_ + "/" + detail::pointer_escape(key);
      if (match)
        errs_.push_back(at + ": invalid unit, expected key '" + match->key + "'");
      else
        errs_.push_back(at + ": unknown key");
    }
  }

 private:
  struct Known {
    std::string stem, key;
  };

  template <class T>
  void read_value(const json& v, const std::string& at, T& out, Rule rule) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return errs_.push_back(at + ": expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return errs_.push_back(at + ": expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return errs_.push_back(at + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) out = v.get<T>();
        else return errs_.push_back(at + ": must be >= 0");
      } else {
        out = v.get<T>();
      }
      if (const char* m = detail::rule_violation(static_cast<double>(out), rule)) errs_.push_back(at + ": " + m);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return errs_.push_back(at + ": expected a number");
      out = v.get<double>();
      if (const char* m = detail::rule_violation(out, rule)) errs_.push_back(at + ": " + m);
    } else if constexpr (detail::is_std_vector<T>::value || detail::is_std_array<T>::value) {
      if (!v.is_array()) return errs_.push_back(at + ": expected an array");
      if constexpr (detail::is_std_array<T>::value) {
        if (v.size() != out.size())
          return errs_.push_back(at + ": expected " + std::to_string(out.size()) + " elements");
      } else {
        out.assign(v.size(), typename T::value_type{});
      }
      for (std::size_t i = 0; i < v.size(); ++i) read_value(v[i], at + "/" + std::to_string(i), out[i], rule);
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  const json& j_;
  std::string ptr_;
  std::vector<std::string>& errs_;
  std::vector<Known> known_;
};

class SchemaWriter {
 public:
  explicit SchemaWriter(json& out) : out_(out) { out_ = json::object(); }

  template <class T>
  void field(std::string_view stem, std::string_view unit, T& v, Rule = Rule::any) {
    out_[detail::key_of(stem, unit)] = v;
  }
  template <class Fn>
  void section(std::string_view key, Fn&& fn) {
    json& sub = out_[std::string(key)];
    SchemaWriter w(sub);
    fn(w);
  }
  template <class T, class Fn>
  void list(std::string_view key, std::vector<T>& items, Fn&& fn) {
    json arr = json::array();
    for (auto& item : items) {
      json o;
      SchemaWriter w(o);
      fn(w, item);
      arr.push_back(std::move(o));
    }
    out_[std::string(key)] = std::move(arr);
  }
  void error(std::string_view, const std::string&) {}

 private:
  json& out_;
};

// ---------------------------------------------------------------------------
// Schema

template <class V>
void describe(V& v, AtomSpec& a) {
  v.field("gamma", "rad_per_s", a.gamma, Rule::positive);
  v.field("lambda", "m", a.lambda, Rule::positive);
  v.field("delta_g", "rad_per_s", a.delta_g, Rule::positive);
  v.field("delta_e", "rad_per_s", a.delta_e, Rule::positive);
  v.field("i_sat", "w_per_m2", a.i_sat, Rule::positive);
}

template <class V>
void describe(V& v, SensorModel& s) {
  v.field("conversion", "adu_per_e", s.conversion, Rule::positive);
  v.field("qe", "", s.qe, Rule::unit_interval);
  v.field("read_noise", "adu", s.read_noise_adu, Rule::nonneg);
  v.field("excess_noise_factor", "", s.excess_noise_factor, Rule::positive);
  v.field("dark_level", "adu", s.dark_level_adu);
}

template <class V>
void describe(V& v, FringeConfig& f) {
  auto& c = f.campaign;
  v.section("campaign", [&](auto& s) {
    s.field("intensity_sweep_n_adu", "counts_per_px", c.intensity_sweep_n_adu, Rule::nonneg);
    s.field("intensity_sweep_delta_bar", "", c.intensity_sweep_delta_bar, Rule::nonzero);
    s.field("intensity_sweep_t_p", "s", c.intensity_sweep_t_p, Rule::positive);
    s.field("detuning_sweep_delta_bar", "", c.detuning_sweep_delta_bar, Rule::nonzero);
    s.field("detuning_sweep_n_adu", "counts_per_px", c.detuning_sweep_n_adu, Rule::nonneg);
    s.field("detuning_sweep_t_p", "s", c.detuning_sweep_t_p, Rule::positive);
    s.field("pulse_sweep_t_p", "s", c.pulse_sweep_t_p, Rule::nonneg);
    s.field("pulse_sweep_delta_bar", "", c.pulse_sweep_delta_bar, Rule::nonzero);
    s.field("pulse_sweep_n_adu", "counts_per_px", c.pulse_sweep_n_adu, Rule::nonneg);
    s.field("pulse_sweep_reference_t_p", "s", c.pulse_sweep_reference_t_p, Rule::positive);
    s.field("leakage_fringes", "", c.leakage_fringes);
    s.field("leakage_delta_bar", "", c.leakage_delta_bar, Rule::nonzero);
    s.field("leakage_t_p", "s", c.leakage_t_p, Rule::positive);
    s.field("points_per_fringe", "", c.points_per_fringe, Rule::positive);
    s.field("noise_sigma", "", c.noise_sigma, Rule::nonneg);
    s.field("atoms_per_shot", "", c.atoms_per_shot, Rule::nonneg);
    s.field("contrast", "", c.shape.contrast, Rule::unit_interval);
    s.field("center_shift", "", c.shape.center_shift);
  });
  v.section("fit", [&](auto& s) {
    s.field("fit_dt0", "", f.fit.fit_dt0);
    s.field("dt0", "s", f.fit.dt0, Rule::nonneg);
    s.field("weighted", "", f.fit.weighted);
    s.field("n_sat_min", "counts_per_px_per_us", f.fit.n_sat_min, Rule::positive);
    s.field("n_sat_max", "counts_per_px_per_us", f.fit.n_sat_max, Rule::positive);
    s.field("exclude_delta_bar_below", "", f.exclude_delta_bar_below, Rule::nonneg);
    s.field("exclude_saturation_above", "", f.exclude_saturation_above, Rule::nonneg);
  });
}

template <class V>
void describe(V& v, MapConfig& m) {
  auto& c = m.campaign;
  auto& sh = c.shot;
  v.section("campaign", [&](auto& s) {
    s.field("rows", "", sh.rows, Rule::positive);
    s.field("cols", "", sh.cols, Rule::positive);
    s.field("radius_x", "px", sh.radius_x, Rule::positive);
    s.field("radius_y", "px", sh.radius_y, Rule::positive);
    s.field("center_x", "px", sh.center_x);
    s.field("center_y", "px", sh.center_y);
    s.field("sg_dx", "px", sh.sg_dx);
    s.field("sg_dy", "px", sh.sg_dy);
    s.field("atom_number", "", sh.atom_number, Rule::positive);
    s.field("counts_per_atom", "", sh.counts_per_atom, Rule::positive);
    s.field("read_noise", "counts", sh.read_noise, Rule::nonneg);
    s.field("shot_noise", "", sh.shot_noise);
    s.field("jitter", "px", sh.jitter_px, Rule::nonneg);
    s.field("stripe_kx", "rad_per_px", sh.stripes.kx);
    s.field("stripe_ky", "rad_per_px", sh.stripes.ky);
    s.field("stripe_amplitude", "", sh.stripes.amplitude, Rule::nonneg);
    s.field("n_adu_levels", "counts_per_px", c.n_adu_levels, Rule::positive);
    s.field("delta_bar", "", c.delta_bar, Rule::nonzero);
    s.field("t_p", "s", c.t_p, Rule::positive);
    s.field("phase_points", "", m.phase_points, Rule::positive);
    s.field("shots_per_point", "", c.shots_per_point, Rule::positive);
    s.field("reference_shots", "", c.reference_shots);
    s.field("contrast", "", c.shape.contrast, Rule::unit_interval);
    s.field("center_shift", "", c.shape.center_shift);
    s.field("gradient_x", "per_px", m.gradient_x_per_px);
    s.field("gradient_y", "per_px", m.gradient_y_per_px);
  });
  auto& a = m.analysis;
  v.section("analysis", [&](auto& s) {
    s.field("half_width", "px", a.center.half_width, Rule::positive);
    s.field("half_height", "px", a.center.half_height, Rule::positive);
    s.field("trap_omega", "rad_per_s", a.trap_omega, Rule::positive);
    s.field("t_tof", "s", a.t_tof, Rule::nonneg);
    s.field("rescale", "", a.rescale);
    s.field("oversample", "", a.oversample);
    s.field("tof_pixel", "um", a.tof_pixel_um, Rule::positive);
    s.field("roi_fraction", "", a.roi_fraction, Rule::positive);
    s.field("min_contrast", "", a.phase.min_contrast, Rule::unit_interval);
    s.field("min_levels", "", a.nsat.min_levels, Rule::positive);
    s.field("share_phi0", "", a.nsat.share_phi0);
    s.list("stop_bands", a.stop_bands, [](auto& b, StopBand& sb) {
      b.field("kx", "cycles_per_px", sb.kx);
      b.field("ky", "cycles_per_px", sb.ky);
      b.field("semi_x", "cycles_per_px", sb.semi_x, Rule::nonneg);
      b.field("semi_y", "cycles_per_px", sb.semi_y, Rule::nonneg);
      b.field("taper", "", sb.taper, Rule::unit_interval);
    });
  });
}

template <class V>
void describe(V& v, RunConfig& c) {
  v.field("seed", "", c.seed);
  v.field("workers", "", c.workers, Rule::positive);
  v.field("simulate", "", c.simulate);
  v.section("truth", [&](auto& s) {
    s.field("n_sat", "counts_per_px_per_us", c.truth.n_sat, Rule::positive);
    s.field("phi0", "rad", c.truth.phi0);
    s.field("dt0", "s", c.truth.dt0, Rule::nonneg);
    s.section("atom", [&](auto& a) { describe(a, c.truth.atom); });
    s.section("sensor", [&](auto& a) { describe(a, c.truth.sensor); });
  });
  v.section("geometry", [&](auto& s) {
    s.field("pixel_pitch", "m", c.geometry.pixel_pitch, Rule::positive);
    s.field("magnification", "", c.geometry.magnification, Rule::positive);
  });
  v.section("fringe", [&](auto& s) { describe(s, c.fringe); });
  v.section("map", [&](auto& s) { describe(s, c.map); });
  v.section("sensor_campaign", [&](auto& s) {
    s.field("levels", "adu", c.sensor.levels_adu, Rule::positive);
    s.field("frames", "", c.sensor.frames, Rule::positive);
    s.field("rows", "", c.sensor.rows, Rule::positive);
    s.field("cols", "", c.sensor.cols, Rule::positive);
    s.field("drift_modes", "", c.sensor.drift_modes);
    s.field("drift_amplitude", "", c.sensor.drift_amplitude, Rule::nonneg);
    s.field("drift_timescale", "s", c.sensor.drift_timescale_s, Rule::positive);
    s.field("frame_interval", "s", c.sensor.frame_interval_s, Rule::positive);
    s.field("dark_frames", "", c.sensor.dark_frames);
    s.field("roi_x0", "px", c.sensor.roi.x0, Rule::nonneg);
    s.field("roi_y0", "px", c.sensor.roi.y0, Rule::nonneg);
    s.field("roi_width", "px", c.sensor.roi.width, Rule::positive);
    s.field("roi_height", "px", c.sensor.roi.height, Rule::positive);
  });
  v.section("qe", [&](auto& s) {
    s.field("powers", "w", c.qe.powers_w, Rule::positive);
    s.field("t_m", "s", c.qe.t_m_s, Rule::positive);
    s.field("width_x", "px", c.qe.width_x_px, Rule::positive);
    s.field("width_y", "px", c.qe.width_y_px, Rule::positive);
    s.field("rows", "", c.qe.rows, Rule::positive);
    s.field("cols", "", c.qe.cols, Rule::positive);
    s.field("power_rel_sigma", "", c.qe.power_rel_sigma, Rule::nonneg);
  });
  v.section("snr", [&](auto& s) {
    s.field("od", "", c.snr.od, Rule::positive);
    s.field("exposure", "s", c.snr.exposure_s, Rule::positive);
    s.field("ratio_min", "", c.snr.ratio_min, Rule::positive);
    s.field("ratio_max", "", c.snr.ratio_max, Rule::positive);
    s.field("points", "", c.snr.points, Rule::positive);
  });
  v.section("rf", [&](auto& s) {
    s.field("traces", "", c.rf.traces, Rule::positive);
    s.field("frequency", "hz", c.rf.trace.frequency, Rule::positive);
    s.field("phase_before", "cycles", c.rf.trace.phase_before);
    s.field("phase_cmd", "cycles", c.rf.trace.phase_cmd);
    s.field("t0_jitter", "s", c.rf.trace.t0_jitter, Rule::nonneg);
    s.field("noise_sigma", "", c.rf.trace.noise_sigma, Rule::nonneg);
    s.field("amplitude", "", c.rf.trace.amplitude, Rule::positive);
    s.field("offset", "", c.rf.trace.offset);
    s.field("duration", "s", c.rf.trace.duration, Rule::positive);
    s.field("sample_rate", "hz", c.rf.trace.sample_rate, Rule::positive);
    s.field("guard", "s", c.rf.guard_s, Rule::nonneg);
  });
}

// ---------------------------------------------------------------------------
// Cross-field checks that a per-key rule cannot express.

inline void validate_config(const RunConfig& c, std::vector<std::string>& errs) {
  auto check = [&](const std::string& at, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      errs.push_back(at + ": " + e.what());
    }
  };
  check("/truth", [&] { c.truth.validate(); });
  check("/geometry", [&] { c.geometry.validate(); });
  for (const auto& k : c.simulate) {
    bool ok = false;
    for (const auto& n : dataset_kinds()) ok = ok || n == k;
    if (!ok) errs.push_back("/simulate: unknown dataset kind '" + k + "'");
  }
  const auto& r = c.sensor.roi;
  if (r.x0 + r.width > c.sensor.cols || r.y0 + r.height > c.sensor.rows)
    errs.push_back("/sensor_campaign: roi extends beyond the frame");
  if (c.sensor.frames < 8) errs.push_back("/sensor_campaign/frames: need at least 8 frames");
  if (c.sensor.levels_adu.size() < 3) errs.push_back("/sensor_campaign/levels_adu: need at least 3 levels");
  if (c.qe.powers_w.size() < 2) errs.push_back("/qe/powers_w: need at least 2 powers");
  if (!(c.snr.ratio_max > c.snr.ratio_min)) errs.push_back("/snr: ratio_max must exceed ratio_min");
  if (c.snr.points < 2) errs.push_back("/snr/points: need at least 2 points");
  if (!(c.rf.trace.sample_rate > 4 * c.rf.trace.frequency))
    errs.push_back("/rf/sample_rate_hz: must exceed four times frequency_hz");
  if (c.map.campaign.n_adu_levels.size() < c.map.analysis.nsat.min_levels)
    errs.push_back("/map/campaign/n_adu_levels_counts_per_px: fewer levels than map/analysis/min_levels");
  if (c.map.phase_points < 3) errs.push_back("/map/campaign/phase_points: need at least 3 phases");
  const auto& sh = c.map.campaign.shot;
  const double gx = c.map.gradient_x_per_px, gy = c.map.gradient_y_per_px;
  const double worst = 1 - std::abs(gx) * 0.5 * static_cast<double>(sh.cols) - std::abs(gy) * 0.5 * static_cast<double>(sh.rows);
  if (!(worst > 0)) errs.push_back("/map/campaign: intensity gradient makes the probe intensity non-positive");
  if (c.fringe.fit.n_sat_max <= c.fringe.fit.n_sat_min)
    errs.push_back("/fringe/fit: n_sat_max must exceed n_sat_min");
}

inline RunConfig parse_config(const json& j) {
  std::vector<std::string> errs;
  RunConfig c;
  if (!j.is_object()) throw ConfigError({"/: expected a JSON object"});
  SchemaReader r(j, "", errs);
  describe(r, c);
  r.finish();
  validate_config(c, errs);
  if (!errs.empty()) throw ConfigError(std::move(errs));
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  } catch (const FormatError& e) {
    throw ConfigError({e.what()});
  }
  return parse_config(j);
}

inline json config_to_json(RunConfig c) {
  json out;
  SchemaWriter w(out);
  describe(w, c);
  return out;
}

// Derived simulation inputs ------------------------------------------------

// Ground truth with the map gradient materialized as an intensity image the
// size of one TOF shot, centred on the image.
inline GroundTruth map_truth(const RunConfig& c) {
  GroundTruth g = c.truth;
  const auto& sh = c.map.campaign.shot;
  if (c.map.gradient_x_per_px == 0 && c.map.gradient_y_per_px == 0) return g;
  g.intensity_map.resize(sh.rows, sh.cols);
  const double cx = 0.5 * static_cast<double>(sh.cols - 1), cy = 0.5 * static_cast<double>(sh.rows - 1);
  for (Eigen::Index y = 0; y < sh.rows; ++y)
    for (Eigen::Index x = 0; x < sh.cols; ++x)
      g.intensity_map(y, x) = 1 + c.map.gradient_x_per_px * (static_cast<double>(x) - cx) +
                              c.map.gradient_y_per_px * (static_cast<double>(y) - cy);
  return g;
}

inline MapCampaignSpec map_campaign_spec(const RunConfig& c) {
  MapCampaignSpec s = c.map.campaign;
  s.dphi_grid = uniform_phase_grid(c.map.phase_points);
  return s;
}

// Fixed drift patterns: low spatial frequency fringes at distinct wavevectors.
inline std::vector<DriftMode> drift_modes(const SensorCampaignConfig& s) {
  static const double k[][3] = {{0.21, 0.05, 0.3}, {-0.08, 0.17, 1.1}, {0.33, -0.27, 2.0},
                                {0.12, 0.29, 0.7}, {-0.25, -0.11, 1.6}};
  std::vector<DriftMode> out;
  for (std::size_t i = 0; i < s.drift_modes; ++i) {
    const auto* w = k[i % 5];
    const double scale = 1.0 + 0.37 * static_cast<double>(i / 5);
    out.push_back({fringe_pattern(s.rows, s.cols, w[0] * scale, w[1] * scale, w[2]), s.drift_amplitude,
                   s.drift_timescale_s});
  }
  return out;
}

inline ProbeStackSpec probe_stack_spec(const RunConfig& c, double level_adu) {
  ProbeStackSpec s;
  s.mean_adu = level_adu;
  s.rows = c.sensor.rows;
  s.cols = c.sensor.cols;
  s.drift_modes = drift_modes(c.sensor);
  s.sensor = c.truth.sensor;
  s.n_frames = c.sensor.frames;
  s.frame_interval_s = c.sensor.frame_interval_s;
  s.dark_frames = c.sensor.dark_frames;
  s.pixel_pitch_m = c.geometry.pixel_pitch;
  return s;
}

inline BeamSpec beam_spec(const RunConfig& c, double power_w) {
  BeamSpec b;
  b.power_w = power_w;
  b.t_m = c.qe.t_m_s;
  b.width_x = c.qe.width_x_px;
  b.width_y = c.qe.width_y_px;
  b.rows = c.qe.rows;
  b.cols = c.qe.cols;
  b.lambda = c.truth.atom.lambda;
  b.sensor = c.truth.sensor;
  return b;
}

}  // namespace ramseycal
