#pragma once

// Orchestration behind the command-line tool: resolve inputs (a dataset on disk
// or an in-memory simulation from the config), run one analysis stage, and write
// a report plus the CSV/SVG it was drawn from.

#include <chrono>
#include <cmath>
#include <ctime>
#include <optional>
#include <string>
#include <vector>

#include "ramseycal/config.hpp"
#include "ramseycal/fringe_cal.hpp"
#include "ramseycal/io.hpp"
#include "ramseycal/photometry.hpp"
#include "ramseycal/pixel_map.hpp"
#include "ramseycal/plot.hpp"
#include "ramseycal/rf_phase.hpp"
#include "ramseycal/sensor_cal.hpp"
#include "ramseycal/synth.hpp"

namespace ramseycal {

inline constexpr const char* kToolVersion = "1.0.0";

inline const std::vector<std::string>& pipeline_commands() {
  static const std::vector<std::string> c = {"simulate", "calibrate-nsat", "map-intensity", "calibrate-sensor",
                                             "qe",       "snr",            "rf-phase",      "report"};
  return c;
}

struct RunContext {
  RunConfig cfg;           // resolved; seed and workers overrides already applied
  fs::path out = ".";
  fs::path input;          // dataset directory, or a simulate output holding one per kind
  fs::path calibration;    // calibrate-nsat report to reuse for map-intensity
  bool reproducible = false;
};

// Records every emitted file with its checksum.
class Emitter {
 public:
  explicit Emitter(fs::path out) : out_(std::move(out)) { fs::create_directories(out_); }

  void csv(const std::string& name, const CsvTable& t) { put(name, to_csv(t)); }
  void svg(const std::string& name, const Figure& f) { put(name, f.svg()); }
  void text(const std::string& name, const std::string& s) { put(name, s); }
  const json& files() const { return files_; }
  const fs::path& dir() const { return out_; }

 private:
  void put(const std::string& name, const std::string& bytes) {
    write_file(out_ / name, bytes);
    files_.push_back({{"path", name}, {"sha256", sha256_hex(bytes)}});
  }
  fs::path out_;
  json files_ = json::array();
};

// Per-kind seed so that each dataset is reproducible on its own.
inline std::uint64_t stage_seed(std::uint64_t seed, const std::string& kind) {
  const auto& k = dataset_kinds();
  std::uint64_t idx = 0;
  for (std::size_t i = 0; i < k.size(); ++i)
    if (k[i] == kind) idx = i + 1;
  return mix_seed(seed ^ mix_seed(0x9e3779b97f4a7c15ULL * idx));
}

inline std::uint64_t item_seed(std::uint64_t seed, std::size_t i) { return mix_seed(seed ^ mix_seed(i + 1)); }

// ---------------------------------------------------------------------------
// Simulation from config

inline FringeData simulate_fringes(const RunConfig& c, std::uint64_t seed) {
  FringeData d;
  d.campaign = synth_fringe_campaign(c.truth, c.fringe.campaign, seed);
  const auto& s = c.fringe.campaign;
  for (double db : s.intensity_sweep_delta_bar)
    d.groups.push_back({"intensity:" + detail::fmt(db), s.intensity_sweep_n_adu.size()});
  d.groups.push_back({"detuning", s.detuning_sweep_delta_bar.size()});
  d.groups.push_back({"pulse_time", s.pulse_sweep_t_p.size()});
  return d;
}

inline MapCampaign simulate_map(const RunConfig& c, std::uint64_t seed) {
  return synth_map_campaign(map_truth(c), map_campaign_spec(c), seed);
}

inline SensorStacks simulate_sensor(const RunConfig& c, std::uint64_t seed) {
  SensorStacks s;
  s.levels_adu = c.sensor.levels_adu;
  s.stacks.resize(s.levels_adu.size());
  parallel_for(s.levels_adu.size(), c.workers, [&](std::size_t i) {
    s.stacks[i] = synth_probe_stack(probe_stack_spec(c, s.levels_adu[i]), item_seed(seed, i));
  });
  return s;
}

// The meter reading carries power_rel_sigma of relative noise; the beam itself
// is generated at the true power.
inline QeBeams simulate_qe(const RunConfig& c, std::uint64_t seed) {
  QeBeams q;
  q.t_m_s = c.qe.t_m_s;
  q.lambda_m = c.truth.atom.lambda;
  q.frames.resize(c.qe.powers_w.size());
  q.powers_w.resize(c.qe.powers_w.size());
  parallel_for(c.qe.powers_w.size(), c.workers, [&](std::size_t i) {
    const double p = c.qe.powers_w[i];
    Rng rng = make_rng(seed, 7000 + i);
    q.powers_w[i] = p * (1 + c.qe.power_rel_sigma * normal(rng));
    q.frames[i] = synth_gaussian_beam(beam_spec(c, p), item_seed(seed, i)).image;
  });
  return q;
}

// Commanded phases step through one full cycle across the batch, starting at phase_cmd.
inline std::vector<TraceRecord> simulate_traces(const RunConfig& c, std::uint64_t seed) {
  std::vector<TraceRecord> out(c.rf.traces);
  parallel_for(c.rf.traces, c.workers, [&](std::size_t k) {
    RfTraceSpec s = c.rf.trace;
    s.phase_cmd = c.rf.trace.phase_cmd + static_cast<double>(k) / static_cast<double>(c.rf.traces);
    const auto tr = synth_rf_trace(s, item_seed(seed, k));
    out[k] = {tr.trace, tr.update_time, tr.commanded_dphi, tr.realized_dphi};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Input resolution

inline std::optional<Dataset> find_dataset(const fs::path& input, const std::string& kind, bool required) {
  if (input.empty()) return std::nullopt;
  if (fs::exists(input / "manifest.json")) {
    Dataset d(input);
    if (d.manifest().kind == kind) return d;
    if (required) d.expect_kind(kind);
    return std::nullopt;
  }
  if (fs::exists(input / kind / "manifest.json")) return Dataset(input / kind);
  if (required) throw FormatError(input.string() + ": no " + kind + " dataset found");
  return std::nullopt;
}

template <class T>
struct Resolved {
  T data;
  std::optional<GroundTruth> truth;
  json source;
};

template <class T, class Sim, class Load, class Save>
Resolved<T> resolve(const RunContext& ctx, const std::string& kind, bool required, Sim&& sim, Load&& load,
                    Save&& save, const GroundTruth& sim_truth) {
  if (auto d = find_dataset(ctx.input, kind, required)) {
    Resolved<T> r{load(*d), d->manifest().truth, json::object()};
    r.source = {{"source", "dataset"},
                {"path", d->dir().lexically_normal().string()},
                {"seed", d->manifest().seed},
                {"checksums", d->checksums()}};
    return r;
  }
  const std::uint64_t seed = stage_seed(ctx.cfg.seed, kind);
  Resolved<T> r{sim(ctx.cfg, seed), sim_truth, json::object()};
  ChecksumSink sink;
  save(sink, r.data);
  r.source = {{"source", "simulated"}, {"seed", seed}, {"checksums", sink.checksums()}};
  return r;
}

inline Resolved<FringeData> resolve_fringes(const RunContext& ctx, bool required) {
  return resolve<FringeData>(ctx, "fringe_campaign", required, simulate_fringes, load_fringe_campaign,
                             [](auto& s, const FringeData& d) { save_fringe_campaign(s, d); }, ctx.cfg.truth);
}
inline Resolved<MapCampaign> resolve_map(const RunContext& ctx, bool required) {
  return resolve<MapCampaign>(ctx, "map_campaign", required, simulate_map, load_map_campaign,
                              [](auto& s, const MapCampaign& d) { save_map_campaign(s, d); }, map_truth(ctx.cfg));
}
inline Resolved<SensorStacks> resolve_sensor(const RunContext& ctx, bool required) {
  return resolve<SensorStacks>(ctx, "sensor_stacks", required, simulate_sensor, load_sensor_stacks,
                               [](auto& s, const SensorStacks& d) { save_sensor_stacks(s, d); }, ctx.cfg.truth);
}
inline Resolved<QeBeams> resolve_qe(const RunContext& ctx, bool required) {
  return resolve<QeBeams>(ctx, "qe_beams", required, simulate_qe, load_qe_beams,
                          [](auto& s, const QeBeams& d) { save_qe_beams(s, d); }, ctx.cfg.truth);
}
inline Resolved<std::vector<TraceRecord>> resolve_traces(const RunContext& ctx, bool required) {
  return resolve<std::vector<TraceRecord>>(ctx, "rf_traces", required, simulate_traces, load_traces,
                                           [](auto& s, const std::vector<TraceRecord>& d) { save_traces(s, d); },
                                           ctx.cfg.truth);
}

// ---------------------------------------------------------------------------
// simulate

inline json stage_simulate(const RunContext& ctx) {
  json out = json::object();
  const json cfg = config_to_json(ctx.cfg);
  for (const auto& kind : ctx.cfg.simulate) {
    const std::uint64_t seed = stage_seed(ctx.cfg.seed, kind);
    const fs::path dir = ctx.out / kind;
    DatasetWriter w(dir, kind, cfg, seed);
    if (kind == "fringe_campaign") {
      w.set_truth(ctx.cfg.truth);
      save_fringe_campaign(w, simulate_fringes(ctx.cfg, seed));
    } else if (kind == "map_campaign") {
      w.set_truth(map_truth(ctx.cfg));
      save_map_campaign(w, simulate_map(ctx.cfg, seed));
    } else if (kind == "sensor_stacks") {
      w.set_truth(ctx.cfg.truth);
      save_sensor_stacks(w, simulate_sensor(ctx.cfg, seed));
    } else if (kind == "qe_beams") {
      w.set_truth(ctx.cfg.truth);
      save_qe_beams(w, simulate_qe(ctx.cfg, seed));
    } else if (kind == "rf_traces") {
      save_traces(w, simulate_traces(ctx.cfg, seed));
    }
    const auto& m = w.finish();
    json c = json::object();
    for (const auto& [name, e] : m.payloads) c[name] = e.sha256;
    out[kind] = {{"path", kind}, {"seed", seed}, {"checksums", c}};
  }
  return out;
}

// ---------------------------------------------------------------------------
// calibrate-nsat

namespace detail {

// Polyline of y(x) wrapped to [0, 2 pi) with NaN breaks at the wraps.
template <class F>
Series wrapped_curve(double x0, double x1, F&& y_of, const std::string& color, Mark mark = Mark::line) {
  Series s;
  s.mark = mark;
  s.color = color;
  double prev = std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i <= 400; ++i) {
    const double x = x0 + (x1 - x0) * i / 400.0;
    const double y = wrap_phase_positive(y_of(x));
    if (std::isfinite(prev) && std::abs(y - prev) > kPi) {
      s.x.push_back(x);
      s.y.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    s.x.push_back(x);
    s.y.push_back(y);
    prev = y;
  }
  return s;
}

inline const char* palette(std::size_t i) {
  static const char* c[] = {"#d62728", "#2ca02c", "#1f77b4", "#9467bd", "#ff7f0e", "#8c564b"};
  return c[i % 6];
}

}  // namespace detail

struct NsatStage {
  NsatCalibration cal;
  json results;
};

inline NsatStage stage_nsat(const RunContext& ctx, Emitter& em, json& inputs, bool required) {
  const auto& c = ctx.cfg;
  auto in = resolve_fringes(ctx, required);
  inputs["fringe_campaign"] = in.source;
  const auto& atom = in.truth ? in.truth->atom : c.truth.atom;

  // phases per group, so the plots can separate the sweeps
  std::vector<PhasePoint> all;
  std::vector<std::size_t> group_of;
  json failures = json::array();
  std::size_t offset = 0;
  std::vector<std::vector<PhasePoint>> by_group;
  for (std::size_t g = 0; g < in.data.groups.size(); ++g) {
    const auto n = in.data.groups[g].count;
    std::vector<FringeDataset> sets(in.data.campaign.sweeps.begin() + static_cast<std::ptrdiff_t>(offset),
                                    in.data.campaign.sweeps.begin() + static_cast<std::ptrdiff_t>(offset + n));
    auto ex = extract_phases(sets, c.workers);
    for (const auto& f : ex.failures) failures.push_back({{"fringe", offset + f.index}, {"message", f.message}});
    for (const auto& p : ex.points) {
      all.push_back(p);
      group_of.push_back(g);
    }
    by_group.push_back(ex.points);
    offset += n;
  }
  auto leak = extract_phases(in.data.campaign.leakage, c.workers);
  for (const auto& f : leak.failures) failures.push_back({{"leakage_fringe", f.index}, {"message", f.message}});

  NsatStage st;
  st.cal = joint_fit_nsat(all, leak.points, atom, c.fringe.fit);
  const auto& cal = st.cal;
  const auto saw = sawtooth_collapse(all, cal, atom, c.sawtooth());

  json r = {{"identifiable", cal.identifiable},
            {"n_sat_counts_per_px_per_us", cal.n_sat},
            {"n_sat_sigma_counts_per_px_per_us", cal.n_sat_sigma},
            {"phi0_rad", cal.phi0},
            {"phi0_sigma_rad", cal.phi0_sigma},
            {"phi0_cycles", cal.phi0 / kTwoPi},
            {"dt0_us", cal.dt0 / kMicrosecond},
            {"dt0_sigma_us", cal.dt0_sigma / kMicrosecond},
            {"dt0_fitted", cal.dt0_fitted},
            {"residual_rms_rad", cal.residual_rms},
            {"n_points", cal.n_points},
            {"n_leakage_points", leak.points.size()},
            {"diagnostic", cal.diagnostic},
            {"failures", failures}};
  std::size_t excluded = 0;
  for (const auto& row : saw.rows) excluded += row.excluded;
  r["sawtooth"] = {{"rms_deviation_rad", saw.rms_deviation},
                   {"rms_deviation_cycles", saw.rms_deviation / kTwoPi},
                   {"n_included", saw.n_included},
                   {"n_excluded", excluded}};
  // I_sat echoed in mW/cm^2 (1 W/m^2 = 0.1 mW/cm^2)
  r["i_sat_mw_per_cm2"] = atom.i_sat * 0.1;
  if (cal.identifiable && cal.n_sat > 0) {
    const double eta = system_efficiency(cal.n_sat, c.truth.sensor.conversion, c.geometry, atom.lambda, atom.i_sat);
    r["system_efficiency"] = eta;
  }
  if (in.truth) {
    r["truth"] = {{"n_sat_counts_per_px_per_us", in.truth->n_sat},
                  {"phi0_rad", in.truth->phi0},
                  {"dt0_us", in.truth->dt0 / kMicrosecond},
                  {"n_sat_rel_error", cal.n_sat / in.truth->n_sat - 1},
                  {"phi0_error_cycles", wrap_phase(cal.phi0 - in.truth->phi0) / kTwoPi}};
  }

  // data files
  CsvTable ph;
  ph.header = {"group", "n_adu", "n_adu_exposure_s", "delta_bar", "t_p_s", "phi_rad", "phi_sigma_rad",
               "minus_phi_rad", "model_minus_phi_rad"};
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& p = all[i];
    ph.rows.push_back({static_cast<double>(group_of[i]), p.n_adu, p.n_adu_exposure_s, p.delta_bar, p.t_p, p.phi,
                       p.phi_sigma, wrap_phase_positive(-p.phi),
                       wrap_phase_positive(-(model_phase(p, cal.n_sat, cal.dt0, atom) + cal.phi0))});
  }
  em.csv("fig3_phases.csv", ph);

  CsvTable sw;
  sw.header = {"x_rad", "y_rad", "deviation_rad", "excluded", "s", "delta_bar", "t_p_s"};
  double xmax = 0;
  for (const auto& row : saw.rows) {
    sw.rows.push_back({row.x, row.y, row.deviation, row.excluded ? 1.0 : 0.0, row.s, row.delta_bar, row.t_p});
    xmax = std::max(xmax, row.x);
  }
  em.csv("fig3e_sawtooth.csv", sw);
  // reference: a line of slope 1 mod 2 pi, sampled on a uniform grid
  CsvTable ref;
  ref.header = {"x_rad", "y_rad"};
  const double xr = std::max(xmax * 1.05, kTwoPi);
  for (int i = 0; i <= 1000; ++i) {
    const double x = xr * i / 1000.0;
    ref.rows.push_back({x, std::fmod(x, kTwoPi)});
  }
  em.csv("fig3e_reference.csv", ref);

  // figure: (b) vs N_ADU, (c) vs detuning, (d) vs t_p, (e) sawtooth
  Figure fig;
  fig.columns = 2;
  Panel pb{"(b) -phi vs N_ADU", "N_ADU (counts/pix)", "-phi (rad)", {}, false, false, std::pair{0.0, kTwoPi}, {}};
  Panel pc{"(c) -phi vs detuning", "delta / Gamma", "-phi (rad)", {}, false, false, std::pair{0.0, kTwoPi}, {}};
  Panel pd{"(d) -phi vs pulse time", "t_p (us)", "-phi (rad)", {}, false, false, std::pair{0.0, kTwoPi}, {}};
  pd.vlines.push_back(cal.dt0 / kMicrosecond);
  std::size_t color = 0;
  for (std::size_t g = 0; g < by_group.size(); ++g) {
    const auto& pts = by_group[g];
    if (pts.empty()) continue;
    const std::string name = in.data.groups[g].name;
    const std::string col = detail::palette(color++);
    Series data{name, {}, {}, {}, Mark::points, col};
    for (const auto& p : pts) data.yerr.push_back(p.phi_sigma);
    const PhasePoint ref_pt = pts.front();
    auto model = [&](PhasePoint q) { return -(model_phase(q, cal.n_sat, cal.dt0, atom) + cal.phi0); };
    if (name.rfind("intensity", 0) == 0) {
      double hi = 0;
      for (const auto& p : pts) {
        data.x.push_back(p.n_adu);
        data.y.push_back(wrap_phase_positive(-p.phi));
        hi = std::max(hi, p.n_adu);
      }
      pb.series.push_back(data);
      pb.series.push_back(detail::wrapped_curve(0, hi * 1.05, [&](double x) {
        PhasePoint q = ref_pt;
        q.n_adu = x;
        return model(q);
      }, col));
    } else if (name == "detuning") {
      double lo = 1e300, hi = -1e300;
      for (const auto& p : pts) {
        data.x.push_back(p.delta_bar);
        data.y.push_back(wrap_phase_positive(-p.phi));
        lo = std::min(lo, p.delta_bar);
        hi = std::max(hi, p.delta_bar);
      }
      pc.series.push_back(data);
      pc.series.push_back(detail::wrapped_curve(lo, hi, [&](double x) {
        PhasePoint q = ref_pt;
        q.delta_bar = x;
        return model(q);
      }, col));
    } else if (name == "pulse_time") {
      double hi = 0;
      for (const auto& p : pts) {
        data.x.push_back(p.t_p / kMicrosecond);
        data.y.push_back(wrap_phase_positive(-p.phi));
        hi = std::max(hi, p.t_p / kMicrosecond);
      }
      pd.series.push_back(data);
      pd.series.push_back(detail::wrapped_curve(0, hi * 1.05, [&](double x) {
        PhasePoint q = ref_pt;
        q.t_p = x * kMicrosecond;
        return model(q);
      }, col));
    }
  }
  Panel pe{"(e) sawtooth collapse", "V_ac t_m / hbar (rad)", "-(phi - phi0) (rad)", {}, false, false,
           std::pair{0.0, kTwoPi}, {}};
  Series inc{"data", {}, {}, {}, Mark::points, "#1f77b4"}, exc{"excluded", {}, {}, {}, Mark::points, "#bbbbbb"};
  for (const auto& row : saw.rows) {
    auto& s = row.excluded ? exc : inc;
    s.x.push_back(row.x);
    s.y.push_back(row.y);
  }
  pe.series.push_back(inc);
  if (!exc.x.empty()) pe.series.push_back(exc);
  auto line = detail::wrapped_curve(0, xr, [](double x) { return x; }, "#555555", Mark::dashed);
  line.label = "slope 1 mod 2pi";
  pe.series.push_back(line);
  fig.panels = {pb, pc, pd, pe};
  em.svg("fig3_nsat.svg", fig);

  st.results = std::move(r);
  return st;
}

inline NsatCalibration calibration_from_report(const json& report) {
  try {
    const json& n = report.contains("results") ? report.at("results").at("nsat") : report.at("nsat");
    NsatCalibration cal;
    cal.identifiable = n.at("identifiable").get<bool>();
    cal.n_sat = n.at("n_sat_counts_per_px_per_us").get<double>();
    cal.n_sat_sigma = n.at("n_sat_sigma_counts_per_px_per_us").get<double>();
    cal.phi0 = n.at("phi0_rad").get<double>();
    cal.dt0 = n.at("dt0_us").get<double>() * kMicrosecond;
    return cal;
  } catch (const json::exception& e) {
    throw FormatError(std::string("calibration report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// map-intensity

inline Image masked(const Image& v, const Mask& m) {
  Image out = v;
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (!m(i)) out(i) = std::numeric_limits<double>::quiet_NaN();
  return out;
}

inline json stage_map(const RunContext& ctx, Emitter& em, json& inputs, const NsatCalibration& cal, bool required) {
  const auto& c = ctx.cfg;
  auto in = resolve_map(ctx, required);
  inputs["map_campaign"] = in.source;
  const auto& atom = in.truth ? in.truth->atom : c.truth.atom;
  MapPipelineOptions opt = c.map.analysis;
  opt.workers = c.workers;
  const auto res = map_intensity(in.data, cal, atom, opt);
  const auto& m = res.map;

  json r = {{"roi_mean", m.roi_mean},
            {"roi_rms", m.roi_rms},
            {"roi_pixels", m.roi_pixels},
            {"roi_ellipse_px", {{"cx", m.roi_ellipse.cx}, {"cy", m.roi_ellipse.cy}, {"ax", m.roi_ellipse.ax},
                                {"ay", m.roi_ellipse.ay}}},
            {"global_n_sat_counts_per_px_per_us", m.global_n_sat},
            {"rejected_shots", res.rejected},
            {"sg_displacement_px", res.sg_displacement},
            {"castin_dum_scales", res.scales},
            {"pixel_scale_um", {{"x", res.pixel_scale.x}, {"y", res.pixel_scale.y}}}};

  // compare with the injected intensity map when the truth is known
  if (in.truth && in.truth->intensity_map.size() > 0) {
    const Image& tm = in.truth->intensity_map;
    const double tcx = 0.5 * static_cast<double>(tm.cols() - 1), tcy = 0.5 * static_cast<double>(tm.rows() - 1);
    const double bin = opt.rescale ? res.scales[1] / (opt.oversample > 0 ? opt.oversample : res.scales[1]) : 1.0;
    double worst = 0, ss = 0;
    std::size_t n = 0;
    for (Eigen::Index y = 0; y < m.frac.rows(); ++y)
      for (Eigen::Index x = 0; x < m.frac.cols(); ++x) {
        if (!m.valid(y, x) || !m.roi_ellipse.contains(static_cast<double>(x), static_cast<double>(y))) continue;
        const double dx = static_cast<double>(x) - m.roi_ellipse.cx;
        const double dy = (static_cast<double>(y) - m.roi_ellipse.cy) * bin;
        const double truth = sample_bilinear(tm, std::clamp(tcx + dx, 0.0, static_cast<double>(tm.cols() - 1)),
                                             std::clamp(tcy + dy, 0.0, static_cast<double>(tm.rows() - 1))) - 1.0;
        const double e = m.frac(y, x) - truth;
        worst = std::max(worst, std::abs(e));
        ss += e * e;
        ++n;
      }
    r["truth"] = {{"max_abs_error", worst}, {"rms_error", n ? std::sqrt(ss / static_cast<double>(n)) : 0.0},
                  {"pixels", n}};
  }

  em.csv("fig5_frac.csv", image_table(masked(m.frac, m.valid)));
  em.csv("fig5_frac_sigma.csv", image_table(masked(m.sigma, m.valid)));
  em.csv("fig5_power_spectrum.csv", image_table(res.power_spectrum));
  Figure fig;
  fig.columns = static_cast<int>(std::max<std::size_t>(in.data.dphi_grid.size(), res.phases.size()));
  fig.panel_width = 220;
  fig.panel_height = 240;
  if (!res.f2.empty())
    for (std::size_t d = 0; d < res.f2[0].size(); ++d) {
      em.csv("fig5_f2_level0_phase" + std::to_string(d) + ".csv", image_table(res.f2[0][d].values));
      fig.heatmaps.push_back({"(b) f2, dphi " + detail::fmt(in.data.dphi_grid[d], "%.2f"), res.f2[0][d].values,
                              res.f2[0][d].mask, 0, 1, std::nullopt});
    }
  for (std::size_t l = 0; l < res.phases.size(); ++l) {
    em.csv("fig5_phi_level" + std::to_string(l) + ".csv", image_table(masked(res.phases[l].phi, res.phases[l].valid)));
    fig.heatmaps.push_back({"(c) phi, N_ADU " + detail::fmt(in.data.probes[l].n_adu, "%.0f"), res.phases[l].phi,
                            res.phases[l].valid, -kPi, kPi, std::nullopt});
  }
  fig.heatmaps.push_back({"(d) fractional intensity", m.frac, m.valid, 0, 0,
                          HeatmapPanel::Ellipse{m.roi_ellipse.cx, m.roi_ellipse.cy, m.roi_ellipse.ax,
                                                m.roi_ellipse.ay}});
  em.svg("fig5_map.svg", fig);
  return r;
}

// ---------------------------------------------------------------------------
// calibrate-sensor

inline json stage_sensor(const RunContext& ctx, Emitter& em, json& inputs, bool required) {
  const auto& c = ctx.cfg;
  auto in = resolve_sensor(ctx, required);
  inputs["sensor_stacks"] = in.source;
  const double f2 = in.truth ? in.truth->sensor.excess_noise_factor : c.truth.sensor.excess_noise_factor;
  std::vector<PtcPoint> pts;
  std::vector<NoiseDecomposition> decomp;
  for (const auto& st : in.data.stacks) {
    decomp.push_back(loo_pca_decompose(st, c.sensor.roi, c.workers));
    pts.push_back(ptc_point(decomp.back()));
  }
  const auto conv = extract_conversion(pts, f2);
  const auto pe = pe_rescale_check(pts, conv.conversion, f2);
  json r = {{"conversion_adu_per_e", conv.conversion},
            {"conversion_sigma_adu_per_e", conv.conversion_sigma},
            {"read_noise_adu", conv.read_noise_adu},
            {"read_noise_sigma_adu", conv.read_noise_sigma},
            {"quadratic_coeff_per_adu", conv.quad_coeff},
            {"quadratic_fraction", conv.quadratic_fraction},
            {"excess_noise_factor", f2},
            {"pe_linear_coeff", pe.a},
            {"pe_linear_coeff_sigma", pe.a_sigma},
            {"levels", pts.size()}};
  if (in.truth)
    r["truth"] = {{"conversion_adu_per_e", in.truth->sensor.conversion},
                  {"conversion_rel_error", conv.conversion / in.truth->sensor.conversion - 1},
                  {"read_noise_adu", in.truth->sensor.read_noise_adu}};

  CsvTable t;
  t.header = {"mean_adu", "var_adu", "mean_pe", "var_pe", "frames"};
  for (const auto& p : pts)
    t.rows.push_back({p.mean_adu, p.var_adu, p.mean_adu / conv.conversion,
                      p.var_adu / (conv.conversion * conv.conversion), static_cast<double>(p.n_frames)});
  em.csv("fig4_ptc.csv", t);

  Figure fig;
  fig.columns = 3;
  fig.panel_width = 320;
  // (a)-(d): raw frame, roi, noise and background of the brightest level
  if (!decomp.empty()) {
    const auto& st = in.data.stacks.back();
    Image raw = st.frames.front();
    if (st.dark) raw -= *st.dark;
    const auto& d = decomp.back();
    fig.heatmaps.push_back({"(a) probe image", raw, std::nullopt, 0, 0, std::nullopt});
    const auto& roi = c.sensor.roi;
    fig.heatmaps.push_back({"(b) region of interest", raw.block(roi.y0, roi.x0, roi.height, roi.width), std::nullopt,
                            0, 0, std::nullopt});
    fig.heatmaps.push_back({"(c) noise", d.noise.front(), std::nullopt, 0, 0, std::nullopt});
    fig.heatmaps.push_back({"(d) background", d.mean.front(), std::nullopt, 0, 0, std::nullopt});
    em.csv("fig4_noise.csv", image_table(d.noise.front()));
  }
  Panel pa{"(e) photon transfer, ADU", "mean (ADU)", "variance (ADU^2)", {}, false, false, std::nullopt, {}};
  Panel pb{"(f) photon transfer, photoelectrons", "mean (pe)", "variance (pe^2)", {}, false, false, std::nullopt, {}};
  Series d1{"data", {}, {}, {}, Mark::points, "#1f77b4"}, d2 = d1;
  double xmax = 0;
  for (const auto& row : t.rows) {
    d1.x.push_back(row[0]);
    d1.y.push_back(row[1]);
    d2.x.push_back(row[2]);
    d2.y.push_back(row[3]);
    xmax = std::max(xmax, row[0]);
  }
  Series q{"quadratic fit", {}, {}, {}, Mark::line, "#000000"}, lin{"linear part, a = " + detail::fmt(pe.a, "%.3f"), {}, {}, {}, Mark::line, "#2ca02c"};
  for (int i = 0; i <= 100; ++i) {
    const double x = xmax * 1.05 * i / 100.0;
    q.x.push_back(x);
    q.y.push_back(conv.fit.c0 + conv.fit.c1 * x + conv.fit.c2 * x * x);
    lin.x.push_back(x / conv.conversion);
    lin.y.push_back(pe.a * x / conv.conversion);
  }
  pa.series = {d1, q};
  pb.series = {d2, lin};
  fig.panels = {pa, pb};
  em.svg("fig4_sensor.svg", fig);
  return r;
}

// ---------------------------------------------------------------------------
// qe

inline Image block_mean(const Image& img, Eigen::Index f) {
  if (f <= 1) return img;
  Image out = Image::Zero((img.rows() + f - 1) / f, (img.cols() + f - 1) / f);
  Image cnt = Image::Zero(out.rows(), out.cols());
  for (Eigen::Index y = 0; y < img.rows(); ++y)
    for (Eigen::Index x = 0; x < img.cols(); ++x) {
      out(y / f, x / f) += img(y, x);
      cnt(y / f, x / f) += 1;
    }
  return out / cnt;
}

inline json stage_qe(const RunContext& ctx, Emitter& em, json& inputs, bool required) {
  const auto& c = ctx.cfg;
  auto in = resolve_qe(ctx, required);
  inputs["qe_beams"] = in.source;
  const double conv = in.truth ? in.truth->sensor.conversion : c.truth.sensor.conversion;
  std::vector<QeMeasurement> pts(in.data.frames.size());
  parallel_for(pts.size(), c.workers, [&](std::size_t i) {
    pts[i] = measure_qe(in.data.frames[i], in.data.powers_w[i], in.data.t_m_s, in.data.lambda_m, conv,
                        c.qe.power_rel_sigma);
  });
  const auto camp = summarize_qe(pts);
  json r = {{"qe_mean_percent", 100 * camp.mean},
            {"qe_mean_sigma_percent", 100 * camp.mean_sigma},
            {"slope_per_w", camp.slope},
            {"slope_sigma_per_w", camp.slope_sigma},
            {"slope_significance", camp.slope_sigma > 0 ? std::abs(camp.slope) / camp.slope_sigma : 0.0},
            {"chi2", camp.chi2},
            {"conversion_adu_per_e", conv}};
  if (in.truth) r["truth"] = {{"qe_percent", 100 * in.truth->sensor.qe},
                              {"mean_rel_error", camp.mean / in.truth->sensor.qe - 1}};
  CsvTable t;
  t.header = {"power_uw", "n_adu", "n_ph", "qe_percent", "qe_sigma_percent"};
  for (const auto& p : camp.points) t.rows.push_back({p.power * 1e6, p.n_adu, p.n_ph, 100 * p.qe, 100 * p.qe_sigma});
  em.csv("fig6_qe.csv", t);

  Figure fig;
  fig.columns = 2;
  Panel p{"QE vs beam power", "P (uW)", "QE (%)", {}, false, false, std::nullopt, {}};
  Series s{"measured", {}, {}, {}, Mark::points, "#1f77b4"};
  double lo = 1e300, hi = 0;
  for (const auto& row : t.rows) {
    s.x.push_back(row[0]);
    s.y.push_back(row[3]);
    s.yerr.push_back(row[4]);
    lo = std::min(lo, row[0]);
    hi = std::max(hi, row[0]);
  }
  p.series = {s, Series{"mean " + detail::fmt(100 * camp.mean, "%.2f") + "%", {lo, hi}, {100 * camp.mean, 100 * camp.mean},
                        {}, Mark::dashed, "#000000"}};
  fig.panels = {p};
  const auto& beam = in.data.frames[in.data.frames.size() / 2];
  fig.heatmaps.push_back({"beam profile (8x8 binned)", block_mean(beam, 8), std::nullopt, 0, 0, std::nullopt});
  em.svg("fig6_qe.svg", fig);
  return r;
}

// ---------------------------------------------------------------------------
// snr

inline json stage_snr(const RunContext& ctx, Emitter& em) {
  const auto& c = ctx.cfg;
  const double nsat = c.snr_n_sat_counts();
  const double f2 = c.truth.sensor.excess_noise_factor;
  CsvTable t;
  t.header = {"n_minus_over_n_sat"};
  for (double od : c.snr.od) t.header.push_back("snr_od_" + detail::fmt(od));
  Panel p{"SNR of the corrected optical depth", "n_minus / N_sat", "SNR", {}, true, false, std::nullopt, {}};
  std::vector<Series> series(c.snr.od.size());
  for (std::size_t k = 0; k < c.snr.od.size(); ++k) {
    series[k].label = "OD " + detail::fmt(c.snr.od[k]);
    series[k].mark = Mark::line;
    series[k].color = detail::palette(k);
  }
  for (std::size_t i = 0; i < c.snr.points; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(c.snr.points - 1);
    const double ratio = c.snr.ratio_min * std::pow(c.snr.ratio_max / c.snr.ratio_min, u);
    std::vector<double> row{ratio};
    for (std::size_t k = 0; k < c.snr.od.size(); ++k) {
      double v = std::numeric_limits<double>::quiet_NaN();
      try {
        v = snr_model(c.snr.od[k], ratio * nsat, nsat, f2).snr;
      } catch (const DomainError&) {
      }
      row.push_back(v);
      series[k].x.push_back(ratio);
      series[k].y.push_back(v);
    }
    t.rows.push_back(row);
  }
  em.csv("snr_curves.csv", t);
  json optima = json::array();
  for (double od : c.snr.od) {
    const double n = optimal_probe_counts(od, nsat);
    optima.push_back({{"od", od}, {"optimal_n_minus_counts", n}, {"optimal_over_n_sat", n / nsat},
                      {"snr", snr_model(od, n, nsat, f2).snr}});
  }
  p.series = series;
  Figure fig;
  fig.columns = 1;
  fig.panel_width = 520;
  fig.panel_height = 340;
  fig.panels = {p};
  em.svg("snr_curves.svg", fig);
  return {{"n_sat_counts", nsat}, {"exposure_us", c.snr.exposure_s / kMicrosecond}, {"excess_noise_factor", f2},
          {"optima", optima}};
}

// ---------------------------------------------------------------------------
// rf-phase

inline json stage_rf(const RunContext& ctx, Emitter& em, json& inputs, bool required) {
  const auto& c = ctx.cfg;
  auto in = resolve_traces(ctx, required);
  inputs["rf_traces"] = in.source;
  std::vector<PhaseJumpJob> jobs;
  for (const auto& r : in.data) jobs.push_back({r.trace, r.update_time});
  const double f = in.data.empty() ? c.rf.trace.frequency : in.data.front().trace.f_nominal;
  const double guard = c.rf_guard();
  const auto batch = extract_phase_jumps(jobs, guard, f, c.workers);

  CsvTable t;
  t.header = {"trace", "commanded_dphi_rad", "extracted_dphi_rad", "discrepancy_rad", "realized_dphi_rad",
              "error_cycles"};
  json failures = json::array();
  double worst = 0, ss = 0, disc_ss = 0;
  std::size_t ok = 0, discrepant = 0;
  for (std::size_t k = 0; k < in.data.size(); ++k) {
    if (!batch.errors[k].empty()) {
      failures.push_back({{"trace", k}, {"message", batch.errors[k]}});
      continue;
    }
    const auto& j = batch.jumps[k];
    const double d = command_discrepancy(j, in.data[k].commanded_dphi);
    const double e = wrap_phase(j.dphi_p - in.data[k].realized_dphi) / kTwoPi;
    t.rows.push_back({static_cast<double>(k), in.data[k].commanded_dphi, j.dphi_p, d, in.data[k].realized_dphi, e});
    worst = std::max(worst, std::abs(e));
    ss += e * e;
    disc_ss += d * d;
    discrepant += std::abs(d) / kTwoPi > 1e-3;
    ++ok;
  }
  em.csv("rf_phase.csv", t);
  json r = {{"traces", in.data.size()},
            {"extracted", ok},
            {"failures", failures},
            {"guard_ns", guard * 1e9},
            {"discrepancy_rms_cycles", ok ? std::sqrt(disc_ss / static_cast<double>(ok)) / kTwoPi : 0.0},
            {"discrepant_traces", discrepant}};
  if (in.source.value("source", "") == "simulated" || in.truth)
    r["truth"] = {{"max_abs_error_cycles", worst},
                  {"rms_error_cycles", ok ? std::sqrt(ss / static_cast<double>(ok)) : 0.0}};

  Figure fig;
  fig.columns = 2;
  Panel a{"extracted vs commanded jump", "commanded (rad)", "extracted (rad)", {}, false, false, std::nullopt, {}};
  Panel b{"realized minus commanded", "commanded (rad)", "discrepancy (cycles)", {}, false, false, std::nullopt, {}};
  Series sa{"", {}, {}, {}, Mark::points, "#1f77b4"}, sb = sa;
  for (const auto& row : t.rows) {
    sa.x.push_back(row[1]);
    sa.y.push_back(row[2]);
    sb.x.push_back(row[1]);
    sb.y.push_back(row[3] / kTwoPi);
  }
  a.series = {sa, Series{"commanded", {-kPi, kPi}, {-kPi, kPi}, {}, Mark::dashed, "#555555"}};
  b.series = {sb};
  fig.panels = {a, b};
  em.svg("rf_phase.svg", fig);
  return r;
}

// ---------------------------------------------------------------------------
// Dispatcher

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Runs one command and writes <out>/<command>.json. Returns the report.
inline json run_pipeline(const std::string& command, const RunContext& ctx) {
  bool known = false;
  for (const auto& c : pipeline_commands()) known = known || c == command;
  if (!known) throw ConfigError({"/command: unknown command '" + command + "'"});
  Emitter em(ctx.out);
  json inputs = json::object();
  json results = json::object();
  const auto& c = ctx.cfg;

  auto global_cal = [&]() -> NsatCalibration {
    if (!ctx.calibration.empty()) {
      inputs["calibration"] = {{"path", ctx.calibration.lexically_normal().string()},
                               {"sha256", sha256_file(ctx.calibration)}};
      return calibration_from_report(read_json(ctx.calibration));
    }
    auto st = stage_nsat(ctx, em, inputs, false);
    results["nsat"] = st.results;
    return st.cal;
  };

  if (command == "simulate") {
    results["datasets"] = stage_simulate(ctx);
  } else if (command == "calibrate-nsat") {
    results["nsat"] = stage_nsat(ctx, em, inputs, true).results;
  } else if (command == "map-intensity") {
    const auto cal = global_cal();
    results["map"] = stage_map(ctx, em, inputs, cal, !ctx.input.empty() && fs::exists(ctx.input / "manifest.json"));
  } else if (command == "calibrate-sensor") {
    results["sensor"] = stage_sensor(ctx, em, inputs, true);
  } else if (command == "qe") {
    results["qe"] = stage_qe(ctx, em, inputs, true);
    results["qe"]["reference_triplet"] = {
        {"n_adu", 2.9e9}, {"conversion_adu_per_e", 7.65}, {"n_ph", 9.5e8},
        {"qe_percent", 100 * quantum_efficiency(2.9e9, 7.65, 9.5e8)}};
  } else if (command == "snr") {
    results["snr"] = stage_snr(ctx, em);
  } else if (command == "rf-phase") {
    results["rf"] = stage_rf(ctx, em, inputs, true);
  } else if (command == "report") {
    const auto cal = global_cal();
    results["sensor"] = stage_sensor(ctx, em, inputs, false);
    results["qe"] = stage_qe(ctx, em, inputs, false);
    results["snr"] = stage_snr(ctx, em);
    results["rf"] = stage_rf(ctx, em, inputs, false);
    results["map"] = stage_map(ctx, em, inputs, cal, false);
    // Overall efficiency from the calibrated N_sat and conversion factor.
    const double conv = results["sensor"]["conversion_adu_per_e"].get<double>();
    const double eta = system_efficiency(cal.n_sat, conv, c.geometry, c.truth.atom.lambda, c.truth.atom.i_sat);
    results["system_efficiency"] = {{"value", eta}, {"display", eta <= 0.42 ? "<~ 0.4" : detail::fmt(eta, "%.2f")}};
  }

  json report = {{"tool", "ramseycal"},
                 {"version", kToolVersion},
                 {"command", command},
                 {"seed", c.seed},
                 {"reproducible", ctx.reproducible},
                 {"config", config_to_json(c)},
                 {"inputs", inputs},
                 {"results", results},
                 {"files", em.files()}};
  if (!ctx.reproducible) report["generated_at"] = utc_timestamp();
  write_json(ctx.out / (command + ".json"), report);
  return report;
}

}  // namespace ramseycal
