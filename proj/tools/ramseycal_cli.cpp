#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ramseycal/ramseycal.hpp"

using namespace ramseycal;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kFormat = 3, kDomain = 4, kFit = 5 };

int fail(const std::string& type, const std::string& message, int code,
         const std::vector<std::string>& violations = {}) {
  json e = {{"type", type}, {"message", message}, {"exit_code", code}};
  if (!violations.empty()) e["violations"] = violations;
  std::cerr << json{{"error", e}}.dump() << "\n";
  return code;
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<unsigned> workers;
  bool reproducible = false;
  std::string input;
  std::string calibration;
};

const char* describe_command(const std::string& c) {
  if (c == "simulate") return "Write synthetic datasets with ground truth";
  if (c == "calibrate-nsat") return "Fit N_sat, phi0 and dt0 from Ramsey fringes";
  if (c == "map-intensity") return "Map the probe intensity across the cloud";
  if (c == "calibrate-sensor") return "Photon-transfer calibration of the camera";
  if (c == "qe") return "Quantum efficiency from imaged laser beams";
  if (c == "snr") return "Optical-depth SNR curves and optimal probe levels";
  if (c == "rf-phase") return "Phase jumps of a frequency-synthesizer update";
  return "Run every stage and write a combined report";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ramsey-interferometric calibration of absorption imaging"};
  app.require_subcommand(1);
  Options opt;
  for (const auto& name : pipeline_commands()) {
    auto* sub = app.add_subcommand(name, describe_command(name));
    sub->add_option("--config", opt.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "Master seed (overrides the config)");
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_option("--workers", opt.workers, "Worker threads (overrides the config)")->check(CLI::PositiveNumber);
    sub->add_flag("--reproducible", opt.reproducible, "Omit timestamps so reruns are byte-identical");
    if (name != "simulate" && name != "snr")
      sub->add_option("--input", opt.input, "Dataset directory, or a simulate output directory");
    if (name == "map-intensity" || name == "report")
      sub->add_option("--calibration", opt.calibration, "calibrate-nsat report to reuse")->check(CLI::ExistingFile);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage_error", e.what(), kConfig);
  }

  std::string command;
  for (const auto* s : app.get_subcommands()) command = s->get_name();

  try {
    RunContext ctx;
    ctx.cfg = opt.config.empty() ? parse_config(json::object()) : load_config(opt.config);
    if (opt.seed) ctx.cfg.seed = *opt.seed;
    if (opt.workers) ctx.cfg.workers = *opt.workers;
    ctx.out = opt.out;
    ctx.input = opt.input;
    ctx.calibration = opt.calibration;
    ctx.reproducible = opt.reproducible;
    run_pipeline(command, ctx);
    std::cout << (ctx.out / (command + ".json")).string() << "\n";
    return kOk;
  } catch (const ConfigError& e) {
    return fail("config_error", "invalid configuration", kConfig, e.violations());
  } catch (const FormatError& e) {
    return fail("format_error", e.what(), kFormat);
  } catch (const DomainError& e) {
    return fail("domain_error", e.what(), kDomain);
  } catch (const FitError& e) {
    return fail("fit_error", e.what(), kFit);
  } catch (const fs::filesystem_error& e) {
    return fail("io_error", e.what(), kFormat);
  } catch (const std::exception& e) {
    return fail("internal_error", e.what(), kFailure);
  }
}
