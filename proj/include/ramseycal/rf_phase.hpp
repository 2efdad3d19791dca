#pragma once

// Realized Ramsey phase jump from an RF trace with a phase update: fit a
// sinusoid on each side of the update and take the phase difference.

#include <string>
#include <vector>

#include "ramseycal/datasets.hpp"
#include "ramseycal/errors.hpp"
#include "ramseycal/fits.hpp"
#include "ramseycal/parallel.hpp"
#include "ramseycal/physics.hpp"

namespace ramseycal {

struct PhaseJump {
  double phi_minus = 0;  // before the update, units of pi
  double phi_plus = 0;   // after the update, units of pi
  double dphi_p = 0;     // rad, pi (phi_plus - phi_minus) wrapped to (-pi, pi]
  SineFit before;
  SineFit after;

  double cycles() const { return dphi_p / kTwoPi; }
};

inline double default_guard(double f_nominal) { return 2.0 / f_nominal; }

// guard <= 0 selects the default of two nominal periods. Both fits share the
// time origin t = update_time, so the phases are directly comparable.
inline PhaseJump extract_phase_jump(const Trace& trace, double update_time, double guard, double f_nominal,
                                    double f_tol = kDefaultFrequencyTolerance) {
  trace.validate();
  if (!(f_nominal > 0)) throw DomainError("extract_phase_jump: nominal frequency must be positive");
  if (guard <= 0) guard = default_guard(f_nominal);
  const TimeWindow pre{trace.t.front(), update_time - guard};
  const TimeWindow post{update_time + guard, trace.t.back()};
  PhaseJump j;
  try {
    j.before = fit_sine_segment(trace, pre, f_nominal, f_tol, update_time);
  } catch (const FitError& e) {
    throw FitError(std::string("extract_phase_jump: segment before the update: ") + e.what());
  }
  try {
    j.after = fit_sine_segment(trace, post, f_nominal, f_tol, update_time);
  } catch (const FitError& e) {
    throw FitError(std::string("extract_phase_jump: segment after the update: ") + e.what());
  }
  j.phi_minus = j.before.phi_e;
  j.phi_plus = j.after.phi_e;
  j.dphi_p = wrap_phase(kPi * (j.phi_plus - j.phi_minus));
  return j;
}

// Signed realized-minus-commanded discrepancy, rad in (-pi, pi].
inline double command_discrepancy(const PhaseJump& j, double commanded_dphi) {
  return wrap_phase(j.dphi_p - commanded_dphi);
}

struct PhaseJumpJob {
  Trace trace;
  double update_time = 0;
};

// Batch extraction; failures are reported per trace rather than aborting the batch.
struct PhaseJumpBatch {
  std::vector<PhaseJump> jumps;
  std::vector<std::string> errors;  // empty string for success
};

inline PhaseJumpBatch extract_phase_jumps(const std::vector<PhaseJumpJob>& jobs, double guard, double f_nominal,
                                          std::size_t workers = 1) {
  PhaseJumpBatch out;
  out.jumps.resize(jobs.size());
  out.errors.resize(jobs.size());
  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    try {
      out.jumps[i] = extract_phase_jump(jobs[i].trace, jobs[i].update_time, guard, f_nominal);
    } catch (const std::exception& e) {
      out.errors[i] = e.what();
    }
  });
  return out;
}

}  // namespace ramseycal
