#pragma once

#include <optional>
#include <vector>

#include "ramseycal/errors.hpp"

namespace ramseycal {

// Probe settings that accompany one Ramsey fringe.
struct ProbeMeta {
  double n_adu = 0;             // counts/pixel from imaging the probe without atoms
  double n_adu_exposure_s = 0;  // pulse duration n_adu was recorded for; 0 means t_p
  double delta_bar = 0;         // delta / Gamma
  double t_p = 0;               // commanded pulse duration, s

  double exposure() const { return n_adu_exposure_s > 0 ? n_adu_exposure_s : t_p; }
};

// One sampled Ramsey fringe: (dphi_P, f2) pairs plus probe metadata.
struct FringeDataset {
  std::vector<double> dphi;
  std::vector<double> f2;
  std::vector<double> f2_sigma;  // optional per-point 1-sigma; empty means unweighted
  ProbeMeta probe;
};

// Sampled waveform with its nominal frequency.
struct Trace {
  std::vector<double> t;  // s, strictly increasing
  std::vector<double> v;
  double f_nominal = 0;  // Hz

  void validate() const {
    if (t.size() != v.size()) throw FormatError("Trace: t and v differ in length");
    if (t.size() < 8) throw FormatError("Trace: need at least 8 samples");
    for (std::size_t i = 1; i < t.size(); ++i)
      if (!(t[i] > t[i - 1])) throw FormatError("Trace: times must be strictly increasing");
  }
};

// Camera response: ADU = C * pe + read noise + dark, with pe variance F^2 * mean.
struct SensorModel {
  double conversion = 7.65;        // C, ADU per photoelectron
  double qe = 0.401;               // quantum efficiency
  double read_noise_adu = 32.0;
  double excess_noise_factor = 2;  // F^2: 2 for EMCCD, 1 for conventional CCD
  double dark_level_adu = 0;

  void validate() const {
    if (!(conversion > 0)) throw DomainError("SensorModel: conversion must be > 0");
    if (!(qe > 0 && qe <= 1)) throw DomainError("SensorModel: qe must lie in (0, 1]");
    if (!(read_noise_adu >= 0)) throw DomainError("SensorModel: read noise must be >= 0");
    if (!(excess_noise_factor >= 1)) throw DomainError("SensorModel: excess noise factor must be >= 1");
  }
};

}  // namespace ramseycal
