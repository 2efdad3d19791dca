#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace ramseycal {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent per-stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent generator for (seed, stream); streams are frames, shots, traces.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x632be59bd9b4e019ULL)));
}

inline double normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

// Photoelectron count with mean `mean` and variance f2 * mean. Exact Poisson
// statistics (in steps of f2) for small means, Gaussian above 20.
inline double sample_photoelectrons(double mean, double excess_noise_factor, Rng& rng) {
  if (mean <= 0) return 0.0;
  if (mean > 20.0) return mean + std::sqrt(excess_noise_factor * mean) * normal(rng);
  const double k = static_cast<double>(
      std::poisson_distribution<long long>(mean / excess_noise_factor)(rng));
  return k * excess_noise_factor;
}

}  // namespace ramseycal
