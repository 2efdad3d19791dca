#pragma once

#include <numbers>

namespace ramseycal {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

// SI, exact since the 2019 redefinition.
inline constexpr double kPlanck = 6.62607015e-34;        // J s
inline constexpr double kSpeedOfLight = 299792458.0;     // m / s

inline constexpr double kMicrosecond = 1e-6;

}  // namespace ramseycal
