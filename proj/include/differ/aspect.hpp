#pragma once

#include <string>

namespace differ {

// Description aspects. The first five are per-image descriptions; the
// summary aspects aggregate per identity (biometric) or per outfit
// (clothing).
enum class Aspect {
  kBiometric,
  kHair,
  kClothing,
  kPose,
  kBackground,
  kBiometricSummary,
  kClothingSummary,
};

std::string aspect_name(Aspect aspect);
Aspect aspect_from_name(const std::string& name);
bool aspect_is_summary(Aspect aspect);

}  // namespace differ
