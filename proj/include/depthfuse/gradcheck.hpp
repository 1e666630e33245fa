#pragma once

// Finite-difference sweep over every differentiable op and network forward.

#include <cstdint>
#include <string>
#include <vector>

namespace depthfuse {

struct GradCheckEntry {
  std::string op;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = false;
};

inline constexpr double kGradCheckTolerance = 1e-3;

/// Checks each op on small random inputs (network forwards on 8x8 images)
/// with central differences, eps 1e-4. An entry passes when its largest
/// relative error is below kGradCheckTolerance and at least one element was
/// compared.
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed = 1);

/// {"format_version":1,"tolerance":…,"entries":[…],"passed":…}
std::string gradcheck_json(const std::vector<GradCheckEntry>& entries);

}  // namespace depthfuse
