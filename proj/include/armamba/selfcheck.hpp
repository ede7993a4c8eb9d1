#pragma once

#include <string>
#include <vector>

namespace armamba::selfcheck {

struct CheckResult {
  std::string module, name;
  bool passed = false;
  std::string detail;  // observed vs bound on failure
};

// fast: scan-path equivalence, causality, layout bijections, zoh continuity.
// full adds f64 gradient checks, cluster-count arithmetic and long-sequence
// stability. `seed` reseeds the randomized trials.
std::vector<CheckResult> run(bool full, uint64_t seed = 0);

}  // namespace armamba::selfcheck
