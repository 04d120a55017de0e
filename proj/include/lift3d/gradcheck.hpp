#pragma once

#include <string>
#include <vector>

#include "lift3d/params.hpp"

namespace lift3d {

struct GradCheckEntry {
  std::string name;
  FiniteDiffReport report;
  double tolerance = 1e-3;
  bool pass() const { return report.max_rel_error < tolerance; }
};

// Finite-difference validation of every hand-written backward pass, on small
// deterministic fixtures: grid encoding, a full 8x8 volume-render photometric
// loss, the depth Pearson loss, normal smoothness against a frozen blur,
// marching-tets vertex positions wrt SDF and deformation, and the mesh
// renderer's color loss. Intended budget: well under two minutes.
std::vector<GradCheckEntry> run_gradcheck(uint64_t seed);

}  // namespace lift3d
