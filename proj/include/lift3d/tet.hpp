#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lift3d/field.hpp"
#include "lift3d/params.hpp"

namespace lift3d {

// Regular tetrahedral lattice over [-1,1]^3: resolution^3 vertices, each of
// the (resolution-1)^3 cubes split into 6 tets sharing the cube's main
// diagonal (Kuhn split), so neighboring cubes agree on their shared faces.
// The learnable per-vertex state lives in a ParamStore: "tet.sdf" (signed
// distance, > 0 inside) and "tet.deform" (position offsets, clamped to
// 0.45 * cell in each component so tets cannot invert).
struct TetGrid {
  int resolution = 0;
  double cell = 0.0;
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 4>> tets;  // positively oriented on the lattice

  int64_t vertex_count() const { return static_cast<int64_t>(vertices.size()); }
};

inline constexpr double kDeformClampFactor = 0.45;

TetGrid build_grid(int resolution);

// Registers "tet.sdf" and "tet.deform" (zero-initialized).
void add_tet_params(ParamStore& store, const TetGrid& grid);

// s_i = sigma(v_i) - sigma_threshold at every lattice vertex.
void init_sdf_from_density(const VolumeField& field, const TetGrid& grid, ParamStore& store, double sigma_threshold);

// Provenance of an extracted vertex: lattice edge (a, b) with a < b and the
// interpolation parameter lambda in [0,1], p = (1-lambda) v'_a + lambda v'_b.
struct VertexSource {
  int a = 0, b = 0;
  double lambda = 0.0;
};

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;  // wound so normals face outside (s < 0)
  std::vector<VertexSource> sources;          // empty for imported meshes

  bool empty() const { return triangles.empty(); }
};

// Per-tet case analysis over the deformed lattice: 1 or 3 inside vertices
// emit one triangle, 2 emit a quad split into two. Crossing-edge vertices are
// deduplicated per undirected lattice edge; s = 0 counts as inside.
TriMesh marching_tets(const TetGrid& grid, const ParamStore& store);

// Routes d(loss)/d(surface vertex) into "tet.sdf" / "tet.deform" gradients
// through the interpolation formula (clamped deform components get zero).
// grad is a flat buffer of store.total_size().
void marching_tets_backward(const TetGrid& grid, const ParamStore& store, const TriMesh& mesh,
                            const std::vector<Vec3>& d_vertices, double* grad);

// ASCII OBJ with "v"/"f" records only, 1-based indices, 9 significant digits.
void export_obj(const TriMesh& mesh, const std::string& path);
TriMesh import_obj(const std::string& path);

}  // namespace lift3d
