#pragma once

#include <vector>

#include "lift3d/camera.hpp"
#include "lift3d/tet.hpp"
#include "lift3d/volume_render.hpp"

namespace lift3d {

struct MeshHit {
  int triangle = -1;
  double t = 0.0;
  double b0 = 0.0, b1 = 0.0, b2 = 0.0;
};

// Nearest ray-triangle intersection over a BVH built once per mesh. The build
// is deterministic (median splits with index tie-breaks), so render output is
// a pure function of mesh + camera.
class MeshRaycaster {
 public:
  explicit MeshRaycaster(const TriMesh& mesh);

  bool trace(const Ray& ray, MeshHit* hit) const;
  const TriMesh& mesh() const { return *mesh_; }

 private:
  struct Node {
    Vec3 lo, hi;
    int left = -1, right = -1;  // internal if left >= 0
    int begin = 0, count = 0;
  };
  struct PackedTri {
    Vec3 v0, e1, e2;
    int id = 0;
  };

  int build(std::vector<int>& order, std::vector<Vec3>& centroids, int begin, int end);

  const TriMesh* mesh_;
  std::vector<Node> nodes_;
  std::vector<PackedTri> tris_;
};

struct MeshRenderOptions {
  Shading shading = Shading::kAlbedo;
  Vec3 light_dir{0.0, 0.0, 1.0};
  int threads = 1;
};

// Ray-cast mesh rendering: color = shade(color_field(hit point)) with the
// geometric face normal, mask = 1 on hit (no gradient), depth = hit t,
// white background. A null color_field renders a uniform 0.5 albedo.
ViewRender render_mesh(const MeshRaycaster& caster, const VolumeField* color_field, const Camera& cam,
                       const MeshRenderOptions& opt);

// Frozen-visibility backward: the hit assignment, barycentrics and shading
// normal are constants; gradients reach (a) the color field parameters and
// (b) the hit point p = sum(b_i w_i), hence the triangle vertices, through
// the field's spatial dependence and through depth = dot(p - origin, dir).
// d_vertices (resized to the mesh) accumulates d(loss)/d(vertex); field
// parameter gradients accumulate into store. d_mask upstream is ignored.
void render_mesh_backward(const MeshRaycaster& caster, const HashField* color_field, ParamStore* store,
                          const Camera& cam, const MeshRenderOptions& opt, const ViewGrad& upstream,
                          std::vector<Vec3>* d_vertices);

}  // namespace lift3d
