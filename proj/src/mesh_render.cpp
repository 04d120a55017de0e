#include "lift3d/mesh_render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace lift3d {

namespace {

constexpr double kTMin = 1e-9;
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr Vec3 kBackground{1.0, 1.0, 1.0};
constexpr Vec3 kFallbackNormal{0.0, 0.0, 1.0};
constexpr double kGray = 0.5;
constexpr int kLeafSize = 4;

double comp(const Vec3& v, int axis) { return axis == 0 ? v.x : (axis == 1 ? v.y : v.z); }

void grow(Vec3& lo, Vec3& hi, const Vec3& p) {
  lo.x = std::min(lo.x, p.x);
  lo.y = std::min(lo.y, p.y);
  lo.z = std::min(lo.z, p.z);
  hi.x = std::max(hi.x, p.x);
  hi.y = std::max(hi.y, p.y);
  hi.z = std::max(hi.z, p.z);
}

// Entry distance of the ray into the box, or +inf when it misses the
// interval (kTMin, best_t).
double box_entry(const Vec3& lo, const Vec3& hi, const Vec3& o, const Vec3& d, double best_t) {
  double t0 = kTMin, t1 = best_t;
  for (int a = 0; a < 3; ++a) {
    const double da = comp(d, a), oa = comp(o, a);
    const double la = comp(lo, a), ha = comp(hi, a);
    if (std::abs(da) < 1e-15) {
      if (oa < la || oa > ha) return kInf;
      continue;
    }
    double u = (la - oa) / da, v = (ha - oa) / da;
    if (u > v) std::swap(u, v);
    t0 = std::max(t0, u);
    t1 = std::min(t1, v);
    if (t0 > t1) return kInf;
  }
  return t0;
}

}  // namespace

MeshRaycaster::MeshRaycaster(const TriMesh& mesh) : mesh_(&mesh) {
  const int n = static_cast<int>(mesh.triangles.size());
  if (n == 0) return;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<Vec3> centroids(n);
  for (int i = 0; i < n; ++i) {
    const auto& t = mesh.triangles[i];
    centroids[i] = (mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]) * (1.0 / 3.0);
  }
  tris_.reserve(n);
  nodes_.reserve(2 * static_cast<size_t>(n));
  build(order, centroids, 0, n);
}

int MeshRaycaster::build(std::vector<int>& order, std::vector<Vec3>& centroids, int begin, int end) {
  const int node_id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();

  Vec3 lo{kInf, kInf, kInf}, hi{-kInf, -kInf, -kInf};
  Vec3 clo = lo, chi = hi;
  for (int i = begin; i < end; ++i) {
    const auto& t = mesh_->triangles[order[i]];
    for (int k = 0; k < 3; ++k) grow(lo, hi, mesh_->vertices[t[k]]);
    grow(clo, chi, centroids[order[i]]);
  }

  int axis = 0;
  double extent = chi.x - clo.x;
  if (chi.y - clo.y > extent) {
    axis = 1;
    extent = chi.y - clo.y;
  }
  if (chi.z - clo.z > extent) {
    axis = 2;
    extent = chi.z - clo.z;
  }

  if (end - begin <= kLeafSize || extent <= 0.0) {
    Node& node = nodes_[node_id];
    node.lo = lo;
    node.hi = hi;
    node.begin = static_cast<int>(tris_.size());
    node.count = end - begin;
    for (int i = begin; i < end; ++i) {
      const auto& t = mesh_->triangles[order[i]];
      const Vec3& v0 = mesh_->vertices[t[0]];
      tris_.push_back({v0, mesh_->vertices[t[1]] - v0, mesh_->vertices[t[2]] - v0, order[i]});
    }
    return node_id;
  }

  std::sort(order.begin() + begin, order.begin() + end, [&](int a, int b) {
    const double ca = comp(centroids[a], axis), cb = comp(centroids[b], axis);
    return ca != cb ? ca < cb : a < b;
  });
  const int mid = (begin + end) / 2;
  const int left = build(order, centroids, begin, mid);
  const int right = build(order, centroids, mid, end);
  Node& node = nodes_[node_id];
  node.lo = lo;
  node.hi = hi;
  node.left = left;
  node.right = right;
  return node_id;
}

bool MeshRaycaster::trace(const Ray& ray, MeshHit* hit) const {
  if (nodes_.empty()) return false;
  const Vec3 o = ray.origin, d = ray.direction;

  double best_t = kInf;
  MeshHit best;
  int stack[64];
  int top = 0;
  if (box_entry(nodes_[0].lo, nodes_[0].hi, o, d, best_t) < kInf) stack[top++] = 0;

  while (top > 0) {
    const Node& node = nodes_[stack[--top]];
    if (node.left < 0) {
      for (int i = node.begin; i < node.begin + node.count; ++i) {
        const PackedTri& tri = tris_[i];
        const Vec3 pvec = cross(d, tri.e2);
        const double det = dot(tri.e1, pvec);
        if (std::abs(det) < 1e-14) continue;
        const double inv_det = 1.0 / det;
        const Vec3 tvec = o - tri.v0;
        const double u = dot(tvec, pvec) * inv_det;
        if (u < 0.0 || u > 1.0) continue;
        const Vec3 qvec = cross(tvec, tri.e1);
        const double v = dot(d, qvec) * inv_det;
        if (v < 0.0 || u + v > 1.0) continue;
        const double t = dot(tri.e2, qvec) * inv_det;
        if (t <= kTMin || t >= best_t) continue;
        best_t = t;
        best = {tri.id, t, 1.0 - u - v, u, v};
      }
      continue;
    }
    const double tl = box_entry(nodes_[node.left].lo, nodes_[node.left].hi, o, d, best_t);
    const double tr = box_entry(nodes_[node.right].lo, nodes_[node.right].hi, o, d, best_t);
    int near = node.left, far = node.right;
    double tn = tl, tf = tr;
    if (tr < tl) {
      std::swap(near, far);
      std::swap(tn, tf);
    }
    if (tf < kInf) stack[top++] = far;
    if (tn < kInf) stack[top++] = near;
  }

  if (best.triangle < 0) return false;
  *hit = best;
  return true;
}

namespace {

struct HitShade {
  Vec3 rgb;
  double light_factor = 1.0;  // multiplies albedo in albedo/lambertian modes
  bool field_grad = false;    // rgb depends on the color field
};

Vec3 face_normal(const TriMesh& mesh, int tri, const Vec3& view_dir) {
  const auto& t = mesh.triangles[tri];
  const Vec3 raw =
      cross(mesh.vertices[t[1]] - mesh.vertices[t[0]], mesh.vertices[t[2]] - mesh.vertices[t[0]]);
  const double len = norm(raw);
  if (len < 1e-12) return kFallbackNormal;
  Vec3 n = raw * (1.0 / len);
  if (dot(n, view_dir) > 0.0) n = n * -1.0;  // two-sided
  return n;
}

HitShade shade_mesh_hit(Shading mode, const Vec3& albedo, const Vec3& n, const Vec3& light) {
  switch (mode) {
    case Shading::kAlbedo:
      return {albedo, 1.0, true};
    case Shading::kLambertian: {
      const double f = 0.1 + 0.9 * std::max(0.0, dot(n, light));
      return {albedo * f, f, true};
    }
    case Shading::kTextureless: {
      const double f = 0.1 + 0.9 * std::max(0.0, dot(n, light));
      return {Vec3{kGray, kGray, kGray} * f, f, false};
    }
    case Shading::kNormal:
      return {(n + Vec3{1.0, 1.0, 1.0}) * 0.5, 1.0, false};
  }
  return {albedo, 1.0, true};
}

}  // namespace

ViewRender render_mesh(const MeshRaycaster& caster, const VolumeField* color_field, const Camera& cam,
                       const MeshRenderOptions& opt) {
  cam.check();
  const CameraBasis basis = camera_basis(cam);
  ViewRender out{ImageBuffer(cam.height, cam.width, 3), ImageBuffer(cam.height, cam.width, 1),
                 ImageBuffer(cam.height, cam.width, 1)};
  const int64_t n_pixels = static_cast<int64_t>(cam.height) * cam.width;

  parallel_for(opt.threads, n_pixels, [&](int, int64_t p_begin, int64_t p_end) {
    // Hit positions are gathered per chunk so the color field sees bulk
    // queries instead of one sample per pixel.
    constexpr int kChunk = 64;
    MeshHit hits[kChunk];
    bool has_hit[kChunk];
    Vec3 pos[kChunk], dir[kChunk], albedo[kChunk];
    Vec3 cpos[kChunk], calb[kChunk];
    double csigma[kChunk];
    int idx[kChunk];
    for (int64_t base = p_begin; base < p_end; base += kChunk) {
      const int m = static_cast<int>(std::min<int64_t>(kChunk, p_end - base));
      for (int j = 0; j < m; ++j) {
        const int64_t p = base + j;
        const int py = static_cast<int>(p / cam.width);
        const int px = static_cast<int>(p % cam.width);
        const Ray ray = ray_through(cam, basis, px + 0.5, py + 0.5);
        dir[j] = ray.direction;
        has_hit[j] = caster.trace(ray, &hits[j]);
        albedo[j] = {kGray, kGray, kGray};
        if (has_hit[j]) {
          const auto& t = caster.mesh().triangles[hits[j].triangle];
          pos[j] = caster.mesh().vertices[t[0]] * hits[j].b0 + caster.mesh().vertices[t[1]] * hits[j].b1 +
                   caster.mesh().vertices[t[2]] * hits[j].b2;
        }
      }
      if (color_field != nullptr) {
        int k = 0;
        for (int j = 0; j < m; ++j) {
          if (!has_hit[j]) continue;
          idx[k] = j;
          cpos[k] = pos[j];
          ++k;
        }
        color_field->sample_many(cpos, k, csigma, calb);
        for (int j = 0; j < k; ++j) albedo[idx[j]] = calb[j];
      }
      for (int j = 0; j < m; ++j) {
        const int64_t p = base + j;
        const int py = static_cast<int>(p / cam.width);
        const int px = static_cast<int>(p % cam.width);
        if (!has_hit[j]) {
          out.rgb.set_rgb(py, px, kBackground);
          out.mask.at(py, px) = 0.0;
          out.depth.at(py, px) = 0.0;
          continue;
        }
        const Vec3 n = face_normal(caster.mesh(), hits[j].triangle, dir[j]);
        const HitShade shade = shade_mesh_hit(opt.shading, albedo[j], n, opt.light_dir);
        out.rgb.set_rgb(py, px, shade.rgb);
        out.mask.at(py, px) = 1.0;
        out.depth.at(py, px) = hits[j].t;
      }
    }
  });
  return out;
}

void render_mesh_backward(const MeshRaycaster& caster, const HashField* color_field, ParamStore* store,
                          const Camera& cam, const MeshRenderOptions& opt, const ViewGrad& upstream,
                          std::vector<Vec3>* d_vertices) {
  cam.check();
  if (color_field != nullptr && store == nullptr)
    throw ConfigError("render_mesh_backward needs a ParamStore when a color field is given");
  const CameraBasis basis = camera_basis(cam);
  const TriMesh& mesh = caster.mesh();
  d_vertices->assign(mesh.vertices.size(), Vec3{});
  const int64_t n_pixels = static_cast<int64_t>(cam.height) * cam.width;

  const int n_workers = resolve_threads(opt.threads);
  std::vector<std::vector<double>> grad_buffers;
  std::vector<std::vector<Vec3>> vert_buffers(n_workers);
  if (color_field != nullptr)
    for (int w = 0; w < n_workers; ++w) grad_buffers.push_back(store->make_grad_buffer());

  parallel_for(n_workers, n_pixels, [&](int worker, int64_t p_begin, int64_t p_end) {
    FieldScratch scratch;
    FieldBatch batch;
    if (color_field != nullptr) scratch = color_field->make_scratch();
    std::vector<Vec3>& d_verts = vert_buffers[worker];
    d_verts.assign(mesh.vertices.size(), Vec3{});
    double* grad = color_field != nullptr ? grad_buffers[worker].data() : nullptr;

    // The color-field part runs on gathered batches: one forward batch gives
    // the tape for both the spatial jvps and the parameter backward.
    constexpr int kChunk = 64;
    constexpr int kBatch = 16;
    MeshHit hits[kChunk];
    bool live[kChunk];
    Vec3 pos[kChunk], d_pos[kChunk], d_rgb_px[kChunk];
    double light[kChunk];
    int fidx[kChunk];
    Vec3 fpos[kBatch], fda[kBatch];
    double fds[kBatch];

    for (int64_t base = p_begin; base < p_end; base += kChunk) {
      const int m = static_cast<int>(std::min<int64_t>(kChunk, p_end - base));
      int n_field = 0;
      for (int j = 0; j < m; ++j) {
        live[j] = false;
        const int64_t p = base + j;
        const int py = static_cast<int>(p / cam.width);
        const int px = static_cast<int>(p % cam.width);
        Vec3 d_rgb{};
        double d_depth = 0.0;
        if (upstream.d_rgb != nullptr) d_rgb = upstream.d_rgb->rgb_at(py, px);
        if (upstream.d_depth != nullptr) d_depth = upstream.d_depth->at(py, px);
        if (d_rgb.x == 0.0 && d_rgb.y == 0.0 && d_rgb.z == 0.0 && d_depth == 0.0) continue;

        const Ray ray = ray_through(cam, basis, px + 0.5, py + 0.5);
        if (!caster.trace(ray, &hits[j])) continue;
        live[j] = true;
        const auto& t = mesh.triangles[hits[j].triangle];
        pos[j] = mesh.vertices[t[0]] * hits[j].b0 + mesh.vertices[t[1]] * hits[j].b1 +
                 mesh.vertices[t[2]] * hits[j].b2;
        d_pos[j] = ray.direction * d_depth;  // depth = dot(pos - origin, dir)
        d_rgb_px[j] = d_rgb;

        if (color_field != nullptr) {
          const Vec3 n = face_normal(mesh, hits[j].triangle, ray.direction);
          const HitShade shade = shade_mesh_hit(opt.shading, Vec3{kGray, kGray, kGray}, n, opt.light_dir);
          light[j] = shade.light_factor;
          if (shade.field_grad && HashField::inside_box(pos[j])) fidx[n_field++] = j;
        }
      }

      for (int fb = 0; fb < n_field; fb += kBatch) {
        const int k = std::min(kBatch, n_field - fb);
        for (int i = 0; i < k; ++i) fpos[i] = pos[fidx[fb + i]];
        color_field->sample_batch(fpos, k, batch, nullptr, nullptr);
        const Vec3 axes[3] = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
        for (int i = 0; i < k; ++i) {
          const int j = fidx[fb + i];
          const Vec3 d_albedo = d_rgb_px[j] * light[j];
          color_field->extract_scratch(batch, i, scratch);
          double spatial[3];
          for (int a = 0; a < 3; ++a) {
            double d_sigma_dir;
            Vec3 d_albedo_dir;
            color_field->sample_jvp(fpos[i], axes[a], scratch, &d_sigma_dir, &d_albedo_dir);
            spatial[a] = dot(d_albedo_dir, d_albedo);
          }
          d_pos[j] = d_pos[j] + Vec3{spatial[0], spatial[1], spatial[2]};
          fds[i] = 0.0;
          fda[i] = d_albedo;
        }
        color_field->sample_batch_backward(fds, fda, batch, grad);
      }

      for (int j = 0; j < m; ++j) {
        if (!live[j]) continue;
        const auto& t = mesh.triangles[hits[j].triangle];
        d_verts[t[0]] = d_verts[t[0]] + d_pos[j] * hits[j].b0;
        d_verts[t[1]] = d_verts[t[1]] + d_pos[j] * hits[j].b1;
        d_verts[t[2]] = d_verts[t[2]] + d_pos[j] * hits[j].b2;
      }
    }
  });

  for (int w = 0; w < n_workers; ++w)
    for (size_t i = 0; i < d_vertices->size(); ++i)
      (*d_vertices)[i] = (*d_vertices)[i] + vert_buffers[w][i];
  if (color_field != nullptr) store->merge_grad_buffers(grad_buffers);
}

}  // namespace lift3d
