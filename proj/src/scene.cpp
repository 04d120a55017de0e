#include "lift3d/scene.hpp"

#include <algorithm>
#include <cmath>

namespace lift3d {

namespace {

double sphere_sdf(const Vec3& p, const Vec3& center, double radius) { return norm(p - center) - radius; }

double box_sdf(const Vec3& p, double half) {
  const Vec3 q{std::abs(p.x) - half, std::abs(p.y) - half, std::abs(p.z) - half};
  const Vec3 outside{std::max(q.x, 0.0), std::max(q.y, 0.0), std::max(q.z, 0.0)};
  return norm(outside) + std::min(std::max(q.x, std::max(q.y, q.z)), 0.0);
}

constexpr int kMaxSteps = 512;
constexpr double kHitEps = 1e-7;

}  // namespace

std::shared_ptr<const SyntheticScene> SyntheticScene::preset(const std::string& name) {
  Kind kind;
  if (name == "sphere")
    kind = Kind::kSphere;
  else if (name == "box")
    kind = Kind::kBox;
  else if (name == "snowman")
    kind = Kind::kSnowman;
  else
    throw ConfigError("unknown scene preset '" + name + "' (valid: sphere, box, snowman)");
  return std::shared_ptr<const SyntheticScene>(new SyntheticScene(kind, name));
}

double SyntheticScene::sdf(const Vec3& p) const {
  switch (kind_) {
    case Kind::kSphere:
      return sphere_sdf(p, Vec3{0.0, 0.0, 0.0}, 0.5);
    case Kind::kBox:
      return box_sdf(p, 0.45);
    case Kind::kSnowman:
      return std::min(sphere_sdf(p, Vec3{0.0, -0.22, 0.0}, 0.38), sphere_sdf(p, Vec3{0.0, 0.28, 0.0}, 0.26));
  }
  return 1.0;
}

Vec3 SyntheticScene::albedo(const Vec3& p) const {
  auto ramp = [](double v) { return std::clamp(v, 0.05, 0.95); };
  return Vec3{ramp(0.5 + 0.8 * p.x), ramp(0.5 + 0.8 * p.y), ramp(0.5 - 0.8 * p.z)};
}

bool SyntheticScene::trace(const Vec3& origin, const Vec3& dir, double t_max, double* t_hit) const {
  double t = 0.0;
  for (int i = 0; i < kMaxSteps; ++i) {
    const double d = sdf(origin + dir * t);
    if (d < kHitEps) {
      *t_hit = t;
      return true;
    }
    t += d;
    if (t > t_max) return false;
  }
  return false;
}

ViewRender SyntheticScene::render(const Camera& cam) const {
  cam.check();
  const CameraBasis basis = camera_basis(cam);
  ViewRender out{ImageBuffer(cam.height, cam.width, 3), ImageBuffer(cam.height, cam.width, 1),
                 ImageBuffer(cam.height, cam.width, 1)};
  for (int py = 0; py < cam.height; ++py)
    for (int px = 0; px < cam.width; ++px) {
      const Ray ray = ray_through(cam, basis, px + 0.5, py + 0.5);
      double t_hit;
      if (trace(ray.origin, ray.direction, ray.t_far, &t_hit)) {
        out.rgb.set_rgb(py, px, albedo(ray.origin + ray.direction * t_hit));
        out.mask.at(py, px) = 1.0;
        out.depth.at(py, px) = t_hit;
      } else {
        out.rgb.set_rgb(py, px, Vec3{1.0, 1.0, 1.0});
        out.mask.at(py, px) = 0.0;
        out.depth.at(py, px) = 0.0;
      }
    }
  return out;
}

ImageBuffer SyntheticScene::render_rgb(const Camera& cam) const { return render(cam).rgb; }

ReferenceBundle synthesize_reference(const SyntheticScene& scene, const Camera& cam, double depth_scale,
                                     double depth_offset) {
  if (depth_scale <= 0.0) throw ConfigError("depth affine scale must be positive");
  ViewRender view = scene.render(cam);
  ReferenceBundle bundle{cam, std::move(view.rgb), std::move(view.mask), std::move(view.depth)};
  for (int py = 0; py < cam.height; ++py)
    for (int px = 0; px < cam.width; ++px)
      if (bundle.mask.at(py, px) > 0.5)
        bundle.depth.at(py, px) = depth_scale * bundle.depth.at(py, px) + depth_offset;
  return bundle;
}

}  // namespace lift3d
