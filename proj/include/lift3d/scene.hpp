#pragma once

#include <memory>
#include <string>

#include "lift3d/camera.hpp"
#include "lift3d/guidance.hpp"
#include "lift3d/volume_render.hpp"

namespace lift3d {

// Analytic test scene: an exact signed distance function plus a linear
// albedo ramp, rendered by sphere tracing. Serves as ground truth for the
// mock priors and for every end-to-end metric; renders are deterministic.
class SyntheticScene : public ViewSynthesizer {
 public:
  // "sphere" (radius 0.5), "box" (half extent 0.45), "snowman" (two fused
  // spheres, r 0.38 at y=-0.22 and r 0.26 at y=+0.28).
  static std::shared_ptr<const SyntheticScene> preset(const std::string& name);

  double sdf(const Vec3& p) const;
  Vec3 albedo(const Vec3& p) const;

  // Returns false when the ray never reaches the surface before t_max.
  bool trace(const Vec3& origin, const Vec3& dir, double t_max, double* t_hit) const;

  // rgb = albedo at the hit point (white background), mask = hit indicator,
  // depth = exact hit distance (0 on background).
  ViewRender render(const Camera& cam) const;
  ImageBuffer render_rgb(const Camera& cam) const override;

  const std::string& name() const { return name_; }

 private:
  enum class Kind { kSphere, kBox, kSnowman };
  explicit SyntheticScene(Kind kind, std::string name) : kind_(kind), name_(std::move(name)) {}
  Kind kind_;
  std::string name_;
};

// Two-level density wrapper over a scene: sigma_inside where sdf <= 0, zero
// outside, with the scene's albedo. Stands in for a trained field in tests.
class SceneDensityField : public VolumeField {
 public:
  explicit SceneDensityField(std::shared_ptr<const SyntheticScene> scene, double sigma_inside = 1000.0)
      : scene_(std::move(scene)), sigma_inside_(sigma_inside) {}

  void sample(const Vec3& x, double* sigma, Vec3* albedo) const override {
    *sigma = scene_->sdf(x) <= 0.0 ? sigma_inside_ : 0.0;
    *albedo = scene_->albedo(x);
  }

 private:
  std::shared_ptr<const SyntheticScene> scene_;
  double sigma_inside_;
};

struct ReferenceBundle {
  Camera camera;
  ImageBuffer rgb;
  ImageBuffer mask;
  ImageBuffer depth;
};

// Exact reference render; depth goes through a positive affine map
// (emulating a relative depth estimator) on foreground pixels, so anything
// consuming it must be scale-and-shift invariant.
ReferenceBundle synthesize_reference(const SyntheticScene& scene, const Camera& cam, double depth_scale = 0.7,
                                     double depth_offset = 0.3);

}  // namespace lift3d
