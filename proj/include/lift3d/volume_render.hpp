#pragma once

#include <cstdint>
#include <memory>

#include "lift3d/camera.hpp"
#include "lift3d/field.hpp"
#include "lift3d/image.hpp"

namespace lift3d {

enum class Shading { kAlbedo, kLambertian, kTextureless, kNormal };

Shading shading_from_string(const std::string& name);
const char* shading_name(Shading s);

struct RenderOptions {
  int n_samples = 48;
  Shading shading = Shading::kAlbedo;
  Vec3 light_dir = {0.0, 0.0, 1.0};  // unit vector toward the light
  uint64_t seed = 0;
  uint64_t salt = 0;  // stream discriminator (iteration, view id, ...)
  // T below this threshold terminates the march early (0 disables; keep 0
  // whenever exact partition-of-unity or finite-difference checks matter).
  double stop_transmittance = 0.0;
  // Samples lighter than this skip the normal estimate in lambertian /
  // textureless / normal shading and use the flat fallback instead; their
  // color contribution is bounded by the cutoff itself.
  double shade_weight_cutoff = 0.0;
  double normal_step = 1e-3;
  int threads = 1;
};

struct RayShade {
  Vec3 rgb{1.0, 1.0, 1.0};
  double alpha = 0.0;
  double depth = 0.0;
};

// Stratified single-pass volume rendering over [t_near, t_far]: one uniform
// jitter per bin from a stream keyed on (seed, salt, ray_index), delta_i =
// t_{i+1} - t_i (last delta = bin width), alpha_i = 1 - exp(-sigma_i
// delta_i), weights w_i = T_i alpha_i against a pure white background.
// depth = sum(w_i t_i) / max(alpha, 1e-6).
RayShade render_ray(const VolumeField& field, const Ray& ray, const RenderOptions& opt, uint64_t ray_index);

struct ViewRender {
  ImageBuffer rgb;    // HxWx3
  ImageBuffer mask;   // HxWx1, accumulated alpha
  ImageBuffer depth;  // HxWx1
};

struct ViewTapeImpl;

// Retained forward state for one rendered view: per-ray field tapes, sample
// records and shade results, so the matching backward pass runs without
// re-marching. Holds the whole view's activations (roughly 2 KB per sample),
// and one instance recycles its buffers across views of the same size.
class ViewTape {
 public:
  ViewTape();
  ~ViewTape();
  ViewTape(ViewTape&&) noexcept;
  ViewTape& operator=(ViewTape&&) noexcept;
  ViewTapeImpl& impl() const { return *impl_; }

 private:
  std::unique_ptr<ViewTapeImpl> impl_;
};

// When retain is given the field must be a HashField and the per-ray tapes
// are captured for render_view_backward.
ViewRender render_view(const VolumeField& field, const Camera& cam, const RenderOptions& opt,
                       ViewTape* retain = nullptr);

struct ViewGrad {
  const ImageBuffer* d_rgb = nullptr;
  const ImageBuffer* d_mask = nullptr;
  const ImageBuffer* d_depth = nullptr;
};

// Accumulates d(loss)/d(field params) into store gradients. With a tape from
// render_view the rays replay straight off it; otherwise each ray is
// re-marched with the same jitter streams. The analytic chain runs through
// weights, shading and (where applicable) the finite-difference shading
// normals. Parallel workers accumulate into private buffers merged in worker
// order.
void render_view_backward(const HashField& field, ParamStore& store, const Camera& cam, const RenderOptions& opt,
                          const ViewGrad& upstream, const ViewTape* tape = nullptr);

}  // namespace lift3d
