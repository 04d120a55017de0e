#pragma once

#include <memory>
#include <string>

#include "lift3d/camera.hpp"
#include "lift3d/image.hpp"

namespace lift3d {

// DDPM-style forward-process bookkeeping: beta_t linear over [1, T],
// alpha_bar_t = prod(1 - beta_s), plus the timestep sampling range used by
// score distillation.
class NoiseSchedule {
 public:
  static NoiseSchedule make_linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02, double t_min_frac = 0.02,
                                   double t_max_frac = 0.98);

  int steps() const { return T_; }
  int t_min() const { return t_min_; }
  int t_max() const { return t_max_; }
  double alpha_bar(int t) const;                             // t in [1, T]
  double weight(int t) const { return 1.0 - alpha_bar(t); }  // w(t)
  int sample_timestep(Rng& rng) const;

 private:
  int T_ = 0, t_min_ = 0, t_max_ = 0;
  std::vector<double> alpha_bar_;  // index 1..T
};

// Relative orbit pose between two cameras aimed at the origin, the
// conditioning convention of the pose-aware provider.
struct PoseDelta {
  double polar_deg = 0.0;
  double azimuth_deg = 0.0;  // wrapped to [-180, 180)
  double radius = 0.0;
};

PoseDelta relative_pose(const Camera& ref, const Camera& novel);
Camera apply_pose(const Camera& ref, const PoseDelta& delta, int width, int height);

struct ScoreCondition {
  std::string prompt;                      // 2D providers
  const ImageBuffer* ref_image = nullptr;  // 3D providers
  PoseDelta pose;                          // 3D providers
};

// Noise predictor interface. Implementations must be deterministic in
// (z_t, t, condition) and immutable after construction. Providers that
// implement classifier-free guidance additionally expose an unconditional
// branch; the analytic mocks do not.
class ScoreProvider {
 public:
  virtual ~ScoreProvider() = default;
  virtual ImageBuffer predict_noise(const ImageBuffer& z_t, int t, const ScoreCondition& cond) const = 0;
  virtual double guidance_scale() const = 0;
  virtual bool has_unconditional() const { return false; }
  virtual ImageBuffer predict_noise_unconditional(const ImageBuffer&, int) const {
    throw ConfigError("score provider has no unconditional branch");
  }
};

struct GuidanceWeights {
  double lambda_2d3d = 1.0;
  double lambda_3d = 40.0;
  double scale_2d = 100.0;
  double scale_3d = 5.0;
};

// z_t = sqrt(alpha_bar_t) x + sqrt(1 - alpha_bar_t) eps
ImageBuffer add_noise(const NoiseSchedule& sched, const ImageBuffer& x, int t, const ImageBuffer& eps);

// eps_uncond + s (eps_cond - eps_uncond)
ImageBuffer cfg_combine(const ImageBuffer& eps_cond, const ImageBuffer& eps_uncond, double s);

// i.i.d. standard-normal image, row-major draw order.
ImageBuffer gaussian_image(int height, int width, int channels, Rng& rng);

// Score-distillation gradients: g = w(t) (eps_hat - eps) per pixel, with
// eps_hat run through cfg_combine at the given scale when the provider has
// an unconditional branch. The buffer is d(guidance)/d(image), injected
// directly during backprop (the image Jacobian is applied by the renderer).
ImageBuffer sds_grad_2d(const NoiseSchedule& sched, const ScoreProvider& provider, const ImageBuffer& image,
                        const std::string& prompt, int t, const ImageBuffer& eps, double cfg_scale);
ImageBuffer sds_grad_3d(const NoiseSchedule& sched, const ScoreProvider& provider, const ImageBuffer& image,
                        const ImageBuffer& ref_image, const Camera& cam, const Camera& ref_cam, int t, const ImageBuffer& eps,
                        double cfg_scale);

/// One joint draw: (t1, eps1) for the 2D prior then (t2, eps2) for the 3D
// prior, in that fixed order.
struct GuidanceDraw {
  int t1 = 1;
  ImageBuffer eps1;
  int t2 = 1;
  ImageBuffer eps2;
};
GuidanceDraw draw_guidance_noise(const NoiseSchedule& sched, int height, int width, int channels, Rng& rng);

// lambda_2d3d * g_2d + lambda_3d * g_3d; a zero weight (or missing provider)
// skips that branch entirely, which is bit-identical to adding its zeroed
// buffer.
ImageBuffer joint_guidance_grad(const NoiseSchedule& sched, const ScoreProvider* p2d, const ScoreProvider* p3d,
                                const ImageBuffer& image, const ImageBuffer& ref_image, const Camera& cam,
                                const Camera& ref_cam, const GuidanceWeights& weights, const GuidanceDraw& draw,
                                const std::string& prompt);

// Analytic mock providers. The target denoiser is the exact optimal denoiser
// for a point mass at `target` (resized bilinearly if the operand shape
// differs); the multiview oracle denoises toward an exact render of the
// conditioned pose.
class ViewSynthesizer {
 public:
  virtual ~ViewSynthesizer() = default;
  virtual ImageBuffer render_rgb(const Camera& cam) const = 0;
};

std::unique_ptr<ScoreProvider> make_target_denoiser(const NoiseSchedule& sched, ImageBuffer target, double scale);
std::unique_ptr<ScoreProvider> make_multiview_oracle(const NoiseSchedule& sched, std::shared_ptr<const ViewSynthesizer> synth,
                                                     Camera ref_camera, double scale);

}  // namespace lift3d
