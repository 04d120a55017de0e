#include "lift3d/guidance.hpp"

#include <cmath>

namespace lift3d {

NoiseSchedule NoiseSchedule::make_linear(int T, double beta_start, double beta_end, double t_min_frac, double t_max_frac) {
  if (T < 2) throw ConfigError("noise schedule: T must be >= 2");
  if (!(beta_start > 0.0 && beta_end > beta_start && beta_end < 1.0)) throw ConfigError("noise schedule: need 0 < beta_start < beta_end < 1");
  if (!(t_min_frac >= 0.0 && t_min_frac <= t_max_frac && t_max_frac <= 1.0))
    throw ConfigError("noise schedule: need 0 <= t_min_frac <= t_max_frac <= 1");

  NoiseSchedule s;
  s.T_ = T;
  s.alpha_bar_.resize(static_cast<size_t>(T) + 1, 1.0);
  double prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    double beta = beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    prod *= 1.0 - beta;
    s.alpha_bar_[static_cast<size_t>(t)] = prod;
  }
  s.t_min_ = std::max(1, static_cast<int>(std::ceil(t_min_frac * T)));
  s.t_max_ = std::min(T, static_cast<int>(std::floor(t_max_frac * T)));
  if (s.t_min_ > s.t_max_) throw ConfigError("noise schedule: empty timestep range");
  return s;
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 1 || t > T_) throw ConfigError("noise schedule: timestep " + std::to_string(t) + " outside [1, " + std::to_string(T_) + "]");
  return alpha_bar_[static_cast<size_t>(t)];
}

int NoiseSchedule::sample_timestep(Rng& rng) const { return static_cast<int>(rng.next_int(t_min_, t_max_)); }

PoseDelta relative_pose(const Camera& ref, const Camera& novel) {
  PoseDelta d;
  d.polar_deg = novel.polar_deg - ref.polar_deg;
  double az = novel.wrapped_azimuth_deg() - ref.wrapped_azimuth_deg();
  if (az >= 180.0) az -= 360.0;
  if (az < -180.0) az += 360.0;
  d.azimuth_deg = az;
  d.radius = novel.radius - ref.radius;
  return d;
}

Camera apply_pose(const Camera& ref, const PoseDelta& delta, int width, int height) {
  Camera cam = ref;
  cam.polar_deg = clamp(ref.polar_deg + delta.polar_deg, 1e-6, 180.0 - 1e-6);
  cam.azimuth_deg = ref.wrapped_azimuth_deg() + delta.azimuth_deg;
  cam.radius = std::max(1e-6, ref.radius + delta.radius);
  cam.width = width;
  cam.height = height;
  return cam;
}

ImageBuffer add_noise(const NoiseSchedule& sched, const ImageBuffer& x, int t, const ImageBuffer& eps) {
  require_same_shape(x, eps, "add_noise");
  double ab = sched.alpha_bar(t);
  double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  ImageBuffer z(x.height(), x.width(), x.channels());
  for (size_t i = 0; i < x.size(); ++i) z[i] = sa * x[i] + sb * eps[i];
  return z;
}

ImageBuffer cfg_combine(const ImageBuffer& eps_cond, const ImageBuffer& eps_uncond, double s) {
  require_same_shape(eps_cond, eps_uncond, "cfg_combine");
  ImageBuffer out(eps_cond.height(), eps_cond.width(), eps_cond.channels());
  for (size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + s * (eps_cond[i] - eps_uncond[i]);
  return out;
}

ImageBuffer gaussian_image(int height, int width, int channels, Rng& rng) {
  ImageBuffer out(height, width, channels);
  for (size_t i = 0; i < out.size(); ++i) out[i] = rng.next_normal();
  return out;
}

namespace {

ImageBuffer sds_residual(const NoiseSchedule& sched, const ScoreProvider& provider, const ImageBuffer& image,
                         const ScoreCondition& cond, int t, const ImageBuffer& eps, double cfg_scale) {
  ImageBuffer z = add_noise(sched, image, t, eps);
  ImageBuffer eps_hat = provider.predict_noise(z, t, cond);
  require_same_shape(eps_hat, z, "score provider output");
  if (provider.has_unconditional()) eps_hat = cfg_combine(eps_hat, provider.predict_noise_unconditional(z, t), cfg_scale);
  double w = sched.weight(t);
  ImageBuffer g(image.height(), image.width(), image.channels());
  for (size_t i = 0; i < g.size(); ++i) g[i] = w * (eps_hat[i] - eps[i]);
  return g;
}

}  // namespace

ImageBuffer sds_grad_2d(const NoiseSchedule& sched, const ScoreProvider& provider, const ImageBuffer& image,
                        const std::string& prompt, int t, const ImageBuffer& eps, double cfg_scale) {
  ScoreCondition cond;
  cond.prompt = prompt;
  return sds_residual(sched, provider, image, cond, t, eps, cfg_scale);
}

ImageBuffer sds_grad_3d(const NoiseSchedule& sched, const ScoreProvider& provider, const ImageBuffer& image,
                        const ImageBuffer& ref_image, const Camera& cam, const Camera& ref_cam, int t, const ImageBuffer& eps,
                        double cfg_scale) {
  ScoreCondition cond;
  cond.ref_image = &ref_image;
  cond.pose = relative_pose(ref_cam, cam);
  return sds_residual(sched, provider, image, cond, t, eps, cfg_scale);
}

GuidanceDraw draw_guidance_noise(const NoiseSchedule& sched, int height, int width, int channels, Rng& rng) {
  GuidanceDraw d;
  d.t1 = sched.sample_timestep(rng);
  d.eps1 = gaussian_image(height, width, channels, rng);
  d.t2 = sched.sample_timestep(rng);
  d.eps2 = gaussian_image(height, width, channels, rng);
  return d;
}

ImageBuffer joint_guidance_grad(const NoiseSchedule& sched, const ScoreProvider* p2d, const ScoreProvider* p3d,
                                const ImageBuffer& image, const ImageBuffer& ref_image, const Camera& cam,
                                const Camera& ref_cam, const GuidanceWeights& weights, const GuidanceDraw& draw,
                                const std::string& prompt) {
  ImageBuffer g(image.height(), image.width(), image.channels());
  if (p2d && weights.lambda_2d3d != 0.0) {
    ImageBuffer g2 = sds_grad_2d(sched, *p2d, image, prompt, draw.t1, draw.eps1, weights.scale_2d);
    for (size_t i = 0; i < g.size(); ++i) g[i] += weights.lambda_2d3d * g2[i];
  }
  if (p3d && weights.lambda_3d != 0.0) {
    ImageBuffer g3 = sds_grad_3d(sched, *p3d, image, ref_image, cam, ref_cam, draw.t2, draw.eps2, weights.scale_3d);
    for (size_t i = 0; i < g.size(); ++i) g[i] += weights.lambda_3d * g3[i];
  }
  return g;
}

namespace {

// Exact optimal denoiser for a point mass: eps_hat = (z - sqrt(ab) y) / sqrt(1 - ab).
ImageBuffer point_mass_noise(const NoiseSchedule& sched, const ImageBuffer& z, int t, const ImageBuffer& y) {
  double ab = sched.alpha_bar(t);
  double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  ImageBuffer out(z.height(), z.width(), z.channels());
  for (size_t i = 0; i < z.size(); ++i) out[i] = (z[i] - sa * y[i]) / sb;
  return out;
}

class TargetDenoiser final : public ScoreProvider {
 public:
  TargetDenoiser(const NoiseSchedule& sched, ImageBuffer target, double scale)
      : sched_(sched), target_(std::move(target)), scale_(scale) {}

  ImageBuffer predict_noise(const ImageBuffer& z_t, int t, const ScoreCondition&) const override {
    const ImageBuffer* y = &target_;
    ImageBuffer resized;
    if (!y->same_shape(z_t)) {
      if (target_.channels() != z_t.channels()) throw ConfigError("target denoiser: channel count mismatch");
      resized = resize_bilinear(target_, z_t.height(), z_t.width());
      y = &resized;
    }
    return point_mass_noise(sched_, z_t, t, *y);
  }
  double guidance_scale() const override { return scale_; }

 private:
  NoiseSchedule sched_;
  ImageBuffer target_;
  double scale_;
};

class MultiviewOracle final : public ScoreProvider {
 public:
  MultiviewOracle(const NoiseSchedule& sched, std::shared_ptr<const ViewSynthesizer> synth, Camera ref_camera, double scale)
      : sched_(sched), synth_(std::move(synth)), ref_camera_(ref_camera), scale_(scale) {
    if (!synth_) throw ConfigError("multiview oracle: null synthesizer");
  }

  ImageBuffer predict_noise(const ImageBuffer& z_t, int t, const ScoreCondition& cond) const override {
    Camera cam = apply_pose(ref_camera_, cond.pose, z_t.width(), z_t.height());
    ImageBuffer y = synth_->render_rgb(cam);
    require_same_shape(y, z_t, "multiview oracle render");
    return point_mass_noise(sched_, z_t, t, y);
  }
  double guidance_scale() const override { return scale_; }

 private:
  NoiseSchedule sched_;
  std::shared_ptr<const ViewSynthesizer> synth_;
  Camera ref_camera_;
  double scale_;
};

}  // namespace

std::unique_ptr<ScoreProvider> make_target_denoiser(const NoiseSchedule& sched, ImageBuffer target, double scale) {
  return std::make_unique<TargetDenoiser>(sched, std::move(target), scale);
}

std::unique_ptr<ScoreProvider> make_multiview_oracle(const NoiseSchedule& sched, std::shared_ptr<const ViewSynthesizer> synth,
                                                     Camera ref_camera, double scale) {
  return std::make_unique<MultiviewOracle>(sched, std::move(synth), ref_camera, scale);
}

}  // namespace lift3d
