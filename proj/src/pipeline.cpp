#include "lift3d/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "lift3d/normal_map.hpp"

namespace lift3d {

namespace {

// Stream tags: every random decision is keyed (seed, tag, iteration) so a
// resumed run consumes identical randomness.
constexpr uint64_t kSaltReference = 0x726566ULL;
constexpr uint64_t kSaltNovel = 0x6e6f76656cULL;
constexpr uint64_t kSaltEval = 0x6576616cULL;
constexpr uint64_t kStreamCamera = 0x63616d657261ULL;
constexpr uint64_t kStreamShading = 0x7368616465ULL;
constexpr uint64_t kStreamGuidance = 0x6775696465ULL;

constexpr int64_t kBackupInterval = 100;

// Training renders terminate saturated rays; metric renders keep the exact
// defaults so partition-of-unity style checks stay bit-for-bit.
constexpr double kTrainStopTransmittance = 1e-4;
constexpr double kTrainShadeWeightCutoff = 1e-3;

double mean_abs(const ImageBuffer& img) {
  const double* p = img.data();
  const int64_t n = img.size();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += std::abs(p[i]);
  return n > 0 ? acc / n : 0.0;
}

// Cosine between each pixel ray and the view axis: converts ray-distance
// depth into the planar depth the normal-map back-projection expects.
ImageBuffer depth_plane_factors(const Camera& cam) {
  ImageBuffer f(cam.height, cam.width, 1);
  const double tan_half = std::tan(0.5 * deg_to_rad(cam.fov_y_deg));
  const double aspect = static_cast<double>(cam.width) / cam.height;
  for (int y = 0; y < cam.height; ++y) {
    const double v = (1.0 - 2.0 * (y + 0.5) / cam.height) * tan_half;
    for (int x = 0; x < cam.width; ++x) {
      const double u = (2.0 * (x + 0.5) / cam.width - 1.0) * tan_half * aspect;
      f.at(y, x) = 1.0 / std::sqrt(u * u + v * v + 1.0);
    }
  }
  return f;
}

Vec3 hemisphere_light(Rng& rng, const Camera& cam) {
  Vec3 v = rng.next_unit_vector();
  const Vec3 toward_eye = normalized(camera_eye(cam));
  if (dot(v, toward_eye) < 0.0) v = v * -1.0;
  return v;
}

}  // namespace

double psnr(const ImageBuffer& a, const ImageBuffer& b, const ImageBuffer* mask) {
  require_same_shape(a, b, "metric");
  double acc = 0.0;
  int64_t count = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      if (mask != nullptr && mask->at(y, x) <= 0.5) continue;
      for (int c = 0; c < a.channels(); ++c) {
        const double d = a.at(y, x, c) - b.at(y, x, c);
        acc += d * d;
        ++count;
      }
    }
  if (count == 0) return 0.0;
  const double mse = acc / count;
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double mask_iou(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b, "metric");
  int64_t inter = 0, uni = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      const bool pa = a.at(y, x) > 0.5, pb = b.at(y, x) > 0.5;
      inter += pa && pb;
      uni += pa || pb;
    }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double depth_corr(const ImageBuffer& depth, const ImageBuffer& ref_depth, const ImageBuffer& mask) {
  require_same_shape(depth, ref_depth, "depth_corr");
  double sx = 0.0, sy = 0.0;
  int64_t n = 0;
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x)
      if (mask.at(y, x) > 0.5) {
        sx += depth.at(y, x);
        sy += ref_depth.at(y, x);
        ++n;
      }
  if (n < 2) return 0.0;
  const double mx = sx / n, my = sy / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x)
      if (mask.at(y, x) > 0.5) {
        const double dx = depth.at(y, x) - mx, dy = ref_depth.at(y, x) - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
      }
  if (sxx < 1e-12 || syy < 1e-12) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

void write_metrics(const Metrics& m, const std::string& path) {
  nlohmann::json j;
  j["psnr_ref_db"] = m.psnr_ref_db;
  j["mask_iou"] = m.mask_iou;
  j["depth_pearson"] = m.depth_pearson;
  j["novel_psnr_mean_db"] = m.novel_psnr_mean_db;
  j["wall_seconds"] = m.wall_seconds;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path);
}

Camera sample_novel_camera(const Camera& ref, double polar_min_deg, double polar_max_deg, int width, int height,
                           Rng& rng) {
  Camera cam = ref;
  cam.azimuth_deg = rng.next_uniform(0.0, 360.0);
  cam.polar_deg = rng.next_uniform(polar_min_deg, polar_max_deg);
  cam.fov_y_deg = 40.0;
  cam.width = width;
  cam.height = height;
  return cam;
}

std::vector<Camera> held_out_cameras(const Camera& ref, int count) {
  std::vector<Camera> cams;
  for (int k = 0; k < count; ++k) {
    Camera cam = ref;
    cam.azimuth_deg = 22.5 + 45.0 * k;
    cam.polar_deg = (k % 2 == 0) ? 75.0 : 105.0;
    cam.fov_y_deg = 40.0;
    cams.push_back(cam);
  }
  return cams;
}

std::vector<Camera> turntable_cameras(const Camera& ref, int frames) {
  std::vector<Camera> cams;
  for (int k = 0; k < frames; ++k) {
    Camera cam = ref;
    cam.azimuth_deg = 360.0 * k / frames;
    cams.push_back(cam);
  }
  return cams;
}

Supervision reference_supervision(const ViewRender& render, const ImageBuffer& ref_rgb, const ImageBuffer& ref_mask,
                                  const ImageBuffer& ref_depth, const Camera& cam, const LossWeights& weights) {
  Supervision sup;
  ReconResult rec = recon_loss(render.rgb, render.mask, ref_rgb, ref_mask, weights);
  sup.recon = rec.loss;
  sup.d_rgb = std::move(rec.d_rgb);
  sup.d_mask = std::move(rec.d_mask);

  ImageBuffer depth_gate(render.depth.height(), render.depth.width(), 1);
  ImageBuffer fg(render.depth.height(), render.depth.width(), 1);
  for (int y = 0; y < depth_gate.height(); ++y)
    for (int x = 0; x < depth_gate.width(); ++x) {
      const bool hit = render.mask.at(y, x) > 0.5;
      fg.at(y, x) = hit ? 1.0 : 0.0;
      depth_gate.at(y, x) = (hit && ref_mask.at(y, x) > 0.5) ? 1.0 : 0.0;
    }

  PearsonResult pearson = depth_pearson_loss(render.depth, ref_depth, depth_gate);
  sup.depth = pearson.loss;

  const ImageBuffer factors = depth_plane_factors(cam);
  ImageBuffer plane_depth(render.depth.height(), render.depth.width(), 1);
  for (int y = 0; y < plane_depth.height(); ++y)
    for (int x = 0; x < plane_depth.width(); ++x)
      plane_depth.at(y, x) = render.depth.at(y, x) * factors.at(y, x);

  const ImageBuffer normals = depth_normal_map(plane_depth, cam);
  SmoothnessResult smooth = normal_smoothness_loss(normals, fg);
  sup.normal = smooth.loss;
  const ImageBuffer d_plane = depth_normal_map_backward(plane_depth, cam, smooth.d_normals);

  sup.d_depth = ImageBuffer(render.depth.height(), render.depth.width(), 1);
  for (int y = 0; y < sup.d_depth.height(); ++y)
    for (int x = 0; x < sup.d_depth.width(); ++x)
      sup.d_depth.at(y, x) = weights.depth * pearson.d_depth.at(y, x) +
                             weights.normal * d_plane.at(y, x) * factors.at(y, x);
  return sup;
}

FieldConfig field_config_from(const Settings& s) {
  FieldConfig cfg;
  cfg.levels = s.field_levels;
  cfg.base_resolution = s.field_base_resolution;
  cfg.finest_resolution = s.field_finest_resolution;
  cfg.table_log2 = s.field_table_log2;
  cfg.hidden = s.field_hidden;
  cfg.check();
  return cfg;
}

Camera reference_camera_from(const Settings& s) {
  Camera cam;
  cam.polar_deg = s.camera_polar_deg;
  cam.azimuth_deg = s.camera_azimuth_deg;
  cam.radius = s.camera_radius;
  cam.fov_y_deg = s.camera_fov_deg;
  cam.width = s.coarse_resolution;
  cam.height = s.coarse_resolution;
  cam.check();
  return cam;
}

// ---------------------------------------------------------------------------
// CoarseTrainer

CoarseTrainer::CoarseTrainer(const Settings& settings, ReferenceBundle bundle, const ScoreProvider* provider_2d,
                             const ScoreProvider* provider_3d)
    : settings_(settings),
      bundle_(std::move(bundle)),
      provider_2d_(provider_2d),
      provider_3d_(provider_3d),
      schedule_(NoiseSchedule::make_linear()) {
  if (bundle_.rgb.height() != bundle_.camera.height || bundle_.rgb.width() != bundle_.camera.width)
    throw ConfigError("reference bundle image size does not match its camera");
  field_ = std::make_unique<HashField>(store_, field_config_from(settings_), settings_.seed);
  guidance_weights_ = {settings_.guidance_lambda_2d3d, settings_.guidance_lambda_3d, settings_.guidance_scale_2d,
                       settings_.guidance_scale_3d};
  loss_weights_ = {settings_.loss_lambda_rgb, settings_.loss_lambda_mask, settings_.loss_lambda_depth,
                   settings_.loss_lambda_normal};
  last_good_ = std::make_unique<ParamBackup>(store_);
}

Shading CoarseTrainer::pick_shading(int64_t iter, Rng& rng) const {
  if (!settings_.coarse_shading_fixed.empty()) return shading_from_string(settings_.coarse_shading_fixed);
  if (iter < settings_.coarse_normal_iters) return Shading::kNormal;
  return rng.next_u01() < settings_.coarse_lambertian_prob ? Shading::kLambertian : Shading::kTextureless;
}

void CoarseTrainer::step() {
  const int64_t iter = store_.step();
  if (iter % kBackupInterval == 0) {
    last_good_ = std::make_unique<ParamBackup>(store_);
    last_good_iter_ = iter;
  }

  RenderOptions ro_ref;
  ro_ref.n_samples = settings_.coarse_n_samples;
  ro_ref.shading = Shading::kAlbedo;
  ro_ref.seed = settings_.seed;
  ro_ref.salt = hash_mix(kSaltReference, static_cast<uint64_t>(iter));
  ro_ref.stop_transmittance = kTrainStopTransmittance;
  ro_ref.threads = settings_.threads;
  // Each view is rendered with its tape retained and differentiated before
  // the next view renders, so only one view's tape is alive at a time. A
  // non-finite loss can throw after the reference gradients are in, which is
  // fine: the restore discards parameters and the next step starts from
  // zero_grad again.
  const ViewRender ref_render = render_view(*field_, bundle_.camera, ro_ref, &tape_);
  Supervision sup =
      reference_supervision(ref_render, bundle_.rgb, bundle_.mask, bundle_.depth, bundle_.camera, loss_weights_);
  store_.zero_grad();
  render_view_backward(*field_, store_, bundle_.camera, ro_ref, ViewGrad{&sup.d_rgb, &sup.d_mask, &sup.d_depth},
                       &tape_);

  Rng cam_rng(hash_mix(settings_.seed, hash_mix(kStreamCamera, static_cast<uint64_t>(iter))));
  const Camera novel = sample_novel_camera(bundle_.camera, settings_.novel_polar_min_deg, settings_.novel_polar_max_deg,
                                           bundle_.camera.width, bundle_.camera.height, cam_rng);

  Rng shade_rng(hash_mix(settings_.seed, hash_mix(kStreamShading, static_cast<uint64_t>(iter))));
  const Shading mode = pick_shading(iter, shade_rng);
  RenderOptions ro_nov = ro_ref;
  ro_nov.shading = mode;
  ro_nov.salt = hash_mix(kSaltNovel, static_cast<uint64_t>(iter));
  ro_nov.shade_weight_cutoff = kTrainShadeWeightCutoff;
  if (mode == Shading::kLambertian || mode == Shading::kTextureless)
    ro_nov.light_dir = hemisphere_light(shade_rng, novel);
  const ViewRender novel_render = render_view(*field_, novel, ro_nov, &tape_);

  Rng g_rng(hash_mix(settings_.seed, hash_mix(kStreamGuidance, static_cast<uint64_t>(iter))));
  const GuidanceDraw draw =
      draw_guidance_noise(schedule_, novel_render.rgb.height(), novel_render.rgb.width(), 3, g_rng);
  const ImageBuffer g = joint_guidance_grad(schedule_, provider_2d_, provider_3d_, novel_render.rgb, bundle_.rgb,
                                            novel, bundle_.camera, guidance_weights_, draw, settings_.guidance_prompt);
  const double gmag = mean_abs(g);

  const CoarseLossBreakdown bd = total_coarse_loss(sup.recon, sup.depth, sup.normal, gmag, loss_weights_);
  if (!std::isfinite(bd.total) || !std::isfinite(gmag)) {
    last_good_->restore();
    throw NumericError("non-finite loss at iteration " + std::to_string(iter) + "; state restored to iteration " +
                       std::to_string(last_good_iter_));
  }

  render_view_backward(*field_, store_, novel, ro_nov, ViewGrad{&g, nullptr, nullptr}, &tape_);

  AdamConfig adam;
  adam.lr = settings_.coarse_lr;
  try {
    store_.adam_step(adam);
  } catch (const NumericError& e) {
    last_good_->restore();
    throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(iter) +
                       "; state restored to iteration " + std::to_string(last_good_iter_));
  }

  last_log_ = {store_.step(), bd.total,  bd.recon, bd.depth, bd.normal, gmag,
               psnr(ref_render.rgb, bundle_.rgb)};
}

void CoarseTrainer::run(const LogFn& on_log) {
  const int64_t target = settings_.coarse_iterations;
  while (store_.step() < target) {
    step();
    if (on_log && (store_.step() % 100 == 0 || store_.step() == target)) on_log(last_log_);
  }
}

ViewRender CoarseTrainer::render_reference() const { return render_view_at(bundle_.camera); }

ViewRender CoarseTrainer::render_view_at(const Camera& cam) const {
  RenderOptions ro;
  ro.n_samples = settings_.coarse_n_samples;
  ro.shading = Shading::kAlbedo;
  ro.seed = settings_.seed;
  ro.salt = kSaltEval;
  ro.threads = settings_.threads;
  return render_view(*field_, cam, ro);
}

// ---------------------------------------------------------------------------
// FineTrainer

FineTrainer::FineTrainer(const Settings& settings, ReferenceBundle bundle, const std::string& coarse_checkpoint,
                         const ScoreProvider* provider_2d, const ScoreProvider* provider_3d)
    : settings_(settings),
      bundle_(std::move(bundle)),
      provider_2d_(provider_2d),
      provider_3d_(provider_3d),
      schedule_(NoiseSchedule::make_linear()) {
  const FieldConfig cfg = field_config_from(settings_);
  field_ = std::make_unique<HashField>(store_, cfg, settings_.seed);
  {
    // The coarse checkpoint holds exactly the field arrays, in the same
    // registration order, so its flat values transplant directly.
    ParamStore coarse_store;
    HashField coarse_field(coarse_store, cfg, settings_.seed);
    coarse_store.load(coarse_checkpoint);
    std::copy_n(coarse_store.values_flat(), coarse_store.total_size(), store_.values_flat());
  }

  grid_ = build_grid(settings_.fine_grid_resolution);
  add_tet_params(store_, grid_);
  init_sdf_from_density(*field_, grid_, store_, settings_.fine_sigma_threshold);
  if (marching_tets(grid_, store_).empty())
    throw ConfigError("initial fine-stage mesh is empty; lower fine.sigma_threshold");

  fine_camera_ = bundle_.camera;
  fine_camera_.width = bundle_.camera.width * settings_.fine_resolution_scale;
  fine_camera_.height = bundle_.camera.height * settings_.fine_resolution_scale;
  ref_rgb_fine_ = resize_bilinear(bundle_.rgb, fine_camera_.height, fine_camera_.width);
  ref_mask_fine_ = resize_bilinear(bundle_.mask, fine_camera_.height, fine_camera_.width);
  ref_depth_fine_ = resize_bilinear(bundle_.depth, fine_camera_.height, fine_camera_.width);

  guidance_weights_ = {settings_.guidance_fine_lambda_2d, settings_.guidance_fine_lambda_3d,
                       settings_.guidance_scale_2d, settings_.guidance_scale_3d};
  loss_weights_ = {settings_.loss_lambda_rgb, 0.0, settings_.loss_lambda_depth, settings_.loss_lambda_normal};
  last_good_ = std::make_unique<ParamBackup>(store_);
}

Shading FineTrainer::pick_shading(int64_t, Rng& rng) const {
  if (!settings_.fine_shading_fixed.empty()) return shading_from_string(settings_.fine_shading_fixed);
  return rng.next_u01() < settings_.coarse_lambertian_prob ? Shading::kLambertian : Shading::kTextureless;
}

void FineTrainer::step() {
  const int64_t iter = store_.step();
  if (iter % kBackupInterval == 0) {
    last_good_ = std::make_unique<ParamBackup>(store_);
    last_good_iter_ = iter;
  }

  const TriMesh mesh = marching_tets(grid_, store_);
  const MeshRaycaster caster(mesh);

  MeshRenderOptions mro_ref;
  mro_ref.shading = Shading::kAlbedo;
  mro_ref.threads = settings_.threads;
  const ViewRender ref_render = render_mesh(caster, field_.get(), fine_camera_, mro_ref);
  Supervision sup =
      reference_supervision(ref_render, ref_rgb_fine_, ref_mask_fine_, ref_depth_fine_, fine_camera_, loss_weights_);

  Rng cam_rng(hash_mix(settings_.seed, hash_mix(kStreamCamera, static_cast<uint64_t>(iter))));
  const Camera novel = sample_novel_camera(fine_camera_, settings_.novel_polar_min_deg, settings_.novel_polar_max_deg,
                                           fine_camera_.width, fine_camera_.height, cam_rng);

  Rng shade_rng(hash_mix(settings_.seed, hash_mix(kStreamShading, static_cast<uint64_t>(iter))));
  MeshRenderOptions mro_nov = mro_ref;
  mro_nov.shading = pick_shading(iter, shade_rng);
  if (mro_nov.shading == Shading::kLambertian || mro_nov.shading == Shading::kTextureless)
    mro_nov.light_dir = hemisphere_light(shade_rng, novel);
  const ViewRender novel_render = render_mesh(caster, field_.get(), novel, mro_nov);

  Rng g_rng(hash_mix(settings_.seed, hash_mix(kStreamGuidance, static_cast<uint64_t>(iter))));
  const GuidanceDraw draw =
      draw_guidance_noise(schedule_, novel_render.rgb.height(), novel_render.rgb.width(), 3, g_rng);
  const ImageBuffer g = joint_guidance_grad(schedule_, provider_2d_, provider_3d_, novel_render.rgb, ref_rgb_fine_,
                                            novel, fine_camera_, guidance_weights_, draw, settings_.guidance_prompt);
  const double gmag = mean_abs(g);

  const CoarseLossBreakdown bd = total_coarse_loss(sup.recon, sup.depth, sup.normal, gmag, loss_weights_);
  if (!std::isfinite(bd.total) || !std::isfinite(gmag)) {
    last_good_->restore();
    throw NumericError("non-finite loss at iteration " + std::to_string(iter) + "; state restored to iteration " +
                       std::to_string(last_good_iter_));
  }

  store_.zero_grad();
  std::vector<Vec3> d_verts, d_verts_novel;
  render_mesh_backward(caster, field_.get(), &store_, fine_camera_, mro_ref,
                       ViewGrad{&sup.d_rgb, &sup.d_mask, &sup.d_depth}, &d_verts);
  render_mesh_backward(caster, field_.get(), &store_, novel, mro_nov, ViewGrad{&g, nullptr, nullptr},
                       &d_verts_novel);
  for (size_t i = 0; i < d_verts.size(); ++i) d_verts[i] = d_verts[i] + d_verts_novel[i];
  marching_tets_backward(grid_, store_, mesh, d_verts, store_.grads_flat());

  AdamConfig adam;
  adam.lr = settings_.fine_lr;
  try {
    store_.adam_step(adam);
  } catch (const NumericError& e) {
    last_good_->restore();
    throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(iter) +
                       "; state restored to iteration " + std::to_string(last_good_iter_));
  }

  last_log_ = {store_.step(), bd.total,  bd.recon, bd.depth, bd.normal, gmag,
               psnr(ref_render.rgb, ref_rgb_fine_)};
}

void FineTrainer::run(const LogFn& on_log) {
  const int64_t target = settings_.fine_iterations;
  while (store_.step() < target) {
    step();
    if (on_log && (store_.step() % 100 == 0 || store_.step() == target)) on_log(last_log_);
  }
}

ViewRender FineTrainer::render_reference(int width, int height) const {
  Camera cam = bundle_.camera;
  cam.width = width;
  cam.height = height;
  const TriMesh mesh = marching_tets(grid_, store_);
  const MeshRaycaster caster(mesh);
  MeshRenderOptions mro;
  mro.shading = Shading::kAlbedo;
  mro.threads = settings_.threads;
  return render_mesh(caster, field_.get(), cam, mro);
}

}  // namespace lift3d
