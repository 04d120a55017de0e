#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lift3d/config.hpp"
#include "lift3d/guidance.hpp"
#include "lift3d/losses.hpp"
#include "lift3d/mesh_render.hpp"
#include "lift3d/scene.hpp"
#include "lift3d/tet.hpp"
#include "lift3d/volume_render.hpp"

namespace lift3d {

// Reconstruction metrics. PSNR assumes [0,1] images and is capped at 99 dB
// (the zero-MSE sentinel); IoU thresholds both masks at 0.5; depth_corr is
// the Pearson correlation over mask-selected pixels (0 when degenerate).
double psnr(const ImageBuffer& a, const ImageBuffer& b, const ImageBuffer* mask = nullptr);
double mask_iou(const ImageBuffer& a, const ImageBuffer& b);
double depth_corr(const ImageBuffer& depth, const ImageBuffer& ref_depth, const ImageBuffer& mask);

struct Metrics {
  double psnr_ref_db = 0.0;
  double mask_iou = 0.0;
  double depth_pearson = 0.0;
  double novel_psnr_mean_db = 0.0;
  double wall_seconds = 0.0;
};
void write_metrics(const Metrics& m, const std::string& path);

// azimuth ~ U[0,360), polar ~ U[polar_min, polar_max], radius and position
// from the reference camera, FOV fixed at 40 degrees.
Camera sample_novel_camera(const Camera& ref, double polar_min_deg, double polar_max_deg, int width, int height,
                           Rng& rng);

// Fixed novel poses for evaluation: azimuths 22.5 + 45k, polar alternating
// 75/105, reference radius. Never coincides with the default reference view.
std::vector<Camera> held_out_cameras(const Camera& ref, int count = 8);

// 36 poses at 10-degree azimuth steps, reference polar and radius.
std::vector<Camera> turntable_cameras(const Camera& ref, int frames = 36);

struct IterationLog {
  int64_t iteration = 0;
  double total = 0.0;
  double recon = 0.0;
  double depth = 0.0;
  double normal = 0.0;
  double guidance_magnitude = 0.0;
  double psnr_ref_db = 0.0;
};
using LogFn = std::function<void(const IterationLog&)>;

// Shared per-iteration supervision on the reference view: photometric +
// mask reconstruction, Pearson depth over pixels where both the rendered
// alpha and the reference mask exceed 0.5, and normal-map smoothness on
// normals derived from the rendered depth. Returns the upstream buffers for
// the renderer's backward pass (d_mask all zero when mask_weight is 0).
struct Supervision {
  double recon = 0.0;
  double depth = 0.0;   // unweighted Pearson term
  double normal = 0.0;  // unweighted smoothness term
  ImageBuffer d_rgb, d_mask, d_depth;
};
Supervision reference_supervision(const ViewRender& render, const ImageBuffer& ref_rgb, const ImageBuffer& ref_mask,
                                  const ImageBuffer& ref_depth, const Camera& cam, const LossWeights& weights);

// Stage 1: hash-field optimization against the reference view plus one
// SDS-guided novel view per iteration. Deterministic given (settings.seed,
// iteration); resumable from a checkpoint because every random stream is
// keyed on the iteration counter.
class CoarseTrainer {
 public:
  CoarseTrainer(const Settings& settings, ReferenceBundle bundle, const ScoreProvider* provider_2d,
                const ScoreProvider* provider_3d);

  void step();
  void run(const LogFn& on_log = nullptr);

  int64_t iteration() const { return store_.step(); }
  const HashField& field() const { return *field_; }
  HashField& field() { return *field_; }
  ParamStore& store() { return store_; }
  const ReferenceBundle& bundle() const { return bundle_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const IterationLog& last_log() const { return last_log_; }

  ViewRender render_reference() const;               // albedo shading, no jitter salt reuse
  ViewRender render_view_at(const Camera& cam) const;  // albedo, arbitrary pose

  void save(const std::string& path) const { store_.save(path); }
  void load(const std::string& path) { store_.load(path); }

 private:
  Shading pick_shading(int64_t iter, Rng& rng) const;

  Settings settings_;
  ReferenceBundle bundle_;
  const ScoreProvider* provider_2d_;
  const ScoreProvider* provider_3d_;
  NoiseSchedule schedule_;
  ParamStore store_;
  std::unique_ptr<HashField> field_;
  GuidanceWeights guidance_weights_;
  LossWeights loss_weights_;
  IterationLog last_log_;
  std::unique_ptr<ParamBackup> last_good_;
  int64_t last_good_iter_ = 0;
  ViewTape tape_;  // recycled across iterations; one view in flight at a time
};

// Stage 2: tetrahedra + shared color field starting from a coarse
// checkpoint. The mesh is re-extracted every iteration; renders supervise at
// scale * coarse resolution against the bilinearly upsampled bundle with the
// mask weight forced to zero; the optimizer state starts fresh.
class FineTrainer {
 public:
  FineTrainer(const Settings& settings, ReferenceBundle bundle, const std::string& coarse_checkpoint,
              const ScoreProvider* provider_2d, const ScoreProvider* provider_3d);

  void step();
  void run(const LogFn& on_log = nullptr);

  int64_t iteration() const { return store_.step(); }
  const TetGrid& grid() const { return grid_; }
  const HashField& field() const { return *field_; }
  ParamStore& store() { return store_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const IterationLog& last_log() const { return last_log_; }
  const Camera& render_camera() const { return fine_camera_; }

  TriMesh current_mesh() const { return marching_tets(grid_, store_); }
  ViewRender render_reference(int width, int height) const;  // albedo shading

  void save(const std::string& path) const { store_.save(path); }
  void load(const std::string& path) { store_.load(path); }

 private:
  Shading pick_shading(int64_t iter, Rng& rng) const;

  Settings settings_;
  ReferenceBundle bundle_;  // at coarse resolution
  const ScoreProvider* provider_2d_;
  const ScoreProvider* provider_3d_;
  NoiseSchedule schedule_;
  ParamStore store_;
  std::unique_ptr<HashField> field_;
  TetGrid grid_;
  Camera fine_camera_;
  ImageBuffer ref_rgb_fine_, ref_mask_fine_, ref_depth_fine_;
  GuidanceWeights guidance_weights_;
  LossWeights loss_weights_;
  IterationLog last_log_;
  std::unique_ptr<ParamBackup> last_good_;
  int64_t last_good_iter_ = 0;
};

FieldConfig field_config_from(const Settings& s);
Camera reference_camera_from(const Settings& s);

}  // namespace lift3d
