#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lift3d/common.hpp"

namespace lift3d {

// Every tunable in one flat struct; the Config registry binds each field to
// a dotted key so files and --set overrides share one code path.
struct Settings {
  uint64_t seed = 0;
  int threads = 1;

  std::string scene_preset = "sphere";
  double scene_depth_scale = 0.7;   // affine map applied to reference depth
  double scene_depth_offset = 0.3;

  std::string io_outdir = "out";

  std::string render_source = "coarse";  // coarse | fine | mesh
  std::string render_obj;                // OBJ path for source mesh; default outdir/mesh.obj

  double camera_polar_deg = 90.0;  // reference view
  double camera_azimuth_deg = 0.0;
  double camera_radius = 1.8;
  double camera_fov_deg = 40.0;

  int64_t coarse_iterations = 5000;
  double coarse_lr = 1e-3;
  int coarse_resolution = 64;
  int coarse_n_samples = 48;
  int64_t coarse_normal_iters = 3000;       // normal shading for this prefix
  double coarse_lambertian_prob = 0.75;     // afterwards: lambertian vs
  double coarse_textureless_prob = 0.25;    // textureless, must sum to 1
  std::string coarse_shading_fixed;         // override: force one mode if set

  int64_t fine_iterations = 5000;
  double fine_lr = 1e-3;
  int fine_resolution_scale = 8;  // render at scale * coarse resolution
  int fine_grid_resolution = 48;
  double fine_sigma_threshold = 10.0;
  std::string fine_shading_fixed;

  double loss_lambda_rgb = 5.0;
  double loss_lambda_mask = 0.5;
  double loss_lambda_depth = 0.001;
  double loss_lambda_normal = 0.5;

  double guidance_lambda_2d3d = 1.0;   // coarse stage
  double guidance_lambda_3d = 40.0;
  double guidance_fine_lambda_2d = 0.001;
  double guidance_fine_lambda_3d = 0.01;
  double guidance_scale_2d = 100.0;
  double guidance_scale_3d = 5.0;
  std::string guidance_prompt = "an object";

  double novel_polar_min_deg = 60.0;
  double novel_polar_max_deg = 120.0;

  int field_levels = 8;
  int field_base_resolution = 16;
  int field_finest_resolution = 256;
  int field_table_log2 = 16;
  int field_hidden = 64;
};

class Config {
 public:
  Config();

  Settings& settings() { return settings_; }
  const Settings& settings() const { return settings_; }

  // Unknown keys throw ConfigError naming every valid key.
  void set(const std::string& key, const std::string& value);

  // key = value lines, '#' comments, blank lines ignored.
  void load_file(const std::string& path);
  void apply_override(const std::string& key_eq_value);  // "key=value"

  void validate() const;

  // The effective configuration, one sorted "key = value" line each.
  std::string render() const;
  std::vector<std::string> keys() const;

 private:
  struct Binding {
    char type;  // 'i' int64, 'n' int, 'd' double, 's' string, 'u' uint64
    void* target;
  };
  Settings settings_;
  std::map<std::string, Binding> bindings_;
};

}  // namespace lift3d
