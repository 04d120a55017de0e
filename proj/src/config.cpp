#include "lift3d/config.hpp"

#include <climits>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace lift3d {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config::Config() {
  Settings& s = settings_;
  auto u = [&](const char* k, uint64_t& v) { bindings_[k] = {'u', &v}; };
  auto i = [&](const char* k, int64_t& v) { bindings_[k] = {'i', &v}; };
  auto n = [&](const char* k, int& v) { bindings_[k] = {'n', &v}; };
  auto d = [&](const char* k, double& v) { bindings_[k] = {'d', &v}; };
  auto t = [&](const char* k, std::string& v) { bindings_[k] = {'s', &v}; };

  u("seed", s.seed);
  n("threads", s.threads);
  t("scene.preset", s.scene_preset);
  d("scene.depth_scale", s.scene_depth_scale);
  d("scene.depth_offset", s.scene_depth_offset);
  t("io.outdir", s.io_outdir);
  t("render.source", s.render_source);
  t("render.obj", s.render_obj);
  d("camera.polar", s.camera_polar_deg);
  d("camera.azimuth", s.camera_azimuth_deg);
  d("camera.radius", s.camera_radius);
  d("camera.fov", s.camera_fov_deg);
  i("coarse.iterations", s.coarse_iterations);
  d("coarse.lr", s.coarse_lr);
  n("coarse.resolution", s.coarse_resolution);
  n("coarse.n_samples", s.coarse_n_samples);
  i("coarse.normal_iters", s.coarse_normal_iters);
  d("coarse.lambertian_prob", s.coarse_lambertian_prob);
  d("coarse.textureless_prob", s.coarse_textureless_prob);
  t("coarse.shading_fixed", s.coarse_shading_fixed);
  i("fine.iterations", s.fine_iterations);
  d("fine.lr", s.fine_lr);
  n("fine.resolution_scale", s.fine_resolution_scale);
  n("fine.grid_resolution", s.fine_grid_resolution);
  d("fine.sigma_threshold", s.fine_sigma_threshold);
  t("fine.shading_fixed", s.fine_shading_fixed);
  d("loss.lambda_rgb", s.loss_lambda_rgb);
  d("loss.lambda_mask", s.loss_lambda_mask);
  d("loss.lambda_depth", s.loss_lambda_depth);
  d("loss.lambda_normal", s.loss_lambda_normal);
  d("guidance.lambda_2d3d", s.guidance_lambda_2d3d);
  d("guidance.lambda_3d", s.guidance_lambda_3d);
  d("guidance.fine_lambda_2d", s.guidance_fine_lambda_2d);
  d("guidance.fine_lambda_3d", s.guidance_fine_lambda_3d);
  d("guidance.scale_2d", s.guidance_scale_2d);
  d("guidance.scale_3d", s.guidance_scale_3d);
  t("guidance.prompt", s.guidance_prompt);
  d("novel.polar_min", s.novel_polar_min_deg);
  d("novel.polar_max", s.novel_polar_max_deg);
  n("field.levels", s.field_levels);
  n("field.base_resolution", s.field_base_resolution);
  n("field.finest_resolution", s.field_finest_resolution);
  n("field.table_log2", s.field_table_log2);
  n("field.hidden", s.field_hidden);
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = bindings_.find(key);
  if (it == bindings_.end()) {
    std::string msg = "unknown config key '" + key + "'; valid keys:";
    for (const auto& [k, b] : bindings_) msg += " " + k;
    throw ConfigError(msg);
  }
  const Binding& b = it->second;
  try {
    size_t used = 0;
    switch (b.type) {
      case 'u': {
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        *static_cast<uint64_t*>(b.target) = v;
        break;
      }
      case 'i': {
        const long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        *static_cast<int64_t*>(b.target) = v;
        break;
      }
      case 'n': {
        const long v = std::stol(value, &used);
        if (used != value.size() || v < INT_MIN || v > INT_MAX) throw std::invalid_argument(value);
        *static_cast<int*>(b.target) = static_cast<int>(v);
        break;
      }
      case 'd': {
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        *static_cast<double*>(b.target) = v;
        break;
      }
      default:
        *static_cast<std::string*>(b.target) = value;
    }
  } catch (const std::logic_error&) {
    throw ConfigError("bad value '" + value + "' for config key '" + key + "'");
  }
}

void Config::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void Config::apply_override(const std::string& key_eq_value) {
  const size_t eq = key_eq_value.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + key_eq_value + "' is not of the form key=value");
  set(trim(key_eq_value.substr(0, eq)), trim(key_eq_value.substr(eq + 1)));
}

void Config::validate() const {
  const Settings& s = settings_;
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(s.threads >= 0, "threads must be >= 0 (0 = hardware count)");
  require(s.camera_polar_deg > 0.0 && s.camera_polar_deg < 180.0, "camera.polar must be in (0, 180)");
  require(s.camera_radius > 0.0, "camera.radius must be positive");
  require(s.camera_fov_deg > 0.0 && s.camera_fov_deg < 180.0, "camera.fov must be in (0, 180)");
  require(s.coarse_iterations > 0, "coarse.iterations must be > 0");
  require(s.fine_iterations > 0, "fine.iterations must be > 0");
  require(s.coarse_lr > 0.0 && s.fine_lr > 0.0, "learning rates must be positive");
  require(s.coarse_resolution >= 4, "coarse.resolution must be >= 4");
  require(s.coarse_n_samples >= 2, "coarse.n_samples must be >= 2");
  require(s.coarse_normal_iters >= 0, "coarse.normal_iters must be >= 0");
  require(s.coarse_lambertian_prob >= 0.0 && s.coarse_textureless_prob >= 0.0,
          "shading probabilities must be >= 0");
  require(std::abs(s.coarse_lambertian_prob + s.coarse_textureless_prob - 1.0) < 1e-9,
          "coarse.lambertian_prob + coarse.textureless_prob must equal 1");
  require(s.fine_resolution_scale >= 1, "fine.resolution_scale must be >= 1");
  require(s.fine_grid_resolution >= 2, "fine.grid_resolution must be >= 2");
  require(s.scene_depth_scale > 0.0, "scene.depth_scale must be positive");
  require(s.novel_polar_min_deg > 0.0 && s.novel_polar_max_deg < 180.0 &&
              s.novel_polar_min_deg <= s.novel_polar_max_deg,
          "novel polar bounds must satisfy 0 < min <= max < 180");
  for (const std::string* f : {&s.coarse_shading_fixed, &s.fine_shading_fixed})
    require(f->empty() || *f == "albedo" || *f == "lambertian" || *f == "textureless" || *f == "normal",
            "shading_fixed must be empty or one of albedo, lambertian, textureless, normal");
  require(s.render_source == "coarse" || s.render_source == "fine" || s.render_source == "mesh",
          "render.source must be one of coarse, fine, mesh");
}

std::string Config::render() const {
  std::ostringstream out;
  for (const auto& [key, b] : bindings_) {
    out << key << " = ";
    switch (b.type) {
      case 'u':
        out << *static_cast<const uint64_t*>(b.target);
        break;
      case 'i':
        out << *static_cast<const int64_t*>(b.target);
        break;
      case 'n':
        out << *static_cast<const int*>(b.target);
        break;
      case 'd': {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", *static_cast<const double*>(b.target));
        out << buf;
        break;
      }
      default:
        out << *static_cast<const std::string*>(b.target);
    }
    out << "\n";
  }
  return out.str();
}

std::vector<std::string> Config::keys() const {
  std::vector<std::string> out;
  out.reserve(bindings_.size());
  for (const auto& [k, b] : bindings_) out.push_back(k);
  return out;
}

}  // namespace lift3d
