#pragma once

#include <ostream>
#include <vector>

#include "lift3d/common.hpp"

namespace lift3d {

// Orbit camera in a y-up right-handed frame, always aimed at the origin.
// polar is measured from +y, azimuth from +z toward +x, so the canonical
// front view (polar 90, azimuth 0) sits on the +z axis.
struct Camera {
  double polar_deg = 90.0;
  double azimuth_deg = 0.0;
  double radius = 1.8;
  double fov_y_deg = 40.0;
  int width = 64;
  int height = 64;

  void check() const {
    if (!(polar_deg > 0.0 && polar_deg < 180.0)) throw ConfigError("camera polar angle must lie in (0, 180) degrees");
    if (!(radius > 0.0)) throw ConfigError("camera radius must be positive");
    if (!(fov_y_deg > 0.0 && fov_y_deg < 180.0)) throw ConfigError("camera fov must lie in (0, 180) degrees");
    if (width < 1 || height < 1) throw ConfigError("camera image size must be at least 1x1");
  }

  // Out-of-range but still valid settings degrade quality rather than break
  // math; report them instead of failing.
  std::vector<std::string> safety_warnings() const {
    std::vector<std::string> w;
    if (fov_y_deg < 20.0 || fov_y_deg > 60.0) w.push_back("camera fov " + std::to_string(fov_y_deg) + " outside safe range [20, 60]");
    if (radius < 1.0 || radius > 4.0) w.push_back("camera radius " + std::to_string(radius) + " outside safe range [1, 4]");
    return w;
  }

  double wrapped_azimuth_deg() const {
    double a = std::fmod(azimuth_deg, 360.0);
    if (a < 0.0) a += 360.0;
    return a;
  }

  double t_near() const { return std::max(0.05, radius - 1.2); }
  double t_far() const { return radius + 1.2; }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit length
  double t_near = 0.0;
  double t_far = 0.0;
};

inline Vec3 camera_eye(const Camera& cam) {
  double theta = deg_to_rad(cam.polar_deg);
  double phi = deg_to_rad(cam.wrapped_azimuth_deg());
  double st = std::sin(theta);
  return Vec3{st * std::sin(phi), std::cos(theta), st * std::cos(phi)} * cam.radius;
}

struct CameraBasis {
  Vec3 eye, forward, right, up;
};

inline CameraBasis camera_basis(const Camera& cam) {
  cam.check();
  CameraBasis b;
  b.eye = camera_eye(cam);
  b.forward = normalized(-b.eye);
  Vec3 world_up{0.0, 1.0, 0.0};
  Vec3 r = cross(b.forward, world_up);
  double rn = norm(r);
  if (rn < 1e-15) throw NumericError("degenerate camera basis at the pole");
  b.right = r / rn;
  b.up = cross(b.right, b.forward);
  return b;
}

// Ray through continuous pixel coordinates (px, py), measured in pixels from
// the top-left corner; the center of pixel (x, y) is (x + 0.5, y + 0.5).
inline Ray ray_through(const Camera& cam, const CameraBasis& basis, double px, double py) {
  double tan_half = std::tan(0.5 * deg_to_rad(cam.fov_y_deg));
  double aspect = static_cast<double>(cam.width) / cam.height;
  double u = (2.0 * px / cam.width - 1.0) * tan_half * aspect;
  double v = (1.0 - 2.0 * py / cam.height) * tan_half;
  Ray ray;
  ray.origin = basis.eye;
  ray.direction = normalized(basis.right * u + basis.up * v + basis.forward);
  ray.t_near = cam.t_near();
  ray.t_far = cam.t_far();
  return ray;
}

// One ray per pixel, row-major from the top-left, through pixel centers.
inline std::vector<Ray> generate_rays(const Camera& cam) {
  CameraBasis basis = camera_basis(cam);
  std::vector<Ray> rays;
  rays.reserve(static_cast<size_t>(cam.width) * cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) rays.push_back(ray_through(cam, basis, x + 0.5, y + 0.5));
  return rays;
}

}  // namespace lift3d
