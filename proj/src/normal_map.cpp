#include "lift3d/normal_map.hpp"

#include <cmath>
#include <vector>

namespace lift3d {

namespace {

struct Frustum {
  std::vector<double> u;  // per column
  std::vector<double> v;  // per row
};

Frustum frustum_dirs(const ImageBuffer& depth, const Camera& cam) {
  double tan_half = std::tan(0.5 * deg_to_rad(cam.fov_y_deg));
  double aspect = static_cast<double>(depth.width()) / depth.height();
  Frustum f;
  f.u.resize(static_cast<size_t>(depth.width()));
  f.v.resize(static_cast<size_t>(depth.height()));
  for (int x = 0; x < depth.width(); ++x) f.u[static_cast<size_t>(x)] = (2.0 * (x + 0.5) / depth.width() - 1.0) * tan_half * aspect;
  for (int y = 0; y < depth.height(); ++y) f.v[static_cast<size_t>(y)] = (1.0 - 2.0 * (y + 0.5) / depth.height()) * tan_half;
  return f;
}

inline Vec3 back_project(const ImageBuffer& depth, const Frustum& f, int y, int x) {
  double d = depth.at(y, x);
  return {d * f.u[static_cast<size_t>(x)], d * f.v[static_cast<size_t>(y)], d};
}

// Central-difference tangent along x (one-sided at borders); dx_lo/dx_hi
// report which taps were used and their weight for the backward scatter.
inline Vec3 tangent_x(const ImageBuffer& depth, const Frustum& f, int y, int x, int* lo, int* hi, double* w) {
  if (depth.width() == 1) {
    *lo = *hi = x;
    *w = 0.0;
    return {0.0, 0.0, 0.0};
  }
  *lo = x > 0 ? x - 1 : x;
  *hi = x < depth.width() - 1 ? x + 1 : x;
  *w = (*hi - *lo) == 2 ? 0.5 : 1.0;
  return (back_project(depth, f, y, *hi) - back_project(depth, f, y, *lo)) * *w;
}

inline Vec3 tangent_y(const ImageBuffer& depth, const Frustum& f, int y, int x, int* lo, int* hi, double* w) {
  if (depth.height() == 1) {
    *lo = *hi = y;
    *w = 0.0;
    return {0.0, 0.0, 0.0};
  }
  *lo = y > 0 ? y - 1 : y;
  *hi = y < depth.height() - 1 ? y + 1 : y;
  *w = (*hi - *lo) == 2 ? 0.5 : 1.0;
  return (back_project(depth, f, *hi, x) - back_project(depth, f, *lo, x)) * *w;
}

constexpr Vec3 kFallback{0.0, 0.0, -1.0};

}  // namespace

ImageBuffer depth_normal_map(const ImageBuffer& depth, const Camera& cam) {
  if (depth.channels() != 1) throw ConfigError("depth_normal_map: depth must be single-channel");
  Frustum f = frustum_dirs(depth, cam);
  ImageBuffer normals(depth.height(), depth.width(), 3);
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      int lo, hi;
      double w;
      Vec3 tx = tangent_x(depth, f, y, x, &lo, &hi, &w);
      Vec3 ty = tangent_y(depth, f, y, x, &lo, &hi, &w);
      Vec3 raw = cross(tx, ty);
      double s = raw.z > 0.0 ? -1.0 : 1.0;
      Vec3 m = raw * s;
      double r = norm(m);
      normals.set_rgb(y, x, r < 1e-12 ? kFallback : m / r);
    }
  }
  return normals;
}

ImageBuffer depth_normal_map_backward(const ImageBuffer& depth, const Camera& cam, const ImageBuffer& d_normals) {
  if (depth.channels() != 1) throw ConfigError("depth_normal_map: depth must be single-channel");
  require_same_shape(d_normals, ImageBuffer(depth.height(), depth.width(), 3), "depth_normal_map_backward");
  Frustum f = frustum_dirs(depth, cam);

  ImageBuffer d_points(depth.height(), depth.width(), 3);
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      Vec3 dn = d_normals.rgb_at(y, x);
      if (dn.x == 0.0 && dn.y == 0.0 && dn.z == 0.0) continue;

      int xlo, xhi, ylo, yhi;
      double wx, wy;
      Vec3 tx = tangent_x(depth, f, y, x, &xlo, &xhi, &wx);
      Vec3 ty = tangent_y(depth, f, y, x, &ylo, &yhi, &wy);
      Vec3 raw = cross(tx, ty);
      double s = raw.z > 0.0 ? -1.0 : 1.0;
      Vec3 m = raw * s;
      double r = norm(m);
      if (r < 1e-12) continue;  // constant fallback, no gradient
      Vec3 n = m / r;

      Vec3 dm = (dn - n * dot(n, dn)) / r;
      Vec3 draw = dm * s;
      Vec3 dtx = cross(ty, draw);
      Vec3 dty = cross(draw, tx);

      if (wx != 0.0) {
        Vec3 g = dtx * wx;
        d_points.set_rgb(y, xhi, d_points.rgb_at(y, xhi) + g);
        d_points.set_rgb(y, xlo, d_points.rgb_at(y, xlo) - g);
      }
      if (wy != 0.0) {
        Vec3 g = dty * wy;
        d_points.set_rgb(yhi, x, d_points.rgb_at(yhi, x) + g);
        d_points.set_rgb(ylo, x, d_points.rgb_at(ylo, x) - g);
      }
    }
  }

  ImageBuffer d_depth(depth.height(), depth.width(), 1);
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x) {
      Vec3 dp = d_points.rgb_at(y, x);
      d_depth.at(y, x) = dp.x * f.u[static_cast<size_t>(x)] + dp.y * f.v[static_cast<size_t>(y)] + dp.z;
    }
  return d_depth;
}

}  // namespace lift3d
