#include "lift3d/image.hpp"

#include <cmath>

namespace lift3d {

ImageBuffer resize_bilinear(const ImageBuffer& src, int height, int width) {
  if (height <= 0 || width <= 0) throw ConfigError("resize_bilinear: target size must be positive");
  if (src.height() == height && src.width() == width) return src;
  ImageBuffer dst(height, width, src.channels());
  double sy = static_cast<double>(src.height()) / height;
  double sx = static_cast<double>(src.width()) / width;
  for (int y = 0; y < height; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y1 = y0 + 1;
    y0 = std::min(std::max(y0, 0), src.height() - 1);
    y1 = std::min(std::max(y1, 0), src.height() - 1);
    for (int x = 0; x < width; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x1 = x0 + 1;
      x0 = std::min(std::max(x0, 0), src.width() - 1);
      x1 = std::min(std::max(x1, 0), src.width() - 1);
      for (int c = 0; c < src.channels(); ++c) {
        double top = (1.0 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c);
        double bot = (1.0 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c);
        dst.at(y, x, c) = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return dst;
}

}  // namespace lift3d
