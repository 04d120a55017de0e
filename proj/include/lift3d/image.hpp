#pragma once

#include <cstdint>
#include <vector>

#include "lift3d/common.hpp"

namespace lift3d {

// Row-major float64 image, 1 or 3 channels. Values are linear; quantization
// only happens at PNG export.
class ImageBuffer {
 public:
  ImageBuffer() = default;

  ImageBuffer(int height, int width, int channels, double fill = 0.0) : height_(height), width_(width), channels_(channels) {
    if (height <= 0 || width <= 0) throw ConfigError("image dimensions must be positive");
    if (channels != 1 && channels != 3) throw ConfigError("image must have 1 or 3 channels");
    data_.assign(static_cast<size_t>(height) * width * channels, fill);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  int64_t pixel_count() const { return static_cast<int64_t>(height_) * width_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int y, int x, int c = 0) { return data_[(static_cast<size_t>(y) * width_ + x) * channels_ + c]; }
  double at(int y, int x, int c = 0) const { return data_[(static_cast<size_t>(y) * width_ + x) * channels_ + c]; }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  Vec3 rgb_at(int y, int x) const {
    size_t i = (static_cast<size_t>(y) * width_ + x) * channels_;
    if (channels_ == 1) return {data_[i], data_[i], data_[i]};
    return {data_[i], data_[i + 1], data_[i + 2]};
  }

  void set_rgb(int y, int x, const Vec3& v) {
    size_t i = (static_cast<size_t>(y) * width_ + x) * channels_;
    data_[i] = v.x;
    data_[i + 1] = v.y;
    data_[i + 2] = v.z;
  }

  bool same_shape(const ImageBuffer& o) const { return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_; }

  void fill(double v) { data_.assign(data_.size(), v); }

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  if (!a.same_shape(b)) throw ConfigError(std::string(what) + ": image shapes differ");
}

// Bilinear resampling with edge clamping (half-pixel centers).
ImageBuffer resize_bilinear(const ImageBuffer& src, int height, int width);

inline double mean_squared_error(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b, "mean_squared_error");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace lift3d
