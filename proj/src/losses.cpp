#include "lift3d/losses.hpp"

#include <cmath>
#include <vector>

namespace lift3d {

ReconResult recon_loss(const ImageBuffer& rgb, const ImageBuffer& mask, const ImageBuffer& ref_rgb, const ImageBuffer& ref_mask,
                       const LossWeights& w) {
  require_same_shape(rgb, ref_rgb, "recon_loss rgb");
  require_same_shape(mask, ref_mask, "recon_loss mask");
  if (rgb.height() != mask.height() || rgb.width() != mask.width()) throw ConfigError("recon_loss: rgb/mask sizes differ");
  if (rgb.channels() != 3 || mask.channels() != 1) throw ConfigError("recon_loss: expected 3-channel rgb and 1-channel mask");

  ReconResult out;
  out.d_rgb = ImageBuffer(rgb.height(), rgb.width(), 3);
  out.d_mask = ImageBuffer(rgb.height(), rgb.width(), 1);

  double n_rgb = static_cast<double>(rgb.size());
  double n_mask = static_cast<double>(mask.size());
  double rgb_acc = 0.0, mask_acc = 0.0;
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      double m = ref_mask.at(y, x);
      for (int c = 0; c < 3; ++c) {
        double r = m * (ref_rgb.at(y, x, c) - rgb.at(y, x, c));
        rgb_acc += r * r;
        out.d_rgb.at(y, x, c) = w.rgb * 2.0 * m * -r / n_rgb;
      }
      double dm = mask.at(y, x) - m;
      mask_acc += dm * dm;
      out.d_mask.at(y, x) = w.mask * 2.0 * dm / n_mask;
    }
  }
  out.rgb_term = w.rgb * rgb_acc / n_rgb;
  out.mask_term = w.mask * mask_acc / n_mask;
  out.loss = out.rgb_term + out.mask_term;
  return out;
}

PearsonResult depth_pearson_loss(const ImageBuffer& depth, const ImageBuffer& ref_depth, const ImageBuffer& mask) {
  require_same_shape(depth, ref_depth, "depth_pearson_loss");
  if (depth.height() != mask.height() || depth.width() != mask.width()) throw ConfigError("depth_pearson_loss: mask size differs");
  if (depth.channels() != 1 || mask.channels() != 1) throw ConfigError("depth_pearson_loss: expected single-channel inputs");

  PearsonResult out;
  out.d_depth = ImageBuffer(depth.height(), depth.width(), 1);

  std::vector<int64_t> sel;
  for (int64_t i = 0; i < depth.pixel_count(); ++i)
    if (mask[static_cast<size_t>(i)] > 0.5) sel.push_back(i);
  int64_t n = static_cast<int64_t>(sel.size());
  if (n < 2) {
    out.degenerate = true;
    return out;
  }

  double mx = 0.0, my = 0.0;
  for (int64_t i : sel) {
    mx += depth[static_cast<size_t>(i)];
    my += ref_depth[static_cast<size_t>(i)];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);

  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (int64_t i : sel) {
    double a = depth[static_cast<size_t>(i)] - mx;
    double b = ref_depth[static_cast<size_t>(i)] - my;
    cov += a * b;
    vx += a * a;
    vy += b * b;
  }
  double nn = static_cast<double>(n);
  cov /= nn;
  vx /= nn;
  vy /= nn;
  double sx = std::sqrt(vx), sy = std::sqrt(vy);
  if (sx < 1e-12 || sy < 1e-12) {
    out.degenerate = true;
    return out;
  }

  double r = cov / (sx * sy);
  out.loss = 0.5 * (1.0 - r);
  for (int64_t i : sel) {
    double a = depth[static_cast<size_t>(i)] - mx;
    double b = ref_depth[static_cast<size_t>(i)] - my;
    double dr = (b / sy - r * a / sx) / (nn * sx);
    out.d_depth[static_cast<size_t>(i)] = -0.5 * dr;
  }
  return out;
}

ImageBuffer gaussian_blur(const ImageBuffer& image, int ksize, double sigma) {
  if (ksize < 1 || ksize % 2 == 0) throw ConfigError("gaussian_blur: kernel size must be odd and positive");
  if (sigma <= 0.0) throw ConfigError("gaussian_blur: sigma must be positive");
  int radius = ksize / 2;
  std::vector<double> kernel(static_cast<size_t>(ksize));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : kernel) v /= sum;

  // Mirror index without repeating the border sample; loops handle images
  // narrower than the kernel.
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
  };

  ImageBuffer tmp(image.height(), image.width(), image.channels());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < image.channels(); ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[static_cast<size_t>(k + radius)] * image.at(y, reflect(x + k, image.width()), c);
        tmp.at(y, x, c) = acc;
      }
  ImageBuffer outb(image.height(), image.width(), image.channels());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < image.channels(); ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[static_cast<size_t>(k + radius)] * tmp.at(reflect(y + k, image.height()), x, c);
        outb.at(y, x, c) = acc;
      }
  return outb;
}

SmoothnessResult normal_smoothness_against(const ImageBuffer& normals, const ImageBuffer& frozen, const ImageBuffer& mask) {
  require_same_shape(normals, frozen, "normal_smoothness");
  if (normals.channels() != 3 || mask.channels() != 1) throw ConfigError("normal_smoothness: expected 3-channel normals, 1-channel mask");
  if (normals.height() != mask.height() || normals.width() != mask.width()) throw ConfigError("normal_smoothness: mask size differs");

  SmoothnessResult out;
  out.d_normals = ImageBuffer(normals.height(), normals.width(), 3);

  int64_t count = 0;
  for (int64_t i = 0; i < mask.pixel_count(); ++i)
    if (mask[static_cast<size_t>(i)] > 0.5) ++count;
  if (count == 0) return out;

  double acc = 0.0;
  for (int y = 0; y < normals.height(); ++y)
    for (int x = 0; x < normals.width(); ++x) {
      if (mask.at(y, x) <= 0.5) continue;
      Vec3 diff = normals.rgb_at(y, x) - frozen.rgb_at(y, x);
      double len = norm(diff);
      acc += len;
      if (len > 1e-12) out.d_normals.set_rgb(y, x, diff / (len * static_cast<double>(count)));
    }
  out.loss = acc / static_cast<double>(count);
  return out;
}

SmoothnessResult normal_smoothness_loss(const ImageBuffer& normals, const ImageBuffer& mask) {
  return normal_smoothness_against(normals, gaussian_blur(normals, 9, 3.0), mask);
}

CoarseLossBreakdown total_coarse_loss(double recon, double depth_loss, double normal_loss, double guidance_magnitude,
                                      const LossWeights& w) {
  CoarseLossBreakdown out;
  out.recon = recon;
  out.depth = depth_loss;
  out.normal = normal_loss;
  out.guidance_magnitude = guidance_magnitude;
  out.total = recon + w.depth * depth_loss + w.normal * normal_loss;
  return out;
}

}  // namespace lift3d
