#pragma once

#include "lift3d/image.hpp"

namespace lift3d {

struct LossWeights {
  double rgb = 5.0;
  double mask = 0.5;
  double depth = 0.001;
  double normal = 0.5;
};

// Masked photometric + mask reconstruction loss:
//   lambda_rgb * mean((M*(I - G))^2) + lambda_mask * mean((M - M_hat)^2)
// with means over all entries so the weights are resolution-independent.
// The reference mask M receives no gradient.
struct ReconResult {
  double loss = 0.0;
  double rgb_term = 0.0;   // already weighted
  double mask_term = 0.0;  // already weighted
  ImageBuffer d_rgb;
  ImageBuffer d_mask;
};
ReconResult recon_loss(const ImageBuffer& rgb, const ImageBuffer& mask, const ImageBuffer& ref_rgb, const ImageBuffer& ref_mask,
                       const LossWeights& w);

// Scale/shift-agnostic depth supervision: 0.5 * (1 - pearson(d, d_ref)) over
// pixels where mask > 0.5. Fewer than 2 selected pixels or a vanishing
// standard deviation make the loss degenerate: 0 with zero gradient.
struct PearsonResult {
  double loss = 0.0;
  bool degenerate = false;
  ImageBuffer d_depth;
};
PearsonResult depth_pearson_loss(const ImageBuffer& depth, const ImageBuffer& ref_depth, const ImageBuffer& mask);

// Separable gaussian blur with reflect padding (kernel size k, odd).
ImageBuffer gaussian_blur(const ImageBuffer& image, int ksize, double sigma);

// Normal-map smoothness: mean over masked pixels of |n - stopgrad(blur(n))|
// with a 9x9 sigma-3 gaussian; the blurred branch is a constant in backward.
// The *_against variant takes an explicit frozen target (used to validate the
// stopgradient contract by finite differences).
struct SmoothnessResult {
  double loss = 0.0;
  ImageBuffer d_normals;
};
SmoothnessResult normal_smoothness_loss(const ImageBuffer& normals, const ImageBuffer& mask);
SmoothnessResult normal_smoothness_against(const ImageBuffer& normals, const ImageBuffer& frozen, const ImageBuffer& mask);

// Stage-1 scalar assembly: recon + lambda_d * depth + lambda_n * smooth. The
// guidance term has no scalar (its gradient is injected directly); mean|g| is
// carried alongside for logging.
struct CoarseLossBreakdown {
  double total = 0.0;
  double recon = 0.0;
  double depth = 0.0;      // unweighted
  double normal = 0.0;     // unweighted
  double guidance_magnitude = 0.0;
};
CoarseLossBreakdown total_coarse_loss(double recon, double depth_loss, double normal_loss, double guidance_magnitude,
                                      const LossWeights& w);

}  // namespace lift3d
