#pragma once

// Training losses (WGAN critic/generator terms, masked L1, the weighted
// total) and the depth evaluation metrics.

#include <span>
#include <string>
#include <vector>

#include "depthfuse/image.hpp"
#include "depthfuse/tensor.hpp"

namespace depthfuse {

struct LossWeights {
  double lambda_g = 0.5;
  double lambda_l = 1.0;
  double lambda_pred = 10.0;

  /// Throws ValidationError on a negative or non-finite weight.
  void validate() const;
};

/// Mean |pred - gt| over valid gt pixels. `pred` holds the maps of `gt` back
/// to back (N x 1 x H x W for a batch). Throws ValidationError when no gt
/// pixel is valid.
Tensor masked_l1(const Tensor& pred, std::span<const DepthMap> gt);
Tensor masked_l1(const Tensor& pred, const DepthMap& gt);

/// mean(fake) - mean(real).
Tensor wgan_d_loss(const Tensor& scores_fake, const Tensor& scores_real);

/// lambda_g * masked_l1(d_f, gt) - mean(fake).
Tensor wgan_g_loss(const Tensor& scores_fake, const Tensor& d_f, std::span<const DepthMap> gt, double lambda_g);

struct LossTerms {
  Tensor l_d;
  Tensor l_g;
  Tensor l1_local;
  Tensor l1_fused;
  Tensor l1_pred;
  /// L_D + L_G + lambda_l * l1_local + lambda_pred * l1_pred.
  Tensor total;
  /// `total` without L_D: what the generator-side parameters minimize.
  /// L_D's fake-score term would cancel the adversarial term of L_G.
  Tensor generator_objective;
};

LossTerms overall_loss(const Tensor& d_l, const Tensor& d_f, const Tensor& d_pred, std::span<const DepthMap> gt,
                       const Tensor& scores_fake, const Tensor& scores_real, const LossWeights& weights);

// ---- metrics ----

struct ImageMetrics {
  double rmse = 0.0;
  double rel = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::size_t pixels = 0;
};

struct MetricsReport {
  /// Pooled over every evaluated pixel of every image.
  ImageMetrics overall;
  std::vector<ImageMetrics> per_image;

  std::string to_json() const;
};

/// Errors over valid gt pixels: rmse in meters, rel = mean |p - g| / g,
/// delta_t = percentage with max(p/g, g/p) < t for t = 1.25, 1.25^2, 1.25^3.
/// An invalid prediction at a valid gt pixel counts as 0 m.
/// Throws ValidationError when no gt pixel is valid.
ImageMetrics compute_metrics(const DepthMap& pred, const DepthMap& gt);
MetricsReport compute_metrics(std::span<const DepthMap> pred, std::span<const DepthMap> gt);

}  // namespace depthfuse
