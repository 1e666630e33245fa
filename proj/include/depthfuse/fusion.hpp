#pragma once

// Depth-plane discretization, AdaIN / W-AdaIN feature modulation and the
// confidence-weighted fusion of two depth predictions.

#include <cstdint>
#include <vector>

#include "depthfuse/image.hpp"
#include "depthfuse/rng.hpp"
#include "depthfuse/tensor.hpp"

namespace depthfuse {

// ---- depth planes ----

/// Strictly increasing positive plane depths, at least two.
struct DepthPlanes {
  std::vector<double> depths;

  /// Throws ValidationError when the invariants do not hold.
  void validate() const;
  double max_gap() const;
  /// `count` planes evenly spaced over [near, far].
  static DepthPlanes uniform(double near, double far, std::size_t count);
};

/// Nearest plane per valid pixel, 1-based; ties go to the lower index and
/// invalid pixels get 0.
LabelMap depth_plane_project(const DepthMap& depth, const DepthPlanes& planes);

/// Inverse of depth_plane_project: label i -> planes[i-1], 0 -> invalid.
/// Throws RangeError for labels above the plane count.
DepthMap plane_reconstruct(const LabelMap& labels, const DepthPlanes& planes);

// ---- AdaIN ----

/// (f - mu) / sigma per (n, c) with instance_stats(f, eps).
Tensor instance_norm(const Tensor& f, double eps);

/// y_s * instance_norm(f) + y_b. The modulation vectors are either {C}
/// (shared by the batch) or {N, C}.
Tensor adain(const Tensor& f, const Tensor& y_s, const Tensor& y_b, double eps);

struct WAdaInParams {
  // y_s = scale_w * pool(z) + scale_b, likewise y_b; stored as 1x1 convs.
  Tensor scale_w;  ///< C x Cz x 1 x 1
  Tensor scale_b;  ///< C
  Tensor bias_w;   ///< C x Cz x 1 x 1
  Tensor bias_b;   ///< C
  // Attention logits: one 1x1 projection of z (A) and one of f_r (B).
  Tensor attn_z_w;  ///< 1 x Cz x 1 x 1
  Tensor attn_z_b;  ///< 1
  Tensor attn_f_w;  ///< 1 x C x 1 x 1
  Tensor attn_f_b;  ///< 1
  double eps = 1e-5;

  /// Fan-in scaled random projections; y_s starts near 1 and y_b near 0.
  static WAdaInParams create(std::size_t latent_channels, std::size_t channels, Rng& rng,
                             bool requires_grad = true);

  std::size_t latent_channels() const { return scale_w.dim(1); }
  std::size_t channels() const { return scale_w.dim(0); }
  std::vector<Tensor*> tensors();
  /// Throws DimensionError on inconsistent shapes.
  void validate() const;
};

/// Spatial attention map rescaled by H*W, so a flat logit map gives 1.
Tensor attention_map(const Tensor& features, const Tensor& proj_w, const Tensor& proj_b);

/// A * y_s * norm(f_r) + B * y_b. z is resized to f_r's resolution by
/// nearest neighbour when the sizes differ.
Tensor w_adain(const Tensor& z, const Tensor& f_r, const WAdaInParams& params);

// ---- confidence fusion ----

/// Logits are clamped to this magnitude before the softmax.
inline constexpr double kConfidenceClamp = 30.0;

/// Two-way softmax blend of one pixel.
double confidence_fuse(double d_l, double d_f, double c_l, double c_f);

/// Differentiable per-pixel blend; all four tensors share one shape.
Tensor confidence_fuse(const Tensor& d_l, const Tensor& c_l, const Tensor& d_f, const Tensor& c_f);

struct ConfidencePair {
  DepthMap d_l;
  DepthMap d_f;
  std::vector<double> c_l;
  std::vector<double> c_f;
};

/// Map-level fusion. Where only one depth is valid it is taken as is;
/// where neither is, the result is invalid.
DepthMap confidence_fuse(const ConfidencePair& pair);

}  // namespace depthfuse
