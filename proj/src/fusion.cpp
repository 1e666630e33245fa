#include "depthfuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "depthfuse/error.hpp"

namespace depthfuse {

// ---- depth planes ----

void DepthPlanes::validate() const {
  if (depths.size() < 2) throw ValidationError("depth planes: need at least two planes");
  for (std::size_t i = 0; i < depths.size(); ++i) {
    if (!(std::isfinite(depths[i]) && depths[i] > 0.0)) {
      throw ValidationError("depth planes: plane " + std::to_string(i) + " is not a positive depth");
    }
    if (i > 0 && !(depths[i] > depths[i - 1])) {
      throw ValidationError("depth planes: depths must be strictly increasing");
    }
  }
}

double DepthPlanes::max_gap() const {
  double g = 0.0;
  for (std::size_t i = 1; i < depths.size(); ++i) g = std::max(g, depths[i] - depths[i - 1]);
  return g;
}

DepthPlanes DepthPlanes::uniform(double near, double far, std::size_t count) {
  if (count < 2 || !(near > 0.0) || !(far > near)) {
    throw ValidationError("depth planes: uniform spacing needs 0 < near < far and count >= 2");
  }
  DepthPlanes p;
  p.depths.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    p.depths[i] = near + (far - near) * static_cast<double>(i) / static_cast<double>(count - 1);
  }
  return p;
}

LabelMap depth_plane_project(const DepthMap& depth, const DepthPlanes& planes) {
  planes.validate();
  const auto& pd = planes.depths;
  LabelMap out(depth.width(), depth.height(), LabelSemantics::kSegmentId);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (!depth.valid(i)) continue;
    const double d = depth[i];
    // First plane >= d; the nearest is it or its predecessor.
    const auto it = std::lower_bound(pd.begin(), pd.end(), d);
    std::size_t best;
    if (it == pd.begin()) {
      best = 0;
    } else if (it == pd.end()) {
      best = pd.size() - 1;
    } else {
      const std::size_t hi = static_cast<std::size_t>(it - pd.begin());
      best = (d - pd[hi - 1] <= pd[hi] - d) ? hi - 1 : hi;
    }
    out.labels[i] = static_cast<std::uint32_t>(best + 1);
  }
  return out;
}

DepthMap plane_reconstruct(const LabelMap& labels, const DepthPlanes& planes) {
  planes.validate();
  DepthMap out(labels.width, labels.height, DepthRole::kPredicted);
  for (std::size_t i = 0; i < labels.pixels(); ++i) {
    const std::uint32_t l = labels[i];
    if (l == 0) continue;
    if (l > planes.depths.size()) {
      throw RangeError("plane_reconstruct: label " + std::to_string(l) + " exceeds plane count " +
                       std::to_string(planes.depths.size()));
    }
    out.set(i, planes.depths[l - 1]);
  }
  return out;
}

// ---- AdaIN ----

Tensor instance_norm(const Tensor& f, double eps) {
  if (f.rank() != 4) throw DimensionError("instance_norm: expected N x C x H x W, got " + shape_str(f.shape()));
  auto [mu, sigma] = instance_stats(f, eps);
  const std::size_t h = f.dim(2), w = f.dim(3);
  return div(sub(f, expand_spatial(mu, h, w)), expand_spatial(sigma, h, w));
}

Tensor adain(const Tensor& f, const Tensor& y_s, const Tensor& y_b, double eps) {
  const Tensor norm = instance_norm(f, eps);
  const std::size_t n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  auto modulate = [&](const Tensor& x, const Tensor& y, const char* what, auto op) {
    if (y.rank() == 1 && y.dim(0) == c) return op(x, y);
    if (y.rank() == 2 && y.dim(0) == n && y.dim(1) == c) return op(x, expand_spatial(y, h, w));
    throw DimensionError(std::string("adain: ") + what + " has shape " + shape_str(y.shape()) + ", expected [" +
                         std::to_string(c) + "] or [" + std::to_string(n) + "x" + std::to_string(c) + "]");
  };
  const Tensor scaled = modulate(norm, y_s, "y_s", [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  return modulate(scaled, y_b, "y_b", [](const Tensor& a, const Tensor& b) { return add(a, b); });
}

WAdaInParams WAdaInParams::create(std::size_t latent_channels, std::size_t channels, Rng& rng,
                                  bool requires_grad) {
  auto random = [&](Shape shape, double bound) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
  };
  const double bz = std::sqrt(3.0 / static_cast<double>(latent_channels));
  const double bf = std::sqrt(3.0 / static_cast<double>(channels));
  WAdaInParams p;
  // Small modulation weights keep y_s ~ 1 and y_b ~ 0 at the start.
  p.scale_w = random({channels, latent_channels, 1, 1}, 0.1 * bz);
  p.scale_b = Tensor::full({channels}, 1.0, requires_grad);
  p.bias_w = random({channels, latent_channels, 1, 1}, 0.1 * bz);
  p.bias_b = Tensor::zeros({channels}, requires_grad);
  p.attn_z_w = random({1, latent_channels, 1, 1}, bz);
  p.attn_z_b = Tensor::zeros({1}, requires_grad);
  p.attn_f_w = random({1, channels, 1, 1}, bf);
  p.attn_f_b = Tensor::zeros({1}, requires_grad);
  return p;
}

std::vector<Tensor*> WAdaInParams::tensors() {
  return {&scale_w, &scale_b, &bias_w, &bias_b, &attn_z_w, &attn_z_b, &attn_f_w, &attn_f_b};
}

void WAdaInParams::validate() const {
  const std::size_t c = scale_w.rank() == 4 ? scale_w.dim(0) : 0;
  const std::size_t cz = scale_w.rank() == 4 ? scale_w.dim(1) : 0;
  auto expect = [](const Tensor& t, const Shape& s, const char* name) {
    if (t.shape() != s) {
      throw DimensionError(std::string("w_adain params: ") + name + " has shape " + shape_str(t.shape()) +
                           ", expected " + shape_str(s));
    }
  };
  expect(scale_w, {c, cz, 1, 1}, "scale_w");
  expect(scale_b, {c}, "scale_b");
  expect(bias_w, {c, cz, 1, 1}, "bias_w");
  expect(bias_b, {c}, "bias_b");
  expect(attn_z_w, {1, cz, 1, 1}, "attn_z_w");
  expect(attn_z_b, {1}, "attn_z_b");
  expect(attn_f_w, {1, c, 1, 1}, "attn_f_w");
  expect(attn_f_b, {1}, "attn_f_b");
}

Tensor attention_map(const Tensor& features, const Tensor& proj_w, const Tensor& proj_b) {
  const double positions = static_cast<double>(features.dim(2) * features.dim(3));
  return scale(spatial_softmax(conv2d(features, proj_w, proj_b)), positions);
}

Tensor w_adain(const Tensor& z, const Tensor& f_r, const WAdaInParams& params) {
  params.validate();
  if (z.rank() != 4 || f_r.rank() != 4) {
    throw DimensionError("w_adain: expected rank-4 z and f_r, got " + shape_str(z.shape()) + " and " +
                         shape_str(f_r.shape()));
  }
  if (z.dim(1) != params.latent_channels() || f_r.dim(1) != params.channels()) {
    throw DimensionError("w_adain: channel mismatch, z " + shape_str(z.shape()) + ", f_r " +
                         shape_str(f_r.shape()) + ", params expect " + std::to_string(params.latent_channels()) +
                         " and " + std::to_string(params.channels()));
  }
  if (z.dim(0) != f_r.dim(0)) throw DimensionError("w_adain: batch size mismatch");
  const std::size_t n = f_r.dim(0), c = f_r.dim(1), h = f_r.dim(2), w = f_r.dim(3);
  const std::size_t cz = z.dim(1);

  const Tensor pooled = reshape(mean(z, {2, 3}), {n, cz, 1, 1});
  const Tensor y_s = reshape(conv2d(pooled, params.scale_w, params.scale_b), {n, c});
  const Tensor y_b = reshape(conv2d(pooled, params.bias_w, params.bias_b), {n, c});

  const Tensor z_here = (z.dim(2) == h && z.dim(3) == w) ? z : resize_nearest(z, h, w);
  const Tensor a = expand_channels(attention_map(z_here, params.attn_z_w, params.attn_z_b), c);
  const Tensor b = expand_channels(attention_map(f_r, params.attn_f_w, params.attn_f_b), c);

  const Tensor scaled = mul(mul(a, expand_spatial(y_s, h, w)), instance_norm(f_r, params.eps));
  return add(scaled, mul(b, expand_spatial(y_b, h, w)));
}

// ---- confidence fusion ----

namespace {

struct Blend {
  double value;
  double p_l;  ///< softmax weight of d_l
  bool l_live;
  bool f_live;
};

Blend blend(double d_l, double d_f, double c_l, double c_f) {
  const double cl = std::clamp(c_l, -kConfidenceClamp, kConfidenceClamp);
  const double cf = std::clamp(c_f, -kConfidenceClamp, kConfidenceClamp);
  // Two-way softmax written as a logistic of the logit gap.
  const double p_l = 1.0 / (1.0 + std::exp(cf - cl));
  double v = p_l * d_l + (1.0 - p_l) * d_f;
  // Rounding can leave v an ulp outside the hull; the blend is convex.
  v = std::clamp(v, std::min(d_l, d_f), std::max(d_l, d_f));
  return {v, p_l, std::abs(c_l) <= kConfidenceClamp, std::abs(c_f) <= kConfidenceClamp};
}

}  // namespace

double confidence_fuse(double d_l, double d_f, double c_l, double c_f) { return blend(d_l, d_f, c_l, c_f).value; }

Tensor confidence_fuse(const Tensor& d_l, const Tensor& c_l, const Tensor& d_f, const Tensor& c_f) {
  const Shape& s = d_l.shape();
  if (c_l.shape() != s || d_f.shape() != s || c_f.shape() != s) {
    throw DimensionError("confidence_fuse: shapes differ: " + shape_str(s) + ", " + shape_str(c_l.shape()) + ", " +
                         shape_str(d_f.shape()) + ", " + shape_str(c_f.shape()));
  }
  const std::size_t n = d_l.numel();
  std::vector<double> out(n);
  auto p_l = std::make_shared<std::vector<double>>(n);
  auto live = std::make_shared<std::vector<std::uint8_t>>(n);
  const auto dl = d_l.data(), cl = c_l.data(), df = d_f.data(), cf = c_f.data();
  for (std::size_t i = 0; i < n; ++i) {
    const Blend b = blend(dl[i], df[i], cl[i], cf[i]);
    out[i] = b.value;
    (*p_l)[i] = b.p_l;
    (*live)[i] = static_cast<std::uint8_t>(b.l_live | (b.f_live << 1));
  }
  return Tensor::make_op(
      "confidence_fuse", s, std::move(out), {d_l, c_l, d_f, c_f},
      [p_l, live, d_l, d_f](std::span<const double> go, std::span<const std::span<double>> grads) {
        const auto dl = d_l.data(), df = d_f.data();
        for (std::size_t i = 0; i < go.size(); ++i) {
          const double pl = (*p_l)[i], pf = 1.0 - pl, g = go[i];
          if (!grads[0].empty()) grads[0][i] += g * pl;
          if (!grads[2].empty()) grads[2][i] += g * pf;
          // d/dc_l = p_l p_f (d_l - d_f) = -d/dc_f, zero where clamped.
          const double dc = g * pl * pf * (dl[i] - df[i]);
          if (!grads[1].empty() && ((*live)[i] & 1)) grads[1][i] += dc;
          if (!grads[3].empty() && ((*live)[i] & 2)) grads[3][i] -= dc;
        }
      });
}

DepthMap confidence_fuse(const ConfidencePair& pair) {
  const std::size_t w = pair.d_l.width(), h = pair.d_l.height(), n = w * h;
  if (pair.d_f.width() != w || pair.d_f.height() != h || pair.c_l.size() != n || pair.c_f.size() != n) {
    throw DimensionError("confidence_fuse: depth maps and confidence maps must share dimensions");
  }
  DepthMap out(w, h, DepthRole::kPredicted);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(pair.c_l[i]) || !std::isfinite(pair.c_f[i])) {
      throw NumericalError("confidence_fuse: non-finite confidence at pixel " + std::to_string(i));
    }
    const bool vl = pair.d_l.valid(i), vf = pair.d_f.valid(i);
    if (vl && vf) {
      out.set(i, confidence_fuse(pair.d_l[i], pair.d_f[i], pair.c_l[i], pair.c_f[i]));
    } else if (vl) {
      out.set(i, pair.d_l[i]);
    } else if (vf) {
      out.set(i, pair.d_f[i]);
    }
  }
  return out;
}

}  // namespace depthfuse
