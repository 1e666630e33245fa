#include "depthfuse/losses.hpp"

#include <json.hpp>

#include <cmath>
#include <memory>

#include "depthfuse/error.hpp"

namespace depthfuse {

void LossWeights::validate() const {
  for (double l : {lambda_g, lambda_l, lambda_pred}) {
    if (!(std::isfinite(l) && l >= 0.0)) throw ValidationError("loss weights must be finite and non-negative");
  }
}

Tensor masked_l1(const Tensor& pred, std::span<const DepthMap> gt) {
  std::size_t total = 0;
  for (const auto& g : gt) total += g.size();
  if (pred.numel() != total) {
    throw DimensionError("masked_l1: prediction " + shape_str(pred.shape()) + " holds " +
                         std::to_string(pred.numel()) + " values, ground truth " + std::to_string(total));
  }
  auto target = std::make_shared<std::vector<double>>();
  target->reserve(total);
  std::size_t valid = 0;
  for (const auto& g : gt) {
    target->insert(target->end(), g.values().begin(), g.values().end());
    valid += g.valid_count();
  }
  if (valid == 0) throw ValidationError("masked_l1: ground truth has no valid pixel");

  const auto p = pred.data();
  double s = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    if ((*target)[i] != 0.0) s += std::abs(p[i] - (*target)[i]);
  }
  const double inv = 1.0 / static_cast<double>(valid);
  return Tensor::make_op("masked_l1", {1}, {s * inv}, {pred},
                         [target, pred, inv](std::span<const double> go, std::span<const std::span<double>> grads) {
                           const auto p = pred.data();
                           for (std::size_t i = 0; i < p.size(); ++i) {
                             const double t = (*target)[i];
                             if (t == 0.0) continue;
                             const double d = p[i] - t;
                             grads[0][i] += go[0] * inv * static_cast<double>((d > 0.0) - (d < 0.0));
                           }
                         });
}

Tensor masked_l1(const Tensor& pred, const DepthMap& gt) { return masked_l1(pred, std::span<const DepthMap>(&gt, 1)); }

Tensor wgan_d_loss(const Tensor& scores_fake, const Tensor& scores_real) {
  return sub(mean(scores_fake), mean(scores_real));
}

Tensor wgan_g_loss(const Tensor& scores_fake, const Tensor& d_f, std::span<const DepthMap> gt, double lambda_g) {
  return sub(scale(masked_l1(d_f, gt), lambda_g), mean(scores_fake));
}

LossTerms overall_loss(const Tensor& d_l, const Tensor& d_f, const Tensor& d_pred, std::span<const DepthMap> gt,
                       const Tensor& scores_fake, const Tensor& scores_real, const LossWeights& weights) {
  weights.validate();
  LossTerms t;
  t.l_d = wgan_d_loss(scores_fake, scores_real);
  t.l1_local = masked_l1(d_l, gt);
  t.l1_fused = masked_l1(d_f, gt);
  t.l1_pred = masked_l1(d_pred, gt);
  t.l_g = sub(scale(t.l1_fused, weights.lambda_g), mean(scores_fake));
  t.generator_objective =
      add(add(t.l_g, scale(t.l1_local, weights.lambda_l)), scale(t.l1_pred, weights.lambda_pred));
  t.total = add(t.l_d, t.generator_objective);
  return t;
}

// ---- metrics ----

namespace {

struct Accumulator {
  double sq = 0.0, rel = 0.0;
  std::size_t d1 = 0, d2 = 0, d3 = 0, n = 0;

  void add(double p, double g) {
    const double e = p - g;
    sq += e * e;
    rel += std::abs(e) / g;
    const double ratio = p > 0.0 ? std::max(p / g, g / p) : INFINITY;
    d1 += ratio < 1.25;
    d2 += ratio < 1.25 * 1.25;
    d3 += ratio < 1.25 * 1.25 * 1.25;
    ++n;
  }
  void merge(const Accumulator& o) {
    sq += o.sq;
    rel += o.rel;
    d1 += o.d1;
    d2 += o.d2;
    d3 += o.d3;
    n += o.n;
  }
  ImageMetrics finish() const {
    const double dn = static_cast<double>(n);
    return {std::sqrt(sq / dn), rel / dn, 100.0 * d1 / dn, 100.0 * d2 / dn, 100.0 * d3 / dn, n};
  }
};

Accumulator accumulate(const DepthMap& pred, const DepthMap& gt) {
  if (pred.width() != gt.width() || pred.height() != gt.height()) {
    throw DimensionError("compute_metrics: prediction " + std::to_string(pred.width()) + "x" +
                         std::to_string(pred.height()) + " vs ground truth " + std::to_string(gt.width()) + "x" +
                         std::to_string(gt.height()));
  }
  Accumulator a;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt.valid(i)) a.add(pred[i], gt[i]);
  }
  return a;
}

nlohmann::json metrics_json(const ImageMetrics& m) {
  return {{"rmse", m.rmse}, {"rel", m.rel},       {"delta1", m.delta1},
          {"delta2", m.delta2}, {"delta3", m.delta3}, {"pixels", m.pixels}};
}

}  // namespace

ImageMetrics compute_metrics(const DepthMap& pred, const DepthMap& gt) {
  const Accumulator a = accumulate(pred, gt);
  if (a.n == 0) throw ValidationError("compute_metrics: ground truth has no valid pixel");
  return a.finish();
}

MetricsReport compute_metrics(std::span<const DepthMap> pred, std::span<const DepthMap> gt) {
  if (pred.size() != gt.size()) throw DimensionError("compute_metrics: prediction and ground truth counts differ");
  MetricsReport r;
  Accumulator all;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const Accumulator a = accumulate(pred[i], gt[i]);
    if (a.n == 0) {
      throw ValidationError("compute_metrics: ground truth " + std::to_string(i) + " has no valid pixel");
    }
    r.per_image.push_back(a.finish());
    all.merge(a);
  }
  if (all.n == 0) throw ValidationError("compute_metrics: no images");
  r.overall = all.finish();
  return r;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j = metrics_json(overall);
  j["format_version"] = 1;
  j["per_image"] = nlohmann::json::array();
  for (const auto& m : per_image) j["per_image"].push_back(metrics_json(m));
  return j.dump(2);
}

}  // namespace depthfuse
