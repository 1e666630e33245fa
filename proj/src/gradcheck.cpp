#include "depthfuse/gradcheck.hpp"

#include <json.hpp>

#include <functional>

#include "depthfuse/fusion.hpp"
#include "depthfuse/losses.hpp"
#include "depthfuse/network.hpp"
#include "depthfuse/rng.hpp"

namespace depthfuse {

namespace {

Tensor uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Fixed random weights so the scalar is not symmetric in the outputs.
Tensor project(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, uniform(rng, y.shape(), -1.0, 1.0)));
}

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(seed) {}

  void check(const std::string& op, const Tensor& x, const std::function<Tensor(const Tensor&)>& f) {
    const GradCheckResult r = finite_diff_check(f, x);
    entries_.push_back({op, r.max_rel_err, r.checked, r.skipped,
                        r.checked > 0 && r.max_rel_err < kGradCheckTolerance});
  }

  // Scalar probe of a tensor-valued op.
  void check_map(const std::string& op, const Tensor& x, const std::function<Tensor(const Tensor&)>& f) {
    const std::uint64_t s = rng_.next_u64();
    check(op, x, [f, s](const Tensor& t) { return project(f(t), s); });
  }

  Tensor rand(Shape shape, double lo = -2.0, double hi = 2.0) { return uniform(rng_, std::move(shape), lo, hi); }
  Rng& rng() { return rng_; }
  std::vector<GradCheckEntry> take() { return std::move(entries_); }

 private:
  Rng rng_;
  std::vector<GradCheckEntry> entries_;
};

NetConfig tiny_net(std::uint64_t seed) {
  NetConfig c;
  c.base_channels = 2;
  c.latent_channels = 4;
  c.guidance_channels = 2;
  c.critic_channels = 2;
  c.height = 8;
  c.width = 8;
  c.seed = seed;
  return c;
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
  Suite s(seed);
  const Tensor x = s.rand({2, 3, 5, 6});
  const Tensor y = s.rand({2, 3, 5, 6});
  const Tensor pos = s.rand({2, 3, 5, 6}, 0.5, 3.0);
  const Tensor vec = s.rand({3});

  // convolution and resampling
  const Tensor k3 = s.rand({4, 3, 3, 3}, -0.5, 0.5), b4 = s.rand({4});
  s.check_map("conv2d/input", x, [&](const Tensor& t) { return conv2d(t, k3, b4, 1, 1); });
  s.check_map("conv2d/kernel", k3, [&](const Tensor& t) { return conv2d(x, t, b4, 2, 1); });
  s.check_map("conv2d/bias", b4, [&](const Tensor& t) { return conv2d(x, k3, t, 1, 0); });
  s.check_map("upsample_nearest2x", x, [](const Tensor& t) { return upsample_nearest2x(t); });
  s.check_map("resize_nearest", x, [](const Tensor& t) { return resize_nearest(t, 7, 4); });

  // elementwise
  s.check_map("add", x, [&](const Tensor& t) { return add(t, y); });
  s.check_map("add/broadcast", vec, [&](const Tensor& t) { return add(x, t); });
  s.check_map("sub", y, [&](const Tensor& t) { return sub(x, t); });
  s.check_map("mul", x, [&](const Tensor& t) { return mul(t, y); });
  s.check_map("mul/broadcast", vec, [&](const Tensor& t) { return mul(x, t); });
  s.check_map("div/numerator", x, [&](const Tensor& t) { return div(t, pos); });
  s.check_map("div/denominator", pos, [&](const Tensor& t) { return div(x, t); });
  s.check_map("scale", x, [](const Tensor& t) { return scale(t, -1.5); });
  s.check_map("add_scalar", x, [](const Tensor& t) { return add_scalar(t, 0.7); });
  s.check_map("neg", x, [](const Tensor& t) { return neg(t); });
  s.check_map("relu", x, [](const Tensor& t) { return relu(t); });
  s.check_map("leaky_relu", x, [](const Tensor& t) { return leaky_relu(t, 0.2); });
  s.check_map("exp", x, [](const Tensor& t) { return exp(t); });
  s.check_map("log", pos, [](const Tensor& t) { return log(t); });
  s.check_map("sqrt", pos, [](const Tensor& t) { return sqrt(t); });
  s.check_map("square", x, [](const Tensor& t) { return square(t); });
  s.check_map("abs", x, [](const Tensor& t) { return abs(t); });
  s.check_map("sigmoid", x, [](const Tensor& t) { return sigmoid(t); });
  s.check_map("softplus", x, [](const Tensor& t) { return softplus(t); });
  s.check_map("clamp", x, [](const Tensor& t) { return clamp(t, -1.0, 1.0); });

  // reductions and layout
  s.check("sum", x, [](const Tensor& t) { return sum(square(t)); });
  s.check("mean", x, [](const Tensor& t) { return mean(square(t)); });
  s.check_map("sum/axes", x, [](const Tensor& t) { return sum(t, {1, 3}); });
  s.check_map("mean/axes", x, [](const Tensor& t) { return mean(t, {0, 2}); });
  s.check_map("instance_stats/mean", x, [](const Tensor& t) { return instance_stats(t, 1e-5).first; });
  s.check_map("instance_stats/std", x, [](const Tensor& t) { return instance_stats(t, 1e-5).second; });
  s.check_map("reshape", x, [](const Tensor& t) { return reshape(t, {6, 30}); });
  s.check_map("concat_channels", x, [&](const Tensor& t) { return concat_channels({t, y, t}); });
  s.check_map("slice_channels", x, [](const Tensor& t) { return slice_channels(t, 1, 2); });
  const Tensor one = s.rand({2, 1, 5, 6});
  s.check_map("expand_channels", one, [](const Tensor& t) { return expand_channels(t, 3); });
  s.check_map("expand_spatial", s.rand({2, 3}), [](const Tensor& t) { return expand_spatial(t, 4, 5); });
  s.check_map("spatial_softmax", one, [](const Tensor& t) { return spatial_softmax(t); });

  // normalization and fusion
  const Tensor ys = s.rand({2, 3}, 0.5, 1.5), yb = s.rand({2, 3});
  s.check_map("instance_norm", x, [](const Tensor& t) { return instance_norm(t, 1e-5); });
  s.check_map("adain/features", x, [&](const Tensor& t) { return adain(t, ys, yb, 1e-5); });
  s.check_map("adain/scale", ys, [&](const Tensor& t) { return adain(x, t, yb, 1e-5); });
  s.check_map("adain/bias", yb, [&](const Tensor& t) { return adain(x, ys, t, 1e-5); });
  const Tensor z = s.rand({2, 4, 3, 3});
  const WAdaInParams wp = WAdaInParams::create(4, 3, s.rng(), false);
  s.check_map("w_adain/latent", z, [&](const Tensor& t) { return w_adain(t, x, wp); });
  s.check_map("w_adain/features", x, [&](const Tensor& t) { return w_adain(z, t, wp); });
  const char* const fields[] = {"scale_w", "scale_b", "bias_w", "bias_b", "attn_z_w", "attn_z_b", "attn_f_w", "attn_f_b"};
  WAdaInParams wp_copy = wp;
  const auto slots = wp_copy.tensors();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    s.check_map(std::string("w_adain/") + fields[i], slots[i]->detach(), [&, i](const Tensor& t) {
      WAdaInParams q = wp;
      *q.tensors()[i] = t;
      return w_adain(z, x, q);
    });
  }
  const Tensor dl = s.rand({2, 1, 5, 6}, 0.5, 8.0), df = s.rand({2, 1, 5, 6}, 0.5, 8.0);
  const Tensor cl = s.rand({2, 1, 5, 6}), cf = s.rand({2, 1, 5, 6});
  s.check_map("confidence_fuse/d_l", dl, [&](const Tensor& t) { return confidence_fuse(t, cl, df, cf); });
  s.check_map("confidence_fuse/c_l", cl, [&](const Tensor& t) { return confidence_fuse(dl, t, df, cf); });
  s.check_map("confidence_fuse/d_f", df, [&](const Tensor& t) { return confidence_fuse(dl, cl, t, cf); });
  s.check_map("confidence_fuse/c_f", cf, [&](const Tensor& t) { return confidence_fuse(dl, cl, df, t); });

  // losses
  std::vector<DepthMap> gt;
  for (std::size_t n = 0; n < 2; ++n) {
    std::vector<double> v(30);
    for (double& d : v) d = s.rng().bernoulli(0.2) ? 0.0 : s.rng().uniform(0.5, 8.0);
    gt.emplace_back(6, 5, std::move(v), DepthRole::kGroundTruth);
  }
  s.check("masked_l1", dl, [&](const Tensor& t) { return masked_l1(t, gt); });
  const Tensor sf = s.rand({2, 1, 2, 2}), sr = s.rand({2, 1, 2, 2});
  s.check("wgan_d_loss", sf, [&](const Tensor& t) { return wgan_d_loss(t, sr); });
  s.check("wgan_g_loss", df, [&](const Tensor& t) { return wgan_g_loss(sf, t, gt, 0.5); });

  // network forwards on 8x8 inputs
  const NetworkBundle net = NetworkBundle::create(tiny_net(s.rng().next_u64()));
  const Tensor rgb = s.rand({1, 3, 8, 8}, 0.0, 1.0);
  const Tensor depth = s.rand({1, 1, 8, 8}, 0.5, 8.0);
  const GuidanceMap g = guidance_forward(net, rgb);
  const Tensor lat = s.rand({1, 4, 1, 1});
  s.check_map("guidance_forward", rgb, [&](const Tensor& t) { return guidance_forward(net, t).map; });
  s.check_map("constraint_forward/d_l", depth, [&](const Tensor& t) { return constraint_forward(net, t, g).d_l; });
  s.check_map("constraint_forward/c_l", depth, [&](const Tensor& t) { return constraint_forward(net, t, g).c_l; });
  s.check_map("constraint_forward/z", depth, [&](const Tensor& t) { return constraint_forward(net, t, g).z; });
  s.check_map("generator_forward/latent", lat, [&](const Tensor& t) { return generator_forward(net, t, rgb).d_f; });
  s.check_map("generator_forward/rgb", rgb, [&](const Tensor& t) { return generator_forward(net, lat, t).c_f; });
  s.check_map("discriminator_forward", depth, [&](const Tensor& t) { return discriminator_forward(net, t, rgb); });
  s.check_map("full_forward/depth", depth, [&](const Tensor& t) { return full_forward(net, t, rgb).d_pred; });
  s.check_map("full_forward/rgb", rgb, [&](const Tensor& t) { return full_forward(net, depth, t).d_pred; });
  for (const auto& p : net.parameters()) {
    const bool critic = p.name.rfind("critic", 0) == 0;
    s.check_map("param/" + p.name, p.tensor.detach(), [&net, &p, &depth, &rgb, critic](const Tensor& t) {
      NetworkBundle probe = net;
      probe.parameter(p.name) = t;
      return critic ? discriminator_forward(probe, depth, rgb) : full_forward(probe, depth, rgb).d_pred;
    });
  }
  return s.take();
}

std::string gradcheck_json(const std::vector<GradCheckEntry>& entries) {
  nlohmann::json list = nlohmann::json::array();
  bool all = true;
  for (const auto& e : entries) {
    list.push_back({{"op", e.op},
                    {"max_rel_err", e.max_rel_err},
                    {"checked", e.checked},
                    {"skipped", e.skipped},
                    {"passed", e.passed}});
    all = all && e.passed;
  }
  return nlohmann::json{{"format_version", 1}, {"tolerance", kGradCheckTolerance}, {"entries", list}, {"passed", all}}
      .dump(2);
}

}  // namespace depthfuse
