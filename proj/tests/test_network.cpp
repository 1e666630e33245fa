#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "depthfuse/error.hpp"
#include "depthfuse/network.hpp"
#include "test_util.hpp"

using namespace depthfuse;
using depthfuse::testing::random_tensor;
using depthfuse::testing::TempDir;
using depthfuse::testing::weighted_sum;

namespace {

NetConfig tiny_config(std::uint64_t seed = 1) {
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

Tensor random_depth(Rng& rng, std::size_t n, std::size_t h, std::size_t w) {
  return random_tensor(rng, {n, 1, h, w}, 0.5, 8.0);
}

Tensor random_rgb(Rng& rng, std::size_t n, std::size_t h, std::size_t w) {
  return random_tensor(rng, {n, 3, h, w}, 0.0, 1.0);
}

void check_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, const std::string& what) {
  const GradCheckResult r = finite_diff_check(f, x);
  INFO(what << ": max rel err " << r.max_rel_err << ", checked " << r.checked << ", skipped " << r.skipped);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_err < 1e-3);
}

}  // namespace

TEST_CASE("net config validation") {
  NetConfig c;
  CHECK_NOTHROW(c.validate());
  c.width = 63;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = NetConfig{};
  c.base_channels = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  const NetConfig back = NetConfig::from_json(tiny_config(9).to_json());
  CHECK(back.to_json() == tiny_config(9).to_json());
  CHECK_THROWS_AS(NetConfig::from_json(R"({"depth":1})"), ValidationError);
}

TEST_CASE("forward shapes and ranges at the default size") {
  const NetworkBundle net = NetworkBundle::create(NetConfig{});
  Rng rng(3);
  const Tensor rgb = random_rgb(rng, 2, 48, 64);
  const Tensor d = random_depth(rng, 2, 48, 64);

  const GuidanceMap g = guidance_forward(net, rgb);
  CHECK(g.map.shape() == Shape{2, 2, 48, 64});
  for (std::size_t i = 0; i < 48 * 64; ++i) {
    CHECK(g.map.at(i) >= 0.0);
    CHECK(g.map.at(i) <= 1.0);
  }

  const ConstraintOutputs m = constraint_forward(net, d, g);
  CHECK(m.z.shape() == Shape{2, 64, 6, 8});
  CHECK(m.d_l.shape() == Shape{2, 1, 48, 64});
  CHECK(m.c_l.shape() == Shape{2, 1, 48, 64});
  CHECK(std::all_of(m.d_l.data().begin(), m.d_l.data().end(), [](double v) { return v >= 0.0; }));

  const GeneratorOutputs gen = generator_forward(net, m.z, rgb);
  CHECK(gen.d_f.shape() == Shape{2, 1, 48, 64});
  CHECK(gen.c_f.shape() == Shape{2, 1, 48, 64});

  CHECK(discriminator_forward(net, d, rgb).shape() == Shape{2, 1, 6, 8});

  const ForwardOutputs o = full_forward(net, d, rgb);
  for (std::size_t i = 0; i < o.d_pred.numel(); ++i) {
    CHECK(o.d_pred.at(i) >= std::min(o.d_l.at(i), o.d_f.at(i)));
    CHECK(o.d_pred.at(i) <= std::max(o.d_l.at(i), o.d_f.at(i)));
    CHECK(std::isfinite(o.d_pred.at(i)));
  }

  CHECK_THROWS_AS(guidance_forward(net, random_rgb(rng, 1, 40, 64)), DimensionError);
  CHECK_THROWS_AS(generator_forward(net, random_tensor(rng, {2, 64, 3, 4}), rgb), DimensionError);
}

TEST_CASE("forward passes are deterministic") {
  Rng rng(4);
  const Tensor rgb = random_rgb(rng, 1, 16, 16);
  const Tensor d = random_depth(rng, 1, 16, 16);
  NetConfig c = tiny_config(5);
  c.height = c.width = 16;
  const ForwardOutputs a = full_forward(NetworkBundle::create(c), d, rgb);
  const ForwardOutputs b = full_forward(NetworkBundle::create(c), d, rgb);
  CHECK(std::equal(a.d_pred.data().begin(), a.d_pred.data().end(), b.d_pred.data().begin()));
  CHECK(std::equal(a.c_f.data().begin(), a.c_f.data().end(), b.c_f.data().begin()));
  c.seed = 6;
  const ForwardOutputs other = full_forward(NetworkBundle::create(c), d, rgb);
  CHECK_FALSE(std::equal(a.d_pred.data().begin(), a.d_pred.data().end(), other.d_pred.data().begin()));
}

TEST_CASE("generator output depends on the latent") {
  const NetworkBundle net = NetworkBundle::create(tiny_config());
  Rng rng(8);
  const Tensor rgb = random_rgb(rng, 1, 8, 8);
  const Tensor z = random_tensor(rng, {1, 4, 1, 1});
  const Tensor z2 = add(z, random_tensor(rng, {1, 4, 1, 1}, -0.5, 0.5));
  const Tensor a = generator_forward(net, z, rgb).d_f;
  const Tensor b = generator_forward(net, z2, rgb).d_f;
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
  CHECK(diff > 0.0);
}

TEST_CASE("network forwards pass gradcheck on 8x8 inputs") {
  const NetworkBundle net = NetworkBundle::create(tiny_config());
  Rng rng(10);
  const Tensor rgb = random_rgb(rng, 1, 8, 8);
  const Tensor d = random_depth(rng, 1, 8, 8);
  const GuidanceMap g = guidance_forward(net, rgb);
  const Tensor z = random_tensor(rng, {1, 4, 1, 1});

  check_grad([&](const Tensor& x) { return weighted_sum(guidance_forward(net, x).map); }, rgb, "guidance/rgb");
  check_grad(
      [&](const Tensor& x) {
        const auto o = constraint_forward(net, x, g);
        return add(weighted_sum(o.d_l, 1), weighted_sum(o.c_l, 2));
      },
      d, "constraint/depth");
  check_grad(
      [&](const Tensor& x) {
        const auto o = generator_forward(net, x, rgb);
        return add(weighted_sum(o.d_f, 1), weighted_sum(o.c_f, 2));
      },
      z, "generator/z");
  check_grad([&](const Tensor& x) { return weighted_sum(generator_forward(net, z, x).d_f); }, rgb,
             "generator/rgb");
  check_grad([&](const Tensor& x) { return weighted_sum(discriminator_forward(net, x, rgb)); }, d, "critic/depth");
  check_grad([&](const Tensor& x) { return weighted_sum(full_forward(net, d, x).d_pred); }, rgb, "full/rgb");
  check_grad([&](const Tensor& x) { return weighted_sum(full_forward(net, x, rgb).d_pred); }, d, "full/depth");
}

TEST_CASE("parameter gradients match finite differences") {
  const NetworkBundle net = NetworkBundle::create(tiny_config(2));
  Rng rng(11);
  const Tensor rgb = random_rgb(rng, 1, 8, 8);
  const Tensor d = random_depth(rng, 1, 8, 8);
  for (const auto& p : net.parameters()) {
    const bool critic = p.name.rfind("critic", 0) == 0;
    auto f = [&](const Tensor& x) {
      NetworkBundle probe = net;
      probe.parameter(p.name) = x;
      return weighted_sum(critic ? discriminator_forward(probe, d, rgb) : full_forward(probe, d, rgb).d_pred);
    };
    check_grad(f, p.tensor.detach(), p.name);
  }
}

TEST_CASE("every parameter receives a gradient") {
  const NetworkBundle net = NetworkBundle::create(tiny_config(3));
  Rng rng(12);
  const Tensor rgb = random_rgb(rng, 2, 8, 8);
  const Tensor d = random_depth(rng, 2, 8, 8);
  std::vector<DepthMap> gt;
  for (std::size_t n = 0; n < 2; ++n) gt.push_back(to_depth_map(d, n, DepthRole::kGroundTruth));

  const ForwardOutputs o = full_forward(net, d, rgb);
  const Tensor fake = discriminator_forward(net, o.d_f, rgb);
  const Tensor real = discriminator_forward(net, d, rgb);
  const LossTerms t = overall_loss(o.d_l, o.d_f, o.d_pred, gt, fake, real, net.weights);
  backward(t.generator_objective);
  for (const auto& p : net.generator_side_parameters()) {
    INFO(p.name);
    CHECK(p.tensor.has_grad());
  }
  for (const auto& p : net.parameters()) {
    Tensor t = p.tensor;
    t.clear_grad();
  }
  const Tensor fake2 = discriminator_forward(net, o.d_f.detach(), rgb);
  backward(wgan_d_loss(fake2, real));
  for (const auto& p : net.critic_parameters()) {
    INFO(p.name);
    CHECK(p.tensor.has_grad());
  }
}

TEST_CASE("checkpoint round trip is exact") {
  TempDir dir("ckpt");
  NetConfig c = tiny_config(21);
  Checkpoint ck;
  ck.bundle = NetworkBundle::create(c, LossWeights{0.25, 2.0, 7.5});
  ck.step = 17;
  ck.extra.push_back({"opt/m0", Tensor::from({3}, {1.0 / 3.0, -2.5e-300, 4.0})});
  ck.extra_json = R"({"note":"x"})";
  // Values that do not survive a decimal round trip.
  Tensor w = ck.bundle.critic.layers[0].weight;
  w.mutable_data()[0] = 0.1 + 0.2;
  save_checkpoint(dir / "a.ckpt", ck);

  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.step == 17);
  CHECK(back.bundle.config.to_json() == c.to_json());
  CHECK(back.bundle.weights.lambda_pred == 7.5);
  CHECK(back.extra_json == ck.extra_json);
  REQUIRE(back.extra.size() == 1);
  CHECK(back.extra[0].name == "opt/m0");
  CHECK(std::equal(back.extra[0].tensor.data().begin(), back.extra[0].tensor.data().end(),
                   ck.extra[0].tensor.data().begin()));
  const auto pa = ck.bundle.parameters(), pb = back.bundle.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
  }

  save_checkpoint(dir / "b.ckpt", back);
  std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::ofstream(dir / "trunc.ckpt", std::ios::binary) << sa.substr(0, sa.size() - 5);
  CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), FormatError);
}

TEST_CASE("fused_forward matches the generator branch of full_forward") {
  const NetworkBundle net = NetworkBundle::create(tiny_config(13));
  Rng rng(14);
  const Tensor rgb = random_rgb(rng, 2, 8, 8);
  const Tensor d = random_depth(rng, 2, 8, 8);
  const ForwardOutputs full = full_forward(net, d, rgb);
  const GeneratorOutputs fused = fused_forward(net, d, rgb);
  CHECK(std::equal(full.d_f.data().begin(), full.d_f.data().end(), fused.d_f.data().begin()));
  CHECK(std::equal(full.c_f.data().begin(), full.c_f.data().end(), fused.c_f.data().begin()));
  const Tensor z = constraint_latent(net, d, guidance_forward(net, rgb));
  CHECK(std::equal(full.z.data().begin(), full.z.data().end(), z.data().begin()));
}
