#include <doctest.h>

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "depthfuse/depth_io.hpp"
#include "depthfuse/error.hpp"
#include "depthfuse/trainer.hpp"
#include "test_util.hpp"

using namespace depthfuse;
using depthfuse::testing::TempDir;

namespace {

TrainConfig small_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.steps = 3;
  c.batch_size = 2;
  c.n_critic = 2;
  c.seed = seed;
  c.scene_width = 16;
  c.scene_height = 16;
  c.dataset_size = 4;
  c.holdout_size = 2;
  c.eval_every = 2;
  c.net.base_channels = 2;
  c.net.latent_channels = 4;
  c.net.guidance_channels = 2;
  c.net.critic_channels = 2;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

bool same_values(const NetworkBundle& a, const NetworkBundle& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin())) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("train config validation and json") {
  TrainConfig c = small_config(7);
  CHECK_NOTHROW(c.validate());
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.network_config().to_json() == c.network_config().to_json());

  CHECK(TrainConfig::from_json("{}").to_json() == TrainConfig{}.to_json());
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"stepz":3})"), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"weights":{"lambda_x":1}})"), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json("[1"), FormatError);

  for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
           [](TrainConfig& t) { t.clip = 0.0; }, [](TrainConfig& t) { t.batch_size = 0; },
           [](TrainConfig& t) { t.n_critic = 0; }, [](TrainConfig& t) { t.lr_critic = -1.0; },
           [](TrainConfig& t) { t.scene_width = 20; }, [](TrainConfig& t) { t.dataset_size = 0; }}) {
    TrainConfig bad = small_config();
    mutate(bad);
    CHECK_THROWS_AS(bad.validate(), ValidationError);
  }
}

TEST_CASE("rmsprop step matches the update rule") {
  Tensor p = Tensor::from({2}, {1.0, -2.0}, true);
  RmsProp opt({{"p", p}}, 0.1, 0.9, 1e-8);
  backward(sum(mul(p, Tensor::from({2}, {3.0, -0.5}))));
  opt.step();
  CHECK_FALSE(p.has_grad());
  // v = 0.1 g^2, so the first step is lr * g / (sqrt(0.1) |g| + eps).
  CHECK(p.at(0) == doctest::Approx(1.0 - 0.1 * 3.0 / (std::sqrt(0.1 * 9.0) + 1e-8)).epsilon(1e-14));
  CHECK(p.at(1) == doctest::Approx(-2.0 + 0.1 * 0.5 / (std::sqrt(0.1 * 0.25) + 1e-8)).epsilon(1e-14));

  const auto state = opt.state("s.");
  REQUIRE(state.size() == 1);
  CHECK(state[0].name == "s.p");
  CHECK(state[0].tensor.at(0) == doctest::Approx(0.9));
  RmsProp other({{"p", p}}, 0.1, 0.9, 1e-8);
  CHECK_THROWS_AS(other.load_state(state, "t."), FormatError);
  other.load_state(state, "s.");
  CHECK(other.state("s.")[0].tensor.at(1) == state[0].tensor.at(1));
}

TEST_CASE("an optimizer step at a small rate lowers the loss on a frozen batch") {
  const TrainConfig c = small_config(3);
  const auto batch = holdout_set(c, MaskPolicy{});
  std::vector<RgbImage> rgb_v;
  std::vector<DepthMap> in_v, gt_v;
  for (const auto& s : batch) {
    rgb_v.push_back(s.rgb);
    in_v.push_back(s.input);
    gt_v.push_back(s.gt);
  }
  const Tensor rgb = rgb_tensor(rgb_v), d_in = depth_tensor(in_v), d_gt = depth_tensor(gt_v);
  NetworkBundle net = NetworkBundle::create(c.network_config());
  clip_critic(net, c.clip);

  auto gen_loss = [&] {
    const ForwardOutputs o = full_forward(net, d_in, rgb);
    const Tensor real = discriminator_forward(net, d_gt, rgb);
    return overall_loss(o.d_l, o.d_f, o.d_pred, gt_v, discriminator_forward(net, o.d_f, rgb), real, net.weights)
        .generator_objective;
  };
  auto critic_loss = [&] {
    NoGradGuard no_grad;
    const Tensor fake = full_forward(net, d_in, rgb).d_f;
    return wgan_d_loss(discriminator_forward(net, fake, rgb), discriminator_forward(net, d_gt, rgb));
  };

  RmsProp gen(net.generator_side_parameters(), c.lr_generator / 100, c.rms_decay, c.rms_eps);
  const Tensor before = gen_loss();
  backward(before);
  gen.step();
  CHECK(gen_loss().item() < before.item());

  RmsProp critic(net.critic_parameters(), c.lr_critic / 100, c.rms_decay, c.rms_eps);
  for (auto& p : net.parameters()) p.tensor.clear_grad();
  NetworkBundle probe = net;
  const double d_before = critic_loss().item();
  {
    const Tensor fake = [&] {
      NoGradGuard no_grad;
      return full_forward(net, d_in, rgb).d_f;
    }();
    backward(wgan_d_loss(discriminator_forward(net, fake, rgb), discriminator_forward(net, d_gt, rgb)));
  }
  critic.step();
  CHECK(critic_loss().item() < d_before);
}

TEST_CASE("critic weights stay within the clip bound after every critic step") {
  TrainConfig c = small_config(2);
  std::size_t calls = 0;
  TrainHooks hooks;
  hooks.on_critic_step = [&](const NetworkBundle& net, std::uint64_t, std::size_t) {
    ++calls;
    for (const auto& p : net.critic_parameters()) {
      for (double w : p.tensor.data()) REQUIRE(std::abs(w) <= c.clip);
    }
  };
  const TrainResult r = train(c, MaskPolicy{}, hooks);
  CHECK(calls == c.steps * c.n_critic);
  CHECK(r.max_critic_weight <= c.clip);
  CHECK(r.max_critic_weight > 0.0);
  CHECK(r.samples_drawn == c.steps * (c.n_critic + 1) * c.batch_size);
  CHECK(r.log.size() == c.steps);
  // Evaluations at step 0, 2 and the final step 3.
  REQUIRE(r.evals.size() == 3);
  CHECK(r.evals[1].step == 2);
  for (const auto& e : r.evals) CHECK(std::isfinite(e.metrics.rmse));
}

TEST_CASE("training is reproducible and writes identical artifacts") {
  TempDir a("train_a"), b("train_b");
  TrainConfig c = small_config(5);
  c.out_dir = a.path();
  const TrainResult ra = train(c, MaskPolicy{});
  c.out_dir = b.path();
  const TrainResult rb = train(c, MaskPolicy{});
  CHECK(same_values(ra.bundle, rb.bundle));
  CHECK(slurp(a / kTrainLogName) == slurp(b / kTrainLogName));
  CHECK(slurp(a / kEvalLogName) == slurp(b / kEvalLogName));
  CHECK(slurp(a / kCheckpointName) == slurp(b / kCheckpointName));

  std::ifstream log(a / kTrainLogName);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == lines);
    CHECK(j["wall_ms"].is_null());
    for (const char* k : {"L_D", "L_G", "l1_local", "l1_pred"}) CHECK(j[k].is_number());
    ++lines;
  }
  CHECK(lines == c.steps);

  c.seed = 6;
  c.out_dir.clear();
  CHECK_FALSE(same_values(train(c, MaskPolicy{}).bundle, ra.bundle));
}

TEST_CASE("resuming reproduces the next step exactly") {
  TempDir dir("resume");
  TrainConfig c = small_config(9);
  c.steps = 4;
  const TrainResult full = train(c, MaskPolicy{});

  c.steps = 3;
  c.out_dir = dir.path();
  train(c, MaskPolicy{});
  const Checkpoint ck = load_checkpoint(dir / kCheckpointName);
  CHECK(ck.step == 3);

  c.steps = 4;
  c.out_dir.clear();
  const TrainResult resumed = train(c, MaskPolicy{}, {}, ck);
  REQUIRE(resumed.log.size() == 1);
  CHECK(resumed.log[0].to_json() == full.log[3].to_json());
  CHECK(resumed.steps_done == 4);
  CHECK(same_values(resumed.bundle, full.bundle));
  // The loaded checkpoint is not modified by training.
  CHECK(same_values(ck.bundle, load_checkpoint(dir / kCheckpointName).bundle));

  // In-memory checkpoints resume the same way.
  c.steps = 3;
  const TrainResult part = train(c, MaskPolicy{});
  c.steps = 4;
  CHECK(train(c, MaskPolicy{}, {}, training_checkpoint(part, c)).log[0].to_json() == full.log[3].to_json());

  TrainConfig other = c;
  other.net.base_channels = 4;
  CHECK_THROWS_AS(train(other, MaskPolicy{}, {}, ck), ValidationError);
}

TEST_CASE("zero steps writes the initial weights and an empty log") {
  TempDir dir("zero");
  TrainConfig c = small_config(4);
  c.steps = 0;
  c.out_dir = dir.path();
  const TrainResult r = train(c, MaskPolicy{});
  CHECK(r.log.empty());
  CHECK(slurp(dir / kTrainLogName).empty());
  const Checkpoint ck = load_checkpoint(dir / kCheckpointName);
  CHECK(ck.step == 0);
  CHECK(same_values(ck.bundle, NetworkBundle::create(c.network_config())));
  CHECK(nlohmann::json::parse(ck.extra_json)["train_config"]["seed"] == 4);
}

TEST_CASE("a non-finite value aborts with the step and the last good state") {
  TempDir dir("nan");
  TrainConfig c = small_config(8);
  c.out_dir = dir.path();
  TrainHooks hooks;
  hooks.on_critic_step = [](const NetworkBundle& net, std::uint64_t step, std::size_t k) {
    if (step == 1 && k == 0) {
      Tensor w = net.critic.layers[0].weight;
      w.mutable_data()[0] = std::nan("");
    }
  };
  try {
    train(c, MaskPolicy{}, hooks);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.step() == 1);
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    REQUIRE(std::filesystem::exists(e.checkpoint()));
    const Checkpoint ck = load_checkpoint(e.checkpoint());
    CHECK(ck.step == 1);
  }
}

TEST_CASE("evaluation reports and dumps") {
  TempDir dir("eval");
  const TrainConfig c = small_config(11);
  const auto samples = holdout_set(c, MaskPolicy{});
  const NetworkBundle net = NetworkBundle::create(c.network_config());

  EvalOptions opt;
  opt.dump_dir = dir.path();
  opt.batch_size = 1;
  const MetricsReport r = evaluate(net, samples, opt);
  CHECK(r.per_image.size() == samples.size());
  CHECK(std::isfinite(r.overall.rmse));
  CHECK(std::isfinite(r.overall.rel));
  for (const char* suffix : {"_pred.png", "_local.png", "_fused.png", "_conf_local.png", "_conf_fused.png"}) {
    CHECK(std::filesystem::exists(dir / ("1" + std::string(suffix))));
  }
  CHECK(load_depth(dir / "0_pred.png").width() == 16);

  // Batching does not change the numbers.
  const MetricsReport r4 = evaluate(net, samples);
  CHECK(r4.overall.rmse == doctest::Approx(r.overall.rmse).epsilon(1e-12));

  std::vector<TrainSample> on_gt(samples);
  for (auto& s : on_gt) s.input = s.gt;
  const MetricsReport pass = evaluate_passthrough(on_gt);
  CHECK(pass.overall.rmse == 0.0);
  CHECK(pass.overall.delta1 == 100.0);
  CHECK(pass.per_image.size() == on_gt.size());
  CHECK_THROWS_AS(evaluate_passthrough({}), ValidationError);
}

TEST_CASE("confidence normalization") {
  const std::vector<double> v{-2.0, 0.0, 2.0};
  CHECK(normalize_confidence(v) == std::vector<std::uint8_t>{0, 128, 255});
  CHECK(normalize_confidence(std::vector<double>{3.0, 3.0}) == std::vector<std::uint8_t>{0, 0});
}

TEST_CASE("held-out and training scenes are distinct and seeded") {
  const TrainConfig c = small_config(12);
  const auto a = training_scene(c, 0), b = training_scene(c, 0, true);
  CHECK(a.rgb.data != b.rgb.data);
  CHECK(training_scene(c, 1).depth.values() == training_scene(c, 1).depth.values());
  const auto h = holdout_set(c, MaskPolicy{});
  for (const auto& s : h) {
    CHECK(s.input.valid_count() <= s.gt.valid_count());
    for (std::size_t i = 0; i < s.gt.size(); ++i) {
      if (s.input.valid(i)) CHECK(s.input[i] == s.gt[i]);
    }
  }
}
