#include "depthfuse/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "depthfuse/depth_io.hpp"
#include "depthfuse/error.hpp"
#include "depthfuse/rng.hpp"

namespace depthfuse {

using json = nlohmann::json;

namespace {

// Seed streams hanging off the run seed.
constexpr std::uint64_t kTrainScenes = 1;
constexpr std::uint64_t kHoldoutScenes = 2;
constexpr std::uint64_t kHoldoutMasks = 3;
constexpr std::uint64_t kStepDraws = 4;

const char* const kCriticState = "opt.critic.";
const char* const kGeneratorState = "opt.generator.";

json weights_json(const LossWeights& w) {
  return {{"lambda_g", w.lambda_g}, {"lambda_l", w.lambda_l}, {"lambda_pred", w.lambda_pred}};
}

}  // namespace

// ---- config ----

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("train config: ") + what);
  };
  require(batch_size > 0, "batch_size must be positive");
  require(n_critic > 0, "n_critic must be positive");
  require(dataset_size > 0, "dataset_size must be positive");
  require(holdout_size > 0, "holdout_size must be positive");
  require(std::isfinite(lr_critic) && lr_critic > 0, "lr_critic must be positive");
  require(std::isfinite(lr_generator) && lr_generator > 0, "lr_generator must be positive");
  require(std::isfinite(clip) && clip > 0, "clip must be positive");
  require(rms_decay > 0 && rms_decay < 1, "rms_decay must lie in (0, 1)");
  require(std::isfinite(rms_eps) && rms_eps > 0, "rms_eps must be positive");
  require(scene_width >= 8 && scene_height >= 8, "scene size must be at least 8x8");
  weights.validate();
  network_config().validate();
}

NetConfig TrainConfig::network_config() const {
  NetConfig c = net;
  c.width = scene_width;
  c.height = scene_height;
  c.seed = seed;
  return c;
}

std::string TrainConfig::to_json() const {
  json net_j = json::parse(net.to_json());
  // Size and seed come from the training config.
  net_j.erase("width");
  net_j.erase("height");
  net_j.erase("seed");
  json j = {{"steps", steps},
            {"batch_size", batch_size},
            {"lr_critic", lr_critic},
            {"lr_generator", lr_generator},
            {"n_critic", n_critic},
            {"clip", clip},
            {"rms_decay", rms_decay},
            {"rms_eps", rms_eps},
            {"seed", seed},
            {"scene_width", scene_width},
            {"scene_height", scene_height},
            {"dataset_size", dataset_size},
            {"holdout_size", holdout_size},
            {"eval_every", eval_every},
            {"checkpoint_every", checkpoint_every},
            {"log_timing", log_timing},
            {"net", net_j},
            {"weights", weights_json(weights)}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("train config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("train config: expected a JSON object");
  TrainConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "steps") c.steps = v.get<std::size_t>();
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "lr_critic") c.lr_critic = v.get<double>();
      else if (k == "lr_generator") c.lr_generator = v.get<double>();
      else if (k == "n_critic") c.n_critic = v.get<std::size_t>();
      else if (k == "clip") c.clip = v.get<double>();
      else if (k == "rms_decay") c.rms_decay = v.get<double>();
      else if (k == "rms_eps") c.rms_eps = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "scene_width") c.scene_width = v.get<std::size_t>();
      else if (k == "scene_height") c.scene_height = v.get<std::size_t>();
      else if (k == "dataset_size") c.dataset_size = v.get<std::size_t>();
      else if (k == "holdout_size") c.holdout_size = v.get<std::size_t>();
      else if (k == "eval_every") c.eval_every = v.get<std::size_t>();
      else if (k == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
      else if (k == "log_timing") c.log_timing = v.get<bool>();
      else if (k == "net") c.net = NetConfig::from_json(v.dump());
      else if (k == "weights") {
        for (const auto& [wk, wv] : v.items()) {
          if (wk == "lambda_g") c.weights.lambda_g = wv.get<double>();
          else if (wk == "lambda_l") c.weights.lambda_l = wv.get<double>();
          else if (wk == "lambda_pred") c.weights.lambda_pred = wv.get<double>();
          else throw ValidationError("train config: unknown weights key '" + wk + "'");
        }
      } else {
        throw ValidationError("train config: unknown key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  return c;
}

// ---- data ----

SyntheticScene training_scene(const TrainConfig& config, std::size_t index, bool holdout) {
  const std::uint64_t stream = derive_seed(config.seed, holdout ? kHoldoutScenes : kTrainScenes);
  return synth_scene(derive_seed(stream, index), config.scene_width, config.scene_height);
}

namespace {

void check_subset(const DepthMap& pseudo, const DepthMap& raw) {
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (pseudo.valid(i) && (!raw.valid(i) || pseudo[i] != raw[i])) {
      throw ValidationError("pseudo depth has a pixel the raw depth lacks at index " + std::to_string(i));
    }
  }
}

TrainSample pseudo_sample(const SyntheticScene& scene, MaskPolicy policy, std::uint64_t mask_seed) {
  policy.seed = mask_seed;
  PseudoResult r = make_pseudo(scene.depth, scene.rgb, &scene.semantics, policy);
  check_subset(r.pseudo, scene.depth);
  return {scene.rgb, std::move(r.pseudo), scene.depth};
}

}  // namespace

std::vector<TrainSample> holdout_set(const TrainConfig& config, const MaskPolicy& policy) {
  const std::uint64_t masks = derive_seed(config.seed, kHoldoutMasks);
  std::vector<TrainSample> out;
  out.reserve(config.holdout_size);
  for (std::size_t i = 0; i < config.holdout_size; ++i) {
    out.push_back(pseudo_sample(training_scene(config, i, true), policy, derive_seed(masks, i)));
  }
  return out;
}

// ---- logs ----

std::string StepLog::to_json() const {
  json j = {{"step", step}, {"L_D", l_d}, {"L_G", l_g}, {"l1_local", l1_local}, {"l1_pred", l1_pred}};
  j["wall_ms"] = wall_ms ? json(*wall_ms) : json(nullptr);
  return j.dump();
}

std::string EvalLog::to_json() const {
  json j = {{"format_version", 1},
            {"step", step},
            {"rmse", metrics.rmse},
            {"rel", metrics.rel},
            {"delta1", metrics.delta1},
            {"delta2", metrics.delta2},
            {"delta3", metrics.delta3},
            {"pixels", metrics.pixels}};
  return j.dump();
}

// ---- optimizer ----

RmsProp::RmsProp(std::vector<NamedTensor> params, double lr, double decay, double eps)
    : params_(std::move(params)), lr_(lr), decay_(decay), eps_(eps) {
  square_avg_.reserve(params_.size());
  for (const auto& p : params_) square_avg_.emplace_back(p.tensor.numel(), 0.0);
}

void RmsProp::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& t = params_[k].tensor;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto& v = square_avg_[k];
    const auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = decay_ * v[i] + (1.0 - decay_) * g[i] * g[i];
      w[i] -= lr_ * g[i] / (std::sqrt(v[i]) + eps_);
      if (!std::isfinite(w[i])) throw NumericalError("rmsprop: non-finite value in " + params_[k].name);
    }
    t.clear_grad();
  }
}

void RmsProp::zero_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

std::vector<NamedTensor> RmsProp::state(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  out.reserve(params_.size());
  for (std::size_t k = 0; k < params_.size(); ++k) {
    out.push_back({prefix + params_[k].name, Tensor::from({square_avg_[k].size()}, square_avg_[k])});
  }
  return out;
}

void RmsProp::load_state(const std::vector<NamedTensor>& extra, const std::string& prefix) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const std::string name = prefix + params_[k].name;
    const auto it = std::find_if(extra.begin(), extra.end(), [&](const NamedTensor& e) { return e.name == name; });
    if (it == extra.end()) throw FormatError("checkpoint lacks optimizer state " + name);
    if (it->tensor.numel() != square_avg_[k].size()) throw FormatError("optimizer state size mismatch for " + name);
    std::copy(it->tensor.data().begin(), it->tensor.data().end(), square_avg_[k].begin());
  }
}

double clip_critic(NetworkBundle& net, double clip) {
  double largest = 0.0;
  for (auto& p : net.critic_parameters()) {
    for (double& w : p.tensor.mutable_data()) {
      w = std::clamp(w, -clip, clip);
      largest = std::max(largest, std::abs(w));
    }
  }
  return largest;
}

TrainingDiverged::TrainingDiverged(std::uint64_t step, std::filesystem::path checkpoint, const std::string& cause)
    : NumericalError("training diverged at step " + std::to_string(step) + ": " + cause +
                     (checkpoint.empty() ? std::string() : "; last good state saved to " + checkpoint.string())),
      step_(step),
      checkpoint_(std::move(checkpoint)) {}

// ---- training ----

namespace {

struct Batch {
  std::vector<RgbImage> rgb;
  std::vector<DepthMap> input;
  std::vector<DepthMap> gt;
};

class Trainer {
 public:
  Trainer(const TrainConfig& config, const MaskPolicy& policy, const TrainHooks& hooks)
      : config_(config), policy_(policy), hooks_(hooks) {
    scenes_.reserve(config.dataset_size);
    for (std::size_t i = 0; i < config.dataset_size; ++i) scenes_.push_back(training_scene(config, i));
    holdout_ = holdout_set(config, policy);
  }

  TrainResult run(const std::optional<Checkpoint>& resume) {
    TrainResult result;
    if (resume) check_compatible(resume->bundle);
    result.bundle = NetworkBundle::create(config_.network_config(), config_.weights);
    if (resume) {
      // Copy values so the caller's checkpoint is never trained in place.
      result.bundle.weights = resume->bundle.weights;
      const auto src = resume->bundle.parameters();
      auto dst = result.bundle.parameters();
      for (std::size_t i = 0; i < dst.size(); ++i) {
        std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.mutable_data().begin());
      }
    }
    std::uint64_t step = resume ? resume->step : 0;

    critic_opt_ = RmsProp(result.bundle.critic_parameters(), config_.lr_critic, config_.rms_decay, config_.rms_eps);
    gen_opt_ =
        RmsProp(result.bundle.generator_side_parameters(), config_.lr_generator, config_.rms_decay, config_.rms_eps);
    if (resume) {
      critic_opt_.load_state(resume->extra, kCriticState);
      gen_opt_.load_state(resume->extra, kGeneratorState);
    }

    open_logs(resume.has_value());
    if (!resume) run_eval(result, 0);

    for (; step < config_.steps; ++step) {
      const auto snapshot = take_snapshot();
      StepLog log;
      try {
        log = train_step(result, step);
      } catch (const NumericalError& e) {
        restore_snapshot(snapshot);
        result.steps_done = step;
        std::filesystem::path saved;
        if (!config_.out_dir.empty()) {
          saved = config_.out_dir / "last_good.ckpt";
          save_checkpoint(saved, make_checkpoint(result));
        }
        throw TrainingDiverged(step, saved, e.what());
      }
      result.steps_done = step + 1;
      result.log.push_back(log);
      write_line(train_log_, log.to_json());
      if (hooks_.on_step) hooks_.on_step(log);

      const std::uint64_t done = step + 1;
      if (config_.eval_every > 0 && done % config_.eval_every == 0) run_eval(result, done);
      else if (done == config_.steps) run_eval(result, done);
      if (config_.checkpoint_every > 0 && done % config_.checkpoint_every == 0 && !config_.out_dir.empty()) {
        save_checkpoint(config_.out_dir / ("checkpoint_" + std::to_string(done) + ".ckpt"), make_checkpoint(result));
      }
    }
    result.steps_done = step;
    const Checkpoint final_ck = make_checkpoint(result);
    if (!config_.out_dir.empty()) save_checkpoint(config_.out_dir / kCheckpointName, final_ck);
    return result;
  }

  Checkpoint make_checkpoint(TrainResult& result) const {
    result.optimizer_state = optimizer_state();
    return training_checkpoint(result, config_);
  }

  std::vector<NamedTensor> optimizer_state() const {
    std::vector<NamedTensor> out = critic_opt_.state(kCriticState);
    for (auto& s : gen_opt_.state(kGeneratorState)) out.push_back(std::move(s));
    return out;
  }

 private:
  void check_compatible(const NetworkBundle& bundle) const {
    if (bundle.config.to_json() != config_.network_config().to_json()) {
      throw ValidationError("resume checkpoint network config does not match the training config");
    }
  }

  Batch draw_batch(Rng& rng, TrainResult& result) {
    Batch b;
    for (std::size_t k = 0; k < config_.batch_size; ++k) {
      const SyntheticScene& scene = scenes_[rng.index(scenes_.size())];
      TrainSample s = pseudo_sample(scene, policy_, rng.next_u64());
      b.rgb.push_back(std::move(s.rgb));
      b.input.push_back(std::move(s.input));
      b.gt.push_back(std::move(s.gt));
      ++result.samples_drawn;
    }
    return b;
  }

  StepLog train_step(TrainResult& result, std::uint64_t step) {
    const auto start = std::chrono::steady_clock::now();
    NetworkBundle& net = result.bundle;
    Rng rng(derive_seed(derive_seed(config_.seed, kStepDraws), step));
    StepLog log;
    log.step = step;

    for (std::size_t k = 0; k < config_.n_critic; ++k) {
      const Batch b = draw_batch(rng, result);
      const Tensor rgb = rgb_tensor(b.rgb);
      Tensor fake;
      {
        NoGradGuard no_grad;
        fake = fused_forward(net, depth_tensor(b.input), rgb).d_f;
      }
      critic_opt_.zero_grad();
      const Tensor l_d = wgan_d_loss(discriminator_forward(net, fake, rgb),
                                     discriminator_forward(net, depth_tensor(b.gt), rgb));
      backward(l_d);
      critic_opt_.step();
      const double largest = clip_critic(net, config_.clip);
      result.max_critic_weight = std::max(result.max_critic_weight, largest);
      log.l_d = l_d.item();
      if (hooks_.on_critic_step) hooks_.on_critic_step(net, step, k);
    }

    const Batch b = draw_batch(rng, result);
    const Tensor rgb = rgb_tensor(b.rgb);
    const ForwardOutputs o = full_forward(net, depth_tensor(b.input), rgb);
    const Tensor fake = discriminator_forward(net, o.d_f, rgb);
    Tensor real;
    {
      NoGradGuard no_grad;
      real = discriminator_forward(net, depth_tensor(b.gt), rgb);
    }
    const LossTerms t = overall_loss(o.d_l, o.d_f, o.d_pred, b.gt, fake, real, net.weights);
    gen_opt_.zero_grad();
    backward(t.generator_objective);
    gen_opt_.step();
    // The adversarial term also reached the critic; those grads are not ours.
    critic_opt_.zero_grad();

    log.l_g = t.l_g.item();
    log.l1_local = t.l1_local.item();
    log.l1_pred = t.l1_pred.item();
    if (config_.log_timing) {
      log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    return log;
  }

  void run_eval(TrainResult& result, std::uint64_t step) {
    EvalLog e;
    e.step = step;
    e.metrics = evaluate(result.bundle, holdout_).overall;
    result.evals.push_back(e);
    write_line(eval_log_, e.to_json());
    if (hooks_.on_eval) hooks_.on_eval(e);
  }

  struct Snapshot {
    std::vector<std::vector<double>> values;
    std::vector<NamedTensor> moments;
  };

  Snapshot take_snapshot() const {
    Snapshot s;
    for (const auto* opt : {&critic_opt_, &gen_opt_}) {
      for (const auto& p : opt->params()) s.values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    }
    s.moments = optimizer_state();
    return s;
  }

  void restore_snapshot(const Snapshot& s) {
    std::size_t k = 0;
    for (auto* opt : {&critic_opt_, &gen_opt_}) {
      for (const auto& p : opt->params()) {
        Tensor t = p.tensor;
        std::copy(s.values[k].begin(), s.values[k].end(), t.mutable_data().begin());
        t.clear_grad();
        ++k;
      }
    }
    critic_opt_.load_state(s.moments, kCriticState);
    gen_opt_.load_state(s.moments, kGeneratorState);
  }

  void open_logs(bool append) {
    if (config_.out_dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(config_.out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + config_.out_dir.string() + ": " + ec.message());
    const auto mode = append ? std::ios::app : std::ios::trunc;
    train_log_.open(config_.out_dir / kTrainLogName, std::ios::out | mode);
    eval_log_.open(config_.out_dir / kEvalLogName, std::ios::out | mode);
    if (!train_log_ || !eval_log_) throw IoError("cannot open logs under " + config_.out_dir.string());
  }

  static void write_line(std::ofstream& os, const std::string& line) {
    if (!os.is_open()) return;
    os << line << '\n';
    os.flush();
    if (!os) throw IoError("failed writing log line");
  }

  TrainConfig config_;
  MaskPolicy policy_;
  TrainHooks hooks_;
  std::vector<SyntheticScene> scenes_;
  std::vector<TrainSample> holdout_;
  RmsProp critic_opt_, gen_opt_;
  std::ofstream train_log_, eval_log_;
};

}  // namespace

TrainResult train(const TrainConfig& config, const MaskPolicy& policy, const TrainHooks& hooks,
                  const std::optional<Checkpoint>& resume) {
  config.validate();
  policy.validate();
  Trainer t(config, policy, hooks);
  return t.run(resume);
}

Checkpoint training_checkpoint(const TrainResult& result, const TrainConfig& config) {
  Checkpoint ck;
  ck.bundle = result.bundle;
  ck.step = result.steps_done;
  ck.extra = result.optimizer_state;
  ck.extra_json = json{{"train_config", json::parse(config.to_json())}}.dump();
  return ck;
}

// ---- evaluation ----

std::vector<std::uint8_t> normalize_confidence(std::span<const double> logits) {
  std::vector<std::uint8_t> out(logits.size(), 0);
  if (logits.empty()) return out;
  const auto [lo, hi] = std::minmax_element(logits.begin(), logits.end());
  const double range = *hi - *lo;
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (logits[i] - *lo) / range));
  }
  return out;
}

MetricsReport evaluate(const NetworkBundle& net, std::span<const TrainSample> samples, const EvalOptions& options) {
  if (samples.empty()) throw ValidationError("evaluate: no samples");
  if (options.batch_size == 0) throw ValidationError("evaluate: batch_size must be positive");
  if (options.dump_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*options.dump_dir, ec);
    if (ec) throw IoError("cannot create dump directory " + options.dump_dir->string() + ": " + ec.message());
  }
  NoGradGuard no_grad;
  std::vector<DepthMap> preds, gts;
  for (std::size_t start = 0; start < samples.size(); start += options.batch_size) {
    const std::size_t end = std::min(samples.size(), start + options.batch_size);
    std::vector<RgbImage> rgb;
    std::vector<DepthMap> input;
    for (std::size_t i = start; i < end; ++i) {
      rgb.push_back(samples[i].rgb);
      input.push_back(samples[i].input);
    }
    const ForwardOutputs o = full_forward(net, depth_tensor(input), rgb_tensor(rgb));
    for (std::size_t i = start; i < end; ++i) {
      const std::size_t n = i - start;
      preds.push_back(to_depth_map(o.d_pred, n, DepthRole::kPredicted));
      gts.push_back(samples[i].gt);
      if (!options.dump_dir) continue;
      const std::string stem = i < options.names.size() ? options.names[i] : std::to_string(i);
      const auto& dir = *options.dump_dir;
      save_depth(preds.back(), dir / (stem + "_pred.png"));
      save_depth(to_depth_map(o.d_l, n, DepthRole::kPredicted), dir / (stem + "_local.png"));
      save_depth(to_depth_map(o.d_f, n, DepthRole::kPredicted), dir / (stem + "_fused.png"));
      const std::size_t hw = o.c_l.dim(2) * o.c_l.dim(3);
      save_gray8(o.c_l.dim(3), o.c_l.dim(2), normalize_confidence(o.c_l.data().subspan(n * hw, hw)),
                 dir / (stem + "_conf_local.png"));
      save_gray8(o.c_f.dim(3), o.c_f.dim(2), normalize_confidence(o.c_f.data().subspan(n * hw, hw)),
                 dir / (stem + "_conf_fused.png"));
    }
  }
  return compute_metrics(preds, gts);
}

MetricsReport evaluate_passthrough(std::span<const TrainSample> samples) {
  if (samples.empty()) throw ValidationError("evaluate: no samples");
  std::vector<DepthMap> preds, gts;
  for (const auto& s : samples) {
    preds.push_back(s.input);
    gts.push_back(s.gt);
  }
  return compute_metrics(preds, gts);
}

}  // namespace depthfuse
