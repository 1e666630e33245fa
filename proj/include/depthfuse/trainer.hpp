#pragma once

// Alternating WGAN training on pseudo-masked synthetic scenes, plus the
// evaluation driver.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "depthfuse/error.hpp"
#include "depthfuse/losses.hpp"
#include "depthfuse/network.hpp"
#include "depthfuse/pseudomask.hpp"
#include "depthfuse/synth.hpp"

namespace depthfuse {

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 4;
  double lr_critic = 5e-5;
  double lr_generator = 1e-4;
  std::size_t n_critic = 5;
  double clip = 0.01;
  double rms_decay = 0.99;
  double rms_eps = 1e-8;
  std::uint64_t seed = 1;
  std::size_t scene_width = 64;
  std::size_t scene_height = 48;
  std::size_t dataset_size = 32;
  std::size_t holdout_size = 8;
  /// Held-out evaluation every this many steps (0: only at start and end).
  std::size_t eval_every = 100;
  /// Periodic checkpoints every this many steps (0: final only).
  std::size_t checkpoint_every = 0;
  /// Logs and checkpoints go here; empty keeps everything in memory.
  std::filesystem::path out_dir;
  /// Record wall-clock milliseconds in the step log. Off by default so
  /// logs of identical runs compare equal.
  bool log_timing = false;
  /// Network shape; its height, width and seed are taken from this config.
  NetConfig net;
  LossWeights weights;

  /// Throws ValidationError on zero counts, non-positive rates or clip.
  void validate() const;
  /// NetConfig with scene size and seed applied.
  NetConfig network_config() const;
  std::string to_json() const;
  /// Missing keys keep defaults; unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
};

/// A training or evaluation example at network resolution.
struct TrainSample {
  RgbImage rgb;
  DepthMap input;  ///< pseudo-masked or raw depth
  DepthMap gt;
};

/// Scene `index` of the training pool, or of the held-out pool when
/// `holdout` is set. Both pools derive from the config seed and never share
/// a scene seed.
SyntheticScene training_scene(const TrainConfig& config, std::size_t index, bool holdout = false);

/// Held-out examples with fixed pseudo masks.
std::vector<TrainSample> holdout_set(const TrainConfig& config, const MaskPolicy& policy);

struct StepLog {
  std::uint64_t step = 0;
  double l_d = 0.0;  ///< last critic update of the step
  double l_g = 0.0;
  double l1_local = 0.0;
  double l1_pred = 0.0;
  std::optional<double> wall_ms;
  std::string to_json() const;
};

struct EvalLog {
  std::uint64_t step = 0;
  ImageMetrics metrics;
  std::string to_json() const;
};

/// Plain RMSprop: v = rho v + (1 - rho) g^2, p -= lr g / (sqrt(v) + eps).
class RmsProp {
 public:
  RmsProp() = default;
  RmsProp(std::vector<NamedTensor> params, double lr, double decay, double eps);

  /// Applies one update from the accumulated gradients and clears them.
  /// Parameters without a gradient are left untouched.
  void step();
  void zero_grad();
  const std::vector<NamedTensor>& params() const { return params_; }
  /// Moment buffers named "<prefix><param name>".
  std::vector<NamedTensor> state(const std::string& prefix) const;
  void load_state(const std::vector<NamedTensor>& extra, const std::string& prefix);

 private:
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> square_avg_;
  double lr_ = 0.0, decay_ = 0.0, eps_ = 0.0;
};

/// Sets every critic parameter into [-clip, clip]; returns the largest
/// magnitude left.
double clip_critic(NetworkBundle& net, double clip);

struct TrainHooks {
  /// After each critic update and clip, with the step and the update index.
  std::function<void(const NetworkBundle&, std::uint64_t, std::size_t)> on_critic_step;
  std::function<void(const StepLog&)> on_step;
  std::function<void(const EvalLog&)> on_eval;
};

struct TrainResult {
  NetworkBundle bundle;
  std::uint64_t steps_done = 0;
  std::vector<StepLog> log;
  std::vector<EvalLog> evals;
  /// Largest critic weight magnitude seen after any critic update.
  double max_critic_weight = 0.0;
  /// Training samples drawn, each checked against the subset law.
  std::size_t samples_drawn = 0;
  /// RMSprop moments at the end of the run, named as in checkpoints.
  std::vector<NamedTensor> optimizer_state;
};

/// Raised when a loss or update turns non-finite. The message names the
/// step; `checkpoint` is where the state before that step was saved (empty
/// when training had no out_dir).
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(std::uint64_t step, std::filesystem::path checkpoint, const std::string& cause);
  std::uint64_t step() const { return step_; }
  const std::filesystem::path& checkpoint() const { return checkpoint_; }

 private:
  std::uint64_t step_;
  std::filesystem::path checkpoint_;
};

/// Runs config.steps generator steps from fresh weights, or continues from
/// `resume` until the step count reaches config.steps. With an out_dir it
/// writes train_log.jsonl, eval_log.jsonl and checkpoint.ckpt there.
TrainResult train(const TrainConfig& config, const MaskPolicy& policy, const TrainHooks& hooks = {},
                  const std::optional<Checkpoint>& resume = std::nullopt);

/// Resumable checkpoint: weights, step count and optimizer state.
Checkpoint training_checkpoint(const TrainResult& result, const TrainConfig& config);

/// Filenames used under out_dir.
inline constexpr const char* kTrainLogName = "train_log.jsonl";
inline constexpr const char* kEvalLogName = "eval_log.jsonl";
inline constexpr const char* kCheckpointName = "checkpoint.ckpt";

// ---- evaluation ----

struct EvalOptions {
  std::size_t batch_size = 4;
  /// When set, writes <name>_pred/_local/_fused depth PNGs and
  /// <name>_conf_local/_conf_fused 8-bit confidence PNGs here.
  std::optional<std::filesystem::path> dump_dir;
  /// File stems for dumps; defaults to the sample index.
  std::vector<std::string> names;
};

/// Runs the full model on every sample and scores d_pred against gt.
MetricsReport evaluate(const NetworkBundle& net, std::span<const TrainSample> samples,
                       const EvalOptions& options = {});

/// Stub model returning the input depth unchanged.
MetricsReport evaluate_passthrough(std::span<const TrainSample> samples);

/// Confidence logits as 8-bit gray, min-max normalized per image.
std::vector<std::uint8_t> normalize_confidence(std::span<const double> logits);

}  // namespace depthfuse
