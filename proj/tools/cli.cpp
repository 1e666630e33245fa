#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "depthfuse/depth_io.hpp"
#include "depthfuse/error.hpp"
#include "depthfuse/gradcheck.hpp"
#include "depthfuse/manifest.hpp"
#include "depthfuse/pseudomask.hpp"
#include "depthfuse/rng.hpp"
#include "depthfuse/synth.hpp"
#include "depthfuse/trainer.hpp"

extern "C" char* openblas_get_corename();

namespace depthfuse::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

/// Spatial size must be a multiple of this for the default network depth.
constexpr std::size_t kSizeMultiple = 8;

struct Globals {
  std::uint64_t seed = 1;
  fs::path out_dir = "out";
  std::size_t threads = 1;
  bool verbose = false;
  std::string config;
};

/// Thrown for bad flag values found after parsing.
struct UsageError : Error {
  using Error::Error;
};

struct Context {
  const Globals& g;
  std::ostream& out;
  std::ostream& err;
  void log(const std::string& msg) const {
    if (g.verbose) err << msg << '\n';
  }
  void warn(const std::string& msg) const { err << "warning: " << msg << '\n'; }
};

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << text;
  if (!os.flush()) throw IoError("cannot write " + p.string());
}

void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

std::string stem(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

/// Calls work(i) for i in [0, n) on up to `threads` workers, in index order
/// per worker.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& work) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) work(i);
    });
  }
  for (auto& th : pool) th.join();
}

void check_size(const Context& ctx, std::size_t width, std::size_t height) {
  if (width % kSizeMultiple != 0) {
    ctx.warn("width " + std::to_string(width) + " is not divisible by " + std::to_string(kSizeMultiple) +
             "; the default network cannot consume it");
  }
  if (height % kSizeMultiple != 0) {
    ctx.warn("height " + std::to_string(height) + " is not divisible by " + std::to_string(kSizeMultiple) +
             "; the default network cannot consume it");
  }
}

/// OpenBLAS picks SSE3 kernels on CPUs it does not recognize.
void check_blas(const Context& ctx) {
  const std::string core = openblas_get_corename();
  if ((core == "Prescott" || core == "Core2" || core == "generic") && __builtin_cpu_supports("avx2")) {
    ctx.warn("OpenBLAS is using " + core +
             " kernels on an AVX2 CPU; set OPENBLAS_CORETYPE=Haswell (or SkylakeX with AVX-512) for faster runs");
  }
}

MaskPolicy load_policy(const std::string& path) {
  if (path.empty()) return MaskPolicy{};
  MaskPolicy p = MaskPolicy::from_json(read_text(path));
  p.validate();
  return p;
}

// ---- synth-data ----

struct SynthArgs {
  std::size_t count = 8;
  std::size_t width = 64;
  std::size_t height = 48;
  int objects = 0;
};

int cmd_synth_data(const Context& ctx, const SynthArgs& a) {
  if (a.count == 0) throw UsageError("--count must be positive");
  if (a.width < 8 || a.height < 8) throw UsageError("--width and --height must be at least 8");
  if (a.objects < 0 || a.objects > 4) throw UsageError("--objects must lie in [0, 4]");
  check_size(ctx, a.width, a.height);

  const fs::path root = ctx.g.out_dir;
  for (const char* sub : {"rgb", "depth", "semantics"}) make_dirs(root / sub);
  std::mutex write_mutex;
  parallel_for(a.count, ctx.g.threads, [&](std::size_t i) {
    const std::uint64_t s = derive_seed(ctx.g.seed, i);
    const SyntheticScene scene =
        a.objects == 0 ? synth_scene(s, a.width, a.height) : synth_scene(s, a.width, a.height, a.objects);
    std::lock_guard lock(write_mutex);
    save_rgb(scene.rgb, root / "rgb" / (stem(i) + ".png"));
    save_depth(scene.depth, root / "depth" / (stem(i) + ".png"));
    save_labels(scene.semantics, root / "semantics" / (stem(i) + ".png"));
  });

  DatasetManifest m;
  m.split = "train";
  for (std::size_t i = 0; i < a.count; ++i) {
    const fs::path depth = fs::path("depth") / (stem(i) + ".png");
    // The synthetic sensor is perfect: raw and ground truth coincide.
    m.items.push_back({fs::path("rgb") / (stem(i) + ".png"), depth, depth, fs::path("semantics") / (stem(i) + ".png")});
  }
  save_manifest(m, root / "manifest.json");
  ctx.out << "wrote " << a.count << " scenes and " << (root / "manifest.json").string() << '\n';
  return kOk;
}

// ---- make-pseudo ----

struct PseudoArgs {
  std::string manifest;
  std::string policy;
};

int cmd_make_pseudo(const Context& ctx, const PseudoArgs& a) {
  const MaskPolicy base = load_policy(a.policy);
  const DatasetManifest m = load_manifest(a.manifest);
  const fs::path root = ctx.g.out_dir;
  make_dirs(root / "pseudo");
  make_dirs(root / "mask");

  struct Outcome {
    std::optional<PseudoResult> result;
    std::size_t raw_valid = 0;
    std::string error;
    std::vector<std::string> warnings;
  };
  std::vector<Outcome> outcomes(m.items.size());
  std::mutex write_mutex;
  parallel_for(m.items.size(), ctx.g.threads, [&](std::size_t i) {
    Outcome& o = outcomes[i];
    try {
      const Sample s = load_sample(m, i);
      MaskPolicy p = base;
      p.seed = derive_seed(ctx.g.seed, i);
      PseudoResult r = make_pseudo(s.depth_raw, s.rgb, s.semantics ? &*s.semantics : nullptr, p);
      for (std::size_t k = 0; k < kMaskMethodCount; ++k) {
        if (r.skipped[k]) {
          o.warnings.push_back("item " + std::to_string(i) + ": " +
                               std::string(to_string(static_cast<MaskMethod>(k))) + " skipped, no semantics");
        }
      }
      const fs::path pseudo_path = root / "pseudo" / (stem(i) + ".png");
      {
        std::lock_guard lock(write_mutex);
        save_depth(r.pseudo, pseudo_path);
        save_mask(r.mask, root / "mask" / (stem(i) + ".png"));
      }
      // Check the file as written, not the in-memory map.
      const DepthMap back = load_depth(pseudo_path);
      for (std::size_t px = 0; px < back.size(); ++px) {
        if (back.valid(px) && (!s.depth_raw.valid(px) || back[px] != s.depth_raw[px])) {
          throw ValidationError("pseudo depth is not a subset of the raw depth at pixel " + std::to_string(px));
        }
      }
      o.raw_valid = s.depth_raw.valid_count();
      o.result = std::move(r);
    } catch (const Error& e) {
      o.error = e.what();
    }
  });

  json methods = json::object();
  std::array<std::size_t, kMaskMethodCount> method_pixels{}, method_runs{};
  std::size_t masked = 0, raw_valid = 0, ok = 0;
  json failures = json::array();
  DatasetManifest pm;
  pm.split = m.split;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const Outcome& o = outcomes[i];
    for (const auto& w : o.warnings) ctx.warn(w);
    if (!o.result) {
      ctx.err << "error: item " << i << ": " << o.error << '\n';
      failures.push_back({{"index", i}, {"error", o.error}});
      continue;
    }
    ++ok;
    raw_valid += o.raw_valid;
    masked += o.raw_valid - o.result->pseudo.valid_count();
    for (std::size_t k = 0; k < kMaskMethodCount; ++k) {
      method_pixels[k] += o.result->method_pixels[k];
      method_runs[k] += o.result->enabled[k] && !o.result->skipped[k];
    }
    const ManifestRecord& rec = m.items[i];
    const fs::path gt = rec.depth_gt ? m.resolve(*rec.depth_gt) : m.resolve(rec.depth_raw);
    pm.items.push_back({fs::absolute(m.resolve(rec.rgb)), fs::path("pseudo") / (stem(i) + ".png"), fs::absolute(gt),
                        rec.semantics ? std::optional<fs::path>(fs::absolute(m.resolve(*rec.semantics)))
                                      : std::nullopt});
  }
  for (std::size_t k = 0; k < kMaskMethodCount; ++k) {
    methods[std::string(to_string(static_cast<MaskMethod>(k)))] = {{"pixels", method_pixels[k]},
                                                                   {"images", method_runs[k]}};
  }
  const json summary = {{"format_version", 1},
                        {"images", ok},
                        {"failed", failures},
                        {"methods", methods},
                        {"masked_pixels", masked},
                        {"raw_valid_pixels", raw_valid},
                        {"masked_fraction", raw_valid ? static_cast<double>(masked) / raw_valid : 0.0}};
  write_text(root / "pseudo_summary.json", summary.dump(2) + "\n");
  if (!pm.items.empty()) save_manifest(pm, root / "pseudo_manifest.json");
  ctx.out << summary.dump(2) << '\n';
  return failures.empty() ? kOk : kIo;
}

// ---- train ----

struct TrainArgs {
  std::string train_config;
  std::string policy;
  std::string resume;
  std::optional<std::size_t> steps, batch_size, n_critic, width, height, dataset_size, holdout_size, eval_every,
      checkpoint_every;
  std::optional<double> lr_critic, lr_generator, clip;
  bool log_timing = false;
};

TrainConfig build_train_config(const Globals& g, const TrainArgs& a) {
  TrainConfig c = a.train_config.empty() ? TrainConfig{} : TrainConfig::from_json(read_text(a.train_config));
  c.seed = g.seed;
  c.out_dir = g.out_dir;
  if (a.steps) c.steps = *a.steps;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.n_critic) c.n_critic = *a.n_critic;
  if (a.width) c.scene_width = *a.width;
  if (a.height) c.scene_height = *a.height;
  if (a.dataset_size) c.dataset_size = *a.dataset_size;
  if (a.holdout_size) c.holdout_size = *a.holdout_size;
  if (a.eval_every) c.eval_every = *a.eval_every;
  if (a.checkpoint_every) c.checkpoint_every = *a.checkpoint_every;
  if (a.lr_critic) c.lr_critic = *a.lr_critic;
  if (a.lr_generator) c.lr_generator = *a.lr_generator;
  if (a.clip) c.clip = *a.clip;
  if (a.log_timing) c.log_timing = true;
  return c;
}

int cmd_train(const Context& ctx, const TrainArgs& a) {
  TrainConfig c;
  MaskPolicy policy;
  try {
    c = build_train_config(ctx.g, a);
    check_size(ctx, c.scene_width, c.scene_height);
    c.validate();
    policy = load_policy(a.policy);
  } catch (const ValidationError& e) {
    throw UsageError(e.what());
  }
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);

  TrainHooks hooks;
  hooks.on_step = [&](const StepLog& l) { ctx.log(l.to_json()); };
  hooks.on_eval = [&](const EvalLog& e) {
    ctx.out << "step " << e.step << " held-out rmse " << e.metrics.rmse << " delta1 " << e.metrics.delta1 << '\n';
  };
  const TrainResult r = train(c, policy, hooks, resume);
  ctx.out << "trained " << r.steps_done << " steps; checkpoint " << (c.out_dir / kCheckpointName).string() << '\n';
  return kOk;
}

// ---- eval ----

struct EvalArgs {
  std::string checkpoint;
  bool passthrough = false;
  std::string manifest;
  std::size_t synthetic = 0;
  std::string input = "raw";
  std::string policy;
  bool dump = false;
};

int cmd_eval(const Context& ctx, const EvalArgs& a) {
  if (a.checkpoint.empty() == !a.passthrough) throw UsageError("give exactly one of --checkpoint and --passthrough");
  if (a.manifest.empty() == (a.synthetic == 0)) throw UsageError("give exactly one of --manifest and --synthetic");
  if (a.input != "raw" && a.input != "gt") throw UsageError("--input must be raw or gt");
  const MaskPolicy policy = load_policy(a.policy);

  std::optional<Checkpoint> ck;
  if (!a.passthrough) ck = load_checkpoint(a.checkpoint);

  std::vector<TrainSample> samples;
  std::vector<std::string> names;
  if (a.synthetic > 0) {
    TrainConfig c;
    if (ck) {
      const json extra = json::parse(ck->extra_json);
      if (extra.contains("train_config")) c = TrainConfig::from_json(extra["train_config"].dump());
      c.scene_width = ck->bundle.config.width;
      c.scene_height = ck->bundle.config.height;
    }
    c.seed = ctx.g.seed;
    c.holdout_size = a.synthetic;
    samples = holdout_set(c, policy);
    if (a.input == "gt") {
      for (auto& s : samples) s.input = s.gt;
    }
    for (std::size_t i = 0; i < samples.size(); ++i) names.push_back(stem(i));
  } else {
    const DatasetManifest m = load_manifest(a.manifest);
    for (std::size_t i = 0; i < m.items.size(); ++i) {
      Sample s = load_sample(m, i);
      DepthMap gt = s.depth_gt ? *s.depth_gt : s.depth_raw;
      gt.set_role(DepthRole::kGroundTruth);
      DepthMap input = a.input == "gt" ? gt : s.depth_raw;
      if (!a.policy.empty()) {
        MaskPolicy p = policy;
        p.seed = derive_seed(ctx.g.seed, i);
        input = make_pseudo(input, s.rgb, s.semantics ? &*s.semantics : nullptr, p).pseudo;
      }
      if (ck && (s.rgb.width != ck->bundle.config.width || s.rgb.height != ck->bundle.config.height)) {
        ctx.warn("item " + std::to_string(i) + " resized to the network input size");
        const std::size_t w = ck->bundle.config.width, h = ck->bundle.config.height;
        s.rgb = resize_bilinear(s.rgb, w, h);
        input = resize_nearest(input, w, h);
        gt = resize_nearest(gt, w, h);
      }
      samples.push_back({std::move(s.rgb), std::move(input), std::move(gt)});
      names.push_back(m.resolve(m.items[i].rgb).stem().string());
    }
  }

  make_dirs(ctx.g.out_dir);
  MetricsReport report;
  if (a.passthrough) {
    report = evaluate_passthrough(samples);
  } else {
    EvalOptions opt;
    if (a.dump) opt.dump_dir = ctx.g.out_dir / "dumps";
    opt.names = names;
    report = evaluate(ck->bundle, samples, opt);
  }
  write_text(ctx.g.out_dir / "metrics.json", report.to_json() + "\n");
  ctx.out << report.to_json() << '\n';
  return kOk;
}

// ---- gradcheck ----

int cmd_gradcheck(const Context& ctx) {
  const auto entries = run_gradcheck_suite(ctx.g.seed);
  bool all = true;
  ctx.out << std::left << std::setw(44) << "op" << std::setw(14) << "max_rel_err" << std::setw(9) << "checked"
          << std::setw(9) << "skipped"
          << "status\n";
  for (const auto& e : entries) {
    all = all && e.passed;
    std::ostringstream err_s;
    err_s << std::scientific << std::setprecision(2) << e.max_rel_err;
    ctx.out << std::left << std::setw(44) << e.op << std::setw(14) << err_s.str() << std::setw(9) << e.checked
            << std::setw(9) << e.skipped << (e.passed ? "ok" : "FAIL") << '\n';
  }
  make_dirs(ctx.g.out_dir);
  write_text(ctx.g.out_dir / "gradcheck.json", gradcheck_json(entries) + "\n");
  ctx.out << (all ? "all ops within " : "some ops exceed ") << kGradCheckTolerance << '\n';
  return all ? kOk : kNumerical;
}

/// Turns a JSON config object into flag arguments. Keys are long flag
/// names; booleans become bare flags.
std::vector<std::string> config_args(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file " + path + " must hold a JSON object");
  std::vector<std::string> out;
  for (const auto& [k, v] : j.items()) {
    if (k == "config") throw UsageError("config file may not name another config file");
    if (v.is_boolean()) {
      if (v.get<bool>()) out.push_back("--" + k);
    } else if (v.is_string()) {
      out.push_back("--" + k);
      out.push_back(v.get<std::string>());
    } else if (v.is_number()) {
      out.push_back("--" + k);
      out.push_back(v.dump());
    } else {
      throw UsageError("config key '" + k + "' must be a string, number or boolean");
    }
  }
  return out;
}

/// Value of --config if present, scanning the raw arguments.
std::string find_config(const std::vector<std::string>& args) {
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

}  // namespace

int run(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
  Globals g;
  SynthArgs synth;
  PseudoArgs pseudo;
  TrainArgs tr;
  EvalArgs ev;

  CLI::App app{"Depth completion toolkit: synthetic data, pseudo masks, training and evaluation"};
  app.name(args_in.empty() ? "depthfuse" : fs::path(args_in[0]).filename().string());
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Directory receiving all outputs")->capture_default_str();
  app.add_option("--threads", g.threads, "Workers for per-image work")->check(CLI::Range(1, 256))->capture_default_str();
  app.add_flag("--verbose", g.verbose, "Progress messages on stderr");
  app.add_option("--config", g.config, "JSON file whose keys are flag names; its values override flags");

  auto* s_synth = app.add_subcommand("synth-data", "Write procedural RGB-D scenes and a manifest");
  s_synth->add_option("--count", synth.count, "Number of scenes")->capture_default_str();
  s_synth->add_option("--width", synth.width)->capture_default_str();
  s_synth->add_option("--height", synth.height)->capture_default_str();
  s_synth->add_option("--objects", synth.objects, "Objects per scene, 0 for random 1-4")->capture_default_str();

  auto* s_pseudo = app.add_subcommand("make-pseudo", "Apply the masking policy to every manifest item");
  s_pseudo->add_option("--manifest", pseudo.manifest)->required();
  s_pseudo->add_option("--policy", pseudo.policy, "Mask policy JSON (default policy if omitted)");

  auto* s_train = app.add_subcommand("train", "Train on pseudo-masked synthetic scenes");
  s_train->add_option("--train-config", tr.train_config, "TrainConfig JSON used as the base");
  s_train->add_option("--policy", tr.policy, "Mask policy JSON");
  s_train->add_option("--resume", tr.resume, "Checkpoint to continue from");
  s_train->add_option("--steps", tr.steps);
  s_train->add_option("--batch-size", tr.batch_size);
  s_train->add_option("--n-critic", tr.n_critic);
  s_train->add_option("--width", tr.width);
  s_train->add_option("--height", tr.height);
  s_train->add_option("--dataset-size", tr.dataset_size);
  s_train->add_option("--holdout-size", tr.holdout_size);
  s_train->add_option("--eval-every", tr.eval_every);
  s_train->add_option("--checkpoint-every", tr.checkpoint_every);
  s_train->add_option("--lr-critic", tr.lr_critic);
  s_train->add_option("--lr-generator", tr.lr_generator);
  s_train->add_option("--clip", tr.clip);
  s_train->add_flag("--log-timing", tr.log_timing, "Record wall_ms in the step log");

  auto* s_eval = app.add_subcommand("eval", "Score a model on a manifest or a synthetic held-out set");
  s_eval->add_option("--checkpoint", ev.checkpoint);
  s_eval->add_flag("--passthrough", ev.passthrough, "Use the input depth as the prediction");
  s_eval->add_option("--manifest", ev.manifest);
  s_eval->add_option("--synthetic", ev.synthetic, "Size of a synthetic held-out set");
  s_eval->add_option("--input", ev.input, "raw or gt")->capture_default_str();
  s_eval->add_option("--policy", ev.policy, "Mask the input with this policy first");
  s_eval->add_flag("--dump", ev.dump, "Write prediction and confidence PNGs");

  auto* s_grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");

  std::vector<std::string> args = args_in;
  if (args.empty()) args.push_back("depthfuse");
  try {
    const std::string config = find_config(args);
    if (!config.empty()) {
      for (auto& a : config_args(config)) args.push_back(std::move(a));
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  const Context ctx{g, out, err};
  try {
    if (*s_synth) return cmd_synth_data(ctx, synth);
    if (*s_pseudo) return cmd_make_pseudo(ctx, pseudo);
    if (*s_train || *s_eval || *s_grad) check_blas(ctx);
    if (*s_train) return cmd_train(ctx, tr);
    if (*s_eval) return cmd_eval(ctx, ev);
    if (*s_grad) return cmd_gradcheck(ctx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << '\n';
    return kNumerical;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  }
  return kUsage;
}

}  // namespace depthfuse::cli
