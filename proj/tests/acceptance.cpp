// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Plain main so it runs the same under ctest and by hand.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "depthfuse/fusion.hpp"
#include "depthfuse/gradcheck.hpp"
#include "depthfuse/losses.hpp"
#include "depthfuse/pseudomask.hpp"
#include "depthfuse/rng.hpp"
#include "depthfuse/synth.hpp"
#include "depthfuse/trainer.hpp"
#include "felzenszwalb_oracle.hpp"
#include "metrics_oracle.hpp"
#include "test_util.hpp"

using namespace depthfuse;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  // Records the first failure only; later ones rarely add information.
  void fail(const std::string& why) {
    if (pass) detail = why;
    pass = false;
  }
  void expect(bool ok, const std::string& why) {
    if (!ok) fail(why);
  }
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---- 1 ----

Outcome gradcheck_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto entries = run_gradcheck_suite(1);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  for (const auto& e : entries) {
    worst = std::max(worst, e.max_rel_err);
    o.expect(e.passed, e.op + " max rel err " + fmt("%.3g", e.max_rel_err));
  }
  o.expect(secs < 120.0, "runtime " + fmt("%.1f s", secs));
  if (o.pass) {
    o.detail = std::to_string(entries.size()) + " checks, worst rel err " + fmt("%.2e", worst) + ", " +
               fmt("%.1f s", secs);
  }
  return o;
}

// ---- 2 ----

Outcome confidence_fusion() {
  Outcome o;
  Rng rng(2024);
  constexpr std::size_t kN = 100000;
  std::vector<double> dl(kN), df(kN), cl(kN), cf(kN);
  for (std::size_t i = 0; i < kN; ++i) {
    dl[i] = rng.uniform(0.1, 10.0);
    df[i] = rng.uniform(0.1, 10.0);
    cl[i] = rng.uniform(-25.0, 25.0);
    cf[i] = rng.uniform(-25.0, 25.0);
  }
  const Shape shape{1, 1, 1, kN};
  const Tensor fused = confidence_fuse(Tensor::from(shape, dl), Tensor::from(shape, cl), Tensor::from(shape, df),
                                       Tensor::from(shape, cf));
  double worst_shift = 0.0;
  for (std::size_t i = 0; i < kN; ++i) {
    const double v = confidence_fuse(dl[i], df[i], cl[i], cf[i]);
    o.expect(fused.at(i) == v, "tensor and scalar fusion differ at " + std::to_string(i));
    o.expect(v >= std::min(dl[i], df[i]) && v <= std::max(dl[i], df[i]), "convexity broken at " + std::to_string(i));
    const double t = rng.uniform(-5.0, 5.0);
    worst_shift = std::max(worst_shift, std::abs(confidence_fuse(dl[i], df[i], cl[i] + t, cf[i] + t) - v));
  }
  o.expect(worst_shift < 1e-9, "shift changed the result by " + fmt("%.3g", worst_shift));
  const double worked = confidence_fuse(2.0, 4.0, std::log(2.0), 0.0);
  o.expect(std::abs(worked - 8.0 / 3.0) < 1e-12, "worked value " + fmt("%.17g", worked));
  if (o.pass) o.detail = "1e5 pixels, worst shift error " + fmt("%.2e", worst_shift) + ", worked " + fmt("%.15f", worked);
  return o;
}

// ---- 3 ----

Outcome wadain_reduction() {
  Outcome o;
  Rng rng(33);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(2), cz = 1 + rng.index(6), c = 1 + rng.index(6);
    const std::size_t h = 2 + rng.index(7), w = 2 + rng.index(7);
    WAdaInParams p = WAdaInParams::create(cz, c, rng);
    for (Tensor* t : {&p.attn_z_w, &p.attn_z_b, &p.attn_f_w, &p.attn_f_b}) *t = Tensor::zeros(t->shape());
    const Tensor z = testing::random_tensor(rng, {n, cz, h, w});
    const Tensor f = testing::random_tensor(rng, {n, c, h, w}, -3.0, 3.0);
    const Tensor got = w_adain(z, f, p);

    std::vector<double> ys(n * c), yb(n * c);
    for (std::size_t b = 0; b < n; ++b) {
      std::vector<double> pooled(cz, 0.0);
      for (std::size_t k = 0; k < cz; ++k) {
        for (std::size_t i = 0; i < h * w; ++i) pooled[k] += z.at((b * cz + k) * h * w + i);
        pooled[k] /= double(h * w);
      }
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = p.scale_b.at(ch), bb = p.bias_b.at(ch);
        for (std::size_t k = 0; k < cz; ++k) {
          s += p.scale_w.at(ch * cz + k) * pooled[k];
          bb += p.bias_w.at(ch * cz + k) * pooled[k];
        }
        ys[b * c + ch] = s;
        yb[b * c + ch] = bb;
      }
    }
    const Tensor want = adain(f, Tensor::from({n, c}, ys), Tensor::from({n, c}, yb), p.eps);
    for (std::size_t i = 0; i < got.numel(); ++i) worst = std::max(worst, std::abs(got.at(i) - want.at(i)));
  }
  o.expect(worst < 1e-6, "max difference " + fmt("%.3g", worst));
  if (o.pass) o.detail = "100 maps, max difference " + fmt("%.2e", worst);
  return o;
}

// ---- 4 ----

std::size_t felzenszwalb_suite(Outcome& o) {
  const std::array<double, 4> ks{1.0, 50.0, 300.0, 5000.0};
  const std::array<std::size_t, 3> min_sizes{1, 3, 20};
  std::size_t cases = 0;
  auto check = [&](const RgbImage& img) {
    for (double k : ks) {
      for (std::size_t m : min_sizes) {
        ++cases;
        if (!testing::same_partition(felzenszwalb_segment(img, k, m).labels, testing::reference_segment(img, k, m))) {
          o.fail("felzenszwalb differs from reference on a " + std::to_string(img.width) + "x" +
                 std::to_string(img.height) + " image, k " + fmt("%g", k));
        }
      }
    }
  };
  // Every two-colouring of every grid up to 9 pixels, then random images
  // for each remaining shape up to 8x8.
  const std::array<std::array<std::uint8_t, 3>, 2> pair{{{0, 0, 0}, {30, 40, 0}}};
  Rng rng(404);
  for (std::size_t h = 1; h <= 8; ++h) {
    for (std::size_t w = 1; w <= 8; ++w) {
      const std::size_t n = w * h;
      RgbImage img(w, h);
      if (n <= 9) {
        for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
          for (std::size_t p = 0; p < n; ++p) img.set_pixel(p, pair[(bits >> p) & 1]);
          check(img);
        }
      } else {
        for (int trial = 0; trial < 8; ++trial) {
          const bool full = trial % 2 == 1;
          for (std::size_t p = 0; p < n; ++p) {
            if (full) {
              img.set_pixel(p, {std::uint8_t(rng.range(0, 255)), std::uint8_t(rng.range(0, 255)),
                                std::uint8_t(rng.range(0, 255))});
            } else {
              img.set_pixel(p, pair[rng.index(2)]);
            }
          }
          check(img);
        }
      }
    }
  }
  return cases;
}

Outcome pseudo_mask_laws() {
  Outcome o;
  std::size_t eligible = 0, xor_pixels = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const SyntheticScene s = synth_scene(seed, 64, 48);
    const std::string tag = " in scene " + std::to_string(seed);
    MaskPolicy policy;
    policy.seed = derive_seed(seed, 9);
    const PseudoResult r = make_pseudo(s.depth, s.rgb, &s.semantics, policy);
    for (std::size_t p = 0; p < s.depth.size(); ++p) {
      if (r.pseudo.valid(p) && !(s.depth.valid(p) && r.pseudo[p] == s.depth[p])) o.fail("subset law broken" + tag);
    }

    const PixelMask black = black_mask(s.rgb, 1.0, seed);
    for (std::size_t p = 0; p < s.rgb.pixels(); ++p) {
      const auto c = s.rgb.pixel(p);
      const bool dark = std::max({c[0], c[1], c[2]}) <= 5;
      eligible += dark;
      if (black[p] != dark) o.fail("black eligibility mismatch" + tag);
    }

    const LabelMap pred = degrade_segmentation(s.semantics, seed);
    const PixelMask x = xor_mask(pred, s.semantics);
    for (std::size_t p = 0; p < pred.pixels(); ++p) {
      const bool differs = pred.labels[p] != s.semantics.labels[p];
      xor_pixels += differs;
      if (x[p] != differs) o.fail("xor mask mismatch" + tag);
    }
  }
  // Every colour around the threshold, not just those the renderer emits.
  RgbImage ramp(12, 12 * 12);
  std::size_t p = 0;
  for (int r = 0; r < 12; ++r) {
    for (int g = 0; g < 12; ++g) {
      for (int b = 0; b < 12; ++b) ramp.set_pixel(p++, {std::uint8_t(r), std::uint8_t(g), std::uint8_t(b)});
    }
  }
  const PixelMask ramp_mask = black_mask(ramp, 1.0, 1);
  for (std::size_t q = 0; q < ramp.pixels(); ++q) {
    const auto c = ramp.pixel(q);
    if (ramp_mask[q] != (std::max({c[0], c[1], c[2]}) <= 5)) o.fail("black eligibility mismatch on colour ramp");
  }
  const std::size_t cases = felzenszwalb_suite(o);
  if (o.pass) {
    o.detail = "1000 scenes, " + std::to_string(eligible) + " dark pixels, " + std::to_string(xor_pixels) +
               " xor pixels, " + std::to_string(cases) + " segmentation cases";
  }
  return o;
}

// ---- 5 ----

DepthMap random_map(Rng& rng, std::size_t w, std::size_t h, double invalid, DepthRole role) {
  std::vector<double> v(w * h);
  for (double& x : v) x = rng.bernoulli(invalid) ? 0.0 : rng.uniform(0.3, 9.0);
  return DepthMap(w, h, std::move(v), role);
}

Outcome metric_oracle() {
  Outcome o;
  Rng rng(55);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t w = 4 + rng.index(29), h = 4 + rng.index(29);
    const DepthMap gt = random_map(rng, w, h, 0.2, DepthRole::kGroundTruth);
    const DepthMap pred = random_map(rng, w, h, 0.05, DepthRole::kPredicted);
    const ImageMetrics m = compute_metrics(pred, gt);
    const auto n = testing::naive_metrics({&pred}, {&gt});
    for (double d : {m.rmse - n.rmse, m.rel - n.rel, m.delta1 - n.d1, m.delta2 - n.d2, m.delta3 - n.d3}) {
      worst = std::max(worst, std::abs(d));
    }
    o.expect(m.pixels == n.n, "pixel count mismatch");
  }
  o.expect(worst < 1e-9, "max oracle difference " + fmt("%.3g", worst));
  const auto row = [](std::vector<double> v) {
    const std::size_t n = v.size();
    return DepthMap(n, 1, std::move(v), DepthRole::kGroundTruth);
  };
  const ImageMetrics ex = compute_metrics(row({1.0, 2.0, 3.0}), row({1.0, 2.0, 5.0}));
  o.expect(std::abs(ex.rmse - std::sqrt(4.0 / 3.0)) < 1e-9, "worked rmse " + fmt("%.12f", ex.rmse));
  o.expect(std::abs(ex.rel - 0.4 / 3.0) < 1e-9, "worked rel " + fmt("%.12f", ex.rel));
  if (o.pass) {
    o.detail = "100 pairs, max difference " + fmt("%.2e", worst) + ", worked rmse " + fmt("%.9f", ex.rmse) + " rel " +
               fmt("%.9f", ex.rel);
  }
  return o;
}

// ---- 6 ----

Outcome loss_arithmetic() {
  Outcome o;
  const std::vector<DepthMap> gt{DepthMap(2, 1, {1.0, 2.0}, DepthRole::kGroundTruth)};
  const Tensor off = Tensor::from({1, 1, 1, 2}, {1.1, 2.1});
  const Tensor zero = Tensor::zeros({1, 1, 1, 1});
  const LossWeights weights;  // lambda_g 0.5, lambda_l 1, lambda_pred 10
  const double total = overall_loss(off, off, off, gt, zero, zero, weights).total.item();
  o.expect(std::abs(total - 1.15) < 1e-12, "L_total " + fmt("%.17g", total));

  Rng rng(66);
  for (int i = 0; i < 1000; ++i) {
    const Shape s{1 + rng.index(3), 1, 1 + rng.index(5), 1 + rng.index(5)};
    const Tensor a = testing::random_tensor(rng, s, -10.0, 10.0), b = testing::random_tensor(rng, s, -10.0, 10.0);
    if (wgan_d_loss(a, b).item() != -wgan_d_loss(b, a).item()) o.fail("wgan_d_loss not antisymmetric");
  }
  if (o.pass) o.detail = "L_total " + fmt("%.15f", total) + ", antisymmetry exact on 1000 pairs";
  return o;
}

// ---- 7 ----

Outcome training_trend() {
  Outcome o;
  const auto t0 = Clock::now();
  std::ostringstream summary;
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainConfig config;
    config.seed = seed;
    TrainHooks hooks;
    double worst_weight = 0.0;
    std::size_t critic_steps = 0;
    hooks.on_critic_step = [&](const NetworkBundle& net, std::uint64_t, std::size_t) {
      ++critic_steps;
      for (const auto& p : net.critic_parameters()) {
        for (double w : p.tensor.data()) worst_weight = std::max(worst_weight, std::abs(w));
      }
    };
    const TrainResult r = train(config, MaskPolicy{}, hooks);
    const double first = r.evals.front().metrics.rmse, last = r.evals.back().metrics.rmse;
    const std::string tag = "seed " + std::to_string(seed);
    o.expect(r.evals.front().step == 0 && r.evals.back().step == config.steps, tag + ": missing evaluations");
    o.expect(last <= 0.5 * first, tag + ": rmse " + fmt("%.4f", first) + " -> " + fmt("%.4f", last));
    o.expect(worst_weight <= config.clip, tag + ": critic weight " + fmt("%.3g", worst_weight));
    o.expect(critic_steps == config.steps * config.n_critic, tag + ": critic step count");
    summary << "seed " << seed << " " << fmt("%.3f", first) << "->" << fmt("%.3f", last) << " ("
            << fmt("%.2f", last / first) << "); ";
  }
  const double secs = seconds_since(t0);
  o.expect(secs < 600.0, "runtime " + fmt("%.0f s", secs));
  if (o.pass) o.detail = summary.str() + "clip held; " + fmt("%.0f s", secs);
  return o;
}

// ---- 8 ----

Outcome plane_projection() {
  Outcome o;
  Rng rng(88);
  double worst_ratio = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    DepthPlanes planes;
    if (trial % 2 == 0) {
      planes = DepthPlanes::uniform(0.5, 10.0, 2 + rng.index(63));
    } else {
      // Uneven spacing.
      double d = rng.uniform(0.2, 1.0);
      const std::size_t count = 2 + rng.index(40);
      for (std::size_t i = 0; i < count; ++i) {
        planes.depths.push_back(d);
        d += rng.uniform(0.01, 0.8);
      }
    }
    const double lo = planes.depths.front(), hi = planes.depths.back();
    const std::size_t w = 8 + rng.index(25), h = 8 + rng.index(25);
    std::vector<double> v(w * h);
    for (double& x : v) x = rng.bernoulli(0.1) ? 0.0 : rng.uniform(lo, hi);
    const DepthMap d(w, h, v, DepthRole::kGroundTruth);
    const LabelMap labels = depth_plane_project(d, planes);
    const DepthMap back = plane_reconstruct(labels, planes);
    const double half = planes.max_gap() / 2.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (back.valid(i) != d.valid(i)) o.fail("validity changed by the round trip");
      if (d.valid(i)) worst_ratio = std::max(worst_ratio, std::abs(back[i] - d[i]) / half);
    }
    if (depth_plane_project(back, planes).labels != labels.labels) o.fail("projection not idempotent");
  }
  o.expect(worst_ratio <= 1.0 + 1e-12, "error " + fmt("%.6f", worst_ratio) + " of half the max gap");
  if (o.pass) o.detail = "100 maps, worst error " + fmt("%.4f", worst_ratio) + " of half gap, idempotent";
  return o;
}

// ---- 9 ----

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

Outcome reproducibility() {
  Outcome o;
  const testing::TempDir a("accept_a"), b("accept_b");
  std::ostringstream sink;
  for (const fs::path& dir : {a.path(), b.path()}) {
    const int code = cli::run({"depthfuse", "--seed", "7", "--out-dir", dir.string(), "train", "--steps", "20",
                               "--eval-every", "10"},
                              sink, sink);
    o.expect(code == 0, "train exited with " + std::to_string(code) + ": " + sink.str());
  }
  if (!o.pass) return o;
  for (const char* name : {kTrainLogName, kEvalLogName, kCheckpointName}) {
    const std::string x = slurp(a / name), y = slurp(b / name);
    o.expect(!x.empty(), std::string(name) + " is empty");
    o.expect(x == y, std::string(name) + " differs between runs");
  }
  if (o.pass) o.detail = "two 20-step runs: logs and checkpoint byte-identical";
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradcheck suite", gradcheck_suite},
      {"confidence fusion algebra", confidence_fusion},
      {"w_adain reduces to adain", wadain_reduction},
      {"pseudo-mask laws", pseudo_mask_laws},
      {"metric oracle", metric_oracle},
      {"loss arithmetic", loss_arithmetic},
      {"training trend", training_trend},
      {"depth-plane projection", plane_projection},
      {"reproducibility", reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.fail(std::string("exception: ") + e.what());
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
