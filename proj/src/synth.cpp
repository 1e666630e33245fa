#include "depthfuse/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "depthfuse/error.hpp"
#include "depthfuse/rng.hpp"

namespace depthfuse {

namespace {

struct Rect {
  std::size_t x0, y0, x1, y1;  // half-open
  bool overlaps(const Rect& o) const {
    // One pixel of background is kept between objects so each stays a
    // separate connected region.
    return x0 <= o.x1 && o.x0 <= x1 && y0 <= o.y1 && o.y0 <= y1;
  }
};

std::array<std::uint8_t, 3> random_color(Rng& rng) {
  const double r = rng.uniform();
  if (r < 0.15) {
    const auto v = static_cast<std::uint8_t>(rng.range(245, 255));
    return {v, v, static_cast<std::uint8_t>(std::max(240, v - rng.range(0, 5)))};
  }
  if (r < 0.30) {
    return {static_cast<std::uint8_t>(rng.range(0, 5)), static_cast<std::uint8_t>(rng.range(0, 5)),
            static_cast<std::uint8_t>(rng.range(0, 5))};
  }
  return {static_cast<std::uint8_t>(rng.range(20, 230)), static_cast<std::uint8_t>(rng.range(20, 230)),
          static_cast<std::uint8_t>(rng.range(20, 230))};
}

int color_gap(const std::array<std::uint8_t, 3>& a, const std::array<std::uint8_t, 3>& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

}  // namespace

SyntheticScene synth_scene(std::uint64_t seed, std::size_t width, std::size_t height) {
  Rng rng(derive_seed(seed, 0xC0FFEE));
  return synth_scene(seed, width, height, rng.range(1, 4));
}

SyntheticScene synth_scene(std::uint64_t seed, std::size_t width, std::size_t height, int objects) {
  if (width < 4 || height < 4) throw DimensionError("synth_scene: image must be at least 4x4");
  objects = std::clamp(objects, 1, 4);
  Rng rng(seed);

  SyntheticScene scene{RgbImage(width, height), DepthMap(width, height, DepthRole::kGroundTruth),
                       LabelMap(width, height, LabelSemantics::kSemanticClass)};

  // Background plane: far at the top (wall), nearer toward the bottom (floor).
  const double far = rng.uniform(6.0, 9.5);
  const double near_drop = rng.uniform(1.0, 3.0);
  const double tilt = rng.uniform(-0.5, 0.5);
  std::vector<double> bg(width * height);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(height - 1);
      const double fx = static_cast<double>(x) / static_cast<double>(width - 1);
      bg[y * width + x] = std::clamp(far - near_drop * fy + tilt * (fx - 0.5), 0.5, 10.0);
    }
  }
  const std::array<std::uint8_t, 3> wall{static_cast<std::uint8_t>(rng.range(90, 160)),
                                         static_cast<std::uint8_t>(rng.range(90, 160)),
                                         static_cast<std::uint8_t>(rng.range(90, 160))};
  for (std::size_t p = 0; p < width * height; ++p) {
    scene.depth.set(p, bg[p]);
    scene.rgb.set_pixel(p, wall);
  }

  std::vector<Rect> placed;
  std::vector<std::array<std::uint8_t, 3>> colors{wall};
  for (int attempt = 0; attempt < 200 && static_cast<int>(placed.size()) < objects; ++attempt) {
    const std::size_t rw = std::max<std::size_t>(2, width / 6 + rng.index(std::max<std::size_t>(1, width / 3)));
    const std::size_t rh = std::max<std::size_t>(2, height / 6 + rng.index(std::max<std::size_t>(1, height / 3)));
    if (rw >= width || rh >= height) continue;
    Rect r{rng.index(width - rw + 1), rng.index(height - rh + 1), 0, 0};
    r.x1 = r.x0 + rw;
    r.y1 = r.y0 + rh;
    if (std::any_of(placed.begin(), placed.end(), [&](const Rect& o) { return o.overlaps(r); })) continue;

    std::array<std::uint8_t, 3> color = random_color(rng);
    for (int tries = 0; tries < 20; ++tries) {
      if (std::all_of(colors.begin(), colors.end(), [&](const auto& c) { return color_gap(c, color) >= 60; })) break;
      color = random_color(rng);
    }
    colors.push_back(color);

    double behind = 10.0;
    for (std::size_t y = r.y0; y < r.y1; ++y) {
      for (std::size_t x = r.x0; x < r.x1; ++x) behind = std::min(behind, bg[y * width + x]);
    }
    // Nearer than the closest background pixel it covers, optionally sloped.
    const double base = std::max(0.5, behind * rng.uniform(0.35, 0.8));
    const double slope = rng.bernoulli(0.5) ? rng.uniform(-0.3, 0.3) : 0.0;
    const auto label = static_cast<std::uint32_t>(placed.size() + 1);
    for (std::size_t y = r.y0; y < r.y1; ++y) {
      for (std::size_t x = r.x0; x < r.x1; ++x) {
        const std::size_t p = y * width + x;
        const double fx = static_cast<double>(x - r.x0) / static_cast<double>(rw);
        const double d = std::clamp(base + slope * fx, 0.5, behind - 0.1);
        scene.depth.set(p, std::max(0.5, d));
        scene.rgb.set_pixel(p, color);
        scene.semantics.labels[p] = label;
      }
    }
    placed.push_back(r);
  }
  return scene;
}

}  // namespace depthfuse
