#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "depthfuse/error.hpp"
#include "depthfuse/pseudomask.hpp"
#include "depthfuse/rng.hpp"
#include "depthfuse/synth.hpp"
#include "felzenszwalb_oracle.hpp"
#include "test_util.hpp"

using namespace depthfuse;
using depthfuse::testing::reference_segment;
using depthfuse::testing::same_partition;

namespace {

RgbImage solid(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> c) {
  RgbImage img(w, h);
  for (std::size_t p = 0; p < img.pixels(); ++p) img.set_pixel(p, c);
  return img;
}

// Chebyshev-free brute force: min Manhattan distance to a boundary pixel.
std::vector<std::size_t> distance_to_boundary(const LabelMap& l) {
  std::vector<std::size_t> boundary;
  for (std::size_t y = 0; y < l.height; ++y) {
    for (std::size_t x = 0; x < l.width; ++x) {
      const std::size_t p = y * l.width + x;
      const bool edge = (x > 0 && l[p - 1] != l[p]) || (x + 1 < l.width && l[p + 1] != l[p]) ||
                        (y > 0 && l[p - l.width] != l[p]) || (y + 1 < l.height && l[p + l.width] != l[p]);
      if (edge) boundary.push_back(p);
    }
  }
  std::vector<std::size_t> dist(l.pixels(), 1u << 30);
  for (std::size_t p = 0; p < l.pixels(); ++p) {
    for (std::size_t b : boundary) {
      const long dx = long(p % l.width) - long(b % l.width), dy = long(p / l.width) - long(b / l.width);
      dist[p] = std::min<std::size_t>(dist[p], std::size_t(std::labs(dx) + std::labs(dy)));
    }
  }
  return dist;
}

}  // namespace

TEST_CASE("highlight rule on single pixels") {
  CHECK(is_highlight({255, 255, 255}, 240, 0.10));
  CHECK_FALSE(is_highlight({255, 0, 0}, 240, 0.10));
  CHECK_FALSE(is_highlight({200, 200, 200}, 240, 0.10));
}

TEST_CASE("highlight mask keeps bright blobs, drops specks, dilates") {
  RgbImage img = solid(9, 9, {60, 80, 100});
  for (std::size_t y = 3; y < 6; ++y) {
    for (std::size_t x = 3; x < 6; ++x) img.set_pixel(y * 9 + x, {255, 255, 255});
  }
  img.set_pixel(0, {255, 255, 255});  // isolated speck
  HighlightParams params;
  params.dilate = 0;
  PixelMask m = highlight_mask(img, params);
  CHECK(m.count() == 9);
  CHECK_FALSE(m[0]);
  params.dilate = 1;
  CHECK(highlight_mask(img, params).count() == 9 + 12);
  CHECK(highlight_mask(solid(4, 4, {255, 0, 0})).empty());
}

TEST_CASE("black mask eligibility") {
  CHECK(is_black({3, 4, 5}));
  CHECK_FALSE(is_black({0, 0, 6}));

  Rng rng(2);
  RgbImage img(20, 20);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.bernoulli(0.5) ? rng.range(0, 5) : rng.range(0, 255));
  PixelMask all = black_mask(img, 1.0, 7);
  for (std::size_t p = 0; p < img.pixels(); ++p) CHECK(all[p] == is_black(img.pixel(p)));
  PixelMask half = black_mask(img, 0.5, 7);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    if (half[p]) CHECK(is_black(img.pixel(p)));
  }
  CHECK(half.count() < all.count());
  CHECK(black_mask(img, 0.5, 7).bits == half.bits);
  CHECK(black_mask(img, 0.0, 7).empty());
  CHECK_THROWS_AS(black_mask(img, 1.5, 7), ValidationError);
}

TEST_CASE("felzenszwalb reference cases") {
  LabelMap uniform = felzenszwalb_segment(solid(6, 5, {10, 20, 30}));
  CHECK(uniform.max_label() == 1);

  RgbImage halves = solid(8, 6, {0, 0, 0});
  for (std::size_t y = 0; y < 6; ++y) {
    for (std::size_t x = 4; x < 8; ++x) halves.set_pixel(y * 8 + x, {200, 0, 0});
  }
  LabelMap two = felzenszwalb_segment(halves, 50.0, 1);
  CHECK(two.max_label() == 2);
  CHECK(two[0] == 1);
  CHECK(two[7] == 2);

  CHECK(felzenszwalb_segment(solid(2, 1, {5, 5, 5}), 300, 1).max_label() == 1);
  CHECK_THROWS_AS(felzenszwalb_segment(halves, 0.0, 1), ValidationError);
}

TEST_CASE("felzenszwalb is a contiguous partition matching the brute-force reference") {
  const std::array<std::array<std::uint8_t, 3>, 3> palette{{{0, 0, 0}, {30, 40, 0}, {200, 10, 90}}};
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t w = 1 + rng.index(8), h = 1 + rng.index(8);
    const std::size_t colors = 1 + rng.index(3);
    RgbImage img(w, h);
    for (std::size_t p = 0; p < img.pixels(); ++p) img.set_pixel(p, palette[rng.index(colors)]);
    const double k = std::array<double, 4>{1.0, 50.0, 300.0, 5000.0}[rng.index(4)];
    const std::size_t min_size = std::array<std::size_t, 3>{1, 3, 20}[rng.index(3)];
    LabelMap seg = felzenszwalb_segment(img, k, min_size);
    INFO("trial " << trial);
    CHECK(same_partition(seg.labels, reference_segment(img, k, min_size)));
    // Contiguous ids in first-appearance order.
    std::uint32_t next = 1;
    for (std::uint32_t l : seg.labels) {
      CHECK(l >= 1);
      CHECK(l <= next);
      if (l == next) ++next;
    }
  }
}

TEST_CASE("segmentation noise mask") {
  LabelMap seg(3, 3, LabelSemantics::kSegmentId);
  std::fill(seg.labels.begin(), seg.labels.end(), 1u);
  SegmentNoiseParams params{0.05, 0.0};

  DepthMap flat(3, 3, std::vector<double>(9, 2.0), DepthRole::kRaw);
  CHECK(segmentation_noise_mask(seg, flat, params, 1).empty());

  std::vector<double> v(9, 2.0);
  v[4] = 3.0;
  PixelMask m = segmentation_noise_mask(seg, DepthMap(3, 3, v, DepthRole::kRaw), params, 1);
  CHECK(m.count() == 1);
  CHECK(m[4]);

  params.segment_dropout = 1.0;
  CHECK(segmentation_noise_mask(seg, flat, params, 1).count() == 9);
  CHECK_THROWS_AS(segmentation_noise_mask(LabelMap(2, 2), flat, params, 1), DimensionError);
}

TEST_CASE("semantic mask keeps a one-pixel boundary band") {
  LabelMap sem(20, 20);
  for (std::size_t y = 5; y < 15; ++y) {
    for (std::size_t x = 5; x < 15; ++x) sem.labels[y * 20 + x] = 3;
  }
  SemanticMaskResult r = semantic_mask(sem, 4, 1);
  CHECK_FALSE(r.no_objects);
  CHECK(r.chosen_labels == std::vector<std::uint32_t>{3});
  CHECK(r.mask.count() == 64);
  std::size_t kept = 0;
  for (std::size_t p = 0; p < sem.pixels(); ++p) kept += (sem[p] == 3 && !r.mask[p]);
  CHECK(kept == 36);

  CHECK(semantic_mask(sem, 4, 2).mask.count() == 36);

  SemanticMaskResult none = semantic_mask(LabelMap(5, 5), 1, 1);
  CHECK(none.no_objects);
  CHECK(none.mask.empty());
}

TEST_CASE("semantic mask picks one or two objects") {
  LabelMap sem(12, 4);
  for (std::size_t p = 0; p < sem.pixels(); ++p) sem.labels[p] = static_cast<std::uint32_t>((p % 12) / 3 + 1);
  std::set<std::size_t> counts;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto r = semantic_mask(sem, seed, 1);
    CHECK((r.chosen_labels.size() == 1 || r.chosen_labels.size() == 2));
    counts.insert(r.chosen_labels.size());
    if (r.chosen_labels.size() == 2) CHECK(r.chosen_labels[0] != r.chosen_labels[1]);
  }
  CHECK(counts == std::set<std::size_t>{1, 2});
}

TEST_CASE("xor mask") {
  LabelMap a(3, 2), b(3, 2);
  a.labels = {1, 2, 3, 4, 5, 6};
  b.labels = a.labels;
  CHECK(xor_mask(a, b).empty());
  b.labels[4] = 9;
  PixelMask one = xor_mask(a, b);
  CHECK(one.count() == 1);
  CHECK(one[4]);
  b.labels = {0, 0, 0, 0, 0, 0};
  CHECK(xor_mask(a, b).count() == 6);
  CHECK_THROWS_AS(xor_mask(a, LabelMap(2, 3)), DimensionError);
}

TEST_CASE("degraded segmentation disagrees near boundaries") {
  LabelMap gt(40, 30);
  for (std::size_t y = 5; y < 20; ++y) {
    for (std::size_t x = 4; x < 18; ++x) gt.labels[y * 40 + x] = 1;
  }
  for (std::size_t y = 8; y < 26; ++y) {
    for (std::size_t x = 22; x < 36; ++x) gt.labels[y * 40 + x] = 2;
  }
  CHECK(degrade_segmentation(gt, 5, 0.0).labels == gt.labels);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const double frac = double(xor_mask(degrade_segmentation(gt, seed, 1.0), gt).count()) / double(gt.pixels());
    CHECK(frac > 0.0);
    CHECK(frac <= 0.5);
  }

  const auto dist = distance_to_boundary(gt);
  std::size_t near = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PixelMask d = xor_mask(degrade_segmentation(gt, seed, 0.3), gt);
    for (std::size_t p = 0; p < d.pixels(); ++p) {
      if (!d[p]) continue;
      ++total;
      near += dist[p] <= 5;
    }
  }
  REQUIRE(total > 0);
  CHECK(double(near) / double(total) >= 0.8);
}

TEST_CASE("make_pseudo laws") {
  MaskPolicy policy;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    SyntheticScene s = synth_scene(seed, 32, 24);
    policy.seed = seed;
    PseudoResult r = make_pseudo(s.depth, s.rgb, &s.semantics, policy);
    CHECK(std::any_of(r.enabled.begin(), r.enabled.end(), [](bool b) { return b; }));
    for (std::size_t p = 0; p < s.depth.size(); ++p) {
      if (r.pseudo.valid(p)) CHECK(s.depth.valid(p));
      CHECK(r.pseudo.valid(p) == !r.mask[p]);
    }
    CHECK(r.pseudo.role() == DepthRole::kPseudo);
    PseudoResult again = make_pseudo(s.depth, s.rgb, &s.semantics, policy);
    CHECK(again.pseudo.values() == r.pseudo.values());
  }
}

TEST_CASE("make_pseudo resample guard and skipped semantics") {
  SyntheticScene s = synth_scene(3, 16, 12);
  MaskPolicy policy;
  policy.probability = {0, 0, 0, 0, 0};
  PseudoResult r = make_pseudo(s.depth, s.rgb, &s.semantics, policy);
  CHECK(std::count(r.enabled.begin(), r.enabled.end(), true) == 1);

  policy.probability = {0, 0, 0, 1, 1};
  PseudoResult no_sem = make_pseudo(s.depth, s.rgb, nullptr, policy);
  CHECK(no_sem.skipped[3]);
  CHECK(no_sem.skipped[4]);
  CHECK(no_sem.mask.empty());

  // A genuinely predicted segmentation feeds the XOR method directly.
  policy.probability = {0, 0, 0, 0, 1};
  LabelMap predicted = s.semantics;
  predicted.labels[0] = 77;
  PseudoResult x = make_pseudo(s.depth, s.rgb, &s.semantics, policy, &predicted);
  CHECK(x.mask.count() == 1);
}

TEST_CASE("mask policy JSON") {
  MaskPolicy p;
  p.probability[2] = 0.25;
  p.edge_width = 3;
  p.seed = 42;
  MaskPolicy back = MaskPolicy::from_json(p.to_json());
  CHECK(back.probability == p.probability);
  CHECK(back.edge_width == 3);
  CHECK(back.seed == 42);
  CHECK(MaskPolicy::from_json(R"({"probability":{"semantic":0}})").probability[3] == 0.0);
  CHECK_THROWS_AS(MaskPolicy::from_json(R"({"probability":{"semantic":2}})"), ValidationError);
  CHECK_THROWS_AS(MaskPolicy::from_json(R"({"bogus":1})"), ValidationError);
  CHECK_THROWS_AS(MaskPolicy::from_json("{"), FormatError);
}

TEST_CASE("synthetic scenes satisfy their construction rules") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    SyntheticScene s = synth_scene(seed, 64, 48);
    CHECK(s.depth.valid_count() == s.depth.size());
    for (std::size_t p = 0; p < s.depth.size(); ++p) {
      CHECK(s.depth[p] >= 0.5);
      CHECK(s.depth[p] <= 10.0);
    }
    CHECK(s.semantics.max_label() >= 1);
    CHECK(s.semantics.max_label() <= 4);
    SyntheticScene again = synth_scene(seed, 64, 48);
    CHECK(again.rgb.data == s.rgb.data);
    CHECK(again.depth.values() == s.depth.values());
  }
}
