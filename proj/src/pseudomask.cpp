#include "depthfuse/pseudomask.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>

#include "depthfuse/error.hpp"
#include "depthfuse/rng.hpp"

namespace depthfuse {

namespace {

// 4-neighbours of pixel p, written into `out`; returns the count.
std::size_t neighbours4(std::size_t p, std::size_t w, std::size_t h, std::array<std::size_t, 4>& out) {
  const std::size_t x = p % w, y = p / w;
  std::size_t n = 0;
  if (x > 0) out[n++] = p - 1;
  if (x + 1 < w) out[n++] = p + 1;
  if (y > 0) out[n++] = p - w;
  if (y + 1 < h) out[n++] = p + w;
  return n;
}

void dilate4(PixelMask& mask, int steps) {
  std::array<std::size_t, 4> nb{};
  for (int s = 0; s < steps; ++s) {
    const PixelMask before = mask;
    for (std::size_t p = 0; p < mask.pixels(); ++p) {
      if (before[p]) continue;
      const std::size_t n = neighbours4(p, mask.width, mask.height, nb);
      for (std::size_t i = 0; i < n; ++i) {
        if (before[nb[i]]) {
          mask.set(p);
          break;
        }
      }
    }
  }
}

// Clears 4-connected blobs smaller than `min_blob`.
void drop_small_blobs(PixelMask& mask, std::size_t min_blob) {
  std::vector<std::uint8_t> seen(mask.pixels(), 0);
  std::vector<std::size_t> blob, stack;
  std::array<std::size_t, 4> nb{};
  for (std::size_t start = 0; start < mask.pixels(); ++start) {
    if (!mask[start] || seen[start]) continue;
    blob.clear();
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      blob.push_back(p);
      const std::size_t n = neighbours4(p, mask.width, mask.height, nb);
      for (std::size_t i = 0; i < n; ++i) {
        if (mask[nb[i]] && !seen[nb[i]]) {
          seen[nb[i]] = 1;
          stack.push_back(nb[i]);
        }
      }
    }
    if (blob.size() < min_blob) {
      for (std::size_t p : blob) mask.set(p, false);
    }
  }
}

void require_same_size(std::size_t w1, std::size_t h1, std::size_t w2, std::size_t h2, const char* what) {
  if (w1 != w2 || h1 != h2) {
    throw DimensionError(std::string(what) + ": " + std::to_string(w1) + "x" + std::to_string(h1) + " vs " +
                         std::to_string(w2) + "x" + std::to_string(h2));
  }
}

double median_of(std::vector<double>& v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<long>(mid));
  return 0.5 * (lower + upper);
}

}  // namespace

// ---- highlight / black ----

bool is_highlight(std::array<std::uint8_t, 3> rgb, int value_threshold, double saturation_threshold) {
  const int hi = std::max({rgb[0], rgb[1], rgb[2]});
  const int lo = std::min({rgb[0], rgb[1], rgb[2]});
  const double saturation = hi == 0 ? 0.0 : static_cast<double>(hi - lo) / static_cast<double>(hi);
  return hi >= value_threshold && saturation <= saturation_threshold;
}

PixelMask highlight_mask(const RgbImage& rgb, const HighlightParams& params) {
  if (params.value_threshold < 0 || params.value_threshold > 255 || params.saturation_threshold < 0.0 ||
      params.saturation_threshold > 1.0 || params.dilate < 0) {
    throw ValidationError("highlight_mask: thresholds out of range");
  }
  PixelMask mask(rgb.width, rgb.height);
  for (std::size_t p = 0; p < rgb.pixels(); ++p) {
    mask.set(p, is_highlight(rgb.pixel(p), params.value_threshold, params.saturation_threshold));
  }
  drop_small_blobs(mask, params.min_blob);
  dilate4(mask, params.dilate);
  return mask;
}

bool is_black(std::array<std::uint8_t, 3> rgb) { return rgb[0] <= 5 && rgb[1] <= 5 && rgb[2] <= 5; }

PixelMask black_mask(const RgbImage& rgb, double p, std::uint64_t seed) {
  if (p < 0.0 || p > 1.0) throw ValidationError("black_mask: p must be in [0, 1]");
  Rng rng(seed);
  PixelMask mask(rgb.width, rgb.height);
  for (std::size_t i = 0; i < rgb.pixels(); ++i) {
    if (is_black(rgb.pixel(i)) && rng.bernoulli(p)) mask.set(i);
  }
  return mask;
}

// ---- segmentation noise ----

PixelMask segmentation_noise_mask(const LabelMap& segments, const DepthMap& depth, const SegmentNoiseParams& params,
                                  std::uint64_t seed) {
  require_same_size(segments.width, segments.height, depth.width(), depth.height(), "segmentation_noise_mask");
  if (params.relative_threshold < 0.0 || params.segment_dropout < 0.0 || params.segment_dropout > 1.0) {
    throw ValidationError("segmentation_noise_mask: parameters out of range");
  }
  std::map<std::uint32_t, std::vector<std::size_t>> members;
  for (std::size_t p = 0; p < segments.pixels(); ++p) members[segments[p]].push_back(p);

  Rng rng(seed);
  PixelMask mask(depth.width(), depth.height());
  std::vector<double> values;
  for (const auto& [label, pixels] : members) {
    // One draw per segment in ascending label order keeps the stream stable.
    if (rng.bernoulli(params.segment_dropout)) {
      for (std::size_t p : pixels) mask.set(p);
      continue;
    }
    values.clear();
    for (std::size_t p : pixels) {
      if (depth.valid(p)) values.push_back(depth[p]);
    }
    if (values.empty()) continue;
    const double med = median_of(values);
    for (std::size_t p : pixels) {
      if (depth.valid(p) && std::fabs(depth[p] - med) / med > params.relative_threshold) mask.set(p);
    }
  }
  return mask;
}

// ---- semantic ----

SemanticMaskResult semantic_mask(const LabelMap& semantics, std::uint64_t seed, std::size_t edge_width) {
  const std::size_t w = semantics.width, h = semantics.height;
  SemanticMaskResult result{PixelMask(w, h), {}, false};

  std::vector<std::uint32_t> objects;
  for (std::uint32_t l : semantics.labels) {
    if (l != 0) objects.push_back(l);
  }
  std::sort(objects.begin(), objects.end());
  objects.erase(std::unique(objects.begin(), objects.end()), objects.end());
  if (objects.empty()) {
    result.no_objects = true;
    return result;
  }

  Rng rng(seed);
  const std::size_t count = std::min<std::size_t>(1 + rng.index(2), objects.size());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.index(objects.size() - i);
    std::swap(objects[i], objects[j]);
    result.chosen_labels.push_back(objects[i]);
  }

  std::array<std::size_t, 4> nb{};
  for (std::uint32_t label : result.chosen_labels) {
    // band[p]: p belongs to `label` and lies within edge_width of its boundary.
    std::vector<std::uint8_t> band(w * h, 0);
    std::vector<std::size_t> frontier;
    for (std::size_t p = 0; p < w * h; ++p) {
      if (semantics[p] != label) continue;
      const std::size_t n = neighbours4(p, w, h, nb);
      for (std::size_t i = 0; i < n; ++i) {
        if (semantics[nb[i]] != label) {
          band[p] = 1;
          frontier.push_back(p);
          break;
        }
      }
    }
    for (std::size_t step = 1; step < edge_width; ++step) {
      std::vector<std::size_t> next;
      for (std::size_t p : frontier) {
        const std::size_t n = neighbours4(p, w, h, nb);
        for (std::size_t i = 0; i < n; ++i) {
          if (semantics[nb[i]] == label && !band[nb[i]]) {
            band[nb[i]] = 1;
            next.push_back(nb[i]);
          }
        }
      }
      frontier = std::move(next);
    }
    for (std::size_t p = 0; p < w * h; ++p) {
      if (semantics[p] == label && (edge_width == 0 || !band[p])) result.mask.set(p);
    }
  }
  return result;
}

PixelMask xor_mask(const LabelMap& predicted, const LabelMap& truth) {
  require_same_size(predicted.width, predicted.height, truth.width, truth.height, "xor_mask");
  PixelMask mask(truth.width, truth.height);
  for (std::size_t p = 0; p < truth.pixels(); ++p) mask.set(p, predicted[p] != truth[p]);
  return mask;
}

LabelMap degrade_segmentation(const LabelMap& truth, std::uint64_t seed, double strength) {
  if (strength < 0.0 || strength > 1.0) throw ValidationError("degrade_segmentation: strength must be in [0, 1]");
  LabelMap out = truth;
  if (strength == 0.0) return out;
  const std::size_t w = truth.width, h = truth.height;
  Rng rng(seed);
  std::array<std::size_t, 4> nb{};

  // Boundary jitter: each pass moves boundaries by at most one pixel.
  const int passes = std::max(1, static_cast<int>(std::lround(3.0 * strength)));
  for (int pass = 0; pass < passes; ++pass) {
    const std::vector<std::uint32_t> snapshot = out.labels;
    for (std::size_t p = 0; p < w * h; ++p) {
      const std::size_t n = neighbours4(p, w, h, nb);
      std::array<std::uint32_t, 4> other{};
      std::size_t m = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (snapshot[nb[i]] != snapshot[p]) other[m++] = snapshot[nb[i]];
      }
      if (m > 0 && rng.bernoulli(0.5 * strength)) out.labels[p] = other[rng.index(m)];
    }
  }

  // Small blobs of the neighbouring label, centred on ground-truth boundaries.
  std::vector<std::size_t> boundary;
  for (std::size_t p = 0; p < w * h; ++p) {
    const std::size_t n = neighbours4(p, w, h, nb);
    for (std::size_t i = 0; i < n; ++i) {
      if (truth[nb[i]] != truth[p]) {
        boundary.push_back(p);
        break;
      }
    }
  }
  const std::size_t blobs = static_cast<std::size_t>(std::lround(strength * static_cast<double>(boundary.size()) / 20.0));
  for (std::size_t b = 0; b < blobs && !boundary.empty(); ++b) {
    const std::size_t c = boundary[rng.index(boundary.size())];
    const std::size_t n = neighbours4(c, w, h, nb);
    std::uint32_t replacement = truth[c];
    for (std::size_t i = 0; i < n; ++i) {
      if (truth[nb[i]] != truth[c]) replacement = truth[nb[i]];
    }
    const long radius = 1 + static_cast<long>(rng.index(2));
    const long cx = static_cast<long>(c % w), cy = static_cast<long>(c / w);
    for (long dy = -radius; dy <= radius; ++dy) {
      for (long dx = -radius; dx <= radius; ++dx) {
        if (std::labs(dx) + std::labs(dy) > radius) continue;
        const long x = cx + dx, y = cy + dy;
        if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) continue;
        out.labels[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = replacement;
      }
    }
  }
  return out;
}

// ---- policy ----

std::string_view to_string(MaskMethod method) {
  switch (method) {
    case MaskMethod::kHighlight: return "highlight";
    case MaskMethod::kBlack: return "black";
    case MaskMethod::kGraphSegment: return "graph_segment";
    case MaskMethod::kSemantic: return "semantic";
    case MaskMethod::kSemanticXor: return "semantic_xor";
  }
  return "unknown";
}

void MaskPolicy::validate() const {
  for (double p : probability) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("mask policy: probabilities must be in [0, 1]");
  }
  if (!(black_probability >= 0.0 && black_probability <= 1.0)) {
    throw ValidationError("mask policy: black_probability must be in [0, 1]");
  }
  if (highlight.value_threshold < 0 || highlight.value_threshold > 255) {
    throw ValidationError("mask policy: highlight value_threshold must be in [0, 255]");
  }
  if (!(highlight.saturation_threshold >= 0.0 && highlight.saturation_threshold <= 1.0)) {
    throw ValidationError("mask policy: highlight saturation_threshold must be in [0, 1]");
  }
  if (highlight.dilate < 0) throw ValidationError("mask policy: highlight dilate must be >= 0");
  if (!(felzenszwalb_k > 0.0) || felzenszwalb_min_size < 1) {
    throw ValidationError("mask policy: felzenszwalb k must be > 0 and min_size >= 1");
  }
  if (!(segment_noise.relative_threshold >= 0.0) ||
      !(segment_noise.segment_dropout >= 0.0 && segment_noise.segment_dropout <= 1.0)) {
    throw ValidationError("mask policy: segment noise parameters out of range");
  }
  if (!(degrade_strength >= 0.0 && degrade_strength <= 1.0)) {
    throw ValidationError("mask policy: degrade_strength must be in [0, 1]");
  }
}

std::string MaskPolicy::to_json() const {
  nlohmann::json j;
  for (std::size_t m = 0; m < kMaskMethodCount; ++m) {
    j["probability"][std::string(to_string(static_cast<MaskMethod>(m)))] = probability[m];
  }
  j["highlight"] = {{"value_threshold", highlight.value_threshold},
                    {"saturation_threshold", highlight.saturation_threshold},
                    {"dilate", highlight.dilate},
                    {"min_blob", highlight.min_blob}};
  j["black_probability"] = black_probability;
  j["felzenszwalb"] = {{"k", felzenszwalb_k}, {"min_size", felzenszwalb_min_size}};
  j["segment_noise"] = {{"relative_threshold", segment_noise.relative_threshold},
                        {"segment_dropout", segment_noise.segment_dropout}};
  j["edge_width"] = edge_width;
  j["degrade_strength"] = degrade_strength;
  j["seed"] = seed;
  return j.dump(2);
}

MaskPolicy MaskPolicy::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("mask policy is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("mask policy must be a JSON object");
  MaskPolicy p;
  auto check_keys = [](const nlohmann::json& obj, std::initializer_list<const char*> keys, const char* where) {
    for (const auto& [k, v] : obj.items()) {
      (void)v;
      if (std::none_of(keys.begin(), keys.end(), [&](const char* s) { return k == s; })) {
        throw ValidationError(std::string("mask policy: unknown key '") + k + "' in " + where);
      }
    }
  };
  try {
    check_keys(j,
               {"probability", "highlight", "black_probability", "felzenszwalb", "segment_noise", "edge_width",
                "degrade_strength", "seed"},
               "policy");
    if (j.contains("probability")) {
      const auto& pr = j["probability"];
      check_keys(pr, {"highlight", "black", "graph_segment", "semantic", "semantic_xor"}, "probability");
      for (std::size_t m = 0; m < kMaskMethodCount; ++m) {
        const std::string key(to_string(static_cast<MaskMethod>(m)));
        if (pr.contains(key)) p.probability[m] = pr[key].get<double>();
      }
    }
    if (j.contains("highlight")) {
      const auto& hl = j["highlight"];
      check_keys(hl, {"value_threshold", "saturation_threshold", "dilate", "min_blob"}, "highlight");
      p.highlight.value_threshold = hl.value("value_threshold", p.highlight.value_threshold);
      p.highlight.saturation_threshold = hl.value("saturation_threshold", p.highlight.saturation_threshold);
      p.highlight.dilate = hl.value("dilate", p.highlight.dilate);
      p.highlight.min_blob = hl.value("min_blob", p.highlight.min_blob);
    }
    p.black_probability = j.value("black_probability", p.black_probability);
    if (j.contains("felzenszwalb")) {
      const auto& fz = j["felzenszwalb"];
      check_keys(fz, {"k", "min_size"}, "felzenszwalb");
      p.felzenszwalb_k = fz.value("k", p.felzenszwalb_k);
      p.felzenszwalb_min_size = fz.value("min_size", p.felzenszwalb_min_size);
    }
    if (j.contains("segment_noise")) {
      const auto& sn = j["segment_noise"];
      check_keys(sn, {"relative_threshold", "segment_dropout"}, "segment_noise");
      p.segment_noise.relative_threshold = sn.value("relative_threshold", p.segment_noise.relative_threshold);
      p.segment_noise.segment_dropout = sn.value("segment_dropout", p.segment_noise.segment_dropout);
    }
    p.edge_width = j.value("edge_width", p.edge_width);
    p.degrade_strength = j.value("degrade_strength", p.degrade_strength);
    p.seed = j.value("seed", p.seed);
  } catch (const nlohmann::json::type_error& e) {
    throw ValidationError(std::string("mask policy: wrong value type: ") + e.what());
  }
  p.validate();
  return p;
}

// ---- combination ----

PseudoResult make_pseudo(const DepthMap& raw, const RgbImage& rgb, const LabelMap* semantics,
                         const MaskPolicy& policy, const LabelMap* predicted_segmentation) {
  policy.validate();
  require_same_size(raw.width(), raw.height(), rgb.width, rgb.height, "make_pseudo");
  if (semantics) require_same_size(raw.width(), raw.height(), semantics->width, semantics->height, "make_pseudo");
  if (predicted_segmentation) {
    require_same_size(raw.width(), raw.height(), predicted_segmentation->width, predicted_segmentation->height,
                      "make_pseudo");
  }

  PseudoResult result;
  Rng pick(derive_seed(policy.seed, 0x5eed));
  bool any = false;
  for (int attempt = 0; attempt < 1000 && !any; ++attempt) {
    for (std::size_t m = 0; m < kMaskMethodCount; ++m) {
      result.enabled[m] = pick.bernoulli(policy.probability[m]);
      any = any || result.enabled[m];
    }
  }
  if (!any) {
    // Every probability is zero (or vanishingly small): force one method.
    result.enabled[pick.index(kMaskMethodCount)] = true;
  }

  result.mask = PixelMask(raw.width(), raw.height());
  auto method_seed = [&](MaskMethod m) { return derive_seed(policy.seed, static_cast<std::uint64_t>(m) + 1); };
  for (std::size_t m = 0; m < kMaskMethodCount; ++m) {
    if (!result.enabled[m]) continue;
    const auto method = static_cast<MaskMethod>(m);
    PixelMask part;
    switch (method) {
      case MaskMethod::kHighlight:
        part = highlight_mask(rgb, policy.highlight);
        break;
      case MaskMethod::kBlack:
        part = black_mask(rgb, policy.black_probability, method_seed(method));
        break;
      case MaskMethod::kGraphSegment: {
        const LabelMap seg = felzenszwalb_segment(rgb, policy.felzenszwalb_k, policy.felzenszwalb_min_size);
        part = segmentation_noise_mask(seg, raw, policy.segment_noise, method_seed(method));
        break;
      }
      case MaskMethod::kSemantic:
        if (!semantics) {
          result.skipped[m] = true;
          continue;
        }
        part = semantic_mask(*semantics, method_seed(method), policy.edge_width).mask;
        break;
      case MaskMethod::kSemanticXor:
        if (!semantics) {
          result.skipped[m] = true;
          continue;
        }
        part = predicted_segmentation
                   ? xor_mask(*predicted_segmentation, *semantics)
                   : xor_mask(degrade_segmentation(*semantics, method_seed(method), policy.degrade_strength),
                              *semantics);
        break;
    }
    result.method_pixels[m] = part.count();
    result.mask |= part;
  }
  result.pseudo = apply_mask(raw, result.mask, DepthRole::kPseudo);
  return result;
}

}  // namespace depthfuse
