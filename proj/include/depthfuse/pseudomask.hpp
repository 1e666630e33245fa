#pragma once

// Pseudo depth-map synthesis: five masking methods that remove depth pixels
// in the patterns real indoor sensors miss them, and their random union.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "depthfuse/image.hpp"

namespace depthfuse {

// ---- individual methods ----

struct HighlightParams {
  int value_threshold = 240;        ///< HSV value, 0..255
  double saturation_threshold = 0.10;
  int dilate = 1;                   ///< 4-connected dilation steps
  std::size_t min_blob = 4;         ///< blobs smaller than this are noise
};

/// HSV test for a single pixel: value >= v_thr and saturation <= s_thr.
bool is_highlight(std::array<std::uint8_t, 3> rgb, int value_threshold, double saturation_threshold);

/// Bright, unsaturated regions (specular highlights). Blobs below
/// `min_blob` pixels are discarded before dilation.
PixelMask highlight_mask(const RgbImage& rgb, const HighlightParams& params = {});

/// Pixels whose three channels are all in [0, 5].
bool is_black(std::array<std::uint8_t, 3> rgb);

/// Each dark pixel is removed independently with probability `p`.
PixelMask black_mask(const RgbImage& rgb, double p, std::uint64_t seed);

/// Graph-based segmentation on the 4-connected pixel grid with Euclidean RGB
/// edge weights. Two components merge across an edge of weight w when
/// w <= min(Int(C1) + k/|C1|, Int(C2) + k/|C2|); edges are visited in
/// ascending weight order (ties in raster order, right edge before down
/// edge). A second pass merges components smaller than `min_size` along the
/// same edge order. Segment ids are contiguous from 1 in raster order.
LabelMap felzenszwalb_segment(const RgbImage& rgb, double k = 300.0, std::size_t min_size = 20);

struct SegmentNoiseParams {
  double relative_threshold = 0.05;
  double segment_dropout = 0.15;
};

/// Within each segment, removes valid depth deviating from the segment
/// median by more than `relative_threshold` (relative to the median), and
/// drops whole segments with probability `segment_dropout`.
PixelMask segmentation_noise_mask(const LabelMap& segments, const DepthMap& depth,
                                  const SegmentNoiseParams& params, std::uint64_t seed);

struct SemanticMaskResult {
  PixelMask mask;
  std::vector<std::uint32_t> chosen_labels;
  /// Set when the label map has no non-background object.
  bool no_objects = false;
};

/// Picks one or two objects uniformly and removes their interiors, keeping a
/// boundary band `edge_width` pixels wide. Boundary pixels are those
/// 4-adjacent to a different label; the image border does not count.
SemanticMaskResult semantic_mask(const LabelMap& semantics, std::uint64_t seed, std::size_t edge_width = 1);

/// mask[p] = (predicted[p] != truth[p]).
PixelMask xor_mask(const LabelMap& predicted, const LabelMap& truth);

/// Imitates an imperfect segmenter: boundary jitter plus small relabeled
/// blobs seeded on object boundaries. strength 0 returns the input.
LabelMap degrade_segmentation(const LabelMap& truth, std::uint64_t seed, double strength = 0.3);

// ---- combination ----

enum class MaskMethod : std::size_t { kHighlight = 0, kBlack, kGraphSegment, kSemantic, kSemanticXor };
inline constexpr std::size_t kMaskMethodCount = 5;
std::string_view to_string(MaskMethod method);

struct MaskPolicy {
  /// Enable probability per method, indexed by MaskMethod.
  std::array<double, kMaskMethodCount> probability{0.5, 0.5, 0.5, 0.5, 0.5};
  HighlightParams highlight;
  double black_probability = 0.5;
  double felzenszwalb_k = 300.0;
  std::size_t felzenszwalb_min_size = 20;
  SegmentNoiseParams segment_noise;
  std::size_t edge_width = 1;
  double degrade_strength = 0.3;
  std::uint64_t seed = 0;

  /// Throws ValidationError on out-of-range fields.
  void validate() const;
  std::string to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static MaskPolicy from_json(std::string_view text);
};

struct PseudoResult {
  DepthMap pseudo;
  PixelMask mask;
  std::array<bool, kMaskMethodCount> enabled{};
  /// Methods enabled but not run because their input was absent.
  std::array<bool, kMaskMethodCount> skipped{};
  std::array<std::size_t, kMaskMethodCount> method_pixels{};
};

/// Draws which methods run (each with its policy probability, redrawing if
/// none is picked), unions their masks and removes those pixels from
/// `raw`. Semantic methods are skipped when `semantics` is null. The XOR
/// method uses `predicted_segmentation` when given, otherwise a degraded
/// copy of `semantics`.
PseudoResult make_pseudo(const DepthMap& raw, const RgbImage& rgb, const LabelMap* semantics,
                         const MaskPolicy& policy, const LabelMap* predicted_segmentation = nullptr);

}  // namespace depthfuse
