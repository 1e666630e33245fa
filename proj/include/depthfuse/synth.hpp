#pragma once

#include <cstdint>

#include "depthfuse/image.hpp"

namespace depthfuse {

/// Procedural indoor-like RGB-D scene with semantics.
struct SyntheticScene {
  RgbImage rgb;
  DepthMap depth;  ///< ground truth, every pixel valid, in [0.5, 10] m
  LabelMap semantics;
};

/// Background is a sloped depth plane (far wall / floor); each object is a
/// non-overlapping axis-aligned rectangle nearer than the background behind
/// it, with its own flat color. Object colors sometimes come from a
/// near-white or near-black palette so highlight and dark masking have
/// something to find. `objects` is clamped to [1, 4]; fewer are placed when
/// the image is too small to fit them apart.
SyntheticScene synth_scene(std::uint64_t seed, std::size_t width, std::size_t height, int objects);

/// Object count drawn from [1, 4] by the scene seed.
SyntheticScene synth_scene(std::uint64_t seed, std::size_t width, std::size_t height);

}  // namespace depthfuse
