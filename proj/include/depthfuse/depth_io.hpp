#pragma once

// PNG codecs for the RGB-D-semantics data model, plus the resize-and-crop
// preprocessing shared by every loader.
//
// Depth files are 16-bit grayscale PNGs in millimeters with 0 = invalid.
// Label files are 8- or 16-bit grayscale; masks are 8-bit with 255 = masked.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "depthfuse/image.hpp"

namespace depthfuse {

/// Largest value save_depth can encode (65535 mm).
inline constexpr double kMaxEncodableDepth = 65.535;

DepthMap load_depth(const std::filesystem::path& path, DepthRole role = DepthRole::kRaw);
/// Throws RangeError for values above 65.535 m or valid values that would
/// round to 0 mm.
void save_depth(const DepthMap& map, const std::filesystem::path& path);

RgbImage load_rgb(const std::filesystem::path& path);
void save_rgb(const RgbImage& image, const std::filesystem::path& path);

LabelMap load_labels(const std::filesystem::path& path,
                     LabelSemantics semantics = LabelSemantics::kSemanticClass);
/// Writes 8-bit when every label fits, 16-bit otherwise.
void save_labels(const LabelMap& labels, const std::filesystem::path& path);

void save_mask(const PixelMask& mask, const std::filesystem::path& path);
PixelMask load_mask(const std::filesystem::path& path);

/// 8-bit grayscale dump, row-major.
void save_gray8(std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels,
                const std::filesystem::path& path);

/// Width and height from the PNG header, without decoding pixels.
std::pair<std::size_t, std::size_t> png_dimensions(const std::filesystem::path& path);

enum class CropMode { kCenter, kRandom };

struct PreprocessOptions {
  std::size_t resize_width = 320;
  std::size_t resize_height = 240;
  std::size_t crop_width = 304;
  std::size_t crop_height = 228;
  CropMode mode = CropMode::kCenter;
  std::uint64_t seed = 0;
};

struct AlignedSample {
  RgbImage rgb;
  DepthMap depth;
  std::optional<LabelMap> labels;
  /// Top-left corner of the crop window in resized coordinates.
  std::size_t crop_x = 0;
  std::size_t crop_y = 0;
};

/// Resizes RGB bilinearly and depth/labels by nearest neighbour, then crops
/// all of them with one shared window.
AlignedSample resize_then_crop(const RgbImage& rgb, const DepthMap& depth, const LabelMap* labels,
                               const PreprocessOptions& options = {});

RgbImage resize_bilinear(const RgbImage& image, std::size_t width, std::size_t height);
DepthMap resize_nearest(const DepthMap& depth, std::size_t width, std::size_t height);
LabelMap resize_nearest(const LabelMap& labels, std::size_t width, std::size_t height);

}  // namespace depthfuse
