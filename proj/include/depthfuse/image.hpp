#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace depthfuse {

enum class DepthRole { kRaw, kGroundTruth, kPseudo, kPredicted, kLocal, kFused };

std::string_view to_string(DepthRole role);

/// Largest depth a map may hold, in meters.
inline constexpr double kMaxDepthMeters = 655.35;

/// Depth in meters with validity encoded as value == 0.
///
/// A pixel is valid iff its value is non-zero, so the mask can never drift
/// from the values. Valid values lie in (0, 655.35].
class DepthMap {
 public:
  DepthMap() = default;
  DepthMap(std::size_t width, std::size_t height, DepthRole role = DepthRole::kRaw);
  /// Throws RangeError on a negative, non-finite or too-large value.
  DepthMap(std::size_t width, std::size_t height, std::vector<double> values, DepthRole role);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return values_.size(); }
  DepthRole role() const { return role_; }
  void set_role(DepthRole role) { role_ = role; }

  double operator[](std::size_t i) const { return values_[i]; }
  double at(std::size_t x, std::size_t y) const { return values_[y * width_ + x]; }
  bool valid(std::size_t i) const { return values_[i] != 0.0; }
  bool valid(std::size_t x, std::size_t y) const { return valid(y * width_ + x); }

  /// Sets a pixel; 0 marks it invalid. Throws RangeError like the constructor.
  void set(std::size_t i, double meters);
  void invalidate(std::size_t i) { values_[i] = 0.0; }

  const std::vector<double>& values() const { return values_; }
  std::size_t valid_count() const;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<double> values_;
  DepthRole role_ = DepthRole::kRaw;
};

/// 8-bit RGB, interleaved.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), data(3 * w * h, 0) {}

  std::size_t pixels() const { return width * height; }
  std::array<std::uint8_t, 3> pixel(std::size_t i) const { return {data[3 * i], data[3 * i + 1], data[3 * i + 2]}; }
  void set_pixel(std::size_t i, std::array<std::uint8_t, 3> rgb) {
    data[3 * i] = rgb[0];
    data[3 * i + 1] = rgb[1];
    data[3 * i + 2] = rgb[2];
  }
};

enum class LabelSemantics { kSemanticClass, kSegmentId };

/// Integer label image. In semantic mode 0 is background/unlabeled.
struct LabelMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint32_t> labels;
  LabelSemantics semantics = LabelSemantics::kSemanticClass;

  LabelMap() = default;
  LabelMap(std::size_t w, std::size_t h, LabelSemantics s = LabelSemantics::kSemanticClass)
      : width(w), height(h), labels(w * h, 0), semantics(s) {}

  std::size_t pixels() const { return width * height; }
  std::uint32_t operator[](std::size_t i) const { return labels[i]; }
  std::uint32_t max_label() const;
};

/// true = remove this depth pixel.
struct PixelMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;

  PixelMask() = default;
  PixelMask(std::size_t w, std::size_t h) : width(w), height(h), bits(w * h, 0) {}

  std::size_t pixels() const { return width * height; }
  bool operator[](std::size_t i) const { return bits[i] != 0; }
  void set(std::size_t i, bool on = true) { bits[i] = on ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  /// In-place union. Throws DimensionError on size mismatch.
  PixelMask& operator|=(const PixelMask& other);
};

/// Copy of `depth` with every masked pixel invalidated.
DepthMap apply_mask(const DepthMap& depth, const PixelMask& mask, DepthRole role);

}  // namespace depthfuse
