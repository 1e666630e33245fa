#include "depthfuse/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "depthfuse/error.hpp"

namespace depthfuse {

std::string_view to_string(DepthRole role) {
  switch (role) {
    case DepthRole::kRaw: return "raw";
    case DepthRole::kGroundTruth: return "ground_truth";
    case DepthRole::kPseudo: return "pseudo";
    case DepthRole::kPredicted: return "predicted";
    case DepthRole::kLocal: return "local";
    case DepthRole::kFused: return "fused";
  }
  return "unknown";
}

namespace {

void check_depth_value(double v) {
  if (!std::isfinite(v) || v < 0.0 || v > kMaxDepthMeters) {
    throw RangeError("depth value " + std::to_string(v) + " m outside [0, 655.35]");
  }
}

}  // namespace

DepthMap::DepthMap(std::size_t width, std::size_t height, DepthRole role)
    : width_(width), height_(height), values_(width * height, 0.0), role_(role) {
  if (width == 0 || height == 0) throw DimensionError("depth map extents must be >= 1");
}

DepthMap::DepthMap(std::size_t width, std::size_t height, std::vector<double> values, DepthRole role)
    : width_(width), height_(height), values_(std::move(values)), role_(role) {
  if (width == 0 || height == 0) throw DimensionError("depth map extents must be >= 1");
  if (values_.size() != width * height) {
    throw DimensionError("depth map " + std::to_string(width) + "x" + std::to_string(height) + " given " +
                         std::to_string(values_.size()) + " values");
  }
  for (double v : values_) check_depth_value(v);
}

void DepthMap::set(std::size_t i, double meters) {
  check_depth_value(meters);
  values_[i] = meters;
}

std::size_t DepthMap::valid_count() const {
  return static_cast<std::size_t>(std::count_if(values_.begin(), values_.end(), [](double v) { return v != 0.0; }));
}

std::uint32_t LabelMap::max_label() const {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
}

std::size_t PixelMask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

PixelMask& PixelMask::operator|=(const PixelMask& other) {
  if (other.width != width || other.height != height) {
    throw DimensionError("mask union: size mismatch");
  }
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (bits[i] || other.bits[i]) ? 1 : 0;
  return *this;
}

DepthMap apply_mask(const DepthMap& depth, const PixelMask& mask, DepthRole role) {
  if (mask.width != depth.width() || mask.height != depth.height()) {
    throw DimensionError("mask does not match depth map dimensions");
  }
  DepthMap out = depth;
  out.set_role(role);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out.invalidate(i);
  }
  return out;
}

}  // namespace depthfuse
