#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "depthfuse/image.hpp"

namespace depthfuse {

struct ManifestRecord {
  std::filesystem::path rgb;
  std::filesystem::path depth_raw;
  std::optional<std::filesystem::path> depth_gt;
  std::optional<std::filesystem::path> semantics;
};

/// JSON dataset listing:
/// {"items":[{"rgb":…,"depth_raw":…,"depth_gt":…,"semantics":…}], "split":"train"|"test"}.
/// Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::vector<ManifestRecord> items;
  std::string split = "train";
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
  }
};

/// Parses and validates a manifest. Every referenced file must exist and the
/// images of one record must share dimensions; all offenders are listed in
/// the ValidationError message.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes paths as given (relative paths stay relative).
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Visiting order: file order, or a seeded Fisher-Yates shuffle.
std::vector<std::size_t> iteration_order(const DatasetManifest& manifest, std::uint64_t seed, bool shuffle);

struct Sample {
  RgbImage rgb;
  DepthMap depth_raw;
  std::optional<DepthMap> depth_gt;
  std::optional<LabelMap> semantics;
};

Sample load_sample(const DatasetManifest& manifest, std::size_t index);

}  // namespace depthfuse
