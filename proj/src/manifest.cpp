#include "depthfuse/manifest.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "depthfuse/depth_io.hpp"
#include "depthfuse/error.hpp"
#include "depthfuse/rng.hpp"

namespace depthfuse {

using nlohmann::json;

namespace {

std::optional<std::filesystem::path> optional_path(const json& item, const char* key) {
  if (!item.contains(key) || item[key].is_null()) return std::nullopt;
  if (!item[key].is_string()) throw ValidationError(std::string("manifest field '") + key + "' must be a string");
  return std::filesystem::path(item[key].get<std::string>());
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("items") || !doc["items"].is_array()) {
    throw ValidationError("manifest '" + path.string() + "' must be an object with an \"items\" array");
  }

  DatasetManifest manifest;
  manifest.base_dir = path.parent_path();
  if (doc.contains("split")) {
    manifest.split = doc["split"].get<std::string>();
    if (manifest.split != "train" && manifest.split != "test") {
      throw ValidationError("manifest split must be \"train\" or \"test\", got \"" + manifest.split + "\"");
    }
  }
  for (const auto& item : doc["items"]) {
    ManifestRecord r;
    const auto rgb = optional_path(item, "rgb");
    const auto raw = optional_path(item, "depth_raw");
    if (!rgb || !raw) throw ValidationError("manifest item missing \"rgb\" or \"depth_raw\"");
    r.rgb = *rgb;
    r.depth_raw = *raw;
    r.depth_gt = optional_path(item, "depth_gt");
    r.semantics = optional_path(item, "semantics");
    manifest.items.push_back(std::move(r));
  }

  std::ostringstream problems;
  std::size_t problem_count = 0;
  for (std::size_t i = 0; i < manifest.items.size(); ++i) {
    const auto& r = manifest.items[i];
    std::vector<std::filesystem::path> files{r.rgb, r.depth_raw};
    if (r.depth_gt) files.push_back(*r.depth_gt);
    if (r.semantics) files.push_back(*r.semantics);
    std::optional<std::pair<std::size_t, std::size_t>> dims;
    for (const auto& f : files) {
      const auto full = manifest.resolve(f);
      if (!std::filesystem::exists(full)) {
        problems << "\n  item " << i << ": missing file '" << full.string() << "'";
        ++problem_count;
        continue;
      }
      std::pair<std::size_t, std::size_t> d;
      try {
        d = png_dimensions(full);
      } catch (const Error& e) {
        problems << "\n  item " << i << ": " << e.what();
        ++problem_count;
        continue;
      }
      if (dims && *dims != d) {
        problems << "\n  item " << i << ": '" << f.string() << "' is " << d.first << "x" << d.second
                 << ", expected " << dims->first << "x" << dims->second;
        ++problem_count;
      }
      if (!dims) dims = d;
    }
  }
  if (problem_count > 0) {
    throw ValidationError("manifest '" + path.string() + "' has " + std::to_string(problem_count) +
                          " problem(s):" + problems.str());
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  json doc;
  doc["split"] = manifest.split;
  doc["items"] = json::array();
  for (const auto& r : manifest.items) {
    json item;
    item["rgb"] = r.rgb.string();
    item["depth_raw"] = r.depth_raw.string();
    if (r.depth_gt) item["depth_gt"] = r.depth_gt->string();
    if (r.semantics) item["semantics"] = r.semantics->string();
    doc["items"].push_back(std::move(item));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest '" + path.string() + "'");
}

std::vector<std::size_t> iteration_order(const DatasetManifest& manifest, std::uint64_t seed, bool shuffle) {
  std::vector<std::size_t> order(manifest.items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle && order.size() > 1) {
    Rng rng(seed);
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  }
  return order;
}

Sample load_sample(const DatasetManifest& manifest, std::size_t index) {
  const auto& r = manifest.items.at(index);
  Sample s{load_rgb(manifest.resolve(r.rgb)), load_depth(manifest.resolve(r.depth_raw), DepthRole::kRaw),
           std::nullopt, std::nullopt};
  if (r.depth_gt) s.depth_gt = load_depth(manifest.resolve(*r.depth_gt), DepthRole::kGroundTruth);
  if (r.semantics) s.semantics = load_labels(manifest.resolve(*r.semantics));
  if (s.depth_raw.width() != s.rgb.width || s.depth_raw.height() != s.rgb.height) {
    throw ValidationError("item " + std::to_string(index) + ": RGB and depth dimensions differ");
  }
  return s;
}

}  // namespace depthfuse
