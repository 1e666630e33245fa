#include <algorithm>
#include <cmath>
#include <numeric>

#include "depthfuse/error.hpp"
#include "depthfuse/pseudomask.hpp"

namespace depthfuse {

namespace {

struct Edge {
  std::size_t a;
  std::size_t b;
  double w;
};

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), size_(n, 1), internal_(n, 0.0) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  // Joins two roots; `w` becomes the merged component's internal difference.
  void join(std::size_t a, std::size_t b, double w) {
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    internal_[a] = w;
  }

  std::size_t size(std::size_t root) const { return size_[root]; }
  double internal(std::size_t root) const { return internal_[root]; }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> size_;
  std::vector<double> internal_;
};

double color_distance(const RgbImage& img, std::size_t p, std::size_t q) {
  double s = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const double d = static_cast<double>(img.data[3 * p + c]) - static_cast<double>(img.data[3 * q + c]);
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

LabelMap felzenszwalb_segment(const RgbImage& rgb, double k, std::size_t min_size) {
  if (!(k > 0.0)) throw ValidationError("felzenszwalb: k must be positive");
  if (min_size < 1) throw ValidationError("felzenszwalb: min_size must be >= 1");
  const std::size_t w = rgb.width, h = rgb.height, n = w * h;

  std::vector<Edge> edges;
  edges.reserve(2 * n);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      if (x + 1 < w) edges.push_back({p, p + 1, color_distance(rgb, p, p + 1)});
      if (y + 1 < h) edges.push_back({p, p + w, color_distance(rgb, p, p + w)});
    }
  }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) { return l.w < r.w; });

  DisjointSets sets(n);
  for (const Edge& e : edges) {
    const std::size_t a = sets.find(e.a), b = sets.find(e.b);
    if (a == b) continue;
    const double ta = sets.internal(a) + k / static_cast<double>(sets.size(a));
    const double tb = sets.internal(b) + k / static_cast<double>(sets.size(b));
    if (e.w <= std::min(ta, tb)) sets.join(a, b, e.w);
  }
  for (const Edge& e : edges) {
    const std::size_t a = sets.find(e.a), b = sets.find(e.b);
    if (a != b && (sets.size(a) < min_size || sets.size(b) < min_size)) sets.join(a, b, e.w);
  }

  LabelMap out(w, h, LabelSemantics::kSegmentId);
  std::vector<std::uint32_t> id_of_root(n, 0);
  std::uint32_t next = 1;
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t r = sets.find(p);
    if (id_of_root[r] == 0) id_of_root[r] = next++;
    out.labels[p] = id_of_root[r];
  }
  return out;
}

}  // namespace depthfuse
