#include <algorithm>
#include <cmath>

#include "pbl/error.hpp"
#include "pbl/sensor_model.hpp"

namespace pbl {
namespace {

template <typename Pred>
Grid<std::uint8_t> fraction_mask(std::span<const RangeImage> frames, double threshold,
                                 Pred hit) {
  if (frames.empty()) throw ConfigError("mask: at least one frame required");
  const int h = frames.front().height;
  const int w = frames.front().width;
  Grid<int> counts(h, w, 0);
  for (const auto& f : frames) {
    if (f.height != h || f.width != w) throw ConfigError("mask: frames differ in size");
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        if (hit(f, i, j)) ++counts(i, j);
  }
  const double n = static_cast<double>(frames.size());
  Grid<std::uint8_t> mask(h, w, 0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      mask(i, j) = static_cast<double>(counts(i, j)) / n >= threshold ? 1 : 0;
  return mask;
}

}  // namespace

Grid<std::uint8_t> build_drop_mask(std::span<const RangeImage> frames, double threshold) {
  return fraction_mask(frames, threshold,
                       [](const RangeImage& f, int i, int j) { return f.valid(i, j) == 0; });
}

Grid<std::uint8_t> build_intensity_mask(std::span<const RangeImage> frames, double threshold) {
  return fraction_mask(frames, threshold, [](const RangeImage& f, int i, int j) {
    return f.valid(i, j) != 0 && f.intensity(i, j) == 0.0;
  });
}

std::vector<StatsBin> analyze_statistics(std::span<const StatsFrame> frames,
                                         std::span<const double> distance_edges,
                                         std::span<const double> angle_edges) {
  if (distance_edges.size() < 2 || angle_edges.size() < 2)
    throw ConfigError("analyze_statistics: need at least two edges per axis");
  if (!std::is_sorted(distance_edges.begin(), distance_edges.end()) ||
      !std::is_sorted(angle_edges.begin(), angle_edges.end()))
    throw ConfigError("analyze_statistics: bin edges must ascend");

  const std::size_t nd = distance_edges.size() - 1;
  const std::size_t na = angle_edges.size() - 1;
  struct Acc {
    std::size_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;
  };
  std::vector<Acc> acc(nd * na);

  auto bin_of = [](std::span<const double> edges, double x) -> std::ptrdiff_t {
    if (x < edges.front() || x > edges.back()) return -1;
    if (x == edges.back()) return static_cast<std::ptrdiff_t>(edges.size()) - 2;
    return std::upper_bound(edges.begin(), edges.end(), x) - edges.begin() - 1;
  };

  for (const auto& frame : frames) {
    if (!frame.image || !frame.cos_incidence) throw ConfigError("analyze_statistics: null frame");
    const auto& img = *frame.image;
    if (!frame.cos_incidence->same_shape(img.height, img.width))
      throw ConfigError("analyze_statistics: incidence image size mismatch");
    for (int i = 0; i < img.height; ++i) {
      for (int j = 0; j < img.width; ++j) {
        if (!img.valid(i, j)) continue;
        if (frame.exclude && !frame.exclude->empty() && (*frame.exclude)(i, j)) continue;
        const double angle = std::acos(std::clamp((*frame.cos_incidence)(i, j), 0.0, 1.0));
        const auto bd = bin_of(distance_edges, img.depth(i, j));
        const auto ba = bin_of(angle_edges, angle);
        if (bd < 0 || ba < 0) continue;
        auto& a = acc[static_cast<std::size_t>(bd) * na + static_cast<std::size_t>(ba)];
        const double x = img.intensity(i, j);
        ++a.n;
        const double delta = x - a.mean;
        a.mean += delta / static_cast<double>(a.n);
        a.m2 += delta * (x - a.mean);
      }
    }
  }

  std::vector<StatsBin> out;
  out.reserve(acc.size());
  for (std::size_t b = 0; b < nd; ++b) {
    for (std::size_t c = 0; c < na; ++c) {
      const auto& a = acc[b * na + c];
      StatsBin bin;
      bin.d_lo = distance_edges[b];
      bin.d_hi = distance_edges[b + 1];
      bin.angle_lo = angle_edges[c];
      bin.angle_hi = angle_edges[c + 1];
      bin.count = a.n;
      bin.mean = a.n ? a.mean : 0.0;
      bin.stddev = a.n ? std::sqrt(a.m2 / static_cast<double>(a.n)) : 0.0;
      out.push_back(bin);
    }
  }
  return out;
}

}  // namespace pbl
