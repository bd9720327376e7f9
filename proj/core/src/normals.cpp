#include "pbl/normals.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "pbl/error.hpp"

namespace pbl {
namespace {

constexpr std::array<double, 3> kScharrSmooth{3.0, 10.0, 3.0};

int wrap(int j, int w) { return ((j % w) + w) % w; }

bool sample(const XyzImage& img, int i, int j, Eigen::Vector3d& out) {
  const int h = img.xyz.rows();
  const int w = img.xyz.cols();
  if (i < 0 || i >= h) return false;
  j = wrap(j, w);
  if (!img.valid(i, j)) return false;
  out = img.xyz(i, j);
  return true;
}

/// Central difference along one axis with one-sided fallback; false if neither
/// side is available.
bool difference(const XyzImage& img, int i0, int j0, int di, int dj, Eigen::Vector3d& out) {
  Eigen::Vector3d a, b, c;
  const bool ha = sample(img, i0 + di, j0 + dj, a);
  const bool hb = sample(img, i0 - di, j0 - dj, b);
  const bool hc = sample(img, i0, j0, c);
  if (ha && hb) {
    out = a - b;
  } else if (ha && hc) {
    out = 2.0 * (a - c);
  } else if (hb && hc) {
    out = 2.0 * (c - b);
  } else {
    return false;
  }
  return true;
}

Eigen::Vector3d pixel_direction(int i, int j, const SensorIntrinsics& intr) {
  return ray_from_pixel(i, j, intr).direction;
}

}  // namespace

XyzImage XyzImage::from_range(const RangeImage& img, const SensorIntrinsics& intr) {
  if (img.width != intr.width || img.height != intr.height)
    throw ConfigError("xyz image: size does not match intrinsics");
  XyzImage out;
  out.xyz = Grid<Eigen::Vector3d>(img.height, img.width, Eigen::Vector3d::Zero());
  out.valid = Grid<std::uint8_t>(img.height, img.width, 0);
  for (int i = 0; i < img.height; ++i) {
    for (int j = 0; j < img.width; ++j) {
      if (!img.valid(i, j)) continue;
      const Ray r = ray_from_pixel(i, j, intr);
      out.xyz(i, j) = r.origin + img.depth(i, j) * r.direction;
      out.valid(i, j) = 1;
    }
  }
  return out;
}

NormalImage estimate_normals(const XyzImage& img, const SensorIntrinsics& intr) {
  const int h = img.xyz.rows();
  const int w = img.xyz.cols();
  if (h != intr.height || w != intr.width)
    throw ConfigError("estimate_normals: size does not match intrinsics");

  NormalImage out;
  out.normal = Grid<Eigen::Vector3d>(h, w, Eigen::Vector3d::Zero());
  out.cos_incidence = Grid<double>(h, w, 0.0);
  out.valid = Grid<std::uint8_t>(h, w, 0);
  out.edge_flags = Grid<EdgeFlag>(h, w, EdgeFlag::kNone);
  out.points = img.xyz;

  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!img.valid(i, j)) continue;
      Eigen::Vector3d gx = Eigen::Vector3d::Zero();
      Eigen::Vector3d gy = Eigen::Vector3d::Zero();
      bool any_x = false;
      bool any_y = false;
      for (int k = -1; k <= 1; ++k) {
        const double weight = kScharrSmooth[static_cast<std::size_t>(k + 1)];
        Eigen::Vector3d d;
        if (difference(img, i + k, j, 0, 1, d)) {
          gx += weight * d;
          any_x = true;
        }
        if (difference(img, i, j + k, 1, 0, d)) {
          gy += weight * d;
          any_y = true;
        }
      }
      if (!any_x || !any_y) continue;
      Eigen::Vector3d n = gx.cross(gy);
      const double len = n.norm();
      if (!(len > 0.0) || !std::isfinite(len)) continue;
      n /= len;
      const Eigen::Vector3d dir = pixel_direction(i, j, intr);
      if (n.dot(dir) > 0.0) n = -n;
      out.normal(i, j) = n;
      out.cos_incidence(i, j) = std::clamp(-n.dot(dir), 0.0, 1.0);
      out.valid(i, j) = 1;
    }
  }
  return out;
}

NormalImage repair_edges(const NormalImage& nimg, const Grid<double>& depth,
                         const RepairConfig& config, const SensorIntrinsics& intr) {
  const int h = nimg.normal.rows();
  const int w = nimg.normal.cols();
  if (!depth.same_shape(h, w)) throw ConfigError("repair_edges: depth size mismatch");
  NormalImage out = nimg;

  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double dc = depth(i, j);
      if (!(dc > 0.0)) continue;
      double jump = 0.0;
      const std::array<std::pair<int, int>, 4> nbrs{{{i - 1, j}, {i + 1, j}, {i, wrap(j - 1, w)},
                                                     {i, wrap(j + 1, w)}}};
      for (auto [ni, nj] : nbrs) {
        if (ni < 0 || ni >= h) continue;
        const double dn = depth(ni, nj);
        if (!(dn > 0.0)) continue;
        jump = std::max(jump, std::abs(dn - dc) / dc);
      }
      if (jump > config.edge_threshold) out.edge_flags(i, j) = EdgeFlag::kStrongEdge;
    }
  }

  const double cos_limit = std::cos(config.artifact_angle);
  for (int pass = 0; pass < h; ++pass) {
    const Grid<Eigen::Vector3d> snapshot = out.normal;
    bool changed = false;
    for (int i = 1; i + 1 < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (!out.valid(i, j) || out.edge_flags(i, j) != EdgeFlag::kNone) continue;
        if (!out.valid(i - 1, j) || !out.valid(i + 1, j)) continue;
        if (out.edge_flags(i - 1, j) == EdgeFlag::kStrongEdge ||
            out.edge_flags(i + 1, j) == EdgeFlag::kStrongEdge)
          continue;
        // A crease between two faces is not an artifact: the neighbors must agree.
        if (snapshot(i - 1, j).dot(snapshot(i + 1, j)) < cos_limit) continue;
        Eigen::Vector3d avg = snapshot(i - 1, j) + snapshot(i + 1, j);
        const double len = avg.norm();
        if (!(len > 0.0)) continue;
        avg /= len;
        if (snapshot(i, j).dot(avg) >= cos_limit) continue;

        const Eigen::Vector3d& a = out.points(i - 1, j);
        const Eigen::Vector3d& b = out.points(i + 1, j);
        const Eigen::Vector3d& p = out.points(i, j);
        const Eigen::Vector3d chord = b - a;
        const double chord_len = chord.norm();
        const double off_chord =
            chord_len > 0.0 ? (p - a).cross(chord).norm() / chord_len : (p - a).norm();
        if (off_chord >= config.artifact_flatness) continue;

        const Eigen::Vector3d dir = pixel_direction(i, j, intr);
        if (avg.dot(dir) > 0.0) avg = -avg;
        out.normal(i, j) = avg;
        out.cos_incidence(i, j) = std::clamp(-avg.dot(dir), 0.0, 1.0);
        out.edge_flags(i, j) = EdgeFlag::kHorizontalArtifact;
        changed = true;
      }
    }
    if (!changed) break;
  }

  const double sin_crease = std::sin(config.crease_angle);
  Grid<EdgeFlag> flags = out.edge_flags;
  for (int i = 0; i < h && config.crease_angle > 0.0; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!out.valid(i, j) || out.edge_flags(i, j) != EdgeFlag::kNone) continue;
      const Eigen::Vector3d& p = out.points(i, j);
      const Eigen::Vector3d& n = out.normal(i, j);
      bool crease = false;
      for (int di = -1; di <= 1 && !crease; ++di) {
        for (int dj = -1; dj <= 1 && !crease; ++dj) {
          const int ni = i + di;
          if ((di == 0 && dj == 0) || ni < 0 || ni >= h) continue;
          const int nj = wrap(j + dj, w);
          if (!(depth(ni, nj) > 0.0)) continue;
          const Eigen::Vector3d d = out.points(ni, nj) - p;
          crease = std::abs(n.dot(d)) > sin_crease * d.norm();
        }
      }
      if (crease) flags(i, j) = EdgeFlag::kCrease;
    }
  }
  out.edge_flags = std::move(flags);
  return out;
}

IncidenceImage incidence_image(const NormalImage& nimg, const SensorIntrinsics& intr,
                               double tau) {
  const int h = nimg.normal.rows();
  const int w = nimg.normal.cols();
  IncidenceImage out;
  out.cos = Grid<double>(h, w, 0.0);
  out.shallow = Grid<std::uint8_t>(h, w, 0);
  out.usable = Grid<std::uint8_t>(h, w, 0);
  const double cos_tau = std::cos(tau);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!nimg.valid(i, j)) continue;
      const double c = std::clamp(-nimg.normal(i, j).dot(pixel_direction(i, j, intr)), 0.0, 1.0);
      out.cos(i, j) = c;
      out.shallow(i, j) = c < cos_tau ? 1 : 0;
      const EdgeFlag f = nimg.edge_flags(i, j);
      out.usable(i, j) =
          (!out.shallow(i, j) && f != EdgeFlag::kStrongEdge && f != EdgeFlag::kCrease) ? 1 : 0;
    }
  }
  return out;
}

NormalImage normals_from_range(const RangeImage& img, const SensorIntrinsics& intr,
                               const RepairConfig& config) {
  return repair_edges(estimate_normals(XyzImage::from_range(img, intr), intr), img.depth, config,
                      intr);
}

}  // namespace pbl
