#pragma once

#include <cstdint>

#include <Eigen/Core>

#include "pbl/geometry.hpp"
#include "pbl/grid.hpp"

namespace pbl {

/// kCrease marks pixels whose 3x3 stencil spans two faces (no depth jump, but
/// the estimated normal mixes both).
enum class EdgeFlag : std::uint8_t { kNone = 0, kStrongEdge = 1, kHorizontalArtifact = 2, kCrease = 3 };

/// Range view of sensor-frame coordinates.
struct XyzImage {
  Grid<Eigen::Vector3d> xyz;
  Grid<std::uint8_t> valid;

  /// Unprojects `img` in the sensor frame (no rolling shutter).
  static XyzImage from_range(const RangeImage& img, const SensorIntrinsics& intr);
};

struct NormalImage {
  Grid<Eigen::Vector3d> normal;  ///< unit, facing the sensor
  Grid<double> cos_incidence;    ///< clamp(-n . ray, 0, 1)
  Grid<std::uint8_t> valid;
  Grid<EdgeFlag> edge_flags;
  Grid<Eigen::Vector3d> points;  ///< the coordinates the normals were estimated from
};

/// Scharr-filtered tangents on the coordinate image, wrapping horizontally at
/// the azimuth seam. Neighbors that are invalid fall back to one-sided
/// differences; pixels without support on both axes are invalid.
NormalImage estimate_normals(const XyzImage& xyz, const SensorIntrinsics& intr);

struct RepairConfig {
  double edge_threshold = 0.3;        ///< relative depth jump to a 4-neighbor
  double artifact_angle = 0.4363323;  ///< 25 degrees
  double artifact_flatness = 0.05;    ///< max distance to the vertical neighbor chord [m]
  /// Max elevation of a 3x3 neighbor over the pixel's tangent plane [rad];
  /// 0 disables crease flags. Only meaningful on low-noise range.
  double crease_angle = 0.0;
};

/// Flags strong depth edges, replaces horizontal laser-row artifacts with
/// the renormalized mean of the vertical neighbors, then flags creases among
/// the remaining pixels. Idempotent.
NormalImage repair_edges(const NormalImage& nimg, const Grid<double>& depth,
                         const RepairConfig& config, const SensorIntrinsics& intr);

struct IncidenceImage {
  Grid<double> cos;              ///< cos(phi_n), 0 at invalid pixels
  Grid<std::uint8_t> shallow;    ///< 1 where the incidence angle exceeds tau
  Grid<std::uint8_t> usable;     ///< valid, not a strong edge or crease, not shallow
};

IncidenceImage incidence_image(const NormalImage& nimg, const SensorIntrinsics& intr,
                               double tau);

/// estimate_normals followed by repair_edges on the image's own depth.
NormalImage normals_from_range(const RangeImage& img, const SensorIntrinsics& intr,
                               const RepairConfig& config = {});

}  // namespace pbl
