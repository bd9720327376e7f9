#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "pbl/grid.hpp"

namespace pbl {

/// One vertically stacked emitter block of a spinning LiDAR.
///
/// Elevations e of the block are mapped to theta = e + fov_offset + delta_i,
/// which lies in [0, fov] for rays the block can emit; fov_offset is therefore
/// minus the lowest elevation of the block.
struct UnitIntrinsics {
  double fov = 0.0;         ///< vertical extent [rad]
  double fov_offset = 0.0;  ///< shift mapping the block's elevations into [0, fov] [rad]
  double z_offset = 0.0;    ///< height of the optical center [m]
  int row_start = 0;        ///< first owned row (inclusive)
  int row_end = 0;          ///< one past the last owned row

  int rows() const { return row_end - row_start; }
  Eigen::Vector3d origin() const { return {0.0, 0.0, z_offset}; }

  friend bool operator==(const UnitIntrinsics&, const UnitIntrinsics&) = default;
};

struct SensorIntrinsics {
  int width = 0;
  int height = 0;
  std::vector<UnitIntrinsics> units;
  std::vector<double> diode_offsets;  ///< per-row elevation correction [rad]

  /// Throws ConfigError when any invariant is broken.
  void validate() const;
  int unit_of_row(int row) const;
  double max_fov() const;

  /// Single-block sensor with evenly spaced rows between two elevations.
  static SensorIntrinsics single_unit(int width, int height, double lowest_elevation,
                                      double highest_elevation, double z_offset = 0.0);

  friend bool operator==(const SensorIntrinsics&, const SensorIntrinsics&) = default;
};

/// Rigid transform from the sensor frame into the world frame.
struct Pose {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();

  Pose() = default;
  Pose(const Eigen::Vector3d& t, const Eigen::Quaterniond& q);

  static Pose identity() { return Pose{}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  Eigen::Vector3d rotate(const Eigen::Vector3d& v) const { return rotation * v; }
  Pose inverse() const;
  Pose operator*(const Pose& rhs) const;
  Eigen::Matrix<double, 3, 4> matrix3x4() const;
};

struct LidarPoint {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();  ///< sensor frame [m]
  double intensity = 0.0;
  std::optional<int> ring;
  std::optional<int> col;
  std::optional<double> time_frac;
  bool non_finite = false;  ///< set by readers for NaN/inf coordinates
};

using PointCloud = std::vector<LidarPoint>;

/// Panoramic range view. valid(i, j) == 0 exactly when depth(i, j) == 0.
struct RangeImage {
  int width = 0;
  int height = 0;
  Grid<double> depth;
  Grid<double> intensity;
  Grid<std::uint8_t> valid;
  std::optional<Grid<int>> src_row;
  std::optional<Grid<int>> src_col;

  static RangeImage blank(int width, int height);
  void set(int i, int j, double d, double intensity_value);
  void clear(int i, int j);
  std::size_t valid_count() const;
  /// Throws ConfigError when depth/valid disagree or values are not finite.
  void validate() const;
};

struct Angles {
  double theta = 0.0;  ///< shifted elevation [rad]
  double phi = 0.0;    ///< azimuth in (-pi, pi] [rad]
};

struct PixelCoord {
  double row = 0.0;
  double col = 0.0;
};

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitX();
};

enum class ScanDirection { kForward, kReverse };
enum class QuatInterpolation { kLinear, kSpherical };

/// Shifted elevation and azimuth of p seen from the unit's optical center.
/// Throws NumericError("degenerate point") at the optical center.
Angles angles_from_point(const Eigen::Vector3d& p, const UnitIntrinsics& unit, double delta);

/// Continuous pixel coordinates; col wraps into [0, W). Rows outside the unit's
/// interval are returned as-is for the caller to reject.
PixelCoord pixel_from_angles(double theta, double phi, const SensorIntrinsics& intr,
                             int unit_index);

double column_azimuth(double col, int width);
double row_elevation(int row, const SensorIntrinsics& intr);

/// Pixel-center ray of (i, j) in the sensor frame.
Ray ray_from_pixel(int i, int j, const SensorIntrinsics& intr);

/// Pixel owning a sensor-frame point, searching every unit and every row
/// whose diode offset could place the point there.
struct PixelHit {
  int unit = 0;
  int row = 0;
  int col = 0;
  PixelCoord coord;
  double range = 0.0;
};
std::optional<PixelHit> locate_point(const Eigen::Vector3d& p, const SensorIntrinsics& intr);

struct ProjectionStats {
  std::size_t projected = 0;
  std::size_t collisions = 0;
  std::size_t out_of_fov = 0;
  std::size_t invalid = 0;  ///< non-finite or degenerate
};

struct Projection {
  RangeImage image;
  ProjectionStats stats;
};

/// Point cloud to range view. Points carrying a ring index keep that row.
/// Collisions keep the smaller range; equal ranges keep the earlier point.
Projection project(const PointCloud& cloud, const SensorIntrinsics& intr);

/// Range view back to points. When `column_poses` is non-empty it must hold W
/// poses and each column is transformed by its own pose.
PointCloud unproject(const RangeImage& img, const SensorIntrinsics& intr,
                     std::span<const Pose> column_poses = {},
                     ScanDirection direction = ScanDirection::kForward);

/// Fraction of the revolution at which column j is captured.
double column_time(int j, int width, ScanDirection direction);

/// Throws NumericError("ambiguous interpolation") for rotations 180 degrees apart.
Pose interpolate_pose(const Pose& p0, const Pose& p1, double t,
                      QuatInterpolation mode = QuatInterpolation::kLinear);

std::vector<Pose> shutter_poses(const Pose& p0, const Pose& p1, int width,
                                ScanDirection direction = ScanDirection::kForward,
                                QuatInterpolation mode = QuatInterpolation::kLinear);

}  // namespace pbl
