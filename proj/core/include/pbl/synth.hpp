#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pbl/field.hpp"
#include "pbl/geometry.hpp"
#include "pbl/grid.hpp"
#include "pbl/sensor_model.hpp"

namespace pbl {

enum class PrimitiveKind { kPlane, kSphere, kBox };

/// Solid scene primitive. A plane is the half-space below `normal`, optionally
/// cut to a disc of radius `extent`; a box is rotated by `yaw` about +z.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kPlane;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  double extent = 0.0;  ///< plane disc radius, 0 = unbounded
  double radius = 1.0;
  Eigen::Vector3d half_extent = Eigen::Vector3d::Ones();
  double yaw = 0.0;  ///< [rad]
  double base_intensity = 0.5;
  double reflectivity = 0.5;

  static Primitive plane(const Eigen::Vector3d& point, const Eigen::Vector3d& normal,
                         double base_intensity, double reflectivity, double extent = 0.0);
  static Primitive sphere(const Eigen::Vector3d& center, double radius, double base_intensity,
                          double reflectivity);
  static Primitive box(const Eigen::Vector3d& center, const Eigen::Vector3d& half_extent,
                       double yaw, double base_intensity, double reflectivity);

  /// Signed distance, negative inside.
  double sdf(const Eigen::Vector3d& p) const;
};

struct SurfaceHit {
  double t = 0.0;
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();  ///< faces the incoming ray
  int primitive = -1;
};

/// Nearest intersection with t in (0, max_t]; `direction` must be unit length.
std::optional<SurfaceHit> intersect(const Primitive& prim, const Eigen::Vector3d& origin,
                                    const Eigen::Vector3d& direction, double max_t);
std::optional<SurfaceHit> cast_ray(const std::vector<Primitive>& prims,
                                   const Eigen::Vector3d& origin,
                                   const Eigen::Vector3d& direction, double max_t);

struct PixelRect {
  int row_begin = 0;
  int row_end = 0;
  int col_begin = 0;
  int col_end = 0;
};

struct NoiseSpec {
  double depth_sigma = 0.0;      ///< [m]
  double intensity_sigma = 0.0;
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  SensorIntrinsics intrinsics;
  IntensityParams params;
  std::vector<Pose> trajectory;  ///< frame f spans trajectory[f] .. trajectory[f + 1]
  NoiseSpec noise;
  std::uint64_t seed = 1;
  bool shutter = true;
  ScanDirection direction = ScanDirection::kForward;
  double max_range = 120.0;
  std::vector<PixelRect> dropped;  ///< pixels that never return (self-occlusion)

  int frame_count() const { return static_cast<int>(trajectory.size()); }
  void validate() const;
};

struct SyntheticScan {
  RangeImage observed;  ///< with noise, intensity clamped to [0, 1]
  RangeImage truth;     ///< noise-free
  PointCloud cloud;     ///< observed points in the sensor frame, row-major, with ring/col/time
  Grid<Eigen::Vector3d> normals;  ///< world frame, facing the sensor
  Grid<double> cos_incidence;
  Grid<double> base_intensity;
  Grid<double> reflectivity;
  Grid<int> primitive;  ///< -1 where nothing was hit
  Pose pose_begin;
  Pose pose_end;  ///< equals pose_begin when the scene has no rolling shutter
};

/// Analytic ray casting of every pixel of frame `frame`. Deterministic for a
/// given spec; noise is drawn per pixel from (seed, frame, row, col).
SyntheticScan synthesize_scan(const SceneSpec& spec, int frame, int workers = 1);

/// Poses of frame `frame`: trajectory[frame] and trajectory[frame + 1]
/// (the last frame is static).
std::pair<Pose, Pose> frame_poses(const SceneSpec& spec, int frame);

/// Density sigma_max * clamp(-sdf / cell_size, 0, 1) at cell centers,
/// material channels from the closest primitive, drop 0.
VoxelField voxelize(const SceneSpec& spec, std::array<int, 3> dims, double cell_size,
                    const Eigen::Vector3d& origin, double sigma_max);

/// Two blocks of 32 rows, 1024 columns by default, with a small planted
/// diode-offset pattern that has zero mean and zero linear trend per block.
SensorIntrinsics hdl64e_intrinsics(int width = 1024);

/// Uniform draws in [lo, hi) from a seeded mt19937_64, identical on every platform.
std::vector<double> uniform_draws(std::size_t n, double lo, double hi, std::uint64_t seed);
/// Standard normal draw keyed by a tuple of integers.
double keyed_normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c,
                    std::uint64_t d);

/// Scene description text: [scene] [sensor] [params] [noise] [trajectory]
/// [plane] [sphere] [box] [drop]. Relative file paths resolve against `base_dir`.
SceneSpec parse_scene(const std::string& text, const std::string& source = "<scene>",
                      const std::string& base_dir = ".");
SceneSpec load_scene(const std::string& path);

}  // namespace pbl
