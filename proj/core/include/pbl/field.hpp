#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include <Eigen/Core>

#include "pbl/geometry.hpp"
#include "pbl/grid.hpp"
#include "pbl/normals.hpp"
#include "pbl/sensor_model.hpp"

namespace pbl {

enum class Channel { kDensity = 0, kIntensity = 1, kReflectivity = 2, kDrop = 3 };
inline constexpr std::size_t kChannelCount = 4;

/// Interpolation stencil of one position: 8 cell indices, weights and the
/// weights' spatial derivatives.
struct Trilinear {
  bool inside = false;
  std::array<std::size_t, 8> index{};
  std::array<double, 8> weight{};
  std::array<Eigen::Vector3d, 8> d_weight{};
};

struct FieldSample {
  double density = 0.0;
  double intensity = 0.0;
  double reflectivity = 0.0;
  double drop = 0.0;
};

/// Axis-aligned grid of cells with values stored at cell centers.
/// Cell (x, y, z) is at index x + dims[0] * (y + dims[1] * z).
struct VoxelField {
  std::array<int, 3> dims{0, 0, 0};
  double cell_size = 0.5;
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();  ///< corner of the box
  std::vector<double> density;       ///< sigma >= 0 [1/m]
  std::vector<double> intensity;     ///< base intensity in [0, 1]
  std::vector<double> reflectivity;  ///< in [0, 1]
  std::vector<double> drop;          ///< in [0, 1]

  static VoxelField empty(std::array<int, 3> dims, double cell_size,
                          const Eigen::Vector3d& origin);

  std::size_t cell_count() const;
  std::size_t index(int x, int y, int z) const;
  Eigen::Vector3d cell_center(int x, int y, int z) const;
  Eigen::Vector3d box_max() const;
  std::vector<double>& channel(Channel c);
  const std::vector<double>& channel(Channel c) const;

  /// Throws ConfigError on bad dims, sizes, non-finite or out-of-range values.
  void validate() const;

  /// Trilinear stencil; `inside` is false (and all weights 0) outside the box.
  Trilinear stencil(const Eigen::Vector3d& p) const;
  FieldSample sample(const Eigen::Vector3d& p) const;
};

/// One marched sample, kept for the backward pass.
struct RaySample {
  double t = 0.0;
  Trilinear stencil;
  FieldSample value;
  double transmittance = 1.0;  ///< T before this sample
  double alpha = 0.0;
};

struct RayOutput {
  double depth = 0.0;         ///< sum T alpha t
  double intensity = 0.0;     ///< I bar
  double reflectivity = 0.0;  ///< R hat
  double drop = 0.0;          ///< sum T alpha d + residual
  double transmittance = 1.0; ///< background weight
  double weight_sum = 0.0;    ///< sum T alpha
};

/// Marches samples at t = (m + 0.5) step inside the box and [0, max_range].
/// Stops once the transmittance falls below a tiny threshold; the residual
/// keeps the remainder so weights and residual always sum to 1.
RayOutput render_ray(const VoxelField& field, const Eigen::Vector3d& origin,
                     const Eigen::Vector3d& direction, double step, double max_range,
                     std::vector<RaySample>* trace = nullptr);

/// Upstream derivatives of a scalar loss with respect to the ray outputs.
struct RayUpstream {
  double depth = 0.0;
  double intensity = 0.0;
  double reflectivity = 0.0;
  double drop = 0.0;
};

/// Receives d loss / d channel value of a cell.
struct ChannelGradients {
  std::vector<double>* density = nullptr;
  std::vector<double>* intensity = nullptr;
  std::vector<double>* reflectivity = nullptr;
  std::vector<double>* drop = nullptr;
};

/// Back-propagates through one traced ray. Optional outputs accumulate the
/// derivatives with respect to the ray origin and direction.
void backward_ray(const VoxelField& field, const std::vector<RaySample>& trace,
                  const RayOutput& out, double step, const RayUpstream& upstream,
                  const ChannelGradients& grads,
                  Eigen::Vector3d* d_origin = nullptr, Eigen::Vector3d* d_direction = nullptr);

struct RenderImages {
  Grid<double> depth;
  Grid<double> intensity_base;
  Grid<double> reflectivity;
  Grid<double> drop_prob;
  Grid<double> transmittance_residual;
  Grid<double> weight_sum;

  static RenderImages blank(int height, int width);
  void store(int i, int j, const RayOutput& out);
};

struct RenderOptions {
  double step = 0.0;  ///< 0 selects half a cell
  double max_range = 120.0;
  bool shutter = true;
  ScanDirection direction = ScanDirection::kForward;
  QuatInterpolation interpolation = QuatInterpolation::kLinear;
  RepairConfig normals;
  int workers = 1;

  double resolved_step(const VoxelField& field) const;
};

struct ScanRender {
  RangeImage image;  ///< valid where drop_prob < 0.5; intensity is I*
  RenderImages render;
  NormalImage normals;
  Grid<double> cos_incidence;
};

/// Per-column world poses of one revolution, or p0 everywhere with the
/// shutter off.
std::vector<Pose> scan_column_poses(const Pose& p0, const Pose& p1, int width,
                                    const RenderOptions& options);

/// Renders a LiDAR revolution; I* = I bar N_d N_R l with cos from the
/// normals of the rendered depth.
ScanRender render_scan(const VoxelField& field, const SensorIntrinsics& intr, const Pose& p0,
                       const Pose& p1, const IntensityParams& params,
                       const RenderOptions& options = {});

/// Pinhole camera: x right, y down, z forward.
struct Pinhole {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;
};

struct CameraRender {
  RenderImages render;
  Grid<double> intensity;  ///< I bar N_d(depth) with unit laser power and normal incidence
};

/// One ray per pixel through ((u - cx) / fx, (v - cy) / fy, 1); `pose` maps
/// camera to world. Depth is the range along the ray.
CameraRender render_camera(const VoxelField& field, const Pinhole& camera, const Pose& pose,
                           const IntensityParams& params, const RenderOptions& options = {});

}  // namespace pbl
