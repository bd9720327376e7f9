#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pbl/error.hpp"
#include "pbl/field.hpp"
#include "pbl/optim.hpp"
#include "pbl/sensor_model.hpp"

namespace pbl {

/// One observed revolution and the poses at its start and end.
struct Observation {
  RangeImage image;
  Pose p0;
  Pose p1;
};

/// Correction of a frame's poses: world = R exp(rotation) p + t + translation.
struct PoseOffset {
  Eigen::Vector3d rotation = Eigen::Vector3d::Zero();     ///< rotation vector [rad]
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();  ///< [m]

  void validate() const;
};

Pose apply_offset(const Pose& pose, const PoseOffset& offset);

/// Parameter groups optimized by fit.
struct FitFree {
  bool density = false;
  bool intensity = false;
  bool reflectivity = false;
  bool drop = false;
  bool distance = false;
  bool laser = false;
  bool incidence = false;
  bool pose_offsets = false;

  bool any() const;
  bool any_field() const { return density || intensity || reflectivity || drop; }
};

struct FitOptions {
  /// Iterations, decay and moment settings; the base learning rate comes
  /// from the per-group rates below.
  OptimizerConfig optimizer;
  double field_lr = 1e-2;
  double sensor_lr = 1e-3;
  double pose_lr = 1e-3;
  LossWeights weights;
  RenderOptions render;
  double bce_epsilon = 1e-12;
};

struct FitLosses {
  double total = 0.0;
  double depth = 0.0;
  double intensity = 0.0;
  double drop = 0.0;
  double reflectivity = 0.0;
  double laser = 0.0;
  std::size_t intensity_pixels = 0;
};

struct FitState {
  VoxelField field;
  IntensityParams params;
  std::vector<PoseOffset> offsets;  ///< one per observation
};

struct FitResult {
  FitState state;
  std::vector<double> history;      ///< initial loss, then the best loss after each iteration
  std::vector<double> raw_history;  ///< total loss of each iterate
  FitLosses losses;                 ///< terms at the best iterate
  std::size_t evaluations = 0;
};

class FitDiverged : public NumericError {
 public:
  FitDiverged(const std::string& what, FitResult last_finite)
      : NumericError(what), last_finite_(std::move(last_finite)) {}
  const FitResult& last_finite() const { return last_finite_; }

 private:
  FitResult last_finite_;
};

/// Loss terms of a state against the observations. The distance and
/// incidence factors use the observed depth and the normals of the observed
/// depth image.
FitLosses evaluate_fit(const std::vector<Observation>& observations, const SensorIntrinsics& intr,
                       const FitState& state, const MaskSet& masks, const FitOptions& options);

/// Same, plus the gradient with respect to the unconstrained parameter
/// vector of the selected groups.
struct FitGradient {
  FitLosses losses;
  std::vector<double> params;    ///< unconstrained parameters
  std::vector<double> gradient;  ///< d total / d params
};
FitGradient evaluate_fit_gradient(const std::vector<Observation>& observations,
                                  const SensorIntrinsics& intr, const FitState& state,
                                  const MaskSet& masks, const FitOptions& options,
                                  const FitFree& free);

/// Adaptive-moment descent on the combined loss. Throws ConfigError when
/// nothing is free and FitDiverged on a non-finite loss.
FitResult fit(const std::vector<Observation>& observations, const SensorIntrinsics& intr,
              const VoxelField& init_field, const IntensityParams& init_params,
              const MaskSet& masks, const FitOptions& options, const FitFree& free);

}  // namespace pbl
