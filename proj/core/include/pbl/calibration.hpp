#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "pbl/error.hpp"
#include "pbl/geometry.hpp"
#include "pbl/optim.hpp"

namespace pbl {

/// Selects which intrinsics are optimized.
struct CalibFreeMask {
  struct Unit {
    bool fov = true;
    bool fov_offset = true;
    bool z_offset = true;
  };
  std::vector<Unit> units;
  std::vector<bool> diodes;

  static CalibFreeMask all(const SensorIntrinsics& intr);
  static CalibFreeMask none(const SensorIntrinsics& intr);
  std::size_t count() const;
};

/// Weights of the (d, I, i, j) residual channels.
struct ChannelWeights {
  double depth = 1.0;
  double intensity = 0.0;
  double row = 1.0;
  double col = 1.0;
};

struct CalibProblem {
  std::vector<PointCloud> frames;  ///< points must carry ring and col
  SensorIntrinsics initial;
  CalibFreeMask free;
  ChannelWeights weights;

  void validate() const;
};

struct CalibOptions {
  OptimizerConfig optimizer;
  /// Per-class multipliers of the learning rate.
  double fov_lr_scale = 1.0;
  double offset_lr_scale = 1.0;
  double z_lr_scale = 1.0;
  double diode_lr_scale = 1.0;
  /// Central-difference step for the piecewise-constant intensity channel [rad or m].
  double intensity_fd_step = 1e-4;
  /// Keep the per-unit mean and linear trend of the diode offsets at their
  /// initial values whenever they would otherwise trade off against fov/offset.
  bool fix_diode_gauge = true;
};

/// Mean absolute residual per channel.
struct ChannelResiduals {
  double depth = 0.0;
  double intensity = 0.0;
  double row = 0.0;
  double col = 0.0;
};

struct CalibReport {
  SensorIntrinsics final;
  std::vector<double> loss_history;  ///< best loss after each iteration, non-increasing
  std::vector<double> raw_history;   ///< loss of the iterate at each iteration
  ChannelResiduals per_channel_residuals;
  std::size_t evaluations = 0;
};

/// Raised on a non-finite loss; carries the best finite state reached.
class CalibrationDiverged : public NumericError {
 public:
  CalibrationDiverged(const std::string& what, CalibReport last_finite)
      : NumericError(what), last_finite_(std::move(last_finite)) {}
  const CalibReport& last_finite() const { return last_finite_; }

 private:
  CalibReport last_finite_;
};

struct RingRecoveryOptions {
  /// A step of the azimuth against the scan direction larger than this starts a new ring.
  double wrap_threshold = 3.14159265358979323846;
};

/// Assigns ring indices from the storage order of a raw scan and column
/// indices from azimuth. Throws ConfigError on empty input or "ring overflow".
PointCloud recover_rings(const PointCloud& raw, int height, int width,
                         const RingRecoveryOptions& options = {});

/// Single-unit guess from the elevation spread of ring-labelled points.
SensorIntrinsics initial_intrinsics_from_rings(const PointCloud& cloud, int height, int width);

/// Residuals of one labelled point under candidate intrinsics, with partials
/// of the smooth channels with respect to its unit's fov, fov_offset, z_offset
/// and its row's diode offset.
struct PointResidual {
  double depth = 0.0;  ///< reprojection distance along the elevation arc [m]
  double row = 0.0;    ///< predicted continuous row minus ring center
  double col = 0.0;    ///< predicted continuous column minus column center, wrapped
  int unit = 0;
  int predicted_row = 0;
  int predicted_col = 0;
  std::array<double, 4> d_depth{};  ///< fov, fov_offset, z_offset, delta
  std::array<double, 4> d_row{};
};

/// nullopt for degenerate points. Throws ConfigError when ring or col is missing.
std::optional<PointResidual> point_residual(const LidarPoint& pt, const SensorIntrinsics& intr);

/// Number of entries of the flat parameter vector (3 per unit + H).
std::size_t intrinsics_parameter_count(const SensorIntrinsics& intr);
std::vector<double> intrinsics_to_vector(const SensorIntrinsics& intr);
SensorIntrinsics intrinsics_from_vector(const SensorIntrinsics& layout,
                                        const std::vector<double>& params);

struct ReprojectionEval {
  double loss = 0.0;
  ChannelResiduals residuals;
  std::vector<double> gradient;  ///< empty unless requested
  std::size_t points = 0;
};

/// Mean over labelled points of the weighted squared (d, I, i, j) residuals.
double reprojection_loss(const SensorIntrinsics& intr, const std::vector<PointCloud>& frames,
                         const ChannelWeights& weights);

ReprojectionEval evaluate_reprojection(const SensorIntrinsics& intr,
                                       const std::vector<PointCloud>& frames,
                                       const ChannelWeights& weights, bool with_gradient,
                                       const CalibOptions& options = {});

CalibReport calibrate(const CalibProblem& problem, const CalibOptions& options = {});

}  // namespace pbl
