#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "pbl/geometry.hpp"
#include "pbl/grid.hpp"

namespace pbl {

enum class NearModel { kFractionalPower, kLensDefocus };

/// Defocus near-range model eta(d) = 1 - exp(-s_eta (d + delta)^2).
struct LensParams {
  double s_eta = 0.1;
  double delta_offset = 0.0;
};

/// Parameters of the blended near/far distance falloff N_d.
struct DistanceParams {
  double s = 0.05;         ///< far falloff scale [1/m]
  double q = 1.0;          ///< far falloff exponent divisor
  double d_near = 3.0;     ///< near/far boundary [m]
  double s_eta = 0.5774;   ///< near-range scale
  double q_eta = 2.0;      ///< near-range exponent
  double k_steep = 2.0;    ///< sigmoid steepness [1/m]
  NearModel near_model = NearModel::kFractionalPower;
  LensParams lens;

  /// Throws ConfigError on a broken invariant.
  void validate() const;
};

struct IntensityParams {
  DistanceParams distance;
  std::vector<double> laser_powers;  ///< one gain per row
  double incidence_a = 10.0;
  double incidence_b = 2.0;
  double reflect_target = 0.0;
  double reflect_scale = 1.0;  ///< a_r, resimulation-time exponent rescaler
  bool distance_enabled = true;
  bool laser_enabled = true;
  bool incidence_enabled = true;

  static IntensityParams defaults(int rows);
  void validate() const;
};

// --- Distance falloff ---------------------------------------------------------

/// Base of the far falloff is clamped to this value when it would be <= 0.
inline constexpr double kFalloffBaseEpsilon = 1e-6;

/// Number of times dist_far had to clamp its base since process start.
std::uint64_t falloff_clamp_count();

struct FarFalloff {
  double value = 0.0;
  double d_s = 0.0;
  double d_q = 0.0;
  double d_near = 0.0;
  double d_distance = 0.0;
  bool clamped = false;  ///< value clamped at 0 or base clamped at epsilon
};

/// max(Delta^(-2/q) q - q + 1, 0) with Delta = s (d - d_near) + 1.
double dist_far(double d, const DistanceParams& p);
FarFalloff dist_far_grad(double d, const DistanceParams& p);

struct NearFalloff {
  double value = 0.0;
  double d_scale = 0.0;     ///< wrt s_eta (fractional) or lens.s_eta (defocus)
  double d_exponent = 0.0;  ///< wrt q_eta (fractional) or lens.delta_offset (defocus)
  double d_distance = 0.0;
};

double dist_near(double d, const DistanceParams& p);
NearFalloff dist_near_grad(double d, const DistanceParams& p);

/// 1 / (1 + exp(-k (d - d_near))).
double sigmoid_blend(double d, const DistanceParams& p);

/// Partial derivatives of N_d with respect to every DistanceParams scalar.
struct DistancePartials {
  double value = 0.0;
  double s = 0.0;
  double q = 0.0;
  double d_near = 0.0;
  double s_eta = 0.0;
  double q_eta = 0.0;
  double k_steep = 0.0;
  double lens_s_eta = 0.0;
  double lens_delta = 0.0;
  double distance = 0.0;
};

/// N_d = sigma D_far + (1 - sigma) eta.
double n_distance(double d, const DistanceParams& p);
DistancePartials n_distance_grad(double d, const DistanceParams& p);

// --- Incidence ---------------------------------------------------------------------

struct IncidencePartials {
  double value = 0.0;
  double a = 0.0;
  double b = 0.0;
  double reflectivity = 0.0;
  double cos = 0.0;
};

/// cos^(a_r (a R)^b), with 0^0 := 1.
double n_incidence(double cos_phi_n, double reflectivity, const IntensityParams& p);
IncidencePartials n_incidence_grad(double cos_phi_n, double reflectivity,
                                   const IntensityParams& p);

// --- Full chain ------------------------------------------------------------------------

/// Partials of I* with respect to the optimizable parameters and the inputs.
struct ModelPartials {
  double value = 0.0;
  DistancePartials distance;  ///< scaled by I N_R l
  double laser = 0.0;         ///< wrt laser_powers[ring]
  double a = 0.0;
  double b = 0.0;
  double base_intensity = 0.0;
  double reflectivity = 0.0;
  double cos = 0.0;
};

/// I* = I N_d N_R l_ring, unclamped; disabled factors evaluate to 1.
double apply_model(double base_intensity, double d, double cos_phi_n, double reflectivity,
                   int ring, const IntensityParams& p);
ModelPartials apply_model_grad(double base_intensity, double d, double cos_phi_n,
                               double reflectivity, int ring, const IntensityParams& p);

// --- Masks -----------------------------------------------------------------------------

struct MaskSet {
  Grid<std::uint8_t> drop_mask;       ///< 1 = exclude from the drop loss
  Grid<std::uint8_t> intensity_mask;  ///< 1 = exclude from the intensity loss
  double incidence_threshold = 1.4;   ///< tau [rad]; shallower pixels are excluded

  static MaskSet empty(int height, int width, double incidence_threshold = 1.4);
};

inline constexpr double kDefaultDropMaskThreshold = 0.98;
inline constexpr double kDefaultIntensityMaskThreshold = 0.9;

/// Pixel masked iff invalid in at least `threshold` of the frames.
Grid<std::uint8_t> build_drop_mask(std::span<const RangeImage> frames,
                                   double threshold = kDefaultDropMaskThreshold);

/// Pixel masked iff valid with zero intensity in at least `threshold` of the frames.
Grid<std::uint8_t> build_intensity_mask(std::span<const RangeImage> frames,
                                        double threshold = kDefaultIntensityMaskThreshold);

// --- Losses ------------------------------------------------------------------------------

struct LossValue {
  double value = 0.0;
  std::size_t count = 0;
  bool no_valid_pixels = false;
};

/// Per-pixel inclusion rule of the intensity loss. `cos_incidence` may be
/// null when incidence normalization is inactive.
bool intensity_loss_pixel(int i, int j, const Grid<std::uint8_t>& valid, const MaskSet& masks,
                          const Grid<double>* cos_incidence);

/// Masked mean squared error between predicted I* and observed intensity.
LossValue loss_intensity(const Grid<double>& predicted, const Grid<double>& observed,
                         const Grid<std::uint8_t>& valid, const MaskSet& masks,
                         const Grid<double>* cos_incidence = nullptr);

/// Mean of ReLU(l_i - 1).
double loss_laser(std::span<const double> laser_powers);

/// Lower median of values[k] over entries with valid[k] != 0.
std::optional<double> lower_median(std::span<const double> values,
                                   std::span<const std::uint8_t> valid);

/// ReLU(r_t - median(R)) over valid pixels; 0 when nothing is valid.
double loss_reflectivity(const Grid<double>& reflectivity, const Grid<std::uint8_t>& valid,
                         double target);

struct LossWeights {
  double depth = 1.0;         ///< lambda_alpha
  double intensity = 1.0;     ///< lambda_beta
  double drop = 0.1;          ///< lambda_gamma
  double reflectivity = 0.01; ///< lambda_r
  double laser = 0.01;        ///< lambda_l
};

/// Lazily evaluated loss terms; a term whose weight is 0 is never called.
struct LossTerms {
  std::function<double()> depth;
  std::function<double()> intensity;
  std::function<double()> drop;
  std::function<double()> reflectivity;
  std::function<double()> laser;
};

double loss_total(const LossTerms& terms, const LossWeights& weights);

// --- Statistics --------------------------------------------------------------------------

struct StatsFrame {
  const RangeImage* image = nullptr;
  const Grid<double>* cos_incidence = nullptr;
  const Grid<std::uint8_t>* exclude = nullptr;  ///< optional pixels to skip
};

struct StatsBin {
  double d_lo = 0.0;
  double d_hi = 0.0;
  double angle_lo = 0.0;  ///< incidence angle [rad]
  double angle_hi = 0.0;
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;
  bool empty() const { return count == 0; }
};

/// Mean intensity per (distance bin x incidence angle bin). Bin edges are
/// ascending; a sample falls in [lo, hi), the last bin also takes hi.
std::vector<StatsBin> analyze_statistics(std::span<const StatsFrame> frames,
                                         std::span<const double> distance_edges,
                                         std::span<const double> angle_edges);

}  // namespace pbl
