#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace pbl {

enum class GradTarget { kRenderRay, kDistance, kIncidence, kApplyModel, kReprojection };

/// "render_ray", "n_distance", "n_incidence", "apply_model", "reprojection".
std::optional<GradTarget> parse_grad_target(std::string_view name);
std::string grad_target_name(GradTarget target);

struct GradCheckOptions {
  std::size_t points = 100;
  double step = 1e-5;   ///< central-difference step, relative to max(1, |x|)
  double floor = 1e-4;  ///< denominator floor of the relative error
  std::uint64_t seed = 7;
  bool zero_upstream = false;  ///< render_ray only: every output weight masked to 0
};

struct GradCheckReport {
  GradTarget target = GradTarget::kRenderRay;
  std::size_t points = 0;
  std::size_t comparisons = 0;
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

/// Compares analytic derivatives against central finite differences at
/// random points of the selected pipeline segment.
GradCheckReport grad_check(GradTarget target, const GradCheckOptions& options = {});

}  // namespace pbl
