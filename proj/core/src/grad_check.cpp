#include "pbl/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>

#include "pbl/calibration.hpp"
#include "pbl/error.hpp"
#include "pbl/field.hpp"
#include "pbl/sensor_model.hpp"

namespace pbl {
namespace {

class Checker {
 public:
  Checker(GradCheckReport& report, const GradCheckOptions& options)
      : report_(report), options_(options) {}

  /// Compares `analytic` with the central difference of f around x.
  void compare(double analytic, double& x, const std::function<double()>& f) {
    const double saved = x;
    const double h = options_.step * std::max(1.0, std::abs(saved));
    x = saved + h;
    const double fp = f();
    x = saved - h;
    const double fm = f();
    x = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    report_.max_rel_error =
        std::max(report_.max_rel_error, relative_error(analytic, numeric, options_.floor));
    report_.max_abs_analytic = std::max(report_.max_abs_analytic, std::abs(analytic));
    report_.max_abs_numeric = std::max(report_.max_abs_numeric, std::abs(numeric));
    ++report_.comparisons;
  }

 private:
  GradCheckReport& report_;
  const GradCheckOptions& options_;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  // Explicit mapping keeps the draws identical across standard libraries.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

DistanceParams random_distance(std::mt19937_64& rng, bool lens) {
  DistanceParams p;
  p.s = uniform(rng, 0.02, 0.1);
  p.q = uniform(rng, 0.5, 2.0);
  p.d_near = uniform(rng, 2.0, 5.0);
  p.s_eta = uniform(rng, 0.3, 0.8);
  p.q_eta = uniform(rng, 1.5, 3.0);
  p.k_steep = uniform(rng, 1.0, 3.0);
  if (lens) {
    p.near_model = NearModel::kLensDefocus;
    p.lens.s_eta = uniform(rng, 0.05, 0.5);
    p.lens.delta_offset = uniform(rng, -0.5, 0.5);
  }
  return p;
}

IntensityParams random_intensity(std::mt19937_64& rng, int rows) {
  IntensityParams p = IntensityParams::defaults(rows);
  p.distance = random_distance(rng, uniform(rng, 0.0, 1.0) < 0.3);
  for (auto& l : p.laser_powers) l = uniform(rng, 0.7, 1.3);
  p.incidence_a = uniform(rng, 2.0, 15.0);
  p.incidence_b = uniform(rng, 1.0, 3.0);
  p.reflect_scale = uniform(rng, 0.5, 2.0);
  return p;
}

void check_render_ray(GradCheckReport& report, const GradCheckOptions& options,
                      std::mt19937_64& rng) {
  Checker check(report, options);
  VoxelField field = VoxelField::empty({6, 6, 6}, 1.0, Eigen::Vector3d::Zero());
  for (int z = 0; z < 6; ++z) {
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 6; ++x) {
        // Border cells stay empty so samples never cross a value jump at the box faces.
        const bool border = x == 0 || y == 0 || z == 0 || x == 5 || y == 5 || z == 5;
        const std::size_t c = field.index(x, y, z);
        field.density[c] = border ? 0.0 : uniform(rng, 0.0, 1.0);
        field.intensity[c] = border ? 0.0 : uniform(rng, 0.0, 1.0);
        field.reflectivity[c] = border ? 0.0 : uniform(rng, 0.0, 1.0);
        field.drop[c] = border ? 0.0 : uniform(rng, 0.0, 1.0);
      }
    }
  }
  const double step = 0.3;
  for (std::size_t n = 0; n < options.points; ++n) {
    Eigen::Vector3d origin(uniform(rng, 1.2, 4.8), uniform(rng, 1.2, 4.8), uniform(rng, 1.2, 4.8));
    Eigen::Vector3d dir(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0));
    dir.normalize();
    RayUpstream g;
    if (!options.zero_upstream)
      g = {uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0),
           uniform(rng, -1.0, 1.0)};
    auto loss = [&] {
      const RayOutput o = render_ray(field, origin, dir, step, 100.0);
      return g.depth * o.depth + g.intensity * o.intensity + g.reflectivity * o.reflectivity +
             g.drop * o.drop;
    };
    std::vector<RaySample> trace;
    const RayOutput out = render_ray(field, origin, dir, step, 100.0, &trace);
    const std::size_t cells = field.cell_count();
    std::vector<double> gd(cells, 0.0), gi(cells, 0.0), gr(cells, 0.0), gp(cells, 0.0);
    Eigen::Vector3d g_origin = Eigen::Vector3d::Zero();
    Eigen::Vector3d g_dir = Eigen::Vector3d::Zero();
    backward_ray(field, trace, out, step, g, {&gd, &gi, &gr, &gp}, &g_origin, &g_dir);

    std::set<std::size_t> touched;
    for (const auto& s : trace)
      if (s.stencil.inside)
        for (std::size_t k = 0; k < 8; ++k) touched.insert(s.stencil.index[k]);
    for (std::size_t c : touched) {
      check.compare(gd[c], field.density[c], loss);
      check.compare(gi[c], field.intensity[c], loss);
      check.compare(gr[c], field.reflectivity[c], loss);
      check.compare(gp[c], field.drop[c], loss);
    }
    for (int a = 0; a < 3; ++a) check.compare(g_origin[a], origin[a], loss);
    ++report.points;
  }
}

void check_distance(GradCheckReport& report, const GradCheckOptions& options,
                    std::mt19937_64& rng) {
  Checker check(report, options);
  for (std::size_t n = 0; n < options.points; ++n) {
    DistanceParams p = random_distance(rng, n % 3 == 2);
    double d = uniform(rng, 0.5, 80.0);
    const DistancePartials g = n_distance_grad(d, p);
    auto f = [&] { return n_distance(d, p); };
    check.compare(g.s, p.s, f);
    check.compare(g.q, p.q, f);
    check.compare(g.d_near, p.d_near, f);
    check.compare(g.k_steep, p.k_steep, f);
    check.compare(g.distance, d, f);
    if (p.near_model == NearModel::kFractionalPower) {
      check.compare(g.s_eta, p.s_eta, f);
      check.compare(g.q_eta, p.q_eta, f);
    } else {
      check.compare(g.lens_s_eta, p.lens.s_eta, f);
      check.compare(g.lens_delta, p.lens.delta_offset, f);
    }
    ++report.points;
  }
}

void check_incidence(GradCheckReport& report, const GradCheckOptions& options,
                     std::mt19937_64& rng) {
  Checker check(report, options);
  for (std::size_t n = 0; n < options.points; ++n) {
    IntensityParams p = random_intensity(rng, 1);
    double c = uniform(rng, 0.05, 1.0 - 1e-3);
    double r = uniform(rng, 0.05, 1.0);
    const IncidencePartials g = n_incidence_grad(c, r, p);
    auto f = [&] { return n_incidence(c, r, p); };
    check.compare(g.a, p.incidence_a, f);
    check.compare(g.b, p.incidence_b, f);
    check.compare(g.reflectivity, r, f);
    check.compare(g.cos, c, f);
    ++report.points;
  }
}

void check_apply_model(GradCheckReport& report, const GradCheckOptions& options,
                       std::mt19937_64& rng) {
  Checker check(report, options);
  constexpr int kRows = 8;
  for (std::size_t n = 0; n < options.points; ++n) {
    IntensityParams p = random_intensity(rng, kRows);
    const int ring = static_cast<int>(rng() % kRows);
    double base = uniform(rng, 0.05, 1.0);
    double d = uniform(rng, 0.5, 80.0);
    double c = uniform(rng, 0.05, 1.0 - 1e-3);
    double r = uniform(rng, 0.05, 1.0);
    const ModelPartials g = apply_model_grad(base, d, c, r, ring, p);
    auto f = [&] { return apply_model(base, d, c, r, ring, p); };
    auto& dp = p.distance;
    check.compare(g.distance.s, dp.s, f);
    check.compare(g.distance.q, dp.q, f);
    check.compare(g.distance.d_near, dp.d_near, f);
    check.compare(g.distance.k_steep, dp.k_steep, f);
    if (dp.near_model == NearModel::kFractionalPower) {
      check.compare(g.distance.s_eta, dp.s_eta, f);
      check.compare(g.distance.q_eta, dp.q_eta, f);
    } else {
      check.compare(g.distance.lens_s_eta, dp.lens.s_eta, f);
      check.compare(g.distance.lens_delta, dp.lens.delta_offset, f);
    }
    check.compare(g.distance.distance, d, f);
    check.compare(g.laser, p.laser_powers[static_cast<std::size_t>(ring)], f);
    check.compare(g.a, p.incidence_a, f);
    check.compare(g.b, p.incidence_b, f);
    check.compare(g.base_intensity, base, f);
    check.compare(g.reflectivity, r, f);
    check.compare(g.cos, c, f);
    ++report.points;
  }
}

void check_reprojection(GradCheckReport& report, const GradCheckOptions& options,
                        std::mt19937_64& rng) {
  Checker check(report, options);
  constexpr int kWidth = 256;
  constexpr int kHeight = 16;
  for (std::size_t n = 0; n < options.points; ++n) {
    SensorIntrinsics intr;
    intr.width = kWidth;
    intr.height = kHeight;
    intr.units = {UnitIntrinsics{uniform(rng, 0.15, 0.25), uniform(rng, 0.1, 0.2), uniform(rng, 0.0, 0.2), 0, 8},
                  UnitIntrinsics{uniform(rng, 0.25, 0.35), uniform(rng, 0.35, 0.45), uniform(rng, -0.2, 0.0), 8, kHeight}};
    intr.diode_offsets.resize(kHeight);
    for (auto& d : intr.diode_offsets) d = uniform(rng, -0.003, 0.003);

    const int ring = static_cast<int>(rng() % kHeight);
    const int col = static_cast<int>(rng() % kWidth);
    const auto& u = intr.units[static_cast<std::size_t>(intr.unit_of_row(ring))];
    // A point near, but not on, the labelled pixel's ray.
    const double e = row_elevation(ring, intr) + uniform(rng, -0.01, 0.01);
    const double phi = column_azimuth(col + 0.5 + uniform(rng, -0.4, 0.4), kWidth);
    const double range = uniform(rng, 2.0, 60.0);
    LidarPoint pt;
    pt.position = u.origin() + range * Eigen::Vector3d(std::cos(e) * std::cos(phi),
                                                       std::cos(e) * std::sin(phi), std::sin(e));
    pt.ring = ring;
    pt.col = col;

    const auto res = point_residual(pt, intr);
    if (!res) continue;
    const std::size_t k = static_cast<std::size_t>(res->unit);
    double* params[4] = {&intr.units[k].fov, &intr.units[k].fov_offset, &intr.units[k].z_offset,
                         &intr.diode_offsets[static_cast<std::size_t>(ring)]};
    for (std::size_t p = 0; p < 4; ++p) {
      check.compare(res->d_depth[p], *params[p], [&] { return point_residual(pt, intr)->depth; });
      check.compare(res->d_row[p], *params[p], [&] { return point_residual(pt, intr)->row; });
    }
    ++report.points;
  }
}

}  // namespace

std::optional<GradTarget> parse_grad_target(std::string_view name) {
  if (name == "render_ray") return GradTarget::kRenderRay;
  if (name == "n_distance") return GradTarget::kDistance;
  if (name == "n_incidence") return GradTarget::kIncidence;
  if (name == "apply_model") return GradTarget::kApplyModel;
  if (name == "reprojection") return GradTarget::kReprojection;
  return std::nullopt;
}

std::string grad_target_name(GradTarget target) {
  switch (target) {
    case GradTarget::kRenderRay: return "render_ray";
    case GradTarget::kDistance: return "n_distance";
    case GradTarget::kIncidence: return "n_incidence";
    case GradTarget::kApplyModel: return "apply_model";
    case GradTarget::kReprojection: break;
  }
  return "reprojection";
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  if (denom == 0.0) return 0.0;
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(GradTarget target, const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ConfigError("grad_check: step must be > 0");
  GradCheckReport report;
  report.target = target;
  std::mt19937_64 rng(options.seed);
  switch (target) {
    case GradTarget::kRenderRay: check_render_ray(report, options, rng); break;
    case GradTarget::kDistance: check_distance(report, options, rng); break;
    case GradTarget::kIncidence: check_incidence(report, options, rng); break;
    case GradTarget::kApplyModel: check_apply_model(report, options, rng); break;
    case GradTarget::kReprojection: check_reprojection(report, options, rng); break;
  }
  return report;
}

}  // namespace pbl
