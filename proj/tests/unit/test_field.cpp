#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Geometry>

#include "doctest.h"
#include "pbl/error.hpp"
#include "pbl/field.hpp"
#include "pbl/fit.hpp"
#include "pbl/grad_check.hpp"
#include "pbl/synth.hpp"

using namespace pbl;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Field along +x with cell centers at origin.x + (k + 0.5) cell.
VoxelField line_field(double cell, double x0, int nx) {
  VoxelField f = VoxelField::empty({nx, 3, 3}, cell, Eigen::Vector3d(x0, -1.5 * cell, -1.5 * cell));
  return f;
}

SceneSpec room() {
  using V = Eigen::Vector3d;
  SceneSpec spec;
  spec.primitives = {
      Primitive::plane(V(0, 0, -1.5), V::UnitZ(), 0.5, 0.1),
      Primitive::plane(V(8, 0, 0), -V::UnitX(), 0.6, 0.2),
      Primitive::plane(V(-7, 0, 0), V::UnitX(), 0.4, 0.1),
      Primitive::plane(V(0, 6, 0), -V::UnitY(), 0.45, 0.15),
      Primitive::plane(V(0, -5, 0), V::UnitY(), 0.55, 0.1),
      Primitive::sphere(V(4, 2.5, -0.5), 1.0, 0.7, 0.3),
      Primitive::box(V(-3, -2.5, -0.7), V(0.8, 0.6, 0.8), 20 * kDeg, 0.35, 0.2),
  };
  spec.intrinsics = SensorIntrinsics::single_unit(256, 32, -25 * kDeg, 10 * kDeg);
  spec.params = IntensityParams::defaults(32);
  spec.trajectory = {Pose::identity()};
  return spec;
}

VoxelField room_field(const SceneSpec& spec) {
  return voxelize(spec, {68, 52, 20}, 0.25, Eigen::Vector3d(-8, -6, -2), 60.0);
}

}  // namespace

TEST_CASE("empty field and missed rays") {
  const VoxelField f = VoxelField::empty({4, 4, 4}, 0.5, Eigen::Vector3d(-1, -1, -1));
  RayOutput r = render_ray(f, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitX(), 0.25, 10.0);
  CHECK(r.depth == 0.0);
  CHECK(r.intensity == 0.0);
  CHECK(r.weight_sum == 0.0);
  CHECK(r.transmittance == 1.0);
  VoxelField dense = f;
  std::fill(dense.density.begin(), dense.density.end(), 5.0);
  r = render_ray(dense, Eigen::Vector3d(0, 10, 0), Eigen::Vector3d::UnitX(), 0.25, 10.0);
  CHECK(r.depth == 0.0);
  CHECK(r.transmittance == 1.0);
}

TEST_CASE("opaque slab saturates at its front face") {
  // Step 0.4 puts a sample on the cell center at x = 5; the one before sits on a clear center.
  VoxelField f = line_field(0.4, -0.4, 30);
  for (int x = 0; x < 30; ++x)
    for (int y = 0; y < 3; ++y)
      for (int z = 0; z < 3; ++z) {
        const std::size_t k = f.index(x, y, z);
        f.intensity[k] = 0.7;
        if (f.cell_center(x, y, z).x() > 4.9) f.density[k] = 20.0 / 0.4;
      }
  const RayOutput r = render_ray(f, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitX(), 0.4, 20.0);
  CHECK(r.depth == doctest::Approx(5.0).epsilon(2e-4));
  CHECK(r.intensity == doctest::Approx(0.7).epsilon(1e-3));
  CHECK(r.transmittance < 1e-8);
}

TEST_CASE("two-sample accumulation by hand") {
  // Density linear in x is reproduced exactly by trilinear interpolation:
  // sigma(0.25) step = 0.5, sigma(0.75) step = 1.0 with step 0.5.
  VoxelField f = line_field(0.5, -0.5, 8);
  for (int x = 0; x < 8; ++x)
    for (int y = 0; y < 3; ++y)
      for (int z = 0; z < 3; ++z) {
        const double cx = f.cell_center(x, y, z).x();
        f.density[f.index(x, y, z)] = 1.0 + 2.0 * (cx - 0.25);
        f.intensity[f.index(x, y, z)] = 0.3 + 0.2 * (cx - 0.25);
        f.reflectivity[f.index(x, y, z)] = 0.5;
      }
  f.validate();
  std::vector<RaySample> trace;
  const RayOutput r = render_ray(f, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitX(), 0.5, 1.0, &trace);
  REQUIRE(trace.size() == 2);
  const double a0 = 1.0 - std::exp(-0.5);
  const double a1 = 1.0 - std::exp(-1.0);
  const double t1 = std::exp(-0.5);
  CHECK(trace[0].alpha == doctest::Approx(a0).epsilon(1e-12));
  CHECK(trace[1].alpha == doctest::Approx(a1).epsilon(1e-12));
  CHECK(trace[1].transmittance == doctest::Approx(t1).epsilon(1e-12));
  CHECK(r.depth == doctest::Approx(a0 * 0.25 + t1 * a1 * 0.75).epsilon(1e-12));
  CHECK(r.intensity == doctest::Approx(a0 * 0.3 + t1 * a1 * 0.4).epsilon(1e-12));
  CHECK(r.reflectivity == doctest::Approx(0.5 * (a0 + t1 * a1)).epsilon(1e-12));
  CHECK(r.transmittance == doctest::Approx(std::exp(-1.5)).epsilon(1e-12));
  CHECK(r.weight_sum + r.transmittance == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("weights and residual sum to one and density only darkens") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  VoxelField f = VoxelField::empty({10, 10, 10}, 0.5, Eigen::Vector3d(-2.5, -2.5, -2.5));
  for (auto& s : f.density) s = 4.0 * u(rng) * u(rng);
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const Eigen::Vector3d d = Eigen::Vector3d(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5).normalized();
    const Eigen::Vector3d o(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5);
    const RayOutput r = render_ray(f, o, d, 0.25, 10.0);
    worst = std::max(worst, std::abs(r.weight_sum + r.transmittance - 1.0));
  }
  CHECK(worst < 1e-12);

  const Eigen::Vector3d o(-2.0, 0.1, 0.2);
  const Eigen::Vector3d d = Eigen::Vector3d(1, 0.05, -0.02).normalized();
  double prev = render_ray(f, o, d, 0.25, 10.0).transmittance;
  const std::size_t c = f.index(5, 5, 5);
  for (int k = 0; k < 10; ++k) {
    f.density[c] += 0.5;
    const double t = render_ray(f, o, d, 0.25, 10.0).transmittance;
    CHECK(t <= prev);
    prev = t;
  }
}

TEST_CASE("static scans render the same with and without shutter") {
  const SceneSpec spec = room();
  const VoxelField f = room_field(spec);
  const Pose p(Eigen::Vector3d(0.5, -0.2, 0.0), Eigen::Quaterniond(Eigen::AngleAxisd(0.3, Eigen::Vector3d::UnitZ())));
  RenderOptions on, off;
  off.shutter = false;
  const ScanRender a = render_scan(f, spec.intrinsics, p, p, spec.params, on);
  const ScanRender b = render_scan(f, spec.intrinsics, p, p, spec.params, off);
  CHECK(a.image.depth == b.image.depth);
  CHECK(a.image.intensity == b.image.intensity);
}

TEST_CASE("moving scans differ with the shutter on") {
  const SceneSpec spec = room();
  const VoxelField f = room_field(spec);
  const Pose p0 = Pose::identity();
  const Pose p1(Eigen::Vector3d(2, 0, 0), Eigen::Quaterniond::Identity());
  RenderOptions on, off;
  off.shutter = false;
  const ScanRender a = render_scan(f, spec.intrinsics, p0, p1, spec.params, on);
  const ScanRender b = render_scan(f, spec.intrinsics, p0, p1, spec.params, off);
  std::size_t changed = 0;
  for (int i = 0; i < spec.intrinsics.height; ++i)
    for (int j = 0; j < spec.intrinsics.width; ++j)
      if (std::abs(a.render.depth(i, j) - b.render.depth(i, j)) > 0.02) ++changed;
  CHECK(changed > a.render.depth.size() / 100);
}

TEST_CASE("identity sensor parameters pass the base intensity through") {
  const SceneSpec spec = room();
  const VoxelField f = room_field(spec);
  IntensityParams id = IntensityParams::defaults(32);
  id.distance_enabled = false;
  id.incidence_enabled = false;
  const ScanRender s = render_scan(f, spec.intrinsics, Pose::identity(), Pose::identity(), id);
  std::size_t valid = 0;
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 256; ++j) {
      if (!s.image.valid(i, j)) continue;
      ++valid;
      CHECK(s.image.intensity(i, j) == s.render.intensity_base(i, j));
    }
  CHECK(valid > 4000);
}

TEST_CASE("voxelized scene agrees with analytic casting within one step") {
  SceneSpec spec = room();
  spec.shutter = false;
  const VoxelField f = room_field(spec);
  const SyntheticScan truth = synthesize_scan(spec, 0);
  RenderOptions opt;
  const ScanRender s = render_scan(f, spec.intrinsics, Pose::identity(), Pose::identity(), spec.params, opt);
  const double step = opt.resolved_step(f);
  // Trilinear blur thickens every surface by up to a cell, which grazing rays
  // and silhouettes see over a long stretch; compare the rest.
  std::size_t both = 0, within = 0;
  for (int i = 1; i < 31; ++i)
    for (int j = 0; j < 256; ++j) {
      if (!truth.truth.valid(i, j) || !s.image.valid(i, j)) continue;
      if (truth.cos_incidence(i, j) < 0.5) continue;
      bool interior = true;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj)
          interior = interior && truth.primitive(i + di, (j + dj + 256) % 256) == truth.primitive(i, j);
      if (!interior) continue;
      ++both;
      within += std::abs(truth.truth.depth(i, j) - s.image.depth(i, j)) <= step ? 1 : 0;
    }
  MESSAGE(within << " of " << both << " within " << step << " m");
  CHECK(both > 4000);
  CHECK(static_cast<double>(within) >= 0.97 * static_cast<double>(both));
}

TEST_CASE("camera rays aligned with scan rays see the same surface") {
  SceneSpec spec = room();
  spec.intrinsics = SensorIntrinsics::single_unit(255, 33, -20 * kDeg, 20 * kDeg);
  spec.params = IntensityParams::defaults(33);
  const VoxelField f = room_field(spec);
  const ScanRender s = render_scan(f, spec.intrinsics, Pose::identity(), Pose::identity(), spec.params);
  const Ray r = ray_from_pixel(16, 127, spec.intrinsics);
  REQUIRE((r.direction - Eigen::Vector3d::UnitX()).norm() < 1e-12);
  Eigen::Matrix3d cam_to_world;
  cam_to_world.col(0) = -Eigen::Vector3d::UnitY();
  cam_to_world.col(1) = -Eigen::Vector3d::UnitZ();
  cam_to_world.col(2) = Eigen::Vector3d::UnitX();
  const Pose pose(Eigen::Vector3d::Zero(), Eigen::Quaterniond(cam_to_world));
  const Pinhole cam{100.0, 100.0, 32.0, 24.0, 64, 48};
  const CameraRender c = render_camera(f, cam, pose, spec.params);
  CHECK(c.render.depth(24, 32) == doctest::Approx(s.render.depth(16, 127)).epsilon(1e-3));
  CHECK(c.render.intensity_base(24, 32) == doctest::Approx(s.render.intensity_base(16, 127)).epsilon(1e-3));

  const Pinhole twice{200.0, 200.0, 64.0, 48.0, 128, 96};
  const CameraRender c2 = render_camera(f, twice, pose, spec.params);
  double worst = 0.0;
  for (int v = 0; v < 48; ++v)
    for (int u = 0; u < 64; ++u)
      worst = std::max(worst, std::abs(c.render.depth(v, u) - c2.render.depth(2 * v, 2 * u)));
  CHECK(worst < 1e-6);

  const VoxelField empty = VoxelField::empty(f.dims, f.cell_size, f.origin);
  const CameraRender e = render_camera(empty, cam, pose, spec.params);
  for (double t : e.render.transmittance_residual.values()) CHECK(t == 1.0);
  for (double w : e.render.weight_sum.values()) CHECK(w == 0.0);
  CHECK_THROWS_AS(render_camera(f, Pinhole{0.0, 1.0, 0, 0, 4, 4}, pose, spec.params), ConfigError);
}

TEST_CASE("fit at the planted truth starts at zero loss") {
  const SceneSpec spec = room();
  const VoxelField f = room_field(spec);
  IntensityParams params = spec.params;
  params.laser_powers = uniform_draws(32, 0.7, 1.0, 3);
  const ScanRender s = render_scan(f, spec.intrinsics, Pose::identity(), Pose::identity(), params);
  const std::vector<Observation> obs{{s.image, Pose::identity(), Pose::identity()}};
  FitOptions opt;
  opt.weights.drop = 0.0;
  const MaskSet masks = MaskSet::empty(32, 256);
  FitState state{f, params, {PoseOffset{}}};
  const FitLosses l = evaluate_fit(obs, spec.intrinsics, state, masks, opt);
  CHECK(l.total < 1e-8);

  IntensityParams start = params;
  for (auto& p : start.laser_powers) p = 1.0;
  FitFree free;
  free.laser = true;
  opt.optimizer.iterations = 30;
  opt.sensor_lr = 1e-2;
  const FitResult res = fit(obs, spec.intrinsics, f, start, masks, opt, free);
  REQUIRE(res.history.size() == 31);
  for (std::size_t k = 1; k < res.history.size(); ++k) CHECK(res.history[k] <= res.history[k - 1]);
  CHECK(res.history.back() < res.raw_history.front());
  CHECK_THROWS_AS(fit(obs, spec.intrinsics, f, start, masks, opt, FitFree{}), ConfigError);
}

TEST_CASE("pose offsets undo a perturbed pose") {
  const SceneSpec spec = room();
  const VoxelField f = room_field(spec);
  const ScanRender s = render_scan(f, spec.intrinsics, Pose::identity(), Pose::identity(), spec.params);
  const Pose bad(Eigen::Vector3d(0.3, 0.0, 0.0), Eigen::Quaterniond(Eigen::AngleAxisd(1.0 * kDeg, Eigen::Vector3d::UnitZ())));
  const std::vector<Observation> obs{{s.image, bad, bad}};
  FitOptions opt;
  opt.weights = {1.0, 0.0, 0.0, 0.0, 0.0};
  opt.pose_lr = 1e-2;
  opt.optimizer.iterations = 150;
  opt.optimizer.final_lr_fraction = 0.05;
  FitFree free;
  free.pose_offsets = true;
  const FitResult res = fit(obs, spec.intrinsics, f, spec.params, MaskSet::empty(32, 256), opt, free);
  const Pose fixed = apply_offset(bad, res.state.offsets[0]);
  CHECK(fixed.translation.norm() < 0.03);
  CHECK(fixed.rotation.angularDistance(Eigen::Quaterniond::Identity()) < 0.1 * kDeg);
}

TEST_CASE("gradient check with every output weight masked") {
  GradCheckOptions opt;
  opt.zero_upstream = true;
  opt.points = 10;
  const GradCheckReport r = grad_check(GradTarget::kRenderRay, opt);
  CHECK(r.comparisons > 0);
  CHECK(r.max_abs_analytic == 0.0);
  CHECK(r.max_abs_numeric == 0.0);
  CHECK(grad_check(GradTarget::kApplyModel).max_rel_error < 1e-4);
}
