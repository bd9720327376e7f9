#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "pbl/error.hpp"
#include "pbl/synth.hpp"

using namespace pbl;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

SceneSpec ground_only(double z_offset) {
  SceneSpec spec;
  spec.primitives = {Primitive::plane(Eigen::Vector3d(0, 0, -2.0), Eigen::Vector3d::UnitZ(), 0.5, 0.2)};
  spec.intrinsics = SensorIntrinsics::single_unit(8, 4, -30 * kDeg, -10 * kDeg, z_offset);
  spec.params = IntensityParams::defaults(4);
  spec.trajectory = {Pose::identity()};
  return spec;
}

SceneSpec busy_scene() {
  using V = Eigen::Vector3d;
  SceneSpec spec;
  spec.primitives = {Primitive::plane(V(0, 0, -1.7), V::UnitZ(), 0.5, 0.1),
                     Primitive::sphere(V(6, 2, 0), 1.5, 0.7, 0.4),
                     Primitive::box(V(-5, -3, 0), V(1, 2, 1.5), 0.4, 0.3, 0.2),
                     Primitive::plane(V(20, 0, 0), -V::UnitX(), 0.6, 0.3, 15.0)};
  spec.intrinsics = hdl64e_intrinsics(256);
  spec.params = IntensityParams::defaults(64);
  spec.params.laser_powers = uniform_draws(64, 0.8, 1.2, 9);
  spec.trajectory = {Pose::identity(), Pose(V(1.0, 0.2, 0), Eigen::Quaterniond(Eigen::AngleAxisd(0.05, V::UnitZ())))};
  spec.noise = {0.02, 0.01};
  spec.dropped = {PixelRect{60, 64, 100, 140}};
  return spec;
}

}  // namespace

TEST_CASE("nadir ray on a ground plane") {
  for (double zk : {0.0, 0.4}) {
    const SceneSpec spec = ground_only(zk);
    const SyntheticScan s = synthesize_scan(spec, 0);
    // Row 3 center: 0.5 / H of the fov above the lowest elevation.
    const double e = -30 * kDeg + 20 * kDeg * 0.5 / 4;
    for (int j = 0; j < 8; ++j) CHECK(s.truth.depth(3, j) == doctest::Approx(std::abs(-2.0 - zk) / std::sin(std::abs(e))).epsilon(1e-12));
  }
}

TEST_CASE("sphere centered on a ray") {
  SceneSpec spec = ground_only(0.0);
  spec.intrinsics = SensorIntrinsics::single_unit(64, 16, -10 * kDeg, 10 * kDeg);
  spec.params = IntensityParams::defaults(16);
  const Ray r = ray_from_pixel(7, 20, spec.intrinsics);
  spec.primitives = {Primitive::sphere(r.origin + 10.0 * r.direction, 1.5, 0.5, 0.5)};
  const SyntheticScan s = synthesize_scan(spec, 0);
  CHECK(s.truth.depth(7, 20) == doctest::Approx(8.5).epsilon(1e-12));
  CHECK(s.cos_incidence(7, 20) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.primitive(7, 20) == 0);
}

TEST_CASE("truth intensity follows the forward chain") {
  SceneSpec spec = busy_scene();
  spec.noise = {};
  const SyntheticScan s = synthesize_scan(spec, 0);
  int checked = 0;
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 256; j += 5) {
      if (!s.truth.valid(i, j)) continue;
      const double expected = std::clamp(
          apply_model(s.base_intensity(i, j), s.truth.depth(i, j), s.cos_incidence(i, j), s.reflectivity(i, j), i,
                      spec.params),
          0.0, 1.0);
      CHECK(s.truth.intensity(i, j) == doctest::Approx(expected).epsilon(1e-12));
      ++checked;
    }
  CHECK(checked > 1000);
}

TEST_CASE("scans are reproducible and independent of worker count") {
  const SceneSpec spec = busy_scene();
  const SyntheticScan a = synthesize_scan(spec, 0, 1);
  const SyntheticScan b = synthesize_scan(spec, 0, 1);
  const SyntheticScan c = synthesize_scan(spec, 0, 3);
  CHECK(a.observed.depth == b.observed.depth);
  CHECK(a.observed.intensity == b.observed.intensity);
  CHECK(a.observed.depth == c.observed.depth);
  CHECK(a.observed.intensity == c.observed.intensity);
  CHECK(a.observed.depth != a.truth.depth);
  SceneSpec other = spec;
  other.seed = spec.seed + 1;
  CHECK(synthesize_scan(other, 0).observed.depth != a.observed.depth);
}

TEST_CASE("dropped pixels never return and the cloud mirrors the image") {
  const SceneSpec spec = busy_scene();
  const SyntheticScan s = synthesize_scan(spec, 0);
  for (int i = 60; i < 64; ++i)
    for (int j = 100; j < 140; ++j) CHECK(s.observed.valid(i, j) == 0);
  CHECK(s.cloud.size() == s.observed.valid_count());
  for (const auto& p : s.cloud) {
    REQUIRE(p.ring);
    REQUIRE(p.col);
    CHECK(s.observed.valid(*p.ring, *p.col) == 1);
    CHECK(p.position.norm() > 0.0);
  }
  const auto [p0, p1] = frame_poses(spec, 0);
  CHECK(s.pose_begin.translation == p0.translation);
  CHECK(s.pose_end.translation == p1.translation);
  const auto last = frame_poses(spec, 1);
  CHECK(last.first.translation == last.second.translation);
}

TEST_CASE("voxelized densities follow the signed distance") {
  SceneSpec spec = ground_only(0.0);
  const VoxelField f = voxelize(spec, {4, 4, 8}, 0.5, Eigen::Vector3d(-1, -1, -4), 40.0);
  for (int z = 0; z < 8; ++z) {
    const double sdf = f.cell_center(0, 0, z).z() + 2.0;
    const double expected = 40.0 * std::clamp(-sdf / 0.5, 0.0, 1.0);
    CHECK(f.density[f.index(1, 2, z)] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(f.intensity[f.index(1, 2, z)] == 0.5);
    CHECK(f.drop[f.index(1, 2, z)] == 0.0);
  }
}

TEST_CASE("scene text") {
  const std::string text = R"(# demo
[scene]
seed = 3
shutter = false

[sensor]
preset = uniform
width = 32
height = 8
lowest_deg = -20
highest_deg = 5

[params]
laser = uniform 0.8 1.2

[trajectory]
pose = 0 0 0 0
pose = 1 0 0 10

[plane]
point = 0 0 -1.7
normal = 0 0 1

[sphere]
center = 5 0 0
radius = 1
intensity = 0.8
)";
  const SceneSpec spec = parse_scene(text);
  CHECK(spec.seed == 3);
  CHECK(!spec.shutter);
  CHECK(spec.intrinsics.width == 32);
  CHECK(spec.primitives.size() == 2);
  CHECK(spec.trajectory.size() == 2);
  CHECK(spec.params.laser_powers.size() == 8);
  for (double l : spec.params.laser_powers) {
    CHECK(l >= 0.8);
    CHECK(l < 1.2);
  }
  CHECK(spec.primitives[1].base_intensity == 0.8);

  std::string unknown = text;
  unknown.replace(unknown.find("radius = 1"), 10, "radus = 1");
  CHECK_THROWS_WITH_AS(parse_scene(unknown, "demo.cfg"), doctest::Contains("demo.cfg:"), ConfigError);
  std::string bad_radius = text;
  bad_radius.replace(bad_radius.find("radius = 1"), 10, "radius = 0");
  CHECK_THROWS_AS(parse_scene(bad_radius), ConfigError);
  CHECK_THROWS_AS(parse_scene("[plane]\npoint = 0 0 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_scene(text + "\n[moon]\n"), ConfigError);
}
