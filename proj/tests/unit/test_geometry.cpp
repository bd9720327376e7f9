#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "pbl/error.hpp"
#include "pbl/geometry.hpp"
#include "pbl/synth.hpp"

using namespace pbl;

namespace {

constexpr double kPi = std::numbers::pi;

SensorIntrinsics two_unit_random(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SensorIntrinsics intr;
  intr.width = 256 + static_cast<int>(u(rng) * 512);
  intr.height = 32;
  const int split = 12 + static_cast<int>(u(rng) * 8);
  intr.units = {{0.1 + 0.1 * u(rng), 0.1 + 0.05 * u(rng), 0.1 * u(rng), 0, split},
                {0.2 + 0.1 * u(rng), 0.3 + 0.1 * u(rng), -0.1 * u(rng), split, 32}};
  intr.diode_offsets.resize(32);
  for (auto& d : intr.diode_offsets) d = 2e-4 * (u(rng) - 0.5);
  return intr;
}

}  // namespace

TEST_CASE("angles of points on the axes") {
  UnitIntrinsics unit{0.2, 0.0, 0.0, 0, 4};
  Angles a = angles_from_point({1, 0, 0}, unit, 0.0);
  CHECK(a.theta == 0.0);
  CHECK(a.phi == 0.0);
  a = angles_from_point({0, 1, 0}, unit, 0.0);
  CHECK(a.theta == 0.0);
  CHECK(a.phi == doctest::Approx(kPi / 2).epsilon(1e-15));
  unit.fov_offset = 0.1;
  a = angles_from_point({1, 0, 1}, unit, 0.01);
  CHECK(a.theta == doctest::Approx(kPi / 4 + 0.11).epsilon(1e-14));
  CHECK(a.phi == 0.0);
  CHECK_THROWS_AS(angles_from_point({0, 0, 0}, unit, 0.0), NumericError);
}

TEST_CASE("pixel coordinates by direct substitution") {
  const SensorIntrinsics intr = SensorIntrinsics::single_unit(1024, 64, -0.2, 0.1);
  const double f = intr.units[0].fov;
  PixelCoord pc = pixel_from_angles(f / 2, 0.0, intr, 0);
  CHECK(pc.row == doctest::Approx(32.0));
  CHECK(pc.col == doctest::Approx(512.0));
  pc = pixel_from_angles(f, kPi, intr, 0);
  CHECK(pc.row == doctest::Approx(0.0));
  CHECK(pc.col == doctest::Approx(0.0));
  pc = pixel_from_angles(0.75 * f, -kPi / 2, intr, 0);
  CHECK(pc.row == doctest::Approx(16.0));
  CHECK(pc.col == doctest::Approx(768.0));
}

TEST_CASE("azimuth is periodic and columns wrap into range") {
  const SensorIntrinsics intr = SensorIntrinsics::single_unit(1000, 8, -0.2, 0.1);
  for (double phi : {-3.0, -1.0, 0.3, 2.9}) {
    const PixelCoord a = pixel_from_angles(0.1, phi, intr, 0);
    const PixelCoord b = pixel_from_angles(0.1, phi + 2 * kPi, intr, 0);
    CHECK(a.col == doctest::Approx(b.col).epsilon(1e-9));
    CHECK(a.col >= 0.0);
    CHECK(a.col < 1000.0);
  }
}

TEST_CASE("forward rays") {
  SensorIntrinsics intr = SensorIntrinsics::single_unit(5, 3, -0.1, 0.1);
  Ray r = ray_from_pixel(1, 2, intr);
  CHECK(r.origin.norm() == 0.0);
  CHECK((r.direction - Eigen::Vector3d::UnitX()).norm() < 1e-15);
  intr = SensorIntrinsics::single_unit(6, 3, -0.1, 0.1);
  r = ray_from_pixel(1, 1, intr);
  CHECK((r.direction - Eigen::Vector3d::UnitY()).norm() < 1e-15);
}

TEST_CASE("ray to pixel round trip recovers pixel centers") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    const SensorIntrinsics intr = two_unit_random(rng);
    intr.validate();
    double worst = 0.0;
    for (int i = 0; i < intr.height; ++i) {
      const int k = intr.unit_of_row(i);
      for (int j = 0; j < intr.width; j += 7) {
        const Ray r = ray_from_pixel(i, j, intr);
        const Eigen::Vector3d p = r.origin + 7.5 * r.direction;
        const Angles a = angles_from_point(p, intr.units[static_cast<std::size_t>(k)], intr.diode_offsets[i]);
        const PixelCoord pc = pixel_from_angles(a.theta, a.phi, intr, k);
        worst = std::max({worst, std::abs(pc.row - (i + 0.5)), std::abs(pc.col - (j + 0.5))});
      }
    }
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("every pixel-center point lands on its own pixel") {
  std::mt19937_64 rng(4);
  std::vector<SensorIntrinsics> configs = {SensorIntrinsics::single_unit(360, 16, -0.4, 0.05),
                                           two_unit_random(rng)};
  for (const auto& intr : configs) {
    int misses = 0;
    for (int i = 0; i < intr.height; ++i)
      for (int j = 0; j < intr.width; j += 3)
        for (double d : {0.5, 9.0, 80.0}) {
          const Ray r = ray_from_pixel(i, j, intr);
          const auto hit = locate_point(r.origin + d * r.direction, intr);
          if (!hit || hit->row != i || hit->col != j) ++misses;
        }
    CHECK(misses == 0);
  }
}

TEST_CASE("project keeps the nearer of two colliding points") {
  const SensorIntrinsics intr = SensorIntrinsics::single_unit(64, 8, -0.2, 0.2);
  const Ray r = ray_from_pixel(3, 10, intr);
  PointCloud cloud(2);
  cloud[0].position = r.origin + 7.0 * r.direction;
  cloud[0].intensity = 0.2;
  cloud[1].position = r.origin + 5.0 * r.direction;
  cloud[1].intensity = 0.6;
  const Projection pr = project(cloud, intr);
  CHECK(pr.image.valid_count() == 1);
  CHECK(pr.image.depth(3, 10) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(pr.image.intensity(3, 10) == 0.6);
  CHECK(pr.stats.collisions == 1);
}

TEST_CASE("single point on a pixel-center ray") {
  const SensorIntrinsics intr = SensorIntrinsics::single_unit(64, 8, -0.2, 0.2);
  const Ray r = ray_from_pixel(5, 40, intr);
  PointCloud cloud(1);
  cloud[0].position = r.origin + 10.0 * r.direction;
  cloud[0].intensity = 0.37;
  const RangeImage img = project(cloud, intr).image;
  CHECK(img.valid_count() == 1);
  CHECK(img.depth(5, 40) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(img.intensity(5, 40) == 0.37);
}

TEST_CASE("project then unproject reproduces positions") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> range(0.5, 90.0);
  const SensorIntrinsics intr = two_unit_random(rng);
  PointCloud cloud;
  for (int i = 0; i < intr.height; ++i)
    for (int j = 0; j < intr.width; ++j) {
      const Ray r = ray_from_pixel(i, j, intr);
      LidarPoint p;
      p.position = r.origin + range(rng) * r.direction;
      cloud.push_back(p);
    }
  const Projection pr = project(cloud, intr);
  CHECK(pr.stats.projected == cloud.size());
  const PointCloud back = unproject(pr.image, intr);
  REQUIRE(back.size() == cloud.size());
  double worst = 0.0;
  for (std::size_t k = 0; k < back.size(); ++k)
    worst = std::max(worst, (back[k].position - cloud[k].position).norm());
  CHECK(worst < 1e-9);
}

TEST_CASE("unproject of trivial images") {
  const SensorIntrinsics intr = SensorIntrinsics::single_unit(32, 4, -0.2, 0.2, 0.5);
  RangeImage img = RangeImage::blank(32, 4);
  CHECK(unproject(img, intr).empty());
  img.set(2, 7, 3.0, 0.1);
  const PointCloud pts = unproject(img, intr);
  REQUIRE(pts.size() == 1);
  const Ray r = ray_from_pixel(2, 7, intr);
  CHECK((pts[0].position - (r.origin + 3.0 * r.direction)).norm() < 1e-12);
}

TEST_CASE("rows are owned by exactly one unit") {
  const SensorIntrinsics intr = hdl64e_intrinsics();
  for (int i = 0; i < intr.height; ++i) {
    int owners = 0;
    for (const auto& u : intr.units) owners += (i >= u.row_start && i < u.row_end) ? 1 : 0;
    CHECK(owners == 1);
  }
  SensorIntrinsics broken = intr;
  broken.units[1].row_start = 30;
  CHECK_THROWS_AS(broken.validate(), ConfigError);
}

TEST_CASE("pose interpolation") {
  const Pose p0(Eigen::Vector3d(0, 0, 0), Eigen::Quaterniond::Identity());
  const Pose p1(Eigen::Vector3d(2, 0, 0),
                Eigen::Quaterniond(Eigen::AngleAxisd(kPi / 2, Eigen::Vector3d::UnitZ())));
  const Pose a = interpolate_pose(p0, p1, 0.0);
  const Pose b = interpolate_pose(p0, p1, 1.0);
  CHECK(a.translation == p0.translation);
  CHECK(a.rotation.coeffs() == p0.rotation.coeffs());
  CHECK(b.translation == p1.translation);
  CHECK(b.rotation.coeffs() == p1.rotation.coeffs());
  const Pose mid = interpolate_pose(p0, p1, 0.5);
  CHECK((mid.translation - Eigen::Vector3d(1, 0, 0)).norm() < 1e-15);
  const Eigen::Quaterniond slerp = p0.rotation.slerp(0.5, p1.rotation);
  CHECK(mid.rotation.angularDistance(slerp) < 0.25 * kPi / 180);
  for (double t = 0.0; t <= 1.0; t += 0.1)
    CHECK(std::abs(interpolate_pose(p0, p1, t).rotation.norm() - 1.0) < 1e-9);
  for (double t : {0.2, 0.7}) {
    const Pose s = interpolate_pose(p1, p1, t);
    CHECK((s.translation - p1.translation).norm() < 1e-15);
    CHECK(s.rotation.angularDistance(p1.rotation) < 1e-12);
  }
}

TEST_CASE("interpolating opposite rotations is ambiguous") {
  const Pose p0 = Pose::identity();
  const Pose p1(Eigen::Vector3d::Zero(), Eigen::Quaterniond(Eigen::AngleAxisd(kPi, Eigen::Vector3d::UnitZ())));
  CHECK_THROWS_AS(interpolate_pose(p0, p1, 0.5), NumericError);
}

TEST_CASE("shutter poses") {
  const Pose p0 = Pose::identity();
  const Pose p1(Eigen::Vector3d(2, 0, 0), Eigen::Quaterniond::Identity());
  const auto one = shutter_poses(p0, p1, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0].translation == p0.translation);
  const auto still = shutter_poses(p1, p1, 16);
  for (const auto& p : still) CHECK(p.translation == p1.translation);
  const auto moving = shutter_poses(p0, p1, 1024);
  REQUIRE(moving.size() == 1024);
  CHECK(moving[512].translation.x() == doctest::Approx(1.0).epsilon(1e-12));
  const auto reverse = shutter_poses(p0, p1, 1024, ScanDirection::kReverse);
  CHECK(reverse.front().translation.x() > reverse.back().translation.x());
}
