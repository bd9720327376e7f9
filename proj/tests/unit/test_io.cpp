#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>

#include <Eigen/Geometry>

#include "doctest.h"
#include "pbl/error.hpp"
#include "pbl/io.hpp"
#include "pbl/synth.hpp"

using namespace pbl;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "pbl_test_io";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

void append_float(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
}

}  // namespace

TEST_CASE("kitti binaries") {
  std::vector<std::uint8_t> bytes;
  for (float v : {1.5f, -2.25f, 0.125f, 0.5f, 10.0f, 20.0f, -3.0f, 0.0f}) append_float(bytes, v);
  REQUIRE(bytes.size() == 32);
  const PointCloud cloud = parse_kitti_bin(bytes);
  REQUIRE(cloud.size() == 2);
  CHECK(cloud[0].position == Eigen::Vector3d(1.5, -2.25, 0.125));
  CHECK(cloud[0].intensity == 0.5);
  CHECK(cloud[1].position == Eigen::Vector3d(10.0, 20.0, -3.0));
  CHECK(cloud[1].intensity == 0.0);
  CHECK(encode_kitti_bin(cloud) == bytes);

  CHECK(parse_kitti_bin({}).empty());
  CHECK_THROWS_AS(parse_kitti_bin(std::vector<std::uint8_t>(17, 0)), IoError);

  std::vector<std::uint8_t> nan_bytes;
  for (float v : {std::nanf(""), 1.0f, 2.0f, 0.3f}) append_float(nan_bytes, v);
  const PointCloud flagged = parse_kitti_bin(nan_bytes);
  REQUIRE(flagged.size() == 1);
  CHECK(flagged[0].non_finite);

  const std::string path = temp_path("two.bin");
  write_kitti_bin(path, cloud);
  CHECK(std::filesystem::file_size(path) == 32);
  CHECK(read_kitti_bin(path).size() == 2);
}

TEST_CASE("range image pngs") {
  RangeImage img = RangeImage::blank(5, 3);
  img.set(1, 2, 10.0, 0.25);
  const std::string d = temp_path("d.png"), i = temp_path("i.png");
  write_range_png(img, d, i);
  CHECK(read_png_gray16(d).pixels[1 * 5 + 2] == 2560);
  CHECK(read_png_gray16(d).pixels[0] == 0);
  const RangeImage back = read_range_png(d, i);
  CHECK(back.depth(1, 2) == 10.0);
  CHECK(back.valid(1, 2) == 1);
  CHECK(back.valid(0, 0) == 0);
  CHECK(back.valid_count() == 1);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> depth(0.5, 250.0), inten(0.0, 1.0);
  RangeImage big = RangeImage::blank(64, 16);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 64; ++c)
      if ((r + c) % 5 != 0) big.set(r, c, depth(rng), inten(rng));
  write_range_png(big, d, i);
  const RangeImage b2 = read_range_png(d, i);
  double worst_d = 0.0, worst_i = 0.0;
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 64; ++c) {
      CHECK(b2.valid(r, c) == big.valid(r, c));
      worst_d = std::max(worst_d, std::abs(b2.depth(r, c) - big.depth(r, c)));
      worst_i = std::max(worst_i, std::abs(b2.intensity(r, c) - big.intensity(r, c)));
    }
  CHECK(worst_d <= 1.0 / (2.0 * kDefaultDepthScale));
  CHECK(worst_i <= 1.0 / (2.0 * 65535.0));

  RangeImage far = RangeImage::blank(2, 1);
  far.set(0, 0, 300.0, 0.1);
  CHECK_THROWS_AS(write_range_png(far, d, i), ConfigError);
}

TEST_CASE("intrinsics text round trip") {
  const SensorIntrinsics intr = hdl64e_intrinsics();
  const SensorIntrinsics back = parse_intrinsics(format_intrinsics(intr));
  CHECK(back.width == 1024);
  CHECK(back.height == 64);
  REQUIRE(back.units.size() == 2);
  CHECK(back.units[0].row_end == back.units[1].row_start);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(back.units[k].fov == intr.units[k].fov);
    CHECK(back.units[k].fov_offset == intr.units[k].fov_offset);
    CHECK(back.units[k].z_offset == intr.units[k].z_offset);
  }
  CHECK(back.diode_offsets == intr.diode_offsets);

  std::string text = format_intrinsics(intr);
  const std::string without_diodes = text.substr(0, text.find("[diodes]"));
  CHECK_THROWS_WITH_AS(parse_intrinsics(without_diodes), doctest::Contains("diode offsets required"), ConfigError);
  std::string future = text;
  future.replace(future.find("version = 1"), 11, "version = 2");
  CHECK_THROWS_AS(parse_intrinsics(future), ConfigError);
  CHECK_THROWS_AS(parse_intrinsics(text + "\nbogus = 1\n"), ConfigError);

  const std::string path = temp_path("intr.txt");
  write_intrinsics(path, intr);
  CHECK(read_intrinsics(path).diode_offsets == intr.diode_offsets);
}

TEST_CASE("intensity parameter round trip") {
  IntensityParams p = IntensityParams::defaults(4);
  p.laser_powers = {0.9, 1.1, 0.7321, 1.2999999};
  p.distance.near_model = NearModel::kLensDefocus;
  p.incidence_enabled = false;
  const IntensityParams back = parse_intensity_params(format_intensity_params(p));
  CHECK(back.laser_powers == p.laser_powers);
  CHECK(back.distance.near_model == NearModel::kLensDefocus);
  CHECK(back.distance.s_eta == p.distance.s_eta);
  CHECK(!back.incidence_enabled);
}

TEST_CASE("pose text") {
  const auto id = parse_poses("7 1 0 0 0 0 1 0 0 0 0 1 0\n");
  REQUIRE(id.size() == 1);
  CHECK(id[0].first == 7);
  CHECK(id[0].second.translation == Eigen::Vector3d::Zero());
  CHECK(id[0].second.rotation.angularDistance(Eigen::Quaterniond::Identity()) == 0.0);

  const auto rz = parse_poses("0 0 -1 0 1  1 0 0 2  0 0 1 3\n");
  const Eigen::Quaterniond q = rz[0].second.rotation;
  const double h = std::sqrt(0.5);
  CHECK(std::abs(std::abs(q.z()) - h) < 1e-12);
  CHECK(std::abs(std::abs(q.w()) - h) < 1e-12);
  CHECK(std::abs(q.x()) < 1e-12);
  CHECK(q.z() * q.w() > 0.0);
  CHECK(rz[0].second.translation == Eigen::Vector3d(1, 2, 3));

  const auto sorted = parse_poses("5 1 0 0 0 0 1 0 0 0 0 1 0\n2 1 0 0 0 0 1 0 0 0 0 1 0\n9 1 0 0 0 0 1 0 0 0 0 1 0\n");
  REQUIRE(sorted.size() == 3);
  CHECK(sorted[0].first == 2);
  CHECK(sorted[1].first == 5);
  CHECK(sorted[2].first == 9);
  CHECK_THROWS_AS(parse_poses("1 1 0 0 0 0 1 0 0 0 0 1 0\n1 1 0 0 0 0 1 0 0 0 0 1 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_poses("1 1.01 0 0 0 0 1 0 0 0 0 1 0\n"), ConfigError);

  std::vector<FramePose> many;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 20; ++k) {
    const Eigen::Quaterniond r = Eigen::Quaterniond(u(rng), u(rng), u(rng), u(rng)).normalized();
    many.emplace_back(k, Pose(Eigen::Vector3d(u(rng), u(rng), u(rng)) * 100, r));
  }
  const auto back = parse_poses(format_poses(many));
  for (std::size_t k = 0; k < many.size(); ++k) {
    CHECK((back[k].second.translation - many[k].second.translation).norm() < 1e-12);
    CHECK(back[k].second.rotation.angularDistance(many[k].second.rotation) < 1e-7);
  }
}

TEST_CASE("quaternion from matrix matches the rotation") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 200; ++k) {
    const Eigen::Quaterniond q = Eigen::Quaterniond(u(rng), u(rng), u(rng), u(rng)).normalized();
    const Eigen::Quaterniond r = quaternion_from_matrix(q.toRotationMatrix());
    CHECK(r.w() >= 0.0);
    CHECK((r.toRotationMatrix() - q.toRotationMatrix()).norm() < 1e-12);
  }
}

TEST_CASE("field checkpoint round trip") {
  VoxelField f = VoxelField::empty({3, 4, 5}, 0.25, Eigen::Vector3d(-1, 2, -0.5));
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (Channel c : {Channel::kDensity, Channel::kIntensity, Channel::kReflectivity, Channel::kDrop})
    for (auto& v : f.channel(c)) v = u(rng);
  const std::string path = temp_path("field.bin");
  write_field(path, f);
  const VoxelField back = read_field(path);
  CHECK(back.dims == f.dims);
  CHECK(back.cell_size == f.cell_size);
  CHECK(back.origin == f.origin);
  CHECK(back.density == f.density);
  CHECK(back.drop == f.drop);

  auto bytes = read_file_bytes(path);
  bytes.resize(bytes.size() - 3);
  write_file_bytes(path, bytes);
  CHECK_THROWS_AS(read_field(path), IoError);
}
