#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pbl/field.hpp"
#include "pbl/geometry.hpp"
#include "pbl/sensor_model.hpp"

namespace pbl {

// --- KITTI velodyne binaries --------------------------------------------------------------

/// Little-endian float32 quadruples x, y, z, intensity; storage order is kept.
/// Non-finite coordinates are flagged, not dropped.
PointCloud read_kitti_bin(const std::string& path);
void write_kitti_bin(const std::string& path, const PointCloud& cloud);
PointCloud parse_kitti_bin(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_kitti_bin(const PointCloud& cloud);

// --- PNG -----------------------------------------------------------------------------------

inline constexpr double kDefaultDepthScale = 256.0;

/// Depth as 16-bit grayscale, value = round(depth * scale), 0 = invalid.
/// Intensity as 16-bit grayscale, value = round(intensity * 65535).
/// Throws ConfigError for values that do not fit in 16 bits.
void write_range_png(const RangeImage& img, const std::string& depth_path,
                     const std::string& intensity_path, double depth_scale = kDefaultDepthScale);
RangeImage read_range_png(const std::string& depth_path, const std::string& intensity_path,
                          double depth_scale = kDefaultDepthScale);

struct Gray16Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> pixels;
};
void write_png_gray16(const std::string& path, const Gray16Image& img);
Gray16Image read_png_gray16(const std::string& path);
/// 8-bit RGB, row-major, 3 bytes per pixel.
void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& rgb);
void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<std::uint8_t>& gray);
/// 16-bit RGB, row-major, 3 values per pixel.
void write_png_rgb16(const std::string& path, int width, int height,
                     const std::vector<std::uint16_t>& rgb);

// --- Text formats ---------------------------------------------------------------------------

inline constexpr int kFormatMajorVersion = 1;

/// `key = value` text with a [unit] section per unit and a [diodes] section.
SensorIntrinsics read_intrinsics(const std::string& path);
SensorIntrinsics parse_intrinsics(const std::string& text, const std::string& source = "<intrinsics>");
void write_intrinsics(const std::string& path, const SensorIntrinsics& intr);
std::string format_intrinsics(const SensorIntrinsics& intr);

IntensityParams read_intensity_params(const std::string& path);
IntensityParams parse_intensity_params(const std::string& text,
                                       const std::string& source = "<params>");
void write_intensity_params(const std::string& path, const IntensityParams& params);
std::string format_intensity_params(const IntensityParams& params);

/// One line per frame: id followed by the 12 row-major values of [R | t].
/// Output is sorted by id; duplicate ids and non-orthonormal rotations
/// (tolerance 1e-4) are rejected.
using FramePose = std::pair<long long, Pose>;
std::vector<FramePose> read_poses(const std::string& path);
std::vector<FramePose> parse_poses(const std::string& text, const std::string& source = "<poses>");
void write_poses(const std::string& path, const std::vector<FramePose>& poses);
std::string format_poses(const std::vector<FramePose>& poses);

/// Rotation matrix to unit quaternion with w >= 0.
Eigen::Quaterniond quaternion_from_matrix(const Eigen::Matrix3d& r);

// --- Field checkpoint ------------------------------------------------------------------------

/// "PBLFIELD", uint32 header length, JSON header, then float32 values channel by channel.
void write_field(const std::string& path, const VoxelField& field);
VoxelField read_field(const std::string& path);

// --- Small helpers -------------------------------------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace pbl
