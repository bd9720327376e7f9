#include "pbl/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "pbl/error.hpp"

namespace pbl {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_col(double col, int width) {
  double c = std::fmod(col, static_cast<double>(width));
  if (c < 0.0) c += width;
  if (c >= width) c -= width;
  return c;
}

}  // namespace

// --- SensorIntrinsics --------------------------------------------------------

void SensorIntrinsics::validate() const {
  if (width < 1 || height < 1) throw ConfigError("intrinsics: width and height must be >= 1");
  if (units.empty() || units.size() > 2)
    throw ConfigError("intrinsics: expected one or two units, got " + std::to_string(units.size()));
  if (diode_offsets.size() != static_cast<std::size_t>(height))
    throw ConfigError("intrinsics: diode offsets required for every row (" +
                      std::to_string(diode_offsets.size()) + " given, " + std::to_string(height) +
                      " rows)");
  std::vector<int> owner(height, -1);
  for (std::size_t k = 0; k < units.size(); ++k) {
    const auto& u = units[k];
    if (!(u.fov > 0.0) || !std::isfinite(u.fov))
      throw ConfigError("intrinsics: unit " + std::to_string(k) + " fov must be > 0");
    if (!std::isfinite(u.fov_offset) || !std::isfinite(u.z_offset))
      throw ConfigError("intrinsics: unit " + std::to_string(k) + " offsets must be finite");
    if (u.row_start >= u.row_end)
      throw ConfigError("intrinsics: unit " + std::to_string(k) + " needs row_start < row_end");
    if (u.row_start < 0 || u.row_end > height)
      throw ConfigError("intrinsics: unit " + std::to_string(k) + " rows outside [0, H)");
    for (int r = u.row_start; r < u.row_end; ++r) {
      if (owner[r] != -1)
        throw ConfigError("intrinsics: row " + std::to_string(r) + " owned by two units");
      owner[r] = static_cast<int>(k);
    }
  }
  for (int r = 0; r < height; ++r)
    if (owner[r] == -1) throw ConfigError("intrinsics: row " + std::to_string(r) + " has no unit");
  const double fov_max = max_fov();
  for (int r = 0; r < height; ++r) {
    const double d = diode_offsets[r];
    if (!std::isfinite(d) || std::abs(d) >= fov_max)
      throw ConfigError("intrinsics: diode offset of row " + std::to_string(r) +
                        " must be finite and smaller than the fov");
  }
}

int SensorIntrinsics::unit_of_row(int row) const {
  for (std::size_t k = 0; k < units.size(); ++k)
    if (row >= units[k].row_start && row < units[k].row_end) return static_cast<int>(k);
  throw ConfigError("intrinsics: row " + std::to_string(row) + " outside every unit");
}

double SensorIntrinsics::max_fov() const {
  double m = 0.0;
  for (const auto& u : units) m = std::max(m, u.fov);
  return m;
}

SensorIntrinsics SensorIntrinsics::single_unit(int width, int height, double lowest_elevation,
                                               double highest_elevation, double z_offset) {
  SensorIntrinsics intr;
  intr.width = width;
  intr.height = height;
  intr.units.push_back(UnitIntrinsics{highest_elevation - lowest_elevation, -lowest_elevation,
                                      z_offset, 0, height});
  intr.diode_offsets.assign(height, 0.0);
  return intr;
}

// --- Pose ----------------------------------------------------------------------

Pose::Pose(const Eigen::Vector3d& t, const Eigen::Quaterniond& q)
    : translation(t), rotation(q.normalized()) {}

Pose Pose::inverse() const {
  Pose out;
  out.rotation = rotation.conjugate();
  out.translation = -(out.rotation * translation);
  return out;
}

Pose Pose::operator*(const Pose& rhs) const {
  Pose out;
  out.rotation = (rotation * rhs.rotation).normalized();
  out.translation = rotation * rhs.translation + translation;
  return out;
}

Eigen::Matrix<double, 3, 4> Pose::matrix3x4() const {
  Eigen::Matrix<double, 3, 4> m;
  m.leftCols<3>() = rotation.toRotationMatrix();
  m.col(3) = translation;
  return m;
}

// --- RangeImage ------------------------------------------------------------------

RangeImage RangeImage::blank(int width, int height) {
  RangeImage img;
  img.width = width;
  img.height = height;
  img.depth = Grid<double>(height, width, 0.0);
  img.intensity = Grid<double>(height, width, 0.0);
  img.valid = Grid<std::uint8_t>(height, width, 0);
  return img;
}

void RangeImage::set(int i, int j, double d, double intensity_value) {
  depth(i, j) = d;
  intensity(i, j) = intensity_value;
  valid(i, j) = d > 0.0 ? 1 : 0;
}

void RangeImage::clear(int i, int j) {
  depth(i, j) = 0.0;
  intensity(i, j) = 0.0;
  valid(i, j) = 0;
}

std::size_t RangeImage::valid_count() const {
  return static_cast<std::size_t>(
      std::count_if(valid.values().begin(), valid.values().end(), [](auto v) { return v != 0; }));
}

void RangeImage::validate() const {
  if (!depth.same_shape(height, width) || !intensity.same_shape(height, width) ||
      !valid.same_shape(height, width))
    throw ConfigError("range image: channel shapes disagree with width/height");
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const double d = depth(i, j);
      if (!std::isfinite(d) || d < 0.0 || !std::isfinite(intensity(i, j)))
        throw ConfigError("range image: non-finite or negative value at (" + std::to_string(i) +
                          ", " + std::to_string(j) + ")");
      if ((valid(i, j) != 0) != (d > 0.0))
        throw ConfigError("range image: valid flag disagrees with depth at (" +
                          std::to_string(i) + ", " + std::to_string(j) + ")");
    }
  }
}

// --- Angle / pixel conversions --------------------------------------------------

Angles angles_from_point(const Eigen::Vector3d& p, const UnitIntrinsics& unit, double delta) {
  const double rho = std::hypot(p.x(), p.y());
  const double dz = p.z() - unit.z_offset;
  if (rho == 0.0 && dz == 0.0) throw NumericError("degenerate point");
  Angles a;
  a.theta = std::atan2(dz, rho) + unit.fov_offset + delta;
  a.phi = std::atan2(p.y(), p.x());
  if (a.phi <= -kPi) a.phi = kPi;
  return a;
}

PixelCoord pixel_from_angles(double theta, double phi, const SensorIntrinsics& intr,
                             int unit_index) {
  const auto& u = intr.units.at(static_cast<std::size_t>(unit_index));
  PixelCoord pc;
  pc.row = u.row_start + (1.0 - theta / u.fov) * u.rows();
  pc.col = wrap_col((0.5 - phi / kTwoPi) * intr.width, intr.width);
  return pc;
}

double column_azimuth(double col, int width) { return (0.5 - col / width) * kTwoPi; }

double row_elevation(int row, const SensorIntrinsics& intr) {
  const auto& u = intr.units[static_cast<std::size_t>(intr.unit_of_row(row))];
  const double local = row - u.row_start + 0.5;
  return (1.0 - local / u.rows()) * u.fov - u.fov_offset - intr.diode_offsets[row];
}

Ray ray_from_pixel(int i, int j, const SensorIntrinsics& intr) {
  const auto& u = intr.units[static_cast<std::size_t>(intr.unit_of_row(i))];
  const double e = row_elevation(i, intr);
  const double phi = column_azimuth(j + 0.5, intr.width);
  Ray r;
  r.origin = u.origin();
  r.direction = Eigen::Vector3d(std::cos(e) * std::cos(phi), std::cos(e) * std::sin(phi),
                                std::sin(e));
  return r;
}

std::optional<PixelHit> locate_point(const Eigen::Vector3d& p, const SensorIntrinsics& intr) {
  std::optional<PixelHit> best;
  double best_score = 0.0;
  for (std::size_t k = 0; k < intr.units.size(); ++k) {
    const auto& u = intr.units[k];
    const double rho = std::hypot(p.x(), p.y());
    const double dz = p.z() - u.z_offset;
    if (rho == 0.0 && dz == 0.0) continue;
    const double elevation = std::atan2(dz, rho);
    double max_delta = 0.0;
    for (int r = u.row_start; r < u.row_end; ++r)
      max_delta = std::max(max_delta, std::abs(intr.diode_offsets[r]));
    const double rows_per_rad = u.rows() / u.fov;
    const double center = u.row_start + (1.0 - (elevation + u.fov_offset) / u.fov) * u.rows();
    const double reach = max_delta * rows_per_rad + 1.0;
    const int lo = std::max(u.row_start, static_cast<int>(std::floor(center - reach)));
    const int hi = std::min(u.row_end - 1, static_cast<int>(std::floor(center + reach)));
    for (int r = lo; r <= hi; ++r) {
      const double theta = elevation + u.fov_offset + intr.diode_offsets[r];
      const double row = u.row_start + (1.0 - theta / u.fov) * u.rows();
      if (static_cast<int>(std::floor(row)) != r) continue;
      const double score = std::abs(row - (r + 0.5));
      if (!best || score < best_score) {
        double phi = std::atan2(p.y(), p.x());
        if (phi <= -kPi) phi = kPi;
        PixelHit hit;
        hit.unit = static_cast<int>(k);
        hit.row = r;
        hit.coord = PixelCoord{row, wrap_col((0.5 - phi / kTwoPi) * intr.width, intr.width)};
        hit.col = std::min(intr.width - 1, static_cast<int>(std::floor(hit.coord.col)));
        hit.range = std::hypot(rho, dz);
        best = hit;
        best_score = score;
      }
    }
  }
  return best;
}

Projection project(const PointCloud& cloud, const SensorIntrinsics& intr) {
  intr.validate();
  Projection out;
  out.image = RangeImage::blank(intr.width, intr.height);
  out.image.src_row = Grid<int>(intr.height, intr.width, -1);
  out.image.src_col = Grid<int>(intr.height, intr.width, -1);
  auto& img = out.image;

  for (const auto& pt : cloud) {
    if (pt.non_finite || !pt.position.allFinite()) {
      ++out.stats.invalid;
      continue;
    }
    int row = 0;
    int col = 0;
    double range = 0.0;
    if (pt.ring) {
      row = *pt.ring;
      if (row < 0 || row >= intr.height) {
        ++out.stats.out_of_fov;
        continue;
      }
      const auto& u = intr.units[static_cast<std::size_t>(intr.unit_of_row(row))];
      const Eigen::Vector3d rel = pt.position - u.origin();
      range = rel.norm();
      if (range == 0.0) {
        ++out.stats.invalid;
        continue;
      }
      double phi = std::atan2(pt.position.y(), pt.position.x());
      if (phi <= -kPi) phi = kPi;
      col = std::min(intr.width - 1, static_cast<int>(std::floor(wrap_col(
                                          (0.5 - phi / kTwoPi) * intr.width, intr.width))));
    } else {
      const auto hit = locate_point(pt.position, intr);
      if (!hit) {
        const bool degenerate = std::all_of(intr.units.begin(), intr.units.end(), [&](auto& u) {
          return (pt.position - u.origin()).squaredNorm() == 0.0;
        });
        ++(degenerate ? out.stats.invalid : out.stats.out_of_fov);
        continue;
      }
      row = hit->row;
      col = hit->col;
      range = hit->range;
    }
    if (img.valid(row, col)) {
      ++out.stats.collisions;
      if (!(range < img.depth(row, col))) continue;
    } else {
      ++out.stats.projected;
    }
    img.set(row, col, range, pt.intensity);
    (*img.src_row)(row, col) = pt.ring.value_or(row);
    (*img.src_col)(row, col) = pt.col.value_or(col);
  }
  return out;
}

double column_time(int j, int width, ScanDirection direction) {
  const int k = direction == ScanDirection::kForward ? j : width - 1 - j;
  return static_cast<double>(k) / static_cast<double>(width);
}

PointCloud unproject(const RangeImage& img, const SensorIntrinsics& intr,
                     std::span<const Pose> column_poses, ScanDirection direction) {
  if (img.width != intr.width || img.height != intr.height)
    throw ConfigError("unproject: image size does not match intrinsics");
  if (!column_poses.empty() && column_poses.size() != static_cast<std::size_t>(img.width))
    throw ConfigError("unproject: expected one pose per column");
  PointCloud cloud;
  cloud.reserve(img.valid_count());
  for (int i = 0; i < img.height; ++i) {
    for (int j = 0; j < img.width; ++j) {
      if (!img.valid(i, j)) continue;
      const Ray ray = ray_from_pixel(i, j, intr);
      LidarPoint pt;
      pt.position = ray.origin + img.depth(i, j) * ray.direction;
      if (!column_poses.empty()) pt.position = column_poses[static_cast<std::size_t>(j)].apply(pt.position);
      pt.intensity = img.intensity(i, j);
      pt.ring = i;
      pt.col = j;
      pt.time_frac = column_time(j, img.width, direction);
      cloud.push_back(pt);
    }
  }
  return cloud;
}

// --- Rolling shutter -------------------------------------------------------------

Pose interpolate_pose(const Pose& p0, const Pose& p1, double t, QuatInterpolation mode) {
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("interpolate_pose: t must lie in [0, 1]");
  if (t == 0.0) return p0;
  if (t == 1.0) return p1;
  if (p0.translation == p1.translation && p0.rotation.coeffs() == p1.rotation.coeffs()) return p0;
  Eigen::Quaterniond q0 = p0.rotation.normalized();
  Eigen::Quaterniond q1 = p1.rotation.normalized();
  double dot = q0.dot(q1);
  if (dot < 0.0) {
    q1.coeffs() = -q1.coeffs();
    dot = -dot;
  }
  if (dot < 1e-9) throw NumericError("ambiguous interpolation");
  Pose out;
  out.translation = (1.0 - t) * p0.translation + t * p1.translation;
  if (mode == QuatInterpolation::kSpherical) {
    out.rotation = q0.slerp(t, q1).normalized();
  } else {
    Eigen::Quaterniond q;
    q.coeffs() = (1.0 - t) * q0.coeffs() + t * q1.coeffs();
    out.rotation = q.normalized();
  }
  return out;
}

std::vector<Pose> shutter_poses(const Pose& p0, const Pose& p1, int width,
                                ScanDirection direction, QuatInterpolation mode) {
  if (width < 1) throw ConfigError("shutter_poses: width must be >= 1");
  std::vector<Pose> poses;
  poses.reserve(static_cast<std::size_t>(width));
  for (int j = 0; j < width; ++j)
    poses.push_back(interpolate_pose(p0, p1, column_time(j, width, direction), mode));
  return poses;
}

}  // namespace pbl
