#include "pbl/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <png.h>

#include "json.hpp"

#include "pbl/config.hpp"
#include "pbl/error.hpp"

namespace pbl {
namespace {

// --- Little-endian float32 -----------------------------------------------------------------

float load_f32le(const std::uint8_t* p) {
  std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                    (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

void store_f32le(std::vector<std::uint8_t>& out, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  out.push_back(static_cast<std::uint8_t>(u & 0xffu));
  out.push_back(static_cast<std::uint8_t>((u >> 8) & 0xffu));
  out.push_back(static_cast<std::uint8_t>((u >> 16) & 0xffu));
  out.push_back(static_cast<std::uint8_t>((u >> 24) & 0xffu));
}

void store_u32le(std::vector<std::uint8_t>& out, std::uint32_t u) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>((u >> (8 * k)) & 0xffu));
}

std::uint32_t load_u32le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

// --- libpng ------------------------------------------------------------------------------------

/// Rows are given as packed big-endian bytes, as PNG stores them.
bool png_write_rows(const char* path, int width, int height, int bit_depth, int color_type,
                    const std::uint8_t* data, std::size_t stride) {
  FILE* fp = std::fopen(path, "wb");
  if (!fp) return false;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::fclose(fp) == 0;
}

struct PngRaw {
  int width = 0;
  int height = 0;
  int bit_depth = 0;
  int color_type = 0;
  std::vector<std::uint8_t> data;
  std::size_t stride = 0;
};

bool png_read_rows(const char* path, PngRaw& out) {
  FILE* fp = std::fopen(path, "rb");
  if (!fp) return false;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  out.color_type = png_get_color_type(png, info);
  out.stride = png_get_rowbytes(png, info);
  out.data.resize(out.stride * static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y)
    png_read_row(png, out.data.data() + static_cast<std::size_t>(y) * out.stride, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return true;
}

std::uint16_t to_u16(double value, const char* what, int i, int j) {
  const double r = std::round(value);
  if (!(r >= 0.0 && r <= 65535.0))
    throw ConfigError(std::string(what) + " at (" + std::to_string(i) + ", " + std::to_string(j) +
                      ") does not fit in 16 bits");
  return static_cast<std::uint16_t>(r);
}

int major_version(const ConfigDocument::Section& root, const char* what) {
  const auto* e = root.find("version");
  if (!e) root.fail(std::string(what) + ": missing 'version'");
  double v = 0.0;
  try {
    v = parse_double(e->value);
  } catch (const ConfigError&) {
    root.fail(*e, "version must be a number");
  }
  const int major = static_cast<int>(std::floor(v));
  if (major != kFormatMajorVersion)
    root.fail(*e, std::string(what) + ": unsupported major version " + std::to_string(major));
  return major;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (k) out += ' ';
    out += format_double(v[k]);
  }
  return out;
}

}  // namespace

// --- Files ---------------------------------------------------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text_file(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// --- KITTI ---------------------------------------------------------------------------------------

PointCloud parse_kitti_bin(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % 16 != 0)
    throw IoError("length not multiple of 16: " + std::to_string(bytes.size()) +
                  " bytes, truncated record at byte offset " +
                  std::to_string(bytes.size() - bytes.size() % 16));
  PointCloud cloud;
  cloud.reserve(bytes.size() / 16);
  for (std::size_t off = 0; off < bytes.size(); off += 16) {
    LidarPoint p;
    const float x = load_f32le(&bytes[off]);
    const float y = load_f32le(&bytes[off + 4]);
    const float z = load_f32le(&bytes[off + 8]);
    p.position = Eigen::Vector3d(x, y, z);
    p.intensity = load_f32le(&bytes[off + 12]);
    p.non_finite = !p.position.allFinite();
    cloud.push_back(p);
  }
  return cloud;
}

std::vector<std::uint8_t> encode_kitti_bin(const PointCloud& cloud) {
  std::vector<std::uint8_t> out;
  out.reserve(cloud.size() * 16);
  for (const auto& p : cloud) {
    store_f32le(out, static_cast<float>(p.position.x()));
    store_f32le(out, static_cast<float>(p.position.y()));
    store_f32le(out, static_cast<float>(p.position.z()));
    store_f32le(out, static_cast<float>(p.intensity));
  }
  return out;
}

PointCloud read_kitti_bin(const std::string& path) {
  try {
    return parse_kitti_bin(read_file_bytes(path));
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

void write_kitti_bin(const std::string& path, const PointCloud& cloud) {
  write_file_bytes(path, encode_kitti_bin(cloud));
}

// --- PNG -----------------------------------------------------------------------------------------

void write_png_gray16(const std::string& path, const Gray16Image& img) {
  if (img.width < 1 || img.height < 1 ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height))
    throw ConfigError("png: bad image size");
  std::vector<std::uint8_t> bytes;
  bytes.reserve(img.pixels.size() * 2);
  for (std::uint16_t v : img.pixels) {
    bytes.push_back(static_cast<std::uint8_t>(v >> 8));
    bytes.push_back(static_cast<std::uint8_t>(v & 0xffu));
  }
  if (!png_write_rows(path.c_str(), img.width, img.height, 16, PNG_COLOR_TYPE_GRAY, bytes.data(),
                      2 * static_cast<std::size_t>(img.width)))
    throw IoError("cannot write png " + path);
}

Gray16Image read_png_gray16(const std::string& path) {
  PngRaw raw;
  if (!png_read_rows(path.c_str(), raw)) throw IoError("cannot read png " + path);
  if (raw.color_type != PNG_COLOR_TYPE_GRAY || raw.bit_depth != 16)
    throw IoError(path + ": expected a 16-bit grayscale png");
  Gray16Image img;
  img.width = raw.width;
  img.height = raw.height;
  img.pixels.resize(static_cast<std::size_t>(raw.width) * static_cast<std::size_t>(raw.height));
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x) {
      const std::uint8_t* p = raw.data.data() + static_cast<std::size_t>(y) * raw.stride + 2 * static_cast<std::size_t>(x);
      img.pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(raw.width) + static_cast<std::size_t>(x)] =
          static_cast<std::uint16_t>((p[0] << 8) | p[1]);
    }
  return img;
}

void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& rgb) {
  if (width < 1 || height < 1 ||
      rgb.size() != 3 * static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
    throw ConfigError("png: bad image size");
  if (!png_write_rows(path.c_str(), width, height, 8, PNG_COLOR_TYPE_RGB, rgb.data(),
                      3 * static_cast<std::size_t>(width)))
    throw IoError("cannot write png " + path);
}

void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<std::uint8_t>& gray) {
  if (width < 1 || height < 1 ||
      gray.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
    throw ConfigError("png: bad image size");
  if (!png_write_rows(path.c_str(), width, height, 8, PNG_COLOR_TYPE_GRAY, gray.data(),
                      static_cast<std::size_t>(width)))
    throw IoError("cannot write png " + path);
}

void write_png_rgb16(const std::string& path, int width, int height,
                     const std::vector<std::uint16_t>& rgb) {
  if (width < 1 || height < 1 ||
      rgb.size() != 3 * static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
    throw ConfigError("png: bad image size");
  std::vector<std::uint8_t> bytes;
  bytes.reserve(rgb.size() * 2);
  for (std::uint16_t v : rgb) {
    bytes.push_back(static_cast<std::uint8_t>(v >> 8));
    bytes.push_back(static_cast<std::uint8_t>(v & 0xffu));
  }
  if (!png_write_rows(path.c_str(), width, height, 16, PNG_COLOR_TYPE_RGB, bytes.data(),
                      6 * static_cast<std::size_t>(width)))
    throw IoError("cannot write png " + path);
}

void write_range_png(const RangeImage& img, const std::string& depth_path,
                     const std::string& intensity_path, double depth_scale) {
  if (!(depth_scale > 0.0)) throw ConfigError("range png: depth scale must be > 0");
  img.validate();
  Gray16Image depth{img.width, img.height, {}};
  Gray16Image inten{img.width, img.height, {}};
  depth.pixels.reserve(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
  inten.pixels.reserve(depth.pixels.capacity());
  for (int i = 0; i < img.height; ++i) {
    for (int j = 0; j < img.width; ++j) {
      if (!img.valid(i, j)) {
        depth.pixels.push_back(0);
        inten.pixels.push_back(0);
        continue;
      }
      const std::uint16_t d = to_u16(img.depth(i, j) * depth_scale, "depth", i, j);
      if (d == 0)
        throw ConfigError("depth at (" + std::to_string(i) + ", " + std::to_string(j) +
                          ") rounds to the invalid code 0");
      depth.pixels.push_back(d);
      inten.pixels.push_back(to_u16(img.intensity(i, j) * 65535.0, "intensity", i, j));
    }
  }
  write_png_gray16(depth_path, depth);
  write_png_gray16(intensity_path, inten);
}

RangeImage read_range_png(const std::string& depth_path, const std::string& intensity_path,
                          double depth_scale) {
  if (!(depth_scale > 0.0)) throw ConfigError("range png: depth scale must be > 0");
  const Gray16Image depth = read_png_gray16(depth_path);
  const Gray16Image inten = read_png_gray16(intensity_path);
  if (depth.width != inten.width || depth.height != inten.height)
    throw IoError("range png: depth and intensity sizes differ");
  RangeImage img = RangeImage::blank(depth.width, depth.height);
  for (int i = 0; i < depth.height; ++i) {
    for (int j = 0; j < depth.width; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * static_cast<std::size_t>(depth.width) + static_cast<std::size_t>(j);
      if (depth.pixels[k] == 0) continue;
      img.set(i, j, depth.pixels[k] / depth_scale, inten.pixels[k] / 65535.0);
    }
  }
  return img;
}

// --- Intrinsics ------------------------------------------------------------------------------

std::string format_intrinsics(const SensorIntrinsics& intr) {
  intr.validate();
  std::ostringstream out;
  out << "# sensor intrinsics\n";
  out << "version = " << kFormatMajorVersion << "\n";
  out << "width = " << intr.width << "\n";
  out << "height = " << intr.height << "\n";
  for (const auto& u : intr.units) {
    out << "\n[unit]\n";
    out << "fov = " << format_double(u.fov) << "\n";
    out << "fov_offset = " << format_double(u.fov_offset) << "\n";
    out << "z_offset = " << format_double(u.z_offset) << "\n";
    out << "row_start = " << u.row_start << "\n";
    out << "row_end = " << u.row_end << "\n";
  }
  out << "\n[diodes]\n";
  out << "offsets = " << join_doubles(intr.diode_offsets) << "\n";
  return out.str();
}

SensorIntrinsics parse_intrinsics(const std::string& text, const std::string& source) {
  const auto doc = ConfigDocument::parse(text, source);
  doc.require_sections({"unit", "diodes"});
  const auto& root = doc.root();
  root.require_known({"version", "width", "height"});
  major_version(root, "intrinsics");
  SensorIntrinsics intr;
  intr.width = root.get_int("width");
  intr.height = root.get_int("height");
  for (const auto* s : doc.sections_named("unit")) {
    s->require_known({"fov", "fov_offset", "z_offset", "row_start", "row_end"});
    UnitIntrinsics u;
    u.fov = s->get_double("fov");
    u.fov_offset = s->get_double("fov_offset");
    u.z_offset = s->get_double("z_offset", 0.0);
    u.row_start = s->get_int("row_start");
    u.row_end = s->get_int("row_end");
    intr.units.push_back(u);
  }
  const auto* diodes = doc.section("diodes");
  if (!diodes || !diodes->has("offsets"))
    throw ConfigError(source + ": diode offsets required");
  diodes->require_known({"offsets"});
  intr.diode_offsets = diodes->get_doubles("offsets");
  try {
    intr.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return intr;
}

SensorIntrinsics read_intrinsics(const std::string& path) {
  return parse_intrinsics(read_text_file(path), path);
}

void write_intrinsics(const std::string& path, const SensorIntrinsics& intr) {
  write_text_file(path, format_intrinsics(intr));
}

// --- Intensity parameters ----------------------------------------------------------------------

std::string format_intensity_params(const IntensityParams& p) {
  p.validate();
  const auto& d = p.distance;
  std::ostringstream out;
  out << "# intensity model parameters\n";
  out << "version = " << kFormatMajorVersion << "\n";
  out << "\n[distance]\n";
  out << "s = " << format_double(d.s) << "\n";
  out << "q = " << format_double(d.q) << "\n";
  out << "d_near = " << format_double(d.d_near) << "\n";
  out << "s_eta = " << format_double(d.s_eta) << "\n";
  out << "q_eta = " << format_double(d.q_eta) << "\n";
  out << "k_steep = " << format_double(d.k_steep) << "\n";
  out << "near_model = " << (d.near_model == NearModel::kLensDefocus ? "lens_defocus" : "fractional_power") << "\n";
  out << "lens_s_eta = " << format_double(d.lens.s_eta) << "\n";
  out << "lens_delta_offset = " << format_double(d.lens.delta_offset) << "\n";
  out << "\n[incidence]\n";
  out << "a = " << format_double(p.incidence_a) << "\n";
  out << "b = " << format_double(p.incidence_b) << "\n";
  out << "reflect_target = " << format_double(p.reflect_target) << "\n";
  out << "reflect_scale = " << format_double(p.reflect_scale) << "\n";
  out << "\n[laser]\n";
  out << "powers = " << join_doubles(p.laser_powers) << "\n";
  out << "\n[enabled]\n";
  out << "distance = " << (p.distance_enabled ? "true" : "false") << "\n";
  out << "laser = " << (p.laser_enabled ? "true" : "false") << "\n";
  out << "incidence = " << (p.incidence_enabled ? "true" : "false") << "\n";
  return out.str();
}

IntensityParams parse_intensity_params(const std::string& text, const std::string& source) {
  const auto doc = ConfigDocument::parse(text, source);
  doc.require_sections({"distance", "incidence", "laser", "enabled"});
  doc.root().require_known({"version"});
  major_version(doc.root(), "intensity params");
  IntensityParams p;
  if (const auto* s = doc.section("distance")) {
    s->require_known({"s", "q", "d_near", "s_eta", "q_eta", "k_steep", "near_model", "lens_s_eta",
                      "lens_delta_offset"});
    auto& d = p.distance;
    d.s = s->get_double("s", d.s);
    d.q = s->get_double("q", d.q);
    d.d_near = s->get_double("d_near", d.d_near);
    d.s_eta = s->get_double("s_eta", d.s_eta);
    d.q_eta = s->get_double("q_eta", d.q_eta);
    d.k_steep = s->get_double("k_steep", d.k_steep);
    d.lens.s_eta = s->get_double("lens_s_eta", d.lens.s_eta);
    d.lens.delta_offset = s->get_double("lens_delta_offset", d.lens.delta_offset);
    const auto model = s->get_string("near_model", "fractional_power");
    if (model == "lens_defocus") {
      d.near_model = NearModel::kLensDefocus;
    } else if (model != "fractional_power") {
      s->fail(*s->find("near_model"), "near_model must be fractional_power or lens_defocus");
    }
  }
  if (const auto* s = doc.section("incidence")) {
    s->require_known({"a", "b", "reflect_target", "reflect_scale"});
    p.incidence_a = s->get_double("a", p.incidence_a);
    p.incidence_b = s->get_double("b", p.incidence_b);
    p.reflect_target = s->get_double("reflect_target", p.reflect_target);
    p.reflect_scale = s->get_double("reflect_scale", p.reflect_scale);
  }
  const auto* laser = doc.section("laser");
  if (!laser || !laser->has("powers")) throw ConfigError(source + ": laser powers required");
  laser->require_known({"powers"});
  p.laser_powers = laser->get_doubles("powers");
  if (const auto* s = doc.section("enabled")) {
    s->require_known({"distance", "laser", "incidence"});
    p.distance_enabled = s->get_bool("distance", true);
    p.laser_enabled = s->get_bool("laser", true);
    p.incidence_enabled = s->get_bool("incidence", true);
  }
  try {
    p.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return p;
}

IntensityParams read_intensity_params(const std::string& path) {
  return parse_intensity_params(read_text_file(path), path);
}

void write_intensity_params(const std::string& path, const IntensityParams& params) {
  write_text_file(path, format_intensity_params(params));
}

// --- Poses -------------------------------------------------------------------------------------

Eigen::Quaterniond quaternion_from_matrix(const Eigen::Matrix3d& r) {
  // Eigen picks the numerically dominant of w, x, y, z before taking a root.
  Eigen::Quaterniond q(r);
  q.normalize();
  if (q.w() < 0.0) q.coeffs() *= -1.0;
  return q;
}

std::vector<FramePose> parse_poses(const std::string& text, const std::string& source) {
  std::vector<FramePose> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::map<long long, int> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string id_text;
    if (!(ls >> id_text)) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    long long id = 0;
    try {
      std::size_t used = 0;
      id = std::stoll(id_text, &used);
      if (used != id_text.size()) throw std::invalid_argument("id");
    } catch (const std::exception&) {
      throw ConfigError(where + "frame id must be an integer");
    }
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) {
      try {
        v.push_back(parse_double(tok));
      } catch (const ConfigError& e) {
        throw ConfigError(where + e.what());
      }
    }
    if (v.size() != 12) throw ConfigError(where + "expected 12 values after the frame id");
    Eigen::Matrix3d r;
    Eigen::Vector3d t;
    for (int row = 0; row < 3; ++row) {
      for (int c = 0; c < 3; ++c) r(row, c) = v[static_cast<std::size_t>(4 * row + c)];
      t[row] = v[static_cast<std::size_t>(4 * row + 3)];
    }
    if (!r.allFinite() || !t.allFinite()) throw ConfigError(where + "non-finite pose values");
    const double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (ortho > 1e-4 || r.determinant() < 0.0)
      throw ConfigError(where + "rotation is not orthonormal");
    if (auto [it, inserted] = seen.emplace(id, line_no); !inserted)
      throw ConfigError(where + "duplicate frame id " + std::to_string(id) + " (first on line " +
                        std::to_string(it->second) + ")");
    out.emplace_back(id, Pose(t, quaternion_from_matrix(r)));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

std::vector<FramePose> read_poses(const std::string& path) {
  return parse_poses(read_text_file(path), path);
}

std::string format_poses(const std::vector<FramePose>& poses) {
  std::ostringstream out;
  for (const auto& [id, pose] : poses) {
    const auto m = pose.matrix3x4();
    out << id;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) out << ' ' << format_double(m(r, c));
    out << '\n';
  }
  return out.str();
}

void write_poses(const std::string& path, const std::vector<FramePose>& poses) {
  write_text_file(path, format_poses(poses));
}

// --- Field checkpoint ------------------------------------------------------------------------

namespace {
constexpr char kFieldMagic[8] = {'P', 'B', 'L', 'F', 'I', 'E', 'L', 'D'};
constexpr const char* kChannelNames[kChannelCount] = {"density", "intensity", "reflectivity", "drop"};
}  // namespace

void write_field(const std::string& path, const VoxelField& field) {
  field.validate();
  nlohmann::ordered_json header;
  header["format"] = "pbl-field";
  header["version"] = "1.0";
  header["dims"] = {field.dims[0], field.dims[1], field.dims[2]};
  header["cell_size"] = field.cell_size;
  header["origin"] = {field.origin.x(), field.origin.y(), field.origin.z()};
  header["channels"] = {kChannelNames[0], kChannelNames[1], kChannelNames[2], kChannelNames[3]};
  header["dtype"] = "float32-le";
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kFieldMagic), std::end(kFieldMagic));
  store_u32le(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + 4 * kChannelCount * field.cell_count());
  for (std::size_t c = 0; c < kChannelCount; ++c)
    for (double v : field.channel(static_cast<Channel>(c))) store_f32le(out, static_cast<float>(v));
  write_file_bytes(path, out);
}

VoxelField read_field(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 12 || !std::equal(std::begin(kFieldMagic), std::end(kFieldMagic), bytes.begin()))
    throw IoError(path + ": not a field checkpoint");
  const std::uint32_t len = load_u32le(&bytes[8]);
  if (bytes.size() < 12 + static_cast<std::size_t>(len)) throw IoError(path + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad header: " + e.what());
  }
  VoxelField field;
  std::vector<std::string> channels;
  try {
    const std::string version = header.at("version").get<std::string>();
    const int major = std::stoi(version.substr(0, version.find('.')));
    if (major != kFormatMajorVersion)
      throw IoError(path + ": unsupported major version " + std::to_string(major));
    const auto dims = header.at("dims").get<std::vector<int>>();
    const auto origin = header.at("origin").get<std::vector<double>>();
    channels = header.at("channels").get<std::vector<std::string>>();
    if (dims.size() != 3 || origin.size() != 3) throw IoError(path + ": dims/origin need 3 values");
    field = VoxelField::empty({dims[0], dims[1], dims[2]}, header.at("cell_size").get<double>(),
                              Eigen::Vector3d(origin[0], origin[1], origin[2]));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad header: " + e.what());
  } catch (const std::invalid_argument&) {
    throw IoError(path + ": bad version string");
  } catch (const ConfigError& e) {
    throw IoError(path + ": " + e.what());
  }
  const std::size_t n = field.cell_count();
  const std::size_t need = 12 + static_cast<std::size_t>(len) + 4 * n * channels.size();
  if (bytes.size() != need)
    throw IoError(path + ": expected " + std::to_string(need) + " bytes, found " +
                  std::to_string(bytes.size()));
  std::size_t off = 12 + static_cast<std::size_t>(len);
  for (const auto& name : channels) {
    const auto* it = std::find(std::begin(kChannelNames), std::end(kChannelNames), name);
    if (it == std::end(kChannelNames)) throw IoError(path + ": unknown channel '" + name + "'");
    auto& dst = field.channel(static_cast<Channel>(it - std::begin(kChannelNames)));
    for (std::size_t k = 0; k < n; ++k, off += 4) dst[k] = load_f32le(&bytes[off]);
  }
  try {
    field.validate();
  } catch (const ConfigError& e) {
    throw IoError(path + ": " + e.what());
  }
  return field;
}

}  // namespace pbl
