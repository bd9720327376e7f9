#include "pbl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include <Eigen/Geometry>

#include "pbl/config.hpp"
#include "pbl/error.hpp"
#include "pbl/io.hpp"
#include "pbl/parallel.hpp"

namespace pbl {
namespace {

constexpr double kHitEpsilon = 1e-9;
constexpr double kDeg = std::numbers::pi / 180.0;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double unit_double(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

Eigen::Matrix3d yaw_matrix(double yaw) {
  return Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

SurfaceHit facing(double t, Eigen::Vector3d n, const Eigen::Vector3d& d) {
  if (n.dot(d) > 0.0) n = -n;
  return SurfaceHit{t, n, -1};
}

}  // namespace

// --- Primitives ----------------------------------------------------------------------------------

Primitive Primitive::plane(const Eigen::Vector3d& point, const Eigen::Vector3d& normal,
                           double base_intensity, double reflectivity, double extent) {
  Primitive p;
  p.kind = PrimitiveKind::kPlane;
  p.center = point;
  p.normal = normal.normalized();
  p.extent = extent;
  p.base_intensity = base_intensity;
  p.reflectivity = reflectivity;
  return p;
}

Primitive Primitive::sphere(const Eigen::Vector3d& center, double radius, double base_intensity,
                            double reflectivity) {
  Primitive p;
  p.kind = PrimitiveKind::kSphere;
  p.center = center;
  p.radius = radius;
  p.base_intensity = base_intensity;
  p.reflectivity = reflectivity;
  return p;
}

Primitive Primitive::box(const Eigen::Vector3d& center, const Eigen::Vector3d& half_extent,
                         double yaw, double base_intensity, double reflectivity) {
  Primitive p;
  p.kind = PrimitiveKind::kBox;
  p.center = center;
  p.half_extent = half_extent;
  p.yaw = yaw;
  p.base_intensity = base_intensity;
  p.reflectivity = reflectivity;
  return p;
}

double Primitive::sdf(const Eigen::Vector3d& p) const {
  switch (kind) {
    case PrimitiveKind::kPlane: {
      const double h = normal.dot(p - center);
      if (extent <= 0.0) return h;
      const double radial = ((p - center) - h * normal).norm();
      return std::max(h, radial - extent);
    }
    case PrimitiveKind::kSphere:
      return (p - center).norm() - radius;
    case PrimitiveKind::kBox: {
      const Eigen::Vector3d local = yaw_matrix(-yaw) * (p - center);
      const Eigen::Vector3d q = local.cwiseAbs() - half_extent;
      return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
  }
  return std::numeric_limits<double>::infinity();
}

std::optional<SurfaceHit> intersect(const Primitive& prim, const Eigen::Vector3d& o,
                                    const Eigen::Vector3d& d, double max_t) {
  switch (prim.kind) {
    case PrimitiveKind::kPlane: {
      const double denom = prim.normal.dot(d);
      if (denom == 0.0) return std::nullopt;
      const double t = prim.normal.dot(prim.center - o) / denom;
      if (!(t > kHitEpsilon && t <= max_t)) return std::nullopt;
      if (prim.extent > 0.0 && (o + t * d - prim.center).norm() > prim.extent) return std::nullopt;
      return facing(t, prim.normal, d);
    }
    case PrimitiveKind::kSphere: {
      const Eigen::Vector3d oc = o - prim.center;
      const double b = d.dot(oc);
      const double c = oc.squaredNorm() - prim.radius * prim.radius;
      const double disc = b * b - c;
      if (disc < 0.0) return std::nullopt;
      const double t = -b - std::sqrt(disc);
      if (!(t > kHitEpsilon && t <= max_t)) return std::nullopt;
      return facing(t, (o + t * d - prim.center) / prim.radius, d);
    }
    case PrimitiveKind::kBox: {
      const Eigen::Matrix3d r = yaw_matrix(prim.yaw);
      const Eigen::Vector3d lo = r.transpose() * (o - prim.center);
      const Eigen::Vector3d ld = r.transpose() * d;
      double t_near = -std::numeric_limits<double>::infinity();
      double t_far = std::numeric_limits<double>::infinity();
      int axis = -1;
      for (int a = 0; a < 3; ++a) {
        const double h = prim.half_extent[a];
        if (ld[a] == 0.0) {
          if (std::abs(lo[a]) > h) return std::nullopt;
          continue;
        }
        double t1 = (-h - lo[a]) / ld[a];
        double t2 = (h - lo[a]) / ld[a];
        if (t1 > t2) std::swap(t1, t2);
        if (t1 > t_near) {
          t_near = t1;
          axis = a;
        }
        t_far = std::min(t_far, t2);
      }
      if (axis < 0 || t_near > t_far || !(t_near > kHitEpsilon && t_near <= max_t))
        return std::nullopt;
      Eigen::Vector3d n = Eigen::Vector3d::Zero();
      n[axis] = ld[axis] > 0.0 ? -1.0 : 1.0;
      return facing(t_near, r * n, d);
    }
  }
  return std::nullopt;
}

std::optional<SurfaceHit> cast_ray(const std::vector<Primitive>& prims, const Eigen::Vector3d& o,
                                   const Eigen::Vector3d& d, double max_t) {
  std::optional<SurfaceHit> best;
  for (std::size_t k = 0; k < prims.size(); ++k) {
    auto hit = intersect(prims[k], o, d, best ? best->t : max_t);
    if (hit && (!best || hit->t < best->t)) {
      hit->primitive = static_cast<int>(k);
      best = hit;
    }
  }
  return best;
}

// --- Scene ------------------------------------------------------------------------------------

void SceneSpec::validate() const {
  if (primitives.empty()) throw ConfigError("scene: at least one primitive is required");
  intrinsics.validate();
  params.validate();
  if (params.laser_powers.size() != static_cast<std::size_t>(intrinsics.height))
    throw ConfigError("scene: laser power count must equal the sensor height");
  if (trajectory.empty()) throw ConfigError("scene: trajectory needs at least one pose");
  if (!(noise.depth_sigma >= 0.0) || !(noise.intensity_sigma >= 0.0))
    throw ConfigError("scene: noise sigma must be >= 0");
  if (!(max_range > 0.0)) throw ConfigError("scene: max_range must be > 0");
  for (const auto& p : primitives) {
    if (!(p.base_intensity >= 0.0 && p.base_intensity <= 1.0) ||
        !(p.reflectivity >= 0.0 && p.reflectivity <= 1.0))
      throw ConfigError("scene: intensity and reflectivity must lie in [0, 1]");
    if (p.kind == PrimitiveKind::kSphere && !(p.radius > 0.0))
      throw ConfigError("scene: sphere radius must be > 0");
    if (p.kind == PrimitiveKind::kBox && !(p.half_extent.minCoeff() > 0.0))
      throw ConfigError("scene: box half extents must be > 0");
    if (p.kind == PrimitiveKind::kPlane && !(std::abs(p.normal.norm() - 1.0) < 1e-9))
      throw ConfigError("scene: plane normal must be non-zero");
  }
  for (const auto& r : dropped)
    if (r.row_begin < 0 || r.row_end > intrinsics.height || r.row_begin >= r.row_end ||
        r.col_begin < 0 || r.col_end > intrinsics.width || r.col_begin >= r.col_end)
      throw ConfigError("scene: drop rectangle outside the image");
}

std::pair<Pose, Pose> frame_poses(const SceneSpec& spec, int frame) {
  if (frame < 0 || frame >= spec.frame_count())
    throw ConfigError("frame " + std::to_string(frame) + " outside the trajectory");
  const auto& p0 = spec.trajectory[static_cast<std::size_t>(frame)];
  const auto& p1 = frame + 1 < spec.frame_count() ? spec.trajectory[static_cast<std::size_t>(frame + 1)] : p0;
  return {p0, p1};
}

double keyed_normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c,
                    std::uint64_t d) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  h = splitmix64(h ^ c);
  h = splitmix64(h ^ d);
  const double u1 = 1.0 - unit_double(h);  // (0, 1]
  const double u2 = unit_double(splitmix64(h));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<double> uniform_draws(std::size_t n, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = lo + (hi - lo) * unit_double(rng());
  return out;
}

SyntheticScan synthesize_scan(const SceneSpec& spec, int frame, int workers) {
  spec.validate();
  const auto& intr = spec.intrinsics;
  const int h = intr.height;
  const int w = intr.width;
  const auto [p0, p1] = frame_poses(spec, frame);
  const std::vector<Pose> poses =
      spec.shutter ? shutter_poses(p0, p1, w, spec.direction) : std::vector<Pose>(static_cast<std::size_t>(w), p0);

  SyntheticScan out;
  out.pose_begin = p0;
  out.pose_end = spec.shutter ? p1 : p0;
  out.observed = RangeImage::blank(w, h);
  out.truth = RangeImage::blank(w, h);
  out.normals = Grid<Eigen::Vector3d>(h, w, Eigen::Vector3d::Zero());
  out.cos_incidence = Grid<double>(h, w, 0.0);
  out.base_intensity = Grid<double>(h, w, 0.0);
  out.reflectivity = Grid<double>(h, w, 0.0);
  out.primitive = Grid<int>(h, w, -1);

  Grid<std::uint8_t> dropped(h, w, 0);
  for (const auto& r : spec.dropped)
    for (int i = r.row_begin; i < r.row_end; ++i)
      for (int j = r.col_begin; j < r.col_end; ++j) dropped(i, j) = 1;

  const std::size_t chunks = std::min<std::size_t>(static_cast<std::size_t>(w), 64);
  parallel_chunks(chunks, workers, [&](std::size_t chunk) {
    const auto [c0, c1] = chunk_range(static_cast<std::size_t>(w), chunks, chunk);
    for (int j = static_cast<int>(c0); j < static_cast<int>(c1); ++j) {
      const Pose& pose = poses[static_cast<std::size_t>(j)];
      for (int i = 0; i < h; ++i) {
        if (dropped(i, j)) continue;
        const Ray ray = ray_from_pixel(i, j, intr);
        const Eigen::Vector3d o = pose.apply(ray.origin);
        const Eigen::Vector3d d = pose.rotate(ray.direction).normalized();
        const auto hit = cast_ray(spec.primitives, o, d, spec.max_range);
        if (!hit) continue;
        const auto& prim = spec.primitives[static_cast<std::size_t>(hit->primitive)];
        const double cos_n = std::clamp(-hit->normal.dot(d), 0.0, 1.0);
        const double value = apply_model(prim.base_intensity, hit->t, cos_n, prim.reflectivity, i, spec.params);
        out.truth.set(i, j, hit->t, std::clamp(value, 0.0, 1.0));
        out.normals(i, j) = hit->normal;
        out.cos_incidence(i, j) = cos_n;
        out.base_intensity(i, j) = prim.base_intensity;
        out.reflectivity(i, j) = prim.reflectivity;
        out.primitive(i, j) = hit->primitive;

        const auto f = static_cast<std::uint64_t>(frame);
        const auto ui = static_cast<std::uint64_t>(i);
        const auto uj = static_cast<std::uint64_t>(j);
        double depth = hit->t;
        double inten = value;
        if (spec.noise.depth_sigma > 0.0) depth += spec.noise.depth_sigma * keyed_normal(spec.seed, f, ui, uj, 0);
        if (spec.noise.intensity_sigma > 0.0)
          inten += spec.noise.intensity_sigma * keyed_normal(spec.seed, f, ui, uj, 1);
        if (depth > 0.0) out.observed.set(i, j, depth, std::clamp(inten, 0.0, 1.0));
      }
    }
  });

  out.cloud.reserve(out.observed.valid_count());
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!out.observed.valid(i, j)) continue;
      const Ray ray = ray_from_pixel(i, j, intr);
      LidarPoint pt;
      pt.position = ray.origin + out.observed.depth(i, j) * ray.direction;
      pt.intensity = out.observed.intensity(i, j);
      pt.ring = i;
      pt.col = j;
      pt.time_frac = column_time(j, w, spec.direction);
      out.cloud.push_back(pt);
    }
  }
  return out;
}

VoxelField voxelize(const SceneSpec& spec, std::array<int, 3> dims, double cell_size,
                    const Eigen::Vector3d& origin, double sigma_max) {
  if (!(sigma_max >= 0.0)) throw ConfigError("voxelize: sigma_max must be >= 0");
  VoxelField field = VoxelField::empty(dims, cell_size, origin);
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const Eigen::Vector3d c = field.cell_center(x, y, z);
        double best = std::numeric_limits<double>::infinity();
        const Primitive* nearest = nullptr;
        for (const auto& p : spec.primitives) {
          const double s = p.sdf(c);
          if (s < best) {
            best = s;
            nearest = &p;
          }
        }
        const std::size_t k = field.index(x, y, z);
        field.density[k] = sigma_max * std::clamp(-best / cell_size, 0.0, 1.0);
        field.intensity[k] = nearest->base_intensity;
        field.reflectivity[k] = nearest->reflectivity;
        field.drop[k] = 0.0;
      }
  return field;
}

SensorIntrinsics hdl64e_intrinsics(int width) {
  SensorIntrinsics intr;
  intr.width = width;
  intr.height = 64;
  intr.units.push_back(UnitIntrinsics{10.7 * kDeg, 8.5 * kDeg, 0.03, 0, 32});
  intr.units.push_back(UnitIntrinsics{16.0 * kDeg, 24.6 * kDeg, -0.08, 32, 64});
  intr.diode_offsets.assign(64, 0.0);
  for (int u = 0; u < 2; ++u) {
    std::vector<double> v(32);
    for (int k = 0; k < 32; ++k)
      v[static_cast<std::size_t>(k)] = 1e-3 * std::sin(2.0 * std::numbers::pi * (3.0 + u) * (k + 0.5) / 32.0 + 0.7 * u);
    Eigen::MatrixXd basis(32, 2);
    for (int k = 0; k < 32; ++k) {
      basis(k, 0) = 1.0;
      basis(k, 1) = 1.0 - (k + 0.5) / 32.0;
    }
    Eigen::VectorXd vec = Eigen::Map<Eigen::VectorXd>(v.data(), 32);
    const Eigen::VectorXd coef = basis.colPivHouseholderQr().solve(vec);
    vec -= basis * coef;
    for (int k = 0; k < 32; ++k) intr.diode_offsets[static_cast<std::size_t>(32 * u + k)] = vec[k];
  }
  return intr;
}

// --- Scene text -----------------------------------------------------------------------------

namespace {

std::string resolve(const std::string& base_dir, const std::string& path) {
  const std::filesystem::path p(path);
  return p.is_absolute() ? path : (std::filesystem::path(base_dir) / p).string();
}

double get_unit_value(const ConfigDocument::Section& s, const char* key, double fallback) {
  const double v = s.get_double(key, fallback);
  if (!(v >= 0.0 && v <= 1.0)) s.fail(*s.find(key), std::string(key) + " must lie in [0, 1]");
  return v;
}

std::vector<double> parse_laser(const ConfigDocument::Section& s, int rows, std::uint64_t seed) {
  const auto* e = s.find("laser");
  if (!e) return std::vector<double>(static_cast<std::size_t>(rows), 1.0);
  std::istringstream in(e->value);
  std::string head;
  in >> head;
  try {
    if (head == "uniform") {
      std::string rest((std::istreambuf_iterator<char>(in)), {});
      const auto v = parse_doubles(rest);
      if (v.size() != 2 || !(v[0] > 0.0 && v[0] <= v[1]))
        s.fail(*e, "laser = uniform <lo> <hi> with 0 < lo <= hi");
      return uniform_draws(static_cast<std::size_t>(rows), v[0], v[1], s.get_u64("laser_seed", seed + 1));
    }
    if (head == "constant") {
      std::string rest((std::istreambuf_iterator<char>(in)), {});
      const double v = parse_double(rest);
      return std::vector<double>(static_cast<std::size_t>(rows), v);
    }
    const auto v = parse_doubles(e->value);
    if (v.size() != static_cast<std::size_t>(rows))
      s.fail(*e, "laser list needs " + std::to_string(rows) + " values");
    return v;
  } catch (const ConfigError& err) {
    if (std::string(err.what()).find(s.source) == 0) throw;
    s.fail(*e, err.what());
  }
}

}  // namespace

SceneSpec parse_scene(const std::string& text, const std::string& source,
                      const std::string& base_dir) {
  const auto doc = ConfigDocument::parse(text, source);
  doc.require_sections({"scene", "sensor", "params", "noise", "trajectory", "plane", "sphere", "box", "drop"});
  doc.root().require_known({});
  SceneSpec spec;

  if (const auto* s = doc.section("scene")) {
    s->require_known({"seed", "shutter", "direction", "max_range"});
    spec.seed = s->get_u64("seed", spec.seed);
    spec.shutter = s->get_bool("shutter", spec.shutter);
    spec.max_range = s->get_double("max_range", spec.max_range);
    const auto dir = s->get_string("direction", "forward");
    if (dir == "reverse") {
      spec.direction = ScanDirection::kReverse;
    } else if (dir != "forward") {
      s->fail(*s->find("direction"), "direction must be forward or reverse");
    }
  }

  const auto* sensor = doc.section("sensor");
  if (!sensor) throw ConfigError(source + ": missing [sensor] section");
  sensor->require_known({"preset", "file", "width", "height", "lowest_deg", "highest_deg", "z_offset"});
  const auto preset = sensor->get_string("preset", sensor->has("file") ? "file" : "hdl64e");
  try {
    if (preset == "hdl64e") {
      spec.intrinsics = hdl64e_intrinsics(sensor->get_int("width", 1024));
    } else if (preset == "uniform") {
      spec.intrinsics = SensorIntrinsics::single_unit(
          sensor->get_int("width"), sensor->get_int("height"), sensor->get_double("lowest_deg") * kDeg,
          sensor->get_double("highest_deg") * kDeg, sensor->get_double("z_offset", 0.0));
    } else if (preset == "file") {
      spec.intrinsics = read_intrinsics(resolve(base_dir, sensor->get_string("file")));
    } else {
      sensor->fail(*sensor->find("preset"), "preset must be hdl64e, uniform or file");
    }
    spec.intrinsics.validate();
  } catch (const ConfigError& e) {
    if (std::string(e.what()).rfind(source, 0) == 0) throw;
    sensor->fail(e.what());
  }
  const int rows = spec.intrinsics.height;

  spec.params = IntensityParams::defaults(rows);
  if (const auto* s = doc.section("params")) {
    s->require_known({"file", "laser", "laser_seed", "s", "q", "d_near", "s_eta", "q_eta", "k_steep", "a", "b",
                      "reflect_target"});
    if (s->has("file")) {
      spec.params = read_intensity_params(resolve(base_dir, s->get_string("file")));
    }
    auto& d = spec.params.distance;
    d.s = s->get_double("s", d.s);
    d.q = s->get_double("q", d.q);
    d.d_near = s->get_double("d_near", d.d_near);
    d.s_eta = s->get_double("s_eta", d.s_eta);
    d.q_eta = s->get_double("q_eta", d.q_eta);
    d.k_steep = s->get_double("k_steep", d.k_steep);
    spec.params.incidence_a = s->get_double("a", spec.params.incidence_a);
    spec.params.incidence_b = s->get_double("b", spec.params.incidence_b);
    spec.params.reflect_target = s->get_double("reflect_target", spec.params.reflect_target);
    if (s->has("laser") || !s->has("file")) spec.params.laser_powers = parse_laser(*s, rows, spec.seed);
    try {
      spec.params.validate();
    } catch (const ConfigError& e) {
      s->fail(e.what());
    }
  }

  if (const auto* s = doc.section("noise")) {
    s->require_known({"depth_sigma", "intensity_sigma"});
    spec.noise.depth_sigma = s->get_double("depth_sigma", 0.0);
    spec.noise.intensity_sigma = s->get_double("intensity_sigma", 0.0);
    if (spec.noise.depth_sigma < 0.0 || spec.noise.intensity_sigma < 0.0) s->fail("noise sigma must be >= 0");
  }

  if (const auto* s = doc.section("trajectory")) {
    s->require_known({"pose"}, {"pose"});
    for (const auto* e : s->find_all("pose")) {
      std::vector<double> v;
      try {
        v = parse_doubles(e->value);
      } catch (const ConfigError& err) {
        s->fail(*e, err.what());
      }
      if (v.size() != 4) s->fail(*e, "pose = x y z yaw_deg");
      spec.trajectory.emplace_back(Eigen::Vector3d(v[0], v[1], v[2]),
                                   Eigen::Quaterniond(Eigen::AngleAxisd(v[3] * kDeg, Eigen::Vector3d::UnitZ())));
    }
  }
  if (spec.trajectory.empty()) spec.trajectory.push_back(Pose::identity());

  for (const auto& sec : doc.sections()) {
    if (sec.name == "plane") {
      sec.require_known({"point", "normal", "extent", "intensity", "reflectivity"});
      const Eigen::Vector3d n = sec.get_vec3("normal", Eigen::Vector3d::UnitZ());
      if (!(n.norm() > 0.0)) sec.fail(*sec.find("normal"), "normal must be non-zero");
      spec.primitives.push_back(Primitive::plane(sec.get_vec3("point"), n, get_unit_value(sec, "intensity", 0.5),
                                                 get_unit_value(sec, "reflectivity", 0.5),
                                                 sec.get_double("extent", 0.0)));
    } else if (sec.name == "sphere") {
      sec.require_known({"center", "radius", "intensity", "reflectivity"});
      const double r = sec.get_double("radius");
      if (!(r > 0.0)) sec.fail(*sec.find("radius"), "radius must be > 0");
      spec.primitives.push_back(Primitive::sphere(sec.get_vec3("center"), r, get_unit_value(sec, "intensity", 0.5),
                                                  get_unit_value(sec, "reflectivity", 0.5)));
    } else if (sec.name == "box") {
      sec.require_known({"center", "half_extent", "yaw_deg", "intensity", "reflectivity"});
      const Eigen::Vector3d he = sec.get_vec3("half_extent");
      if (!(he.minCoeff() > 0.0)) sec.fail(*sec.find("half_extent"), "half_extent must be > 0");
      spec.primitives.push_back(Primitive::box(sec.get_vec3("center"), he, sec.get_double("yaw_deg", 0.0) * kDeg,
                                               get_unit_value(sec, "intensity", 0.5),
                                               get_unit_value(sec, "reflectivity", 0.5)));
    } else if (sec.name == "drop") {
      sec.require_known({"rows", "cols"});
      const auto r = sec.get_doubles("rows");
      const auto c = sec.get_doubles("cols");
      if (r.size() != 2 || c.size() != 2) sec.fail("rows and cols take two values each");
      spec.dropped.push_back(PixelRect{static_cast<int>(r[0]), static_cast<int>(r[1]), static_cast<int>(c[0]),
                                       static_cast<int>(c[1])});
    }
  }
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return spec;
}

SceneSpec load_scene(const std::string& path) {
  const auto dir = std::filesystem::path(path).parent_path().string();
  return parse_scene(read_text_file(path), path, dir.empty() ? "." : dir);
}

}  // namespace pbl
