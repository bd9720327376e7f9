#include "pbl/field.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pbl/error.hpp"
#include "pbl/parallel.hpp"

namespace pbl {
namespace {

constexpr double kStopTransmittance = 1e-10;

bool in_unit_range(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(),
                     [](double x) { return std::isfinite(x) && x >= 0.0 && x <= 1.0; });
}

/// Parametric interval of the ray inside the box, or false on a miss.
bool clip_to_box(const Eigen::Vector3d& lo, const Eigen::Vector3d& hi, const Eigen::Vector3d& o,
                 const Eigen::Vector3d& d, double& t0, double& t1) {
  t0 = -std::numeric_limits<double>::infinity();
  t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a];
    double tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t0 <= t1;
}

Eigen::Vector3d channel_gradient(const Trilinear& st, const std::vector<double>& values) {
  Eigen::Vector3d g = Eigen::Vector3d::Zero();
  for (std::size_t k = 0; k < 8; ++k) g += values[st.index[k]] * st.d_weight[k];
  return g;
}

void scatter(std::vector<double>* target, const Trilinear& st, double value) {
  if (!target || value == 0.0) return;
  for (std::size_t k = 0; k < 8; ++k) (*target)[st.index[k]] += value * st.weight[k];
}

}  // namespace

// --- VoxelField ---------------------------------------------------------------------------

VoxelField VoxelField::empty(std::array<int, 3> dims, double cell_size,
                             const Eigen::Vector3d& origin) {
  VoxelField f;
  f.dims = dims;
  f.cell_size = cell_size;
  f.origin = origin;
  if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1 || !(cell_size > 0.0))
    throw ConfigError("voxel field: dims must be >= 1 and cell_size > 0");
  const std::size_t n = f.cell_count();
  f.density.assign(n, 0.0);
  f.intensity.assign(n, 0.0);
  f.reflectivity.assign(n, 0.0);
  f.drop.assign(n, 0.0);
  return f;
}

std::size_t VoxelField::cell_count() const {
  return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
         static_cast<std::size_t>(dims[2]);
}

std::size_t VoxelField::index(int x, int y, int z) const {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(dims[0]) *
             (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
}

Eigen::Vector3d VoxelField::cell_center(int x, int y, int z) const {
  return origin + cell_size * Eigen::Vector3d(x + 0.5, y + 0.5, z + 0.5);
}

Eigen::Vector3d VoxelField::box_max() const {
  return origin + cell_size * Eigen::Vector3d(dims[0], dims[1], dims[2]);
}

std::vector<double>& VoxelField::channel(Channel c) {
  switch (c) {
    case Channel::kDensity: return density;
    case Channel::kIntensity: return intensity;
    case Channel::kReflectivity: return reflectivity;
    case Channel::kDrop: break;
  }
  return drop;
}

const std::vector<double>& VoxelField::channel(Channel c) const {
  return const_cast<VoxelField*>(this)->channel(c);
}

void VoxelField::validate() const {
  if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
    throw ConfigError("voxel field: dims must be >= 1");
  if (!(cell_size > 0.0) || !std::isfinite(cell_size))
    throw ConfigError("voxel field: cell_size must be > 0");
  if (!origin.allFinite()) throw ConfigError("voxel field: origin must be finite");
  const std::size_t n = cell_count();
  if (density.size() != n || intensity.size() != n || reflectivity.size() != n || drop.size() != n)
    throw ConfigError("voxel field: channel sizes do not match dims");
  if (!std::all_of(density.begin(), density.end(),
                   [](double s) { return std::isfinite(s) && s >= 0.0; }))
    throw ConfigError("voxel field: density must be finite and >= 0");
  if (!in_unit_range(intensity) || !in_unit_range(reflectivity) || !in_unit_range(drop))
    throw ConfigError("voxel field: intensity, reflectivity and drop must lie in [0, 1]");
}

Trilinear VoxelField::stencil(const Eigen::Vector3d& p) const {
  Trilinear st;
  const Eigen::Vector3d hi = box_max();
  for (int a = 0; a < 3; ++a)
    if (!(p[a] >= origin[a] && p[a] <= hi[a])) return st;
  st.inside = true;
  std::array<std::array<int, 2>, 3> idx{};
  std::array<std::array<double, 2>, 3> w{};
  std::array<std::array<double, 2>, 3> dw{};
  for (int a = 0; a < 3; ++a) {
    const double u = (p[a] - origin[a]) / cell_size - 0.5;
    const double fl = std::floor(u);
    const double f = u - fl;
    const int i0 = static_cast<int>(fl);
    idx[a][0] = std::clamp(i0, 0, dims[a] - 1);
    idx[a][1] = std::clamp(i0 + 1, 0, dims[a] - 1);
    w[a] = {1.0 - f, f};
    dw[a] = {-1.0 / cell_size, 1.0 / cell_size};
  }
  for (std::size_t k = 0; k < 8; ++k) {
    const int bx = static_cast<int>(k & 1);
    const int by = static_cast<int>((k >> 1) & 1);
    const int bz = static_cast<int>((k >> 2) & 1);
    st.index[k] = index(idx[0][bx], idx[1][by], idx[2][bz]);
    st.weight[k] = w[0][bx] * w[1][by] * w[2][bz];
    st.d_weight[k] = Eigen::Vector3d(dw[0][bx] * w[1][by] * w[2][bz],
                                     w[0][bx] * dw[1][by] * w[2][bz],
                                     w[0][bx] * w[1][by] * dw[2][bz]);
  }
  return st;
}

FieldSample VoxelField::sample(const Eigen::Vector3d& p) const {
  const Trilinear st = stencil(p);
  FieldSample s;
  if (!st.inside) return s;
  for (std::size_t k = 0; k < 8; ++k) {
    const std::size_t c = st.index[k];
    const double w = st.weight[k];
    s.density += w * density[c];
    s.intensity += w * intensity[c];
    s.reflectivity += w * reflectivity[c];
    s.drop += w * drop[c];
  }
  return s;
}

// --- Ray marching ---------------------------------------------------------------------------

RayOutput render_ray(const VoxelField& field, const Eigen::Vector3d& origin,
                     const Eigen::Vector3d& direction, double step, double max_range,
                     std::vector<RaySample>* trace) {
  if (!(step > 0.0)) throw ConfigError("render_ray: step must be > 0");
  if (std::abs(direction.norm() - 1.0) > 1e-6)
    throw ConfigError("render_ray: direction must be a unit vector");
  if (trace) trace->clear();
  RayOutput out;
  double t0 = 0.0;
  double t1 = 0.0;
  if (!clip_to_box(field.origin, field.box_max(), origin, direction, t0, t1)) {
    out.drop = 1.0;
    return out;
  }
  t0 = std::max(t0, 0.0);
  t1 = std::min(t1, max_range);
  double T = 1.0;
  if (t0 <= t1) {
    const long first = std::max(0L, static_cast<long>(std::ceil(t0 / step - 0.5)));
    for (long m = first;; ++m) {
      const double t = (static_cast<double>(m) + 0.5) * step;
      if (t > t1) break;
      const Eigen::Vector3d p = origin + t * direction;
      RaySample s;
      s.t = t;
      s.stencil = field.stencil(p);
      if (s.stencil.inside) {
        for (std::size_t k = 0; k < 8; ++k) {
          const std::size_t c = s.stencil.index[k];
          const double w = s.stencil.weight[k];
          s.value.density += w * field.density[c];
          s.value.intensity += w * field.intensity[c];
          s.value.reflectivity += w * field.reflectivity[c];
          s.value.drop += w * field.drop[c];
        }
      }
      const double keep = std::exp(-s.value.density * step);
      s.transmittance = T;
      s.alpha = 1.0 - keep;
      const double weight = T * s.alpha;
      out.depth += weight * t;
      out.intensity += weight * s.value.intensity;
      out.reflectivity += weight * s.value.reflectivity;
      out.drop += weight * s.value.drop;
      out.weight_sum += weight;
      T *= keep;
      if (trace) trace->push_back(s);
      if (T < kStopTransmittance) break;
    }
  }
  out.transmittance = T;
  out.drop += T;
  return out;
}

void backward_ray(const VoxelField& field, const std::vector<RaySample>& trace,
                  const RayOutput& out, double step, const RayUpstream& g,
                  const ChannelGradients& grads, Eigen::Vector3d* d_origin,
                  Eigen::Vector3d* d_direction) {
  const bool want_position = d_origin || d_direction;
  // Contribution of everything behind the current sample, including the
  // background term of the drop channel.
  double behind = g.drop * out.transmittance;
  for (std::size_t m = trace.size(); m-- > 0;) {
    const RaySample& s = trace[m];
    const double v = g.depth * s.t + g.intensity * s.value.intensity +
                     g.reflectivity * s.value.reflectivity + g.drop * s.value.drop;
    const double weight = s.transmittance * s.alpha;
    const double t_next = s.transmittance * (1.0 - s.alpha);
    const double d_sigma = step * (t_next * v - behind);
    behind += weight * v;
    if (!s.stencil.inside) continue;
    scatter(grads.density, s.stencil, d_sigma);
    scatter(grads.intensity, s.stencil, g.intensity * weight);
    scatter(grads.reflectivity, s.stencil, g.reflectivity * weight);
    scatter(grads.drop, s.stencil, g.drop * weight);
    if (!want_position) continue;
    Eigen::Vector3d d_p = d_sigma * channel_gradient(s.stencil, field.density);
    if (g.intensity != 0.0)
      d_p += g.intensity * weight * channel_gradient(s.stencil, field.intensity);
    if (g.reflectivity != 0.0)
      d_p += g.reflectivity * weight * channel_gradient(s.stencil, field.reflectivity);
    if (g.drop != 0.0) d_p += g.drop * weight * channel_gradient(s.stencil, field.drop);
    if (d_origin) *d_origin += d_p;
    if (d_direction) *d_direction += s.t * d_p;
  }
}

}  // namespace pbl
