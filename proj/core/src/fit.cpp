#include "pbl/fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include <Eigen/Geometry>

#include "pbl/normals.hpp"
#include "pbl/parallel.hpp"

namespace pbl {
namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
constexpr std::size_t kDistanceSlots = 6;
constexpr std::size_t kMaxChunks = 16;
constexpr double kChunkBudgetBytes = 256.0 * 1024.0 * 1024.0;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double softplus_inverse(double y) {
  y = std::max(y, 1e-8);
  return y > 30.0 ? y : std::log(std::expm1(y));
}
double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
double logit(double y) {
  y = std::clamp(y, 1e-6, 1.0 - 1e-6);
  return std::log(y / (1.0 - y));
}
double safe_log(double y) { return std::log(std::max(y, 1e-12)); }

Eigen::Matrix3d rotation_matrix(const Eigen::Vector3d& w) {
  const double angle = w.norm();
  if (angle == 0.0) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
}

/// Offsets of each parameter group inside the unconstrained vector.
struct Layout {
  std::array<std::size_t, kChannelCount> channel{kNone, kNone, kNone, kNone};
  std::size_t distance = kNone;
  std::size_t laser = kNone;
  std::size_t incidence = kNone;
  std::size_t pose = kNone;
  std::size_t size = 0;

  Layout(const FitFree& free, std::size_t cells, std::size_t rows, std::size_t frames) {
    const bool ch[kChannelCount] = {free.density, free.intensity, free.reflectivity, free.drop};
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      if (!ch[c]) continue;
      channel[c] = size;
      size += cells;
    }
    if (free.distance) {
      distance = size;
      size += kDistanceSlots;
    }
    if (free.laser) {
      laser = size;
      size += rows;
    }
    if (free.incidence) {
      incidence = size;
      size += 2;
    }
    if (free.pose_offsets) {
      pose = size;
      size += 6 * frames;
    }
  }
};

struct DistanceSlots {
  std::array<double*, kDistanceSlots> value;
  std::array<bool, kDistanceSlots> positive;
};

DistanceSlots distance_slots(DistanceParams& d) {
  if (d.near_model == NearModel::kLensDefocus)
    return {{&d.s, &d.q, &d.d_near, &d.k_steep, &d.lens.s_eta, &d.lens.delta_offset},
            {true, true, true, true, true, false}};
  return {{&d.s, &d.q, &d.d_near, &d.k_steep, &d.s_eta, &d.q_eta},
          {true, true, true, true, true, true}};
}

std::array<double, kDistanceSlots> distance_partials(const DistancePartials& p, NearModel m) {
  if (m == NearModel::kLensDefocus) return {p.s, p.q, p.d_near, p.k_steep, p.lens_s_eta, p.lens_delta};
  return {p.s, p.q, p.d_near, p.k_steep, p.s_eta, p.q_eta};
}

/// Sparse accumulation weights of one ray over cells, valid while density
/// and poses stay fixed.
struct RayCache {
  std::vector<std::size_t> begin;  ///< CSR offsets, one per ray plus one
  std::vector<std::size_t> cells;
  std::vector<double> coeff;
};

class FitEngine {
 public:
  FitEngine(const std::vector<Observation>& obs, const SensorIntrinsics& intr,
            const MaskSet& masks, const FitOptions& options, const FitFree& free,
            const FitState& base)
      : obs_(obs), intr_(intr), masks_(masks), options_(options), free_(free),
        layout_(free, base.field.cell_count(), static_cast<std::size_t>(intr.height), obs.size()) {
    if (obs.empty()) throw ConfigError("fit: at least one observation required");
    intr.validate();
    base.field.validate();
    base.params.validate();
    if (base.params.laser_powers.size() != static_cast<std::size_t>(intr.height))
      throw ConfigError("fit: need one laser power per row");
    if (base.offsets.size() != obs.size())
      throw ConfigError("fit: need one pose offset per observation");
    for (const auto& o : base.offsets) o.validate();
    const int h = intr.height;
    const int w = intr.width;
    auto sized = [&](const Grid<std::uint8_t>& g) { return g.empty() || g.same_shape(h, w); };
    if (!sized(masks.drop_mask) || !sized(masks.intensity_mask))
      throw ConfigError("fit: masks must match the intrinsics size");
    step_ = options.render.resolved_step(base.field);
    rays_per_frame_ = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);

    sensor_rays_.reserve(rays_per_frame_);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) sensor_rays_.push_back(ray_from_pixel(i, j, intr));

    for (const auto& o : obs) {
      if (o.image.width != w || o.image.height != h)
        throw ConfigError("fit: observation size does not match intrinsics");
      o.image.validate();
      Frame f;
      NormalImage normals = normals_from_range(o.image, intr, options.render.normals);
      f.cos = std::move(normals.cos_incidence);
      f.edge = Grid<std::uint8_t>(h, w, 0);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          f.edge(i, j) = (normals.edge_flags(i, j) == EdgeFlag::kStrongEdge ||
                               normals.edge_flags(i, j) == EdgeFlag::kCrease) ? 1 : 0;
      f.base_poses = scan_column_poses(o.p0, o.p1, w, options.render);
      obs_frames_.push_back(std::move(f));
    }

    cached_ = !free.density && !free.pose_offsets;
    if (cached_) build_cache(base);
  }

  const Layout& layout() const { return layout_; }

  std::vector<double> encode(const FitState& s) const {
    std::vector<double> x(layout_.size, 0.0);
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      if (layout_.channel[c] == kNone) continue;
      const auto& v = s.field.channel(static_cast<Channel>(c));
      for (std::size_t k = 0; k < v.size(); ++k)
        x[layout_.channel[c] + k] = c == 0 ? softplus_inverse(v[k]) : logit(v[k]);
    }
    if (layout_.distance != kNone) {
      DistanceParams d = s.params.distance;
      const auto slots = distance_slots(d);
      for (std::size_t k = 0; k < kDistanceSlots; ++k)
        x[layout_.distance + k] = slots.positive[k] ? safe_log(*slots.value[k]) : *slots.value[k];
    }
    if (layout_.laser != kNone)
      for (std::size_t r = 0; r < s.params.laser_powers.size(); ++r)
        x[layout_.laser + r] = safe_log(s.params.laser_powers[r]);
    if (layout_.incidence != kNone) {
      x[layout_.incidence] = safe_log(s.params.incidence_a);
      x[layout_.incidence + 1] = safe_log(s.params.incidence_b);
    }
    if (layout_.pose != kNone)
      for (std::size_t f = 0; f < s.offsets.size(); ++f)
        for (int a = 0; a < 3; ++a) {
          x[layout_.pose + 6 * f + static_cast<std::size_t>(a)] = s.offsets[f].rotation[a];
          x[layout_.pose + 6 * f + 3 + static_cast<std::size_t>(a)] = s.offsets[f].translation[a];
        }
    return x;
  }

  FitState decode(const std::vector<double>& x, const FitState& base) const {
    FitState s = base;
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      if (layout_.channel[c] == kNone) continue;
      auto& v = s.field.channel(static_cast<Channel>(c));
      for (std::size_t k = 0; k < v.size(); ++k) {
        const double raw = x[layout_.channel[c] + k];
        v[k] = c == 0 ? softplus(raw) : logistic(raw);
      }
    }
    if (layout_.distance != kNone) {
      const auto slots = distance_slots(s.params.distance);
      for (std::size_t k = 0; k < kDistanceSlots; ++k) {
        const double raw = x[layout_.distance + k];
        *slots.value[k] = slots.positive[k] ? std::exp(raw) : raw;
      }
    }
    if (layout_.laser != kNone)
      for (std::size_t r = 0; r < s.params.laser_powers.size(); ++r)
        s.params.laser_powers[r] = std::exp(x[layout_.laser + r]);
    if (layout_.incidence != kNone) {
      s.params.incidence_a = std::exp(x[layout_.incidence]);
      s.params.incidence_b = std::exp(x[layout_.incidence + 1]);
    }
    if (layout_.pose != kNone)
      for (std::size_t f = 0; f < s.offsets.size(); ++f)
        for (int a = 0; a < 3; ++a) {
          s.offsets[f].rotation[a] = x[layout_.pose + 6 * f + static_cast<std::size_t>(a)];
          s.offsets[f].translation[a] = x[layout_.pose + 6 * f + 3 + static_cast<std::size_t>(a)];
        }
    return s;
  }

  FitGradient evaluate(const FitState& s, bool with_gradient) const;

 private:
  struct Frame {
    Grid<double> cos;
    Grid<std::uint8_t> edge;
    std::vector<Pose> base_poses;
  };

  std::size_t ray_count() const { return rays_per_frame_ * obs_.size(); }

  std::vector<Pose> column_poses(std::size_t f, const PoseOffset& off) const {
    std::vector<Pose> out = obs_frames_[f].base_poses;
    for (auto& p : out) p = apply_offset(p, off);
    return out;
  }

  void world_ray(std::size_t ray, const std::vector<std::vector<Pose>>& poses,
                 Eigen::Vector3d& o, Eigen::Vector3d& d) const {
    const std::size_t f = ray / rays_per_frame_;
    const std::size_t local = ray % rays_per_frame_;
    const std::size_t j = local % static_cast<std::size_t>(intr_.width);
    const Pose& pose = poses[f][j];
    o = pose.apply(sensor_rays_[local].origin);
    d = pose.rotate(sensor_rays_[local].direction).normalized();
  }

  std::size_t chunk_count(std::size_t cells) const {
    std::size_t per_chunk = 6 * obs_.size();
    for (std::size_t c = 0; c < kChannelCount; ++c)
      if (layout_.channel[c] != kNone) per_chunk += cells;
    const double bytes = 8.0 * static_cast<double>(per_chunk);
    const auto fit = static_cast<std::size_t>(std::max(1.0, kChunkBudgetBytes / std::max(bytes, 1.0)));
    return std::clamp<std::size_t>(std::min(fit, ray_count()), 1, kMaxChunks);
  }

  void build_cache(const FitState& base) {
    const std::size_t n = ray_count();
    std::vector<std::vector<Pose>> poses;
    for (std::size_t f = 0; f < obs_.size(); ++f) poses.push_back(column_poses(f, base.offsets[f]));
    cached_out_.assign(n, RayOutput{});
    const bool sparse = free_.intensity || free_.reflectivity || free_.drop;
    const std::size_t chunks = std::min<std::size_t>(n, 64);
    std::vector<RayCache> parts(chunks);
    parallel_chunks(chunks, options_.optimizer.workers, [&](std::size_t c) {
      const auto [b, e] = chunk_range(n, chunks, c);
      std::vector<RaySample> trace;
      std::vector<std::pair<std::size_t, double>> entries;
      RayCache& part = parts[c];
      for (std::size_t r = b; r < e; ++r) {
        Eigen::Vector3d o, d;
        world_ray(r, poses, o, d);
        cached_out_[r] = render_ray(base.field, o, d, step_, options_.render.max_range,
                                    sparse ? &trace : nullptr);
        if (!sparse) continue;
        entries.clear();
        for (const auto& s : trace) {
          const double w = s.transmittance * s.alpha;
          if (!s.stencil.inside || w == 0.0) continue;
          for (std::size_t k = 0; k < 8; ++k)
            if (s.stencil.weight[k] != 0.0) entries.emplace_back(s.stencil.index[k], w * s.stencil.weight[k]);
        }
        std::sort(entries.begin(), entries.end(),
                  [](const auto& a, const auto& b2) { return a.first < b2.first; });
        part.begin.push_back(part.cells.size());
        for (std::size_t k = 0; k < entries.size(); ++k) {
          if (k > 0 && entries[k].first == entries[k - 1].first) {
            part.coeff.back() += entries[k].second;
          } else {
            part.cells.push_back(entries[k].first);
            part.coeff.push_back(entries[k].second);
          }
        }
      }
    });
    if (!sparse) return;
    for (auto& p : parts) {
      const std::size_t shift = cache_.cells.size();
      for (std::size_t b : p.begin) cache_.begin.push_back(b + shift);
      cache_.cells.insert(cache_.cells.end(), p.cells.begin(), p.cells.end());
      cache_.coeff.insert(cache_.coeff.end(), p.coeff.begin(), p.coeff.end());
    }
    cache_.begin.push_back(cache_.cells.size());
    has_sparse_ = true;
  }

  const std::vector<Observation>& obs_;
  const SensorIntrinsics& intr_;
  const MaskSet& masks_;
  const FitOptions& options_;
  FitFree free_;
  Layout layout_;
  double step_ = 0.0;
  std::size_t rays_per_frame_ = 0;
  std::vector<Ray> sensor_rays_;
  std::vector<Frame> obs_frames_;
  bool cached_ = false;
  bool has_sparse_ = false;
  std::vector<RayOutput> cached_out_;
  RayCache cache_;
};

FitGradient FitEngine::evaluate(const FitState& s, bool with_gradient) const {
  const std::size_t n = ray_count();
  const int h = intr_.height;
  const int w = intr_.width;
  const auto& field = s.field;
  const auto& params = s.params;

  std::vector<std::vector<Pose>> poses;
  for (std::size_t f = 0; f < obs_.size(); ++f) poses.push_back(column_poses(f, s.offsets[f]));

  // Forward pass over every ray.
  std::vector<RayOutput> out(n);
  if (cached_) {
    out = cached_out_;
    if (has_sparse_) {
      for (std::size_t r = 0; r < n; ++r) {
        double ib = 0.0, rb = 0.0, db = 0.0;
        for (std::size_t k = cache_.begin[r]; k < cache_.begin[r + 1]; ++k) {
          const std::size_t c = cache_.cells[k];
          ib += cache_.coeff[k] * field.intensity[c];
          rb += cache_.coeff[k] * field.reflectivity[c];
          db += cache_.coeff[k] * field.drop[c];
        }
        out[r].intensity = ib;
        out[r].reflectivity = rb;
        out[r].drop = db + out[r].transmittance;
      }
    }
  } else {
    const std::size_t rows = obs_.size() * static_cast<std::size_t>(h);
    parallel_chunks(rows, options_.optimizer.workers, [&](std::size_t row) {
      for (int j = 0; j < w; ++j) {
        const std::size_t r = row * static_cast<std::size_t>(w) + static_cast<std::size_t>(j);
        Eigen::Vector3d o, d;
        world_ray(r, poses, o, d);
        out[r] = render_ray(field, o, d, step_, options_.render.max_range);
      }
    });
  }

  // Loss terms, accumulated in pixel order.
  FitGradient result;
  FitLosses& L = result.losses;
  const LossWeights& lw = options_.weights;
  std::vector<RayUpstream> up(with_gradient ? n : 0);
  std::vector<double> g_distance(kDistanceSlots, 0.0);
  std::vector<double> g_laser(static_cast<std::size_t>(h), 0.0);
  double g_a = 0.0;
  double g_b = 0.0;

  std::size_t n_depth = 0, n_drop = 0;
  std::vector<std::size_t> refl_index;
  const double eps = options_.bce_epsilon;
  struct IntensityTerm {
    std::size_t ray;
    double residual;
    ModelPartials partials;
  };
  std::vector<IntensityTerm> intensity_terms;

  for (std::size_t f = 0; f < obs_.size(); ++f) {
    const auto& img = obs_[f].image;
    const auto& frame = obs_frames_[f];
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const std::size_t r = f * rays_per_frame_ + static_cast<std::size_t>(i) * static_cast<std::size_t>(w) +
                              static_cast<std::size_t>(j);
        const RayOutput& o = out[r];
        const bool valid = img.valid(i, j) != 0;
        if (valid) {
          const double diff = o.depth - img.depth(i, j);
          L.depth += diff * diff;
          ++n_depth;
          refl_index.push_back(r);
          if (with_gradient) up[r].depth = 2.0 * diff;
        }
        if (masks_.drop_mask.empty() || !masks_.drop_mask(i, j)) {
          const double y = valid ? 0.0 : 1.0;
          const double p = std::clamp(o.drop, eps, 1.0 - eps);
          L.drop += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
          ++n_drop;
          if (with_gradient && p == o.drop) up[r].drop = (p - y) / (p * (1.0 - p));
        }
        if (!frame.edge(i, j) && intensity_loss_pixel(i, j, img.valid, masks_, &frame.cos)) {
          const ModelPartials mp = apply_model_grad(o.intensity, img.depth(i, j), frame.cos(i, j),
                                                    o.reflectivity, i, params);
          const double res = mp.value - img.intensity(i, j);
          L.intensity += res * res;
          intensity_terms.push_back({r, res, mp});
        }
      }
    }
  }
  L.intensity_pixels = intensity_terms.size();
  const double inv_depth = n_depth ? 1.0 / static_cast<double>(n_depth) : 0.0;
  const double inv_drop = n_drop ? 1.0 / static_cast<double>(n_drop) : 0.0;
  const double inv_int = intensity_terms.empty() ? 0.0 : 1.0 / static_cast<double>(intensity_terms.size());
  L.depth *= inv_depth;
  L.drop *= inv_drop;
  L.intensity *= inv_int;

  std::size_t median_ray = kNone;
  if (!refl_index.empty()) {
    const std::size_t mid = (refl_index.size() - 1) / 2;
    auto less = [&](std::size_t a, std::size_t b) {
      return out[a].reflectivity < out[b].reflectivity ||
             (out[a].reflectivity == out[b].reflectivity && a < b);
    };
    std::nth_element(refl_index.begin(), refl_index.begin() + static_cast<std::ptrdiff_t>(mid),
                     refl_index.end(), less);
    median_ray = refl_index[mid];
    L.reflectivity = std::max(params.reflect_target - out[median_ray].reflectivity, 0.0);
  }
  L.laser = loss_laser(params.laser_powers);

  LossTerms terms;
  terms.depth = [&] { return L.depth; };
  terms.intensity = [&] { return L.intensity; };
  terms.drop = [&] { return L.drop; };
  terms.reflectivity = [&] { return L.reflectivity; };
  terms.laser = [&] { return L.laser; };
  L.total = loss_total(terms, lw);
  if (!with_gradient) return result;

  // Upstream derivatives of the total loss per ray and per sensor parameter.
  for (std::size_t r = 0; r < n; ++r) {
    up[r].depth *= lw.depth * inv_depth;
    up[r].drop *= lw.drop * inv_drop;
  }
  for (const auto& t : intensity_terms) {
    const double g = 2.0 * t.residual * lw.intensity * inv_int;
    up[t.ray].intensity += g * t.partials.base_intensity;
    up[t.ray].reflectivity += g * t.partials.reflectivity;
    const auto dp = distance_partials(t.partials.distance, params.distance.near_model);
    for (std::size_t k = 0; k < kDistanceSlots; ++k) g_distance[k] += g * dp[k];
    const std::size_t row = (t.ray % rays_per_frame_) / static_cast<std::size_t>(w);
    g_laser[row] += g * t.partials.laser;
    g_a += g * t.partials.a;
    g_b += g * t.partials.b;
  }
  if (median_ray != kNone && params.reflect_target > out[median_ray].reflectivity)
    up[median_ray].reflectivity -= lw.reflectivity;
  for (std::size_t row = 0; row < g_laser.size(); ++row)
    if (params.laser_powers[row] > 1.0)
      g_laser[row] += lw.laser / static_cast<double>(params.laser_powers.size());

  std::vector<double>& grad = result.gradient;
  grad.assign(layout_.size, 0.0);
  if (layout_.distance != kNone) {
    DistanceParams d = params.distance;
    const auto slots = distance_slots(d);
    for (std::size_t k = 0; k < kDistanceSlots; ++k)
      grad[layout_.distance + k] = g_distance[k] * (slots.positive[k] ? *slots.value[k] : 1.0);
  }
  if (layout_.laser != kNone)
    for (std::size_t row = 0; row < g_laser.size(); ++row)
      grad[layout_.laser + row] = g_laser[row] * params.laser_powers[row];
  if (layout_.incidence != kNone) {
    grad[layout_.incidence] = g_a * params.incidence_a;
    grad[layout_.incidence + 1] = g_b * params.incidence_b;
  }

  // Backward pass through rendering into field cells and pose offsets.
  const bool field_free = free_.any_field();
  if (field_free || free_.pose_offsets) {
    const std::size_t cells = field.cell_count();
    const std::size_t chunks = chunk_count(cells);
    struct Buffers {
      std::array<std::vector<double>, kChannelCount> channel;
      std::vector<double> pose;
    };
    std::vector<Buffers> buffers(chunks);

    // d exp(w) / d w_k per frame, by central differences of the rotation.
    std::vector<std::array<Eigen::Matrix3d, 3>> d_rot(obs_.size());
    if (free_.pose_offsets) {
      for (std::size_t f = 0; f < obs_.size(); ++f) {
        for (int k = 0; k < 3; ++k) {
          const double hstep = 1e-6;
          Eigen::Vector3d wp = s.offsets[f].rotation;
          Eigen::Vector3d wm = wp;
          wp[k] += hstep;
          wm[k] -= hstep;
          d_rot[f][static_cast<std::size_t>(k)] =
              (rotation_matrix(wp) - rotation_matrix(wm)) / (2.0 * hstep);
        }
      }
    }

    parallel_chunks(chunks, options_.optimizer.workers, [&](std::size_t c) {
      Buffers& buf = buffers[c];
      for (std::size_t ch = 0; ch < kChannelCount; ++ch)
        if (layout_.channel[ch] != kNone) buf.channel[ch].assign(cells, 0.0);
      buf.pose.assign(6 * obs_.size(), 0.0);
      ChannelGradients cg;
      if (layout_.channel[0] != kNone) cg.density = &buf.channel[0];
      if (layout_.channel[1] != kNone) cg.intensity = &buf.channel[1];
      if (layout_.channel[2] != kNone) cg.reflectivity = &buf.channel[2];
      if (layout_.channel[3] != kNone) cg.drop = &buf.channel[3];
      std::vector<RaySample> trace;
      const auto [b, e] = chunk_range(n, chunks, c);
      for (std::size_t r = b; r < e; ++r) {
        const RayUpstream& g = up[r];
        if (g.depth == 0.0 && g.intensity == 0.0 && g.reflectivity == 0.0 && g.drop == 0.0)
          continue;
        if (has_sparse_) {
          for (std::size_t k = cache_.begin[r]; k < cache_.begin[r + 1]; ++k) {
            const std::size_t cell = cache_.cells[k];
            const double coeff = cache_.coeff[k];
            if (cg.intensity) (*cg.intensity)[cell] += g.intensity * coeff;
            if (cg.reflectivity) (*cg.reflectivity)[cell] += g.reflectivity * coeff;
            if (cg.drop) (*cg.drop)[cell] += g.drop * coeff;
          }
          continue;
        }
        if (cached_) continue;
        Eigen::Vector3d o, d;
        world_ray(r, poses, o, d);
        const RayOutput ro = render_ray(field, o, d, step_, options_.render.max_range, &trace);
        Eigen::Vector3d g_o = Eigen::Vector3d::Zero();
        Eigen::Vector3d g_d = Eigen::Vector3d::Zero();
        backward_ray(field, trace, ro, step_, g, cg, free_.pose_offsets ? &g_o : nullptr,
                     free_.pose_offsets ? &g_d : nullptr);
        if (!free_.pose_offsets) continue;
        const std::size_t f = r / rays_per_frame_;
        const std::size_t local = r % rays_per_frame_;
        const std::size_t j = local % static_cast<std::size_t>(w);
        const Eigen::Matrix3d base_rot = poses[f][j].rotation.toRotationMatrix() *
                                         rotation_matrix(s.offsets[f].rotation).transpose();
        for (std::size_t k = 0; k < 3; ++k) {
          const Eigen::Matrix3d m = base_rot * d_rot[f][k];
          buf.pose[6 * f + k] += g_o.dot(m * sensor_rays_[local].origin) +
                                 g_d.dot(m * sensor_rays_[local].direction);
        }
        for (int a = 0; a < 3; ++a) buf.pose[6 * f + 3 + static_cast<std::size_t>(a)] += g_o[a];
      }
    });

    for (std::size_t c = 0; c < chunks; ++c) {
      for (std::size_t ch = 0; ch < kChannelCount; ++ch) {
        if (layout_.channel[ch] == kNone) continue;
        const auto& src = buffers[c].channel[ch];
        for (std::size_t k = 0; k < cells; ++k) grad[layout_.channel[ch] + k] += src[k];
      }
      if (layout_.pose != kNone)
        for (std::size_t k = 0; k < buffers[c].pose.size(); ++k)
          grad[layout_.pose + k] += buffers[c].pose[k];
    }
    for (std::size_t ch = 0; ch < kChannelCount; ++ch) {
      if (layout_.channel[ch] == kNone) continue;
      const auto& v = field.channel(static_cast<Channel>(ch));
      for (std::size_t k = 0; k < cells; ++k) {
        // softplus' = 1 - exp(-sigma); logistic' = v (1 - v)
        const double chain = ch == 0 ? -std::expm1(-v[k]) : v[k] * (1.0 - v[k]);
        grad[layout_.channel[ch] + k] *= chain;
      }
    }
  }
  return result;
}

FitState make_state(const std::vector<Observation>& observations, const VoxelField& field,
                    const IntensityParams& params) {
  FitState s;
  s.field = field;
  s.params = params;
  s.offsets.assign(observations.size(), PoseOffset{});
  return s;
}

}  // namespace

void PoseOffset::validate() const {
  if (!rotation.allFinite() || !translation.allFinite())
    throw ConfigError("pose offset: values must be finite");
  if (!(rotation.norm() < std::numbers::pi))
    throw ConfigError("pose offset: rotation norm must be below pi");
}

Pose apply_offset(const Pose& pose, const PoseOffset& offset) {
  const double angle = offset.rotation.norm();
  Eigen::Quaterniond q = pose.rotation;
  if (angle > 0.0) q = (q * Eigen::Quaterniond(Eigen::AngleAxisd(angle, offset.rotation / angle))).normalized();
  return Pose(pose.translation + offset.translation, q);
}

bool FitFree::any() const {
  return any_field() || distance || laser || incidence || pose_offsets;
}

FitLosses evaluate_fit(const std::vector<Observation>& observations, const SensorIntrinsics& intr,
                       const FitState& state, const MaskSet& masks, const FitOptions& options) {
  const FitEngine engine(observations, intr, masks, options, FitFree{}, state);
  return engine.evaluate(state, false).losses;
}

FitGradient evaluate_fit_gradient(const std::vector<Observation>& observations,
                                  const SensorIntrinsics& intr, const FitState& state,
                                  const MaskSet& masks, const FitOptions& options,
                                  const FitFree& free) {
  const FitEngine engine(observations, intr, masks, options, free, state);
  FitGradient g = engine.evaluate(state, true);
  g.params = engine.encode(state);
  return g;
}

FitResult fit(const std::vector<Observation>& observations, const SensorIntrinsics& intr,
              const VoxelField& init_field, const IntensityParams& init_params,
              const MaskSet& masks, const FitOptions& options, const FitFree& free) {
  if (!free.any()) throw ConfigError("fit: no free parameters");
  const FitState base = make_state(observations, init_field, init_params);
  const FitEngine engine(observations, intr, masks, options, free, base);
  const Layout& layout = engine.layout();

  std::vector<double> scale(layout.size, 0.0);
  auto fill = [&](std::size_t begin, std::size_t count, double lr) {
    if (begin == kNone) return;
    std::fill(scale.begin() + static_cast<std::ptrdiff_t>(begin),
              scale.begin() + static_cast<std::ptrdiff_t>(begin + count), lr);
  };
  const std::size_t cells = init_field.cell_count();
  for (std::size_t c = 0; c < kChannelCount; ++c) fill(layout.channel[c], cells, options.field_lr);
  fill(layout.distance, kDistanceSlots, options.sensor_lr);
  fill(layout.laser, static_cast<std::size_t>(intr.height), options.sensor_lr);
  fill(layout.incidence, 2, options.sensor_lr);
  fill(layout.pose, 6 * observations.size(), options.pose_lr);

  std::vector<double> x = engine.encode(base);
  FitState state = engine.decode(x, base);
  FitGradient ev = engine.evaluate(state, true);

  FitResult result;
  result.evaluations = 1;
  result.state = state;
  result.losses = ev.losses;
  if (!std::isfinite(ev.losses.total)) throw NumericError("fit: initial loss is not finite");
  result.history.push_back(ev.losses.total);
  result.raw_history.push_back(ev.losses.total);

  OptimizerConfig cfg = options.optimizer;
  cfg.learning_rate = 1.0;
  Adam adam(layout.size, cfg);
  double best = ev.losses.total;
  std::vector<double> best_x = x;
  for (int it = 0; it < options.optimizer.iterations; ++it) {
    adam.step(x, ev.gradient, scale);
    state = engine.decode(x, base);
    ev = engine.evaluate(state, true);
    ++result.evaluations;
    if (!std::isfinite(ev.losses.total)) {
      result.state = engine.decode(best_x, base);
      throw FitDiverged("fit diverged at iteration " + std::to_string(it), result);
    }
    result.raw_history.push_back(ev.losses.total);
    if (ev.losses.total < best) {
      best = ev.losses.total;
      best_x = x;
      result.losses = ev.losses;
    }
    result.history.push_back(best);
  }
  result.state = engine.decode(best_x, base);
  return result;
}

}  // namespace pbl
