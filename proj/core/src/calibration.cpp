#include "pbl/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "pbl/parallel.hpp"

namespace pbl {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

double azimuth(const Eigen::Vector3d& p) {
  double phi = std::atan2(p.y(), p.x());
  if (phi <= -kPi) phi = kPi;
  return phi;
}

double continuous_col(double phi, int width) {
  double c = std::fmod((0.5 - phi / kTwoPi) * width, static_cast<double>(width));
  if (c < 0.0) c += width;
  if (c >= width) c -= width;
  return c;
}

std::size_t diode_index(const SensorIntrinsics& intr, int row) {
  return 3 * intr.units.size() + static_cast<std::size_t>(row);
}

/// Observed intensity per (ring, col), keeping the nearest point.
struct IntensityLookup {
  Grid<double> intensity;
  Grid<double> range;
  Grid<std::uint8_t> valid;

  IntensityLookup(const PointCloud& frame, int height, int width)
      : intensity(height, width, 0.0), range(height, width, 0.0), valid(height, width, 0) {
    for (const auto& pt : frame) {
      if (!pt.ring || !pt.col || pt.non_finite) continue;
      const int r = *pt.ring;
      const int c = *pt.col;
      if (r < 0 || r >= height || c < 0 || c >= width) continue;
      const double d = pt.position.norm();
      if (valid(r, c) && !(d < range(r, c))) continue;
      intensity(r, c) = pt.intensity;
      range(r, c) = d;
      valid(r, c) = 1;
    }
  }

  double at(int r, int c) const {
    if (r < 0 || r >= intensity.rows() || c < 0 || c >= intensity.cols()) return 0.0;
    return valid(r, c) ? intensity(r, c) : 0.0;
  }
};

struct FrameSums {
  double loss = 0.0;
  ChannelResiduals abs;
  std::vector<double> grad;
  std::size_t points = 0;
};

FrameSums evaluate_frame(const PointCloud& frame, const SensorIntrinsics& intr,
                         const ChannelWeights& w, bool with_gradient,
                         const IntensityLookup* lookup) {
  FrameSums s;
  if (with_gradient) s.grad.assign(intrinsics_parameter_count(intr), 0.0);
  for (const auto& pt : frame) {
    if (pt.non_finite || !pt.position.allFinite()) continue;
    const auto res = point_residual(pt, intr);
    if (!res) continue;
    double r_int = 0.0;
    if (lookup) r_int = pt.intensity - lookup->at(res->predicted_row, res->predicted_col);
    s.loss += w.depth * res->depth * res->depth + w.row * res->row * res->row +
              w.col * res->col * res->col + w.intensity * r_int * r_int;
    s.abs.depth += std::abs(res->depth);
    s.abs.row += std::abs(res->row);
    s.abs.col += std::abs(res->col);
    s.abs.intensity += std::abs(r_int);
    ++s.points;
    if (!with_gradient) continue;
    const std::size_t base = 3 * static_cast<std::size_t>(res->unit);
    const std::size_t idx[4] = {base, base + 1, base + 2, diode_index(intr, *pt.ring)};
    for (int k = 0; k < 4; ++k)
      s.grad[idx[k]] += 2.0 * (w.depth * res->depth * res->d_depth[static_cast<std::size_t>(k)] +
                               w.row * res->row * res->d_row[static_cast<std::size_t>(k)]);
  }
  return s;
}

void check_labelled(const std::vector<PointCloud>& frames) {
  for (const auto& f : frames)
    for (const auto& pt : f)
      if (!pt.ring || !pt.col) throw ConfigError("uncalibrated frame: run recover_rings");
}

}  // namespace

// --- Masks / problem ------------------------------------------------------------

CalibFreeMask CalibFreeMask::all(const SensorIntrinsics& intr) {
  CalibFreeMask m;
  m.units.assign(intr.units.size(), Unit{});
  m.diodes.assign(static_cast<std::size_t>(intr.height), true);
  return m;
}

CalibFreeMask CalibFreeMask::none(const SensorIntrinsics& intr) {
  CalibFreeMask m;
  m.units.assign(intr.units.size(), Unit{false, false, false});
  m.diodes.assign(static_cast<std::size_t>(intr.height), false);
  return m;
}

std::size_t CalibFreeMask::count() const {
  std::size_t n = 0;
  for (const auto& u : units) n += u.fov + u.fov_offset + u.z_offset;
  for (bool d : diodes) n += d;
  return n;
}

void CalibProblem::validate() const {
  if (frames.empty()) throw ConfigError("calibration: at least one frame required");
  initial.validate();
  if (free.units.size() != initial.units.size() ||
      free.diodes.size() != static_cast<std::size_t>(initial.height))
    throw ConfigError("calibration: free mask does not match the intrinsics layout");
  const bool weights_ok = weights.depth >= 0.0 && weights.intensity >= 0.0 &&
                          weights.row >= 0.0 && weights.col >= 0.0;
  const double sum = weights.depth + weights.intensity + weights.row + weights.col;
  if (!weights_ok || !(sum > 0.0))
    throw ConfigError("calibration: channel weights must be >= 0 and not all zero");
  check_labelled(frames);
}

// --- Ring recovery -------------------------------------------------------------------

PointCloud recover_rings(const PointCloud& raw, int height, int width,
                         const RingRecoveryOptions& options) {
  if (raw.empty()) throw ConfigError("recover_rings: empty input");
  if (height < 1 || width < 1) throw ConfigError("recover_rings: bad image size");

  std::vector<double> phi(raw.size(), 0.0);
  std::vector<bool> usable(raw.size(), false);
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const auto& p = raw[k].position;
    usable[k] = !raw[k].non_finite && p.allFinite() && (p.x() != 0.0 || p.y() != 0.0);
    if (usable[k]) phi[k] = azimuth(p);
  }

  // Scan direction from the sign of the small consecutive steps.
  long votes = 0;
  std::ptrdiff_t last = -1;
  for (std::size_t k = 0; k < raw.size(); ++k) {
    if (!usable[k]) continue;
    if (last >= 0) {
      const double step = phi[k] - phi[static_cast<std::size_t>(last)];
      if (std::abs(step) < 0.5 * kPi) votes += step > 0.0 ? 1 : (step < 0.0 ? -1 : 0);
    }
    last = static_cast<std::ptrdiff_t>(k);
  }
  const double sense = votes > 0 ? 1.0 : -1.0;

  PointCloud out = raw;
  int ring = 0;
  last = -1;
  for (std::size_t k = 0; k < raw.size(); ++k) {
    if (usable[k]) {
      if (last >= 0 && sense * (phi[k] - phi[static_cast<std::size_t>(last)]) <
                           -options.wrap_threshold) {
        ++ring;
        if (ring >= height) throw ConfigError("ring overflow");
      }
      last = static_cast<std::ptrdiff_t>(k);
      out[k].col = std::min(width - 1, static_cast<int>(std::floor(continuous_col(phi[k], width))));
    } else {
      out[k].col.reset();
    }
    out[k].ring = ring;
  }
  return out;
}

SensorIntrinsics initial_intrinsics_from_rings(const PointCloud& cloud, int height, int width) {
  std::vector<std::vector<double>> per_ring(static_cast<std::size_t>(height));
  for (const auto& pt : cloud) {
    if (!pt.ring || pt.non_finite || !pt.position.allFinite()) continue;
    if (*pt.ring < 0 || *pt.ring >= height) continue;
    const double rho = std::hypot(pt.position.x(), pt.position.y());
    if (rho == 0.0 && pt.position.z() == 0.0) continue;
    per_ring[static_cast<std::size_t>(*pt.ring)].push_back(std::atan2(pt.position.z(), rho));
  }
  std::optional<double> top, bottom;
  for (int r = 0; r < height; ++r) {
    auto& v = per_ring[static_cast<std::size_t>(r)];
    if (v.empty()) continue;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    const double m = v[v.size() / 2];
    if (!top) top = m;
    bottom = m;
  }
  if (!top || *top <= *bottom)
    throw ConfigError("initial intrinsics: need at least two populated rings with distinct elevations");
  // Row centers sit half a row inside the fov on both ends.
  const double fov = (*top - *bottom) / (1.0 - 1.0 / height);
  const double offset = 0.5 * fov / height - *bottom;
  SensorIntrinsics intr;
  intr.width = width;
  intr.height = height;
  intr.units.push_back(UnitIntrinsics{fov, offset, 0.0, 0, height});
  intr.diode_offsets.assign(static_cast<std::size_t>(height), 0.0);
  return intr;
}

// --- Residuals ---------------------------------------------------------------------------

std::optional<PointResidual> point_residual(const LidarPoint& pt, const SensorIntrinsics& intr) {
  if (!pt.ring || !pt.col) throw ConfigError("uncalibrated frame: run recover_rings");
  const int ring = *pt.ring;
  if (ring < 0 || ring >= intr.height)
    throw ConfigError("reprojection: ring " + std::to_string(ring) + " outside [0, H)");
  PointResidual r;
  r.unit = intr.unit_of_row(ring);
  const auto& u = intr.units[static_cast<std::size_t>(r.unit)];
  const double rho = std::hypot(pt.position.x(), pt.position.y());
  const double dz = pt.position.z() - u.z_offset;
  const double r2 = rho * rho + dz * dz;
  if (r2 == 0.0) return std::nullopt;
  const double range = std::sqrt(r2);
  const double hu = u.rows();
  const double theta = std::atan2(dz, rho) + u.fov_offset + intr.diode_offsets[static_cast<std::size_t>(ring)];
  const double row = u.row_start + (1.0 - theta / u.fov) * hu;
  r.row = row - (ring + 0.5);

  const double col = continuous_col(azimuth(pt.position), intr.width);
  r.col = col - (*pt.col + 0.5);
  const double half = 0.5 * intr.width;
  if (r.col >= half) r.col -= intr.width;
  if (r.col < -half) r.col += intr.width;
  r.predicted_row = static_cast<int>(std::floor(row));
  r.predicted_col = std::min(intr.width - 1, static_cast<int>(std::floor(col)));

  // Row channel.
  const double rows_per_rad = hu / u.fov;
  r.d_row[0] = theta * hu / (u.fov * u.fov);
  r.d_row[1] = -rows_per_rad;
  r.d_row[2] = rows_per_rad * rho / r2;
  r.d_row[3] = -rows_per_rad;

  // Depth channel: chord between the labelled and the observed elevation at
  // the observed range, 2 d sin(f r_i / (2 Hu)).
  const double half_angle = u.fov * r.row / (2.0 * hu);
  const double s = std::sin(half_angle);
  const double c = std::cos(half_angle);
  r.depth = 2.0 * range * s;
  const double d_range_dz = -dz / range;
  for (std::size_t k = 0; k < 4; ++k) {
    double d_half = u.fov / (2.0 * hu) * r.d_row[k];
    if (k == 0) d_half += r.row / (2.0 * hu);
    const double d_range = k == 2 ? d_range_dz : 0.0;
    r.d_depth[k] = 2.0 * d_range * s + 2.0 * range * c * d_half;
  }
  return r;
}

// --- Parameter vector ---------------------------------------------------------------------

std::size_t intrinsics_parameter_count(const SensorIntrinsics& intr) {
  return 3 * intr.units.size() + static_cast<std::size_t>(intr.height);
}

std::vector<double> intrinsics_to_vector(const SensorIntrinsics& intr) {
  std::vector<double> v;
  v.reserve(intrinsics_parameter_count(intr));
  for (const auto& u : intr.units) {
    v.push_back(u.fov);
    v.push_back(u.fov_offset);
    v.push_back(u.z_offset);
  }
  v.insert(v.end(), intr.diode_offsets.begin(), intr.diode_offsets.end());
  return v;
}

SensorIntrinsics intrinsics_from_vector(const SensorIntrinsics& layout,
                                        const std::vector<double>& params) {
  if (params.size() != intrinsics_parameter_count(layout))
    throw ConfigError("intrinsics_from_vector: size mismatch");
  SensorIntrinsics out = layout;
  for (std::size_t k = 0; k < out.units.size(); ++k) {
    out.units[k].fov = params[3 * k];
    out.units[k].fov_offset = params[3 * k + 1];
    out.units[k].z_offset = params[3 * k + 2];
  }
  std::copy(params.begin() + static_cast<std::ptrdiff_t>(3 * out.units.size()), params.end(),
            out.diode_offsets.begin());
  return out;
}

// --- Loss -------------------------------------------------------------------------------

ReprojectionEval evaluate_reprojection(const SensorIntrinsics& intr,
                                       const std::vector<PointCloud>& frames,
                                       const ChannelWeights& weights, bool with_gradient,
                                       const CalibOptions& options) {
  check_labelled(frames);
  std::vector<IntensityLookup> lookups;
  if (weights.intensity > 0.0) {
    lookups.reserve(frames.size());
    for (const auto& f : frames) lookups.emplace_back(f, intr.height, intr.width);
  }

  auto evaluate_all = [&](const SensorIntrinsics& candidate, const ChannelWeights& w,
                          bool grad) {
    std::vector<FrameSums> sums(frames.size());
    parallel_chunks(frames.size(), options.optimizer.workers, [&](std::size_t f) {
      sums[f] = evaluate_frame(frames[f], candidate, w, grad,
                               lookups.empty() ? nullptr : &lookups[f]);
    });
    FrameSums total;
    if (grad) total.grad.assign(intrinsics_parameter_count(candidate), 0.0);
    for (const auto& s : sums) {
      total.loss += s.loss;
      total.abs.depth += s.abs.depth;
      total.abs.row += s.abs.row;
      total.abs.col += s.abs.col;
      total.abs.intensity += s.abs.intensity;
      total.points += s.points;
      for (std::size_t k = 0; k < s.grad.size(); ++k) total.grad[k] += s.grad[k];
    }
    return total;
  };

  const FrameSums total = evaluate_all(intr, weights, with_gradient);
  ReprojectionEval out;
  out.points = total.points;
  if (total.points == 0) {
    if (with_gradient) out.gradient.assign(intrinsics_parameter_count(intr), 0.0);
    return out;
  }
  const double n = static_cast<double>(total.points);
  out.loss = total.loss / n;
  out.residuals = {total.abs.depth / n, total.abs.intensity / n, total.abs.row / n,
                   total.abs.col / n};
  if (!with_gradient) return out;
  out.gradient = total.grad;
  for (auto& g : out.gradient) g /= n;

  if (weights.intensity > 0.0) {
    // The intensity channel only changes when a point's pixel assignment flips.
    ChannelWeights only_intensity{0.0, weights.intensity, 0.0, 0.0};
    const std::vector<double> base = intrinsics_to_vector(intr);
    const double h = options.intensity_fd_step;
    for (std::size_t k = 0; k < base.size(); ++k) {
      auto plus = base;
      auto minus = base;
      plus[k] += h;
      minus[k] -= h;
      const double lp = evaluate_all(intrinsics_from_vector(intr, plus), only_intensity, false).loss;
      const double lm = evaluate_all(intrinsics_from_vector(intr, minus), only_intensity, false).loss;
      out.gradient[k] += (lp - lm) / (2.0 * h * n);
    }
  }
  return out;
}

double reprojection_loss(const SensorIntrinsics& intr, const std::vector<PointCloud>& frames,
                         const ChannelWeights& weights) {
  return evaluate_reprojection(intr, frames, weights, false).loss;
}

// --- Optimizer loop ------------------------------------------------------------------------

namespace {

/// Orthonormal directions of the diode offsets that trade off against a
/// unit's fov / fov_offset.
std::vector<std::vector<double>> gauge_basis(const UnitIntrinsics& u, bool fov_free,
                                             bool offset_free) {
  std::vector<std::vector<double>> basis;
  const int n = u.rows();
  auto add = [&](std::vector<double> v) {
    for (const auto& b : basis) {
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += v[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(i)];
      for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] -= dot * b[static_cast<std::size_t>(i)];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-12) return;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  };
  if (offset_free) add(std::vector<double>(static_cast<std::size_t>(n), 1.0));
  if (fov_free) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = 1.0 - (i + 0.5) / n;
    add(std::move(v));
  }
  return basis;
}

}  // namespace

CalibReport calibrate(const CalibProblem& problem, const CalibOptions& options) {
  problem.validate();
  const SensorIntrinsics& layout = problem.initial;
  const std::size_t n = intrinsics_parameter_count(layout);
  const std::size_t n_units = layout.units.size();

  std::vector<double> scale(n, 0.0);
  for (std::size_t k = 0; k < n_units; ++k) {
    scale[3 * k] = problem.free.units[k].fov ? options.fov_lr_scale : 0.0;
    scale[3 * k + 1] = problem.free.units[k].fov_offset ? options.offset_lr_scale : 0.0;
    scale[3 * k + 2] = problem.free.units[k].z_offset ? options.z_lr_scale : 0.0;
  }
  for (int r = 0; r < layout.height; ++r)
    scale[diode_index(layout, r)] =
        problem.free.diodes[static_cast<std::size_t>(r)] ? options.diode_lr_scale : 0.0;

  struct Gauge {
    int row_start;
    std::vector<std::vector<double>> basis;
  };
  std::vector<Gauge> gauges;
  if (options.fix_diode_gauge) {
    for (std::size_t k = 0; k < n_units; ++k) {
      const auto& u = layout.units[k];
      bool all_diodes = true;
      for (int r = u.row_start; r < u.row_end; ++r)
        all_diodes = all_diodes && problem.free.diodes[static_cast<std::size_t>(r)];
      const auto& fu = problem.free.units[k];
      if (all_diodes && (fu.fov || fu.fov_offset))
        gauges.push_back({u.row_start, gauge_basis(u, fu.fov, fu.fov_offset)});
    }
  }

  std::vector<double> x = intrinsics_to_vector(layout);
  const std::vector<double> x0 = x;
  const bool any_free = problem.free.count() > 0;

  CalibReport report;
  ReprojectionEval ev =
      evaluate_reprojection(layout, problem.frames, problem.weights, any_free, options);
  report.evaluations = 1;
  if (!std::isfinite(ev.loss)) throw NumericError("calibration: initial loss is not finite");
  report.final = layout;
  report.per_channel_residuals = ev.residuals;
  report.loss_history.push_back(ev.loss);
  report.raw_history.push_back(ev.loss);
  if (!any_free) return report;

  double best = ev.loss;
  std::vector<double> best_x = x;
  Adam adam(n, options.optimizer);
  for (int it = 0; it < options.optimizer.iterations; ++it) {
    adam.step(x, ev.gradient, scale);
    for (const auto& g : gauges) {
      for (const auto& b : g.basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < b.size(); ++i) {
          const std::size_t idx = diode_index(layout, g.row_start + static_cast<int>(i));
          dot += b[i] * (x[idx] - x0[idx]);
        }
        for (std::size_t i = 0; i < b.size(); ++i)
          x[diode_index(layout, g.row_start + static_cast<int>(i))] -= dot * b[i];
      }
    }
    for (std::size_t k = 0; k < n_units; ++k) x[3 * k] = std::max(x[3 * k], 1e-9);

    const SensorIntrinsics candidate = intrinsics_from_vector(layout, x);
    ev = evaluate_reprojection(candidate, problem.frames, problem.weights, true, options);
    ++report.evaluations;
    if (!std::isfinite(ev.loss)) {
      report.final = intrinsics_from_vector(layout, best_x);
      throw CalibrationDiverged("calibration diverged at iteration " + std::to_string(it),
                                report);
    }
    report.raw_history.push_back(ev.loss);
    if (ev.loss < best) {
      best = ev.loss;
      best_x = x;
      report.per_channel_residuals = ev.residuals;
    }
    report.loss_history.push_back(best);
  }
  report.final = intrinsics_from_vector(layout, best_x);
  return report;
}

}  // namespace pbl
