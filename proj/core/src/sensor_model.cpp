#include "pbl/sensor_model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "pbl/error.hpp"

namespace pbl {
namespace {

std::atomic<std::uint64_t> g_falloff_clamps{0};

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

void DistanceParams::validate() const {
  const bool ok = std::isfinite(s) && std::isfinite(q) && std::isfinite(d_near) &&
                  std::isfinite(s_eta) && std::isfinite(q_eta) && std::isfinite(k_steep) &&
                  q > 0.0 && q_eta > 0.0 && s_eta > 0.0 && k_steep > 0.0 && d_near >= 0.0 &&
                  s >= 0.0;
  if (!ok)
    throw ConfigError("distance params: need q, q_eta, s_eta, k_steep > 0 and s, d_near >= 0");
  if (near_model == NearModel::kLensDefocus &&
      !(std::isfinite(lens.s_eta) && lens.s_eta > 0.0 && std::isfinite(lens.delta_offset)))
    throw ConfigError("distance params: lens defocus model needs s_eta > 0");
}

IntensityParams IntensityParams::defaults(int rows) {
  IntensityParams p;
  p.laser_powers.assign(static_cast<std::size_t>(rows), 1.0);
  return p;
}

void IntensityParams::validate() const {
  distance.validate();
  for (double l : laser_powers)
    if (!std::isfinite(l) || l <= 0.0) throw ConfigError("intensity params: laser powers must be > 0");
  if (!std::isfinite(incidence_a) || incidence_a < 0.0)
    throw ConfigError("intensity params: incidence a must be >= 0");
  if (!std::isfinite(incidence_b) || incidence_b <= 0.0)
    throw ConfigError("intensity params: incidence b must be > 0");
  if (!(reflect_target >= 0.0 && reflect_target <= 1.0))
    throw ConfigError("intensity params: reflect_target must lie in [0, 1]");
  if (!std::isfinite(reflect_scale) || reflect_scale < 0.0)
    throw ConfigError("intensity params: reflect_scale must be >= 0");
}

// --- Distance -------------------------------------------------------------------

std::uint64_t falloff_clamp_count() { return g_falloff_clamps.load(); }

FarFalloff dist_far_grad(double d, const DistanceParams& p) {
  FarFalloff out;
  double base = p.s * (d - p.d_near) + 1.0;
  if (base <= 0.0) {
    g_falloff_clamps.fetch_add(1, std::memory_order_relaxed);
    base = kFalloffBaseEpsilon;
    out.clamped = true;
  }
  const double power = std::pow(base, -2.0 / p.q);
  const double value = power * p.q - p.q + 1.0;
  if (value < 0.0) {
    out.value = 0.0;
    out.clamped = true;
    return out;
  }
  out.value = value;
  if (out.clamped) return out;
  const double d_base = -2.0 * power / base;
  out.d_s = d_base * (d - p.d_near);
  out.d_near = -d_base * p.s;
  out.d_distance = d_base * p.s;
  out.d_q = power * (1.0 + 2.0 * std::log(base) / p.q) - 1.0;
  return out;
}

double dist_far(double d, const DistanceParams& p) { return dist_far_grad(d, p).value; }

NearFalloff dist_near_grad(double d, const DistanceParams& p) {
  NearFalloff out;
  if (p.near_model == NearModel::kFractionalPower) {
    if (d <= 0.0) return out;
    const double root = std::pow(d, 1.0 / p.q_eta);
    out.value = p.s_eta * root;
    out.d_scale = root;
    out.d_exponent = -out.value * std::log(d) / (p.q_eta * p.q_eta);
    out.d_distance = out.value / (p.q_eta * d);
    return out;
  }
  const double x = d + p.lens.delta_offset;
  const double e = std::exp(-p.lens.s_eta * x * x);
  out.value = 1.0 - e;
  out.d_scale = x * x * e;
  out.d_exponent = 2.0 * p.lens.s_eta * x * e;
  out.d_distance = out.d_exponent;
  return out;
}

double dist_near(double d, const DistanceParams& p) { return dist_near_grad(d, p).value; }

double sigmoid_blend(double d, const DistanceParams& p) {
  return logistic(p.k_steep * (d - p.d_near));
}

DistancePartials n_distance_grad(double d, const DistanceParams& p) {
  const double sigma = sigmoid_blend(d, p);
  const double ds = sigma * (1.0 - sigma);
  const FarFalloff far = dist_far_grad(d, p);
  const NearFalloff near = dist_near_grad(d, p);

  DistancePartials g;
  g.value = sigma * far.value + (1.0 - sigma) * near.value;
  const double gap = far.value - near.value;
  g.s = sigma * far.d_s;
  g.q = sigma * far.d_q;
  g.d_near = sigma * far.d_near - gap * ds * p.k_steep;
  g.k_steep = gap * ds * (d - p.d_near);
  if (p.near_model == NearModel::kFractionalPower) {
    g.s_eta = (1.0 - sigma) * near.d_scale;
    g.q_eta = (1.0 - sigma) * near.d_exponent;
  } else {
    g.lens_s_eta = (1.0 - sigma) * near.d_scale;
    g.lens_delta = (1.0 - sigma) * near.d_exponent;
  }
  g.distance = sigma * far.d_distance + (1.0 - sigma) * near.d_distance + gap * ds * p.k_steep;
  return g;
}

double n_distance(double d, const DistanceParams& p) {
  const double sigma = sigmoid_blend(d, p);
  return sigma * dist_far(d, p) + (1.0 - sigma) * dist_near(d, p);
}

// --- Incidence ----------------------------------------------------------------------

IncidencePartials n_incidence_grad(double cos_phi_n, double reflectivity,
                                   const IntensityParams& p) {
  IncidencePartials g;
  g.value = 1.0;
  if (!p.incidence_enabled) return g;
  const double c = std::clamp(cos_phi_n, 0.0, 1.0);
  const double base = p.incidence_a * reflectivity;
  const double s = base > 0.0 ? std::pow(base, p.incidence_b) : 0.0;
  const double exponent = p.reflect_scale * s;
  if (exponent == 0.0) return g;  // 0^0 := 1
  if (c == 0.0) {
    g.value = 0.0;
    return g;
  }
  g.value = std::pow(c, exponent);
  const double d_exp = g.value * std::log(c);
  if (base > 0.0) {
    const double d_base = p.reflect_scale * p.incidence_b * std::pow(base, p.incidence_b - 1.0);
    g.a = d_exp * d_base * reflectivity;
    g.reflectivity = d_exp * d_base * p.incidence_a;
    g.b = d_exp * p.reflect_scale * s * std::log(base);
  }
  g.cos = exponent * std::pow(c, exponent - 1.0);
  return g;
}

double n_incidence(double cos_phi_n, double reflectivity, const IntensityParams& p) {
  return n_incidence_grad(cos_phi_n, reflectivity, p).value;
}

// --- Chain ------------------------------------------------------------------------------

ModelPartials apply_model_grad(double base_intensity, double d, double cos_phi_n,
                               double reflectivity, int ring, const IntensityParams& p) {
  DistancePartials nd;
  nd.value = 1.0;
  if (p.distance_enabled) nd = n_distance_grad(d, p.distance);
  const IncidencePartials nr = n_incidence_grad(cos_phi_n, reflectivity, p);
  double laser = 1.0;
  if (p.laser_enabled) {
    if (ring < 0 || static_cast<std::size_t>(ring) >= p.laser_powers.size())
      throw ConfigError("apply_model: ring " + std::to_string(ring) + " has no laser power");
    laser = p.laser_powers[static_cast<std::size_t>(ring)];
  }

  ModelPartials g;
  g.value = base_intensity * nd.value * nr.value * laser;
  const double outer_d = base_intensity * nr.value * laser;
  if (p.distance_enabled) {
    g.distance = nd;
    g.distance.value = nd.value;
    g.distance.s *= outer_d;
    g.distance.q *= outer_d;
    g.distance.d_near *= outer_d;
    g.distance.s_eta *= outer_d;
    g.distance.q_eta *= outer_d;
    g.distance.k_steep *= outer_d;
    g.distance.lens_s_eta *= outer_d;
    g.distance.lens_delta *= outer_d;
    g.distance.distance *= outer_d;
  } else {
    g.distance.value = 1.0;
  }
  const double outer_r = base_intensity * nd.value * laser;
  g.a = nr.a * outer_r;
  g.b = nr.b * outer_r;
  g.reflectivity = nr.reflectivity * outer_r;
  g.cos = nr.cos * outer_r;
  if (p.laser_enabled) g.laser = base_intensity * nd.value * nr.value;
  g.base_intensity = nd.value * nr.value * laser;
  return g;
}

double apply_model(double base_intensity, double d, double cos_phi_n, double reflectivity,
                   int ring, const IntensityParams& p) {
  const double nd = p.distance_enabled ? n_distance(d, p.distance) : 1.0;
  const double nr = n_incidence(cos_phi_n, reflectivity, p);
  double laser = 1.0;
  if (p.laser_enabled) {
    if (ring < 0 || static_cast<std::size_t>(ring) >= p.laser_powers.size())
      throw ConfigError("apply_model: ring " + std::to_string(ring) + " has no laser power");
    laser = p.laser_powers[static_cast<std::size_t>(ring)];
  }
  return base_intensity * nd * nr * laser;
}

}  // namespace pbl
