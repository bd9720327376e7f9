#include <algorithm>
#include <cmath>
#include <string>

#include "pbl/error.hpp"
#include "pbl/sensor_model.hpp"

namespace pbl {

MaskSet MaskSet::empty(int height, int width, double incidence_threshold) {
  MaskSet m;
  m.drop_mask = Grid<std::uint8_t>(height, width, 0);
  m.intensity_mask = Grid<std::uint8_t>(height, width, 0);
  m.incidence_threshold = incidence_threshold;
  return m;
}

bool intensity_loss_pixel(int i, int j, const Grid<std::uint8_t>& valid, const MaskSet& masks,
                          const Grid<double>* cos_incidence) {
  if (!valid(i, j)) return false;
  if (!masks.intensity_mask.empty() && masks.intensity_mask(i, j)) return false;
  if (!masks.drop_mask.empty() && masks.drop_mask(i, j)) return false;
  if (cos_incidence && (*cos_incidence)(i, j) < std::cos(masks.incidence_threshold)) return false;
  return true;
}

LossValue loss_intensity(const Grid<double>& predicted, const Grid<double>& observed,
                         const Grid<std::uint8_t>& valid, const MaskSet& masks,
                         const Grid<double>* cos_incidence) {
  if (!predicted.same_shape(observed) || !predicted.same_shape(valid) ||
      (!masks.drop_mask.empty() && !masks.drop_mask.same_shape(valid)) ||
      (!masks.intensity_mask.empty() && !masks.intensity_mask.same_shape(valid)) ||
      (cos_incidence && !cos_incidence->same_shape(valid)))
    throw ConfigError("loss_intensity: image shapes differ");
  LossValue out;
  double sum = 0.0;
  for (int i = 0; i < valid.rows(); ++i) {
    for (int j = 0; j < valid.cols(); ++j) {
      if (!intensity_loss_pixel(i, j, valid, masks, cos_incidence)) continue;
      const double r = predicted(i, j) - observed(i, j);
      sum += r * r;
      ++out.count;
    }
  }
  if (out.count == 0) {
    out.no_valid_pixels = true;
    return out;
  }
  out.value = sum / static_cast<double>(out.count);
  return out;
}

double loss_laser(std::span<const double> laser_powers) {
  if (laser_powers.empty()) return 0.0;
  double sum = 0.0;
  for (double l : laser_powers) sum += std::max(l - 1.0, 0.0);
  return sum / static_cast<double>(laser_powers.size());
}

std::optional<double> lower_median(std::span<const double> values,
                                   std::span<const std::uint8_t> valid) {
  std::vector<double> picked;
  picked.reserve(values.size());
  for (std::size_t k = 0; k < values.size(); ++k)
    if (valid.empty() || valid[k]) picked.push_back(values[k]);
  if (picked.empty()) return std::nullopt;
  const std::size_t mid = (picked.size() - 1) / 2;
  std::nth_element(picked.begin(), picked.begin() + static_cast<std::ptrdiff_t>(mid),
                   picked.end());
  return picked[mid];
}

double loss_reflectivity(const Grid<double>& reflectivity, const Grid<std::uint8_t>& valid,
                         double target) {
  if (!reflectivity.same_shape(valid)) throw ConfigError("loss_reflectivity: shapes differ");
  const auto median = lower_median(reflectivity.values(), valid.values());
  if (!median) return 0.0;
  return std::max(target - *median, 0.0);
}

double loss_total(const LossTerms& terms, const LossWeights& weights) {
  double total = 0.0;
  auto add = [&](double w, const std::function<double()>& term, const char* name) {
    if (w == 0.0) return;
    if (!term) throw ConfigError(std::string("loss_total: missing term '") + name + "'");
    total += w * term();
  };
  add(weights.depth, terms.depth, "depth");
  add(weights.intensity, terms.intensity, "intensity");
  add(weights.drop, terms.drop, "drop");
  add(weights.reflectivity, terms.reflectivity, "reflectivity");
  add(weights.laser, terms.laser, "laser");
  return total;
}

}  // namespace pbl
