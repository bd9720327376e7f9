#pragma once

#include <cstdint>
#include <vector>

namespace pblsim {

struct BarSeries {
  std::vector<double> values;  ///< NaN leaves a gap
  std::vector<double> spread;  ///< drawn as a whisker of +-spread; may be empty
};

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};

/// Bar chart with axes, gridlines every `y_max / 10` and one bar per value.
/// The y axis spans [0, y_max]; y_max <= 0 picks the largest bar top.
RgbImage render_bar_plot(const BarSeries& series, int width = 640, int height = 400, double y_max = 0.0);

}  // namespace pblsim
