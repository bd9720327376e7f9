#include "plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace pblsim {

namespace {

using Color = std::array<std::uint8_t, 3>;

constexpr Color kBackground{255, 255, 255};
constexpr Color kAxis{0, 0, 0};
constexpr Color kGrid{220, 220, 220};
constexpr Color kBar{70, 120, 180};
constexpr Color kWhisker{200, 60, 40};

struct Canvas {
  RgbImage img;

  Canvas(int w, int h) {
    img.width = w;
    img.height = h;
    img.rgb.assign(static_cast<std::size_t>(w) * h * 3, 0);
    fill(0, 0, w, h, kBackground);
  }

  void put(int x, int y, const Color& c) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    const std::size_t k = (static_cast<std::size_t>(y) * img.width + x) * 3;
    img.rgb[k] = c[0];
    img.rgb[k + 1] = c[1];
    img.rgb[k + 2] = c[2];
  }

  // Half-open rectangle [x0, x1) x [y0, y1).
  void fill(int x0, int y0, int x1, int y1, const Color& c) {
    for (int y = std::max(0, y0); y < std::min(img.height, y1); ++y)
      for (int x = std::max(0, x0); x < std::min(img.width, x1); ++x) put(x, y, c);
  }
};

}  // namespace

RgbImage render_bar_plot(const BarSeries& series, int width, int height, double y_max) {
  Canvas canvas(width, height);
  const int left = 48, right = width - 16, top = 16, bottom = height - 32;
  const std::size_t n = series.values.size();

  if (y_max <= 0.0) {
    for (std::size_t k = 0; k < n; ++k) {
      const double v = series.values[k];
      if (!std::isfinite(v)) continue;
      const double s = k < series.spread.size() && std::isfinite(series.spread[k]) ? series.spread[k] : 0.0;
      y_max = std::max(y_max, v + s);
    }
    if (y_max <= 0.0) y_max = 1.0;
  }
  auto to_y = [&](double v) {
    const double f = std::clamp(v / y_max, 0.0, 1.0);
    return bottom - static_cast<int>(std::lround(f * (bottom - top)));
  };

  for (int g = 1; g <= 10; ++g) canvas.fill(left, to_y(y_max * g / 10.0), right, to_y(y_max * g / 10.0) + 1, kGrid);

  if (n > 0) {
    const double slot = static_cast<double>(right - left) / static_cast<double>(n);
    const int pad = std::max(1, static_cast<int>(slot * 0.15));
    for (std::size_t k = 0; k < n; ++k) {
      const int x0 = left + static_cast<int>(std::lround(slot * k));
      const int x1 = left + static_cast<int>(std::lround(slot * (k + 1)));
      canvas.fill(x0, bottom, x0 + 1, bottom + 6, kAxis);
      const double v = series.values[k];
      if (!std::isfinite(v)) continue;
      canvas.fill(x0 + pad, to_y(v), std::max(x0 + pad + 1, x1 - pad), bottom, kBar);
      if (k < series.spread.size() && std::isfinite(series.spread[k]) && series.spread[k] > 0.0) {
        const int xm = (x0 + x1) / 2;
        const int ya = to_y(v + series.spread[k]), yb = to_y(v - series.spread[k]);
        canvas.fill(xm, ya, xm + 1, yb + 1, kWhisker);
        canvas.fill(xm - 3, ya, xm + 4, ya + 1, kWhisker);
        canvas.fill(xm - 3, yb, xm + 4, yb + 1, kWhisker);
      }
    }
  }

  canvas.fill(left - 1, top, left, bottom + 1, kAxis);
  canvas.fill(left - 1, bottom, right, bottom + 1, kAxis);
  for (int g = 0; g <= 10; ++g) canvas.fill(left - 6, to_y(y_max * g / 10.0), left - 1, to_y(y_max * g / 10.0) + 1, kAxis);
  return canvas.img;
}

}  // namespace pblsim
