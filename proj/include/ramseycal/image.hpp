#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "ramseycal/errors.hpp"

namespace ramseycal {

// Rows index y, columns index x; pixel (x, y) has its center at integer coordinates.
using Image = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Rect {
  Eigen::Index x0 = 0, y0 = 0, width = 0, height = 0;

  Eigen::Index area() const { return width * height; }
  bool inside(const Image& img) const {
    return x0 >= 0 && y0 >= 0 && width > 0 && height > 0 && x0 + width <= img.cols() &&
           y0 + height <= img.rows();
  }
};

struct ImageStack {
  std::vector<Image> frames;
  double pixel_pitch_m = 13e-6;
  double exposure_s = 0;
  std::optional<Image> dark;  // subtracted before any analysis when present

  Eigen::Index rows() const { return frames.empty() ? 0 : frames.front().rows(); }
  Eigen::Index cols() const { return frames.empty() ? 0 : frames.front().cols(); }

  void validate() const {
    for (const auto& f : frames)
      if (f.rows() != rows() || f.cols() != cols())
        throw FormatError("ImageStack: frames differ in shape");
    if (dark && (dark->rows() != rows() || dark->cols() != cols()))
      throw FormatError("ImageStack: dark frame shape differs from frames");
  }
};

// Bilinear sample; zero outside the image.
inline double sample_bilinear(const Image& img, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto ix = static_cast<Eigen::Index>(fx), iy = static_cast<Eigen::Index>(fy);
  const double tx = x - fx, ty = y - fy;
  auto at = [&](Eigen::Index xx, Eigen::Index yy) {
    if (xx < 0 || yy < 0 || xx >= img.cols() || yy >= img.rows()) return 0.0;
    return img(yy, xx);
  };
  return (1 - ty) * ((1 - tx) * at(ix, iy) + tx * at(ix + 1, iy)) +
         ty * ((1 - tx) * at(ix, iy + 1) + tx * at(ix + 1, iy + 1));
}

// Integer translation; vacated pixels are filled with `fill`.
inline Image shift_image(const Image& img, Eigen::Index dx, Eigen::Index dy, double fill = 0.0) {
  Image out = Image::Constant(img.rows(), img.cols(), fill);
  for (Eigen::Index y = 0; y < img.rows(); ++y) {
    const Eigen::Index sy = y - dy;
    if (sy < 0 || sy >= img.rows()) continue;
    for (Eigen::Index x = 0; x < img.cols(); ++x) {
      const Eigen::Index sx = x - dx;
      if (sx < 0 || sx >= img.cols()) continue;
      out(y, x) = img(sy, sx);
    }
  }
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  double m = *mid;
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), mid));
  }
  return m;
}

inline std::vector<double> border_pixels(const Image& img, Eigen::Index width = 2) {
  std::vector<double> out;
  for (Eigen::Index y = 0; y < img.rows(); ++y)
    for (Eigen::Index x = 0; x < img.cols(); ++x)
      if (y < width || x < width || y >= img.rows() - width || x >= img.cols() - width)
        out.push_back(img(y, x));
  return out;
}

}  // namespace ramseycal
