#pragma once

// Minimal static SVG plots. Every figure is written next to the CSV it was drawn
// from, so the numbers stay inspectable without a plotting stack.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "ramseycal/image.hpp"
#include "ramseycal/pixel_map.hpp"

namespace ramseycal {

enum class Mark { points, line, dashed };

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::vector<double> yerr;  // optional
  Mark mark = Mark::points;
  std::string color = "#1f77b4";
};

struct Panel {
  std::string title, xlabel, ylabel;
  std::vector<Series> series;
  bool log_x = false, log_y = false;
  std::optional<std::pair<double, double>> y_range;
  std::vector<double> vlines;  // dashed vertical markers
};

struct HeatmapPanel {
  std::string title;
  Image values;
  std::optional<Mask> valid;  // invalid pixels are drawn grey
  double vmin = 0, vmax = 0;  // equal means autoscale
  struct Ellipse {
    double cx, cy, ax, ay;
  };
  std::optional<Ellipse> ellipse;
};

namespace detail {

inline std::string fmt(double v, const char* f = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline std::vector<double> nice_ticks(double lo, double hi, int target = 5) {
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  std::vector<double> t;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) t.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
  return t;
}

// Viridis-like ramp, 5 anchors.
inline std::string colormap(double u) {
  static const double c[5][3] = {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  u = std::clamp(u, 0.0, 1.0) * 4;
  const int i = std::min(3, static_cast<int>(u));
  const double t = u - i;
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(c[i][0] + t * (c[i + 1][0] - c[i][0])),
                static_cast<int>(c[i][1] + t * (c[i + 1][1] - c[i][1])),
                static_cast<int>(c[i][2] + t * (c[i + 1][2] - c[i][2])));
  return buf;
}

}  // namespace detail

inline std::string svg_panel(const Panel& p, double ox, double oy, double w, double h) {
  using detail::fmt;
  const double ml = 60, mr = 15, mt = 28, mb = 42;
  const double pw = w - ml - mr, ph = h - mt - mb;
  auto tx = [&](double v) { return p.log_x ? std::log10(v) : v; };
  auto ty = [&](double v) { return p.log_y ? std::log10(v) : v; };
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : p.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(tx(s.x[i])) || !std::isfinite(ty(s.y[i]))) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      const double e = s.yerr.empty() ? 0.0 : s.yerr[i];
      y0 = std::min(y0, ty(s.y[i] - (p.log_y ? 0.0 : e)));
      y1 = std::max(y1, ty(s.y[i] + (p.log_y ? 0.0 : e)));
    }
  if (p.y_range) {
    y0 = ty(p.y_range->first);
    y1 = ty(p.y_range->second);
  }
  if (!(x1 > x0)) { x0 -= 1; x1 += 1; }
  if (!(y1 > y0)) { y0 -= 1; y1 += 1; }
  const double padx = 0.04 * (x1 - x0), pady = 0.06 * (y1 - y0);
  x0 -= padx; x1 += padx;
  if (!p.y_range) { y0 -= pady; y1 += pady; }
  auto X = [&](double v) { return ox + ml + (tx(v) - x0) / (x1 - x0) * pw; };
  auto Y = [&](double v) { return oy + mt + (1 - (ty(v) - y0) / (y1 - y0)) * ph; };

  std::string s;
  s += "<g>\n<rect x=\"" + fmt(ox + ml) + "\" y=\"" + fmt(oy + mt) + "\" width=\"" + fmt(pw) + "\" height=\"" +
       fmt(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  s += "<text x=\"" + fmt(ox + ml + pw / 2) + "\" y=\"" + fmt(oy + 18) +
       "\" text-anchor=\"middle\" font-size=\"13\">" + detail::esc(p.title) + "</text>\n";
  s += "<text x=\"" + fmt(ox + ml + pw / 2) + "\" y=\"" + fmt(oy + h - 6) +
       "\" text-anchor=\"middle\" font-size=\"11\">" + detail::esc(p.xlabel) + "</text>\n";
  s += "<text transform=\"translate(" + fmt(ox + 14) + "," + fmt(oy + mt + ph / 2) +
       ") rotate(-90)\" text-anchor=\"middle\" font-size=\"11\">" + detail::esc(p.ylabel) + "</text>\n";
  for (double t : detail::nice_ticks(x0, x1)) {
    const double px = ox + ml + (t - x0) / (x1 - x0) * pw;
    s += "<line x1=\"" + fmt(px) + "\" y1=\"" + fmt(oy + mt + ph) + "\" x2=\"" + fmt(px) + "\" y2=\"" +
         fmt(oy + mt + ph + 4) + "\" stroke=\"black\"/>";
    s += "<text x=\"" + fmt(px) + "\" y=\"" + fmt(oy + mt + ph + 16) + "\" text-anchor=\"middle\" font-size=\"10\">" +
         fmt(p.log_x ? std::pow(10.0, t) : t) + "</text>\n";
  }
  for (double t : detail::nice_ticks(y0, y1)) {
    const double py = oy + mt + (1 - (t - y0) / (y1 - y0)) * ph;
    s += "<line x1=\"" + fmt(ox + ml - 4) + "\" y1=\"" + fmt(py) + "\" x2=\"" + fmt(ox + ml) + "\" y2=\"" + fmt(py) +
         "\" stroke=\"black\"/>";
    s += "<text x=\"" + fmt(ox + ml - 6) + "\" y=\"" + fmt(py + 3) + "\" text-anchor=\"end\" font-size=\"10\">" +
         fmt(p.log_y ? std::pow(10.0, t) : t) + "</text>\n";
  }
  for (double v : p.vlines)
    s += "<line x1=\"" + fmt(X(v)) + "\" y1=\"" + fmt(oy + mt) + "\" x2=\"" + fmt(X(v)) + "\" y2=\"" +
         fmt(oy + mt + ph) + "\" stroke=\"grey\" stroke-dasharray=\"4,3\"/>\n";

  double ly = oy + mt + 12;
  for (const auto& se : p.series) {
    if (se.mark == Mark::points) {
      for (std::size_t i = 0; i < se.x.size(); ++i) {
        if (!std::isfinite(tx(se.x[i])) || !std::isfinite(ty(se.y[i]))) continue;
        if (!se.yerr.empty() && se.yerr[i] > 0)
          s += "<line x1=\"" + fmt(X(se.x[i])) + "\" y1=\"" + fmt(Y(se.y[i] - se.yerr[i])) + "\" x2=\"" +
               fmt(X(se.x[i])) + "\" y2=\"" + fmt(Y(se.y[i] + se.yerr[i])) + "\" stroke=\"" + se.color + "\"/>";
        s += "<circle cx=\"" + fmt(X(se.x[i])) + "\" cy=\"" + fmt(Y(se.y[i])) + "\" r=\"2.5\" fill=\"" + se.color +
             "\"/>";
      }
      s += "\n";
    } else {
      // NaN breaks the polyline, which is how the sawtooth reference wraps.
      std::string pts;
      auto flush = [&] {
        if (!pts.empty())
          s += "<polyline fill=\"none\" stroke=\"" + se.color + "\" stroke-width=\"1.5\"" +
               (se.mark == Mark::dashed ? " stroke-dasharray=\"6,4\"" : "") + " points=\"" + pts + "\"/>\n";
        pts.clear();
      };
      for (std::size_t i = 0; i < se.x.size(); ++i) {
        if (!std::isfinite(tx(se.x[i])) || !std::isfinite(ty(se.y[i]))) {
          flush();
          continue;
        }
        pts += fmt(X(se.x[i])) + "," + fmt(Y(se.y[i])) + " ";
      }
      flush();
    }
    if (!se.label.empty()) {
      s += "<text x=\"" + fmt(ox + ml + pw - 6) + "\" y=\"" + fmt(ly) + "\" text-anchor=\"end\" font-size=\"10\" paint-order=\"stroke\" stroke=\"white\" stroke-width=\"3\" fill=\"" +
           se.color + "\">" + detail::esc(se.label) + "</text>\n";
      ly += 12;
    }
  }
  s += "</g>\n";
  return s;
}

namespace detail {

// Block average to at most ~max_cells cells; a block is valid if any member is.
inline HeatmapPanel coarsen(const HeatmapPanel& p, Eigen::Index max_cells) {
  const Eigen::Index n = p.values.size();
  if (n <= max_cells) return p;
  const auto f = static_cast<Eigen::Index>(std::ceil(std::sqrt(static_cast<double>(n) / static_cast<double>(max_cells))));
  const Eigen::Index r = (p.values.rows() + f - 1) / f, c = (p.values.cols() + f - 1) / f;
  HeatmapPanel out = p;
  out.values = Image::Zero(r, c);
  Image cnt = Image::Zero(r, c);
  for (Eigen::Index y = 0; y < p.values.rows(); ++y)
    for (Eigen::Index x = 0; x < p.values.cols(); ++x) {
      const double v = p.values(y, x);
      if ((p.valid && !(*p.valid)(y, x)) || !std::isfinite(v)) continue;
      out.values(y / f, x / f) += v;
      cnt(y / f, x / f) += 1;
    }
  Mask m(r, c);
  for (Eigen::Index i = 0; i < out.values.size(); ++i) {
    m(i) = cnt(i) > 0;
    out.values(i) = m(i) ? out.values(i) / cnt(i) : 0.0;
  }
  out.valid = m;
  if (out.ellipse) {
    const double k = static_cast<double>(f);
    out.ellipse = HeatmapPanel::Ellipse{(p.ellipse->cx + 0.5) / k - 0.5, (p.ellipse->cy + 0.5) / k - 0.5,
                                        p.ellipse->ax / k, p.ellipse->ay / k};
  }
  return out;
}

}  // namespace detail

// Cells that are masked or non-finite are drawn grey. Without an explicit range
// the colour scale spans the 2nd to 98th percentile of the drawn values.
inline std::string svg_heatmap(const HeatmapPanel& panel, double ox, double oy, double w, double h) {
  using detail::fmt;
  const HeatmapPanel p = detail::coarsen(panel, 4096);
  const double mt = 24, mb = 24, ml = 10, mr = 60;
  const double rows = static_cast<double>(p.values.rows()), cols = static_cast<double>(p.values.cols());
  if (rows == 0 || cols == 0) return "";
  const double cell = std::min((w - ml - mr) / cols, (h - mt - mb) / rows);
  auto drawn = [&](Eigen::Index i) { return (!p.valid || (*p.valid)(i)) && std::isfinite(p.values(i)); };
  double lo = p.vmin, hi = p.vmax;
  if (!(hi > lo)) {
    std::vector<double> v;
    for (Eigen::Index i = 0; i < p.values.size(); ++i)
      if (drawn(i)) v.push_back(p.values(i));
    std::sort(v.begin(), v.end());
    if (!v.empty()) {
      lo = v[static_cast<std::size_t>(0.02 * static_cast<double>(v.size() - 1))];
      hi = v[static_cast<std::size_t>(0.98 * static_cast<double>(v.size() - 1))];
    }
    if (!(hi > lo)) { lo -= 1; hi += 1; }
  }
  std::string s = "<g shape-rendering=\"crispEdges\">\n<text x=\"" + fmt(ox + ml + cell * cols / 2) + "\" y=\"" + fmt(oy + 16) +
                  "\" text-anchor=\"middle\" font-size=\"13\">" + detail::esc(p.title) + "</text>\n";
  for (Eigen::Index y = 0; y < p.values.rows(); ++y)
    for (Eigen::Index x = 0; x < p.values.cols(); ++x) {
      const bool ok = (!p.valid || (*p.valid)(y, x)) && std::isfinite(p.values(y, x));
      const double t = std::clamp((p.values(y, x) - lo) / (hi - lo), 0.0, 1.0);
      const std::string col = ok ? detail::colormap(t) : "#bbbbbb";
      // integer edges so neighbouring cells abut without seams
      const double x0 = std::round(ox + ml + cell * static_cast<double>(x));
      const double x1 = std::round(ox + ml + cell * static_cast<double>(x + 1));
      const double y0 = std::round(oy + mt + cell * static_cast<double>(y));
      const double y1 = std::round(oy + mt + cell * static_cast<double>(y + 1));
      s += "<rect x=\"" + fmt(x0) + "\" y=\"" + fmt(y0) + "\" width=\"" + fmt(x1 - x0) + "\" height=\"" +
           fmt(y1 - y0) + "\" fill=\"" + col + "\"/>";
    }
  s += "\n";
  if (p.ellipse)
    s += "<ellipse cx=\"" + fmt(ox + ml + cell * (p.ellipse->cx + 0.5)) + "\" cy=\"" +
         fmt(oy + mt + cell * (p.ellipse->cy + 0.5)) + "\" rx=\"" + fmt(cell * p.ellipse->ax) + "\" ry=\"" +
         fmt(cell * p.ellipse->ay) + "\" fill=\"none\" stroke=\"magenta\" stroke-width=\"1.5\" stroke-dasharray=\"5,3\"/>\n";
  const double bx = ox + ml + cell * cols + 10, bh = cell * rows;
  for (int i = 0; i < 32; ++i)
    s += "<rect x=\"" + fmt(bx) + "\" y=\"" + fmt(oy + mt + bh * (31 - i) / 32.0) + "\" width=\"10\" height=\"" +
         fmt(bh / 32.0 + 0.5) + "\" fill=\"" + detail::colormap(i / 31.0) + "\"/>";
  s += "<text x=\"" + fmt(bx + 13) + "\" y=\"" + fmt(oy + mt + 8) + "\" font-size=\"10\">" + fmt(hi) + "</text>";
  s += "<text x=\"" + fmt(bx + 13) + "\" y=\"" + fmt(oy + mt + bh) + "\" font-size=\"10\">" + fmt(lo) + "</text>\n";
  s += "</g>\n";
  return s;
}

// Figure of panels on a grid, `columns` wide.
struct Figure {
  std::vector<Panel> panels;
  std::vector<HeatmapPanel> heatmaps;  // laid out after the line panels
  int columns = 2;
  double panel_width = 360, panel_height = 260;

  std::string svg() const {
    const std::size_t n = panels.size() + heatmaps.size();
    const int rows = static_cast<int>((n + static_cast<std::size_t>(columns) - 1) / static_cast<std::size_t>(columns));
    const double W = columns * panel_width, H = std::max(1, rows) * panel_height;
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt(W) + "\" height=\"" +
                    detail::fmt(H) + "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t i = 0; i < n; ++i) {
      const double ox = static_cast<double>(i % static_cast<std::size_t>(columns)) * panel_width;
      const double oy = static_cast<double>(i / static_cast<std::size_t>(columns)) * panel_height;
      s += i < panels.size() ? svg_panel(panels[i], ox, oy, panel_width, panel_height)
                             : svg_heatmap(heatmaps[i - panels.size()], ox, oy, panel_width, panel_height);
    }
    return s + "</svg>\n";
  }
};

}  // namespace ramseycal
