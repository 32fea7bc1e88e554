#pragma once

// Minimal deterministic SVG chart writer: line series over numeric x, or
// labeled bars. No display server, no timestamps, stable float formatting.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "fsda/core/errors.hpp"

namespace fsda {

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};

namespace detail {

inline std::string fmtg(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline const char* plot_color(size_t i) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  return kColors[i % 6];
}

}  // namespace detail

inline void write_line_plot_svg(const std::filesystem::path& path, const std::string& title,
                                const std::string& xlabel, const std::string& ylabel,
                                const std::vector<PlotSeries>& series) {
  check_arg(!series.empty(), "plot: no series");
  const int W = 640, H = 420, ml = 70, mr = 160, mt = 48, mb = 56;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (auto& s : series) {
    check_arg(s.x.size() == s.y.size() && !s.x.empty(), "plot: bad series " + s.name);
    for (double v : s.x) xmin = std::min(xmin, v), xmax = std::max(xmax, v);
    for (double v : s.y) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  double ypad = 0.08 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  auto px = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto py = [&](double v) { return H - mb - (v - ymin) / (ymax - ymin) * (H - mt - mb); };

  std::ofstream out(path, std::ios::binary);
  check_arg((bool)out, "plot: cannot write " + path.string());
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << W / 2 << "' y='24' font-size='16' text-anchor='middle' font-family='sans-serif'>" << title
      << "</text>\n";
  // axes
  out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
      << "' stroke='black'/>\n";
  out << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
      << "' stroke='black'/>\n";
  for (int i = 0; i <= 4; ++i) {
    double xv = xmin + (xmax - xmin) * i / 4, yv = ymin + (ymax - ymin) * i / 4;
    out << "<text x='" << detail::fmtg(px(xv)) << "' y='" << H - mb + 18
        << "' font-size='11' text-anchor='middle' font-family='sans-serif'>" << detail::fmtg(xv) << "</text>\n";
    out << "<text x='" << ml - 8 << "' y='" << detail::fmtg(py(yv) + 4)
        << "' font-size='11' text-anchor='end' font-family='sans-serif'>" << detail::fmtg(yv) << "</text>\n";
    out << "<line x1='" << ml << "' y1='" << detail::fmtg(py(yv)) << "' x2='" << W - mr << "' y2='"
        << detail::fmtg(py(yv)) << "' stroke='#dddddd'/>\n";
  }
  out << "<text x='" << (ml + W - mr) / 2 << "' y='" << H - 12
      << "' font-size='13' text-anchor='middle' font-family='sans-serif'>" << xlabel << "</text>\n";
  out << "<text x='18' y='" << (mt + H - mb) / 2
      << "' font-size='13' text-anchor='middle' font-family='sans-serif' transform='rotate(-90 18 "
      << (mt + H - mb) / 2 << ")'>" << ylabel << "</text>\n";
  for (size_t si = 0; si < series.size(); ++si) {
    auto& s = series[si];
    const char* col = detail::plot_color(si);
    out << "<polyline fill='none' stroke='" << col << "' stroke-width='2' points='";
    for (size_t i = 0; i < s.x.size(); ++i)
      out << detail::fmtg(px(s.x[i])) << "," << detail::fmtg(py(s.y[i])) << " ";
    out << "'/>\n";
    for (size_t i = 0; i < s.x.size(); ++i)
      out << "<circle cx='" << detail::fmtg(px(s.x[i])) << "' cy='" << detail::fmtg(py(s.y[i]))
          << "' r='3' fill='" << col << "'/>\n";
    int ly = mt + 16 + (int)si * 18;
    out << "<line x1='" << W - mr + 10 << "' y1='" << ly - 4 << "' x2='" << W - mr + 34 << "' y2='" << ly - 4
        << "' stroke='" << col << "' stroke-width='2'/>\n";
    out << "<text x='" << W - mr + 40 << "' y='" << ly
        << "' font-size='12' font-family='sans-serif'>" << s.name << "</text>\n";
  }
  out << "</svg>\n";
}

/// Labeled bars with optional error whiskers (err entries may be 0).
inline void write_bar_plot_svg(const std::filesystem::path& path, const std::string& title,
                               const std::string& ylabel, const std::vector<std::string>& labels,
                               const std::vector<double>& values, const std::vector<double>& err) {
  check_arg(!labels.empty() && labels.size() == values.size() && values.size() == err.size(),
            "plot: bad bar data");
  const int W = 640, H = 420, ml = 70, mr = 30, mt = 48, mb = 72;
  double ymin = 0, ymax = -1e300;
  for (size_t i = 0; i < values.size(); ++i) ymax = std::max(ymax, values[i] + err[i]);
  ymax *= 1.08;
  if (ymax <= ymin) ymax = 1;
  auto py = [&](double v) { return H - mb - (v - ymin) / (ymax - ymin) * (H - mt - mb); };
  double bw = (double)(W - ml - mr) / values.size();

  std::ofstream out(path, std::ios::binary);
  check_arg((bool)out, "plot: cannot write " + path.string());
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << W / 2 << "' y='24' font-size='16' text-anchor='middle' font-family='sans-serif'>" << title
      << "</text>\n";
  out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb << "' stroke='black'/>\n";
  out << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
      << "' stroke='black'/>\n";
  for (int i = 0; i <= 4; ++i) {
    double yv = ymin + (ymax - ymin) * i / 4;
    out << "<text x='" << ml - 8 << "' y='" << detail::fmtg(py(yv) + 4)
        << "' font-size='11' text-anchor='end' font-family='sans-serif'>" << detail::fmtg(yv) << "</text>\n";
    out << "<line x1='" << ml << "' y1='" << detail::fmtg(py(yv)) << "' x2='" << W - mr << "' y2='"
        << detail::fmtg(py(yv)) << "' stroke='#dddddd'/>\n";
  }
  out << "<text x='18' y='" << (mt + H - mb) / 2
      << "' font-size='13' text-anchor='middle' font-family='sans-serif' transform='rotate(-90 18 "
      << (mt + H - mb) / 2 << ")'>" << ylabel << "</text>\n";
  for (size_t i = 0; i < values.size(); ++i) {
    double x0 = ml + bw * i + bw * 0.18, w = bw * 0.64;
    out << "<rect x='" << detail::fmtg(x0) << "' y='" << detail::fmtg(py(values[i])) << "' width='"
        << detail::fmtg(w) << "' height='" << detail::fmtg(py(ymin) - py(values[i])) << "' fill='"
        << detail::plot_color(0) << "'/>\n";
    if (err[i] > 0) {
      double cx = x0 + w / 2;
      out << "<line x1='" << detail::fmtg(cx) << "' y1='" << detail::fmtg(py(values[i] - err[i])) << "' x2='"
          << detail::fmtg(cx) << "' y2='" << detail::fmtg(py(values[i] + err[i])) << "' stroke='black'/>\n";
    }
    out << "<text x='" << detail::fmtg(x0 + w / 2) << "' y='" << H - mb + 18
        << "' font-size='11' text-anchor='middle' font-family='sans-serif'>" << labels[i] << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace fsda
