#include "lwd/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace lwd {

namespace {

constexpr double kWidth = 640.0, kHeight = 420.0;
constexpr double kLeft = 70.0, kRight = 170.0, kTop = 40.0, kBottom = 55.0;

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Round step of the form {1, 2, 5} * 10^k giving roughly `target` ticks.
double nice_step(double span, int target) {
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * mag >= raw) return m * mag;
  }
  return 10.0 * mag;
}

}  // namespace

std::string render_line_svg(const PlotSpec& spec, const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
  if (spec.diagonal) {
    x0 = std::min(x0, 0.0), y0 = std::min(y0, 0.0);
    x1 = std::max(x1, 1.0), y1 = std::max(y1, 1.0);
  }
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double xs = nice_step(x1 - x0, 6), ys = nice_step(y1 - y0, 5);
  x0 = std::floor(x0 / xs) * xs, x1 = std::ceil(x1 / xs) * xs;
  y0 = std::floor(y0 / ys) * ys, y1 = std::ceil(y1 / ys) * ys;

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << coord(kLeft + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(spec.title)
    << "</text>\n";

  for (double t = x0; t <= x1 + xs * 1e-9; t += xs) {
    o << "<line x1=\"" << coord(px(t)) << "\" y1=\"" << coord(kTop) << "\" x2=\"" << coord(px(t)) << "\" y2=\""
      << coord(kTop + ph) << "\" stroke=\"#eee\"/>\n";
    o << "<text x=\"" << coord(px(t)) << "\" y=\"" << coord(kTop + ph + 16) << "\" text-anchor=\"middle\">" << num(t)
      << "</text>\n";
  }
  for (double t = y0; t <= y1 + ys * 1e-9; t += ys) {
    o << "<line x1=\"" << coord(kLeft) << "\" y1=\"" << coord(py(t)) << "\" x2=\"" << coord(kLeft + pw) << "\" y2=\""
      << coord(py(t)) << "\" stroke=\"#eee\"/>\n";
    o << "<text x=\"" << coord(kLeft - 6) << "\" y=\"" << coord(py(t) + 4) << "\" text-anchor=\"end\">" << num(t)
      << "</text>\n";
  }
  o << "<rect x=\"" << coord(kLeft) << "\" y=\"" << coord(kTop) << "\" width=\"" << coord(pw) << "\" height=\""
    << coord(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << coord(kLeft + pw / 2) << "\" y=\"" << coord(kHeight - 14) << "\" text-anchor=\"middle\">"
    << escape(spec.x_label) << "</text>\n";
  o << "<text transform=\"translate(18," << coord(kTop + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(spec.y_label) << "</text>\n";

  if (spec.diagonal) {
    o << "<line x1=\"" << coord(px(0)) << "\" y1=\"" << coord(py(0)) << "\" x2=\"" << coord(px(1)) << "\" y2=\""
      << coord(py(1)) << "\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n";
  }

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) o << coord(px(s.x[i])) << ',' << coord(py(s.y[i])) << ' ';
    }
    o << "\"/>\n";
    if (spec.markers) {
      for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
        if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
        o << "<circle cx=\"" << coord(px(s.x[i])) << "\" cy=\"" << coord(py(s.y[i])) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
      }
    }
    const double ly = kTop + 10 + 18.0 * static_cast<double>(k);
    const double lx = kLeft + pw + 12;
    o << "<line x1=\"" << coord(lx) << "\" y1=\"" << coord(ly) << "\" x2=\"" << coord(lx + 20) << "\" y2=\"" << coord(ly)
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << coord(lx + 26) << "\" y=\"" << coord(ly + 4) << "\">" << escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string series_csv(const std::vector<Series>& series) {
  std::ostringstream o;
  o << "series,x,y\n";
  o.precision(17);
  for (const auto& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      o << s.name << ',' << s.x[i] << ',' << s.y[i] << '\n';
    }
  }
  return o.str();
}

}  // namespace lwd
