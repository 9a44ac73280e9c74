#pragma once

#include <string>
#include <vector>

namespace lwd {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  /// Draw markers at every point in addition to the line.
  bool markers = true;
  /// Draw the y = x diagonal (ROC plots).
  bool diagonal = false;
};

/// Standalone SVG line chart with axes, ticks and a legend.
std::string render_line_svg(const PlotSpec& spec, const std::vector<Series>& series);

/// Long-format CSV: series,x,y.
std::string series_csv(const std::vector<Series>& series);

}  // namespace lwd
