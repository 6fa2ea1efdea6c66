#pragma once

#include <string>
#include <utility>
#include <vector>

namespace scalelab {

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

struct PlotSpec {
  std::string title;
  std::string x_label = "flops";
  std::string y_label = "loss (nats)";
  bool log_x = true;
  bool log_y = true;
  int width = 760;
  int height = 520;
};

// Deterministic, dependency-free SVG line plot (log-log by default).
void write_svg_plot(const std::string& path, const PlotSpec& spec,
                    const std::vector<PlotSeries>& series);

}  // namespace scalelab
