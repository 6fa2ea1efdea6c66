#include "scalelab/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "scalelab/common.hpp"

namespace scalelab {

namespace {

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                         "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

void write_svg_plot(const std::string& path, const PlotSpec& spec,
                    const std::vector<PlotSeries>& series) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  auto tx = [&](double x) { return spec.log_x ? std::log10(x) : x; };
  auto ty = [&](double y) { return spec.log_y ? std::log10(y) : y; };
  for (const PlotSeries& s : series) {
    for (auto [x, y] : s.points) {
      if (spec.log_x && x <= 0) throw ConfigError("log-x plot needs positive x");
      if (spec.log_y && y <= 0) throw ConfigError("log-y plot needs positive y");
      xmin = std::min(xmin, tx(x));
      xmax = std::max(xmax, tx(x));
      ymin = std::min(ymin, ty(y));
      ymax = std::max(ymax, ty(y));
    }
  }
  if (xmin > xmax) throw ConfigError("svg plot: no points");
  if (xmax - xmin < 1e-12) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  if (ymax - ymin < 1e-12) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  double padx = 0.04 * (xmax - xmin), pady = 0.08 * (ymax - ymin);
  xmin -= padx;
  xmax += padx;
  ymin -= pady;
  ymax += pady;

  const int ml = 70, mr = 20, mt = 40, mb = 50;
  double pw = spec.width - ml - mr, ph = spec.height - mt - mb;
  auto px = [&](double x) { return ml + (tx(x) - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return mt + (ymax - ty(y)) / (ymax - ymin) * ph; };

  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write svg " + path);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << spec.width << "\" height=\""
    << spec.height << "\" viewBox=\"0 0 " << spec.width << " " << spec.height << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << spec.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\" "
       "font-family=\"sans-serif\">"
    << spec.title << "</text>\n";

  // frame
  f << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << fmt(pw) << "\" height=\""
    << fmt(ph) << "\" fill=\"none\" stroke=\"#333\"/>\n";

  // ticks: decades when log scale, else 5 linear ticks
  auto tick_values = [&](double lo, double hi, bool logscale) {
    std::vector<double> ticks;
    if (logscale) {
      for (int e = static_cast<int>(std::floor(lo)); e <= static_cast<int>(std::ceil(hi)); ++e)
        if (e >= lo - 1e-9 && e <= hi + 1e-9) ticks.push_back(e);
    } else {
      for (int i = 0; i <= 5; ++i) ticks.push_back(lo + (hi - lo) * i / 5.0);
    }
    return ticks;
  };
  for (double t : tick_values(xmin, xmax, spec.log_x)) {
    double x = ml + (t - xmin) / (xmax - xmin) * pw;
    f << "<line x1=\"" << fmt(x) << "\" y1=\"" << mt << "\" x2=\"" << fmt(x) << "\" y2=\""
      << mt + ph << "\" stroke=\"#ddd\"/>\n";
    std::string label = spec.log_x ? ("1e" + fmt(t)) : fmt(t);
    f << "<text x=\"" << fmt(x) << "\" y=\"" << mt + ph + 18
      << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << label
      << "</text>\n";
  }
  for (double t : tick_values(ymin, ymax, spec.log_y)) {
    double y = mt + (ymax - t) / (ymax - ymin) * ph;
    f << "<line x1=\"" << ml << "\" y1=\"" << fmt(y) << "\" x2=\"" << ml + pw << "\" y2=\""
      << fmt(y) << "\" stroke=\"#ddd\"/>\n";
    std::string label = spec.log_y ? ("1e" + fmt(t)) : fmt(t);
    f << "<text x=\"" << ml - 6 << "\" y=\"" << fmt(y + 4)
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << label
      << "</text>\n";
  }
  f << "<text x=\"" << ml + pw / 2 << "\" y=\"" << spec.height - 12
    << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">" << spec.x_label
    << "</text>\n";
  f << "<text x=\"16\" y=\"" << mt + ph / 2
    << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\" transform=\"rotate(-90 "
       "16 "
    << mt + ph / 2 << ")\">" << spec.y_label << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const char* color = kColors[si % (sizeof(kColors) / sizeof(kColors[0]))];
    std::vector<std::pair<double, double>> pts = series[si].points;
    std::sort(pts.begin(), pts.end());
    f << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\" points=\"";
    for (auto [x, y] : pts) f << fmt(px(x)) << "," << fmt(py(y)) << " ";
    f << "\"/>\n";
    for (auto [x, y] : pts)
      f << "<circle cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y)) << "\" r=\"2.5\" fill=\""
        << color << "\"/>\n";
    // legend
    double ly = mt + 16 + 16 * static_cast<double>(si);
    f << "<line x1=\"" << ml + pw - 150 << "\" y1=\"" << fmt(ly - 4) << "\" x2=\"" << ml + pw - 130
      << "\" y2=\"" << fmt(ly - 4) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    f << "<text x=\"" << ml + pw - 125 << "\" y=\"" << fmt(ly)
      << "\" font-size=\"11\" font-family=\"sans-serif\">" << series[si].label << "</text>\n";
  }
  f << "</svg>\n";
}

}  // namespace scalelab
