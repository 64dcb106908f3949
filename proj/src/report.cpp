#include "deepsca/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "deepsca/error.hpp"

namespace deepsca {
namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

std::vector<double> iota_axis(std::size_t n, double start) {
  std::vector<double> x(n);
  std::iota(x.begin(), x.end(), start);
  return x;
}

}  // namespace

std::string render_svg(std::span<const Panel> panels, double width, double panel_height) {
  const double ml = 70, mr = 20, mt = 30, mb = 45;
  const double height = panel_height * static_cast<double>(panels.size());
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const Panel& panel = panels[p];
    const double top = panel_height * static_cast<double>(p);
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0;
    double y0 = x0, y1 = -x0;
    for (const auto& s : panel.series) {
      for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
      for (double v : s.y) {
        if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
      }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1;
    if (!std::isfinite(y0)) y0 = 0, y1 = 1;
    if (panel.y_min) y0 = *panel.y_min;
    if (panel.y_max) y1 = *panel.y_max;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pw = width - ml - mr;
    const double ph = panel_height - mt - mb;
    auto sx = [&](double v) { return ml + (v - x0) / (x1 - x0) * pw; };
    auto sy = [&](double v) { return top + mt + (1.0 - (v - y0) / (y1 - y0)) * ph; };

    svg << "<text x=\"" << width / 2 << "\" y=\"" << top + 18 << "\" text-anchor=\"middle\" font-size=\"13\">"
        << escape(panel.title) << "</text>\n";
    svg << "<rect x=\"" << ml << "\" y=\"" << top + mt << "\" width=\"" << pw << "\" height=\"" << ph
        << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = x0 + (x1 - x0) * i / 4.0;
      const double yv = y0 + (y1 - y0) * i / 4.0;
      svg << "<text x=\"" << sx(xv) << "\" y=\"" << top + mt + ph + 14 << "\" text-anchor=\"middle\">"
          << fmt(xv) << "</text>\n";
      svg << "<text x=\"" << ml - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv)
          << "</text>\n";
    }
    svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << top + panel_height - 8
        << "\" text-anchor=\"middle\">" << escape(panel.x_label) << "</text>\n";
    svg << "<text transform=\"translate(16," << top + mt + ph / 2
        << ") rotate(-90)\" text-anchor=\"middle\">" << escape(panel.y_label) << "</text>\n";

    double legend_y = top + mt + 14;
    for (const auto& s : panel.series) {
      svg << "<polyline fill=\"none\" stroke=\"" << s.colour << "\" stroke-width=\"1.2\" points=\"";
      const std::size_t n = std::min(s.x.size(), s.y.size());
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(s.y[i])) continue;
        svg << sx(s.x[i]) << ',' << sy(std::clamp(s.y[i], y0, y1)) << ' ';
      }
      svg << "\"/>\n";
      if (!s.label.empty()) {
        svg << "<text x=\"" << ml + pw - 8 << "\" y=\"" << legend_y << "\" text-anchor=\"end\" fill=\""
            << s.colour << "\">" << escape(s.label) << "</text>\n";
        legend_y += 14;
      }
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string(), "cannot open for writing");
  out << text;
}

std::string rank_curve_svg(const RankCurve& curve, const std::string& title) {
  const std::size_t n = curve.n_max();
  Panel p{title, "number of attack traces", "average rank", {}, 0.0, std::nullopt};
  const std::vector<double> x = iota_axis(n, 1.0);
  std::vector<double> lo(n), hi(n);
  for (std::size_t i = 0; i < n; ++i) {
    lo[i] = curve.percentile(i + 1, 10.0);
    hi[i] = curve.percentile(i + 1, 90.0);
  }
  p.series.push_back({"p90", x, hi, "#bbbbbb"});
  p.series.push_back({"p10", x, lo, "#bbbbbb"});
  p.series.push_back({"mean rank (" + std::to_string(curve.repeats) + " repeats)", x,
                      curve.mean_rank, "#d62728"});
  const Panel panels[1] = {p};
  return render_svg(panels);
}

std::string cgv_overlay_svg(std::span<const double> mean_trace, const WeightMap& map,
                            const CpaResult* cpa, const std::string& title) {
  std::vector<Panel> panels;
  const std::vector<double> x = iota_axis(mean_trace.size(), 0.0);
  std::vector<double> trace_unit = normalize_unit(mean_trace);
  Panel top{title, "sample", "normalised value", {}, 0.0, 1.0};
  top.series.push_back({"mean trace", x, trace_unit, "#7f7f7f"});
  top.series.push_back({"weight map", iota_axis(map.expanded.size(), 0.0),
                        normalize_unit(map.expanded), "#d62728"});
  panels.push_back(std::move(top));
  if (cpa) {
    Panel bottom{"CPA " + cpa->description, "sample", "correlation", {}, std::nullopt, std::nullopt};
    if (cpa->known_key) {
      const auto row = cpa->row(*cpa->known_key);
      bottom.series.push_back({"known key", x, std::vector<double>(row.begin(), row.end()), "#1f77b4"});
    } else {
      std::vector<double> peak(cpa->n_samples, 0.0);
      for (int k = 0; k < 256; ++k) {
        for (std::size_t t = 0; t < cpa->n_samples; ++t) {
          peak[t] = std::max(peak[t], std::abs(cpa->at(k, t)));
        }
      }
      bottom.series.push_back({"max |corr| over keys", x, peak, "#1f77b4"});
    }
    panels.push_back(std::move(bottom));
  }
  return render_svg(panels);
}

std::vector<double> mean_trace(const TraceSet& ts) {
  std::vector<double> m(ts.n_samples, 0.0);
  for (std::size_t j = 0; j < ts.n_traces; ++j) {
    for (std::size_t t = 0; t < ts.n_samples; ++t) m[t] += ts.sample(j, t);
  }
  if (ts.n_traces > 0) {
    for (auto& v : m) v /= static_cast<double>(ts.n_traces);
  }
  return m;
}

}  // namespace deepsca
