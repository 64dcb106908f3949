#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepsca/analysis.hpp"
#include "deepsca/attack.hpp"

namespace deepsca {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::string colour = "#1f77b4";
};

struct Panel {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  std::optional<double> y_min;
  std::optional<double> y_max;
};

/// Stacked line-plot panels sharing one width.
std::string render_svg(std::span<const Panel> panels, double width = 720, double panel_height = 260);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Trace count against average rank, with the p10-p90 band.
std::string rank_curve_svg(const RankCurve& curve, const std::string& title);

/// Mean trace with the normalised weight map on top and the CPA correlation
/// of the known key underneath.
std::string cgv_overlay_svg(std::span<const double> mean_trace, const WeightMap& map,
                            const CpaResult* cpa, const std::string& title);

std::vector<double> mean_trace(const TraceSet& ts);

}  // namespace deepsca
