#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace ovseg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

// Static SVG line chart.
std::string line_chart_svg(const std::vector<Series>& series, const std::string& title, const std::string& x_label);
// Static SVG bar chart, one bar per label, values in [0, 1].
std::string bar_chart_svg(const std::vector<std::string>& labels, const std::vector<double>& values,
                          const std::string& title);

// Loss curves from a metrics JSONL log (one series per loss column).
std::vector<Series> read_loss_series(const std::filesystem::path& metrics_jsonl);

}  // namespace ovseg
