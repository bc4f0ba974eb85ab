#include "ovseg/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "ovseg/error.hpp"

namespace ovseg {

namespace {

constexpr int kWidth = 720;
constexpr int kHeight = 420;
constexpr int kLeft = 60;
constexpr int kRight = 150;
constexpr int kTop = 40;
constexpr int kBottom = 50;
const char* const kColors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

void header(std::ostringstream& svg, const std::string& title) {
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
      << "</text>\n";
}

}  // namespace

std::string line_chart_svg(const std::vector<Series>& series, const std::string& title, const std::string& x_label) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  y0 = std::min(y0, 0.0);
  const double pw = kWidth - kLeft - kRight;
  const double ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream svg;
  header(svg, title);
  svg << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = y0 + (y1 - y0) * t / 4.0;
    svg << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">" << fmt(yv)
        << "</text>\n";
    const double xv = x0 + (x1 - x0) * t / 4.0;
    svg << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">" << fmt(xv)
        << "</text>\n";
  }
  svg << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
      << escape(x_label) << "</text>\n";
  for (size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kColors[k % std::size(kColors)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (std::isfinite(s.y[i])) svg << fmt(px(s.x[i])) << "," << fmt(py(s.y[i])) << " ";
    }
    svg << "\"/>\n";
    const int ly = kTop + 10 + static_cast<int>(k) * 18;
    svg << "<line x1=\"" << kWidth - kRight + 12 << "\" y1=\"" << ly << "\" x2=\"" << kWidth - kRight + 32
        << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << kWidth - kRight + 38 << "\" y=\"" << ly + 4 << "\">" << escape(s.name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string bar_chart_svg(const std::vector<std::string>& labels, const std::vector<double>& values,
                          const std::string& title) {
  if (labels.size() != values.size()) throw UsageError("bar chart: label and value counts differ");
  const double pw = kWidth - kLeft - 30;
  const double ph = kHeight - kTop - kBottom;
  std::ostringstream svg;
  header(svg, title);
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\"" << kTop + ph
      << "\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = kTop + ph - ph * t / 4.0;
    svg << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt(y + 4) << "\" text-anchor=\"end\">" << fmt(t / 4.0)
        << "</text>\n";
  }
  const double slot = labels.empty() ? pw : pw / static_cast<double>(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    const double v = std::clamp(values[i], 0.0, 1.0);
    const double x = kLeft + slot * static_cast<double>(i) + slot * 0.15;
    const double h = v * ph;
    svg << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(kTop + ph - h) << "\" width=\"" << fmt(slot * 0.7)
        << "\" height=\"" << fmt(h) << "\" fill=\"" << kColors[i % std::size(kColors)] << "\"/>\n"
        << "<text x=\"" << fmt(x + slot * 0.35) << "\" y=\"" << fmt(kTop + ph - h - 4)
        << "\" text-anchor=\"middle\">" << fmt(values[i]) << "</text>\n"
        << "<text x=\"" << fmt(x + slot * 0.35) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">"
        << escape(labels[i]) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::vector<Series> read_loss_series(const std::filesystem::path& metrics_jsonl) {
  std::ifstream in(metrics_jsonl);
  if (!in) throw DataError("cannot open metrics: " + metrics_jsonl.string());
  const char* const columns[] = {"L_total", "L_contrast", "L_entity", "L_mask"};
  std::vector<Series> out;
  for (const char* c : columns) out.push_back(Series{c, {}, {}});
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const double step = j.at("step").get<double>();
      for (size_t k = 0; k < out.size(); ++k) {
        out[k].x.push_back(step);
        out[k].y.push_back(j.at(columns[k]).get<double>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(metrics_jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ovseg
