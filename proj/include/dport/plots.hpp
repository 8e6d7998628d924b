#pragma once

// Minimal SVG charts for evaluation reports.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dport/eval.hpp"

namespace dport {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // undefined values are omitted
};

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, std::optional<std::pair<double, double>> y_range = {});

std::string svg_bar_chart(const std::string& title, const std::string& y_label,
                          const std::vector<std::pair<std::string, std::optional<double>>>& bars,
                          std::pair<double, double> y_range = {0.0, 1.0});

std::string roc_svg(const std::vector<RocPoint>& curve, const std::string& title);

/// Below/beyond AUC across age thresholds.
std::string age_sweep_svg(const AgeSweep& sweep, const std::string& title);

}  // namespace dport
