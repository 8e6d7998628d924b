#include "dport/plots.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace dport {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 160, kTop = 40, kBottom = 60;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string esc(const std::string& s) {
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

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

void header(std::ostringstream& o, const std::string& title) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
}

void axes(std::ostringstream& o, const Frame& f, const std::string& x_label, const std::string& y_label,
          bool x_ticks) {
  o << "<line x1=\"" << num(f.px(f.x0)) << "\" y1=\"" << num(f.py(f.y0)) << "\" x2=\"" << num(f.px(f.x1))
    << "\" y2=\"" << num(f.py(f.y0)) << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << num(f.px(f.x0)) << "\" y1=\"" << num(f.py(f.y0)) << "\" x2=\"" << num(f.px(f.x0))
    << "\" y2=\"" << num(f.py(f.y1)) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double y = f.y0 + (f.y1 - f.y0) * i / 5.0;
    o << "<text x=\"" << num(kLeft - 8) << "\" y=\"" << num(f.py(y) + 4) << "\" text-anchor=\"end\">" << tick(y)
      << "</text>\n";
    if (x_ticks) {
      const double x = f.x0 + (f.x1 - f.x0) * i / 5.0;
      o << "<text x=\"" << num(f.px(x)) << "\" y=\"" << num(kHeight - kBottom + 18) << "\" text-anchor=\"middle\">"
        << tick(x) << "</text>\n";
    }
  }
  o << "<text x=\"" << num((kLeft + kWidth - kRight) / 2) << "\" y=\"" << num(kHeight - 18)
    << "\" text-anchor=\"middle\">" << esc(x_label) << "</text>\n";
  o << "<text x=\"18\" y=\"" << num((kTop + kHeight - kBottom) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << num((kTop + kHeight - kBottom) / 2) << ")\">" << esc(y_label) << "</text>\n";
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, std::optional<std::pair<double, double>> y_range) {
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!any) {
        x0 = x1 = x;
        y0 = y1 = y;
        any = true;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (y_range) std::tie(y0, y1) = *y_range;
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  const Frame f{x0, x1, y0, y1};
  std::ostringstream o;
  header(o, title);
  axes(o, f, x_label, y_label, true);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % std::size(kColors)];
    if (!series[i].points.empty()) {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (const auto& [x, y] : series[i].points) o << num(f.px(x)) << ',' << num(f.py(y)) << ' ';
      o << "\"/>\n";
    }
    const double ly = kTop + 20 + 20.0 * static_cast<double>(i);
    o << "<line x1=\"" << num(kWidth - kRight + 12) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(kWidth - kRight + 32)
      << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << num(kWidth - kRight + 38) << "\" y=\"" << num(ly + 4) << "\">" << esc(series[i].label)
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string svg_bar_chart(const std::string& title, const std::string& y_label,
                          const std::vector<std::pair<std::string, std::optional<double>>>& bars,
                          std::pair<double, double> y_range) {
  const Frame f{0.0, static_cast<double>(std::max<std::size_t>(bars.size(), 1)), y_range.first, y_range.second};
  std::ostringstream o;
  header(o, title);
  axes(o, f, "", y_label, false);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double xl = f.px(static_cast<double>(i) + 0.15);
    const double xr = f.px(static_cast<double>(i) + 0.85);
    const double xc = (xl + xr) / 2;
    if (const auto& v = bars[i].second) {
      const double top = f.py(std::clamp(*v, f.y0, f.y1));
      o << "<rect x=\"" << num(xl) << "\" y=\"" << num(top) << "\" width=\"" << num(xr - xl) << "\" height=\""
        << num(f.py(f.y0) - top) << "\" fill=\"" << kColors[i % std::size(kColors)] << "\"/>\n";
      o << "<text x=\"" << num(xc) << "\" y=\"" << num(top - 4) << "\" text-anchor=\"middle\">" << num(*v) << "</text>\n";
    } else {
      o << "<text x=\"" << num(xc) << "\" y=\"" << num(f.py(f.y0) - 6) << "\" text-anchor=\"middle\">n/a</text>\n";
    }
    o << "<text x=\"" << num(xc) << "\" y=\"" << num(kHeight - kBottom + 18) << "\" text-anchor=\"middle\">"
      << esc(bars[i].first) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string roc_svg(const std::vector<RocPoint>& curve, const std::string& title) {
  Series roc{"ROC", {}};
  for (const auto& p : curve) roc.points.emplace_back(p.fpr, p.tpr);
  Series chance{"chance", {{0.0, 0.0}, {1.0, 1.0}}};
  return svg_line_chart(title, "false positive rate", "true positive rate", {roc, chance}, std::pair{0.0, 1.0});
}

std::string age_sweep_svg(const AgeSweep& sweep, const std::string& title) {
  Series below{"below age", {}};
  Series beyond{"beyond age", {}};
  for (const auto& r : sweep.rows) {
    if (r.below.roc_auc.defined()) below.points.emplace_back(r.threshold, *r.below.roc_auc.value);
    if (r.beyond.roc_auc.defined()) beyond.points.emplace_back(r.threshold, *r.beyond.roc_auc.value);
  }
  return svg_line_chart(title, "age threshold", "ROC AUC", {below, beyond}, std::pair{0.0, 1.0});
}

}  // namespace dport
