#include "timewarp/analysis.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace tw {

namespace {

constexpr double kWidth = 640, kHeight = 420, kLeft = 70, kRight = 20, kTop = 40, kBottom = 55;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

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

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

Frame bounds(const std::vector<Series>& series) {
  Frame f{INFINITY, -INFINITY, INFINITY, -INFINITY};
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      f.x0 = std::min(f.x0, s.x[i]);
      f.x1 = std::max(f.x1, s.x[i]);
      f.y0 = std::min(f.y0, s.y[i]);
      f.y1 = std::max(f.y1, s.y[i]);
    }
  }
  if (!std::isfinite(f.x0)) f = {0, 1, 0, 1};
  if (f.x1 == f.x0) f.x1 = f.x0 + 1;
  if (f.y1 == f.y0) f.y1 = f.y0 + 1;
  const double pad = 0.05 * (f.y1 - f.y0);
  f.y0 -= pad;
  f.y1 += pad;
  return f;
}

std::string axes(const Frame& f, const std::string& title, const std::string& xlabel, const std::string& ylabel) {
  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" "
      "font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      kWidth, kHeight);
  s += fmt::format("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", kWidth / 2,
                   escape(title));
  s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", kLeft,
                   kTop, kWidth - kLeft - kRight, kHeight - kTop - kBottom);
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4;
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4;
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{:.3g}</text>\n", f.px(xv),
                     kHeight - kBottom + 16, xv);
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3g}</text>\n", kLeft - 6, f.py(yv) + 4,
                     yv);
  }
  s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", kWidth / 2, kHeight - 12,
                   escape(xlabel));
  s += fmt::format("<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
                   kHeight / 2, kHeight / 2, escape(ylabel));
  return s;
}

std::string legend(const std::vector<Series>& series) {
  std::string s;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 14 + 16 * static_cast<double>(i);
    s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n", kWidth - kRight - 150,
                     y - 9, kColors[i % 6]);
    s += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", kWidth - kRight - 135, y, escape(series[i].label));
  }
  return s;
}

void save(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write plot " + path.string());
  out << body << "</svg>\n";
}

}  // namespace

void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<Series>& series) {
  const Frame f = bounds(series);
  std::string s = axes(f, title, xlabel, ylabel);
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::string pts;
    auto flush = [&] {
      if (!pts.empty()) {
        s += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                         kColors[i % 6], pts);
      }
      pts.clear();
    };
    const auto& ser = series[i];
    for (std::size_t k = 0; k < ser.x.size() && k < ser.y.size(); ++k) {
      if (!std::isfinite(ser.y[k])) {
        flush();
        continue;
      }
      pts += fmt::format("{:.1f},{:.1f} ", f.px(ser.x[k]), f.py(ser.y[k]));
    }
    flush();
  }
  save(path, s + legend(series));
}

void write_scatter_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                        const std::string& ylabel, const std::vector<Series>& series) {
  const Frame f = bounds(series);
  std::string s = axes(f, title, xlabel, ylabel);
  constexpr std::size_t kMaxPoints = 5000;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& ser = series[i];
    const std::size_t n = std::min(ser.x.size(), ser.y.size());
    const std::size_t stride = std::max<std::size_t>(1, n / kMaxPoints);
    for (std::size_t k = 0; k < n; k += stride) {
      if (!std::isfinite(ser.x[k]) || !std::isfinite(ser.y[k])) continue;
      s += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"1.5\" fill=\"{}\" fill-opacity=\"0.5\"/>\n",
                       f.px(ser.x[k]), f.py(ser.y[k]), kColors[i % 6]);
    }
  }
  save(path, s + legend(series));
}

void write_histogram_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                          const std::vector<std::pair<std::string, std::vector<double>>>& samples, int bins) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& [_, xs] : samples) {
    for (double x : xs) {
      if (!std::isfinite(x)) continue;
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi == lo) hi = lo + 1;
  const double width = (hi - lo) / bins;
  std::vector<Series> series;
  for (const auto& [label, xs] : samples) {
    std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
    for (double x : xs) {
      if (!std::isfinite(x)) continue;
      counts[static_cast<std::size_t>(std::min(bins - 1, static_cast<int>((x - lo) / width)))] += 1.0;
    }
    Series s{label, {}, {}};
    for (int b = 0; b < bins; ++b) {
      const double dens = xs.empty() ? 0.0 : counts[static_cast<std::size_t>(b)] / (xs.size() * width);
      s.x.push_back(lo + b * width);
      s.y.push_back(dens);
      s.x.push_back(lo + (b + 1) * width);
      s.y.push_back(dens);
    }
    series.push_back(std::move(s));
  }
  write_line_plot(path, title, xlabel, "density", series);
}

}  // namespace tw
