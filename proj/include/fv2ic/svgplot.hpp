#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fv2ic/csv.hpp"
#include "fv2ic/errors.hpp"

namespace fv2ic {

// Minimal SVG chart emitter. CSVs are the machine contract; these images are
// the human-facing convenience, so the drawing stays deliberately plain.
class SvgPlot {
 public:
  SvgPlot(std::string title, std::string x_label, std::string y_label)
      : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)) {}

  void add_series(std::string name, std::vector<double> xs, std::vector<double> ys) {
    if (xs.size() != ys.size()) throw ContractViolation("svg series length mismatch");
    series_.push_back({std::move(name), std::move(xs), std::move(ys), false});
  }

  void add_scatter(std::string name, std::vector<double> xs, std::vector<double> ys) {
    if (xs.size() != ys.size()) throw ContractViolation("svg scatter length mismatch");
    series_.push_back({std::move(name), std::move(xs), std::move(ys), true});
  }

  void save(const std::filesystem::path& path) const {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    f << render();
  }

  std::string render() const {
    const int W = 640, H = 420;
    const double ml = 64, mr = 150, mt = 42, mb = 48;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : series_) {
      for (std::size_t i = 0; i < s.xs.size(); ++i) {
        if (first) {
          xmin = xmax = s.xs[i];
          ymin = ymax = s.ys[i];
          first = false;
        }
        xmin = std::min(xmin, s.xs[i]);
        xmax = std::max(xmax, s.xs[i]);
        ymin = std::min(ymin, s.ys[i]);
        ymax = std::max(ymax, s.ys[i]);
      }
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const double px = (W - ml - mr) / (xmax - xmin);
    const double py = (H - mt - mb) / (ymax - ymin);
    auto X = [&](double x) { return ml + (x - xmin) * px; };
    auto Y = [&](double y) { return H - mb - (y - ymin) * py; };

    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<text x='" << W / 2 << "' y='24' text-anchor='middle' font-size='15' "
          "font-family='sans-serif'>" << title_ << "</text>\n";
    os << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
       << "' stroke='black'/>\n";
    os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
       << "' stroke='black'/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = xmin + (xmax - xmin) * i / 4.0;
      const double yv = ymin + (ymax - ymin) * i / 4.0;
      os << "<text x='" << X(xv) << "' y='" << H - mb + 16
         << "' text-anchor='middle' font-size='10' font-family='sans-serif'>" << fmt_double(round3(xv))
         << "</text>\n";
      os << "<text x='" << ml - 6 << "' y='" << Y(yv) + 3
         << "' text-anchor='end' font-size='10' font-family='sans-serif'>" << fmt_double(round3(yv))
         << "</text>\n";
    }
    os << "<text x='" << (ml + W - mr) / 2 << "' y='" << H - 12
       << "' text-anchor='middle' font-size='12' font-family='sans-serif'>" << x_label_
       << "</text>\n";
    os << "<text x='16' y='" << (mt + H - mb) / 2
       << "' text-anchor='middle' font-size='12' font-family='sans-serif' transform='rotate(-90 16 "
       << (mt + H - mb) / 2 << ")'>" << y_label_ << "</text>\n";

    for (std::size_t k = 0; k < series_.size(); ++k) {
      const auto& s = series_[k];
      const char* color = palette[k % 8];
      if (s.scatter) {
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
          os << "<circle cx='" << X(s.xs[i]) << "' cy='" << Y(s.ys[i])
             << "' r='3' fill='" << color << "' fill-opacity='0.75'/>\n";
        }
      } else {
        os << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
          os << X(s.xs[i]) << ',' << Y(s.ys[i]) << ' ';
        }
        os << "'/>\n";
      }
      const double ly = mt + 16 * static_cast<double>(k);
      os << "<rect x='" << W - mr + 10 << "' y='" << ly - 8 << "' width='10' height='10' fill='"
         << color << "'/>\n";
      os << "<text x='" << W - mr + 24 << "' y='" << ly + 1
         << "' font-size='11' font-family='sans-serif'>" << s.name << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
  }

 private:
  struct Series {
    std::string name;
    std::vector<double> xs, ys;
    bool scatter = false;
  };

  static double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

  std::string title_, x_label_, y_label_;
  std::vector<Series> series_;
};

// Centered moving average used by the convergence views; w=1 reproduces the
// raw series.
inline std::vector<double> moving_average(const std::vector<double>& xs, int w) {
  if (w <= 1) return xs;
  std::vector<double> out(xs.size());
  const int half = w / 2;
  for (int i = 0; i < static_cast<int>(xs.size()); ++i) {
    const int lo = std::max(0, i - half);
    const int hi = std::min(static_cast<int>(xs.size()) - 1, i + half);
    double s = 0.0;
    for (int j = lo; j <= hi; ++j) s += xs[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = s / (hi - lo + 1);
  }
  return out;
}

}  // namespace fv2ic
