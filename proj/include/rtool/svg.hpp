#pragma once

// Deterministic SVG plots: a labeled scatter with an optional dashed least-squares line, and
// small multiples for the subset report (MSE scatter plus under/over SSE bars per subset).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "rtool/subsets.hpp"

namespace rtool::svg {

struct Point {
  double x = 0;
  double y = 0;
  std::string label;
};

struct Line {
  double slope = 0;
  double intercept = 0;
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
};

namespace detail {

/// Fixed two-decimal coordinates keep output byte-stable.
inline std::string num(double v) {
  if (std::fabs(v) < 0.005) v = 0;  // avoid "-0.00"
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 2);
  return std::string(buf, r.ptr);
}

/// Tick text: four significant digits.
inline std::string tick(double v) {
  if (v == 0) return "0";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 4);
  return std::string(buf, r.ptr);
}

inline std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo, hi;
};

inline Range padded(double lo, double hi) {
  if (!(hi > lo)) {
    const double pad = lo == 0 ? 0.5 : std::fabs(lo) * 0.1;
    return {lo - pad, hi + pad};
  }
  const double pad = (hi - lo) * 0.08;
  return {lo - pad, hi + pad};
}

struct Frame {
  double x0, y0, w, h;  // plotting area in SVG units
  Range xr, yr;
  double sx(double x) const { return x0 + (x - xr.lo) / (xr.hi - xr.lo) * w; }
  double sy(double y) const { return y0 + h - (y - yr.lo) / (yr.hi - yr.lo) * h; }
};

inline void axes(std::string& out, const Frame& f, const Axes& a) {
  out += "<rect class=\"frame\" x=\"" + num(f.x0) + "\" y=\"" + num(f.y0) + "\" width=\"" + num(f.w) +
         "\" height=\"" + num(f.h) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  out += "<text class=\"title\" x=\"" + num(f.x0 + f.w / 2) + "\" y=\"" + num(f.y0 - 10) +
         "\" text-anchor=\"middle\" font-size=\"13\">" + escape(a.title) + "</text>\n";
  out += "<text class=\"xlabel\" x=\"" + num(f.x0 + f.w / 2) + "\" y=\"" + num(f.y0 + f.h + 34) +
         "\" text-anchor=\"middle\" font-size=\"11\">" + escape(a.x_label) + "</text>\n";
  out += "<text class=\"ylabel\" x=\"" + num(f.x0 - 46) + "\" y=\"" + num(f.y0 + f.h / 2) +
         "\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 " + num(f.x0 - 46) + " " +
         num(f.y0 + f.h / 2) + ")\">" + escape(a.y_label) + "</text>\n";
  for (double v : {f.xr.lo, f.xr.hi})
    out += "<text class=\"tick\" x=\"" + num(f.sx(v)) + "\" y=\"" + num(f.y0 + f.h + 16) +
           "\" text-anchor=\"middle\" font-size=\"10\">" + tick(v) + "</text>\n";
  for (double v : {f.yr.lo, f.yr.hi})
    out += "<text class=\"tick\" x=\"" + num(f.x0 - 6) + "\" y=\"" + num(f.sy(v) + 3) +
           "\" text-anchor=\"end\" font-size=\"10\">" + tick(v) + "</text>\n";
}

inline void scatter_panel(std::string& out, double x0, double y0, double w, double h, const std::vector<Point>& pts,
                          std::optional<Line> line, const Axes& a) {
  double xlo = pts.front().x, xhi = xlo, ylo = pts.front().y, yhi = ylo;
  for (const auto& p : pts) {
    xlo = std::min(xlo, p.x);
    xhi = std::max(xhi, p.x);
    ylo = std::min(ylo, p.y);
    yhi = std::max(yhi, p.y);
  }
  const bool draw_line = line && pts.size() >= 2 && xhi > xlo;
  if (draw_line) {
    for (double x : {xlo, xhi}) {
      ylo = std::min(ylo, line->intercept + line->slope * x);
      yhi = std::max(yhi, line->intercept + line->slope * x);
    }
  }
  Frame f{x0, y0, w, h, padded(xlo, xhi), padded(ylo, yhi)};
  axes(out, f, a);
  if (draw_line) {
    out += "<path class=\"regression\" d=\"M " + num(f.sx(xlo)) + " " + num(f.sy(line->intercept + line->slope * xlo)) +
           " L " + num(f.sx(xhi)) + " " + num(f.sy(line->intercept + line->slope * xhi)) +
           "\" stroke=\"#c33\" stroke-width=\"1.5\" stroke-dasharray=\"5,4\" fill=\"none\"/>\n";
  }
  for (const auto& p : pts) {
    out += "<circle class=\"point\" cx=\"" + num(f.sx(p.x)) + "\" cy=\"" + num(f.sy(p.y)) +
           "\" r=\"4\" fill=\"#1f5fa8\"/>\n";
    out += "<text class=\"point-label\" x=\"" + num(f.sx(p.x) + 6) + "\" y=\"" + num(f.sy(p.y) - 6) +
           "\" font-size=\"10\">" + escape(p.label) + "</text>\n";
  }
}

struct BarPair {
  std::string label;
  double under = 0;
  double over = 0;
};

inline void bar_panel(std::string& out, double x0, double y0, double w, double h, const std::vector<BarPair>& bars,
                      const Axes& a) {
  double top = 0;
  for (const auto& b : bars) top = std::max({top, b.under, b.over});
  if (!(top > 0)) top = 1;
  Frame f{x0, y0, w, h, {0, static_cast<double>(bars.size())}, {0, top * 1.08}};
  axes(out, f, a);
  const double slot = w / static_cast<double>(std::max<std::size_t>(bars.size(), 1));
  const double bw = slot * 0.35;
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double left = x0 + slot * static_cast<double>(i) + slot * 0.15;
    const std::pair<double, const char*> parts[] = {{bars[i].under, "under"}, {bars[i].over, "over"}};
    for (int k = 0; k < 2; ++k) {
      const double v = parts[k].first;
      const double y = f.sy(v);
      out += "<rect class=\"bar-" + std::string(parts[k].second) + "\" x=\"" + num(left + bw * k) + "\" y=\"" +
             num(y) + "\" width=\"" + num(bw) + "\" height=\"" + num(y0 + h - y) + "\" fill=\"" +
             (k == 0 ? "#3b8f5a" : "#b5562e") + "\"/>\n";
    }
    out += "<text class=\"bar-label\" x=\"" + num(left + bw) + "\" y=\"" + num(y0 + h + 12) +
           "\" text-anchor=\"middle\" font-size=\"10\">" + escape(bars[i].label) + "</text>\n";
  }
}

inline std::string open(double w, double h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
         "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\" font-family=\"sans-serif\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

}  // namespace detail

/// One scatter plot. The dashed regression path is drawn only with two or more distinct x values.
inline std::string emit_scatter(const std::vector<Point>& points, std::optional<Line> line, const Axes& axes) {
  if (points.empty()) throw ValidationError("emit_scatter: need at least one point");
  std::string out = detail::open(480, 360);
  detail::scatter_panel(out, 80, 40, 370, 270, points, line, axes);
  out += "</svg>\n";
  return out;
}

/// Small multiples for a subset search: per selected subset, the MSE-vs-ln-perplexity scatter
/// with its regression line and the under/over SSE bars for every variant. Variants are
/// labeled by rank (1 = first variant in the family order).
inline std::string emit_subset_panels(const SearchResult& result, const std::string& title) {
  const double pw = 300, ph = 200, row_h = 290;
  const std::size_t rows = std::max<std::size_t>(result.reports.size(), 1);
  std::string out = detail::open(760, 60 + row_h * static_cast<double>(rows));
  out += "<text class=\"heading\" x=\"20\" y=\"26\" font-size=\"15\">" + detail::escape(title) + "</text>\n";
  if (result.reports.empty()) {
    out += "<text class=\"stop\" x=\"20\" y=\"60\" font-size=\"12\">" + detail::escape(result.stop_reason) + "</text>\n";
  }
  for (std::size_t r = 0; r < result.reports.size(); ++r) {
    const auto& rep = result.reports[r];
    const double y0 = 80 + row_h * static_cast<double>(r);
    std::vector<Point> pts;
    std::vector<detail::BarPair> bars;
    for (std::size_t v = 0; v < rep.variants.size(); ++v) {
      pts.push_back({rep.variants[v].ln_ppl, rep.variants[v].mse, std::to_string(v + 1)});
      bars.push_back({std::to_string(v + 1), rep.variants[v].split.sse_under, rep.variants[v].split.sse_over});
    }
    const std::string name = std::to_string(rep.iteration) + ". " + rep.subset + " (n=" + std::to_string(rep.n_points) + ")";
    detail::scatter_panel(out, 80, y0, pw, ph, pts, Line{rep.slope.slope, rep.slope.intercept},
                          {name, "ln perplexity", "MSE"});
    detail::bar_panel(out, 440, y0, pw, ph, bars, {"SSE under (green) / over (orange)", "variant rank", "SSE"});
  }
  out += "</svg>\n";
  return out;
}

}  // namespace rtool::svg
