#include "clove/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "clove/error.hpp"

namespace clove {

std::vector<double> NumericTable::column(std::size_t i) const {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.at(i));
  return out;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  const auto b = s.find_first_not_of(' ');
  return b == std::string::npos ? "" : s.substr(b);
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

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

NumericTable read_numeric_csv(std::istream& in, const std::string& source) {
  NumericTable t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    auto cells = split(line);
    if (t.columns.empty()) {
      for (auto& c : cells) t.columns.push_back(trim(c));
      continue;
    }
    const std::string where = source + ":" + std::to_string(lineno);
    if (cells.size() != t.columns.size()) {
      throw DataError(where + ": expected " + std::to_string(t.columns.size()) + " fields, got " +
                      std::to_string(cells.size()));
    }
    std::vector<double> row;
    for (auto& c : cells) {
      c = trim(c);
      double v = 0;
      const auto r = std::from_chars(c.data(), c.data() + c.size(), v);
      if (c.empty() || r.ec != std::errc() || r.ptr != c.data() + c.size()) {
        throw DataError(where + ": '" + c + "' is not a number");
      }
      row.push_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  if (t.columns.empty()) throw DataError(source + ": missing header row");
  return t;
}

std::string svg_line_chart(const std::vector<double>& x, const std::vector<double>& y, const std::string& x_label,
                           const std::string& y_label, const ChartStyle& style) {
  if (x.size() != y.size()) throw DimensionError("svg_line_chart: x and y lengths differ");
  const double left = 70, right = 20, top = 30, bottom = 50;
  const double pw = style.width - left - right, ph = style.height - top - bottom;

  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) continue;
    if (!any) {
      x0 = x1 = x[i];
      y0 = y1 = y[i];
      any = true;
    }
    x0 = std::min(x0, x[i]);
    x1 = std::max(x1, x[i]);
    y0 = std::min(y0, y[i]);
    y1 = std::max(y1, y[i]);
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  auto sx = [&](double v) { return left + (v - x0) / (x1 - x0) * pw; };
  auto sy = [&](double v) { return top + (1 - (v - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << style.width << "\" height=\"" << style.height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fy = y0 + (y1 - y0) * k / 4, fx = x0 + (x1 - x0) * k / 4;
    o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << sy(fy) << "\" y2=\"" << sy(fy)
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << left - 6 << "\" y=\"" << sy(fy) + 4 << "\" text-anchor=\"end\">" << num(fy) << "</text>\n";
    o << "<text x=\"" << sx(fx) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << num(fx)
      << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << style.height - 10 << "\" text-anchor=\"middle\">"
    << escape(x_label) << "</text>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"18\" text-anchor=\"middle\">" << escape(y_label) << "</text>\n";
  o << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isfinite(x[i]) && std::isfinite(y[i])) o << sx(x[i]) << "," << sy(y[i]) << " ";
  }
  o << "\"/>\n</svg>\n";
  return o.str();
}

}  // namespace clove
