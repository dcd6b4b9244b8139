#pragma once

#include <istream>
#include <string>
#include <vector>

namespace clove {

/// Numeric CSV with a header row; every row must have one value per column.
struct NumericTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::vector<double> column(std::size_t i) const;
};

/// Throws DataError naming the line on ragged rows or non-numeric cells.
NumericTable read_numeric_csv(std::istream& in, const std::string& source);

struct ChartStyle {
  int width = 640;
  int height = 360;
};

/// Standalone SVG line chart of y against x.
std::string svg_line_chart(const std::vector<double>& x, const std::vector<double>& y, const std::string& x_label,
                           const std::string& y_label, const ChartStyle& style = {});

}  // namespace clove
