#include <gtest/gtest.h>

#include <sstream>

#include "clove/error.hpp"
#include "clove/plot.hpp"
#include "clove/trainer.hpp"

namespace clove {
namespace {

TEST(NumericCsv, ReadsMetricsRows) {
  std::istringstream in(std::string(kMetricsHeader) + "\n1,99.5,0.1,0.99,40,0.2,0.1,1,0.000\n2,99.4,0.2,0.99,42,0.3,0.1,1,0.000\n");
  const NumericTable t = read_numeric_csv(in, "m.csv");
  ASSERT_EQ(t.columns.size(), 9u);
  EXPECT_EQ(t.columns[1], "loss");
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.column(4), (std::vector<double>{40, 42}));
}

TEST(NumericCsv, MalformedInputNamesTheLine) {
  std::istringstream ragged("a,b\n1,2\n3\n");
  try {
    read_numeric_csv(ragged, "x.csv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("x.csv:3"), std::string::npos);
  }
  std::istringstream text("a,b\n1,nan-ish\n");
  EXPECT_THROW(read_numeric_csv(text, "x.csv"), DataError);
  std::istringstream empty("");
  EXPECT_THROW(read_numeric_csv(empty, "x.csv"), DataError);
}

TEST(SvgChart, WellFormedForShortAndFlatSeries) {
  for (const auto& y : {std::vector<double>{1.0, 2.0}, std::vector<double>{3.0, 3.0}, std::vector<double>{5.0}}) {
    std::vector<double> x(y.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i + 1);
    const std::string svg = svg_line_chart(x, y, "step", "a<b");
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    EXPECT_NE(svg.find("a&lt;b"), std::string::npos);
    EXPECT_EQ(svg.find("nan"), std::string::npos);
  }
  EXPECT_THROW(svg_line_chart({1, 2}, {1}, "x", "y"), DimensionError);
}

}  // namespace
}  // namespace clove
