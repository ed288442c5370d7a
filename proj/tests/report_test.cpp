#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>

#include "rtool/csv.hpp"
#include "rtool/store.hpp"
#include "rtool/svg.hpp"
#include "rtool/trend.hpp"

using namespace rtool;
namespace fs = std::filesystem;

namespace {

std::size_t count(const std::string& s, const std::string& what) {
  std::size_t n = 0;
  for (auto p = s.find(what); p != std::string::npos; p = s.find(what, p + 1)) ++n;
  return n;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("rtool_report_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<svg::Point> five_points() {
  return {{1, 2, "1"}, {2, 4, "2"}, {3, 5, "3"}, {4, 4, "4"}, {5, 5, "5"}};
}

svg::Line least_squares(const std::vector<svg::Point>& pts) {
  std::vector<double> x, y;
  for (const auto& p : pts) {
    x.push_back(p.x);
    y.push_back(p.y);
  }
  auto f = slope_test(x, y, Direction::positive);
  return {f.slope, f.intercept};
}

}  // namespace

TEST(Csv, RoundTripIsByteIdentical) {
  csv::Table t;
  t.header = {"family", "metric", "note"};
  t.rows = {{"gpt2", "delta_ll", "plain"},
            {"opt", "mse", "has,comma"},
            {"gpt_neo", "x", "say \"hi\""},
            {"a", "b", "two\nlines"},
            {"", "", ""}};
  const auto text = csv::emit(t);
  const auto back = csv::parse(text);
  EXPECT_EQ(back, t);
  EXPECT_EQ(csv::emit(back), text);
}

TEST(Csv, RandomTablesRoundTrip) {
  std::mt19937 rng(7);
  const std::string alphabet = "ab,\"\n x1";
  for (int trial = 0; trial < 200; ++trial) {
    csv::Table t;
    const int cols = 1 + static_cast<int>(rng() % 4);
    for (int c = 0; c < cols; ++c) t.header.push_back("c" + std::to_string(c));
    const int rows = static_cast<int>(rng() % 5);
    for (int r = 0; r < rows; ++r) {
      std::vector<std::string> row;
      for (int c = 0; c < cols; ++c) {
        std::string cell;
        const int len = static_cast<int>(rng() % 6);
        for (int i = 0; i < len; ++i) cell += alphabet[rng() % alphabet.size()];
        row.push_back(cell);
      }
      // a single empty cell is indistinguishable from an empty line
      if (cols == 1 && row[0].empty()) row[0] = "e";
      t.rows.push_back(row);
    }
    const auto text = csv::emit(t);
    EXPECT_EQ(csv::emit(csv::parse(text)), text);
    EXPECT_EQ(csv::parse(text), t);
  }
}

TEST(Csv, RejectsRaggedRows) {
  EXPECT_THROW(csv::parse("a,b\n1,2,3\n"), ParseError);
  EXPECT_THROW(csv::parse("a\n\"open\n"), ParseError);
  EXPECT_THROW(csv::parse(""), SchemaError);
}

TEST(Svg, ScatterHasOneMarkerPerPointAndOneDashedLine) {
  const auto pts = five_points();
  const auto s = svg::emit_scatter(pts, least_squares(pts), {"t", "ln perplexity", "delta LL"});
  EXPECT_EQ(count(s, "<circle class=\"point\""), 5u);
  EXPECT_EQ(count(s, "<path "), 1u);
  EXPECT_EQ(count(s, "stroke-dasharray=\"5,4\""), 1u);
  EXPECT_EQ(s.rfind("<svg ", 0), 0u);
  EXPECT_EQ(s.substr(s.size() - 7), "</svg>\n");
}

TEST(Svg, SinglePointHasNoRegressionLine) {
  const auto s = svg::emit_scatter({{3, 1, "1"}}, svg::Line{1, 0}, {"t", "x", "y"});
  EXPECT_EQ(count(s, "<circle class=\"point\""), 1u);
  EXPECT_EQ(count(s, "<path "), 0u);
}

TEST(Svg, CoordinatesFollowThePaddedFrame) {
  // x in [1, 5] padded by 8% on each side -> [0.68, 5.32]; plot area starts at x=80, width 370
  const auto s = svg::emit_scatter(five_points(), std::nullopt, {"t", "x", "y"});
  const double expected = 80 + (1 - 0.68) / (5.32 - 0.68) * 370;
  char buf[32];
  std::snprintf(buf, sizeof buf, "cx=\"%.2f\"", expected);
  EXPECT_NE(s.find(buf), std::string::npos) << buf;
}

TEST(Svg, EscapesMarkup) {
  const auto s = svg::emit_scatter({{1, 1, "<a&b>"}}, std::nullopt, {"x < y", "x", "y"});
  EXPECT_NE(s.find("&lt;a&amp;b&gt;"), std::string::npos);
  EXPECT_NE(s.find("x &lt; y"), std::string::npos);
  EXPECT_EQ(s.find("<a&b>"), std::string::npos);
}

TEST(Svg, MatchesGoldenFile) {
  const auto pts = five_points();
  const auto s = svg::emit_scatter(pts, least_squares(pts), {"gpt2: delta log-likelihood", "ln perplexity", "delta LL (nats)"});
  const std::string golden = std::string(RTOOL_FIXTURES) + "/report/scatter_golden.svg";
  if (std::getenv("RTOOL_UPDATE_GOLDEN")) write_atomic(golden, s);
  EXPECT_EQ(s, text::read_file(golden));
  // emitting twice is byte-identical
  EXPECT_EQ(s, svg::emit_scatter(pts, least_squares(pts), {"gpt2: delta log-likelihood", "ln perplexity", "delta LL (nats)"}));
}

TEST(Svg, SubsetPanelsDrawOneRowPerReport) {
  SearchResult r;
  for (int it = 1; it <= 2; ++it) {
    SubsetReport rep;
    rep.subset = "pos=NN";
    rep.iteration = it;
    rep.n_points = 10;
    for (int v = 0; v < 3; ++v) {
      VariantSubsetStats st;
      st.variant = "v" + std::to_string(v);
      st.ln_ppl = 3.0 - v * 0.5;
      st.mse = 1 + v;
      st.split.sse_under = v;
      st.split.sse_over = 2;
      rep.variants.push_back(st);
    }
    rep.slope.slope = -2;
    rep.slope.intercept = 7;
    r.reports.push_back(rep);
  }
  const auto s = svg::emit_subset_panels(r, "demo");
  EXPECT_EQ(count(s, "<circle class=\"point\""), 6u);
  EXPECT_EQ(count(s, "class=\"regression\""), 2u);
  EXPECT_EQ(count(s, "class=\"bar-under\""), 6u);
  EXPECT_EQ(count(s, "class=\"bar-over\""), 6u);

  SearchResult empty;
  empty.stop_reason = "no eligible subset";
  EXPECT_NE(svg::emit_subset_panels(empty, "demo").find("no eligible subset"), std::string::npos);
}

TEST(Store, FreshOnlyForSameInputsAndUnmodifiedFile) {
  const auto root = scratch("fresh");
  AnalysisStore st(root);
  EXPECT_FALSE(st.fresh("a.txt", "in1"));
  st.put("a.txt", "hello\n", "in1");
  EXPECT_TRUE(st.fresh("a.txt", "in1"));
  EXPECT_FALSE(st.fresh("a.txt", "in2"));
  EXPECT_EQ(st.output_of("a.txt"), text::fingerprint("hello\n"));

  // the manifest persists
  AnalysisStore again(root);
  EXPECT_TRUE(again.fresh("a.txt", "in1"));

  // editing the file behind the store's back makes it stale
  std::ofstream(root / "a.txt") << "tampered\n";
  EXPECT_FALSE(again.fresh("a.txt", "in1"));
  fs::remove(root / "a.txt");
  EXPECT_FALSE(again.contains("a.txt"));
}

TEST(Store, GetOrPutComputesOnce) {
  AnalysisStore st(scratch("getorput"));
  int calls = 0;
  auto produce = [&] {
    ++calls;
    return std::string("x");
  };
  EXPECT_EQ(st.get_or_put("d/x.txt", "k", produce), "x");
  EXPECT_EQ(st.get_or_put("d/x.txt", "k", produce), "x");
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(st.computed(), 1);
  EXPECT_EQ(st.skipped(), 1);
  st.get_or_put("d/x.txt", "k2", produce);
  EXPECT_EQ(calls, 2);
}

TEST(Store, FailedProducerLeavesNoRecord) {
  const auto root = scratch("atomic");
  AnalysisStore st(root);
  st.put("ok.txt", "1", "k");
  EXPECT_THROW(st.get_or_put("bad.txt", "k", []() -> std::string { throw Error("boom"); }), Error);
  EXPECT_FALSE(st.contains("bad.txt"));
  EXPECT_FALSE(fs::exists(root / "bad.txt"));
  for (const auto& e : fs::recursive_directory_iterator(root)) EXPECT_NE(e.path().extension(), ".tmp");
  EXPECT_TRUE(AnalysisStore(root).fresh("ok.txt", "k"));
}

TEST(Store, CorruptManifestIsReported) {
  const auto root = scratch("corrupt");
  fs::create_directories(root);
  std::ofstream(root / AnalysisStore::kManifest) << "{not json";
  EXPECT_THROW(AnalysisStore{root}, SchemaError);
}

TEST(Store, CombinedFingerprintsRespectBoundaries) {
  EXPECT_NE(combine_fingerprints({"ab", "c"}), combine_fingerprints({"a", "bc"}));
  EXPECT_EQ(combine_fingerprints({"ab", "c"}), combine_fingerprints(std::vector<std::string>{"ab", "c"}));
}
