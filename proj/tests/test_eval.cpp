#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"
#include "recas/eval.hpp"
#include "recas/rng.hpp"

using namespace recas;

namespace {

Detection det(double x, double y, double score) { return make_detection({x, y}, 50, 50, score, ObjectClass::mitosis); }

Annotation mit(double x, double y) { return {{x, y}, ObjectClass::mitosis}; }

}  // namespace

TEST(Hpf, ContainmentIsClosed) {
  const HPFConfig c;
  EXPECT_TRUE(hpf_contains({0, 0}, {0, 0}, c));
  EXPECT_TRUE(hpf_contains({0, 0}, {7110, 5333}, c));
  EXPECT_FALSE(hpf_contains({0, 0}, {7110.5, 10}, c));
  EXPECT_FALSE(hpf_contains({1, 0}, {0.5, 10}, c));
}

TEST(Hpf, SinglePointAndEmpty) {
  const SlideDims s{20000, 15000};
  const std::vector<Point> none;
  EXPECT_EQ(find_hpf(none, s).count, 0);
  const std::vector<Point> one{{12000, 9000}};
  const auto h = find_hpf(one, s);
  EXPECT_EQ(h.count, 1);
  EXPECT_TRUE(hpf_contains(h.origin, one[0], HPFConfig{}));
  EXPECT_GE(h.origin.x, 0);
  EXPECT_LE(h.origin.x, 20000 - 7110);
}

TEST(Hpf, SlideSmallerThanField) {
  const std::vector<Point> pts{{10, 10}, {3000, 2000}};
  const auto h = find_hpf(pts, SlideDims{4000, 3000});
  EXPECT_EQ(h.count, 2);
  EXPECT_EQ(h.origin.x, 0);
  EXPECT_EQ(h.origin.y, 0);
}

TEST(Hpf, ClusterWins) {
  std::vector<Point> pts;
  for (int i = 0; i < 10; ++i) pts.push_back({15000.0 + i * 100, 10000.0 + i * 50});
  for (int i = 0; i < 5; ++i) pts.push_back({500.0 + i * 3000, 500});
  const auto h = find_hpf(pts, SlideDims{30000, 20000});
  EXPECT_GE(h.count, 10);
  EXPECT_EQ(count_in_hpf(pts, h.origin, HPFConfig{}), h.count);
}

TEST(Hpf, MatchesBruteForce) {
  Rng rng(123);
  for (int t = 0; t < 400; ++t) {
    const SlideDims s{std::int64_t(8000 + rng.below(20000)), std::int64_t(6000 + rng.below(15000))};
    std::vector<Point> pts;
    const auto n = rng.below(120);
    for (std::uint64_t i = 0; i < n; ++i) {
      // integer and coarse coordinates produce many boundary coincidences
      if (rng.bernoulli(0.5))
        pts.push_back({std::floor(rng.uniform(0, double(s.width)) / 500) * 500,
                       std::floor(rng.uniform(0, double(s.height)) / 500) * 500});
      else
        pts.push_back({rng.uniform(0, double(s.width)), rng.uniform(0, double(s.height))});
    }
    const auto fast = find_hpf(pts, s);
    const auto slow = oracle::find_hpf(pts, s);
    ASSERT_EQ(fast.count, slow.count) << "instance " << t;
    ASSERT_EQ(fast.origin.x, slow.origin.x) << "instance " << t;
    ASSERT_EQ(fast.origin.y, slow.origin.y) << "instance " << t;
    ASSERT_EQ(count_in_hpf(pts, fast.origin, HPFConfig{}), fast.count);
  }
}

TEST(F1, Examples) {
  EXPECT_EQ(f1_score(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(f1_score(1, 0.5), 2.0 / 3.0);
  const std::vector<Annotation> gts{mit(100, 100), mit(500, 500)};
  const std::vector<Detection> preds{det(100, 100, 0.9), det(800, 800, 0.4)};
  auto pr = f1_at_threshold(preds, gts, 0.5);
  EXPECT_DOUBLE_EQ(pr.precision, 1.0);
  EXPECT_DOUBLE_EQ(pr.recall, 0.5);
  pr = f1_at_threshold(preds, gts, 0.3);
  EXPECT_DOUBLE_EQ(pr.precision, 0.5);
  EXPECT_DOUBLE_EQ(pr.f1, 0.5);
}

TEST(F1, RecallNonIncreasingInThreshold) {
  Rng rng(3);
  std::vector<Annotation> gts;
  std::vector<Detection> preds;
  for (int i = 0; i < 300; ++i) {
    const Point p{rng.uniform(0, 5000), rng.uniform(0, 5000)};
    gts.push_back(mit(p.x, p.y));
    if (rng.bernoulli(0.8)) preds.push_back(det(p.x + rng.normal(0, 5), p.y + rng.normal(0, 5), rng.uniform()));
    if (rng.bernoulli(0.3)) preds.push_back(det(rng.uniform(0, 5000), rng.uniform(0, 5000), rng.uniform()));
  }
  double prev = 2;
  for (double t : threshold_grid()) {
    const auto pr = f1_at_threshold(preds, gts, t);
    EXPECT_LE(pr.recall, prev);
    prev = pr.recall;
  }
}

TEST(FpTaxonomy, HardWhenNearLookalike) {
  const std::vector<Annotation> gts{{{100, 100}, ObjectClass::mitosis_like}, {{500, 500}, ObjectClass::granulocyte}};
  EXPECT_EQ(classify_fp(det(110, 100, 0.5), gts), FpKind::hard);
  EXPECT_EQ(classify_fp(det(126, 100, 0.5), gts), FpKind::easy);
  EXPECT_EQ(classify_fp(det(500, 500, 0.5), gts), FpKind::easy);
}

TEST(EndToEnd, PerfectPredictionsGiveZeroError) {
  Rng rng(8);
  std::vector<Annotation> gts;
  std::vector<Detection> preds;
  for (int i = 0; i < 200; ++i) {
    const Point p{rng.uniform(0, 20000), rng.uniform(0, 15000)};
    gts.push_back(mit(p.x, p.y));
    preds.push_back(det(p.x, p.y, 1.0));
  }
  for (auto s : {McSetting::GA, McSetting::GB}) {
    const auto e = end_to_end(preds, gts, {20000, 15000}, 0.5, s);
    EXPECT_EQ(e.mc_pred, e.mc_gt);
    ASSERT_TRUE(e.ape.has_value());
    EXPECT_EQ(*e.ape, 0.0);
  }
}

TEST(EndToEnd, GaCountsPredictionsGbCountsTruth) {
  // Proposed field lands on a cluster of FPs far from the real mitoses.
  std::vector<Annotation> gts{mit(1000, 1000), mit(1500, 1200)};
  std::vector<Detection> preds;
  for (int i = 0; i < 5; ++i) preds.push_back(det(20000.0 + i * 10, 14000, 0.9));
  const SlideDims s{30000, 20000};
  const auto ga = end_to_end(preds, gts, s, 0.5, McSetting::GA);
  const auto gb = end_to_end(preds, gts, s, 0.5, McSetting::GB);
  EXPECT_EQ(ga.mc_gt, 2);
  EXPECT_EQ(ga.mc_pred, 5);
  EXPECT_DOUBLE_EQ(*ga.ape, 1.5);
  EXPECT_EQ(gb.mc_pred, 0);
  EXPECT_DOUBLE_EQ(*gb.ape, 1.0);
}

TEST(McSummary, SlidesWithoutMitosesExcludedFromMape) {
  std::vector<SlideEval> slides(2);
  slides[0] = {"a", {20000, 15000}, {det(100, 100, 0.9), det(120, 300, 0.9)}, {mit(100, 100)}};
  slides[1] = {"b", {20000, 15000}, {det(100, 100, 0.9)}, {}};
  const auto s = summarize_mc(slides, 0.5, McSetting::GA);
  EXPECT_EQ(s.slides_in_mape, 1u);
  EXPECT_DOUBLE_EQ(s.mape, 1.0);
  EXPECT_DOUBLE_EQ(s.mae, 1.0);
  EXPECT_FALSE(s.per_slide[1].ape.has_value());
}

TEST(McSummary, MapeIsUnweightedMean) {
  std::vector<SlideEval> slides(2);
  // slide a: gt 4, pred 2 -> 0.5; slide b: gt 1, pred 1 -> 0
  slides[0] = {"a", {20000, 15000}, {det(100, 100, 0.9), det(200, 100, 0.9)},
               {mit(100, 100), mit(200, 100), mit(300, 100), mit(400, 100)}};
  slides[1] = {"b", {20000, 15000}, {det(100, 100, 0.9)}, {mit(100, 100)}};
  EXPECT_DOUBLE_EQ(summarize_mc(slides, 0.5, McSetting::GA).mape, 0.25);
}

TEST(ThresholdSweep, LowestMapeTiesToLowerThreshold) {
  std::vector<SlideEval> slides(1);
  // Any threshold in (0.2, 0.6] keeps exactly the two true detections.
  slides[0] = {"a", {20000, 15000}, {det(100, 100, 0.6), det(200, 100, 0.6), det(300, 100, 0.2)},
               {mit(100, 100), mit(200, 100)}};
  const auto sw = recas::sweep_threshold(slides, McSetting::GA);
  EXPECT_DOUBLE_EQ(sw.best_threshold, 0.21);
  EXPECT_EQ(sw.best.mape, 0.0);
  EXPECT_EQ(sw.mape_by_threshold.size(), 101u);
}

TEST(Evaluate, AggregatesAndWritesTables) {
  std::vector<SlideEval> slides(2);
  slides[0] = {"a", {20000, 15000},
               {det(100, 100, 0.9), det(1000, 1000, 0.8), det(5000, 5000, 0.7)},
               {mit(100, 100), mit(3000, 3000), {{1005, 1000}, ObjectClass::nonmitosis}}};
  slides[1] = {"b", {20000, 15000}, {det(50, 50, 0.9)}, {mit(50, 50)}};
  const auto rep = recas::evaluate(slides, 0.5);
  ASSERT_EQ(rep.slides.size(), 2u);
  EXPECT_EQ(rep.slides[0].tp, 1u);
  EXPECT_EQ(rep.slides[0].fp, 2u);
  EXPECT_EQ(rep.slides[0].fn, 1u);
  EXPECT_EQ(rep.fp_hard, 1u);
  EXPECT_EQ(rep.fp_easy, 1u);
  EXPECT_DOUBLE_EQ(rep.pooled.precision, 2.0 / 4.0);
  EXPECT_DOUBLE_EQ(rep.pooled.recall, 2.0 / 3.0);

  std::stringstream report, scatter, bars;
  write_report(report, rep);
  write_mc_scatter(scatter, rep);
  write_fp_bars(bars, rep);
  EXPECT_NE(report.str().find("[slide a]"), std::string::npos);
  EXPECT_NE(report.str().find("[aggregate]"), std::string::npos);
  std::string line;
  std::getline(scatter, line);
  EXPECT_EQ(line, "slide,mc_gt,mc_pred_ga,mc_pred_gb");
  std::getline(bars, line);
  EXPECT_EQ(line, "slide,fp_easy,fp_hard");
  EXPECT_NE(bars.str().find("all,1,1"), std::string::npos);
}
