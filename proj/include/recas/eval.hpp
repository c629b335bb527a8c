#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "recas/adjust.hpp"
#include "recas/geometry.hpp"
#include "recas/textio.hpp"

namespace recas {

/// 10 HPF at 4:3, 2.37 mm^2.
struct HPFConfig {
  double width = 7110.0;
  double height = 5333.0;
  double area_mm2 = 2.37;
};

/// A rectangle with origin `o` contains `p` iff p - size <= o <= p on both
/// axes (closed). Every HPF count in this file uses this predicate.
inline bool hpf_contains(Point o, Point p, const HPFConfig& cfg) noexcept {
  return p.x - cfg.width <= o.x && o.x <= p.x && p.y - cfg.height <= o.y && o.y <= p.y;
}

inline std::int64_t count_in_hpf(std::span<const Point> pts, Point origin, const HPFConfig& cfg) noexcept {
  std::int64_t n = 0;
  for (const auto& p : pts) n += hpf_contains(origin, p, cfg);
  return n;
}

struct HpfPlacement {
  Point origin;
  std::int64_t count = 0;
};

namespace detail {

// Range add / max query with leftmost argmax.
class MaxAddTree {
 public:
  explicit MaxAddTree(std::size_t n) : n_(std::max<std::size_t>(n, 1)), mx_(4 * n_, 0), tag_(4 * n_, 0) {}

  void add(std::size_t l, std::size_t r, std::int64_t v) { add(1, 0, n_ - 1, l, r, v); }

  /// (max value, leftmost index attaining it)
  std::pair<std::int64_t, std::size_t> top() const {
    std::size_t node = 1, lo = 0, hi = n_ - 1;
    std::int64_t acc = 0;
    while (lo != hi) {
      acc += tag_[node];
      const std::size_t mid = (lo + hi) / 2;
      if (mx_[2 * node] + acc >= mx_[2 * node + 1] + acc) {
        node = 2 * node;
        hi = mid;
      } else {
        node = 2 * node + 1;
        lo = mid + 1;
      }
    }
    return {mx_[1], lo};
  }

 private:
  void add(std::size_t node, std::size_t lo, std::size_t hi, std::size_t l, std::size_t r, std::int64_t v) {
    if (r < lo || hi < l) return;
    if (l <= lo && hi <= r) {
      mx_[node] += v;
      tag_[node] += v;
      return;
    }
    const std::size_t mid = (lo + hi) / 2;
    add(2 * node, lo, mid, l, r, v);
    add(2 * node + 1, mid + 1, hi, l, r, v);
    mx_[node] = std::max(mx_[2 * node], mx_[2 * node + 1]) + tag_[node];
  }

  std::size_t n_;
  std::vector<std::int64_t> mx_;
  std::vector<std::int64_t> tag_;
};

}  // namespace detail

/// Placement of the HPF rectangle, fully inside the slide, that encloses the
/// most points; ties go to the smallest origin y, then x. Sweeps candidate
/// origin rows upward while a range-add max tree tracks, per candidate
/// origin column, how many points the rectangle would hold. O(n log n).
inline HpfPlacement find_hpf(std::span<const Point> pts, SlideDims slide, const HPFConfig& cfg = {}) {
  slide.validate();
  const double x_max = std::max(0.0, double(slide.width) - cfg.width);
  const double y_max = std::max(0.0, double(slide.height) - cfg.height);

  struct Span {
    double lo, hi;
  };
  std::vector<Span> xs, ys;
  std::vector<double> xc{0.0}, yc{0.0};
  for (const auto& p : pts) {
    const Span sx{std::max(0.0, p.x - cfg.width), std::min(p.x, x_max)};
    const Span sy{std::max(0.0, p.y - cfg.height), std::min(p.y, y_max)};
    if (sx.lo > sx.hi || sy.lo > sy.hi) {
      xs.push_back({1.0, 0.0});  // unreachable from any valid origin
      ys.push_back({1.0, 0.0});
      continue;
    }
    xs.push_back(sx);
    ys.push_back(sy);
    xc.push_back(sx.lo);
    yc.push_back(sy.lo);
  }
  std::sort(xc.begin(), xc.end());
  xc.erase(std::unique(xc.begin(), xc.end()), xc.end());
  std::sort(yc.begin(), yc.end());
  yc.erase(std::unique(yc.begin(), yc.end()), yc.end());

  std::vector<std::size_t> by_lo, by_hi;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (ys[i].lo <= ys[i].hi) {
      by_lo.push_back(i);
      by_hi.push_back(i);
    }
  std::sort(by_lo.begin(), by_lo.end(), [&](auto a, auto b) { return ys[a].lo < ys[b].lo; });
  std::sort(by_hi.begin(), by_hi.end(), [&](auto a, auto b) { return ys[a].hi < ys[b].hi; });

  detail::MaxAddTree tree(xc.size());
  auto update = [&](std::size_t i, std::int64_t v) {
    const auto l = std::size_t(std::lower_bound(xc.begin(), xc.end(), xs[i].lo) - xc.begin());
    const auto r = std::size_t(std::upper_bound(xc.begin(), xc.end(), xs[i].hi) - xc.begin());
    if (l < r) tree.add(l, r - 1, v);
  };

  HpfPlacement best{{0.0, 0.0}, -1};
  std::size_t ia = 0, ir = 0;
  for (double y : yc) {
    while (ia < by_lo.size() && ys[by_lo[ia]].lo <= y) update(by_lo[ia++], +1);
    while (ir < by_hi.size() && ys[by_hi[ir]].hi < y) {
      // Only points already added can expire: hi >= lo, and lo <= hi < y.
      update(by_hi[ir++], -1);
    }
    const auto [count, xi] = tree.top();
    if (count > best.count) best = {{xc[xi], y}, count};
  }
  return best;
}

inline double f1_score(double precision, double recall) noexcept {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

/// Predictions kept at `threshold` (score >= threshold, positive class).
inline std::vector<Detection> at_threshold(std::span<const Detection> preds, double threshold) {
  std::vector<Detection> out;
  for (const auto& d : preds)
    if (is_positive(d.class_id) && d.score >= threshold) out.push_back(d);
  return out;
}

inline PrecisionRecall f1_at_threshold(std::span<const Detection> preds, std::span<const Annotation> gts,
                                       double threshold, double radius = 25.0) {
  const auto kept = at_threshold(preds, threshold);
  return precision_recall(match_detections(kept, gts, radius));
}

enum class FpKind : std::uint8_t { easy, hard };

/// A false positive is hard when a hard-negative annotation lies within
/// `radius` of it.
inline FpKind classify_fp(const Detection& fp, std::span<const Annotation> gts, double radius = 25.0) {
  for (const auto& a : gts)
    if (is_hard_negative(a.class_id) && distance(a.center, fp.center()) <= radius) return FpKind::hard;
  return FpKind::easy;
}

enum class McSetting : std::uint8_t { GA, GB };

inline std::string_view to_string(McSetting s) noexcept { return s == McSetting::GA ? "GA" : "GB"; }

struct EndToEnd {
  std::int64_t mc_pred = 0;
  std::int64_t mc_gt = 0;
  std::optional<double> ape;  // |pred - gt| / gt, absent when gt == 0
  double ae = 0.0;
  Point proposed_origin;
  Point gt_origin;
};

inline std::vector<Point> positive_centers(std::span<const Annotation> gts) {
  std::vector<Point> out;
  for (const auto& a : gts)
    if (is_positive(a.class_id)) out.push_back(a.center);
  return out;
}

inline std::vector<Point> detection_centers(std::span<const Detection> dets) {
  std::vector<Point> out;
  out.reserve(dets.size());
  for (const auto& d : dets) out.push_back(d.center());
  return out;
}

/// Mitotic count in the HPF proposed from thresholded predictions, against
/// the count in the HPF that is optimal for the ground truth. GA counts
/// predictions inside the proposed HPF, GB counts ground-truth mitoses there.
inline EndToEnd end_to_end(std::span<const Detection> preds, std::span<const Annotation> gts, SlideDims slide,
                           double threshold, McSetting setting, const HPFConfig& cfg = {}) {
  const auto pred_pts = detection_centers(at_threshold(preds, threshold));
  const auto gt_pts = positive_centers(gts);
  const auto proposed = find_hpf(pred_pts, slide, cfg);
  const auto optimal = find_hpf(gt_pts, slide, cfg);
  EndToEnd r;
  r.proposed_origin = proposed.origin;
  r.gt_origin = optimal.origin;
  r.mc_gt = optimal.count;
  r.mc_pred = setting == McSetting::GA ? proposed.count : count_in_hpf(gt_pts, proposed.origin, cfg);
  r.ae = double(std::llabs(r.mc_pred - r.mc_gt));
  if (r.mc_gt > 0) r.ape = r.ae / double(r.mc_gt);
  return r;
}

/// Predictions and ground truth for one evaluated slide.
struct SlideEval {
  std::string id;
  SlideDims dims;
  std::vector<Detection> preds;
  std::vector<Annotation> gts;
};

struct McSummary {
  double mape = 0.0;  // fraction, unweighted mean over slides with mc_gt > 0
  double mae = 0.0;   // mean over all slides
  std::size_t slides_in_mape = 0;
  std::vector<EndToEnd> per_slide;
};

inline McSummary summarize_mc(std::span<const SlideEval> slides, double threshold, McSetting setting,
                              const HPFConfig& cfg = {}) {
  McSummary s;
  double ape_sum = 0.0, ae_sum = 0.0;
  for (const auto& sl : slides) {
    auto e = end_to_end(sl.preds, sl.gts, sl.dims, threshold, setting, cfg);
    if (e.ape) {
      ape_sum += *e.ape;
      ++s.slides_in_mape;
    }
    ae_sum += e.ae;
    s.per_slide.push_back(e);
  }
  if (s.slides_in_mape > 0) s.mape = ape_sum / double(s.slides_in_mape);
  if (!slides.empty()) s.mae = ae_sum / double(slides.size());
  return s;
}

/// Threshold grid 0, 0.01, ..., 1.
inline std::vector<double> threshold_grid() {
  std::vector<double> t;
  for (int i = 0; i <= 100; ++i) t.push_back(double(i) / 100.0);
  return t;
}

struct ThresholdSweep {
  double best_threshold = 0.0;
  McSummary best;
  std::vector<std::pair<double, double>> mape_by_threshold;
};

/// Threshold with the lowest MAPE over the grid; ties go to the lower one.
inline ThresholdSweep sweep_threshold(std::span<const SlideEval> slides, McSetting setting, const HPFConfig& cfg = {}) {
  ThresholdSweep sw;
  double best = std::numeric_limits<double>::infinity();
  for (double t : threshold_grid()) {
    auto s = summarize_mc(slides, t, setting, cfg);
    sw.mape_by_threshold.emplace_back(t, s.mape);
    if (s.mape < best) {
      best = s.mape;
      sw.best_threshold = t;
      sw.best = std::move(s);
    }
  }
  return sw;
}

/// Per-slide detection and counting report.
struct SlideReport {
  std::string slide_id;
  double threshold = 0.5;
  std::size_t tp = 0, fp = 0, fn = 0;
  std::size_t fp_easy = 0, fp_hard = 0;
  PrecisionRecall pr;
  double mean_center_distance = 0.0;
  EndToEnd ga, gb;
};

inline SlideReport evaluate_slide(const SlideEval& s, double threshold, double radius = 25.0,
                                  const HPFConfig& cfg = {}) {
  SlideReport r;
  r.slide_id = s.id;
  r.threshold = threshold;
  const auto kept = at_threshold(s.preds, threshold);
  const auto m = match_detections(kept, s.gts, radius);
  r.tp = m.tp();
  r.fp = m.fp();
  r.fn = m.fn();
  r.pr = precision_recall(m);
  r.mean_center_distance = mean_center_distance(m);
  for (auto i : m.false_positives) (classify_fp(kept[i], s.gts, radius) == FpKind::hard ? r.fp_hard : r.fp_easy)++;
  r.ga = end_to_end(s.preds, s.gts, s.dims, threshold, McSetting::GA, cfg);
  r.gb = end_to_end(s.preds, s.gts, s.dims, threshold, McSetting::GB, cfg);
  return r;
}

struct EvalReport {
  std::vector<SlideReport> slides;
  PrecisionRecall pooled;  // from summed TP/FP/FN
  std::size_t fp_easy = 0, fp_hard = 0;
  McSummary ga, gb;
  double threshold = 0.5;
};

inline EvalReport evaluate(std::span<const SlideEval> slides, double threshold, double radius = 25.0,
                           const HPFConfig& cfg = {}) {
  EvalReport rep;
  rep.threshold = threshold;
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& s : slides) {
    rep.slides.push_back(evaluate_slide(s, threshold, radius, cfg));
    const auto& r = rep.slides.back();
    tp += r.tp;
    fp += r.fp;
    fn += r.fn;
    rep.fp_easy += r.fp_easy;
    rep.fp_hard += r.fp_hard;
  }
  rep.pooled = precision_recall(tp, fp, fn);
  rep.ga = summarize_mc(slides, threshold, McSetting::GA, cfg);
  rep.gb = summarize_mc(slides, threshold, McSetting::GB, cfg);
  return rep;
}

/// key = value text, one slide block per slide followed by the aggregate.
inline void write_report(std::ostream& os, const EvalReport& rep) {
  auto line = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("nan"); };
  for (const auto& s : rep.slides) {
    os << "[slide " << s.slide_id << "]\n";
    line("threshold", format_double(s.threshold));
    line("tp", std::to_string(s.tp));
    line("fp", std::to_string(s.fp));
    line("fn", std::to_string(s.fn));
    line("precision", format_double(s.pr.precision));
    line("recall", format_double(s.pr.recall));
    line("f1", format_double(s.pr.f1));
    line("fp_easy", std::to_string(s.fp_easy));
    line("fp_hard", std::to_string(s.fp_hard));
    line("mean_center_distance", format_double(s.mean_center_distance));
    line("hpf_origin", format_double(s.ga.proposed_origin.x) + "," + format_double(s.ga.proposed_origin.y));
    line("hpf_gt_origin", format_double(s.ga.gt_origin.x) + "," + format_double(s.ga.gt_origin.y));
    line("mc_gt", std::to_string(s.ga.mc_gt));
    line("mc_pred_ga", std::to_string(s.ga.mc_pred));
    line("mc_pred_gb", std::to_string(s.gb.mc_pred));
    line("ape_ga", opt(s.ga.ape));
    line("ape_gb", opt(s.gb.ape));
    os << '\n';
  }
  os << "[aggregate]\n";
  line("threshold", format_double(rep.threshold));
  line("precision", format_double(rep.pooled.precision));
  line("recall", format_double(rep.pooled.recall));
  line("f1", format_double(rep.pooled.f1));
  line("fp_easy", std::to_string(rep.fp_easy));
  line("fp_hard", std::to_string(rep.fp_hard));
  line("mape_ga", format_double(rep.ga.mape));
  line("mae_ga", format_double(rep.ga.mae));
  line("mape_gb", format_double(rep.gb.mape));
  line("mae_gb", format_double(rep.gb.mae));
}

/// Predicted vs ground-truth mitotic count per slide (scatter plot input).
inline void write_mc_scatter(std::ostream& os, const EvalReport& rep) {
  os << "slide,mc_gt,mc_pred_ga,mc_pred_gb\n";
  for (const auto& s : rep.slides)
    os << s.slide_id << ',' << s.ga.mc_gt << ',' << s.ga.mc_pred << ',' << s.gb.mc_pred << '\n';
}

/// Easy/hard false-positive counts per slide (bar chart input).
inline void write_fp_bars(std::ostream& os, const EvalReport& rep) {
  os << "slide,fp_easy,fp_hard\n";
  for (const auto& s : rep.slides) os << s.slide_id << ',' << s.fp_easy << ',' << s.fp_hard << '\n';
  os << "all," << rep.fp_easy << ',' << rep.fp_hard << '\n';
}

}  // namespace recas
