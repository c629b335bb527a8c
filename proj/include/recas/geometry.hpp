#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace recas {

/// A location in the slide frame, in pixels.
struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(Point a, Point b) noexcept { return std::hypot(a.x - b.x, a.y - b.y); }

/// Object classes shared by annotations and detections. `mitosis` is the only
/// positive class; `mitosis_like` and `nonmitosis` are the hard negatives.
enum class ObjectClass : std::uint8_t {
  mitosis = 0,
  mitosis_like = 1,
  nonmitosis = 2,
  granulocyte = 3,
  tumorcell = 4,
  other = 5,
};

inline constexpr bool is_positive(ObjectClass c) noexcept { return c == ObjectClass::mitosis; }

inline constexpr bool is_hard_negative(ObjectClass c) noexcept {
  return c == ObjectClass::mitosis_like || c == ObjectClass::nonmitosis;
}

inline std::string_view to_string(ObjectClass c) noexcept {
  switch (c) {
    case ObjectClass::mitosis: return "mitosis";
    case ObjectClass::mitosis_like: return "mitosislike";
    case ObjectClass::nonmitosis: return "nonmitosis";
    case ObjectClass::granulocyte: return "granulocyte";
    case ObjectClass::tumorcell: return "tumorcell";
    case ObjectClass::other: return "other";
  }
  return "other";
}

inline ObjectClass parse_object_class(std::string_view s) {
  for (auto c : {ObjectClass::mitosis, ObjectClass::mitosis_like, ObjectClass::nonmitosis,
                 ObjectClass::granulocyte, ObjectClass::tumorcell, ObjectClass::other}) {
    if (s == to_string(c)) return c;
  }
  throw std::invalid_argument("unknown object class: " + std::string(s));
}

/// Axis-aligned box given by center and extent. Width and height are
/// validated on construction.
class Box {
 public:
  Box() = default;
  Box(Point center, double w, double h) : center_(center), w_(w), h_(h) {
    if (!(w > 0.0) || !(h > 0.0) || !std::isfinite(w) || !std::isfinite(h))
      throw std::invalid_argument("box extent must be positive and finite");
    if (!std::isfinite(center.x) || !std::isfinite(center.y))
      throw std::invalid_argument("box center must be finite");
  }

  Point center() const noexcept { return center_; }
  double w() const noexcept { return w_; }
  double h() const noexcept { return h_; }
  double x0() const noexcept { return center_.x - w_ / 2.0; }
  double x1() const noexcept { return center_.x + w_ / 2.0; }
  double y0() const noexcept { return center_.y - h_ / 2.0; }
  double y1() const noexcept { return center_.y + h_ / 2.0; }
  double area() const noexcept { return w_ * h_; }

  Box moved_to(Point c) const { return Box(c, w_, h_); }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  Point center_{};
  double w_ = 1.0;
  double h_ = 1.0;
};

/// A scored detection. `score` is the current (possibly fused) positive
/// confidence; `det_score` and `cls_score` keep the per-stage values.
struct Detection {
  Box box;
  ObjectClass class_id = ObjectClass::mitosis;
  double score = 0.0;
  std::optional<std::int64_t> source_window;
  double det_score = 0.0;
  std::optional<double> cls_score;

  Point center() const noexcept { return box.center(); }

  friend bool operator==(const Detection&, const Detection&) = default;
};

inline Detection make_detection(Point center, double w, double h, double score,
                                ObjectClass cls = ObjectClass::mitosis,
                                std::optional<std::int64_t> window = std::nullopt) {
  if (!(score >= 0.0 && score <= 1.0)) throw std::invalid_argument("score must lie in [0,1]");
  Detection d;
  d.box = Box(center, w, h);
  d.class_id = cls;
  d.score = score;
  d.det_score = score;
  d.source_window = window;
  return d;
}

struct SlideDims {
  std::int64_t width = 0;
  std::int64_t height = 0;

  void validate() const {
    if (width <= 0 || height <= 0) throw std::invalid_argument("slide dimensions must be positive");
  }
  bool contains(Point p) const noexcept {
    return p.x >= 0.0 && p.y >= 0.0 && p.x <= double(width) && p.y <= double(height);
  }
  Point clamp(Point p) const noexcept {
    return {std::clamp(p.x, 0.0, double(width)), std::clamp(p.y, 0.0, double(height))};
  }

  friend bool operator==(const SlideDims&, const SlideDims&) = default;
};

/// Ground-truth object.
struct Annotation {
  Point center;
  ObjectClass class_id = ObjectClass::mitosis;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

inline double iou(const Box& a, const Box& b) noexcept {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Total order used wherever detections are ranked: score descending, then
/// center x, then center y.
inline bool ranks_before(const Detection& a, const Detection& b) noexcept {
  if (a.score != b.score) return a.score > b.score;
  if (a.center().x != b.center().x) return a.center().x < b.center().x;
  return a.center().y < b.center().y;
}

namespace detail {

inline std::vector<std::size_t> ranked_order(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return ranks_before(dets[i], dets[j]); });
  return order;
}

// Uniform grid over kept boxes so each candidate only tests nearby survivors.
class BoxGrid {
 public:
  explicit BoxGrid(double cell) : cell_(std::max(cell, 1.0)) {}

  void insert(std::size_t idx, const Box& b) {
    for_cells(b, [&](std::int64_t key) { cells_[key].push_back(idx); });
  }

  template <class F>
  bool any_near(const Box& b, F&& pred) const {
    bool hit = false;
    for_cells(b, [&](std::int64_t key) {
      if (hit) return;
      if (auto it = cells_.find(key); it != cells_.end())
        for (std::size_t idx : it->second)
          if (pred(idx)) {
            hit = true;
            return;
          }
    });
    return hit;
  }

 private:
  template <class F>
  void for_cells(const Box& b, F&& f) const {
    const auto cx0 = std::int64_t(std::floor(b.x0() / cell_));
    const auto cx1 = std::int64_t(std::floor(b.x1() / cell_));
    const auto cy0 = std::int64_t(std::floor(b.y0() / cell_));
    const auto cy1 = std::int64_t(std::floor(b.y1() / cell_));
    for (auto cy = cy0; cy <= cy1; ++cy)
      for (auto cx = cx0; cx <= cx1; ++cx) f(cy * 2654435761LL + cx);
  }

  double cell_;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> cells_;
};

}  // namespace detail

/// Class-aware greedy non-maximum suppression. Survivors are returned in
/// ranked order (see ranks_before).
inline std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold) {
  std::vector<Detection> kept;
  if (dets.empty()) return kept;

  double cell = 1.0;
  for (const auto& d : dets) cell = std::max({cell, d.box.w(), d.box.h()});
  detail::BoxGrid grid(cell);

  for (std::size_t i : detail::ranked_order(dets)) {
    const Detection& cand = dets[i];
    const bool suppressed = grid.any_near(cand.box, [&](std::size_t k) {
      return kept[k].class_id == cand.class_id && iou(kept[k].box, cand.box) > iou_threshold;
    });
    if (suppressed) continue;
    grid.insert(kept.size(), cand.box);
    kept.push_back(cand);
  }
  return kept;
}

struct MatchedPair {
  std::size_t pred = 0;
  std::size_t gt = 0;
  double distance = 0.0;
};

/// TP/FP/FN partition of a prediction set against ground truth. Indices refer
/// to the inputs of match_detections.
struct Matching {
  std::vector<MatchedPair> true_positives;
  std::vector<std::size_t> false_positives;
  std::vector<std::size_t> false_negatives;

  std::size_t tp() const noexcept { return true_positives.size(); }
  std::size_t fp() const noexcept { return false_positives.size(); }
  std::size_t fn() const noexcept { return false_negatives.size(); }
};

/// One-to-one greedy matching by descending score. Each prediction takes the
/// nearest still-unmatched positive annotation within `radius` (ties: lower
/// annotation index). Non-positive annotations are ignored.
inline Matching match_detections(std::span<const Detection> preds, std::span<const Annotation> gts,
                                 double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("matching radius must be positive");
  Matching m;
  std::vector<bool> taken(gts.size(), false);

  // Bucket positives by radius-sized cells.
  std::unordered_map<std::int64_t, std::vector<std::size_t>> cells;
  auto key = [radius](double x, double y) {
    return std::int64_t(std::floor(y / radius)) * 2654435761LL + std::int64_t(std::floor(x / radius));
  };
  for (std::size_t g = 0; g < gts.size(); ++g)
    if (is_positive(gts[g].class_id)) cells[key(gts[g].center.x, gts[g].center.y)].push_back(g);

  for (std::size_t p : detail::ranked_order(preds)) {
    const Point c = preds[p].center();
    std::optional<std::size_t> best;
    double best_d = std::numeric_limits<double>::infinity();
    const auto gx = std::int64_t(std::floor(c.x / radius));
    const auto gy = std::int64_t(std::floor(c.y / radius));
    for (auto cy = gy - 1; cy <= gy + 1; ++cy)
      for (auto cx = gx - 1; cx <= gx + 1; ++cx) {
        auto it = cells.find(cy * 2654435761LL + cx);
        if (it == cells.end()) continue;
        for (std::size_t g : it->second) {
          if (taken[g]) continue;
          const double d = distance(c, gts[g].center);
          if (d > radius) continue;
          if (d < best_d || (d == best_d && g < *best)) {
            best = g;
            best_d = d;
          }
        }
      }
    if (best) {
      taken[*best] = true;
      m.true_positives.push_back({p, *best, best_d});
    } else {
      m.false_positives.push_back(p);
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g)
    if (is_positive(gts[g].class_id) && !taken[g]) m.false_negatives.push_back(g);
  return m;
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// P/R/F1 with the 0-when-undefined convention.
inline PrecisionRecall precision_recall(std::size_t tp, std::size_t fp, std::size_t fn) noexcept {
  PrecisionRecall r;
  if (tp + fp > 0) r.precision = double(tp) / double(tp + fp);
  if (tp + fn > 0) r.recall = double(tp) / double(tp + fn);
  if (r.precision + r.recall > 0.0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

inline PrecisionRecall precision_recall(const Matching& m) noexcept {
  return precision_recall(m.tp(), m.fp(), m.fn());
}

}  // namespace recas
