#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "recas/geometry.hpp"
#include "recas/protocol.hpp"
#include "recas/rng.hpp"
#include "recas/synth.hpp"
#include "recas/textio.hpp"

namespace recas {

/// Largest center shift, in pixels, used both when sampling training
/// offsets and when applying predicted shifts.
inline constexpr double kAdjustClip = 12.0;
inline constexpr double kOffsetSd = 6.0;

struct AdjustmentPrediction {
  double dx = 0.0;
  double dy = 0.0;
  std::vector<double> class_scores{1.0, 0.0};  // {negative, positive}

  double positive_score() const { return class_scores.at(kPositiveIndex); }

  static AdjustmentPrediction from(const PatchResult& r) { return {r.dx, r.dy, r.class_scores}; }
};

struct LossConfig {
  double lambda_reg = 0.95;

  void validate() const {
    if (!(lambda_reg >= 0.0 && lambda_reg <= 1.0)) throw std::invalid_argument("lambda_reg must lie in [0,1]");
  }
};

/// Geometric and photometric augmentation drawn for one training patch.
/// Geometry acts on patch-centered pixel coordinates (y down): flips first,
/// then rotation by `rotation_deg`.
struct Augmentation {
  bool hflip = false;
  bool vflip = false;
  double rotation_deg = 0.0;
  double brightness = 1.0;
  double contrast = 1.0;
  int blur_kernel = 0;  // 0, 3 or 5
  double hue = 0.0;

  /// Where content at patch-relative position (x, y) ends up.
  Point apply(Point v) const noexcept {
    if (hflip) v.x = -v.x;
    if (vflip) v.y = -v.y;
    const double t = rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(t), s = std::sin(t);
    return {c * v.x - s * v.y, s * v.x + c * v.y};
  }

  /// Inverse of apply().
  Point invert(Point v) const noexcept {
    const double t = -rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(t), s = std::sin(t);
    Point u{c * v.x - s * v.y, s * v.x + c * v.y};
    if (hflip) u.x = -u.x;
    if (vflip) u.y = -u.y;
    return u;
  }
};

/// Training patch: a crop of side `size` centered at `center`, augmented;
/// the annotated object's center sits at `true_offset` from the patch center
/// in the augmented image.
struct PatchSample {
  std::string slide_id;
  Point center;
  std::int64_t size = kObjectPatchSize;
  ObjectClass true_class = ObjectClass::mitosis;
  Point true_offset;
  Point drawn_shift;  // raw N(0, sd^2) draw, before clipping
  Augmentation aug;
};

struct OffsetDraw {
  Point raw;
  Point clipped;
};

/// Per-axis N(0, sd^2) draw clipped to +-clip.
inline OffsetDraw sample_offset(Rng& rng, double sd = kOffsetSd, double clip = kAdjustClip) {
  OffsetDraw d;
  d.raw = {rng.normal(0.0, sd), rng.normal(0.0, sd)};
  d.clipped = {std::clamp(d.raw.x, -clip, clip), std::clamp(d.raw.y, -clip, clip)};
  return d;
}

/// Augmentation probabilities and ranges for the adjustment stage.
inline Augmentation sample_augmentation(Rng& rng) {
  Augmentation a;
  a.hflip = rng.bernoulli(0.5);
  a.vflip = rng.bernoulli(0.5);
  a.rotation_deg = rng.uniform(-90.0, 90.0);
  if (rng.bernoulli(0.5)) a.brightness = rng.uniform(0.8, 1.2);
  if (rng.bernoulli(0.5)) a.contrast = rng.uniform(0.8, 1.2);
  if (rng.bernoulli(0.25)) a.blur_kernel = rng.bernoulli(0.5) ? 3 : 5;
  a.hue = rng.uniform(-0.1, 0.1);
  return a;
}

inline PatchSample make_training_patch(const Annotation& ann, const std::string& slide_id, SlideDims slide,
                                       const OffsetDraw& shift, const Augmentation& aug,
                                       std::int64_t patch_size = kObjectPatchSize) {
  const double half = double(patch_size) / 2.0;
  auto place = [half](double v, std::int64_t dim) {
    return double(dim) < 2.0 * half ? double(dim) / 2.0 : std::clamp(v, half, double(dim) - half);
  };
  PatchSample s;
  s.slide_id = slide_id;
  s.size = patch_size;
  s.true_class = ann.class_id;
  s.center = {place(ann.center.x + shift.clipped.x, slide.width), place(ann.center.y + shift.clipped.y, slide.height)};
  s.drawn_shift = shift.raw;
  s.aug = aug;
  s.true_offset = aug.apply({ann.center.x - s.center.x, ann.center.y - s.center.y});
  return s;
}

/// Crops around the annotation shifted by a sampled offset and records where
/// the object center lands after augmentation. Crops that would leave the
/// slide are clamped inward; the recorded offset stays exact.
inline PatchSample synthesize_training_patch(const Annotation& ann, const std::string& slide_id, SlideDims slide,
                                             Rng& rng, std::int64_t patch_size = kObjectPatchSize) {
  const OffsetDraw shift = sample_offset(rng);
  const Augmentation aug = sample_augmentation(rng);
  return make_training_patch(ann, slide_id, slide, shift, aug, patch_size);
}

/// Marker rendering of an augmented training patch (nearest sampling).
inline Raster render_patch(const PatchSample& s, std::span<const Annotation> anns, double marker_radius = 4.0) {
  Raster r{s.size, s.size, std::vector<std::uint8_t>(std::size_t(s.size * s.size), 0)};
  const double half = double(s.size) / 2.0;
  const double reach = half * std::numbers::sqrt2 + marker_radius;
  std::vector<Annotation> near;
  for (const auto& a : anns)
    if (std::abs(a.center.x - s.center.x) <= reach && std::abs(a.center.y - s.center.y) <= reach) near.push_back(a);
  const double r2 = marker_radius * marker_radius;
  for (std::int64_t j = 0; j < s.size; ++j)
    for (std::int64_t i = 0; i < s.size; ++i) {
      const Point src = s.aug.invert({double(i) + 0.5 - half, double(j) + 0.5 - half});
      const Point p{s.center.x + src.x, s.center.y + src.y};
      for (const auto& a : near) {
        const double dx = p.x - a.center.x, dy = p.y - a.center.y;
        if (dx * dx + dy * dy <= r2) r.at(i, j) = std::max(r.at(i, j), marker_value(a.class_id));
      }
    }
  return r;
}

/// Weighted sum of the summed-axis L1 offset error (positives only) and the
/// cross-entropy of the class scores.
inline double relocation_loss(const AdjustmentPrediction& pred, const PatchSample& target, const LossConfig& cfg) {
  cfg.validate();
  const std::size_t truth = is_positive(target.true_class) ? kPositiveIndex : 0;
  if (pred.class_scores.size() <= truth) throw std::invalid_argument("class scores do not cover the true class");
  double total = 0.0;
  for (double p : pred.class_scores) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("class scores must lie in [0,1]");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("class scores must sum to 1");
  const double p_true = std::max(pred.class_scores[truth], 1e-12);
  const double ce = -std::log(p_true);
  double reg = 0.0;
  if (truth == kPositiveIndex)
    reg = std::abs(pred.dx - target.true_offset.x) + std::abs(pred.dy - target.true_offset.y);
  return cfg.lambda_reg * reg + (1.0 - cfg.lambda_reg) * ce;
}

/// Moves the detection by the clipped predicted shift when the adjuster's
/// positive score reaches `threshold`; the new center is clamped to the slide.
inline Detection apply_adjustment(const Detection& det, const AdjustmentPrediction& pred, double threshold,
                                  SlideDims slide, double clip = kAdjustClip) {
  if (pred.positive_score() < threshold) return det;
  const double dx = std::clamp(pred.dx, -clip, clip);
  const double dy = std::clamp(pred.dy, -clip, clip);
  Detection out = det;
  out.box = det.box.moved_to(slide.clamp({det.center().x + dx, det.center().y + dy}));
  return out;
}

/// Mean Euclidean distance over matched (true positive) pairs; 0 if none.
inline double mean_center_distance(std::span<const MatchedPair> pairs) noexcept {
  if (pairs.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& p : pairs) sum += p.distance;
  return sum / double(pairs.size());
}

inline double mean_center_distance(const Matching& m) noexcept { return mean_center_distance(m.true_positives); }

// Manifest columns: slide,x,y,dx,dy,class,hflip,vflip,rotation,brightness,contrast,blur,hue
inline void write_training_manifest(std::ostream& os, std::span<const PatchSample> samples) {
  os << "slide,x,y,dx,dy,class,hflip,vflip,rotation,brightness,contrast,blur,hue\n";
  for (const auto& s : samples)
    os << s.slide_id << ',' << format_double(s.center.x) << ',' << format_double(s.center.y) << ','
       << format_double(s.true_offset.x) << ',' << format_double(s.true_offset.y) << ',' << to_string(s.true_class)
       << ',' << int(s.aug.hflip) << ',' << int(s.aug.vflip) << ',' << format_double(s.aug.rotation_deg) << ','
       << format_double(s.aug.brightness) << ',' << format_double(s.aug.contrast) << ',' << s.aug.blur_kernel << ','
       << format_double(s.aug.hue) << '\n';
}

}  // namespace recas
