#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "recas/geometry.hpp"
#include "recas/protocol.hpp"
#include "recas/rng.hpp"
#include "recas/spatial.hpp"
#include "recas/tiling.hpp"

namespace recas {

/// One entry point for all three models. Implementations must accept
/// concurrent calls.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual InferenceResponse infer(const InferenceRequest& req) = 0;
};

enum class OracleMode : std::uint8_t { perfect, noisy };

/// Simulated detector. In noisy mode objects near a window border get their
/// jitter and miss rate multiplied by `border_degradation`, and objects cut
/// by the border come back as clipped partial boxes, including the part of
/// an object whose center lies in the neighbouring window.
struct OracleConfig {
  OracleMode mode = OracleMode::noisy;
  double position_jitter_sd = 2.0;
  double fp_rate = 0.02;
  double fn_rate = 0.05;
  double score_noise_sd = 0.1;
  double border_degradation = 3.0;
  double border_margin = 25.0;
  double box_size = 50.0;
  double object_radius = 25.0;
  double positive_score = 0.8;
  double hard_negative_detect_rate = 0.6;
  double hard_negative_score = 0.35;
  double fp_score_max = 0.45;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (position_jitter_sd < 0 || fp_rate < 0 || score_noise_sd < 0 || border_degradation < 0 || border_margin < 0)
      throw std::invalid_argument("oracle rates must be non-negative");
    for (double p : {fn_rate, positive_score, hard_negative_detect_rate, hard_negative_score, fp_score_max})
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("oracle probabilities must lie in [0,1]");
    if (!(box_size > 0.0) || !(object_radius > 0.0)) throw std::invalid_argument("oracle box size must be positive");
  }
};

/// Simulated classification stage. A positive scores highest when centered
/// in the patch and decays with distance at `centering_scale`.
struct ClassifierOracleConfig {
  OracleMode mode = OracleMode::noisy;
  double positive_score = 0.95;
  double centering_scale = 8.0;
  double hard_negative_score = 0.5;
  double background_score = 0.08;
  double capture_radius = 25.0;
  double score_noise_sd = 0.12;
  std::uint64_t rng_seed = 0;
};

/// Simulated center-adjustment model: reports the offset to the nearest
/// object inside the patch and whether it is positive.
struct AdjusterOracleConfig {
  OracleMode mode = OracleMode::perfect;
  double offset_noise_sd = 1.0;
  double score_noise_sd = 0.1;
  std::uint64_t rng_seed = 0;
};

/// Ground truth an oracle backend serves for one slide.
struct SlideTruth {
  SlideDims dims;
  std::vector<Annotation> annotations;
  PointGrid index;

  SlideTruth() = default;
  SlideTruth(SlideDims d, std::vector<Annotation> anns)
      : dims(d), annotations(std::move(anns)), index(annotations, 256.0) {}

  SlideTruth(const SlideTruth& o) : SlideTruth(o.dims, o.annotations) {}
  SlideTruth& operator=(const SlideTruth& o) {
    if (this != &o) *this = SlideTruth(o.dims, o.annotations);
    return *this;
  }
  SlideTruth(SlideTruth&&) = default;
  SlideTruth& operator=(SlideTruth&&) = default;
};

namespace detail {

inline double clamp01(double v) noexcept { return std::clamp(v, 0.0, 1.0); }

// Stream for one (task, slide, patch) triple.
inline Rng patch_rng(std::uint64_t seed, Task task, const std::string& slide, std::uint64_t key) {
  return Rng(mix_seed(mix_seed(mix_seed(seed, std::uint64_t(task) + 1), hash_string(slide)), key));
}

inline std::uint64_t point_key(Point p) noexcept {
  const auto qx = std::uint64_t(std::int64_t(std::llround(p.x * 1024.0)));
  const auto qy = std::uint64_t(std::int64_t(std::llround(p.y * 1024.0)));
  return mix_seed(qx, qy);
}

inline std::optional<std::size_t> nearest_annotation(const SlideTruth& truth, Point c, double radius,
                                                      bool positives_only = false) {
  std::optional<std::size_t> best;
  double best_d = std::numeric_limits<double>::infinity();
  for (auto i : truth.index.query(c.x - radius, c.y - radius, c.x + radius, c.y + radius)) {
    const auto& a = truth.annotations[i];
    if (positives_only && !is_positive(a.class_id)) continue;
    const double d = distance(a.center, c);
    if (d <= radius && d < best_d) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

}  // namespace detail

/// Detector oracle for one window. Output depends only on the config, the
/// slide id, the window id and geometry, and the ground truth.
inline std::vector<Detection> oracle_detect(const Window& window, const std::string& slide_id, const SlideTruth& truth,
                                            const OracleConfig& cfg) {
  cfg.validate();
  std::vector<Detection> out;
  const double k = double(window.size);
  const double wx0 = double(window.x), wy0 = double(window.y), wx1 = wx0 + k, wy1 = wy0 + k;

  if (cfg.mode == OracleMode::perfect) {
    for (auto i : truth.index.query(wx0, wy0, wx1, wy1)) {
      const auto& a = truth.annotations[i];
      if (!is_positive(a.class_id) || !window.contains(a.center)) continue;
      out.push_back(make_detection(a.center, cfg.box_size, cfg.box_size, 1.0, ObjectClass::mitosis, window.id));
    }
    return out;
  }

  Rng rng = detail::patch_rng(cfg.rng_seed, Task::detect, slide_id, std::uint64_t(window.id));
  auto inside = [&](Point p) {
    return Point{std::clamp(p.x, wx0, std::nextafter(wx1, wx0)), std::clamp(p.y, wy0, std::nextafter(wy1, wy0))};
  };
  auto emit = [&](Point c, double w, double h, double score) {
    out.push_back(make_detection(inside(c), w, h, detail::clamp01(score), ObjectClass::mitosis, window.id));
  };

  const double r = cfg.object_radius;
  for (auto i : truth.index.query(wx0 - r, wy0 - r, wx1 + r, wy1 + r)) {
    const auto& a = truth.annotations[i];
    const Point c = a.center;
    const bool centered_here = window.contains(c);

    if (is_positive(a.class_id)) {
      // Visible part of the object's footprint inside this window.
      const double vx0 = std::max(c.x - r, wx0), vx1 = std::min(c.x + r, wx1);
      const double vy0 = std::max(c.y - r, wy0), vy1 = std::min(c.y + r, wy1);
      if (vx1 - vx0 <= 0.0 || vy1 - vy0 <= 0.0) continue;
      const double visible = (vx1 - vx0) * (vy1 - vy0) / (4.0 * r * r);
      const double border = centered_here ? std::min({c.x - wx0, c.y - wy0, wx1 - c.x, wy1 - c.y}) : 0.0;
      const bool near = border <= cfg.border_margin;
      const double deg = near ? cfg.border_degradation : 1.0;
      const double miss = centered_here ? std::min(1.0, cfg.fn_rate * deg) : std::min(1.0, 1.0 - visible + cfg.fn_rate);
      if (rng.bernoulli(miss)) continue;
      const double sd = cfg.position_jitter_sd * deg;
      const Point box_c{(vx0 + vx1) / 2.0 + rng.normal(0.0, sd), (vy0 + vy1) / 2.0 + rng.normal(0.0, sd)};
      const double score = cfg.positive_score * (centered_here ? 1.0 : 0.5 + 0.5 * visible) +
                           rng.normal(0.0, cfg.score_noise_sd);
      const double scale = cfg.box_size / (2.0 * r);
      emit(box_c, (vx1 - vx0) * scale, (vy1 - vy0) * scale, score);
    } else if (is_hard_negative(a.class_id) && centered_here) {
      if (!rng.bernoulli(cfg.hard_negative_detect_rate)) continue;
      const Point box_c{c.x + rng.normal(0.0, cfg.position_jitter_sd), c.y + rng.normal(0.0, cfg.position_jitter_sd)};
      emit(box_c, cfg.box_size, cfg.box_size, cfg.hard_negative_score + rng.normal(0.0, cfg.score_noise_sd));
    }
  }

  const auto n_fp = rng.poisson(cfg.fp_rate);
  for (std::uint64_t i = 0; i < n_fp; ++i) {
    const Point c{rng.uniform(wx0, wx1), rng.uniform(wy0, wy1)};
    emit(c, cfg.box_size, cfg.box_size, rng.uniform(0.0, cfg.fp_score_max));
  }
  return out;
}

/// Classifier oracle on a patch centered at `center`. Returns {p_neg, p_pos}
/// and a small feature vector usable as an embedding.
inline PatchResult oracle_classify(Point center, const std::string& slide_id, const SlideTruth& truth,
                                   const ClassifierOracleConfig& cfg) {
  const auto near = detail::nearest_annotation(truth, center, cfg.capture_radius);
  double p = cfg.background_score;
  double dist = cfg.capture_radius;
  bool hard = false;
  if (near) {
    const auto& a = truth.annotations[*near];
    dist = distance(a.center, center);
    hard = is_hard_negative(a.class_id);
    if (is_positive(a.class_id)) {
      const double fall = std::exp(-dist * dist / (2.0 * cfg.centering_scale * cfg.centering_scale));
      p = cfg.background_score + (cfg.positive_score - cfg.background_score) * fall;
    } else if (hard) {
      p = cfg.hard_negative_score;
    }
  }
  if (cfg.mode == OracleMode::perfect) {
    p = near && is_positive(truth.annotations[*near].class_id) ? 1.0 : 0.0;
  } else {
    Rng rng = detail::patch_rng(cfg.rng_seed, Task::classify, slide_id, detail::point_key(center));
    p = detail::clamp01(p + rng.normal(0.0, cfg.score_noise_sd));
  }
  PatchResult r;
  r.class_scores = {1.0 - p, p};
  r.embedding = std::vector<double>{p, dist / cfg.capture_radius, hard ? 1.0 : 0.0};
  return r;
}

/// Adjuster oracle on a patch of side `patch_size` centered at `center`.
inline PatchResult oracle_adjust(Point center, std::int64_t patch_size, const std::string& slide_id,
                                 const SlideTruth& truth, const AdjusterOracleConfig& cfg) {
  const double half = double(patch_size) / 2.0;
  std::optional<std::size_t> best;
  double best_d = std::numeric_limits<double>::infinity();
  for (auto i : truth.index.query(center.x - half, center.y - half, center.x + half, center.y + half)) {
    const double d = distance(truth.annotations[i].center, center);
    if (d < best_d) {
      best = i;
      best_d = d;
    }
  }
  PatchResult r;
  double p = 0.0;
  if (best && is_positive(truth.annotations[*best].class_id)) {
    p = 1.0;
    r.dx = truth.annotations[*best].center.x - center.x;
    r.dy = truth.annotations[*best].center.y - center.y;
  }
  if (cfg.mode == OracleMode::noisy) {
    Rng rng = detail::patch_rng(cfg.rng_seed, Task::adjust, slide_id, detail::point_key(center));
    r.dx += rng.normal(0.0, cfg.offset_noise_sd);
    r.dy += rng.normal(0.0, cfg.offset_noise_sd);
    p = detail::clamp01(p + rng.normal(0.0, cfg.score_noise_sd));
  }
  r.class_scores = {1.0 - p, p};
  return r;
}

struct OracleSuite {
  OracleConfig detector;
  ClassifierOracleConfig classifier;
  AdjusterOracleConfig adjuster;

  /// Reseeds all three models from one seed.
  void seed(std::uint64_t s) {
    detector.rng_seed = s;
    classifier.rng_seed = mix_seed(s, 2);
    adjuster.rng_seed = mix_seed(s, 3);
  }
};

/// Detector with strong window-border artifacts, noisy classifier and a
/// perfect adjuster; the setting of the ablation benchmark.
inline OracleSuite degraded_oracle_suite(std::uint64_t seed) {
  OracleSuite s;
  s.detector.border_degradation = 4.0;
  s.detector.fn_rate = 0.06;
  s.detector.position_jitter_sd = 3.0;
  s.adjuster.mode = OracleMode::perfect;
  s.seed(seed);
  return s;
}

/// In-process backend serving all tasks from per-slide ground truth.
class OracleBackend final : public Backend {
 public:
  explicit OracleBackend(OracleSuite suite) : suite_(std::move(suite)) {}

  void add_slide(const std::string& id, SlideTruth truth) { slides_[id] = std::move(truth); }

  const OracleSuite& suite() const noexcept { return suite_; }

  InferenceResponse infer(const InferenceRequest& req) override {
    req.validate();
    InferenceResponse resp{req.request_id, {}};
    resp.results.reserve(req.patches.size());
    for (const auto& p : req.patches) {
      auto it = slides_.find(p.slide_id);
      if (it == slides_.end()) throw RemoteError("unknown slide: " + p.slide_id, req.request_id);
      const SlideTruth& truth = it->second;
      switch (req.task) {
        case Task::detect: {
          const Window w{p.window_id, std::int64_t(std::llround(p.x)), std::int64_t(std::llround(p.y)), p.size,
                         WindowKind::grid};
          PatchResult r;
          r.detections = oracle_detect(w, p.slide_id, truth, suite_.detector);
          for (auto& d : r.detections) d.source_window.reset();
          resp.results.push_back(std::move(r));
          break;
        }
        case Task::classify:
          resp.results.push_back(oracle_classify(p.center(), p.slide_id, truth, suite_.classifier));
          break;
        case Task::adjust:
          resp.results.push_back(oracle_adjust(p.center(), p.size, p.slide_id, truth, suite_.adjuster));
          break;
      }
    }
    return resp;
  }

 private:
  OracleSuite suite_;
  std::map<std::string, SlideTruth> slides_;
};

}  // namespace recas
