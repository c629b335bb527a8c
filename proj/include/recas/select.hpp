#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "recas/geometry.hpp"
#include "recas/rng.hpp"
#include "recas/textio.hpp"
#include "recas/tiling.hpp"

namespace recas {

/// A proposed object from a training slide, scored by both stages.
struct Candidate {
  std::int64_t id = 0;
  double s_det = 0.0;
  double s_cls = 0.0;
  std::optional<std::vector<double>> embedding;
  std::optional<std::vector<double>> class_scores;
  bool predicted_positive = false;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

enum class SelectionStrategy : std::uint8_t { disagreement, query_all, uncertainty, kcenter_greedy };

inline std::string_view to_string(SelectionStrategy s) noexcept {
  switch (s) {
    case SelectionStrategy::disagreement: return "disagreement";
    case SelectionStrategy::query_all: return "query_all";
    case SelectionStrategy::uncertainty: return "uncertainty";
    case SelectionStrategy::kcenter_greedy: return "kcenter_greedy";
  }
  return "disagreement";
}

inline SelectionStrategy parse_strategy(std::string_view s) {
  for (auto v : {SelectionStrategy::disagreement, SelectionStrategy::query_all, SelectionStrategy::uncertainty,
                 SelectionStrategy::kcenter_greedy})
    if (s == to_string(v)) return v;
  throw std::invalid_argument("unknown selection strategy: " + std::string(s));
}

struct SelectionConfig {
  SelectionStrategy strategy = SelectionStrategy::disagreement;
  std::size_t n = 20000;
};

struct Selection {
  std::vector<std::int64_t> ids;
  std::vector<std::string> warnings;
};

inline double informativeness(const Candidate& c) noexcept { return std::abs(c.s_det - c.s_cls); }

/// Shannon entropy (nats) of the classifier's class distribution; a binary
/// distribution {1 - s_cls, s_cls} when no full vector is present.
inline double classifier_entropy(const Candidate& c) noexcept {
  std::vector<double> p = c.class_scores ? *c.class_scores : std::vector<double>{1.0 - c.s_cls, c.s_cls};
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// Candidates built from detections; an object counts as negative when its
/// score is below `threshold`.
inline std::vector<Candidate> make_candidates(std::span<const Detection> dets, double threshold,
                                              std::int64_t first_id = 0) {
  std::vector<Candidate> out;
  out.reserve(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    Candidate c;
    c.id = first_id + std::int64_t(i);
    c.s_det = dets[i].det_score;
    c.s_cls = dets[i].cls_score.value_or(dets[i].det_score);
    c.predicted_positive = dets[i].score >= threshold;
    out.push_back(std::move(c));
  }
  return out;
}

namespace detail {

inline std::vector<std::int64_t> top_n_by(std::vector<const Candidate*> pool, std::size_t n,
                                          double (*key)(const Candidate&)) {
  auto better = [key](const Candidate* a, const Candidate* b) {
    const double ka = key(*a), kb = key(*b);
    if (ka != kb) return ka > kb;
    return a->id < b->id;
  };
  n = std::min(n, pool.size());
  std::partial_sort(pool.begin(), pool.begin() + std::ptrdiff_t(n), pool.end(), better);
  std::vector<std::int64_t> ids;
  ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ids.push_back(pool[i]->id);
  return ids;
}

inline double squared_l2(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("embedding dimensions differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace detail

/// Greedy k-center cover over `points`: each step picks the point farthest
/// (L2) from everything selected so far, including `labeled`. Ties go to the
/// lower index. Without a labeled pool the first pick is index 0. Returns
/// indices into `points`.
inline std::vector<std::size_t> kcenter_greedy(std::span<const std::vector<double>> points, std::size_t k,
                                               std::span<const std::vector<double>> labeled = {}) {
  k = std::min(k, points.size());
  std::vector<std::size_t> picked;
  if (k == 0) return picked;
  std::vector<double> min_d(points.size(), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(points.size(), false);
  for (const auto& l : labeled)
    for (std::size_t i = 0; i < points.size(); ++i) min_d[i] = std::min(min_d[i], detail::squared_l2(points[i], l));

  auto take = [&](std::size_t idx) {
    picked.push_back(idx);
    taken[idx] = true;
    for (std::size_t i = 0; i < points.size(); ++i)
      min_d[i] = std::min(min_d[i], detail::squared_l2(points[i], points[idx]));
  };
  if (labeled.empty()) take(0);
  while (picked.size() < k) {
    std::size_t best = points.size();
    for (std::size_t i = 0; i < points.size(); ++i)
      if (!taken[i] && (best == points.size() || min_d[i] > min_d[best])) best = i;
    take(best);
  }
  return picked;
}

/// Chooses retraining queries among the negative-predicted candidates.
inline Selection select(std::span<const Candidate> cands, const SelectionConfig& cfg,
                        std::span<const std::vector<double>> labeled = {}) {
  Selection out;
  std::vector<const Candidate*> pool;
  for (const auto& c : cands)
    if (!c.predicted_positive) pool.push_back(&c);

  if (cfg.strategy == SelectionStrategy::query_all) {
    std::sort(pool.begin(), pool.end(), [](auto* a, auto* b) { return a->id < b->id; });
    for (auto* c : pool) out.ids.push_back(c->id);
    return out;
  }
  if (cfg.n > pool.size())
    out.warnings.push_back("requested " + std::to_string(cfg.n) + " queries but only " + std::to_string(pool.size()) +
                           " negative candidates exist; returning all");

  switch (cfg.strategy) {
    case SelectionStrategy::disagreement:
      out.ids = detail::top_n_by(pool, cfg.n, [](const Candidate& c) { return informativeness(c); });
      break;
    case SelectionStrategy::uncertainty:
      out.ids = detail::top_n_by(pool, cfg.n, [](const Candidate& c) { return classifier_entropy(c); });
      break;
    case SelectionStrategy::kcenter_greedy: {
      std::sort(pool.begin(), pool.end(), [](auto* a, auto* b) { return a->id < b->id; });
      bool have_embeddings = !pool.empty();
      for (auto* c : pool) have_embeddings = have_embeddings && c->embedding.has_value();
      if (!have_embeddings && !pool.empty())
        out.warnings.push_back("embeddings missing; k-center uses (s_det, s_cls) score vectors");
      std::vector<std::vector<double>> pts;
      for (auto* c : pool) pts.push_back(have_embeddings ? *c->embedding : std::vector<double>{c->s_det, c->s_cls});
      for (auto i : kcenter_greedy(pts, cfg.n, labeled)) out.ids.push_back(pool[i]->id);
      break;
    }
    case SelectionStrategy::query_all:
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detection-stage training patches: 50% random, 40% containing a mitosis,
// 10% containing a mitosis lookalike.

enum class PatchCategory : std::uint8_t { random, mitosis, lookalike };

inline std::string_view to_string(PatchCategory c) noexcept {
  switch (c) {
    case PatchCategory::random: return "random";
    case PatchCategory::mitosis: return "mitosis";
    case PatchCategory::lookalike: return "lookalike";
  }
  return "random";
}

struct SampledPatch {
  Window window;
  PatchCategory category = PatchCategory::random;
  std::optional<std::size_t> anchor;  // annotation index the window was built around
};

struct PatchSampling {
  std::vector<SampledPatch> patches;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::int64_t origin_containing(Rng& rng, double c, std::int64_t k, std::int64_t dim) {
  const std::int64_t last = std::max<std::int64_t>(0, dim - k);
  const auto lo = std::clamp<std::int64_t>(std::int64_t(std::floor(c)) - k + 1, 0, last);
  const auto hi = std::clamp<std::int64_t>(std::int64_t(std::floor(c)), 0, last);
  return lo + std::int64_t(rng.below(std::uint64_t(hi - lo + 1)));
}

}  // namespace detail

inline PatchSampling sample_detection_patches(std::span<const Annotation> anns, SlideDims slide, std::size_t count,
                                              Rng& rng, std::int64_t k = kDetectPatchSize) {
  slide.validate();
  PatchSampling out;
  std::vector<std::size_t> positives, lookalikes;
  for (std::size_t i = 0; i < anns.size(); ++i) {
    if (is_positive(anns[i].class_id)) positives.push_back(i);
    else if (is_hard_negative(anns[i].class_id)) lookalikes.push_back(i);
  }
  std::size_t n_mitosis = std::size_t(std::llround(0.4 * double(count)));
  std::size_t n_lookalike = std::size_t(std::llround(0.1 * double(count)));
  if (n_mitosis + n_lookalike > count) n_lookalike = count - n_mitosis;
  if (positives.empty() && n_mitosis > 0) {
    out.warnings.push_back("slide has no mitosis annotations; mitosis quota reassigned to random patches");
    n_mitosis = 0;
  }
  if (lookalikes.empty() && n_lookalike > 0) {
    out.warnings.push_back("slide has no lookalike annotations; lookalike quota reassigned to random patches");
    n_lookalike = 0;
  }
  const std::size_t n_random = count - n_mitosis - n_lookalike;

  std::int64_t next_id = 0;
  auto around = [&](const std::vector<std::size_t>& pool, PatchCategory cat) {
    const std::size_t idx = pool[rng.below(pool.size())];
    const Point c = anns[idx].center;
    Window w{next_id++, detail::origin_containing(rng, c.x, k, slide.width),
             detail::origin_containing(rng, c.y, k, slide.height), k, WindowKind::grid};
    out.patches.push_back({w, cat, idx});
  };
  for (std::size_t i = 0; i < n_random; ++i) {
    Window w{next_id++, std::int64_t(rng.below(std::uint64_t(std::max<std::int64_t>(0, slide.width - k) + 1))),
             std::int64_t(rng.below(std::uint64_t(std::max<std::int64_t>(0, slide.height - k) + 1))), k,
             WindowKind::grid};
    out.patches.push_back({w, PatchCategory::random, std::nullopt});
  }
  for (std::size_t i = 0; i < n_mitosis; ++i) around(positives, PatchCategory::mitosis);
  for (std::size_t i = 0; i < n_lookalike; ++i) around(lookalikes, PatchCategory::lookalike);
  return out;
}

// ---------------------------------------------------------------------------
// Text tables

// Candidate table: id,s_det,s_cls,predicted,embedding  (embedding ';'-joined)
inline void write_candidates(std::ostream& os, std::span<const Candidate> cands) {
  os << "id,s_det,s_cls,predicted,embedding\n";
  for (const auto& c : cands) {
    os << c.id << ',' << format_double(c.s_det) << ',' << format_double(c.s_cls) << ','
       << (c.predicted_positive ? "positive" : "negative") << ',';
    if (c.embedding)
      for (std::size_t i = 0; i < c.embedding->size(); ++i) os << (i ? ";" : "") << format_double((*c.embedding)[i]);
    os << '\n';
  }
}

inline std::vector<Candidate> read_candidates(std::istream& is) {
  std::vector<Candidate> out;
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      if (line.rfind("id,", 0) == 0) continue;
    }
    const auto cols = split(line, ',');
    if (cols.size() != 5) throw std::runtime_error("malformed candidate line: " + line);
    Candidate c;
    c.id = std::stoll(cols[0]);
    c.s_det = parse_double(cols[1]);
    c.s_cls = parse_double(cols[2]);
    if (cols[3] == "positive") c.predicted_positive = true;
    else if (cols[3] != "negative") throw std::runtime_error("bad predicted class: " + cols[3]);
    if (!cols[4].empty()) {
      std::vector<double> e;
      for (const auto& v : split(cols[4], ';')) e.push_back(parse_double(v));
      c.embedding = std::move(e);
    }
    out.push_back(std::move(c));
  }
  return out;
}

// Selection manifest: rank,id,strategy
inline void write_selection(std::ostream& os, std::span<const std::int64_t> ids, SelectionStrategy s) {
  os << "rank,id,strategy\n";
  for (std::size_t i = 0; i < ids.size(); ++i) os << i << ',' << ids[i] << ',' << to_string(s) << '\n';
}

inline std::vector<std::int64_t> read_selection(std::istream& is) {
  std::vector<std::int64_t> ids;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line.rfind("rank,", 0) == 0) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 3) throw std::runtime_error("malformed selection line: " + line);
    ids.push_back(std::stoll(cols[1]));
  }
  return ids;
}

}  // namespace recas
