#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "recas/geometry.hpp"

namespace recas {

enum class WindowKind : std::uint8_t { grid, relocated };

inline std::string_view to_string(WindowKind k) noexcept {
  return k == WindowKind::grid ? "grid" : "relocated";
}

/// Square inference window; origin is the top-left corner in slide pixels.
struct Window {
  std::int64_t id = 0;
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t size = 0;
  WindowKind kind = WindowKind::grid;

  Point origin() const noexcept { return {double(x), double(y)}; }
  Point center() const noexcept { return {double(x) + double(size) / 2.0, double(y) + double(size) / 2.0}; }
  bool contains(Point p) const noexcept {
    return p.x >= double(x) && p.y >= double(y) && p.x < double(x + size) && p.y < double(y + size);
  }

  friend bool operator==(const Window&, const Window&) = default;
};

struct OverlapConfig {
  double ratio = 0.0;

  void validate() const {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("overlap ratio must lie in [0,1)");
  }
};

struct RelocationConfig {
  double border_margin = 25.0;
  double min_score = 0.05;
  std::int64_t window_size = 512;

  void validate() const {
    if (window_size <= 0) throw std::invalid_argument("window size must be positive");
    if (!(border_margin >= 0.0 && border_margin < double(window_size) / 2.0))
      throw std::invalid_argument("border margin must lie in [0, K/2)");
    if (!(min_score >= 0.0 && min_score <= 1.0)) throw std::invalid_argument("min score must lie in [0,1]");
  }
};

struct WindowPlan {
  SlideDims slide;
  std::int64_t window_size = 0;
  double stride = 0.0;
  std::vector<Window> windows;

  std::size_t count(WindowKind k) const noexcept {
    return std::size_t(std::count_if(windows.begin(), windows.end(), [k](const Window& w) { return w.kind == k; }));
  }
};

namespace detail {

// Origins are stepped by `stride` until they pass the slide edge, then
// clamped inward so the window stays inside the slide.
inline std::vector<std::int64_t> axis_origins(std::int64_t dim, std::int64_t k, double stride) {
  std::vector<std::int64_t> out;
  const std::int64_t last = std::max<std::int64_t>(0, dim - k);
  for (std::int64_t i = 0; double(i) * stride < double(dim); ++i)
    out.push_back(std::min(std::int64_t(std::floor(double(i) * stride)), last));
  return out;
}

inline WindowPlan plan_strided(SlideDims slide, std::int64_t k, double stride) {
  slide.validate();
  if (k <= 0) throw std::invalid_argument("window size must be positive");
  WindowPlan plan{slide, k, stride, {}};
  const auto xs = axis_origins(slide.width, k, stride);
  const auto ys = axis_origins(slide.height, k, stride);
  plan.windows.reserve(xs.size() * ys.size());
  for (auto y : ys)
    for (auto x : xs)
      plan.windows.push_back({std::int64_t(plan.windows.size()), x, y, k, WindowKind::grid});
  return plan;
}

inline std::int64_t ceil_div(double num, double den) { return std::int64_t(std::ceil(num / den)); }

}  // namespace detail

/// Non-overlapping tiling: ceil(W/K) * ceil(H/K) windows, row-major.
inline WindowPlan plan_grid(SlideDims slide, std::int64_t k) { return detail::plan_strided(slide, k, double(k)); }

/// Overlapping tiling with stride K(1 - ratio).
inline WindowPlan plan_overlap(SlideDims slide, std::int64_t k, const OverlapConfig& cfg) {
  cfg.validate();
  return detail::plan_strided(slide, k, double(k) * (1.0 - cfg.ratio));
}

inline std::int64_t grid_window_count(SlideDims slide, std::int64_t k) {
  return detail::ceil_div(double(slide.width), double(k)) * detail::ceil_div(double(slide.height), double(k));
}

inline std::int64_t overlap_window_count(SlideDims slide, std::int64_t k, double ratio) {
  const double stride = double(k) * (1.0 - ratio);
  return detail::ceil_div(double(slide.width), stride) * detail::ceil_div(double(slide.height), stride);
}

/// Border-area gate: the detection center, in window-local coordinates, is
/// within `border_margin` of any window edge and its score is at least
/// `min_score`. Throws if the center is outside the window.
inline bool in_relocation_area(const Detection& det, const Window& window, const RelocationConfig& cfg) {
  const double k = double(window.size);
  const double lx = det.center().x - double(window.x);
  const double ly = det.center().y - double(window.y);
  if (lx < 0.0 || ly < 0.0 || lx > k || ly > k)
    throw std::invalid_argument("detection center lies outside its window");
  const double border = std::min({lx, ly, k - lx, k - ly});
  return border <= cfg.border_margin && det.score >= cfg.min_score;
}

/// Square window of side k centered as close as the slide allows on `c`.
inline Window window_centered_at(Point c, std::int64_t k, SlideDims slide, std::int64_t id,
                                 WindowKind kind = WindowKind::relocated) {
  auto place = [k](double center, std::int64_t dim) {
    const auto o = std::int64_t(std::llround(center - double(k) / 2.0));
    return std::clamp<std::int64_t>(o, 0, std::max<std::int64_t>(0, dim - k));
  };
  return {id, place(c.x, slide.width), place(c.y, slide.height), k, kind};
}

struct RelocationResult {
  std::vector<Detection> kept;
  std::vector<Detection> discarded;
  std::vector<Window> new_windows;
};

/// Removes border-area positives from the grid detections and emits one
/// relocated window per removed detection, centered on it. Windows whose
/// clamped origins coincide are emitted once. New window ids continue after
/// the plan's ids.
inline RelocationResult plan_relocation(std::span<const Detection> grid_dets, const WindowPlan& plan,
                                        const RelocationConfig& cfg) {
  cfg.validate();
  RelocationResult out;
  std::set<std::pair<std::int64_t, std::int64_t>> seen;
  std::int64_t next_id = 0;
  for (const auto& w : plan.windows) next_id = std::max(next_id, w.id + 1);

  for (const auto& d : grid_dets) {
    const Window* src = nullptr;
    if (d.source_window) {
      const auto id = *d.source_window;
      if (id >= 0 && std::size_t(id) < plan.windows.size() && plan.windows[std::size_t(id)].id == id)
        src = &plan.windows[std::size_t(id)];
      else
        for (const auto& w : plan.windows)
          if (w.id == id) src = &w;
    }
    if (!src || !is_positive(d.class_id) || !in_relocation_area(d, *src, cfg)) {
      out.kept.push_back(d);
      continue;
    }
    out.discarded.push_back(d);
    Window w = window_centered_at(d.center(), cfg.window_size, plan.slide, next_id);
    if (seen.insert({w.x, w.y}).second) {
      out.new_windows.push_back(w);
      ++next_id;
    }
  }
  return out;
}

// Plan text format:
//   # recas-plan v1 width=<W> height=<H> window=<K>
//   <id> <x> <y> <size> <grid|relocated>
inline void write_plan(std::ostream& os, const WindowPlan& plan) {
  os << "# recas-plan v1 width=" << plan.slide.width << " height=" << plan.slide.height
     << " window=" << plan.window_size << '\n';
  for (const auto& w : plan.windows)
    os << w.id << ' ' << w.x << ' ' << w.y << ' ' << w.size << ' ' << to_string(w.kind) << '\n';
}

inline void write_windows(std::ostream& os, std::span<const Window> windows) {
  for (const auto& w : windows)
    os << w.id << ' ' << w.x << ' ' << w.y << ' ' << w.size << ' ' << to_string(w.kind) << '\n';
}

inline WindowPlan read_plan(std::istream& is) {
  WindowPlan plan;
  std::string line;
  if (!std::getline(is, line) || line.rfind("# recas-plan v1", 0) != 0)
    throw std::runtime_error("missing plan header");
  {
    std::istringstream hs(line.substr(15));
    std::string tok;
    while (hs >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      const auto key = tok.substr(0, eq);
      const auto val = std::stoll(tok.substr(eq + 1));
      if (key == "width") plan.slide.width = val;
      else if (key == "height") plan.slide.height = val;
      else if (key == "window") plan.window_size = val;
    }
  }
  plan.stride = double(plan.window_size);
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Window w;
    std::string kind;
    if (!(ls >> w.id >> w.x >> w.y >> w.size >> kind)) throw std::runtime_error("malformed plan line: " + line);
    if (kind == "grid") w.kind = WindowKind::grid;
    else if (kind == "relocated") w.kind = WindowKind::relocated;
    else throw std::runtime_error("unknown window kind: " + kind);
    plan.windows.push_back(w);
  }
  return plan;
}

}  // namespace recas
