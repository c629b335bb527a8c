#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "recas/geometry.hpp"

namespace recas {

/// Bucketed point set for rectangle queries over annotation centers.
class PointGrid {
 public:
  PointGrid() = default;
  explicit PointGrid(double cell) : cell_(cell) {}
  PointGrid(std::span<const Annotation> anns, double cell) : cell_(cell) {
    for (const auto& a : anns) insert(a.center);
  }

  void insert(Point p) {
    cells_[key(cell_of(p.x), cell_of(p.y))].push_back(pts_.size());
    pts_.push_back(p);
  }

  /// True if some point lies strictly closer than `r` to `c`.
  bool any_within(Point c, double r) const {
    for (auto i : query(c.x - r, c.y - r, c.x + r, c.y + r))
      if (distance(pts_[i], c) < r) return true;
    return false;
  }

  /// Indices of points with x0 <= x <= x1 and y0 <= y <= y1, ascending.
  std::vector<std::size_t> query(double x0, double y0, double x1, double y1) const {
    std::vector<std::size_t> out;
    if (pts_.empty()) return out;
    for (auto cy = cell_of(y0); cy <= cell_of(y1); ++cy)
      for (auto cx = cell_of(x0); cx <= cell_of(x1); ++cx) {
        auto it = cells_.find(key(cx, cy));
        if (it == cells_.end()) continue;
        for (auto i : it->second) {
          const Point p = pts_[i];
          if (p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1) out.push_back(i);
        }
      }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::int64_t cell_of(double v) const { return std::int64_t(std::floor(v / cell_)); }
  static std::int64_t key(std::int64_t cx, std::int64_t cy) { return cy * 2654435761LL + cx; }

  double cell_ = 512.0;
  std::vector<Point> pts_;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> cells_;
};

}  // namespace recas
