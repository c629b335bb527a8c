#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "recas/geometry.hpp"
#include "recas/rng.hpp"
#include "recas/spatial.hpp"
#include "recas/textio.hpp"

namespace recas {

/// Physical scale: a 7110x5333 px field covers 2.37 mm^2, i.e. ~0.25 um/px.
inline constexpr double kMicronsPerPixel = 0.25;
inline constexpr double kPixelsPerMm2 = (1000.0 / kMicronsPerPixel) * (1000.0 / kMicronsPerPixel);

struct SynthConfig {
  std::string slide_id = "synthetic";
  SlideDims dims{24000, 18000};
  double positives_per_mm2 = 1.0;
  double hard_negative_ratio = 1.0;
  double other_negative_ratio = 0.0;
  ObjectClass hard_negative_class = ObjectClass::mitosis_like;
  // Planted hotspot: extra positives inside one footprint. When
  // `hotspot_count` is set it overrides the multiplier.
  double hotspot_multiplier = 0.0;
  std::optional<std::int64_t> hotspot_count;
  double hotspot_width = 7110.0;
  double hotspot_height = 5333.0;
  // Cells do not overlap: centers closer than this are redrawn.
  double min_separation = 50.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    dims.validate();
    if (positives_per_mm2 < 0 || hard_negative_ratio < 0 || other_negative_ratio < 0 || hotspot_multiplier < 0 ||
        min_separation < 0)
      throw std::invalid_argument("densities must be non-negative");
    if (hotspot_count && *hotspot_count < 0) throw std::invalid_argument("hotspot count must be non-negative");
  }
};

struct SyntheticSlide {
  std::string id;
  SlideDims dims;
  std::vector<Annotation> annotations;
  std::optional<Point> hotspot_origin;
  std::int64_t hotspot_planted = 0;
};

/// Poisson background scatter of positives plus one planted hotspot, then
/// hard negatives and other negatives scattered uniformly.
inline SyntheticSlide generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.rng_seed, hash_string("synth")));
  SyntheticSlide out{cfg.slide_id, cfg.dims, {}, std::nullopt, 0};
  const double w = double(cfg.dims.width), h = double(cfg.dims.height);
  const double area_mm2 = w * h / kPixelsPerMm2;

  PointGrid placed(std::max(cfg.min_separation, 1.0));
  // Redraws until the point keeps its distance; gives up after a few tries
  // so impossible densities still terminate.
  auto place = [&](double x0, double y0, double x1, double y1, ObjectClass c) {
    Point p{};
    for (int attempt = 0; attempt < 64; ++attempt) {
      p = {rng.uniform(x0, x1), rng.uniform(y0, y1)};
      if (cfg.min_separation <= 0 || !placed.any_within(p, cfg.min_separation)) break;
    }
    placed.insert(p);
    out.annotations.push_back({p, c});
  };
  auto scatter = [&](std::uint64_t n, ObjectClass c) {
    for (std::uint64_t i = 0; i < n; ++i) place(0, 0, w, h, c);
  };

  const auto n_background = rng.poisson(cfg.positives_per_mm2 * area_mm2);
  scatter(n_background, ObjectClass::mitosis);

  const double hw = std::min(cfg.hotspot_width, w), hh = std::min(cfg.hotspot_height, h);
  std::int64_t planted = 0;
  if (cfg.hotspot_count) {
    planted = *cfg.hotspot_count;
  } else if (cfg.hotspot_multiplier > 0.0) {
    planted = std::int64_t(rng.poisson(cfg.hotspot_multiplier * cfg.positives_per_mm2 * hw * hh / kPixelsPerMm2));
  }
  if (planted > 0) {
    const Point o{rng.uniform(0, w - hw), rng.uniform(0, h - hh)};
    out.hotspot_origin = o;
    out.hotspot_planted = planted;
    for (std::int64_t i = 0; i < planted; ++i) place(o.x, o.y, o.x + hw, o.y + hh, ObjectClass::mitosis);
  }

  const std::size_t n_pos = out.annotations.size();
  scatter(rng.poisson(cfg.hard_negative_ratio * double(n_pos)), cfg.hard_negative_class);
  scatter(rng.poisson(cfg.other_negative_ratio * double(n_pos)), ObjectClass::granulocyte);
  return out;
}

/// Large slide whose detector-relocation load matches a CMC-like density:
/// about 2.7 relocation-eligible detections per 100 grid windows with the
/// default noisy detector.
inline SynthConfig cmc_like_preset(std::uint64_t seed, std::string id = "cmc") {
  SynthConfig c;
  c.slide_id = std::move(id);
  c.dims = {100000, 80000};
  c.positives_per_mm2 = 5.5;
  c.hard_negative_ratio = 1.0;
  c.rng_seed = seed;
  return c;
}

/// Desk-scale slide with a planted hotspot, used by the ablation benchmark.
inline SynthConfig benchmark_preset(std::uint64_t seed, std::string id = "bench") {
  SynthConfig c;
  c.slide_id = std::move(id);
  c.dims = {24000, 18000};
  c.positives_per_mm2 = 3.0;
  c.hard_negative_ratio = 1.5;
  c.hotspot_multiplier = 10.0;
  c.rng_seed = seed;
  return c;
}

/// Grayscale marker image; positives are drawn 255, hard negatives 160,
/// other objects 80, background 0.
struct Raster {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::int64_t x, std::int64_t y) const { return pixels[std::size_t(y * width + x)]; }
  std::uint8_t& at(std::int64_t x, std::int64_t y) { return pixels[std::size_t(y * width + x)]; }
};

inline std::uint8_t marker_value(ObjectClass c) noexcept {
  if (is_positive(c)) return 255;
  if (is_hard_negative(c)) return 160;
  return 80;
}

/// Renders the square tile [x, x+size) x [y, y+size) with one filled disc per
/// annotation. Pixel (i, j) samples the slide at (x + i + 0.5, y + j + 0.5).
inline Raster render_tile(std::span<const Annotation> anns, double x, double y, std::int64_t size,
                          double marker_radius = 4.0) {
  Raster r{size, size, std::vector<std::uint8_t>(std::size_t(size * size), 0)};
  const double r2 = marker_radius * marker_radius;
  for (const auto& a : anns) {
    const double lx = a.center.x - x, ly = a.center.y - y;
    const auto i0 = std::max<std::int64_t>(0, std::int64_t(std::floor(lx - marker_radius)));
    const auto i1 = std::min<std::int64_t>(size - 1, std::int64_t(std::ceil(lx + marker_radius)));
    const auto j0 = std::max<std::int64_t>(0, std::int64_t(std::floor(ly - marker_radius)));
    const auto j1 = std::min<std::int64_t>(size - 1, std::int64_t(std::ceil(ly + marker_radius)));
    for (auto j = j0; j <= j1; ++j)
      for (auto i = i0; i <= i1; ++i) {
        const double dx = double(i) + 0.5 - lx, dy = double(j) + 0.5 - ly;
        if (dx * dx + dy * dy <= r2) r.at(i, j) = std::max(r.at(i, j), marker_value(a.class_id));
      }
  }
  return r;
}

// Annotation file format:
//   # slide=<id> width=<W> height=<H>
//   x,y,class
//   <x>,<y>,<class name>
inline void write_annotations(std::ostream& os, const std::string& slide_id, SlideDims dims,
                              std::span<const Annotation> anns) {
  os << "# slide=" << slide_id << " width=" << dims.width << " height=" << dims.height << '\n';
  os << "x,y,class\n";
  for (const auto& a : anns)
    os << format_double(a.center.x) << ',' << format_double(a.center.y) << ',' << to_string(a.class_id) << '\n';
}

struct AnnotationFile {
  std::string slide_id;
  SlideDims dims;
  std::vector<Annotation> annotations;
};

inline AnnotationFile read_annotations(std::istream& is) {
  AnnotationFile f;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      for (const auto& [k, v] : parse_header_fields(line.substr(1))) {
        if (k == "slide") f.slide_id = v;
        else if (k == "width") f.dims.width = std::stoll(v);
        else if (k == "height") f.dims.height = std::stoll(v);
      }
      continue;
    }
    if (line == "x,y,class") continue;
    const auto cols = split(line, ',');
    if (cols.size() != 3) throw std::runtime_error("malformed annotation line: " + line);
    f.annotations.push_back({{parse_double(cols[0]), parse_double(cols[1])}, parse_object_class(cols[2])});
  }
  return f;
}

}  // namespace recas
