#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "recas/adjust.hpp"
#include "recas/backend.hpp"
#include "recas/fuse.hpp"
#include "recas/geometry.hpp"
#include "recas/protocol.hpp"
#include "recas/remote.hpp"
#include "recas/synth.hpp"
#include "recas/textio.hpp"
#include "recas/tiling.hpp"

namespace recas {

enum class TilingStrategy : std::uint8_t { grid, overlap };

struct StageToggles {
  bool relocation = true;
  bool adjustment = true;
  bool classification = true;
  bool fusion = true;  // off means omega = 0: classifier score only
};

struct PipelineConfig {
  std::int64_t window_size = kDetectPatchSize;
  TilingStrategy tiling = TilingStrategy::grid;
  OverlapConfig overlap{0.1};
  RelocationConfig relocation;
  double adjust_threshold = 0.5;
  FusionConfig fusion;
  double nms_threshold = 0.3;
  double match_radius = 25.0;
  std::string backend = "oracle";
  std::uint64_t rng_seed = 0;
  StageToggles stages;
  std::size_t max_in_flight = 4;
  std::size_t window_batch = 8;
  std::size_t object_batch = 256;

  void validate() const {
    if (window_size <= 0) throw std::invalid_argument("window size must be positive");
    overlap.validate();
    RelocationConfig r = relocation;
    r.window_size = window_size;
    r.validate();
    fusion.validate();
    if (!(adjust_threshold >= 0.0 && adjust_threshold <= 1.0))
      throw std::invalid_argument("adjust threshold must lie in [0,1]");
    if (!(nms_threshold >= 0.0 && nms_threshold <= 1.0)) throw std::invalid_argument("nms threshold must lie in [0,1]");
    if (!(match_radius > 0.0)) throw std::invalid_argument("match radius must be positive");
    if (max_in_flight == 0 || window_batch == 0 || object_batch == 0)
      throw std::invalid_argument("batch sizes and in-flight limit must be positive");
  }

  /// Omega actually used when classification is on.
  double effective_omega() const noexcept { return stages.fusion ? fusion.omega : 0.0; }
};

/// Supplies raw pixels for a patch; empty when the backend reads tiles itself.
using TileSource = std::function<std::string(const PatchRef&)>;

/// Tile source drawing annotation markers.
inline TileSource marker_tiles(std::vector<Annotation> anns) {
  auto shared = std::make_shared<const std::vector<Annotation>>(std::move(anns));
  return [shared](const PatchRef& p) {
    const Raster r = render_tile(*shared, p.x, p.y, p.size);
    return std::string(r.pixels.begin(), r.pixels.end());
  };
}

struct Snapshot {
  std::string stage;
  std::vector<Detection> detections;
};

struct StageTiming {
  std::string stage;
  double ms = 0.0;
};

struct SlideRun {
  std::string slide_id;
  SlideDims dims;
  std::vector<Snapshot> snapshots;
  std::vector<StageTiming> timings;
  std::vector<Window> inferred;  // every window sent to the detector, in order
  std::size_t grid_windows = 0;
  std::size_t relocated_windows = 0;
  std::size_t eligible = 0;  // detections removed by the relocation gate
  bool complete = true;
  std::string error;

  const Snapshot* find(std::string_view stage) const {
    for (const auto& s : snapshots)
      if (s.stage == stage) return &s;
    return nullptr;
  }

  const std::vector<Detection>& final_detections() const {
    if (snapshots.empty()) throw std::logic_error("run has no snapshots");
    return snapshots.back().detections;
  }
};

/// Runs the detector on `windows`, keeping up to `max_in_flight` batches in
/// flight. Returns one detection list per window, in window order, each
/// tagged with its source window.
inline std::vector<std::vector<Detection>> detect_windows(std::span<const Window> windows, const std::string& slide_id,
                                                          Backend& backend, std::size_t batch, std::size_t max_in_flight,
                                                          const TileSource& tiles = {}) {
  std::vector<std::vector<Detection>> out(windows.size());
  if (windows.empty()) return out;
  batch = std::max<std::size_t>(batch, 1);
  const std::size_t n_batches = (windows.size() + batch - 1) / batch;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex err_mu;

  auto work = [&] {
    for (;;) {
      const std::size_t b = next++;
      if (b >= n_batches || failed) return;
      try {
        const std::size_t lo = b * batch, hi = std::min(windows.size(), lo + batch);
        InferenceRequest req;
        req.request_id = b;
        req.task = Task::detect;
        req.patch_size = windows[lo].size;
        for (std::size_t i = lo; i < hi; ++i) {
          const Window& w = windows[i];
          PatchRef p{slide_id, w.id, double(w.x), double(w.y), w.size, std::nullopt};
          if (tiles) p.raster = base64_encode(tiles(p));
          req.patches.push_back(std::move(p));
        }
        auto resp = backend.infer(req);
        if (resp.results.size() != req.patches.size())
          throw ProtocolError("response batch size does not match request", req.request_id);
        for (std::size_t i = lo; i < hi; ++i) {
          const Window& w = windows[i];
          auto& dets = resp.results[i - lo].detections;
          for (auto& d : dets) {
            const Point c = d.center();
            if (c.x < double(w.x) || c.y < double(w.y) || c.x > double(w.x + w.size) || c.y > double(w.y + w.size))
              throw ProtocolError("detection outside its window", req.request_id);
            d.source_window = w.id;
            d.det_score = d.score;
            d.cls_score.reset();
          }
          out[i] = std::move(dets);
        }
      } catch (...) {
        std::lock_guard lk(err_mu);
        if (!first_error) first_error = std::current_exception();
        failed = true;
        return;
      }
    }
  };

  const std::size_t n_threads = std::min(max_in_flight, n_batches);
  if (n_threads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

inline std::vector<Detection> flatten(std::vector<std::vector<Detection>> per_window) {
  std::vector<Detection> out;
  for (auto& v : per_window)
    for (auto& d : v) out.push_back(std::move(d));
  return out;
}

/// Center adjustment of every detection followed by NMS, since two
/// detections of one object tend to converge on the same center.
inline std::vector<Detection> adjust_stage(std::span<const Detection> dets, const std::string& slide_id,
                                           SlideDims slide, Backend& backend, const PipelineConfig& cfg) {
  const auto preds = infer_object_patches(dets, slide_id, backend, Task::adjust, cfg.object_batch);
  std::vector<Detection> moved;
  moved.reserve(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i)
    moved.push_back(apply_adjustment(dets[i], AdjustmentPrediction::from(preds[i]), cfg.adjust_threshold, slide));
  return nms(moved, cfg.nms_threshold);
}

/// Runs every enabled stage on one slide. A backend failure stops the run;
/// snapshots taken so far are kept and the run is marked incomplete.
inline SlideRun run_slide(const std::string& slide_id, SlideDims dims, Backend& backend, const PipelineConfig& cfg,
                          const TileSource& tiles = {}) {
  cfg.validate();
  dims.validate();
  SlideRun run;
  run.slide_id = slide_id;
  run.dims = dims;
  auto t0 = std::chrono::steady_clock::now();
  auto lap = [&](const std::string& stage, std::vector<Detection> dets) {
    const auto t1 = std::chrono::steady_clock::now();
    run.timings.push_back({stage, std::chrono::duration<double, std::milli>(t1 - t0).count()});
    run.snapshots.push_back({stage, std::move(dets)});
    t0 = t1;
  };

  try {
    const WindowPlan plan = cfg.tiling == TilingStrategy::grid ? plan_grid(dims, cfg.window_size)
                                                               : plan_overlap(dims, cfg.window_size, cfg.overlap);
    run.grid_windows = plan.windows.size();
    run.inferred = plan.windows;
    auto dets = flatten(detect_windows(plan.windows, slide_id, backend, cfg.window_batch, cfg.max_in_flight, tiles));
    lap("detect", dets);

    if (cfg.stages.relocation) {
      RelocationConfig rc = cfg.relocation;
      rc.window_size = cfg.window_size;
      auto rel = plan_relocation(dets, plan, rc);
      run.eligible = rel.discarded.size();
      run.relocated_windows = rel.new_windows.size();
      run.inferred.insert(run.inferred.end(), rel.new_windows.begin(), rel.new_windows.end());
      auto extra =
          flatten(detect_windows(rel.new_windows, slide_id, backend, cfg.window_batch, cfg.max_in_flight, tiles));
      dets = std::move(rel.kept);
      dets.insert(dets.end(), extra.begin(), extra.end());
      lap("relocate", dets);
    }

    dets = nms(dets, cfg.nms_threshold);
    lap("nms", dets);

    if (cfg.stages.adjustment) {
      dets = adjust_stage(dets, slide_id, dims, backend, cfg);
      lap("adjust", dets);
    }

    if (cfg.stages.classification) {
      FusionConfig fc = cfg.fusion;
      fc.omega = cfg.effective_omega();
      dets = rescore(dets, slide_id, backend, fc, cfg.object_batch);
      lap("classify", dets);
    }

    lap("final", std::move(dets));
  } catch (const BackendError& e) {
    run.complete = false;
    run.error = e.what();
  }
  return run;
}

// ---------------------------------------------------------------------------
// Snapshot files
//   slide,stage,x,y,w,h,class,s_det,s_cls,score
// s_cls is empty before classification. An aborted run ends with a
// "# incomplete: <reason>" line.

inline void write_snapshot_header(std::ostream& os) { os << "slide,stage,x,y,w,h,class,s_det,s_cls,score\n"; }

inline void write_snapshot_rows(std::ostream& os, const std::string& slide, const Snapshot& s) {
  for (const auto& d : s.detections)
    os << slide << ',' << s.stage << ',' << format_double(d.center().x) << ',' << format_double(d.center().y) << ','
       << format_double(d.box.w()) << ',' << format_double(d.box.h()) << ',' << to_string(d.class_id) << ','
       << format_double(d.det_score) << ',' << (d.cls_score ? format_double(*d.cls_score) : std::string()) << ','
       << format_double(d.score) << '\n';
}

inline void write_snapshots(std::ostream& os, const SlideRun& run, bool header = true) {
  if (header) write_snapshot_header(os);
  for (const auto& s : run.snapshots) write_snapshot_rows(os, run.slide_id, s);
  if (!run.complete) os << "# incomplete: " << run.error << '\n';
}

struct SnapshotRecord {
  std::string slide;
  std::string stage;
  Detection detection;
};

struct SnapshotFile {
  std::vector<SnapshotRecord> records;
  std::vector<std::string> incomplete;  // reasons

  /// Detections of `slide` at `stage`, in file order.
  std::vector<Detection> get(std::string_view slide, std::string_view stage) const {
    std::vector<Detection> out;
    for (const auto& r : records)
      if (r.slide == slide && r.stage == stage) out.push_back(r.detection);
    return out;
  }
};

inline SnapshotFile read_snapshots(std::istream& is) {
  SnapshotFile f;
  std::string line;
  bool header_seen = false;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '#') {
      constexpr std::string_view tag = "# incomplete:";
      if (t.rfind(tag, 0) == 0) f.incomplete.emplace_back(trim(t.substr(tag.size())));
      continue;
    }
    if (!header_seen) {
      if (t != "slide,stage,x,y,w,h,class,s_det,s_cls,score")
        throw std::runtime_error("snapshot: unexpected header at line " + std::to_string(lineno));
      header_seen = true;
      continue;
    }
    const auto c = split(t, ',');
    if (c.size() != 10) throw std::runtime_error("snapshot: expected 10 fields at line " + std::to_string(lineno));
    try {
      Detection d = make_detection({parse_double(c[2]), parse_double(c[3])}, parse_double(c[4]), parse_double(c[5]),
                                   parse_double(c[9]), parse_object_class(c[6]));
      d.det_score = parse_double(c[7]);
      if (!c[8].empty()) d.cls_score = parse_double(c[8]);
      f.records.push_back({c[0], c[1], std::move(d)});
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error("snapshot line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Config file: one `key = value` per line, '#' starts a comment. Booleans are
// on/off, true/false or 1/0. RECAS_BACKEND and RECAS_SEED override the file.

namespace detail {

inline bool parse_bool(std::string_view v) {
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("not a boolean: " + std::string(v));
}

inline std::uint64_t parse_u64(std::string_view v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw std::invalid_argument("not an integer: " + std::string(v));
  return out;
}

inline const char* on_off(bool b) { return b ? "on" : "off"; }

}  // namespace detail

inline void set_config_value(PipelineConfig& cfg, std::string_view key, std::string_view v) {
  using detail::parse_bool;
  using detail::parse_u64;
  if (key == "window_size") cfg.window_size = std::int64_t(parse_u64(v));
  else if (key == "tiling") {
    if (v == "grid") cfg.tiling = TilingStrategy::grid;
    else if (v == "overlap") cfg.tiling = TilingStrategy::overlap;
    else throw std::invalid_argument("tiling must be grid or overlap");
  } else if (key == "overlap_ratio") cfg.overlap.ratio = parse_double(v);
  else if (key == "relocation") cfg.stages.relocation = parse_bool(v);
  else if (key == "border_margin") cfg.relocation.border_margin = parse_double(v);
  else if (key == "min_score") cfg.relocation.min_score = parse_double(v);
  else if (key == "adjustment") cfg.stages.adjustment = parse_bool(v);
  else if (key == "adjust_threshold") cfg.adjust_threshold = parse_double(v);
  else if (key == "classification") cfg.stages.classification = parse_bool(v);
  else if (key == "fusion") cfg.stages.fusion = parse_bool(v);
  else if (key == "omega") cfg.fusion.omega = parse_double(v);
  else if (key == "decision_threshold") cfg.fusion.decision_threshold = parse_double(v);
  else if (key == "nms_threshold") cfg.nms_threshold = parse_double(v);
  else if (key == "match_radius") cfg.match_radius = parse_double(v);
  else if (key == "backend") cfg.backend = std::string(v);
  else if (key == "seed") cfg.rng_seed = parse_u64(v);
  else if (key == "max_in_flight") cfg.max_in_flight = parse_u64(v);
  else if (key == "window_batch") cfg.window_batch = parse_u64(v);
  else if (key == "object_batch") cfg.object_batch = parse_u64(v);
  else throw std::invalid_argument("unknown config key: " + std::string(key));
}

inline PipelineConfig read_config(std::istream& is, PipelineConfig cfg = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view t = line;
    if (const auto hash = t.find('#'); hash != std::string_view::npos) t = t.substr(0, hash);
    t = trim(t);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": missing '='");
    try {
      set_config_value(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline void apply_env_overrides(PipelineConfig& cfg) {
  if (const char* b = std::getenv("RECAS_BACKEND"); b && *b) cfg.backend = b;
  if (const char* s = std::getenv("RECAS_SEED"); s && *s) cfg.rng_seed = detail::parse_u64(s);
}

inline void write_config(std::ostream& os, const PipelineConfig& c) {
  os << "window_size = " << c.window_size << '\n'
     << "tiling = " << (c.tiling == TilingStrategy::grid ? "grid" : "overlap") << '\n'
     << "overlap_ratio = " << format_double(c.overlap.ratio) << '\n'
     << "relocation = " << detail::on_off(c.stages.relocation) << '\n'
     << "border_margin = " << format_double(c.relocation.border_margin) << '\n'
     << "min_score = " << format_double(c.relocation.min_score) << '\n'
     << "adjustment = " << detail::on_off(c.stages.adjustment) << '\n'
     << "adjust_threshold = " << format_double(c.adjust_threshold) << '\n'
     << "classification = " << detail::on_off(c.stages.classification) << '\n'
     << "fusion = " << detail::on_off(c.stages.fusion) << '\n'
     << "omega = " << format_double(c.fusion.omega) << '\n'
     << "decision_threshold = " << format_double(c.fusion.decision_threshold) << '\n'
     << "nms_threshold = " << format_double(c.nms_threshold) << '\n'
     << "match_radius = " << format_double(c.match_radius) << '\n'
     << "backend = " << c.backend << '\n'
     << "seed = " << c.rng_seed << '\n'
     << "max_in_flight = " << c.max_in_flight << '\n'
     << "window_batch = " << c.window_batch << '\n'
     << "object_batch = " << c.object_batch << '\n';
}

/// "oracle" builds an in-process oracle seeded from the config over the
/// given slides; "exec:..." and "unix:..." connect to an external backend.
inline std::unique_ptr<Backend> make_backend(const PipelineConfig& cfg,
                                             const std::map<std::string, SlideTruth>& truths = {},
                                             OracleSuite suite = {}) {
  if (cfg.backend == "oracle" || cfg.backend == "oracle:noisy" || cfg.backend == "oracle:perfect") {
    suite.seed(cfg.rng_seed);
    if (cfg.backend == "oracle:perfect") {
      suite.detector.mode = OracleMode::perfect;
      suite.classifier.mode = OracleMode::perfect;
      suite.adjuster.mode = OracleMode::perfect;
    }
    auto b = std::make_unique<OracleBackend>(suite);
    for (const auto& [id, t] : truths) b->add_slide(id, t);
    return b;
  }
  return RemoteBackend::connect(cfg.backend);
}

// ---------------------------------------------------------------------------
// Tiling cost comparison

struct BenchRow {
  std::string strategy;
  std::size_t windows = 0;
  std::size_t grid_windows = 0;
  double overhead = 0.0;  // windows / grid windows - 1
  double wall_ms = 0.0;
};

/// Detector windows and wall time for grid, overlapping and relocated tiling
/// of the same slide.
inline std::vector<BenchRow> bench_tiling(const std::string& slide_id, SlideDims dims, Backend& backend,
                                          const PipelineConfig& cfg) {
  cfg.validate();
  std::vector<BenchRow> rows;
  const auto grid = plan_grid(dims, cfg.window_size);
  const std::size_t n_grid = grid.windows.size();
  auto timed = [&](auto&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = f();
    return std::pair{n, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
  };
  auto row = [&](std::string name, std::pair<std::size_t, double> r) {
    rows.push_back({std::move(name), r.first, n_grid, double(r.first) / double(n_grid) - 1.0, r.second});
  };

  row("grid", timed([&] {
        detect_windows(grid.windows, slide_id, backend, cfg.window_batch, cfg.max_in_flight);
        return n_grid;
      }));
  row("overlap", timed([&] {
        const auto plan = plan_overlap(dims, cfg.window_size, cfg.overlap);
        detect_windows(plan.windows, slide_id, backend, cfg.window_batch, cfg.max_in_flight);
        return plan.windows.size();
      }));
  row("relocation", timed([&] {
        const auto dets = flatten(detect_windows(grid.windows, slide_id, backend, cfg.window_batch, cfg.max_in_flight));
        RelocationConfig rc = cfg.relocation;
        rc.window_size = cfg.window_size;
        const auto rel = plan_relocation(dets, grid, rc);
        detect_windows(rel.new_windows, slide_id, backend, cfg.window_batch, cfg.max_in_flight);
        return n_grid + rel.new_windows.size();
      }));
  return rows;
}

inline void write_bench(std::ostream& os, std::span<const BenchRow> rows) {
  os << "strategy,windows,grid_windows,overhead,wall_ms\n";
  for (const auto& r : rows)
    os << r.strategy << ',' << r.windows << ',' << r.grid_windows << ',' << format_double(r.overhead) << ','
       << format_double(r.wall_ms) << '\n';
}

}  // namespace recas
