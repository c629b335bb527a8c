// recas: command-line front end for the pipeline engine.

#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "recas/backend.hpp"
#include "recas/eval.hpp"
#include "recas/pipeline.hpp"
#include "recas/remote.hpp"
#include "recas/select.hpp"
#include "recas/synth.hpp"
#include "recas/tiling.hpp"

using namespace recas;

namespace {

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return in;
}

// Writes to `path`, or stdout when it is empty or "-".
template <class F>
void with_output(const std::string& path, F&& f) {
  if (path.empty() || path == "-") {
    f(std::cout);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  f(out);
}

std::vector<AnnotationFile> load_annotations(const std::vector<std::string>& paths) {
  std::vector<AnnotationFile> out;
  for (const auto& p : paths) {
    auto in = open_in(p);
    out.push_back(read_annotations(in));
  }
  return out;
}

std::map<std::string, SlideTruth> truths_of(const std::vector<AnnotationFile>& files) {
  std::map<std::string, SlideTruth> t;
  for (const auto& f : files) t.emplace(f.slide_id, SlideTruth(f.dims, f.annotations));
  return t;
}

OracleSuite oracle_suite(const std::string& kind, std::uint64_t seed) {
  if (kind == "degraded") return degraded_oracle_suite(seed);
  OracleSuite s;
  if (kind == "perfect") {
    s.detector.mode = OracleMode::perfect;
    s.classifier.mode = OracleMode::perfect;
    s.adjuster.mode = OracleMode::perfect;
  } else if (kind != "noisy") {
    throw std::invalid_argument("oracle must be noisy, perfect or degraded");
  }
  s.seed(seed);
  return s;
}

PipelineConfig load_config(const std::string& path) {
  PipelineConfig cfg;
  if (!path.empty()) {
    auto in = open_in(path);
    cfg = read_config(in);
  }
  apply_env_overrides(cfg);
  return cfg;
}

std::unique_ptr<Backend> backend_for(const PipelineConfig& cfg, const std::vector<AnnotationFile>& files,
                                     const std::string& oracle) {
  if (cfg.backend.rfind("oracle", 0) == 0) {
    auto b = std::make_unique<OracleBackend>(oracle_suite(oracle, cfg.rng_seed));
    for (auto& [id, t] : truths_of(files)) b->add_slide(id, t);
    return b;
  }
  return RemoteBackend::connect(cfg.backend);
}

int cmd_synth(const std::string& preset, std::uint64_t seed, const std::string& id, const std::string& out,
              std::optional<double> density, std::optional<double> hard_ratio, std::optional<double> hotspot,
              std::optional<std::int64_t> width, std::optional<std::int64_t> height) {
  SynthConfig c;
  if (preset == "cmc") c = cmc_like_preset(seed, id);
  else if (preset == "bench") c = benchmark_preset(seed, id);
  else if (preset != "default") throw std::invalid_argument("preset must be default, cmc or bench");
  c.slide_id = id;
  c.rng_seed = seed;
  if (density) c.positives_per_mm2 = *density;
  if (hard_ratio) c.hard_negative_ratio = *hard_ratio;
  if (hotspot) c.hotspot_multiplier = *hotspot;
  if (width) c.dims.width = *width;
  if (height) c.dims.height = *height;
  const auto s = generate(c);
  with_output(out, [&](std::ostream& os) { write_annotations(os, s.id, s.dims, s.annotations); });
  std::cerr << "synth: " << s.annotations.size() << " annotations on " << s.dims.width << "x" << s.dims.height
            << ", planted hotspot " << s.hotspot_planted << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"recas: tiling, relocation, adjustment, fusion, selection and evaluation"};
  app.require_subcommand(1);

  // synth
  std::string s_preset = "default", s_id = "synthetic", s_out;
  std::uint64_t s_seed = 0;
  std::optional<double> s_density, s_hard, s_hot;
  std::optional<std::int64_t> s_w, s_h;
  auto* synth = app.add_subcommand("synth", "generate a synthetic annotated slide");
  synth->add_option("--preset", s_preset, "default | cmc | bench");
  synth->add_option("--seed", s_seed);
  synth->add_option("--id", s_id, "slide id");
  synth->add_option("--density", s_density, "positives per mm^2");
  synth->add_option("--hard-ratio", s_hard, "hard negatives per positive");
  synth->add_option("--hotspot", s_hot, "hotspot density multiplier");
  synth->add_option("--width", s_w);
  synth->add_option("--height", s_h);
  synth->add_option("-o,--out", s_out, "annotation file (default stdout)");

  // plan
  std::int64_t p_w = 0, p_h = 0, p_k = kDetectPatchSize;
  std::string p_strategy = "grid", p_out, p_config, p_oracle = "noisy";
  double p_sigma = 0.1;
  std::vector<std::string> p_ann;
  auto* plan = app.add_subcommand("plan", "emit an inference window plan");
  plan->add_option("--width", p_w);
  plan->add_option("--height", p_h);
  plan->add_option("-k,--window", p_k);
  plan->add_option("--strategy", p_strategy, "grid | overlap | relocation");
  plan->add_option("--overlap", p_sigma, "overlap ratio");
  plan->add_option("-a,--annotations", p_ann, "slide for relocation planning (dims taken from it)");
  plan->add_option("-c,--config", p_config);
  plan->add_option("--oracle", p_oracle, "noisy | perfect | degraded");
  plan->add_option("-o,--out", p_out);

  // run
  std::vector<std::string> r_ann;
  std::string r_config, r_out, r_oracle = "noisy";
  bool r_raster = false;
  auto* run = app.add_subcommand("run", "run the pipeline and write stage snapshots");
  run->add_option("-a,--annotations", r_ann, "slide annotation files")->required();
  run->add_option("-c,--config", r_config);
  run->add_option("--oracle", r_oracle, "noisy | perfect | degraded (in-process backend)");
  run->add_flag("--raster", r_raster, "inline marker rasters in detect requests");
  run->add_option("-o,--out", r_out, "snapshot file (default stdout)");

  // evaluate
  std::string e_snap, e_stage = "final", e_report, e_scatter, e_fp;
  std::vector<std::string> e_ann;
  std::string e_threshold = "0.5";
  double e_radius = 25.0;
  auto* evaluate = app.add_subcommand("evaluate", "score snapshots against ground truth");
  evaluate->add_option("-s,--snapshots", e_snap)->required();
  evaluate->add_option("-a,--annotations", e_ann)->required();
  evaluate->add_option("--stage", e_stage);
  evaluate->add_option("-t,--threshold", e_threshold, "value in [0,1] or 'sweep' (lowest GA MAPE)");
  evaluate->add_option("--radius", e_radius);
  evaluate->add_option("-o,--report", e_report);
  evaluate->add_option("--scatter", e_scatter, "MC scatter table");
  evaluate->add_option("--fp-bars", e_fp, "FP taxonomy table");

  // select
  std::string q_cand, q_snap, q_stage = "classify", q_strategy = "disagreement", q_out, q_cand_out;
  std::size_t q_n = 20000;
  double q_threshold = 0.5;
  auto* sel = app.add_subcommand("select", "choose classifier retraining candidates");
  sel->add_option("--candidates", q_cand, "candidate table");
  sel->add_option("-s,--snapshots", q_snap, "build candidates from snapshot detections");
  sel->add_option("--stage", q_stage);
  sel->add_option("-t,--threshold", q_threshold, "decision threshold for negative prediction");
  sel->add_option("--strategy", q_strategy, "disagreement | query_all | uncertainty | kcenter_greedy");
  sel->add_option("-n", q_n);
  sel->add_option("--write-candidates", q_cand_out);
  sel->add_option("-o,--out", q_out);

  // bench
  std::vector<std::string> b_ann;
  std::string b_config, b_out, b_oracle = "noisy";
  auto* bench = app.add_subcommand("bench", "window count and wall time per tiling strategy");
  bench->add_option("-a,--annotations", b_ann)->required();
  bench->add_option("-c,--config", b_config);
  bench->add_option("--oracle", b_oracle);
  bench->add_option("-o,--out", b_out);

  // serve
  std::vector<std::string> v_ann;
  std::string v_oracle = "noisy";
  std::uint64_t v_seed = 0;
  auto* serve_cmd = app.add_subcommand("serve", "serve the oracle backend on stdin/stdout");
  serve_cmd->add_option("-a,--annotations", v_ann)->required();
  serve_cmd->add_option("--oracle", v_oracle);
  serve_cmd->add_option("--seed", v_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(s_preset, s_seed, s_id, s_out, s_density, s_hard, s_hot, s_w, s_h);

    if (*plan) {
      WindowPlan wp;
      if (p_strategy == "relocation") {
        if (p_ann.size() != 1) throw std::invalid_argument("relocation planning needs one --annotations file");
        auto files = load_annotations(p_ann);
        auto cfg = load_config(p_config);
        cfg.window_size = p_k;
        auto backend = backend_for(cfg, files, p_oracle);
        wp = plan_grid(files[0].dims, p_k);
        const auto dets = flatten(
            detect_windows(wp.windows, files[0].slide_id, *backend, cfg.window_batch, cfg.max_in_flight));
        RelocationConfig rc = cfg.relocation;
        rc.window_size = p_k;
        const auto rel = plan_relocation(dets, wp, rc);
        wp.windows.insert(wp.windows.end(), rel.new_windows.begin(), rel.new_windows.end());
      } else {
        SlideDims dims{p_w, p_h};
        if (!p_ann.empty()) dims = load_annotations(p_ann).at(0).dims;
        if (p_strategy == "grid") wp = plan_grid(dims, p_k);
        else if (p_strategy == "overlap") wp = plan_overlap(dims, p_k, OverlapConfig{p_sigma});
        else throw std::invalid_argument("strategy must be grid, overlap or relocation");
      }
      with_output(p_out, [&](std::ostream& os) { write_plan(os, wp); });
      std::cerr << "plan: " << wp.count(WindowKind::grid) << " grid + " << wp.count(WindowKind::relocated)
                << " relocated windows\n";
      return 0;
    }

    if (*run) {
      auto files = load_annotations(r_ann);
      auto cfg = load_config(r_config);
      auto backend = backend_for(cfg, files, r_oracle);
      bool all_complete = true;
      with_output(r_out, [&](std::ostream& os) {
        write_snapshot_header(os);
        for (const auto& f : files) {
          TileSource tiles;
          if (r_raster) tiles = marker_tiles(f.annotations);
          const auto sr = run_slide(f.slide_id, f.dims, *backend, cfg, tiles);
          write_snapshots(os, sr, false);
          all_complete = all_complete && sr.complete;
          std::cerr << "run " << f.slide_id << ": " << sr.grid_windows << " grid + " << sr.relocated_windows
                    << " relocated windows, " << (sr.snapshots.empty() ? 0 : sr.final_detections().size())
                    << " detections" << (sr.complete ? "" : ", INCOMPLETE: " + sr.error) << "\n";
          for (const auto& t : sr.timings) std::cerr << "  " << t.stage << " " << format_double(t.ms) << " ms\n";
        }
      });
      return all_complete ? 0 : 2;
    }

    if (*evaluate) {
      auto in = open_in(e_snap);
      const auto snaps = read_snapshots(in);
      std::vector<SlideEval> slides;
      for (const auto& f : load_annotations(e_ann))
        slides.push_back({f.slide_id, f.dims, snaps.get(f.slide_id, e_stage), f.annotations});
      for (const auto& s : slides) {
        if (std::none_of(s.gts.begin(), s.gts.end(), [](const Annotation& a) { return is_positive(a.class_id); }))
          std::cerr << "warning: slide " << s.id << " has no ground-truth mitoses; excluded from MAPE\n";
      }
      double threshold = 0.5;
      if (e_threshold == "sweep") {
        threshold = sweep_threshold(slides, McSetting::GA).best_threshold;
        std::cerr << "evaluate: lowest GA MAPE at threshold " << format_double(threshold) << "\n";
      } else {
        threshold = parse_double(e_threshold);
      }
      const auto rep = recas::evaluate(slides, threshold, e_radius);
      with_output(e_report, [&](std::ostream& os) { write_report(os, rep); });
      if (!e_scatter.empty()) with_output(e_scatter, [&](std::ostream& os) { write_mc_scatter(os, rep); });
      if (!e_fp.empty()) with_output(e_fp, [&](std::ostream& os) { write_fp_bars(os, rep); });
      return 0;
    }

    if (*sel) {
      std::vector<Candidate> cands;
      if (!q_cand.empty()) {
        auto in = open_in(q_cand);
        cands = read_candidates(in);
      } else if (!q_snap.empty()) {
        auto in = open_in(q_snap);
        const auto snaps = read_snapshots(in);
        std::vector<Detection> dets;
        for (const auto& r : snaps.records)
          if (r.stage == q_stage) dets.push_back(r.detection);
        cands = make_candidates(dets, q_threshold);
      } else {
        throw std::invalid_argument("select needs --candidates or --snapshots");
      }
      if (!q_cand_out.empty()) with_output(q_cand_out, [&](std::ostream& os) { write_candidates(os, cands); });
      const SelectionConfig sc{parse_strategy(q_strategy), q_n};
      const auto s = recas::select(cands, sc);
      for (const auto& w : s.warnings) std::cerr << "warning: " << w << "\n";
      with_output(q_out, [&](std::ostream& os) { write_selection(os, s.ids, sc.strategy); });
      return 0;
    }

    if (*bench) {
      auto files = load_annotations(b_ann);
      auto cfg = load_config(b_config);
      auto backend = backend_for(cfg, files, b_oracle);
      std::vector<BenchRow> rows;
      for (const auto& f : files) {
        auto r = bench_tiling(f.slide_id, f.dims, *backend, cfg);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      with_output(b_out, [&](std::ostream& os) { write_bench(os, rows); });
      return 0;
    }

    if (*serve_cmd) {
      ignore_sigpipe();
      OracleBackend backend(oracle_suite(v_oracle, v_seed));
      for (auto& [id, t] : truths_of(load_annotations(v_ann))) backend.add_slide(id, t);
      const auto n = serve(backend, STDIN_FILENO, STDOUT_FILENO);
      std::cerr << "serve: answered " << n << " requests\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
