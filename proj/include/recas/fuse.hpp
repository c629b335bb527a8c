#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "recas/backend.hpp"
#include "recas/geometry.hpp"
#include "recas/protocol.hpp"

namespace recas {

struct FusionConfig {
  double omega = 0.4;
  double decision_threshold = 0.5;

  void validate() const {
    if (!(omega >= 0.0 && omega <= 1.0)) throw std::invalid_argument("omega must lie in [0,1]");
    if (!(decision_threshold >= 0.0 && decision_threshold <= 1.0))
      throw std::invalid_argument("decision threshold must lie in [0,1]");
  }
};

/// omega * s_det + (1 - omega) * s_cls.
inline double fuse_scores(double s_det, double s_cls, const FusionConfig& cfg) {
  cfg.validate();
  if (!(s_det >= 0.0 && s_det <= 1.0) || !(s_cls >= 0.0 && s_cls <= 1.0))
    throw std::invalid_argument("scores must lie in [0,1]");
  return std::clamp(cfg.omega * s_det + (1.0 - cfg.omega) * s_cls, 0.0, 1.0);
}

/// Patch of side `size` centered on the detection.
inline PatchRef object_patch(const std::string& slide_id, const Detection& d, std::int64_t size = kObjectPatchSize) {
  PatchRef p;
  p.slide_id = slide_id;
  p.window_id = d.source_window.value_or(-1);
  p.x = d.center().x - double(size) / 2.0;
  p.y = d.center().y - double(size) / 2.0;
  p.size = size;
  return p;
}

/// Runs `task` on one object patch per detection, in batches, and returns one
/// result per detection in input order.
inline std::vector<PatchResult> infer_object_patches(std::span<const Detection> dets, const std::string& slide_id,
                                                     Backend& backend, Task task, std::size_t batch_size = 256) {
  std::vector<PatchResult> out;
  out.reserve(dets.size());
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t i = 0; i < dets.size(); i += batch_size) {
    InferenceRequest req;
    req.request_id = i / batch_size;
    req.task = task;
    req.patch_size = kObjectPatchSize;
    for (std::size_t j = i; j < std::min(dets.size(), i + batch_size); ++j)
      req.patches.push_back(object_patch(slide_id, dets[j]));
    auto resp = backend.infer(req);
    if (resp.results.size() != req.patches.size())
      throw ProtocolError("response batch size does not match request", req.request_id);
    for (auto& r : resp.results) out.push_back(std::move(r));
  }
  return out;
}

/// Classification-stage rescoring: each detection gets the classifier's
/// positive confidence in `cls_score` and the fused value in `score`.
inline std::vector<Detection> rescore(std::span<const Detection> dets, const std::string& slide_id, Backend& backend,
                                      const FusionConfig& cfg, std::size_t batch_size = 256) {
  cfg.validate();
  const auto results = infer_object_patches(dets, slide_id, backend, Task::classify, batch_size);
  std::vector<Detection> out(dets.begin(), dets.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s_cls = results[i].positive_score();
    out[i].cls_score = s_cls;
    out[i].score = fuse_scores(out[i].det_score, s_cls, cfg);
  }
  return out;
}

}  // namespace recas
