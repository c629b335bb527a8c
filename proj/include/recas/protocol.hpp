#pragma once

// Inference wire protocol. Every message is a frame: a 4-byte big-endian
// payload length followed by a UTF-8 JSON object. All objects carry the
// protocol version under "v" and a "type" tag:
//
//   hello     {"v":1,"type":"hello"}
//   infer     {"v":1,"type":"infer","id":7,"task":"detect","patch_size":512,
//              "patches":[{"slide":"s1","window":3,"x":0,"y":512,"size":512,
//                          "raster":"<base64, optional>"}]}
//   result    {"v":1,"type":"result","id":7,"results":[
//                {"detections":[[cx,cy,w,h,"mitosis",score],...]}      detect
//                {"scores":[p_neg,p_pos],"embedding":[...]}             classify
//                {"scores":[p_neg,p_pos],"dx":1.5,"dy":-2}             adjust
//              ]}
//   error     {"v":1,"type":"error","id":7,"message":"..."}
//   shutdown  {"v":1,"type":"shutdown"}
//
// Patch pixels are either referenced by (slide, origin, size) or inlined as a
// base64 grayscale raster of size*size bytes.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "recas/geometry.hpp"

namespace recas {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::size_t kMaxFrameBytes = 64u << 20;
inline constexpr std::int64_t kDetectPatchSize = 512;
inline constexpr std::int64_t kObjectPatchSize = 128;

/// Base class for every inference failure; carries the request id when known.
class BackendError : public std::runtime_error {
 public:
  BackendError(const std::string& what, std::optional<std::uint64_t> request_id = std::nullopt)
      : std::runtime_error(request_id ? what + " (request " + std::to_string(*request_id) + ")" : what),
        request_id_(request_id) {}
  std::optional<std::uint64_t> request_id() const noexcept { return request_id_; }

 private:
  std::optional<std::uint64_t> request_id_;
};

/// Malformed frame or payload, version mismatch.
class ProtocolError : public BackendError {
  using BackendError::BackendError;
};

/// No response within the configured deadline.
class TimeoutError : public BackendError {
  using BackendError::BackendError;
};

/// Backend process exited or closed its stream.
class BackendCrashed : public BackendError {
  using BackendError::BackendError;
};

/// Backend answered with an error message.
class RemoteError : public BackendError {
  using BackendError::BackendError;
};

enum class Task : std::uint8_t { detect, classify, adjust };

inline std::string_view to_string(Task t) noexcept {
  switch (t) {
    case Task::detect: return "detect";
    case Task::classify: return "classify";
    case Task::adjust: return "adjust";
  }
  return "detect";
}

inline Task parse_task(std::string_view s) {
  if (s == "detect") return Task::detect;
  if (s == "classify") return Task::classify;
  if (s == "adjust") return Task::adjust;
  throw ProtocolError("unknown task: " + std::string(s));
}

struct PatchRef {
  std::string slide_id;
  std::int64_t window_id = 0;
  double x = 0.0;
  double y = 0.0;
  std::int64_t size = 0;
  std::optional<std::string> raster;  // base64

  Point center() const noexcept { return {x + double(size) / 2.0, y + double(size) / 2.0}; }

  friend bool operator==(const PatchRef&, const PatchRef&) = default;
};

struct InferenceRequest {
  std::uint64_t request_id = 0;
  Task task = Task::detect;
  std::int64_t patch_size = 0;
  std::vector<PatchRef> patches;

  void validate() const {
    if (patches.empty()) throw ProtocolError("empty batch", request_id);
    if (patch_size <= 0) throw ProtocolError("patch size must be positive", request_id);
    for (const auto& p : patches)
      if (p.size != patch_size) throw ProtocolError("non-uniform patch size in batch", request_id);
  }

  friend bool operator==(const InferenceRequest&, const InferenceRequest&) = default;
};

/// Index of the positive class in two-class score vectors.
inline constexpr std::size_t kPositiveIndex = 1;

struct PatchResult {
  std::vector<Detection> detections;          // detect
  std::vector<double> class_scores;           // classify, adjust
  double dx = 0.0;                            // adjust
  double dy = 0.0;                            // adjust
  std::optional<std::vector<double>> embedding;

  double positive_score() const {
    if (class_scores.size() <= kPositiveIndex) throw std::out_of_range("no positive class score");
    return class_scores[kPositiveIndex];
  }

  friend bool operator==(const PatchResult&, const PatchResult&) = default;
};

struct InferenceResponse {
  std::uint64_t request_id = 0;
  std::vector<PatchResult> results;

  friend bool operator==(const InferenceResponse&, const InferenceResponse&) = default;
};

struct Hello {
  int version = kProtocolVersion;
  friend bool operator==(const Hello&, const Hello&) = default;
};

struct Shutdown {
  friend bool operator==(const Shutdown&, const Shutdown&) = default;
};

struct ErrorReply {
  std::optional<std::uint64_t> request_id;
  std::string message;
  friend bool operator==(const ErrorReply&, const ErrorReply&) = default;
};

using Message = std::variant<Hello, Shutdown, InferenceRequest, InferenceResponse, ErrorReply>;

// ---------------------------------------------------------------------------
// base64

namespace detail {
inline constexpr std::string_view kB64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const auto n = (std::uint32_t(std::uint8_t(bytes[i])) << 16) | (std::uint32_t(std::uint8_t(bytes[i + 1])) << 8) |
                   std::uint8_t(bytes[i + 2]);
    for (int s : {18, 12, 6, 0}) out += detail::kB64[(n >> s) & 63];
  }
  if (const auto rest = bytes.size() - i; rest > 0) {
    std::uint32_t n = std::uint32_t(std::uint8_t(bytes[i])) << 16;
    if (rest == 2) n |= std::uint32_t(std::uint8_t(bytes[i + 1])) << 8;
    out += detail::kB64[(n >> 18) & 63];
    out += detail::kB64[(n >> 12) & 63];
    out += rest == 2 ? detail::kB64[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw ProtocolError("bad base64 length");
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t n = 0;
    int pad = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = text[i + k];
      std::uint32_t v = 0;
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        ++pad;
      } else {
        if (pad) throw ProtocolError("bad base64 padding");
        const auto pos = detail::kB64.find(c);
        if (pos == std::string_view::npos) throw ProtocolError("bad base64 character");
        v = std::uint32_t(pos);
      }
      n = (n << 6) | v;
    }
    out += char((n >> 16) & 0xFF);
    if (pad < 2) out += char((n >> 8) & 0xFF);
    if (pad < 1) out += char(n & 0xFF);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON payloads

namespace detail {

using nlohmann::json;

inline json header(std::string_view type) { return json{{"v", kProtocolVersion}, {"type", type}}; }

inline void check_score(double s, std::optional<std::uint64_t> id) {
  if (!(s >= 0.0 && s <= 1.0)) throw ProtocolError("score outside [0,1]", id);
}

inline json encode_result(const PatchResult& r) {
  json j = json::object();
  if (!r.detections.empty() || r.class_scores.empty()) {
    json dets = json::array();
    for (const auto& d : r.detections)
      dets.push_back(json::array({d.center().x, d.center().y, d.box.w(), d.box.h(), to_string(d.class_id), d.score}));
    j["detections"] = std::move(dets);
  }
  if (!r.class_scores.empty()) {
    j["scores"] = r.class_scores;
    j["dx"] = r.dx;
    j["dy"] = r.dy;
  }
  if (r.embedding) j["embedding"] = *r.embedding;
  return j;
}

inline PatchResult decode_result(const json& j, std::uint64_t id) {
  PatchResult r;
  if (auto it = j.find("detections"); it != j.end()) {
    for (const auto& d : *it) {
      if (!d.is_array() || d.size() != 6) throw ProtocolError("detection must be a 6-tuple", id);
      const double score = d[5].get<double>();
      check_score(score, id);
      try {
        r.detections.push_back(make_detection({d[0].get<double>(), d[1].get<double>()}, d[2].get<double>(),
                                              d[3].get<double>(), score, parse_object_class(d[4].get<std::string>())));
      } catch (const std::invalid_argument& e) {
        throw ProtocolError(std::string("bad detection: ") + e.what(), id);
      }
    }
  }
  if (auto it = j.find("scores"); it != j.end()) {
    r.class_scores = it->get<std::vector<double>>();
    for (double s : r.class_scores) check_score(s, id);
    r.dx = j.value("dx", 0.0);
    r.dy = j.value("dy", 0.0);
  }
  if (auto it = j.find("embedding"); it != j.end()) r.embedding = it->get<std::vector<double>>();
  return r;
}

}  // namespace detail

inline std::string encode_message(const Message& msg) {
  using detail::json;
  json j = std::visit(
      [](const auto& m) -> json {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, Hello>) {
          json h = detail::header("hello");
          h["v"] = m.version;
          return h;
        } else if constexpr (std::is_same_v<T, Shutdown>) {
          return detail::header("shutdown");
        } else if constexpr (std::is_same_v<T, InferenceRequest>) {
          json h = detail::header("infer");
          h["id"] = m.request_id;
          h["task"] = to_string(m.task);
          h["patch_size"] = m.patch_size;
          json patches = json::array();
          for (const auto& p : m.patches) {
            json pj{{"slide", p.slide_id}, {"window", p.window_id}, {"x", p.x}, {"y", p.y}, {"size", p.size}};
            if (p.raster) pj["raster"] = *p.raster;
            patches.push_back(std::move(pj));
          }
          h["patches"] = std::move(patches);
          return h;
        } else if constexpr (std::is_same_v<T, InferenceResponse>) {
          json h = detail::header("result");
          h["id"] = m.request_id;
          json results = json::array();
          for (const auto& r : m.results) results.push_back(detail::encode_result(r));
          h["results"] = std::move(results);
          return h;
        } else {
          json h = detail::header("error");
          if (m.request_id) h["id"] = *m.request_id;
          h["message"] = m.message;
          return h;
        }
      },
      msg);
  return j.dump();
}

/// Parses one payload. A missing or different "v" is a ProtocolError, except
/// for hello messages, whose version is returned for the caller to check.
inline Message decode_message(std::string_view payload) {
  using detail::json;
  json j;
  try {
    j = json::parse(payload);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed payload: ") + e.what());
  }
  if (!j.is_object()) throw ProtocolError("payload must be an object");
  std::optional<std::uint64_t> id;
  try {
    if (auto it = j.find("id"); it != j.end()) {
      if (!it->is_number_unsigned()) throw ProtocolError("request id must be a non-negative integer");
      id = it->get<std::uint64_t>();
    }
    if (!j.contains("v") || !j["v"].is_number_integer()) throw ProtocolError("missing protocol version", id);
    const int version = j["v"].get<int>();
    const auto type = j.at("type").get<std::string>();
    if (type == "hello") return Hello{version};
    if (version != kProtocolVersion)
      throw ProtocolError("protocol version mismatch: got " + std::to_string(version), id);
    if (type == "shutdown") return Shutdown{};
    if (type == "error") return ErrorReply{id, j.value("message", std::string())};
    if (!id) throw ProtocolError("missing request id");
    if (type == "infer") {
      InferenceRequest req;
      req.request_id = *id;
      req.task = parse_task(j.at("task").get<std::string>());
      req.patch_size = j.at("patch_size").get<std::int64_t>();
      for (const auto& p : j.at("patches")) {
        PatchRef ref;
        ref.slide_id = p.at("slide").get<std::string>();
        ref.window_id = p.value("window", std::int64_t{0});
        ref.x = p.at("x").get<double>();
        ref.y = p.at("y").get<double>();
        ref.size = p.at("size").get<std::int64_t>();
        if (auto it = p.find("raster"); it != p.end()) ref.raster = it->get<std::string>();
        req.patches.push_back(std::move(ref));
      }
      req.validate();
      return req;
    }
    if (type == "result") {
      InferenceResponse resp;
      resp.request_id = *id;
      for (const auto& r : j.at("results")) resp.results.push_back(detail::decode_result(r, *id));
      return resp;
    }
    throw ProtocolError("unknown message type: " + type, id);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed message: ") + e.what(), id);
  }
}

/// Length-prefixed frame around a payload.
inline std::string encode_frame(std::string_view payload) {
  if (payload.size() > kMaxFrameBytes) throw ProtocolError("frame too large");
  const auto n = std::uint32_t(payload.size());
  std::string out;
  out.reserve(payload.size() + 4);
  out += char((n >> 24) & 0xFF);
  out += char((n >> 16) & 0xFF);
  out += char((n >> 8) & 0xFF);
  out += char(n & 0xFF);
  out.append(payload);
  return out;
}

inline std::uint32_t decode_frame_length(std::array<unsigned char, 4> b) noexcept {
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace recas
