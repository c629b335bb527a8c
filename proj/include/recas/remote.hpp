#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "recas/backend.hpp"
#include "recas/protocol.hpp"
#include "recas/transport.hpp"

namespace recas {

struct RemoteOptions {
  std::chrono::milliseconds timeout{30000};
  std::chrono::milliseconds handshake_timeout{10000};
};

/// Client for an external backend. Requests are pipelined: any number of
/// threads may call infer() concurrently, each request is tagged with a
/// fresh id, and a reader thread routes responses back by id, so they may
/// complete in any order.
class RemoteBackend final : public Backend {
 public:
  RemoteBackend(Stream stream, RemoteOptions opts = {}) : stream_(std::move(stream)), opts_(opts) {
    handshake();
    reader_ = std::thread([this] { read_loop(); });
  }

  /// "exec:<cmd> [args...]" spawns a child on stdio; "unix:<path>" connects
  /// to a listening socket.
  static std::unique_ptr<RemoteBackend> connect(const std::string& endpoint, RemoteOptions opts = {}) {
    if (endpoint.rfind("exec:", 0) == 0) {
      std::vector<std::string> argv;
      std::string cur;
      for (char c : endpoint.substr(5)) {
        if (c == ' ') {
          if (!cur.empty()) argv.push_back(std::move(cur));
          cur.clear();
        } else {
          cur += c;
        }
      }
      if (!cur.empty()) argv.push_back(std::move(cur));
      return std::make_unique<RemoteBackend>(spawn_process(argv), opts);
    }
    if (endpoint.rfind("unix:", 0) == 0) return std::make_unique<RemoteBackend>(connect_unix(endpoint.substr(5)), opts);
    throw std::invalid_argument("unsupported backend endpoint: " + endpoint);
  }

  RemoteBackend(const RemoteBackend&) = delete;
  RemoteBackend& operator=(const RemoteBackend&) = delete;

  ~RemoteBackend() override {
    stopping_ = true;
    {
      const bool dead = !alive();
      std::lock_guard lk(write_mu_);
      try {
        if (stream_.out && !dead) write_frame(stream_.out.get(), encode_message(Shutdown{}));
      } catch (...) {
      }
      stream_.close_write();
    }
    if (reader_.joinable()) reader_.join();
    stream_.close();
  }

  InferenceResponse infer(const InferenceRequest& in) override {
    InferenceRequest req = in;
    req.request_id = next_id_++;
    req.validate();
    std::future<Message> fut;
    {
      std::lock_guard lk(pending_mu_);
      if (dead_) throw BackendCrashed("backend connection is closed: " + dead_reason_, req.request_id);
      std::promise<Message> prom;
      fut = prom.get_future();
      pending_.emplace(req.request_id, std::move(prom));
    }
    try {
      std::lock_guard lk(write_mu_);
      write_frame(stream_.out.get(), encode_message(req));
    } catch (const BackendError& e) {
      forget(req.request_id);
      throw BackendCrashed(e.what(), req.request_id);
    }
    if (fut.wait_for(opts_.timeout) != std::future_status::ready) {
      forget(req.request_id);
      throw TimeoutError("backend did not answer in time", req.request_id);
    }
    Message msg = fut.get();  // failures arrive already tagged with the id
    if (auto* err = std::get_if<ErrorReply>(&msg)) throw RemoteError("backend error: " + err->message, req.request_id);
    auto* resp = std::get_if<InferenceResponse>(&msg);
    if (!resp) throw ProtocolError("unexpected message type", req.request_id);
    if (resp->results.size() != req.patches.size())
      throw ProtocolError("response batch size does not match request", req.request_id);
    resp->request_id = in.request_id;
    return std::move(*resp);
  }

  bool alive() const {
    std::lock_guard lk(pending_mu_);
    return !dead_;
  }

 private:
  void handshake() {
    write_frame(stream_.out.get(), encode_message(Hello{}));
    const auto fr = read_frame(stream_.in.get(), opts_.handshake_timeout);
    if (fr.status == ReadStatus::timeout) throw TimeoutError("backend handshake timed out");
    if (fr.status == ReadStatus::eof) throw BackendCrashed("backend closed during handshake");
    const auto msg = decode_message(fr.payload);
    if (auto* h = std::get_if<Hello>(&msg)) {
      if (h->version != kProtocolVersion)
        throw ProtocolError("backend speaks protocol version " + std::to_string(h->version));
      return;
    }
    if (auto* err = std::get_if<ErrorReply>(&msg)) throw ProtocolError("handshake rejected: " + err->message);
    throw ProtocolError("unexpected handshake reply");
  }

  void forget(std::uint64_t id) {
    std::lock_guard lk(pending_mu_);
    pending_.erase(id);
  }

  template <class E>
  void fail_all(const std::string& why) {
    std::lock_guard lk(pending_mu_);
    dead_ = true;
    dead_reason_ = why;
    for (auto& [id, prom] : pending_) prom.set_exception(std::make_exception_ptr(E(why, id)));
    pending_.clear();
  }

  void read_loop() {
    try {
      for (;;) {
        const auto fr = read_frame(stream_.in.get(), std::chrono::milliseconds(200));
        if (fr.status == ReadStatus::timeout) {
          if (stopping_) {
            std::lock_guard lk(pending_mu_);
            if (pending_.empty()) return;
          }
          continue;
        }
        if (fr.status == ReadStatus::eof) {
          fail_all<BackendCrashed>("backend closed the connection");
          return;
        }
        Message msg = decode_message(fr.payload);
        std::optional<std::uint64_t> id;
        if (auto* r = std::get_if<InferenceResponse>(&msg)) id = r->request_id;
        else if (auto* e = std::get_if<ErrorReply>(&msg)) id = e->request_id;
        if (!id) {
          if (auto* e = std::get_if<ErrorReply>(&msg)) {
            fail_all<RemoteError>("backend error: " + e->message);
            return;
          }
          continue;
        }
        std::lock_guard lk(pending_mu_);
        // Late answers to timed-out requests have no waiter and are dropped.
        if (auto it = pending_.find(*id); it != pending_.end()) {
          it->second.set_value(std::move(msg));
          pending_.erase(it);
        }
      }
    } catch (const ProtocolError& e) {
      fail_all<ProtocolError>(e.what());
    } catch (const BackendCrashed& e) {
      fail_all<BackendCrashed>(e.what());
    } catch (const std::exception& e) {
      fail_all<BackendCrashed>(e.what());
    }
  }

  Stream stream_;
  RemoteOptions opts_;
  std::thread reader_;
  std::mutex write_mu_;
  mutable std::mutex pending_mu_;
  std::map<std::uint64_t, std::promise<Message>> pending_;
  std::atomic<std::uint64_t> next_id_{1};
  std::atomic<bool> stopping_{false};
  bool dead_ = false;
  std::string dead_reason_;
};

/// Serves `backend` on a stream until shutdown or end of stream. Requests are
/// handled one at a time. A malformed frame gets an error reply and ends the
/// session; a model failure gets an error reply tagged with the request id.
/// Returns the number of requests answered.
inline std::size_t serve(Backend& backend, int in_fd, int out_fd) {
  std::size_t answered = 0;
  bool greeted = false;
  for (;;) {
    FrameRead fr;
    try {
      fr = read_frame(in_fd);
    } catch (const ProtocolError& e) {
      write_frame(out_fd, encode_message(ErrorReply{std::nullopt, e.what()}));
      return answered;
    } catch (const BackendError&) {
      return answered;
    }
    if (fr.status != ReadStatus::ok) return answered;
    Message msg;
    try {
      msg = decode_message(fr.payload);
    } catch (const ProtocolError& e) {
      write_frame(out_fd, encode_message(ErrorReply{e.request_id(), e.what()}));
      return answered;
    }
    if (auto* h = std::get_if<Hello>(&msg)) {
      if (h->version != kProtocolVersion) {
        write_frame(out_fd, encode_message(ErrorReply{std::nullopt, "unsupported protocol version " +
                                                                         std::to_string(h->version)}));
        return answered;
      }
      greeted = true;
      write_frame(out_fd, encode_message(Hello{}));
      continue;
    }
    if (std::holds_alternative<Shutdown>(msg)) return answered;
    auto* req = std::get_if<InferenceRequest>(&msg);
    if (!req || !greeted) {
      write_frame(out_fd, encode_message(ErrorReply{std::nullopt, greeted ? "expected infer message" : "expected hello"}));
      return answered;
    }
    try {
      InferenceResponse resp = backend.infer(*req);
      resp.request_id = req->request_id;
      write_frame(out_fd, encode_message(resp));
    } catch (const std::exception& e) {
      write_frame(out_fd, encode_message(ErrorReply{req->request_id, e.what()}));
    }
    ++answered;
  }
}

}  // namespace recas
