#pragma once

// POSIX stream plumbing for the wire protocol: framed reads/writes with
// deadlines, child processes on pipes, and unix-domain sockets.

#include <array>
#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include "recas/protocol.hpp"

extern char** environ;

namespace recas {

/// Owning file descriptor.
class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) noexcept : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { reset(); }

  int get() const noexcept { return fd_; }
  explicit operator bool() const noexcept { return fd_ >= 0; }
  void reset() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void ignore_sigpipe() {
  static const bool once = [] {
    std::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)once;
}

inline std::string errno_message(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

inline void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EPIPE) throw BackendCrashed("backend stream closed");
      throw BackendError(errno_message("write failed"));
    }
    data.remove_prefix(std::size_t(n));
  }
}

inline void write_frame(int fd, std::string_view payload) { write_all(fd, encode_frame(payload)); }

enum class ReadStatus { ok, eof, timeout };

namespace detail {

// Reads exactly `n` bytes unless EOF or the deadline comes first; `got`
// reports how many bytes arrived.
inline ReadStatus read_exact(int fd, char* buf, std::size_t n, std::size_t& got,
                             std::optional<std::chrono::steady_clock::time_point> deadline) {
  got = 0;
  while (got < n) {
    int wait_ms = -1;
    if (deadline) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return ReadStatus::timeout;
      wait_ms = int(left.count());
    }
    pollfd p{fd, POLLIN, 0};
    const int r = ::poll(&p, 1, wait_ms);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw BackendError(errno_message("poll failed"));
    }
    if (r == 0) return ReadStatus::timeout;
    const ssize_t k = ::read(fd, buf + got, n - got);
    if (k < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      if (errno == ECONNRESET) return ReadStatus::eof;
      throw BackendError(errno_message("read failed"));
    }
    if (k == 0) return ReadStatus::eof;
    got += std::size_t(k);
  }
  return ReadStatus::ok;
}

}  // namespace detail

/// Result of a framed read: a payload, a clean end of stream (EOF on a frame
/// boundary), or a timeout before the first byte of a frame.
struct FrameRead {
  ReadStatus status = ReadStatus::ok;
  std::string payload;
};

/// Reads one frame. A stream that ends or stalls mid-frame is an error.
inline FrameRead read_frame(int fd, std::optional<std::chrono::milliseconds> timeout = std::nullopt) {
  std::optional<std::chrono::steady_clock::time_point> deadline;
  if (timeout) deadline = std::chrono::steady_clock::now() + *timeout;
  std::array<unsigned char, 4> head{};
  std::size_t got = 0;
  auto st = detail::read_exact(fd, reinterpret_cast<char*>(head.data()), 4, got, deadline);
  if (st == ReadStatus::eof && got == 0) return {ReadStatus::eof, {}};
  if (st == ReadStatus::timeout && got == 0) return {ReadStatus::timeout, {}};
  if (st == ReadStatus::eof) throw BackendCrashed("stream closed mid-frame");
  if (st == ReadStatus::timeout) throw TimeoutError("timed out mid-frame");
  const auto len = decode_frame_length(head);
  if (len > kMaxFrameBytes) throw ProtocolError("frame length " + std::to_string(len) + " exceeds limit");
  std::string payload(len, '\0');
  st = detail::read_exact(fd, payload.data(), len, got, deadline);
  if (st == ReadStatus::eof) throw BackendCrashed("stream closed mid-frame");
  if (st == ReadStatus::timeout) throw TimeoutError("timed out mid-frame");
  return {ReadStatus::ok, std::move(payload)};
}

/// A bidirectional byte stream: separate read and write descriptors (pipes)
/// or the same socket twice.
struct Stream {
  Fd in;   // we read from this
  Fd out;  // we write to this
  pid_t child = -1;

  Stream() = default;
  Stream(Stream&& o) noexcept : in(std::move(o.in)), out(std::move(o.out)), child(std::exchange(o.child, -1)) {}
  Stream& operator=(Stream&& o) noexcept {
    if (this != &o) {
      close();
      in = std::move(o.in);
      out = std::move(o.out);
      child = std::exchange(o.child, -1);
    }
    return *this;
  }
  ~Stream() { close(); }

  /// Half-closes the write side so the peer sees end of stream.
  void close_write() noexcept {
    if (out) ::shutdown(out.get(), SHUT_WR);
    out.reset();
  }

  void close() noexcept {
    close_write();
    in.reset();
    if (child > 0) {
      int status = 0;
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(child, &status, WNOHANG) != 0) {
          child = -1;
          return;
        }
        ::usleep(10000);
      }
      ::kill(child, SIGKILL);
      ::waitpid(child, &status, 0);
      child = -1;
    }
  }
};

/// Launches `argv` with its stdin/stdout connected to the returned stream.
inline Stream spawn_process(const std::vector<std::string>& argv) {
  if (argv.empty()) throw std::invalid_argument("empty command");
  ignore_sigpipe();
  int to_child[2], from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) throw BackendError(errno_message("pipe failed"));
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw BackendError(errno_message("pipe failed"));
  }
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_adddup2(&fa, to_child[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&fa, from_child[1], STDOUT_FILENO);
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  pid_t pid = -1;
  const int rc = ::posix_spawnp(&pid, args[0], &fa, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  ::close(to_child[0]);
  ::close(from_child[1]);
  if (rc != 0) {
    ::close(to_child[1]);
    ::close(from_child[0]);
    errno = rc;
    throw BackendError(errno_message("spawn failed"));
  }
  Stream s;
  s.in = Fd(from_child[0]);
  s.out = Fd(to_child[1]);
  s.child = pid;
  return s;
}

inline Stream connect_unix(const std::string& path) {
  ignore_sigpipe();
  Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) throw BackendError(errno_message("socket failed"));
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  if (path.size() >= sizeof(addr.sun_path)) throw std::invalid_argument("socket path too long");
  std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
  if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw BackendError(errno_message(("connect to " + path + " failed").c_str()));
  Stream s;
  s.out = Fd(::dup(fd.get()));
  s.in = std::move(fd);
  return s;
}

/// Connected pair of in-process streams, for tests and embedded servers.
inline std::pair<Stream, Stream> stream_pair() {
  ignore_sigpipe();
  int sv[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) throw BackendError(errno_message("socketpair failed"));
  Stream a, b;
  a.in = Fd(sv[0]);
  a.out = Fd(::dup(sv[0]));
  b.in = Fd(sv[1]);
  b.out = Fd(::dup(sv[1]));
  return {std::move(a), std::move(b)};
}

}  // namespace recas
