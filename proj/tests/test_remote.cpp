#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <thread>

#include "recas/remote.hpp"
#include "recas/synth.hpp"

using namespace recas;
using namespace std::chrono_literals;

namespace {

SyntheticSlide small_slide(std::uint64_t seed) {
  SynthConfig c;
  c.dims = {4096, 4096};
  c.positives_per_mm2 = 40;
  c.rng_seed = seed;
  return generate(c);
}

OracleBackend oracle_for(const SyntheticSlide& s, std::uint64_t seed) {
  OracleSuite suite;
  suite.seed(seed);
  OracleBackend b(suite);
  b.add_slide("s", SlideTruth(s.dims, s.annotations));
  return b;
}

InferenceRequest detect_request(std::int64_t x, std::int64_t y, std::int64_t id = 0) {
  return InferenceRequest{0, Task::detect, 512, {{"s", id, double(x), double(y), 512, std::nullopt}}};
}

// Reads the client hello and answers it; returns false on EOF.
bool accept_hello(Stream& s, int version = kProtocolVersion) {
  const auto fr = read_frame(s.in.get());
  if (fr.status != ReadStatus::ok) return false;
  write_frame(s.out.get(), R"({"type":"hello","v":)" + std::to_string(version) + "}");
  return true;
}

std::uint64_t read_request_id(Stream& s) {
  const auto fr = read_frame(s.in.get());
  return std::get<InferenceRequest>(decode_message(fr.payload)).request_id;
}

}  // namespace

TEST(Remote, MatchesInProcessBackend) {
  const auto slide = small_slide(1);
  auto server_backend = oracle_for(slide, 5);
  auto local = oracle_for(slide, 5);
  auto [client_side, server_side] = stream_pair();
  std::size_t answered = 0;
  std::thread server([&, s = std::move(server_side)]() mutable { answered = serve(server_backend, s.in.get(), s.out.get()); });
  {
    RemoteBackend remote(std::move(client_side));
    for (std::int64_t y = 0; y < 4096; y += 512)
      for (std::int64_t x = 0; x < 4096; x += 512) {
        const auto req = detect_request(x, y);
        EXPECT_EQ(remote.infer(req).results, local.infer(req).results);
      }
    InferenceRequest cls{0, Task::classify, 64, {{"s", -1, 100, 100, 64, std::nullopt}, {"s", -1, 900, 30, 64, std::nullopt}}};
    EXPECT_EQ(remote.infer(cls).results, local.infer(cls).results);
  }
  server.join();
  EXPECT_EQ(answered, 65u);
}

TEST(Remote, ConcurrentCallersGetTheirOwnAnswers) {
  const auto slide = small_slide(2);
  auto server_backend = oracle_for(slide, 9);
  auto local = oracle_for(slide, 9);
  auto [client_side, server_side] = stream_pair();
  std::thread server([&, s = std::move(server_side)]() mutable { serve(server_backend, s.in.get(), s.out.get()); });
  {
    RemoteBackend remote(std::move(client_side));
    std::vector<std::thread> callers;
    std::atomic<int> mismatches{0};
    for (int t = 0; t < 8; ++t)
      callers.emplace_back([&, t] {
        for (int i = 0; i < 20; ++i) {
          const auto req = detect_request(512 * ((t + i) % 7), 512 * (i % 7), t * 100 + i);
          if (remote.infer(req).results != local.infer(req).results) ++mismatches;
        }
      });
    for (auto& c : callers) c.join();
    EXPECT_EQ(mismatches.load(), 0);
  }
  server.join();
}

TEST(Remote, RoutesOutOfOrderResponses) {
  auto [client_side, server_side] = stream_pair();
  std::thread server([s = std::move(server_side)]() mutable {
    if (!accept_hello(s)) return;
    const auto a = read_request_id(s);
    const auto b = read_request_id(s);
    PatchResult ra, rb;
    ra.class_scores = {0.9, 0.1};
    rb.class_scores = {0.2, 0.8};
    write_frame(s.out.get(), encode_message(InferenceResponse{b, {rb}}));
    write_frame(s.out.get(), encode_message(InferenceResponse{a, {ra}}));
    while (read_frame(s.in.get()).status == ReadStatus::ok) {
    }
  });
  {
    RemoteBackend remote(std::move(client_side));
    const InferenceRequest req{0, Task::classify, 64, {{"s", -1, 10, 10, 64, std::nullopt}}};
    InferenceResponse first;
    std::thread t1([&] { first = remote.infer(req); });
    std::this_thread::sleep_for(50ms);
    const auto second = remote.infer(req);
    t1.join();
    EXPECT_DOUBLE_EQ(first.results[0].class_scores[1], 0.1);
    EXPECT_DOUBLE_EQ(second.results[0].class_scores[1], 0.8);
  }
  server.join();
}

TEST(Remote, TimeoutCarriesRequestId) {
  auto [client_side, server_side] = stream_pair();
  std::thread server([s = std::move(server_side)]() mutable {
    if (!accept_hello(s)) return;
    while (read_frame(s.in.get()).status == ReadStatus::ok) {
    }
  });
  {
    RemoteBackend remote(std::move(client_side), RemoteOptions{150ms, 1000ms});
    try {
      remote.infer(detect_request(0, 0));
      FAIL() << "expected a timeout";
    } catch (const TimeoutError& e) {
      ASSERT_TRUE(e.request_id().has_value());
      EXPECT_EQ(*e.request_id(), 1u);
    }
    EXPECT_TRUE(remote.alive());
  }
  server.join();
}

TEST(Remote, MalformedResponseIsProtocolError) {
  auto [client_side, server_side] = stream_pair();
  std::thread server([s = std::move(server_side)]() mutable {
    if (!accept_hello(s)) return;
    read_request_id(s);
    write_frame(s.out.get(), "{not json");
    while (read_frame(s.in.get()).status == ReadStatus::ok) {
    }
  });
  {
    RemoteBackend remote(std::move(client_side));
    EXPECT_THROW(remote.infer(detect_request(0, 0)), ProtocolError);
    EXPECT_FALSE(remote.alive());
    EXPECT_THROW(remote.infer(detect_request(0, 0)), BackendCrashed);
  }
  server.join();
}

TEST(Remote, WrongBatchSizeIsProtocolError) {
  auto [client_side, server_side] = stream_pair();
  std::thread server([s = std::move(server_side)]() mutable {
    if (!accept_hello(s)) return;
    const auto id = read_request_id(s);
    write_frame(s.out.get(), encode_message(InferenceResponse{id, {}}));
    while (read_frame(s.in.get()).status == ReadStatus::ok) {
    }
  });
  {
    RemoteBackend remote(std::move(client_side));
    EXPECT_THROW(remote.infer(detect_request(0, 0)), ProtocolError);
  }
  server.join();
}

TEST(Remote, PeerExitIsBackendCrashed) {
  auto [client_side, server_side] = stream_pair();
  std::thread server([s = std::move(server_side)]() mutable {
    if (!accept_hello(s)) return;
    read_request_id(s);
    s.close();
  });
  RemoteBackend remote(std::move(client_side));
  try {
    remote.infer(detect_request(0, 0));
    FAIL();
  } catch (const BackendCrashed& e) {
    EXPECT_EQ(e.request_id(), std::optional<std::uint64_t>(1));
  }
  server.join();
}

TEST(Remote, ModelFailureIsRemoteErrorAndConnectionSurvives) {
  const auto slide = small_slide(3);
  auto server_backend = oracle_for(slide, 1);
  auto [client_side, server_side] = stream_pair();
  std::thread server([&, s = std::move(server_side)]() mutable { serve(server_backend, s.in.get(), s.out.get()); });
  {
    RemoteBackend remote(std::move(client_side));
    InferenceRequest bad{0, Task::detect, 512, {{"missing", 0, 0, 0, 512, std::nullopt}}};
    try {
      remote.infer(bad);
      FAIL();
    } catch (const RemoteError& e) {
      EXPECT_TRUE(e.request_id().has_value());
      EXPECT_NE(std::string(e.what()).find("unknown slide"), std::string::npos);
    }
    EXPECT_NO_THROW(remote.infer(detect_request(0, 0)));
  }
  server.join();
}

TEST(Remote, HandshakeRejectsOtherVersions) {
  auto [client_side, server_side] = stream_pair();
  std::thread server([s = std::move(server_side)]() mutable { accept_hello(s, 2); });
  EXPECT_THROW(RemoteBackend(std::move(client_side)), ProtocolError);
  server.join();
}

TEST(Serve, RejectsClientWithOtherVersion) {
  const auto slide = small_slide(4);
  auto backend = oracle_for(slide, 1);
  auto [client, server_side] = stream_pair();
  std::thread server([&, s = std::move(server_side)]() mutable { EXPECT_EQ(serve(backend, s.in.get(), s.out.get()), 0u); });
  write_frame(client.out.get(), R"({"type":"hello","v":2})");
  const auto reply = decode_message(read_frame(client.in.get()).payload);
  EXPECT_TRUE(std::holds_alternative<ErrorReply>(reply));
  EXPECT_EQ(read_frame(client.in.get()).status, ReadStatus::eof);
  server.join();
}

TEST(Serve, MalformedFrameGetsErrorReply) {
  const auto slide = small_slide(4);
  auto backend = oracle_for(slide, 1);
  auto [client, server_side] = stream_pair();
  std::thread server([&, s = std::move(server_side)]() mutable { serve(backend, s.in.get(), s.out.get()); });
  write_frame(client.out.get(), encode_message(Hello{}));
  EXPECT_TRUE(std::holds_alternative<Hello>(decode_message(read_frame(client.in.get()).payload)));
  write_frame(client.out.get(), R"({"v":1,"type":"infer","id":12,"task":"detect"})");
  const auto reply = decode_message(read_frame(client.in.get()).payload);
  ASSERT_TRUE(std::holds_alternative<ErrorReply>(reply));
  EXPECT_EQ(std::get<ErrorReply>(reply).request_id, std::optional<std::uint64_t>(12));
  server.join();
}

TEST(Remote, ExecTransportAgainstCli) {
  const auto slide = small_slide(6);
  char path[] = "/tmp/recas_remote_XXXXXX";
  const int fd = ::mkstemp(path);
  ASSERT_GE(fd, 0);
  ::close(fd);
  {
    std::ofstream os(path);
    write_annotations(os, "s", slide.dims, slide.annotations);
  }
  auto local = oracle_for(slide, 21);
  {
    auto remote = RemoteBackend::connect(std::string("exec:") + RECAS_CLI_PATH + " serve --oracle noisy --seed 21 -a " + path);
    for (std::int64_t x = 0; x < 4096; x += 512) {
      const auto req = detect_request(x, 1024);
      EXPECT_EQ(remote->infer(req).results, local.infer(req).results);
    }
  }
  std::remove(path);
}

TEST(Remote, ExecOfMissingProgramFails) {
  EXPECT_THROW(RemoteBackend::connect("exec:/nonexistent/backend"), BackendError);
  EXPECT_THROW(RemoteBackend::connect("tcp:localhost"), std::invalid_argument);
}
