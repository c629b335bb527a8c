#include <gtest/gtest.h>

#include <unistd.h>

#include <thread>

#include "recas/protocol.hpp"
#include "recas/rng.hpp"
#include "recas/transport.hpp"

using namespace recas;

namespace {

std::string random_string(Rng& rng, std::size_t max_len) {
  std::string s;
  const auto n = rng.below(max_len + 1);
  for (std::uint64_t i = 0; i < n; ++i) s += char(32 + rng.below(95));
  return s;
}

Message random_message(Rng& rng) {
  switch (rng.below(5)) {
    case 0: return Hello{};
    case 1: return Shutdown{};
    case 2: {
      InferenceRequest r;
      r.request_id = rng.next_u64() >> 12;
      r.task = Task(rng.below(3));
      r.patch_size = std::int64_t(1 + rng.below(1024));
      const auto n = 1 + rng.below(6);
      for (std::uint64_t i = 0; i < n; ++i) {
        PatchRef p{random_string(rng, 12), std::int64_t(rng.below(100000)), rng.uniform(0, 1e5), rng.uniform(0, 1e5),
                   r.patch_size, std::nullopt};
        if (rng.bernoulli(0.3)) p.raster = base64_encode(random_string(rng, 40));
        r.patches.push_back(p);
      }
      return r;
    }
    case 3: {
      InferenceResponse r;
      r.request_id = rng.next_u64() >> 12;
      const auto n = rng.below(5);
      for (std::uint64_t i = 0; i < n; ++i) {
        PatchResult pr;
        if (rng.bernoulli(0.5)) {
          const auto nd = rng.below(4);
          for (std::uint64_t k = 0; k < nd; ++k)
            pr.detections.push_back(make_detection({rng.uniform(0, 1e4), rng.uniform(0, 1e4)}, rng.uniform(1, 80),
                                                   rng.uniform(1, 80), rng.uniform(),
                                                   rng.bernoulli(0.5) ? ObjectClass::mitosis : ObjectClass::nonmitosis));
        } else {
          const double p = rng.uniform();
          pr.class_scores = {1 - p, p};
          pr.dx = rng.uniform(-20, 20);
          pr.dy = rng.uniform(-20, 20);
        }
        if (rng.bernoulli(0.3)) pr.embedding = std::vector<double>{rng.uniform(), rng.uniform(), rng.normal()};
        r.results.push_back(pr);
      }
      return r;
    }
    default: {
      ErrorReply e;
      if (rng.bernoulli(0.5)) e.request_id = rng.below(1000);
      e.message = random_string(rng, 30);
      return e;
    }
  }
}

}  // namespace

TEST(Base64, KnownVectors) {
  EXPECT_EQ(base64_encode(""), "");
  EXPECT_EQ(base64_encode("f"), "Zg==");
  EXPECT_EQ(base64_encode("fo"), "Zm8=");
  EXPECT_EQ(base64_encode("foo"), "Zm9v");
  EXPECT_EQ(base64_encode("foobar"), "Zm9vYmFy");
  EXPECT_EQ(base64_decode("Zm9vYg=="), "foob");
  EXPECT_THROW(base64_decode("Zm9"), ProtocolError);
  EXPECT_THROW(base64_decode("Zm9*"), ProtocolError);
  EXPECT_THROW(base64_decode("Z=9v"), ProtocolError);
}

TEST(Base64, RoundTripBinary) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    std::string s;
    for (std::uint64_t i = 0, n = rng.below(300); i < n; ++i) s += char(rng.below(256));
    EXPECT_EQ(base64_decode(base64_encode(s)), s);
  }
}

TEST(Frame, BigEndianLength) {
  const auto f = encode_frame("abc");
  ASSERT_EQ(f.size(), 7u);
  EXPECT_EQ(f.substr(0, 4), std::string("\0\0\0\3", 4));
  EXPECT_EQ(decode_frame_length({0x01, 0x02, 0x03, 0x04}), 0x01020304u);
}

TEST(Codec, GoldenPayloads) {
  EXPECT_EQ(encode_message(Hello{}), R"({"type":"hello","v":1})");
  EXPECT_EQ(encode_message(Shutdown{}), R"({"type":"shutdown","v":1})");
  InferenceRequest r{7, Task::detect, 512, {{"s1", 3, 0, 512, 512, std::nullopt}}};
  EXPECT_EQ(encode_message(r),
            R"({"id":7,"patch_size":512,"patches":[{"size":512,"slide":"s1","window":3,"x":0.0,"y":512.0}],)"
            R"("task":"detect","type":"infer","v":1})");
  PatchResult pr;
  pr.class_scores = {0.25, 0.75};
  pr.dx = 1.5;
  pr.dy = -2;
  EXPECT_EQ(encode_message(InferenceResponse{7, {pr}}),
            R"({"id":7,"results":[{"dx":1.5,"dy":-2.0,"scores":[0.25,0.75]}],"type":"result","v":1})");
}

TEST(Codec, RoundTripFuzz) {
  Rng rng(2718);
  for (int t = 0; t < 3000; ++t) {
    const Message m = random_message(rng);
    const auto payload = encode_message(m);
    const Message back = decode_message(payload);
    ASSERT_EQ(back, m) << payload;
    ASSERT_EQ(encode_message(back), payload);
  }
}

TEST(Codec, VersionMandatory) {
  EXPECT_THROW(decode_message(R"({"type":"shutdown"})"), ProtocolError);
  EXPECT_THROW(decode_message(R"({"type":"shutdown","v":"1"})"), ProtocolError);
  EXPECT_THROW(decode_message(R"({"type":"shutdown","v":2})"), ProtocolError);
  // hello reports its version for the caller to reject
  const auto h = decode_message(R"({"type":"hello","v":9})");
  EXPECT_EQ(std::get<Hello>(h).version, 9);
}

TEST(Codec, RejectsMalformed) {
  for (const char* bad : {"", "[]", "{", "null", R"({"v":1})", R"({"v":1,"type":"nope","id":1})",
                          R"({"v":1,"type":"infer","id":1,"task":"detect","patch_size":512,"patches":[]})",
                          R"({"v":1,"type":"infer","id":1,"task":"fly","patch_size":5,"patches":[{"slide":"a","x":0,"y":0,"size":5}]})",
                          R"({"v":1,"type":"infer","id":1,"task":"detect","patch_size":5,"patches":[{"slide":"a","x":0,"y":0,"size":6}]})",
                          R"({"v":1,"type":"infer","task":"detect","patch_size":5,"patches":[{"slide":"a","x":0,"y":0,"size":5}]})",
                          R"({"v":1,"type":"result","id":2,"results":[{"scores":[0.5,1.5]}]})",
                          R"({"v":1,"type":"result","id":2,"results":[{"detections":[[1,2,3]]}]})",
                          R"({"v":1,"type":"result","id":2,"results":[{"detections":[[1,2,0,4,"mitosis",0.5]]}]})",
                          R"({"v":1,"type":"result","id":2,"results":[{"detections":[[1,2,3,4,"dog",0.5]]}]})",
                          R"({"v":1,"type":"result","id":-2,"results":[]})"})
    EXPECT_THROW(decode_message(bad), ProtocolError) << bad;
}

TEST(Codec, ErrorsCarryRequestId) {
  try {
    decode_message(R"({"v":1,"type":"result","id":42,"results":[{"scores":[2]}]})");
    FAIL();
  } catch (const ProtocolError& e) {
    EXPECT_EQ(e.request_id(), 42u);
  }
}

TEST(Codec, ByteFuzzNeverEscapesProtocolError) {
  Rng rng(31337);
  const auto seed_payload = encode_message(InferenceRequest{1, Task::adjust, 128, {{"s", 0, 1, 2, 128, "QUJD"}}});
  for (int t = 0; t < 5000; ++t) {
    std::string p = seed_payload;
    const auto edits = 1 + rng.below(6);
    for (std::uint64_t e = 0; e < edits; ++e) {
      const auto pos = rng.below(p.size());
      switch (rng.below(3)) {
        case 0: p[pos] = char(rng.below(256)); break;
        case 1: p.erase(pos, 1 + rng.below(4)); break;
        default: p.insert(pos, 1, char(32 + rng.below(95)));
      }
      if (p.empty()) p = "{";
    }
    try {
      (void)decode_message(p);
    } catch (const ProtocolError&) {
    }
  }
}

TEST(Transport, FramesOverPipe) {
  int fds[2];
  ASSERT_EQ(::pipe(fds), 0);
  Fd r(fds[0]), w(fds[1]);
  std::thread writer([&] {
    for (int i = 0; i < 100; ++i) write_frame(w.get(), std::string(std::size_t(i * 37), char('a' + i % 26)));
    w.reset();
  });
  for (int i = 0; i < 100; ++i) {
    const auto f = read_frame(r.get());
    ASSERT_EQ(f.status, ReadStatus::ok);
    ASSERT_EQ(f.payload.size(), std::size_t(i * 37));
  }
  EXPECT_EQ(read_frame(r.get()).status, ReadStatus::eof);
  writer.join();
}

TEST(Transport, TruncatedAndOversizedFrames) {
  {
    int fds[2];
    ASSERT_EQ(::pipe(fds), 0);
    Fd r(fds[0]), w(fds[1]);
    write_all(w.get(), std::string("\0\0\0\x10" "abc", 7));
    w.reset();
    EXPECT_THROW(read_frame(r.get()), BackendCrashed);
  }
  {
    int fds[2];
    ASSERT_EQ(::pipe(fds), 0);
    Fd r(fds[0]), w(fds[1]);
    write_all(w.get(), std::string("\x7f\xff\xff\xff", 4));
    EXPECT_THROW(read_frame(r.get()), ProtocolError);
  }
  {
    int fds[2];
    ASSERT_EQ(::pipe(fds), 0);
    Fd r(fds[0]), w(fds[1]);
    EXPECT_EQ(read_frame(r.get(), std::chrono::milliseconds(50)).status, ReadStatus::timeout);
    write_all(w.get(), std::string("\0\0", 2));
    EXPECT_THROW(read_frame(r.get(), std::chrono::milliseconds(50)), TimeoutError);
  }
}
