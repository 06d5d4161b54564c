#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "gfslt/descriptor.hpp"

using namespace gfslt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("gfslt_desc_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

FrameSequence make_frames(long n) {
  FrameSequence f;
  f.sample_id = "clip";
  f.frames = n;
  f.channels = 1;
  f.height = 2;
  f.width = 2;
  f.data.assign(static_cast<size_t>(n) * 4, 0.5f);
  return f;
}

// Fails the first `fail_count` describe calls with a transient error, then
// behaves like the mock.
class FlakyBackend : public DescriberBackend {
 public:
  explicit FlakyBackend(int fail_count) : fails_left_(fail_count) {}
  std::string name() const override { return "flaky"; }
  std::string model_id() const override { return "flaky-1"; }
  std::string describe(const std::string& sample_id, const Segment& segment,
                       const std::string& prompt) override {
    calls++;
    if (fails_left_-- > 0)
      throw BackendError("transient backend failure", segment.index);
    return inner_.describe(sample_id, segment, prompt);
  }
  std::string merge(const std::vector<std::string>& parts,
                    const std::string& prompt) override {
    return inner_.merge(parts, prompt);
  }
  std::atomic<long> calls{0};

 private:
  std::atomic<int> fails_left_;
  MockBackend inner_;
};

}  // namespace

TEST_CASE("segment_video is exhaustive over lengths 1..64") {
  for (long N = 1; N <= 64; ++N) {
    FrameSequence f = make_frames(N);
    auto segs = segment_video(f);
    long total = 0;
    for (size_t i = 0; i < segs.size(); ++i) {
      CHECK(segs[i].index == static_cast<int>(i));
      CHECK(segs[i].length == segs[i].frames.frames);
      if (i + 1 < segs.size()) CHECK(segs[i].length == kSegmentFrames);
      CHECK(segs[i].length >= 1);
      CHECK(segs[i].length <= kSegmentFrames);
      total += segs[i].length;
    }
    CHECK(total == N);
    CHECK(static_cast<long>(segs.size()) ==
          (N + kSegmentFrames - 1) / kSegmentFrames);
    // payload partition: first value of each segment matches the source
    long fsize = f.frame_size();
    long cursor = 0;
    for (const auto& s : segs) {
      CHECK(s.frames.data.size() ==
            static_cast<size_t>(s.length) * static_cast<size_t>(fsize));
      CHECK(s.frames.data.front() == f.data[cursor * fsize]);
      cursor += s.length;
    }
  }
  FrameSequence empty = make_frames(1);
  empty.frames = 0;
  empty.data.clear();
  CHECK_THROWS_AS(segment_video(empty), ValueError);
}

TEST_CASE("mock backend is deterministic per sample and segment") {
  MockBackend m1, m2;
  FrameSequence f = make_frames(4);
  auto segs = segment_video(f);
  Segment s1 = segs[0];
  Segment s2 = s1;
  s2.index = 1;
  std::string a = m1.describe("s1", s1, "p");
  CHECK(a == m2.describe("s1", s1, "p"));
  CHECK(a != m1.describe("s1", s2, "p"));
  CHECK(a != m1.describe("s2", s1, "p"));
  CHECK(m1.calls == 3);
}

TEST_CASE("ordinal merge") {
  CHECK(ordinal_merge({"one."}) == "one.");
  std::string two = ordinal_merge({"a.", "b."});
  CHECK(two.find("First,") != std::string::npos);
  CHECK(two.find("Finally,") != std::string::npos);
  std::string three = ordinal_merge({"a.", "b.", "c."});
  CHECK(three.find("Then,") != std::string::npos);
}

TEST_CASE("describe caching is idempotent with zero repeat backend calls") {
  TempDir d("cache");
  MockBackend backend;
  FrameSequence f = make_frames(40);  // three segments
  DescribeOptions opt;
  opt.cache_dir = d.path;

  DescribeStats st1;
  DescriptionDocument doc1 = describe_video(f, backend, opt, &st1);
  CHECK(doc1.segment_texts.size() == 3);
  CHECK(st1.backend_calls == 4);  // 3 describes + 1 merge
  CHECK(st1.cache_hits == 0);
  long calls_after_first = backend.calls.load();

  DescribeStats st2;
  DescriptionDocument doc2 = describe_video(f, backend, opt, &st2);
  CHECK(doc2.merged_text == doc1.merged_text);
  CHECK(doc2.segment_texts == doc1.segment_texts);
  CHECK(st2.backend_calls == 0);
  CHECK(st2.cache_hits == 4);
  CHECK(backend.calls.load() == calls_after_first);

  // a different prompt misses the cache
  DescribeOptions opt2 = opt;
  opt2.prompts.describe = "different prompt";
  DescribeStats st3;
  describe_video(f, backend, opt2, &st3);
  CHECK(st3.backend_calls > 0);
}

TEST_CASE("retry policy survives transient failures") {
  TempDir d("retry");
  FlakyBackend backend(2);  // first two calls fail
  FrameSequence f = make_frames(40);
  DescribeOptions opt;
  opt.cache_dir = d.path;
  opt.retry.max_attempts = 3;
  opt.retry.backoff_ms = 1;
  DescribeStats st;
  DescriptionDocument doc = describe_video(f, backend, opt, &st);
  CHECK(doc.segment_texts.size() == 3);
  // two retries happened somewhere
  long attempts = 0;
  for (long a : st.attempts_per_segment) attempts += a;
  CHECK(attempts == 5);  // 3 successes + 2 failed attempts
}

TEST_CASE("retries exhausted surfaces the backend error") {
  TempDir d("fail");
  FlakyBackend backend(100);
  FrameSequence f = make_frames(8);
  DescribeOptions opt;
  opt.cache_dir = d.path;
  opt.retry.max_attempts = 2;
  opt.retry.backoff_ms = 1;
  CHECK_THROWS_AS(describe_video(f, backend, opt, nullptr), BackendError);
}

TEST_CASE("concurrent describe produces the same document") {
  TempDir d1("ser"), d2("par");
  MockBackend b1, b2;
  FrameSequence f = make_frames(64);
  DescribeOptions o1, o2;
  o1.cache_dir = d1.path;
  o2.cache_dir = d2.path;
  o2.max_concurrency = 3;
  DescriptionDocument a = describe_video(f, b1, o1, nullptr);
  DescriptionDocument b = describe_video(f, b2, o2, nullptr);
  CHECK(a.segment_texts == b.segment_texts);
  CHECK(a.merged_text == b.merged_text);
}

TEST_CASE("prompt templates hash changes with content") {
  PromptTemplates a, b;
  b.describe += " extra";
  CHECK(a.hash() != b.hash());
  CHECK(a.hash() == PromptTemplates{}.hash());
}

TEST_CASE("http backend round trip against a local stub server") {
  httplib::Server srv;
  std::atomic<int> describe_hits{0};
  srv.Post("/describe", [&](const httplib::Request& req,
                            httplib::Response& res) {
    describe_hits++;
    auto j = nlohmann::json::parse(req.body);
    REQUIRE(j.contains("frames_b64"));
    REQUIRE(j.contains("prompt"));
    nlohmann::json out{
        {"text", "stub description of " + j.at("sample_id").get<std::string>() +
                     " segment " + std::to_string(j.at("segment_index").get<int>())}};
    res.set_content(out.dump(), "application/json");
  });
  srv.Post("/merge", [&](const httplib::Request& req, httplib::Response& res) {
    auto j = nlohmann::json::parse(req.body);
    std::string joined;
    for (const auto& p : j.at("texts")) {
      if (!joined.empty()) joined += ' ';
      joined += p.get<std::string>();
    }
    res.set_content(nlohmann::json{{"text", joined}}.dump(),
                    "application/json");
  });
  int port = srv.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  {
    TempDir d("http");
    HttpBackend backend("http://127.0.0.1:" + std::to_string(port), "", 5,
                        "stub-model");
    FrameSequence f = make_frames(20);
    DescribeOptions opt;
    opt.cache_dir = d.path;
    DescribeStats st;
    DescriptionDocument doc = describe_video(f, backend, opt, &st);
    REQUIRE(doc.segment_texts.size() == 2);
    CHECK(doc.segment_texts[0] == "stub description of clip segment 0");
    CHECK(doc.segment_texts[1] == "stub description of clip segment 1");
    CHECK(doc.merged_text ==
          "stub description of clip segment 0 stub description of clip "
          "segment 1");
    CHECK(describe_hits.load() == 2);

    // cached rerun performs no HTTP calls
    DescribeStats st2;
    describe_video(f, backend, opt, &st2);
    CHECK(describe_hits.load() == 2);
    CHECK(st2.backend_calls == 0);
  }

  srv.stop();
  th.join();
}

TEST_CASE("http backend reports server errors as BackendError") {
  httplib::Server srv;
  srv.Post("/describe", [](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("boom", "text/plain");
  });
  int port = srv.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  HttpBackend backend("http://127.0.0.1:" + std::to_string(port), "", 5,
                      "stub-model");
  FrameSequence f = make_frames(4);
  auto segs = segment_video(f);
  CHECK_THROWS_AS(backend.describe("s", segs[0], "p"), BackendError);

  srv.stop();
  th.join();
}
