#pragma once

// Sign video descriptor: split a video into 16-frame segments, get a
// hand-motion description for each from a describer backend, and merge
// them into one temporally ordered description. Backend results are
// cached on disk keyed by (sample_id, segment index, prompt hash), with
// atomic writes, a retry policy, and a request rate limit.

#include "gfslt/errors.hpp"
#include "gfslt/types.hpp"

// keep after the Eigen-dependent headers: the socket headers pulled in
// here define macros (e.g. _res from resolv.h) that break Eigen internals
#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace gfslt {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr long kSegmentFrames = 16;

struct Segment {
  int index = 0;        // 0-based position in the video
  FrameSequence frames;
  long length = 0;      // in [1, 16]; only the last segment may be < 16
};

// Greedy fill of 16-frame buffers; a non-empty remainder becomes the
// final, shorter segment.
inline std::vector<Segment> segment_video(const FrameSequence& v) {
  if (v.frames < 1) throw ValueError("segment_video: empty video");
  v.validate();
  std::vector<Segment> out;
  long fsize = v.frame_size();
  for (long start = 0; start < v.frames; start += kSegmentFrames) {
    Segment s;
    s.index = static_cast<int>(out.size());
    s.length = std::min(kSegmentFrames, v.frames - start);
    s.frames.channels = v.channels;
    s.frames.height = v.height;
    s.frames.width = v.width;
    s.frames.frames = s.length;
    s.frames.sample_id = v.sample_id;
    s.frames.data.assign(v.data.begin() + start * fsize,
                         v.data.begin() + (start + s.length) * fsize);
    out.push_back(std::move(s));
  }
  return out;
}

struct DescriptionDocument {
  std::vector<std::string> segment_texts;
  std::string merged_text;
  std::string provenance;  // backend name + model id + prompt hash
  std::string sample_id;
};

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

struct PromptTemplates {
  std::string describe =
      "Describe the hand movements, hand shapes, and trajectories visible in "
      "this 16-frame sign language video segment. Focus only on the hands.";
  std::string merge =
      "Merge the following segment descriptions into a single coherent "
      "description of the whole video. Preserve the temporal order of events "
      "and remove redundant or irrelevant information.";

  static PromptTemplates from_files(const fs::path& describe_file,
                                    const fs::path& merge_file) {
    auto slurp = [](const fs::path& p) {
      std::ifstream f(p);
      if (!f) throw IoError("cannot read prompt file: " + p.string());
      std::string s((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
      return s;
    };
    PromptTemplates t;
    t.describe = slurp(describe_file);
    t.merge = slurp(merge_file);
    return t;
  }

  std::string hash() const { return hex64(fnv1a64(describe + "\x1f" + merge)); }
};

class DescriberBackend {
 public:
  virtual ~DescriberBackend() = default;
  virtual std::string name() const = 0;
  virtual std::string model_id() const = 0;
  virtual std::string describe(const std::string& sample_id,
                               const Segment& segment,
                               const std::string& prompt) = 0;
  virtual std::string merge(const std::vector<std::string>& texts,
                            const std::string& prompt) = 0;
};

// Joins texts with ordinal connectives, temporal order preserved.
inline std::string ordinal_merge(const std::vector<std::string>& texts) {
  if (texts.empty()) throw ValueError("merge: empty description list");
  if (texts.size() == 1) return texts.front();
  std::string out;
  for (size_t i = 0; i < texts.size(); ++i) {
    if (i == 0)
      out += "First, ";
    else if (i + 1 == texts.size())
      out += " Finally, ";
    else
      out += " Then, ";
    out += texts[i];
  }
  return out;
}

// Deterministic offline backend: output is a pure function of
// (sample_id, segment index).
class MockBackend : public DescriberBackend {
 public:
  std::string name() const override { return "mock"; }
  std::string model_id() const override { return "mock-describer-v1"; }

  std::string describe(const std::string& sample_id, const Segment& segment,
                       const std::string& /*prompt*/) override {
    calls++;
    uint64_t sig = fnv1a64(sample_id + "#" + std::to_string(segment.index));
    return "in segment " + std::to_string(segment.index) + " of " + sample_id +
           " the hands trace motion pattern " + hex64(sig).substr(0, 8) + ".";
  }

  std::string merge(const std::vector<std::string>& texts,
                    const std::string& /*prompt*/) override {
    calls++;
    return ordinal_merge(texts);
  }

  std::atomic<long> calls{0};
};

namespace detail {

inline std::string base64_encode(const unsigned char* data, size_t len) {
  static const char* tbl =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  for (size_t i = 0; i < len; i += 3) {
    uint32_t v = data[i] << 16;
    if (i + 1 < len) v |= data[i + 1] << 8;
    if (i + 2 < len) v |= data[i + 2];
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(i + 1 < len ? tbl[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < len ? tbl[v & 63] : '=');
  }
  return out;
}

}  // namespace detail

// POSTs base64 frames plus the prompt as JSON; expects {"text": ...}.
// Frames are uniformly strided down to at most 16 per request (a
// pass-through at our segment size).
class HttpBackend : public DescriberBackend {
 public:
  HttpBackend(std::string endpoint, std::string api_key = "",
              int timeout_sec = 30, std::string model = "remote-describer")
      : endpoint_(std::move(endpoint)),
        api_key_(std::move(api_key)),
        timeout_sec_(timeout_sec),
        model_(std::move(model)) {}

  std::string name() const override { return "http"; }
  std::string model_id() const override { return model_; }

  std::string describe(const std::string& sample_id, const Segment& segment,
                       const std::string& prompt) override {
    const FrameSequence& f = segment.frames;
    long stride = (f.frames + kSegmentFrames - 1) / kSegmentFrames;
    std::vector<float> sub;
    long kept = 0;
    for (long t = 0; t < f.frames; t += stride, ++kept)
      sub.insert(sub.end(), f.data.begin() + t * f.frame_size(),
                 f.data.begin() + (t + 1) * f.frame_size());
    json body{{"sample_id", sample_id},
              {"segment_index", segment.index},
              {"frames", {kept, f.channels, f.height, f.width}},
              {"frames_b64",
               detail::base64_encode(
                   reinterpret_cast<const unsigned char*>(sub.data()),
                   sub.size() * sizeof(float))},
              {"prompt", prompt}};
    return post("/describe", body);
  }

  std::string merge(const std::vector<std::string>& texts,
                    const std::string& prompt) override {
    return post("/merge", json{{"texts", texts}, {"prompt", prompt}});
  }

 private:
  std::string post(const std::string& path, const json& body) {
    httplib::Client cli(endpoint_);
    cli.set_connection_timeout(timeout_sec_);
    cli.set_read_timeout(timeout_sec_);
    httplib::Headers headers;
    if (!api_key_.empty())
      headers.emplace("Authorization", "Bearer " + api_key_);
    auto res = cli.Post(path, headers, body.dump(), "application/json");
    if (!res)
      throw BackendError("http backend: no response from " + endpoint_ + path,
                         body.value("segment_index", -1));
    if (res->status != 200)
      throw BackendError("http backend: status " + std::to_string(res->status),
                         body.value("segment_index", -1));
    json parsed = json::parse(res->body);
    if (!parsed.contains("text"))
      throw BackendError("http backend: response lacks 'text' field",
                         body.value("segment_index", -1));
    return parsed.at("text");
  }

  std::string endpoint_;
  std::string api_key_;
  int timeout_sec_;
  std::string model_;
};

struct RetryPolicy {
  int max_attempts = 3;
  int backoff_ms = 25;
  double backoff_multiplier = 2.0;
};

// Enforces a minimum spacing between requests; 0 disables the limit.
class RateLimiter {
 public:
  explicit RateLimiter(double requests_per_second = 0.0)
      : interval_(requests_per_second > 0.0
                      ? std::chrono::duration<double>(1.0 /
                                                      requests_per_second)
                      : std::chrono::duration<double>(0.0)) {}

  void acquire() {
    if (interval_.count() <= 0.0) return;
    std::unique_lock lock(mu_);
    auto now = std::chrono::steady_clock::now();
    if (next_ > now) {
      auto wait = next_ - now;
      next_ += std::chrono::duration_cast<std::chrono::steady_clock::duration>(
          interval_);
      lock.unlock();
      std::this_thread::sleep_for(wait);
    } else {
      next_ = now + std::chrono::duration_cast<
                        std::chrono::steady_clock::duration>(interval_);
    }
  }

 private:
  std::chrono::duration<double> interval_;
  std::chrono::steady_clock::time_point next_{};
  std::mutex mu_;
};

struct DescribeOptions {
  fs::path cache_dir;  // empty disables caching
  PromptTemplates prompts;
  RetryPolicy retry;
  double rate_limit_rps = 0.0;
  int max_concurrency = 1;
};

struct DescribeStats {
  long backend_calls = 0;
  long cache_hits = 0;
  std::vector<int> attempts_per_segment;
};

namespace detail {

inline fs::path cache_path(const fs::path& dir, const std::string& sample_id,
                           int segment_index, const std::string& prompt_hash) {
  uint64_t key = fnv1a64(sample_id + "\x1f" + std::to_string(segment_index) +
                         "\x1f" + prompt_hash);
  return dir / (hex64(key) + ".json");
}

inline void atomic_write(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cache: cannot write " + tmp.string());
    f << content;
  }
  fs::rename(tmp, path);
}

}  // namespace detail

// One description per segment, order preserved. Cached results are reused
// without touching the backend; transient failures are retried with
// exponential backoff, and exhausted retries surface as a BackendError
// carrying the segment index.
inline std::vector<std::string> describe_segments(
    const std::vector<Segment>& segments, const std::string& sample_id,
    DescriberBackend& backend, const DescribeOptions& opt,
    DescribeStats* stats = nullptr) {
  std::string phash = opt.prompts.hash();
  bool cache = !opt.cache_dir.empty();
  if (cache) fs::create_directories(opt.cache_dir);

  std::vector<std::string> texts(segments.size());
  std::vector<int> attempts(segments.size(), 0);
  std::atomic<long> calls{0};
  std::atomic<long> hits{0};
  RateLimiter limiter(opt.rate_limit_rps);
  std::mutex error_mu;
  std::exception_ptr first_error;

  auto work = [&](size_t i) {
    const Segment& seg = segments[i];
    fs::path cpath;
    if (cache) {
      cpath = detail::cache_path(opt.cache_dir, sample_id, seg.index, phash);
      std::ifstream f(cpath);
      if (f) {
        texts[i] = json::parse(f).at("text");
        hits++;
        return;
      }
    }
    int backoff = opt.retry.backoff_ms;
    for (int attempt = 1; attempt <= opt.retry.max_attempts; ++attempt) {
      attempts[i] = attempt;
      try {
        limiter.acquire();
        calls++;
        texts[i] = backend.describe(sample_id, seg, opt.prompts.describe);
        break;
      } catch (const std::exception& e) {
        if (attempt == opt.retry.max_attempts)
          throw BackendError("describe failed for segment " +
                                 std::to_string(seg.index) + " after " +
                                 std::to_string(attempt) +
                                 " attempts: " + e.what(),
                             seg.index);
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
        backoff = static_cast<int>(backoff * opt.retry.backoff_multiplier);
      }
    }
    if (cache) {
      json rec{{"sample_id", sample_id},
               {"segment_index", seg.index},
               {"prompt_hash", phash},
               {"text", texts[i]}};
      detail::atomic_write(cpath, rec.dump());
    }
  };

  int workers = std::max(1, opt.max_concurrency);
  if (workers == 1 || segments.size() <= 1) {
    for (size_t i = 0; i < segments.size(); ++i) work(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (size_t i = next++; i < segments.size(); i = next++) {
          try {
            work(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  if (stats) {
    stats->backend_calls += calls.load();
    stats->cache_hits += hits.load();
    stats->attempts_per_segment = std::move(attempts);
  }
  return texts;
}

inline std::string merge_descriptions(const std::vector<std::string>& texts,
                                      DescriberBackend& backend,
                                      const PromptTemplates& prompts) {
  if (texts.empty()) throw ValueError("merge_descriptions: empty input list");
  return backend.merge(texts, prompts.merge);
}

// Full per-sample pipeline: segment, describe, merge. The merged text is
// cached alongside the per-segment texts (keyed by the texts themselves)
// so an unchanged rerun performs zero backend calls.
inline DescriptionDocument describe_video(const FrameSequence& video,
                                          DescriberBackend& backend,
                                          const DescribeOptions& opt,
                                          DescribeStats* stats = nullptr) {
  DescriptionDocument doc;
  doc.sample_id = video.sample_id;
  auto segments = segment_video(video);
  doc.segment_texts =
      describe_segments(segments, video.sample_id, backend, opt, stats);

  bool cache = !opt.cache_dir.empty();
  fs::path mpath;
  if (cache) {
    std::string joined;
    for (const auto& t : doc.segment_texts) joined += t + "\x1f";
    mpath = detail::cache_path(opt.cache_dir, video.sample_id + "\x1fmerge",
                               -1, opt.prompts.hash() + hex64(fnv1a64(joined)));
    std::ifstream f(mpath);
    if (f) {
      doc.merged_text = json::parse(f).at("text");
      if (stats) stats->cache_hits++;
      doc.provenance =
          backend.name() + ":" + backend.model_id() + ":" + opt.prompts.hash();
      return doc;
    }
  }
  doc.merged_text = merge_descriptions(doc.segment_texts, backend, opt.prompts);
  if (stats) stats->backend_calls++;
  if (cache)
    detail::atomic_write(
        mpath, json{{"sample_id", video.sample_id},
                    {"text", doc.merged_text}}
                   .dump());
  doc.provenance =
      backend.name() + ":" + backend.model_id() + ":" + opt.prompts.hash();
  return doc;
}

}  // namespace gfslt
