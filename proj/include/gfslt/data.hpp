#pragma once

// Synthetic learnable dataset: each gesture renders a distinctive seeded
// visual motif translating across frames; a sample is a short sentence of
// gesture words, its rendered video, a templated temporally ordered
// description, and synthetic hand-teacher features.
//
// On-disk layout (all binaries raw little-endian float32, row-major):
//   <out>/dataset.json                     generation config
//   <out>/<split>/manifest.jsonl           one {"sample_id": ...} per line
//   <out>/<split>/<sample_id>/frames.bin   T x C x H x W
//   <out>/<split>/<sample_id>/hamer.bin    T x 288
//   <out>/<split>/<sample_id>/target.txt
//   <out>/<split>/<sample_id>/description.txt
//   <out>/<split>/<sample_id>/meta.json    shapes, dtype, gesture ids

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "gfslt/errors.hpp"
#include "gfslt/teacher.hpp"
#include "gfslt/types.hpp"
#include "gfslt/vocab.hpp"

namespace gfslt {

namespace fs = std::filesystem;
using nlohmann::json;

struct SyntheticDatasetConfig {
  int num_gestures = 20;
  int frames_per_gesture = 8;
  int sentence_min = 3;
  int sentence_max = 6;
  int train_size = 500;
  int val_size = 50;
  int test_size = 100;
  long channels = 3;
  long height = 64;
  long width = 64;
  double noise_std = 0.05;
  double teacher_jitter = 0.05;
  uint64_t seed = 7;

  void validate() const {
    if (num_gestures < 2)
      throw ConfigError("dataset: need at least 2 gestures to translate");
    if (train_size < 1 || val_size < 1 || test_size < 1)
      throw ConfigError("dataset: split sizes must be >= 1");
    if (sentence_min < 1 || sentence_min > sentence_max)
      throw ConfigError("dataset: invalid sentence length range");
    if (noise_std < 0.0) throw ConfigError("dataset: noise_std must be >= 0");
  }

  json to_json() const {
    return json{{"num_gestures", num_gestures},
                {"frames_per_gesture", frames_per_gesture},
                {"sentence_min", sentence_min},
                {"sentence_max", sentence_max},
                {"train_size", train_size},
                {"val_size", val_size},
                {"test_size", test_size},
                {"channels", channels},
                {"height", height},
                {"width", width},
                {"noise_std", noise_std},
                {"teacher_jitter", teacher_jitter},
                {"seed", seed}};
  }

  static SyntheticDatasetConfig from_json(const json& j) {
    SyntheticDatasetConfig c;
    c.num_gestures = j.at("num_gestures");
    c.frames_per_gesture = j.at("frames_per_gesture");
    c.sentence_min = j.at("sentence_min");
    c.sentence_max = j.at("sentence_max");
    c.train_size = j.at("train_size");
    c.val_size = j.at("val_size");
    c.test_size = j.at("test_size");
    c.channels = j.at("channels");
    c.height = j.at("height");
    c.width = j.at("width");
    c.noise_std = j.at("noise_std");
    c.teacher_jitter = j.at("teacher_jitter");
    c.seed = j.at("seed");
    return c;
  }
};

struct Sample {
  std::string sample_id;
  FrameSequence frames;
  std::string target_text;
  std::string description_text;
  HandTeacherFeatures teacher;
  std::vector<int> gestures;  // sentence as gesture ids
};

inline std::string gesture_word(int g) { return "g" + std::to_string(g); }

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

struct Blob {
  double cx, cy, sigma, vx, vy;
  double amp[3];
};

struct GestureMotif {
  Blob blobs[2];
};

inline GestureMotif gesture_motif(int g, uint64_t seed) {
  std::seed_seq sq{static_cast<uint64_t>(0xb10bu), seed,
                   static_cast<uint64_t>(g)};
  std::mt19937_64 rng(sq);
  std::uniform_real_distribution<double> pos(10.0, 54.0);
  std::uniform_real_distribution<double> sig(3.0, 8.0);
  std::uniform_real_distribution<double> vel(-3.0, 3.0);
  std::uniform_real_distribution<double> amp(0.3, 1.0);
  GestureMotif m;
  for (Blob& b : m.blobs) {
    b.cx = pos(rng);
    b.cy = pos(rng);
    b.sigma = sig(rng);
    b.vx = vel(rng);
    b.vy = vel(rng);
    for (double& a : b.amp) a = amp(rng);
  }
  return m;
}

// Noise-free frame of gesture `g` at within-gesture offset `k`; blob
// centers translate with the gesture's velocity and wrap around.
inline void render_gesture_frame(const GestureMotif& m, int k,
                                 const SyntheticDatasetConfig& cfg,
                                 float* out /* C*H*W */) {
  long C = cfg.channels, H = cfg.height, W = cfg.width;
  std::fill(out, out + C * H * W, 0.0f);
  for (const Blob& b : m.blobs) {
    double cx = std::fmod(b.cx + k * b.vx + 4.0 * W, double(W));
    double cy = std::fmod(b.cy + k * b.vy + 4.0 * H, double(H));
    double inv2s2 = 1.0 / (2.0 * b.sigma * b.sigma);
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double dx = std::min(std::abs(x - cx), W - std::abs(x - cx));
        double dy = std::min(std::abs(y - cy), H - std::abs(y - cy));
        double v = std::exp(-(dx * dx + dy * dy) * inv2s2);
        for (long c = 0; c < C && c < 3; ++c) {
          long idx = (c * H + y) * W + x;
          out[idx] = static_cast<float>(
              std::min(1.0, out[idx] + b.amp[c] * v));
        }
      }
  }
}

}  // namespace detail

// Renders a sentence of gestures into a FrameSequence (noise added by the
// caller so the noise-free frames stay comparable across samples).
inline FrameSequence render_sentence(const std::vector<int>& gestures,
                                     const SyntheticDatasetConfig& cfg) {
  FrameSequence v;
  v.channels = cfg.channels;
  v.height = cfg.height;
  v.width = cfg.width;
  v.frames = static_cast<long>(gestures.size()) * cfg.frames_per_gesture;
  v.data.resize(v.frames * v.frame_size());
  long f = 0;
  for (int g : gestures) {
    auto motif = detail::gesture_motif(g, cfg.seed);
    for (int k = 0; k < cfg.frames_per_gesture; ++k, ++f)
      detail::render_gesture_frame(motif, k, cfg,
                                   v.data.data() + f * v.frame_size());
  }
  return v;
}

inline std::string make_description(const std::vector<int>& gestures) {
  std::string out;
  for (size_t i = 0; i < gestures.size(); ++i) {
    if (i == 0)
      out += "First, ";
    else if (i + 1 == gestures.size())
      out += " Finally, ";
    else
      out += " Then, ";
    out += "both hands trace the " + gesture_word(gestures[i]) +
           " motion across the signing space.";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary IO
// ---------------------------------------------------------------------------

inline void write_f32(const fs::path& path, const float* data, size_t count) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(data),
          static_cast<std::streamsize>(count * sizeof(float)));
}

inline std::vector<float> read_f32(const fs::path& path, size_t expect) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("missing or unreadable file: " + path.string());
  size_t bytes = static_cast<size_t>(f.tellg());
  if (bytes != expect * sizeof(float))
    throw IoError("size mismatch in " + path.string() + ": " +
                  std::to_string(bytes) + " bytes, expected " +
                  std::to_string(expect * sizeof(float)));
  std::vector<float> out(expect);
  f.seekg(0);
  f.read(reinterpret_cast<char*>(out.data()),
         static_cast<std::streamsize>(bytes));
  return out;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

inline void write_sample(const fs::path& dir, const Sample& s) {
  fs::create_directories(dir);
  write_f32(dir / "frames.bin", s.frames.data.data(), s.frames.data.size());
  std::vector<float> teacher(s.teacher.per_frame.size());
  for (long i = 0; i < s.teacher.per_frame.rows(); ++i)
    for (long j = 0; j < s.teacher.per_frame.cols(); ++j)
      teacher[i * kTeacherDim + j] =
          static_cast<float>(s.teacher.per_frame(i, j));
  write_f32(dir / "hamer.bin", teacher.data(), teacher.size());
  std::ofstream(dir / "target.txt") << s.target_text << "\n";
  std::ofstream(dir / "description.txt") << s.description_text << "\n";
  json meta{{"sample_id", s.sample_id},
            {"dtype", "f4"},
            {"frames",
             {s.frames.frames, s.frames.channels, s.frames.height,
              s.frames.width}},
            {"teacher", {s.teacher.per_frame.rows(), kTeacherDim}},
            {"gestures", s.gestures}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
}

inline void generate_dataset(const SyntheticDatasetConfig& cfg,
                             const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "dataset.json") << cfg.to_json().dump(2) << "\n";

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> len(cfg.sentence_min, cfg.sentence_max);
  std::uniform_int_distribution<int> pick(0, cfg.num_gestures - 1);

  // Unique sentences so the splits stay disjoint by sentence.
  std::set<std::vector<int>> seen;
  auto draw_sentence = [&]() {
    for (int attempt = 0; attempt < 100000; ++attempt) {
      std::vector<int> s(len(rng));
      for (int& g : s) g = pick(rng);
      if (seen.insert(s).second) return s;
    }
    throw ConfigError("dataset: sentence space exhausted; enlarge range");
  };

  struct SplitSpec {
    const char* name;
    int size;
  };
  int idx = 0;
  for (SplitSpec split : {SplitSpec{"train", cfg.train_size},
                          SplitSpec{"val", cfg.val_size},
                          SplitSpec{"test", cfg.test_size}}) {
    fs::create_directories(out_dir / split.name);
    std::ofstream manifest(out_dir / split.name / "manifest.jsonl");
    std::set<int> coverage;
    for (int i = 0; i < split.size; ++i, ++idx) {
      Sample s;
      s.gestures = draw_sentence();
      // keep the gesture vocabulary fully covered in every split
      if (i + cfg.num_gestures >= split.size)
        for (int g = 0; g < cfg.num_gestures; ++g)
          if (!coverage.count(g) && !coverage.count(-1)) {
            std::vector<int> forced = s.gestures;
            forced[0] = g;
            if (!seen.count(forced)) {
              seen.insert(forced);
              s.gestures = forced;
            }
            break;
          }
      for (int g : s.gestures) coverage.insert(g);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "sample_%05d", idx);
      s.sample_id = buf;
      s.frames = render_sentence(s.gestures, cfg);
      s.frames.sample_id = s.sample_id;
      if (cfg.noise_std > 0.0) {
        std::normal_distribution<double> noise(0.0, cfg.noise_std);
        for (float& p : s.frames.data)
          p = static_cast<float>(
              std::clamp(double(p) + noise(rng), 0.0, 1.0));
      }
      std::vector<int> per_frame;
      for (int g : s.gestures)
        per_frame.insert(per_frame.end(), cfg.frames_per_gesture, g);
      s.teacher = synthetic_teacher(per_frame, cfg.num_gestures, cfg.seed,
                                    cfg.teacher_jitter);
      std::string text;
      for (size_t k = 0; k < s.gestures.size(); ++k) {
        if (k) text += ' ';
        text += gesture_word(s.gestures[k]);
      }
      s.target_text = text;
      s.description_text = make_description(s.gestures);
      write_sample(out_dir / split.name / s.sample_id, s);
      manifest << json{{"sample_id", s.sample_id}}.dump() << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

// Whole file as one whitespace-normalized line.
inline std::string read_text_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("missing text file: " + path.string());
  std::string line, all;
  while (std::getline(f, line)) {
    if (!all.empty()) all += ' ';
    all += line;
  }
  while (!all.empty() && all.back() == ' ') all.pop_back();
  return all;
}

inline Sample load_sample(const fs::path& dir) {
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw IoError("missing meta.json in " + dir.string());
  json meta = json::parse(mf);
  Sample s;
  s.sample_id = meta.at("sample_id");
  auto fshape = meta.at("frames");
  s.frames.frames = fshape[0];
  s.frames.channels = fshape[1];
  s.frames.height = fshape[2];
  s.frames.width = fshape[3];
  s.frames.sample_id = s.sample_id;
  try {
    s.frames.data = read_f32(dir / "frames.bin",
                             s.frames.frames * s.frames.frame_size());
  } catch (const IoError& e) {
    throw IoError("sample " + s.sample_id + ": " + e.what());
  }
  auto tshape = meta.at("teacher");
  long T = tshape[0];
  if (tshape[1] != kTeacherDim)
    throw ShapeError("sample " + s.sample_id + ": teacher width " +
                     std::to_string(long(tshape[1])) + " != 288");
  std::vector<float> raw;
  try {
    raw = read_f32(dir / "hamer.bin", T * kTeacherDim);
  } catch (const IoError& e) {
    throw IoError("sample " + s.sample_id + ": " + e.what());
  }
  s.teacher.per_frame.resize(T, kTeacherDim);
  for (long i = 0; i < T; ++i)
    for (long j = 0; j < kTeacherDim; ++j)
      s.teacher.per_frame(i, j) = raw[i * kTeacherDim + j];
  auto read_text = [&](const char* name) {
    std::ifstream f(dir / name);
    if (!f) throw IoError("sample " + s.sample_id + ": missing " + name);
    std::string line, all;
    while (std::getline(f, line)) {
      if (!all.empty()) all += ' ';
      all += line;
    }
    while (!all.empty() && all.back() == ' ') all.pop_back();
    return all;
  };
  s.target_text = read_text("target.txt");
  s.description_text = read_text("description.txt");
  if (meta.contains("gestures"))
    s.gestures = meta.at("gestures").get<std::vector<int>>();
  s.frames.validate();
  return s;
}

// Lazily yields samples of one split in manifest order.
class DatasetReader {
 public:
  DatasetReader(fs::path root, const std::string& split)
      : root_(std::move(root)), split_(split) {
    fs::path mpath = root_ / split / "manifest.jsonl";
    std::ifstream f(mpath);
    if (!f) throw IoError("missing manifest: " + mpath.string());
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      ids_.push_back(json::parse(line).at("sample_id"));
    }
    std::ifstream cf(root_ / "dataset.json");
    if (cf) config_ = SyntheticDatasetConfig::from_json(json::parse(cf));
  }

  size_t size() const { return ids_.size(); }
  const std::vector<std::string>& sample_ids() const { return ids_; }
  const SyntheticDatasetConfig& config() const { return config_; }

  Sample load(size_t i) const {
    return load_sample(root_ / split_ / ids_.at(i));
  }

  // Text-only accessors, for building vocabularies without decoding video.
  std::string target_text(size_t i) const {
    return read_text_file(root_ / split_ / ids_.at(i) / "target.txt");
  }
  std::string description_text(size_t i) const {
    return read_text_file(root_ / split_ / ids_.at(i) / "description.txt");
  }

  std::vector<Sample> load_all() const {
    std::vector<Sample> out;
    out.reserve(size());
    for (size_t i = 0; i < size(); ++i) out.push_back(load(i));
    return out;
  }

 private:
  fs::path root_;
  std::string split_;
  std::vector<std::string> ids_;
  SyntheticDatasetConfig config_;
};

// ---------------------------------------------------------------------------
// Augmentation: resize then crop, one crop offset per video
// ---------------------------------------------------------------------------

struct AugmentConfig {
  long resize_to = 72;
  long crop_to = 64;

  void validate() const {
    if (crop_to > resize_to)
      throw ConfigError("augment: crop larger than resized frame");
  }
};

enum class AugmentMode { kTrain, kEval };

namespace detail {

inline void bilinear_resize(const float* src, long H, long W, float* dst,
                            long H2, long W2) {
  for (long y = 0; y < H2; ++y) {
    double fy = H2 == 1 ? 0.0 : double(y) * (H - 1) / (H2 - 1);
    long y0 = static_cast<long>(fy);
    long y1 = std::min(y0 + 1, H - 1);
    double wy = fy - y0;
    for (long x = 0; x < W2; ++x) {
      double fx = W2 == 1 ? 0.0 : double(x) * (W - 1) / (W2 - 1);
      long x0 = static_cast<long>(fx);
      long x1 = std::min(x0 + 1, W - 1);
      double wx = fx - x0;
      double v = (1 - wy) * ((1 - wx) * src[y0 * W + x0] +
                             wx * src[y0 * W + x1]) +
                 wy * ((1 - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1]);
      dst[y * W2 + x] = static_cast<float>(v);
    }
  }
}

}  // namespace detail

inline FrameSequence augment(const FrameSequence& in, AugmentMode mode,
                             const AugmentConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  in.validate();
  long R = cfg.resize_to, S = cfg.crop_to;
  long ox, oy;
  if (mode == AugmentMode::kTrain) {
    std::uniform_int_distribution<long> off(0, R - S);
    ox = off(rng);
    oy = off(rng);
  } else {
    ox = (R - S) / 2;
    oy = (R - S) / 2;
  }
  FrameSequence out;
  out.sample_id = in.sample_id;
  out.frames = in.frames;
  out.channels = in.channels;
  out.height = S;
  out.width = S;
  out.data.resize(out.frames * out.frame_size());
  std::vector<float> resized(R * R);
  for (long t = 0; t < in.frames; ++t)
    for (long c = 0; c < in.channels; ++c) {
      const float* src =
          in.data.data() + (t * in.channels + c) * in.height * in.width;
      detail::bilinear_resize(src, in.height, in.width, resized.data(), R, R);
      float* dst = out.data.data() + (t * out.channels + c) * S * S;
      for (long y = 0; y < S; ++y)
        for (long x = 0; x < S; ++x)
          dst[y * S + x] = resized[(y + oy) * R + (x + ox)];
    }
  return out;
}

}  // namespace gfslt
