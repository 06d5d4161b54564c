#pragma once

// Domain value types carried between pipeline stages.

#include <cstdint>
#include <string>
#include <vector>

#include "gfslt/ad.hpp"
#include "gfslt/errors.hpp"

namespace gfslt {

// A video: T frames of C x H x W floats in [0,1], stored row-major as
// frame-major contiguous data (t, c, h, w).
struct FrameSequence {
  std::vector<float> data;
  long frames = 0;
  long channels = 0;
  long height = 0;
  long width = 0;
  std::string sample_id;

  long frame_size() const { return channels * height * width; }

  float at(long t, long c, long h, long w) const {
    return data[((t * channels + c) * height + h) * width + w];
  }
  float& at(long t, long c, long h, long w) {
    return data[((t * channels + c) * height + h) * width + w];
  }

  void validate() const {
    if (frames < 1) throw ShapeError("FrameSequence: needs at least 1 frame");
    if (static_cast<long>(data.size()) != frames * frame_size())
      throw ShapeError("FrameSequence: buffer size mismatch");
  }
};

// A time- or token-indexed matrix of feature vectors with a validity mask.
struct FeatureSequence {
  ad::Mat values;             // L x dim
  std::vector<uint8_t> mask;  // per-row validity; empty means all valid
  std::string role;

  long length() const { return values.rows(); }
  long dim() const { return values.cols(); }

  std::vector<uint8_t> effective_mask() const {
    if (!mask.empty()) {
      if (static_cast<long>(mask.size()) != values.rows())
        throw ShapeError("FeatureSequence: mask length mismatch");
      return mask;
    }
    return std::vector<uint8_t>(values.rows(), 1);
  }
};

// Integer token ids plus the detokenized text.
struct TokenSequence {
  std::vector<int> ids;
  std::string text;
};

}  // namespace gfslt
