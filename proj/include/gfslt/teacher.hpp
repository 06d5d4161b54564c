#pragma once

// Hand-pose teacher features: per frame, 30 hand-joint rotation matrices
// (2 hands x 15 joints) plus 2 global-orientation rotations, flattened
// row-major into a 288-wide vector. A seeded synthetic oracle stands in
// for the real hand-recovery model.

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gfslt/ad.hpp"
#include "gfslt/errors.hpp"

namespace gfslt {

inline constexpr int kHandPoseBlocks = 30;   // 2 hands x 15 joints
inline constexpr int kOrientationBlocks = 2;
inline constexpr int kTeacherBlocks = kHandPoseBlocks + kOrientationBlocks;
inline constexpr int kTeacherDim = kTeacherBlocks * 9;  // 270 + 18 = 288

using Rotation = Eigen::Matrix3d;

inline bool is_rotation(const Rotation& r, double tol) {
  return (r.transpose() * r - Rotation::Identity()).cwiseAbs().maxCoeff() <=
             tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

struct HandTeacherFeatures {
  ad::Mat per_frame;  // T x 288

  long frames() const { return per_frame.rows(); }

  void validate(double tol = 1e-5) const {
    if (per_frame.cols() != kTeacherDim)
      throw ShapeError("teacher features must be " +
                       std::to_string(kTeacherDim) + " wide, got " +
                       std::to_string(per_frame.cols()));
    for (long t = 0; t < per_frame.rows(); ++t)
      for (int b = 0; b < kTeacherBlocks; ++b) {
        Rotation r;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) r(i, j) = per_frame(t, b * 9 + i * 3 + j);
        if (!is_rotation(r, tol))
          throw ValueError("teacher block " + std::to_string(b) + " at frame " +
                           std::to_string(t) + " is not a rotation matrix");
      }
  }
};

// Row-major flatten of 30 pose rotations followed by 2 orientation
// rotations into one 288-vector.
inline Eigen::RowVectorXd hamer_flatten(const std::vector<Rotation>& pose,
                                        const std::vector<Rotation>& orient,
                                        bool validate = true) {
  if (pose.size() != kHandPoseBlocks || orient.size() != kOrientationBlocks)
    throw ShapeError("hamer_flatten: expected 30 pose + 2 orientation blocks");
  Eigen::RowVectorXd out(kTeacherDim);
  auto put = [&](const Rotation& r, int block) {
    if (validate && !is_rotation(r, 1e-5))
      throw ValueError("hamer_flatten: block " + std::to_string(block) +
                       " is not a rotation matrix");
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out(block * 9 + i * 3 + j) = r(i, j);
  };
  for (int b = 0; b < kHandPoseBlocks; ++b) put(pose[b], b);
  for (int b = 0; b < kOrientationBlocks; ++b)
    put(orient[b], kHandPoseBlocks + b);
  return out;
}

inline void hamer_unflatten(const Eigen::RowVectorXd& v,
                            std::vector<Rotation>& pose,
                            std::vector<Rotation>& orient) {
  if (v.size() != kTeacherDim)
    throw ShapeError("hamer_unflatten: expected a 288-vector");
  pose.resize(kHandPoseBlocks);
  orient.resize(kOrientationBlocks);
  for (int b = 0; b < kTeacherBlocks; ++b) {
    Rotation r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = v(b * 9 + i * 3 + j);
    if (b < kHandPoseBlocks)
      pose[b] = r;
    else
      orient[b - kHandPoseBlocks] = r;
  }
}

namespace detail {

inline Eigen::Vector3d random_unit_axis(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Vector3d a;
  do {
    a << n(rng), n(rng), n(rng);
  } while (a.norm() < 1e-8);
  return a.normalized();
}

}  // namespace detail

// The fixed set of 32 rotations a gesture maps to, generated from
// (seed, gesture_id) via axis-angle draws.
inline std::vector<Rotation> gesture_rotations(int gesture_id, uint64_t seed) {
  std::seed_seq sq{static_cast<uint64_t>(0x9e3779b9u), seed,
                   static_cast<uint64_t>(gesture_id)};
  std::mt19937_64 rng(sq);
  std::uniform_real_distribution<double> angle(0.0, M_PI);
  std::vector<Rotation> out;
  out.reserve(kTeacherBlocks);
  for (int b = 0; b < kTeacherBlocks; ++b) {
    Eigen::AngleAxisd aa(angle(rng), detail::random_unit_axis(rng));
    out.push_back(aa.toRotationMatrix());
  }
  return out;
}

// Deterministic teacher oracle: frame t of gesture g is the gesture's fixed
// rotation set perturbed by a seeded axis-angle jitter of at most
// `jitter_rad` radians.
inline HandTeacherFeatures synthetic_teacher(const std::vector<int>& gesture_ids,
                                             int num_gestures, uint64_t seed,
                                             double jitter_rad = 0.05) {
  for (int g : gesture_ids)
    if (g < 0 || g >= num_gestures)
      throw LookupError("synthetic_teacher: unknown gesture id " +
                        std::to_string(g));
  HandTeacherFeatures out;
  out.per_frame.resize(static_cast<long>(gesture_ids.size()), kTeacherDim);
  std::vector<std::vector<Rotation>> table(num_gestures);
  for (long t = 0; t < out.per_frame.rows(); ++t) {
    int g = gesture_ids[t];
    if (table[g].empty()) table[g] = gesture_rotations(g, seed);
    std::seed_seq sq{static_cast<uint64_t>(0x51ed2701u), seed,
                     static_cast<uint64_t>(g), static_cast<uint64_t>(t)};
    std::mt19937_64 jrng(sq);
    std::uniform_real_distribution<double> angle(0.0, jitter_rad);
    for (int b = 0; b < kTeacherBlocks; ++b) {
      Rotation r = table[g][b];
      if (jitter_rad > 0.0) {
        Eigen::AngleAxisd aa(angle(jrng), detail::random_unit_axis(jrng));
        r = aa.toRotationMatrix() * r;
      }
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out.per_frame(t, b * 9 + i * 3 + j) = r(i, j);
    }
  }
  return out;
}

}  // namespace gfslt
