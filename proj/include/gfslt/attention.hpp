#pragma once

// Rotary position embedding and fused multi-head attention. One attention
// core serves every site in the network via its masking options:
//   window_radius >= 0  — banded temporal attention (|pos_i - pos_j| <= r)
//   block_len > 0       — independent attention per consecutive row block
//                         (per-frame spatial attention in the visual encoder)
//   causal              — queries attend only to keys at pos_j <= pos_i
//   key_mask            — padded key positions receive exactly zero weight

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "gfslt/ad.hpp"
#include "gfslt/errors.hpp"

namespace gfslt {

struct AttentionConfig {
  int num_heads = 8;
  int head_dim = 16;
  int window_size = 7;  // odd; radius on each side is (window_size - 1) / 2
  bool use_rope = true;

  int model_dim() const { return num_heads * head_dim; }
  int radius() const { return (window_size - 1) / 2; }

  void validate() const {
    if (num_heads < 1 || head_dim < 1)
      throw ConfigError("AttentionConfig: heads and head_dim must be positive");
    if (window_size < 1 || window_size % 2 == 0)
      throw ConfigError("AttentionConfig: window_size must be odd and >= 1");
    if (use_rope && head_dim % 2 != 0)
      throw ConfigError("AttentionConfig: RoPE requires an even head_dim");
  }
};

inline constexpr double kRopeBase = 10000.0;

// Rotates each consecutive (2i, 2i+1) plane of every row by pos * theta_i,
// theta_i = base^(-2i/d). Plain-matrix form; the autodiff path reuses it.
inline ad::Mat rope_rotate(const ad::Mat& x, const std::vector<long>& positions,
                           double sign = 1.0, double base = kRopeBase) {
  if (x.cols() % 2 != 0)
    throw ConfigError("rope: head_dim must be even, got " +
                      std::to_string(x.cols()));
  if (static_cast<long>(positions.size()) != x.rows())
    throw ShapeError("rope: positions length mismatch");
  long d = x.cols();
  ad::Mat y(x.rows(), d);
  for (long p = 0; p < d / 2; ++p) {
    double theta = std::pow(base, -2.0 * p / static_cast<double>(d));
    for (long i = 0; i < x.rows(); ++i) {
      double a = sign * positions[i] * theta;
      double c = std::cos(a), s = std::sin(a);
      y(i, 2 * p) = c * x(i, 2 * p) - s * x(i, 2 * p + 1);
      y(i, 2 * p + 1) = s * x(i, 2 * p) + c * x(i, 2 * p + 1);
    }
  }
  return y;
}

inline ad::Mat rope_apply(const ad::Mat& x, const std::vector<long>& positions,
                          double base = kRopeBase) {
  for (long p : positions)
    if (p < 0) throw ValueError("rope: positions must be non-negative");
  return rope_rotate(x, positions, 1.0, base);
}

// Autodiff rope: a per-row orthogonal map, so the backward pass rotates the
// gradient by the opposite angle.
inline ad::Var rope_rows(ad::Var x, std::vector<long> positions) {
  ad::Tape& t = *x.tape;
  ad::Mat y = rope_apply(x.val(), positions);
  return t.push(std::move(y), t.requires_grad(x), {x.id},
                [x, positions = std::move(positions)](ad::Tape& t,
                                                      const ad::Mat& g) {
                  t.accum_grad(x.id, rope_rotate(g, positions, -1.0));
                });
}

struct AttentionOptions {
  int num_heads = 1;
  int window_radius = -1;  // -1: unrestricted
  long block_len = -1;     // >0: attention restricted to row blocks
  bool causal = false;
  bool use_rope = false;
};

namespace detail {

inline bool attn_allowed(long i, long j, const std::vector<long>& pos_q,
                         const std::vector<long>& pos_k,
                         const std::vector<uint8_t>& key_mask,
                         const AttentionOptions& o) {
  if (!key_mask.empty() && !key_mask[j]) return false;
  if (o.block_len > 0 && i / o.block_len != j / o.block_len) return false;
  if (o.window_radius >= 0 &&
      std::labs(pos_q[i] - pos_k[j]) > o.window_radius)
    return false;
  if (o.causal && pos_k[j] > pos_q[i]) return false;
  return true;
}

// Softmax over allowed entries only; disallowed weights are exactly zero.
// A query with no allowed key gets an all-zero row.
inline ad::Mat banded_softmax(const ad::Mat& scores,
                              const std::vector<long>& pos_q,
                              const std::vector<long>& pos_k,
                              const std::vector<uint8_t>& key_mask,
                              const AttentionOptions& o) {
  ad::Mat p = ad::Mat::Zero(scores.rows(), scores.cols());
  for (long i = 0; i < scores.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (long j = 0; j < scores.cols(); ++j)
      if (attn_allowed(i, j, pos_q, pos_k, key_mask, o))
        m = std::max(m, scores(i, j));
    if (!std::isfinite(m)) continue;
    double z = 0.0;
    for (long j = 0; j < scores.cols(); ++j)
      if (attn_allowed(i, j, pos_q, pos_k, key_mask, o)) {
        p(i, j) = std::exp(scores(i, j) - m);
        z += p(i, j);
      }
    p.row(i) /= z;
  }
  return p;
}

}  // namespace detail

// Per-head attention weight matrices for projected q/k (inspection and
// tests; the training path uses the fused op below).
inline std::vector<ad::Mat> attention_weights(
    const ad::Mat& q, const ad::Mat& k, const AttentionOptions& o,
    const std::vector<long>& pos_q, const std::vector<long>& pos_k,
    const std::vector<uint8_t>& key_mask = {}) {
  if (q.cols() != k.cols()) throw ShapeError("attention: q/k dim mismatch");
  if (q.cols() % o.num_heads != 0)
    throw ShapeError("attention: dim not divisible by heads");
  long dh = q.cols() / o.num_heads;
  std::vector<ad::Mat> out;
  for (int h = 0; h < o.num_heads; ++h) {
    ad::Mat qh = q.middleCols(h * dh, dh);
    ad::Mat kh = k.middleCols(h * dh, dh);
    if (o.use_rope) {
      qh = rope_apply(qh, pos_q);
      kh = rope_apply(kh, pos_k);
    }
    ad::Mat s = qh * kh.transpose() / std::sqrt(static_cast<double>(dh));
    out.push_back(detail::banded_softmax(s, pos_q, pos_k, key_mask, o));
  }
  return out;
}

// Fused multi-head scaled-dot-product attention over projected Q, K, V
// (each rows x (heads * head_dim)). Returns rows(Q) x (heads * head_dim).
inline ad::Var multi_head_attention(ad::Var q, ad::Var k, ad::Var v,
                                    const AttentionOptions& o,
                                    std::vector<long> pos_q,
                                    std::vector<long> pos_k,
                                    std::vector<uint8_t> key_mask = {}) {
  ad::detail::check_same_tape({q, k, v});
  if (q.cols() != k.cols() || k.rows() != v.rows() || k.cols() != v.cols())
    throw ShapeError("attention: q/k/v shape mismatch");
  if (static_cast<long>(pos_q.size()) != q.rows() ||
      static_cast<long>(pos_k.size()) != k.rows())
    throw ShapeError("attention: positions length mismatch");
  if (!key_mask.empty() && static_cast<long>(key_mask.size()) != k.rows())
    throw ShapeError("attention: key mask length mismatch");
  if (q.cols() % o.num_heads != 0)
    throw ShapeError("attention: dim not divisible by heads");
  ad::Tape& t = *q.tape;
  long dh = q.cols() / o.num_heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // Saved per head for the backward pass.
  auto qt = std::make_shared<std::vector<ad::Mat>>();
  auto kt = std::make_shared<std::vector<ad::Mat>>();
  auto probs = std::make_shared<std::vector<ad::Mat>>();

  ad::Mat out(q.rows(), q.cols());
  for (int h = 0; h < o.num_heads; ++h) {
    ad::Mat qh = q.val().middleCols(h * dh, dh);
    ad::Mat kh = k.val().middleCols(h * dh, dh);
    if (o.use_rope) {
      qh = rope_apply(qh, pos_q);
      kh = rope_apply(kh, pos_k);
    }
    ad::Mat s = qh * kh.transpose() * inv_sqrt;
    ad::Mat p = detail::banded_softmax(s, pos_q, pos_k, key_mask, o);
    out.middleCols(h * dh, dh) = p * v.val().middleCols(h * dh, dh);
    qt->push_back(std::move(qh));
    kt->push_back(std::move(kh));
    probs->push_back(std::move(p));
  }

  bool rg = ad::detail::any_grad({q, k, v});
  return t.push(std::move(out), rg, {q.id, k.id, v.id},
                [q, k, v, o, dh, inv_sqrt, qt, kt, probs,
                 pos_q = std::move(pos_q), pos_k = std::move(pos_k)](
                    ad::Tape& t, const ad::Mat& g) {
                  ad::Mat gq(q.rows(), q.cols());
                  ad::Mat gk(k.rows(), k.cols());
                  ad::Mat gv(v.rows(), v.cols());
                  for (int h = 0; h < o.num_heads; ++h) {
                    const ad::Mat& p = (*probs)[h];
                    ad::Mat go = g.middleCols(h * dh, dh);
                    ad::Mat vh = v.val().middleCols(h * dh, dh);
                    gv.middleCols(h * dh, dh) = p.transpose() * go;
                    ad::Mat gp = go * vh.transpose();
                    // softmax backward; rows of p already encode the mask
                    ad::Mat gs = p.cwiseProduct(gp);
                    Eigen::VectorXd rowsum = gs.rowwise().sum();
                    gs -= (p.array().colwise() * rowsum.array()).matrix();
                    gs *= inv_sqrt;
                    ad::Mat gqh = gs * (*kt)[h];
                    ad::Mat gkh = gs.transpose() * (*qt)[h];
                    if (o.use_rope) {
                      gqh = rope_rotate(gqh, pos_q, -1.0);
                      gkh = rope_rotate(gkh, pos_k, -1.0);
                    }
                    gq.middleCols(h * dh, dh) = gqh;
                    gk.middleCols(h * dh, dh) = gkh;
                  }
                  t.accum_grad(q.id, gq);
                  t.accum_grad(k.id, gk);
                  t.accum_grad(v.id, gv);
                });
}

// Windowed self-attention over already-projected q/k/v, as a standalone
// entry point: weight(i, j) is exactly zero when |i - j| exceeds the
// half-window or j is masked.
inline ad::Var local_window_attention(ad::Var q, ad::Var k, ad::Var v,
                                      const AttentionConfig& cfg,
                                      std::vector<uint8_t> mask = {}) {
  cfg.validate();
  if (q.rows() != k.rows())
    throw ShapeError("local_window_attention: sequence length mismatch");
  if (q.cols() != cfg.model_dim())
    throw ShapeError("local_window_attention: model dim mismatch");
  AttentionOptions o;
  o.num_heads = cfg.num_heads;
  o.window_radius = cfg.radius();
  o.use_rope = cfg.use_rope;
  std::vector<long> pos(q.rows());
  for (long i = 0; i < q.rows(); ++i) pos[i] = i;
  return multi_head_attention(q, k, v, o, pos, pos, std::move(mask));
}

}  // namespace gfslt
