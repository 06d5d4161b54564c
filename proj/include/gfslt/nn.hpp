#pragma once

// Neural building blocks shared by every encoder: linear/mapper layers,
// low-rank adapters, layer/batch norm, and pre-norm transformer layers.
// Modules own Params and expose collect() so the trainer and checkpoint
// code can enumerate them by name.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "gfslt/ad.hpp"
#include "gfslt/attention.hpp"
#include "gfslt/errors.hpp"

namespace gfslt {

using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Var;

inline Mat randn(long rows, long cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

struct Linear {
  Param w;  // out x in
  Param b;  // 1 x out

  Linear() = default;
  Linear(std::string name, long in, long out, std::mt19937_64& rng)
      : w(name + ".w", randn(out, in, 1.0 / std::sqrt(double(in)), rng)),
        b(name + ".b", Mat::Zero(1, out)) {}

  long in_dim() const { return w.value.cols(); }
  long out_dim() const { return w.value.rows(); }

  Var operator()(Tape& t, Var x) {
    return ad::linear(x, t.param(w), t.param(b));
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// Linear layer followed by an exact-GELU activation.
struct MapperBlock {
  Linear lin;

  MapperBlock() = default;
  MapperBlock(std::string name, long in, long out, std::mt19937_64& rng)
      : lin(std::move(name), in, out, rng) {}

  long input_dim() const { return lin.in_dim(); }
  long output_dim() const { return lin.out_dim(); }

  Var operator()(Tape& t, Var x) {
    if (x.cols() != input_dim())
      throw ShapeError("mapper: input dim " + std::to_string(x.cols()) +
                       " != " + std::to_string(input_dim()));
    return ad::gelu(lin(t, x));
  }

  void collect(std::vector<Param*>& out) { lin.collect(out); }
};

inline Var mapper_forward(MapperBlock& m, Tape& t, Var x) { return m(t, x); }

struct LowRankAdapterConfig {
  int rank = 4;
  double alpha = 4.0;
  double dropout = 0.1;
  std::set<std::string> target_projections;

  double effective_scale() const { return alpha / rank; }

  void validate(long in_dim, long out_dim) const {
    if (rank < 1) throw ConfigError("lora: rank must be positive");
    if (rank > std::min(in_dim, out_dim))
      throw ConfigError("lora: rank exceeds min(in,out) dims");
    if (alpha <= 0.0) throw ConfigError("lora: alpha must be positive");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("lora: dropout must lie in [0,1)");
    double s = effective_scale();
    if (!std::isfinite(s) || s <= 0.0)
      throw ConfigError("lora: effective scale must be finite and positive");
  }
};

// base_output + (alpha/rank) * dropout(x) A^T B^T with A (rank x in) and
// B (out x rank). With B zero-initialized this is an exact no-op.
inline Var low_rank_adapt(Var base_output, Var x, Var a, Var b,
                          const LowRankAdapterConfig& cfg,
                          std::mt19937_64& rng, bool training = false) {
  if (a.rows() != b.cols())
    throw ConfigError("lora: rank mismatch between A (" +
                      std::to_string(a.rows()) + ") and B (" +
                      std::to_string(b.cols()) + ")");
  cfg.validate(a.cols(), b.rows());
  Var h = ad::matmul_nt(ad::dropout(x, cfg.dropout, rng, training), a);
  Var delta = ad::matmul_nt(h, b);
  return ad::add(base_output, ad::scale(delta, cfg.effective_scale()));
}

// A linear projection with an optional low-rank adapter bolted on.
struct LoraLinear {
  Linear base;
  bool adapted = false;
  LowRankAdapterConfig cfg;
  Param a;  // rank x in
  Param b;  // out x rank, zero-init

  LoraLinear() = default;
  LoraLinear(std::string name, long in, long out, std::mt19937_64& rng)
      : base(name, in, out, rng) {}

  void attach_adapter(const std::string& name, const LowRankAdapterConfig& c,
                      std::mt19937_64& rng) {
    c.validate(base.in_dim(), base.out_dim());
    cfg = c;
    a = Param(name + ".lora_a", randn(c.rank, base.in_dim(), 0.01, rng));
    b = Param(name + ".lora_b", Mat::Zero(base.out_dim(), c.rank));
    adapted = true;
  }

  Var operator()(Tape& t, Var x, std::mt19937_64& rng, bool training) {
    Var y = base(t, x);
    if (!adapted) return y;
    return low_rank_adapt(y, x, t.param(a), t.param(b), cfg, rng, training);
  }

  void collect(std::vector<Param*>& out) {
    base.collect(out);
    if (adapted) {
      out.push_back(&a);
      out.push_back(&b);
    }
  }
};

struct LayerNorm {
  Param gamma;
  Param beta;

  LayerNorm() = default;
  LayerNorm(std::string name, long dim)
      : gamma(name + ".gamma", Mat::Ones(1, dim)),
        beta(name + ".beta", Mat::Zero(1, dim)) {}

  Var operator()(Tape& t, Var x) {
    return ad::layer_norm(x, t.param(gamma), t.param(beta));
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

// Batch normalization over rows (one feature per column). Training mode
// normalizes by batch statistics and updates the running estimates;
// evaluation mode uses the running estimates only, so outputs are
// independent of the rest of the batch.
struct BatchNorm {
  Param gamma;
  Param beta;
  Param running_mean;  // non-trainable buffers, serialized with the model
  Param running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  BatchNorm(std::string name, long dim)
      : gamma(name + ".gamma", Mat::Ones(1, dim)),
        beta(name + ".beta", Mat::Zero(1, dim)),
        running_mean(name + ".running_mean", Mat::Zero(1, dim), false),
        running_var(name + ".running_var", Mat::Ones(1, dim), false) {}

  Var operator()(Tape& t, Var x, bool training) {
    long D = gamma.value.cols();
    if (x.cols() != D) throw ShapeError("batch_norm: feature dim mismatch");
    Var g = t.param(gamma);
    Var be = t.param(beta);
    if (!training) {
      Eigen::RowVectorXd istd =
          (running_var.value.row(0).array() + eps).rsqrt();
      Mat xhat = (x.val().rowwise() - running_mean.value.row(0)).array()
                     .rowwise() *
                 istd.array();
      Mat y = (xhat.array().rowwise() * gamma.value.row(0).array())
                  .rowwise() +
              beta.value.row(0).array();
      return t.push(std::move(y), ad::detail::any_grad({x, g, be}),
                    {x.id, g.id, be.id},
                    [x, g, be, xhat, istd](Tape& t, const Mat& gr) {
                      t.accum_grad(
                          x.id, gr.array().rowwise() *
                                    (g.val().row(0).array() * istd.array()));
                      t.accum_grad(g.id, gr.cwiseProduct(xhat).colwise().sum());
                      t.accum_grad(be.id, gr.colwise().sum());
                    });
    }
    long N = x.rows();
    if (N < 1) throw ShapeError("batch_norm: empty batch");
    // Update the running statistics from this batch, but normalize with
    // the running values in training too ("frozen" small-batch behavior):
    // the rows here are one clip's frames, and per-clip statistics drift
    // enough from the running ones that batch-stat normalization makes
    // train-mode and eval-mode features disagree.
    Eigen::RowVectorXd istd =
        (running_var.value.row(0).array() + eps).rsqrt();
    Mat xhat = (x.val().rowwise() - running_mean.value.row(0)).array()
                   .rowwise() *
               istd.array();
    Eigen::RowVectorXd mu = x.val().colwise().mean();
    Mat centered = x.val().rowwise() - mu;
    Eigen::RowVectorXd var = centered.array().square().colwise().mean();
    running_mean.value = (1.0 - momentum) * running_mean.value +
                         momentum * mu.matrix();
    running_var.value =
        (1.0 - momentum) * running_var.value + momentum * var.matrix();
    Mat y = (xhat.array().rowwise() * gamma.value.row(0).array()).rowwise() +
            beta.value.row(0).array();
    return t.push(std::move(y), ad::detail::any_grad({x, g, be}),
                  {x.id, g.id, be.id},
                  [x, g, be, xhat, istd](Tape& t, const Mat& gr) {
                    t.accum_grad(
                        x.id, gr.array().rowwise() *
                                  (g.val().row(0).array() * istd.array()));
                    t.accum_grad(g.id, gr.cwiseProduct(xhat).colwise().sum());
                    t.accum_grad(be.id, gr.colwise().sum());
                  });
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
    out.push_back(&running_mean);
    out.push_back(&running_var);
  }
};

struct FeedForward {
  LoraLinear up;
  LoraLinear down;

  FeedForward() = default;
  FeedForward(const std::string& name, long dim, long ffn_dim,
              std::mt19937_64& rng)
      : up(name + ".up", dim, ffn_dim, rng),
        down(name + ".down", ffn_dim, dim, rng) {}

  void attach_lora(const std::string& name, const LowRankAdapterConfig& cfg,
                   std::mt19937_64& rng) {
    up.attach_adapter(name + ".up", cfg, rng);
    down.attach_adapter(name + ".down", cfg, rng);
  }

  Var operator()(Tape& t, Var x, std::mt19937_64& rng, bool training) {
    return down(t, ad::gelu(up(t, x, rng, training)), rng, training);
  }

  void collect(std::vector<Param*>& out) {
    up.collect(out);
    down.collect(out);
  }
};

struct SelfAttentionBlock {
  LoraLinear wq, wk, wv, wo;
  AttentionOptions opts;

  SelfAttentionBlock() = default;
  SelfAttentionBlock(const std::string& name, long dim,
                     const AttentionOptions& o, std::mt19937_64& rng)
      : wq(name + ".wq", dim, dim, rng),
        wk(name + ".wk", dim, dim, rng),
        wv(name + ".wv", dim, dim, rng),
        wo(name + ".wo", dim, dim, rng),
        opts(o) {}

  void attach_lora(const std::string& name, const LowRankAdapterConfig& cfg,
                   std::mt19937_64& rng) {
    if (cfg.target_projections.count("q"))
      wq.attach_adapter(name + ".wq", cfg, rng);
    if (cfg.target_projections.count("k"))
      wk.attach_adapter(name + ".wk", cfg, rng);
    if (cfg.target_projections.count("v"))
      wv.attach_adapter(name + ".wv", cfg, rng);
    if (cfg.target_projections.count("o"))
      wo.attach_adapter(name + ".wo", cfg, rng);
  }

  Var operator()(Tape& t, Var x, const std::vector<long>& pos,
                 const std::vector<uint8_t>& mask, std::mt19937_64& rng,
                 bool training) {
    Var q = wq(t, x, rng, training);
    Var k = wk(t, x, rng, training);
    Var v = wv(t, x, rng, training);
    Var o = multi_head_attention(q, k, v, opts, pos, pos, mask);
    return wo(t, o, rng, training);
  }

  void collect(std::vector<Param*>& out) {
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
  }
};

struct CrossAttentionBlock {
  LoraLinear wq, wk, wv, wo;
  int num_heads = 1;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(const std::string& name, long dim, int heads,
                      std::mt19937_64& rng)
      : wq(name + ".wq", dim, dim, rng),
        wk(name + ".wk", dim, dim, rng),
        wv(name + ".wv", dim, dim, rng),
        wo(name + ".wo", dim, dim, rng),
        num_heads(heads) {}

  void attach_lora(const std::string& name, const LowRankAdapterConfig& cfg,
                   std::mt19937_64& rng) {
    if (cfg.target_projections.count("q"))
      wq.attach_adapter(name + ".wq", cfg, rng);
    if (cfg.target_projections.count("v"))
      wv.attach_adapter(name + ".wv", cfg, rng);
  }

  Var operator()(Tape& t, Var x, Var memory,
                 const std::vector<uint8_t>& memory_mask,
                 std::mt19937_64& rng, bool training) {
    Var q = wq(t, x, rng, training);
    Var k = wk(t, memory, rng, training);
    Var v = wv(t, memory, rng, training);
    AttentionOptions o;
    o.num_heads = num_heads;
    std::vector<long> pq(x.rows()), pk(memory.rows());
    for (long i = 0; i < x.rows(); ++i) pq[i] = i;
    for (long i = 0; i < memory.rows(); ++i) pk[i] = i;
    Var a = multi_head_attention(q, k, v, o, pq, pk, memory_mask);
    return wo(t, a, rng, training);
  }

  void collect(std::vector<Param*>& out) {
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
  }
};

// Pre-norm encoder layer: x + SA(LN(x)), then x + FFN(LN(x)).
struct EncoderLayer {
  LayerNorm ln1, ln2;
  SelfAttentionBlock attn;
  FeedForward ffn;

  EncoderLayer() = default;
  EncoderLayer(const std::string& name, long dim, long ffn_dim,
               const AttentionOptions& o, std::mt19937_64& rng)
      : ln1(name + ".ln1", dim),
        ln2(name + ".ln2", dim),
        attn(name + ".attn", dim, o, rng),
        ffn(name + ".ffn", dim, ffn_dim, rng) {}

  Var operator()(Tape& t, Var x, const std::vector<long>& pos,
                 const std::vector<uint8_t>& mask, std::mt19937_64& rng,
                 bool training) {
    x = ad::add(x, attn(t, ln1(t, x), pos, mask, rng, training));
    return ad::add(x, ffn(t, ln2(t, x), rng, training));
  }

  void collect(std::vector<Param*>& out) {
    ln1.collect(out);
    ln2.collect(out);
    attn.collect(out);
    ffn.collect(out);
  }
};

// Pre-norm decoder layer: causal self-attention, cross-attention over the
// encoder memory, then the feed-forward block.
struct DecoderLayer {
  LayerNorm ln1, ln2, ln3;
  SelfAttentionBlock self_attn;
  CrossAttentionBlock cross_attn;
  FeedForward ffn;

  DecoderLayer() = default;
  DecoderLayer(const std::string& name, long dim, long ffn_dim, int heads,
               bool use_rope, std::mt19937_64& rng)
      : ln1(name + ".ln1", dim),
        ln2(name + ".ln2", dim),
        ln3(name + ".ln3", dim),
        cross_attn(name + ".cross", dim, heads, rng),
        ffn(name + ".ffn", dim, ffn_dim, rng) {
    AttentionOptions o;
    o.num_heads = heads;
    o.causal = true;
    o.use_rope = use_rope;
    self_attn = SelfAttentionBlock(name + ".self", dim, o, rng);
  }

  Var operator()(Tape& t, Var x, Var memory,
                 const std::vector<uint8_t>& memory_mask,
                 std::mt19937_64& rng, bool training) {
    std::vector<long> pos(x.rows());
    for (long i = 0; i < x.rows(); ++i) pos[i] = i;
    x = ad::add(x, self_attn(t, ln1(t, x), pos, {}, rng, training));
    x = ad::add(x,
                cross_attn(t, ln2(t, x), memory, memory_mask, rng, training));
    return ad::add(x, ffn(t, ln3(t, x), rng, training));
  }

  void collect(std::vector<Param*>& out) {
    ln1.collect(out);
    ln2.collect(out);
    ln3.collect(out);
    self_attn.collect(out);
    cross_attn.collect(out);
    ffn.collect(out);
  }
};

}  // namespace gfslt
