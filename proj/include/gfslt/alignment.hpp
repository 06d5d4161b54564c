#pragma once

// Description-space projection and fusion, frozen text encoders, the two
// symmetric contrastive losses, and the weighted pre-training objective.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gfslt/ad.hpp"
#include "gfslt/attention.hpp"
#include "gfslt/errors.hpp"
#include "gfslt/nn.hpp"
#include "gfslt/vocab.hpp"

namespace gfslt {

// Z* = mapper3(Z); Z' = mapper4(Z*); Z_hat = concat(Z', Z), doubling the
// feature width.
inline Var desc_project(Tape& t, Var z, MapperBlock& mapper3,
                        MapperBlock& mapper4) {
  if (mapper3.input_dim() != z.cols())
    throw ConfigError("desc_project: mapper3 input dim mismatch");
  if (mapper4.input_dim() != mapper3.output_dim() ||
      mapper4.output_dim() != z.cols())
    throw ConfigError("desc_project: mapper4 must map back to the video dim");
  Var z_prime = mapper4(t, mapper3(t, z));
  return ad::concat_cols(z_prime, z);
}

// A deterministic small transformer text encoder whose parameters are
// excluded from optimization. Two independent instances exist, one for
// descriptions and one for target sentences.
class FrozenTextEncoder {
 public:
  FrozenTextEncoder() = default;
  FrozenTextEncoder(const std::string& name, int vocab_size, long dim,
                    int num_layers, int heads, uint64_t seed)
      : dim_(dim) {
    std::mt19937_64 rng(seed);
    embed_ = Param(name + ".embed", randn(vocab_size, dim, 0.02, rng));
    AttentionOptions o;
    o.num_heads = heads;
    o.use_rope = true;
    for (int l = 0; l < num_layers; ++l)
      layers_.emplace_back(name + ".layer" + std::to_string(l), dim, dim * 4,
                           o, rng);
    final_ln_ = LayerNorm(name + ".final_ln", dim);
    std::vector<Param*> ps;
    collect(ps);
    for (Param* p : ps) p->trainable = false;
  }

  long dim() const { return dim_; }

  // Token-level features, N x K. Unknown tokens were already mapped to
  // <unk> by the tokenizer.
  Var encode(Tape& t, const std::vector<int>& ids) {
    if (ids.empty()) throw ShapeError("text encoder: empty token sequence");
    std::vector<long> rows(ids.begin(), ids.end());
    Var x = ad::gather_rows(t.param(embed_), std::move(rows));
    std::vector<long> pos(x.rows());
    for (long i = 0; i < x.rows(); ++i) pos[i] = i;
    std::mt19937_64 unused(0);  // frozen: never trains, never drops out
    for (auto& l : layers_) x = l(t, x, pos, {}, unused, false);
    return final_ln_(t, x);
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&embed_);
    for (auto& l : layers_) l.collect(out);
    final_ln_.collect(out);
  }

 private:
  long dim_ = 0;
  Param embed_;
  std::vector<EncoderLayer> layers_;
  LayerNorm final_ln_;
};

// Masked mean pool followed by a linear bridge to the shared dimension;
// the bridge is skipped when the source already has that dimension.
inline Var pool_and_bridge(Tape& t, Var x, const std::vector<uint8_t>& mask,
                           Linear* bridge = nullptr) {
  std::vector<uint8_t> m = mask.empty()
                               ? std::vector<uint8_t>(x.rows(), 1)
                               : mask;
  Var pooled = ad::masked_mean_pool(x, m);
  if (bridge == nullptr) return pooled;
  if (bridge->in_dim() == bridge->out_dim() &&
      pooled.cols() == bridge->out_dim())
    return pooled;  // identity branch: dims already agree
  return (*bridge)(t, pooled);
}

struct ContrastiveBatch {
  Var left;     // B x D^ pooled embeddings
  Var right;    // B x D^ pooled embeddings, matched by row index
  Var log_tau;  // 1x1 learnable log-temperature
};

inline constexpr double kTauMin = 0.01;
inline constexpr double kTauMax = 1.0;
inline const double kTauInit = 0.07;

// Symmetric InfoNCE over cosine similarities:
//   -(1/2B) sum_j [ log softmax_k(S_jk / tau)[j] + log softmax_k(S_kj^T...) ]
// with S the left-right cosine similarity matrix and matched pairs on the
// diagonal.
inline Var symmetric_info_nce(ContrastiveBatch batch) {
  Var left = batch.left;
  Var right = batch.right;
  if (left.rows() != right.rows() || left.cols() != right.cols())
    throw ShapeError("info_nce: left/right shape mismatch");
  long B = left.rows();
  if (B < 1) throw ShapeError("info_nce: empty batch");
  Tape& t = *left.tape;
  Var ln = ad::normalize_rows(left);
  Var rn = ad::normalize_rows(right);
  Var sim = ad::matmul_nt(ln, rn);
  Var inv_tau = ad::exp(ad::scale(batch.log_tau, -1.0));
  Var s = ad::scale_by(sim, inv_tau);
  Var pos = ad::sum_all(ad::diag_col(s));
  Var lse_lr = ad::sum_all(ad::logsumexp_rows(s));
  Var lse_rl = ad::sum_all(ad::logsumexp_rows(ad::transpose(s)));
  Var loss = ad::scale(
      ad::sub(ad::add(lse_lr, lse_rl), ad::scale(pos, 2.0)),
      1.0 / (2.0 * static_cast<double>(B)));
  (void)t;
  return loss;
}

struct LossWeights {
  double lambda_align = 1.0;
  double lambda_desc = 0.5;
  double lambda_distill = 0.3;

  void validate() const {
    for (double v : {lambda_align, lambda_desc, lambda_distill})
      if (!std::isfinite(v) || v < 0.0)
        throw ConfigError("loss weights must be finite and non-negative");
  }
};

struct PretrainLossParts {
  std::optional<Var> l_align;
  std::optional<Var> l_desc;
  std::optional<Var> l_distill;
};

// Weighted sum of the three pre-training losses. A NaN/Inf component
// aborts with the component named.
inline Var pretrain_loss(Tape& t, const PretrainLossParts& parts,
                         const LossWeights& w) {
  w.validate();
  auto check = [](const std::optional<Var>& v, const char* name) {
    if (v && !std::isfinite(v->val()(0, 0)))
      throw DivergenceError(std::string("pretrain loss diverged in ") + name);
  };
  check(parts.l_align, "l_align");
  check(parts.l_desc, "l_desc");
  check(parts.l_distill, "l_distill");
  Var total = t.constant(Mat::Zero(1, 1));
  if (parts.l_align)
    total = ad::add(total, ad::scale(*parts.l_align, w.lambda_align));
  if (parts.l_desc)
    total = ad::add(total, ad::scale(*parts.l_desc, w.lambda_desc));
  if (parts.l_distill)
    total = ad::add(total, ad::scale(*parts.l_distill, w.lambda_distill));
  return total;
}

}  // namespace gfslt
