#pragma once

// Encoder-decoder language model over fused video features: a bridge into
// the model dimension, a transformer encoder producing Y, and an
// autoregressive decoder trained with teacher-forced cross-entropy.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "gfslt/ad.hpp"
#include "gfslt/attention.hpp"
#include "gfslt/errors.hpp"
#include "gfslt/nn.hpp"
#include "gfslt/vocab.hpp"

namespace gfslt {

struct TranslatorConfig {
  long input_dim = 128;  // D'' of the fused video features
  long dim = 64;         // K
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 8;
  long ffn_dim = 256;
  int vocab_size = 0;
  bool use_lora = false;  // rank 16 / alpha 32 / dropout 0.1 on q,v

  void validate() const {
    if (vocab_size < 5) throw ConfigError("translator: vocab too small");
    if (dim % heads != 0)
      throw ConfigError("translator: dim not divisible by heads");
  }
};

struct DecodeOptions {
  enum class Mode { kGreedy, kBeam };
  Mode mode = Mode::kBeam;
  int beam_size = 5;
  int max_len = 64;
  double length_penalty = 1.0;
};

// Standard fixed sinusoidal position table, n x dim.
inline Mat sinusoidal_positions(long n, long dim) {
  Mat pe = Mat::Zero(n, dim);
  for (long p = 0; p < n; ++p)
    for (long i = 0; i + 1 < dim; i += 2) {
      double freq = std::pow(10000.0, -double(i) / double(dim));
      pe(p, i) = std::sin(p * freq);
      pe(p, i + 1) = std::cos(p * freq);
    }
  return pe;
}

struct SltLoss {
  Var sum;   // Eq-style total over non-pad steps
  Var mean;  // per-token mean, used for optimization
  long tokens = 0;
};

// Sum over steps of -log softmax(logits_row)[gold]; <pad> steps excluded.
inline SltLoss slt_loss(Tape& t, Var decoder_logits,
                        const std::vector<int>& gold) {
  if (static_cast<long>(gold.size()) != decoder_logits.rows())
    throw ShapeError("slt_loss: logits/target length mismatch");
  auto ce = ad::cross_entropy_tokens(decoder_logits, gold, Vocabulary::kPad);
  if (ce.count == 0) throw ShapeError("slt_loss: no non-pad target steps");
  return {ce.sum, ad::scale(ce.sum, 1.0 / static_cast<double>(ce.count)),
          ce.count};
}

// No <pad> interior to the sequence, specials only at boundaries, all ids
// within the vocabulary.
inline void validate_token_sequence(const TokenSequence& seq, int vocab_size) {
  for (size_t i = 0; i < seq.ids.size(); ++i) {
    int id = seq.ids[i];
    if (id < 0 || id >= vocab_size)
      throw LookupError("token id out of vocabulary: " + std::to_string(id));
    bool interior = i > 0 && i + 1 < seq.ids.size();
    if (id == Vocabulary::kPad && i + 1 < seq.ids.size())
      throw ValueError("interior <pad> in token sequence");
    if (id == Vocabulary::kBos && i != 0)
      throw ValueError("<bos> not at sequence start");
    if (id == Vocabulary::kEos && interior)
      throw ValueError("interior <eos> in token sequence");
  }
}

class Translator {
 public:
  Translator() = default;
  Translator(const TranslatorConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    bridge_ = Linear("llm.bridge", cfg.input_dim, cfg.dim, rng);
    AttentionOptions o;
    o.num_heads = cfg.heads;
    o.use_rope = true;
    for (int l = 0; l < cfg.enc_layers; ++l)
      enc_layers_.emplace_back("llm.enc" + std::to_string(l), cfg.dim,
                               cfg.ffn_dim, o, rng);
    enc_final_ = LayerNorm("llm.enc_final", cfg.dim);
    init_decoder(rng);
  }

  const TranslatorConfig& config() const { return cfg_; }

  // Re-initializes the decoder stack only; fine-tuning starts the decoder
  // fresh while the encoder carries pre-trained weights.
  void init_decoder(std::mt19937_64& rng) {
    embed_ = Param("llm.dec.embed", randn(cfg_.vocab_size, cfg_.dim, 0.02, rng));
    dec_layers_.clear();
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      dec_layers_.emplace_back("llm.dec" + std::to_string(l), cfg_.dim,
                               cfg_.ffn_dim, cfg_.heads, /*use_rope=*/true,
                               rng);
      if (cfg_.use_lora) {
        LowRankAdapterConfig lc;
        lc.rank = std::min<long>(16, cfg_.dim);
        lc.alpha = 32.0;
        lc.dropout = 0.1;
        lc.target_projections = {"q", "v"};
        std::string nm = "llm.dec" + std::to_string(l);
        dec_layers_.back().self_attn.attach_lora(nm + ".self", lc, rng);
        dec_layers_.back().cross_attn.attach_lora(nm + ".cross", lc, rng);
      }
    }
    dec_final_ = LayerNorm("llm.dec_final", cfg_.dim);
    out_proj_ = Linear("llm.dec.out", cfg_.dim, cfg_.vocab_size, rng);
  }

  void attach_encoder_lora(std::mt19937_64& rng) {
    LowRankAdapterConfig lc;
    lc.rank = std::min<long>(16, cfg_.dim);
    lc.alpha = 32.0;
    lc.dropout = 0.1;
    lc.target_projections = {"q", "v"};
    for (size_t l = 0; l < enc_layers_.size(); ++l)
      enc_layers_[l].attn.attach_lora("llm.enc" + std::to_string(l), lc, rng);
  }

  // Y = encoder(bridge(Z_hat)); the validity mask passes through.
  Var llm_encode(Tape& t, Var z_hat, const std::vector<uint8_t>& mask,
                 std::mt19937_64& rng, bool training) {
    if (z_hat.cols() != cfg_.input_dim)
      throw ConfigError("llm_encode: input dim " + std::to_string(z_hat.cols()) +
                        " != bridge dim " + std::to_string(cfg_.input_dim));
    Var x = bridge_(t, z_hat);
    // absolute positions let the decoder address "the i-th segment";
    // RoPE inside the layers only ever sees relative offsets
    x = ad::add(x, t.constant(sinusoidal_positions(x.rows(), cfg_.dim)));
    std::vector<long> pos(x.rows());
    for (long i = 0; i < x.rows(); ++i) pos[i] = i;
    for (auto& l : enc_layers_) x = l(t, x, pos, mask, rng, training);
    return enc_final_(t, x);
  }

  // Teacher-forced decoder logits for the given input token ids.
  Var decode_logits(Tape& t, Var memory, const std::vector<uint8_t>& mem_mask,
                    const std::vector<int>& input_ids, std::mt19937_64& rng,
                    bool training) {
    if (input_ids.empty()) throw ShapeError("decoder: empty input");
    std::vector<long> rows(input_ids.begin(), input_ids.end());
    Var x = ad::gather_rows(t.param(embed_), std::move(rows));
    x = ad::add(x, t.constant(sinusoidal_positions(x.rows(), cfg_.dim)));
    for (auto& l : dec_layers_)
      x = l(t, x, memory, mem_mask, rng, training);
    return out_proj_(t, dec_final_(t, x));
  }

  // Autoregressive decoding from <bos> until <eos> or max_len generated
  // tokens. Beam mode maximizes log P / len^alpha over completed
  // hypotheses; beam_size 1 is exactly greedy.
  TokenSequence decode(Tape& t, Var memory,
                       const std::vector<uint8_t>& mem_mask,
                       const DecodeOptions& opt, const Vocabulary& vocab) {
    if (opt.max_len < 1) throw ConfigError("decode: max_len must be >= 1");
    int beam = opt.mode == DecodeOptions::Mode::kGreedy ? 1 : opt.beam_size;
    if (beam < 1) throw ConfigError("decode: beam_size must be >= 1");
    std::mt19937_64 rng(0);  // inference only; no dropout is drawn

    struct Hyp {
      std::vector<int> ids;  // starts with <bos>
      double logp = 0.0;
      bool finished = false;
      double score(double alpha) const {
        double len = std::max<double>(1.0, double(ids.size()) - 1.0);
        return logp / std::pow(len, alpha);
      }
    };
    std::vector<Hyp> live{Hyp{{Vocabulary::kBos}, 0.0, false}};
    std::vector<Hyp> done;

    for (int step = 0; step < opt.max_len && !live.empty(); ++step) {
      std::vector<Hyp> candidates;
      for (const Hyp& h : live) {
        Var logits = decode_logits(t, memory, mem_mask, h.ids, rng, false);
        Eigen::RowVectorXd row = logits.val().row(logits.rows() - 1);
        double m = row.maxCoeff();
        double lse = m + std::log((row.array() - m).exp().sum());
        // stable top-k by log-probability, lowest index wins ties
        std::vector<int> order(row.size());
        for (int i = 0; i < row.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return row(a) > row(b); });
        for (int k = 0; k < beam && k < row.size(); ++k) {
          Hyp next = h;
          next.ids.push_back(order[k]);
          next.logp += row(order[k]) - lse;
          next.finished = order[k] == Vocabulary::kEos;
          candidates.push_back(std::move(next));
        }
      }
      std::stable_sort(candidates.begin(), candidates.end(),
                       [](const Hyp& a, const Hyp& b) {
                         return a.logp > b.logp;
                       });
      live.clear();
      for (Hyp& c : candidates) {
        if (c.finished)
          done.push_back(std::move(c));
        else if (static_cast<int>(live.size()) < beam)
          live.push_back(std::move(c));
      }
      if (static_cast<int>(done.size()) >= beam) break;
    }
    for (Hyp& h : live) done.push_back(std::move(h));
    const Hyp* best = nullptr;
    for (const Hyp& h : done)
      if (!best || h.score(opt.length_penalty) >
                       best->score(opt.length_penalty))
        best = &h;

    TokenSequence out;
    for (size_t i = 1; i < best->ids.size(); ++i)
      if (best->ids[i] != Vocabulary::kEos) out.ids.push_back(best->ids[i]);
    out.text = vocab.decode(out.ids);
    return out;
  }

  void collect(std::vector<Param*>& out) {
    collect_encoder(out);
    collect_decoder(out);
  }

  void collect_encoder(std::vector<Param*>& out) {
    bridge_.collect(out);
    for (auto& l : enc_layers_) l.collect(out);
    enc_final_.collect(out);
  }

  void collect_decoder(std::vector<Param*>& out) {
    out.push_back(&embed_);
    for (auto& l : dec_layers_) l.collect(out);
    dec_final_.collect(out);
    out_proj_.collect(out);
  }

 private:
  TranslatorConfig cfg_;
  Linear bridge_;
  std::vector<EncoderLayer> enc_layers_;
  LayerNorm enc_final_;
  Param embed_;
  std::vector<DecoderLayer> dec_layers_;
  LayerNorm dec_final_;
  Linear out_proj_;
};

// Teacher-forcing views of a target sentence: decoder input [<bos>, ids],
// gold labels [ids, <eos>].
inline std::vector<int> decoder_inputs(const TokenSequence& target) {
  std::vector<int> in{Vocabulary::kBos};
  in.insert(in.end(), target.ids.begin(), target.ids.end());
  return in;
}

inline std::vector<int> decoder_targets(const TokenSequence& target) {
  std::vector<int> out = target.ids;
  out.push_back(Vocabulary::kEos);
  return out;
}

}  // namespace gfslt
