#pragma once

// Spatio-temporal transformer over fused per-frame features: windowed
// local self-attention with RoPE, mean-pool temporal downsampling after a
// configurable layer, then the remaining layers on the shorter sequence.

#include <random>
#include <string>
#include <vector>

#include "gfslt/ad.hpp"
#include "gfslt/attention.hpp"
#include "gfslt/errors.hpp"
#include "gfslt/nn.hpp"
#include "gfslt/types.hpp"

namespace gfslt {

struct TemporalConfig {
  int num_layers = 4;
  long input_dim = 64;  // 2D from the visual fusion
  long hidden_dim = 64;
  int num_heads = 8;
  long ffn_dim = 128;
  int window_size = 7;
  int downsample_after_layer = 2;
  int downsample_factor = 2;
  bool rope_all_layers = true;  // when false, only pre-downsampling layers

  void validate() const {
    if (downsample_after_layer >= num_layers)
      throw ConfigError("temporal: downsample_after_layer must be < num_layers");
    if (hidden_dim % num_heads != 0)
      throw ConfigError("temporal: hidden_dim not divisible by num_heads");
    if (window_size < 1 || window_size % 2 == 0)
      throw ConfigError("temporal: window_size must be odd");
    if (downsample_factor < 1)
      throw ConfigError("temporal: downsample_factor must be >= 1");
  }
};

struct TemporalOutput {
  Var z;                      // T x hidden_dim
  std::vector<uint8_t> mask;  // downsampled validity
};

class TemporalEncoder {
 public:
  TemporalEncoder() = default;
  TemporalEncoder(const TemporalConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg),
        input_proj_("temporal.in_proj", cfg.input_dim, cfg.hidden_dim, rng) {
    cfg.validate();
    for (int l = 0; l < cfg.num_layers; ++l) {
      AttentionOptions o;
      o.num_heads = cfg.num_heads;
      o.window_radius = (cfg.window_size - 1) / 2;
      o.use_rope = cfg.rope_all_layers || l < cfg.downsample_after_layer;
      layers_.emplace_back("temporal.layer" + std::to_string(l),
                           cfg.hidden_dim, cfg.ffn_dim, o, rng);
    }
  }

  const TemporalConfig& config() const { return cfg_; }

  // Output length is ceil(T* / downsample_factor); positions restart at
  // zero over the pooled sequence.
  TemporalOutput encode(Tape& t, Var f_hat, std::vector<uint8_t> mask,
                        std::mt19937_64& rng, bool training) {
    if (f_hat.rows() < 1) throw ShapeError("temporal: empty input sequence");
    if (f_hat.cols() != cfg_.input_dim)
      throw ShapeError("temporal: input dim mismatch");
    if (mask.empty()) mask.assign(f_hat.rows(), 1);
    if (static_cast<long>(mask.size()) != f_hat.rows())
      throw ShapeError("temporal: mask length mismatch");

    Var x = input_proj_(t, f_hat);
    auto positions = [](long n) {
      std::vector<long> p(n);
      for (long i = 0; i < n; ++i) p[i] = i;
      return p;
    };
    std::vector<long> pos = positions(x.rows());
    for (int l = 0; l < cfg_.num_layers; ++l) {
      if (l == cfg_.downsample_after_layer) {
        x = ad::time_pool_rows(x, cfg_.downsample_factor, mask);
        mask = ad::pooled_mask(mask, cfg_.downsample_factor);
        pos = positions(x.rows());
      }
      x = layers_[l](t, x, pos, mask, rng, training);
    }
    return {x, std::move(mask)};
  }

  void collect(std::vector<Param*>& out) {
    input_proj_.collect(out);
    for (auto& l : layers_) l.collect(out);
  }

 private:
  TemporalConfig cfg_;
  Linear input_proj_;
  std::vector<EncoderLayer> layers_;
};

}  // namespace gfslt
