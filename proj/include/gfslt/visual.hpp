#pragma once

// Per-frame spatial encoder. Each frame is average-pooled spatially,
// cut into patches, embedded, and run through a small transformer with a
// class token; the class-token output goes through a linear head and
// batch normalization to give the per-frame feature row. Frames of a clip
// are processed in one block-attention pass, one token block per frame.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gfslt/ad.hpp"
#include "gfslt/attention.hpp"
#include "gfslt/errors.hpp"
#include "gfslt/nn.hpp"
#include "gfslt/teacher.hpp"
#include "gfslt/types.hpp"

namespace gfslt {

enum class DistillLossKind { kAbs, kSquared };

struct VisualConfig {
  long channels = 3;
  long image = 64;        // input frame side after augmentation
  long spatial_pool = 4;  // average-pool factor before patching
  long patch = 8;         // patch side on the pooled image
  long dim = 32;          // feature dim D* = D
  long depth = 1;
  int heads = 2;
  long ffn_dim = 128;
  bool use_lora = false;  // adapters on the top layers, rank 4 / alpha 4.0
  int lora_top_layers = 3;

  long pooled_side() const { return image / spatial_pool; }
  long patches_per_side() const { return pooled_side() / patch; }
  long num_patches() const {
    return patches_per_side() * patches_per_side();
  }
  long patch_dim() const { return channels * patch * patch; }
  long tokens_per_frame() const { return num_patches() + 1; }

  void validate() const {
    if (image % spatial_pool != 0)
      throw ConfigError("visual: image not divisible by spatial_pool");
    if (pooled_side() % patch != 0)
      throw ConfigError("visual: pooled image not divisible by patch");
    if (dim % heads != 0)
      throw ConfigError("visual: dim not divisible by heads");
  }
};

// Pool each frame spatially and unroll it into per-patch rows:
// (T * num_patches) x patch_dim, patches in row-major scan order.
inline ad::Mat frames_to_patch_rows(const FrameSequence& v,
                                    const VisualConfig& cfg) {
  v.validate();
  cfg.validate();
  if (v.channels != cfg.channels || v.height != cfg.image ||
      v.width != cfg.image)
    throw ShapeError("visual: frame shape " + std::to_string(v.channels) +
                     "x" + std::to_string(v.height) + "x" +
                     std::to_string(v.width) + " does not match config");
  long sp = cfg.spatial_pool;
  long side = cfg.pooled_side();
  long pps = cfg.patches_per_side();
  ad::Mat rows(v.frames * cfg.num_patches(), cfg.patch_dim());
  for (long t = 0; t < v.frames; ++t) {
    for (long py = 0; py < pps; ++py)
      for (long px = 0; px < pps; ++px) {
        long r = t * cfg.num_patches() + py * pps + px;
        long col = 0;
        for (long c = 0; c < v.channels; ++c)
          for (long y = 0; y < cfg.patch; ++y)
            for (long x = 0; x < cfg.patch; ++x) {
              long gy = (py * cfg.patch + y) * sp;
              long gx = (px * cfg.patch + x) * sp;
              double acc = 0.0;
              for (long dy = 0; dy < sp; ++dy)
                for (long dx = 0; dx < sp; ++dx)
                  acc += v.at(t, c, gy + dy, gx + dx);
              rows(r, col++) = acc / static_cast<double>(sp * sp);
              (void)side;
            }
      }
  }
  return rows;
}

class VisualFrontend {
 public:
  VisualFrontend() = default;
  VisualFrontend(const VisualConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg),
        patch_embed_("visual.patch_embed", cfg.patch_dim(), cfg.dim, rng),
        cls_("visual.cls", randn(1, cfg.dim, 0.02, rng)),
        pos_("visual.pos",
             randn(cfg.tokens_per_frame(), cfg.dim, 0.02, rng)),
        final_ln_("visual.final_ln", cfg.dim),
        head_("visual.head", cfg.dim, cfg.dim, rng),
        bn_("visual.bn", cfg.dim) {
    cfg.validate();
    AttentionOptions o;
    o.num_heads = cfg.heads;
    o.block_len = cfg.tokens_per_frame();
    for (long l = 0; l < cfg.depth; ++l)
      layers_.emplace_back("visual.layer" + std::to_string(l), cfg.dim,
                           cfg.ffn_dim, o, rng);
    if (cfg.use_lora) {
      LowRankAdapterConfig lc;
      lc.rank = 4;
      lc.alpha = 4.0;
      lc.dropout = 0.1;
      lc.target_projections = {"q", "k", "v", "o"};
      long first = std::max<long>(0, cfg.depth - cfg.lora_top_layers);
      for (long l = first; l < cfg.depth; ++l) {
        std::string nm = "visual.layer" + std::to_string(l);
        layers_[l].attn.attach_lora(nm, lc, rng);
        layers_[l].ffn.attach_lora(nm + ".ffn", lc, rng);
      }
    }
  }

  const VisualConfig& config() const { return cfg_; }

  // F_video: T* x D rows of per-frame class-token features.
  Var encode_frames(Tape& t, const FrameSequence& v, std::mt19937_64& rng,
                    bool training) {
    return encode_patch_rows(t, t.constant(frames_to_patch_rows(v, cfg_)),
                             v.frames, rng, training);
  }

  // Same, from pre-extracted patch rows ((frames * num_patches) x
  // patch_dim); the trainer caches those to avoid re-pooling raw pixels
  // every epoch.
  Var encode_patch_rows(Tape& t, Var patches, long frames,
                        std::mt19937_64& rng, bool training) {
    if (patches.rows() != frames * cfg_.num_patches() ||
        patches.cols() != cfg_.patch_dim())
      throw ShapeError("visual: patch-row matrix shape mismatch");
    Var emb = patch_embed_(t, patches);
    Var cls = ad::repeat_rows(t.param(cls_), frames);
    Var tokens = ad::interleave_rows(cls, emb, 1, cfg_.num_patches());
    tokens = ad::add(tokens, ad::repeat_rows(t.param(pos_), frames));
    std::vector<long> pos(tokens.rows());
    for (long i = 0; i < tokens.rows(); ++i)
      pos[i] = i % cfg_.tokens_per_frame();
    for (auto& layer : layers_)
      tokens = layer(t, tokens, pos, {}, rng, training);
    tokens = final_ln_(t, tokens);
    std::vector<long> cls_rows(frames);
    for (long f = 0; f < frames; ++f)
      cls_rows[f] = f * cfg_.tokens_per_frame();
    Var feats = ad::gather_rows(tokens, std::move(cls_rows));
    return bn_(t, head_(t, feats), training);
  }

  void collect(std::vector<Param*>& out) {
    patch_embed_.collect(out);
    out.push_back(&cls_);
    out.push_back(&pos_);
    for (auto& l : layers_) l.collect(out);
    final_ln_.collect(out);
    head_.collect(out);
    bn_.collect(out);
  }

 private:
  VisualConfig cfg_;
  Linear patch_embed_;
  Param cls_;
  Param pos_;
  std::vector<EncoderLayer> layers_;
  LayerNorm final_ln_;
  Linear head_;
  BatchNorm bn_;
};

struct DistillFused {
  Var f_star;  // T* x 288, matched against the teacher
  Var f_hat;   // T* x 2D, input to the temporal encoder
};

// F* = mapper1(F); F' = mapper2(F*); F_hat = concat(F', F).
inline DistillFused distill_fuse(Tape& t, Var f_video, MapperBlock& mapper1,
                                 MapperBlock& mapper2) {
  if (mapper1.input_dim() != f_video.cols())
    throw ConfigError("distill_fuse: mapper1 input dim mismatch");
  if (mapper2.input_dim() != mapper1.output_dim() ||
      mapper2.output_dim() != f_video.cols())
    throw ConfigError("distill_fuse: mapper2 must map 288 back to D");
  Var f_star = mapper1(t, f_video);
  Var f_prime = mapper2(t, f_star);
  return {f_star, ad::concat_cols(f_prime, f_video)};
}

// Mean over all T* x 288 entries of the per-entry deviation from the
// teacher; the teacher is a constant (no gradient flows into it).
inline Var distill_loss(Tape& t, Var f_star, const HandTeacherFeatures& teacher,
                        DistillLossKind kind = DistillLossKind::kAbs) {
  if (f_star.rows() != teacher.per_frame.rows() ||
      f_star.cols() != teacher.per_frame.cols())
    throw ShapeError("distill_loss: student/teacher shape mismatch");
  Var target = t.constant(teacher.per_frame);
  return kind == DistillLossKind::kAbs ? ad::mean_abs_diff(f_star, target)
                                       : ad::mean_sq_diff(f_star, target);
}

}  // namespace gfslt
