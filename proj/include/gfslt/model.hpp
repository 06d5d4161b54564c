#pragma once

// Full model assembly: visual frontend, the four mapper blocks, temporal
// encoder, translator, and the two learnable contrastive temperatures.
// The frozen text encoders are deterministic functions of their seed and
// are rebuilt on demand rather than stored here.

#include <json.hpp>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "gfslt/alignment.hpp"
#include "gfslt/errors.hpp"
#include "gfslt/teacher.hpp"
#include "gfslt/temporal.hpp"
#include "gfslt/translator.hpp"
#include "gfslt/visual.hpp"
#include "gfslt/vocab.hpp"

namespace gfslt {

struct ModelConfig {
  VisualConfig visual;
  TemporalConfig temporal;
  TranslatorConfig translator;  // vocab_size is filled in from the corpus
  int text_layers = 1;
  int text_heads = 4;
  uint64_t text_seed = 1234;
  DistillLossKind distill_kind = DistillLossKind::kAbs;

  void validate() const {
    visual.validate();
    temporal.validate();
    if (temporal.input_dim != 2 * visual.dim)
      throw ConfigError("model: temporal input_dim must equal 2 * visual dim");
    if (translator.input_dim != 2 * temporal.hidden_dim)
      throw ConfigError(
          "model: translator input_dim must equal 2 * temporal hidden_dim");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"visual",
         {{"channels", visual.channels},
          {"image", visual.image},
          {"spatial_pool", visual.spatial_pool},
          {"patch", visual.patch},
          {"dim", visual.dim},
          {"depth", visual.depth},
          {"heads", visual.heads},
          {"ffn_dim", visual.ffn_dim},
          {"use_lora", visual.use_lora},
          {"lora_top_layers", visual.lora_top_layers}}},
        {"temporal",
         {{"num_layers", temporal.num_layers},
          {"input_dim", temporal.input_dim},
          {"hidden_dim", temporal.hidden_dim},
          {"num_heads", temporal.num_heads},
          {"ffn_dim", temporal.ffn_dim},
          {"window_size", temporal.window_size},
          {"downsample_after_layer", temporal.downsample_after_layer},
          {"downsample_factor", temporal.downsample_factor},
          {"rope_all_layers", temporal.rope_all_layers}}},
        {"translator",
         {{"input_dim", translator.input_dim},
          {"dim", translator.dim},
          {"enc_layers", translator.enc_layers},
          {"dec_layers", translator.dec_layers},
          {"heads", translator.heads},
          {"ffn_dim", translator.ffn_dim},
          {"vocab_size", translator.vocab_size},
          {"use_lora", translator.use_lora}}},
        {"text_layers", text_layers},
        {"text_heads", text_heads},
        {"text_seed", text_seed},
        {"distill_kind",
         distill_kind == DistillLossKind::kAbs ? "abs" : "squared"}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    const auto& v = j.at("visual");
    c.visual.channels = v.at("channels");
    c.visual.image = v.at("image");
    c.visual.spatial_pool = v.at("spatial_pool");
    c.visual.patch = v.at("patch");
    c.visual.dim = v.at("dim");
    c.visual.depth = v.at("depth");
    c.visual.heads = v.at("heads");
    c.visual.ffn_dim = v.at("ffn_dim");
    c.visual.use_lora = v.at("use_lora");
    c.visual.lora_top_layers = v.at("lora_top_layers");
    const auto& tp = j.at("temporal");
    c.temporal.num_layers = tp.at("num_layers");
    c.temporal.input_dim = tp.at("input_dim");
    c.temporal.hidden_dim = tp.at("hidden_dim");
    c.temporal.num_heads = tp.at("num_heads");
    c.temporal.ffn_dim = tp.at("ffn_dim");
    c.temporal.window_size = tp.at("window_size");
    c.temporal.downsample_after_layer = tp.at("downsample_after_layer");
    c.temporal.downsample_factor = tp.at("downsample_factor");
    c.temporal.rope_all_layers = tp.at("rope_all_layers");
    const auto& tr = j.at("translator");
    c.translator.input_dim = tr.at("input_dim");
    c.translator.dim = tr.at("dim");
    c.translator.enc_layers = tr.at("enc_layers");
    c.translator.dec_layers = tr.at("dec_layers");
    c.translator.heads = tr.at("heads");
    c.translator.ffn_dim = tr.at("ffn_dim");
    c.translator.vocab_size = tr.at("vocab_size");
    c.translator.use_lora = tr.at("use_lora");
    c.text_layers = j.at("text_layers");
    c.text_heads = j.at("text_heads");
    c.text_seed = j.at("text_seed");
    c.distill_kind = j.at("distill_kind") == "abs" ? DistillLossKind::kAbs
                                                   : DistillLossKind::kSquared;
    return c;
  }
};

class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, Vocabulary vocab, std::mt19937_64& rng)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.translator.vocab_size = vocab_.size();
    cfg_.validate();
    visual = VisualFrontend(cfg_.visual, rng);
    mapper1 = MapperBlock("mapper1", cfg_.visual.dim, kTeacherDim, rng);
    mapper2 = MapperBlock("mapper2", kTeacherDim, cfg_.visual.dim, rng);
    temporal = TemporalEncoder(cfg_.temporal, rng);
    mapper3 =
        MapperBlock("mapper3", cfg_.temporal.hidden_dim, cfg_.translator.dim,
                    rng);
    mapper4 =
        MapperBlock("mapper4", cfg_.translator.dim, cfg_.temporal.hidden_dim,
                    rng);
    translator = Translator(cfg_.translator, rng);
    log_tau_align =
        Param("tau.align", Mat::Constant(1, 1, std::log(kTauInit)));
    log_tau_desc = Param("tau.desc", Mat::Constant(1, 1, std::log(kTauInit)));
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }

  // Intermediate states of one video's forward pass.
  struct VideoStates {
    Var f_star;  // T* x 288, against the teacher
    Var z;       // T x hidden, temporal output
    Var z_star;  // T x K, description-space rows
    Var z_hat;   // T x 2*hidden, translator input
    Var y;       // T x K, translator encoder memory
    std::vector<uint8_t> mask;
  };

  VideoStates encode_video(Tape& t, const FrameSequence& v,
                           std::mt19937_64& rng, bool training) {
    return encode_patch_rows(t, t.constant(frames_to_patch_rows(v, cfg_.visual)),
                             v.frames, rng, training);
  }

  VideoStates encode_patch_rows(Tape& t, Var patches, long frames,
                                std::mt19937_64& rng, bool training) {
    Var f = visual.encode_patch_rows(t, patches, frames, rng, training);
    auto fused = distill_fuse(t, f, mapper1, mapper2);
    auto enc = temporal.encode(t, fused.f_hat, {}, rng, training);
    VideoStates s;
    s.f_star = fused.f_star;
    s.z = enc.z;
    s.mask = std::move(enc.mask);
    s.z_star = mapper3(t, s.z);
    s.z_hat = ad::concat_cols(mapper4(t, s.z_star), s.z);
    s.y = translator.llm_encode(t, s.z_hat, s.mask, rng, training);
    return s;
  }

  // Frozen encoders for descriptions and target sentences; deterministic
  // per (seed, vocab), so they are rebuilt instead of checkpointed.
  FrozenTextEncoder make_text_encoder(const std::string& which,
                                      const Vocabulary& text_vocab) const {
    return FrozenTextEncoder("text." + which, text_vocab.size(),
                             cfg_.translator.dim, cfg_.text_layers,
                             cfg_.text_heads,
                             cfg_.text_seed + (which == "desc" ? 1 : 0));
  }

  // Every persistent tensor, in a fixed deterministic order.
  void collect(std::vector<Param*>& out) {
    visual.collect(out);
    mapper1.collect(out);
    mapper2.collect(out);
    temporal.collect(out);
    mapper3.collect(out);
    mapper4.collect(out);
    translator.collect(out);
    out.push_back(&log_tau_align);
    out.push_back(&log_tau_desc);
  }

  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    collect(out);
    return out;
  }

  // Clamp the temperatures into [tau_min, tau_max] after an update.
  void clamp_temperatures() {
    for (Param* p : {&log_tau_align, &log_tau_desc}) {
      double v = p->value(0, 0);
      p->value(0, 0) =
          std::min(std::log(kTauMax), std::max(std::log(kTauMin), v));
    }
  }

  VisualFrontend visual;
  MapperBlock mapper1, mapper2;
  TemporalEncoder temporal;
  MapperBlock mapper3, mapper4;
  Translator translator;
  Param log_tau_align, log_tau_desc;

 private:
  ModelConfig cfg_;
  Vocabulary vocab_;
};

}  // namespace gfslt
