#pragma once

// Training driver: two-phase optimization (contrastive pre-training, then
// translation fine-tuning with a fresh decoder), evaluation, and the
// ablation grid. Samples are prepared once per run — patch rows extracted,
// targets tokenized, frozen text embeddings pooled and cached — so epochs
// touch only the trainable graph.

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gfslt/alignment.hpp"
#include "gfslt/checkpoint.hpp"
#include "gfslt/data.hpp"
#include "gfslt/metrics.hpp"
#include "gfslt/model.hpp"
#include "gfslt/optim.hpp"
#include "gfslt/translator.hpp"

namespace gfslt {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  AdamWConfig opt;
  LossWeights weights;          // pretraining loss mix
  uint64_t seed = 0;
  long max_steps = 0;           // 0 = no cap
  double warmup_frac = 0.05;    // linear lr warmup over this step fraction
  double final_lr_frac = 0.05;  // cosine-decay lr floor as a fraction of lr
  bool fresh_decoder = true;    // reinitialize the decoder at finetune start
  int log_every = 10;
  DecodeOptions val_decode{DecodeOptions::Mode::kGreedy, 1, 64, 1.0};

  nlohmann::json to_json() const {
    return nlohmann::json{{"epochs", epochs},
                          {"batch_size", batch_size},
                          {"lr", opt.lr},
                          {"weight_decay", opt.weight_decay},
                          {"clip_norm", opt.clip_norm},
                          {"lambda_align", weights.lambda_align},
                          {"lambda_desc", weights.lambda_desc},
                          {"lambda_distill", weights.lambda_distill},
                          {"seed", seed},
                          {"max_steps", max_steps},
                          {"warmup_frac", warmup_frac},
                          {"final_lr_frac", final_lr_frac},
                          {"fresh_decoder", fresh_decoder}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("epochs")) c.epochs = j.at("epochs");
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size");
    if (j.contains("lr")) c.opt.lr = j.at("lr");
    if (j.contains("weight_decay")) c.opt.weight_decay = j.at("weight_decay");
    if (j.contains("clip_norm")) c.opt.clip_norm = j.at("clip_norm");
    if (j.contains("lambda_align")) c.weights.lambda_align = j.at("lambda_align");
    if (j.contains("lambda_desc")) c.weights.lambda_desc = j.at("lambda_desc");
    if (j.contains("lambda_distill"))
      c.weights.lambda_distill = j.at("lambda_distill");
    if (j.contains("seed")) c.seed = j.at("seed");
    if (j.contains("max_steps")) c.max_steps = j.at("max_steps");
    if (j.contains("warmup_frac")) c.warmup_frac = j.at("warmup_frac");
    if (j.contains("final_lr_frac")) c.final_lr_frac = j.at("final_lr_frac");
    if (j.contains("fresh_decoder")) c.fresh_decoder = j.at("fresh_decoder");
    return c;
  }
};

// Model size presets. "default" is sized so the end-to-end schedule fits a
// single laptop core; "paper" mirrors the larger configuration, "tiny" is
// for fast tests.
inline ModelConfig model_preset(const std::string& name) {
  ModelConfig c;  // struct defaults are the "default" preset
  if (name == "default") return c;
  if (name == "tiny") {
    c.visual.dim = 16;
    c.visual.heads = 2;
    c.visual.ffn_dim = 32;
    c.temporal.num_layers = 2;
    c.temporal.downsample_after_layer = 1;
    c.temporal.input_dim = 32;
    c.temporal.hidden_dim = 32;
    c.temporal.num_heads = 4;
    c.temporal.ffn_dim = 64;
    c.translator.input_dim = 64;
    c.translator.dim = 32;
    c.translator.enc_layers = 1;
    c.translator.dec_layers = 1;
    c.translator.heads = 4;
    c.translator.ffn_dim = 64;
    return c;
  }
  if (name == "paper") {
    c.visual.dim = 128;
    c.visual.depth = 4;
    c.visual.heads = 8;
    c.visual.ffn_dim = 512;
    c.temporal.input_dim = 256;
    c.temporal.hidden_dim = 256;
    c.temporal.ffn_dim = 1024;
    c.translator.input_dim = 512;
    c.translator.dim = 128;
    c.translator.enc_layers = 4;
    c.translator.dec_layers = 4;
    c.translator.ffn_dim = 512;
    return c;
  }
  throw ConfigError("unknown model preset: " + name);
}

// ---------------------------------------------------------------------------
// Per-sample preparation
// ---------------------------------------------------------------------------

struct PreparedSample {
  std::string sample_id;
  Mat patch_rows;      // (frames * num_patches) x patch_dim
  long frames = 0;
  Mat teacher;         // frames x 288, empty when distillation is off
  TokenSequence target;
  Mat target_text_emb; // 1 x K pooled frozen embedding (pretraining)
  Mat desc_text_emb;   // 1 x K pooled frozen embedding (pretraining)
};

// Pooled output of a frozen encoder for one text; runs on a throwaway tape.
inline Mat frozen_pooled(FrozenTextEncoder& enc, const Vocabulary& v,
                         const std::string& text) {
  Tape t;
  Var x = enc.encode(t, v.encode(text).ids);
  return ad::masked_mean_pool(x, std::vector<uint8_t>(x.rows(), 1)).val();
}

struct PrepareOptions {
  bool need_teacher = false;
  bool need_text = false;  // frozen target/description embeddings
};

inline std::vector<PreparedSample> prepare_samples(
    const DatasetReader& reader, Model& model, const Vocabulary& desc_vocab,
    const PrepareOptions& opt) {
  FrozenTextEncoder target_enc, desc_enc;
  if (opt.need_text) {
    target_enc = model.make_text_encoder("target", model.vocab());
    desc_enc = model.make_text_encoder("desc", desc_vocab);
  }
  std::vector<PreparedSample> out;
  out.reserve(reader.size());
  for (size_t i = 0; i < reader.size(); ++i) {
    Sample s = reader.load(i);
    PreparedSample p;
    p.sample_id = s.sample_id;
    p.patch_rows = frames_to_patch_rows(s.frames, model.config().visual);
    p.frames = s.frames.frames;
    p.target = model.vocab().encode(s.target_text);
    if (opt.need_teacher) p.teacher = s.teacher.per_frame;
    if (opt.need_text) {
      p.target_text_emb = frozen_pooled(target_enc, model.vocab(),
                                        s.target_text);
      p.desc_text_emb = frozen_pooled(desc_enc, desc_vocab,
                                      s.description_text);
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline Vocabulary description_vocab(const DatasetReader& train) {
  std::vector<std::string> texts;
  for (size_t i = 0; i < train.size(); ++i)
    texts.push_back(train.description_text(i));
  return Vocabulary::from_corpus(texts);
}

inline Vocabulary target_vocab(const DatasetReader& train) {
  std::vector<std::string> texts;
  for (size_t i = 0; i < train.size(); ++i)
    texts.push_back(train.target_text(i));
  return Vocabulary::from_corpus(texts);
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainBatchLoss {
  double align = 0.0, desc = 0.0, distill = 0.0, total = 0.0;
};

// Forward pass plus loss assembly for one batch of prepared samples.
// When `grad` is false the batch runs in eval mode for validation.
inline PretrainBatchLoss pretrain_batch(Model& model,
                                        const std::vector<PreparedSample*>& batch,
                                        const LossWeights& w,
                                        std::mt19937_64& rng, bool grad,
                                        AdamW* opt) {
  Tape t;
  bool training = grad;
  std::vector<Var> align_rows, desc_rows, distill_terms;
  Mat target_emb(long(batch.size()), model.config().translator.dim);
  Mat desc_emb(long(batch.size()), model.config().translator.dim);
  for (size_t i = 0; i < batch.size(); ++i) {
    PreparedSample* p = batch[i];
    auto states = model.encode_patch_rows(t, t.constant(p->patch_rows),
                                          p->frames, rng, training);
    if (w.lambda_distill > 0.0) {
      HandTeacherFeatures teacher{p->teacher};
      distill_terms.push_back(
          distill_loss(t, states.f_star, teacher, model.config().distill_kind));
    }
    if (w.lambda_align > 0.0) {
      align_rows.push_back(ad::masked_mean_pool(states.y, states.mask));
      target_emb.row(i) = p->target_text_emb.row(0);
    }
    if (w.lambda_desc > 0.0) {
      desc_rows.push_back(ad::masked_mean_pool(states.z_star, states.mask));
      desc_emb.row(i) = p->desc_text_emb.row(0);
    }
  }
  PretrainLossParts parts;
  if (!align_rows.empty())
    parts.l_align = symmetric_info_nce({ad::concat_rows(align_rows),
                                        t.constant(target_emb),
                                        t.param(model.log_tau_align)});
  if (!desc_rows.empty())
    parts.l_desc = symmetric_info_nce({ad::concat_rows(desc_rows),
                                       t.constant(desc_emb),
                                       t.param(model.log_tau_desc)});
  if (!distill_terms.empty()) {
    Var acc = distill_terms[0];
    for (size_t i = 1; i < distill_terms.size(); ++i)
      acc = ad::add(acc, distill_terms[i]);
    parts.l_distill = ad::scale(acc, 1.0 / double(distill_terms.size()));
  }
  Var total = pretrain_loss(t, parts, w);

  PretrainBatchLoss out;
  out.align = parts.l_align ? parts.l_align->val()(0, 0) : 0.0;
  out.desc = parts.l_desc ? parts.l_desc->val()(0, 0) : 0.0;
  out.distill = parts.l_distill ? parts.l_distill->val()(0, 0) : 0.0;
  out.total = total.val()(0, 0);
  if (grad) {
    t.backward(total);
    opt->step();
    model.clamp_temperatures();
  }
  return out;
}

struct PhaseResult {
  double best_val = 0.0;  // loss for pretraining, BLEU-4 for fine-tuning
  long steps = 0;
  fs::path best_checkpoint;
};

// Linear warmup to the peak rate, then cosine decay down to
// final_lr_frac of it by the last step.
inline double scheduled_lr(const TrainConfig& cfg, long step,
                           long total_steps) {
  double peak = cfg.opt.lr;
  long warm = std::max<long>(1, long(cfg.warmup_frac * double(total_steps)));
  if (step < warm) return peak * double(step + 1) / double(warm);
  double floor_lr = peak * cfg.final_lr_frac;
  double u = total_steps > warm
                 ? double(step - warm) / double(total_steps - warm)
                 : 1.0;
  return floor_lr + 0.5 * (peak - floor_lr) * (1.0 + std::cos(M_PI * u));
}

inline long steps_per_epoch(size_t n, int batch_size) {
  return long((n + size_t(batch_size) - 1) / size_t(batch_size));
}

inline PhaseResult pretrain(Model& model, const DatasetReader& train,
                            const DatasetReader& val, const TrainConfig& cfg,
                            const fs::path& out_dir) {
  cfg.weights.validate();
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "pretrain_log.jsonl");

  Vocabulary desc_vocab = description_vocab(train);
  PrepareOptions popt;
  popt.need_teacher = cfg.weights.lambda_distill > 0.0;
  popt.need_text =
      cfg.weights.lambda_align > 0.0 || cfg.weights.lambda_desc > 0.0;
  auto train_set = prepare_samples(train, model, desc_vocab, popt);
  auto val_set = prepare_samples(val, model, desc_vocab, popt);

  std::mt19937_64 rng(cfg.seed);
  AdamW opt(model.parameters(), cfg.opt);

  PhaseResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  long step = 0;
  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  long total_steps =
      long(cfg.epochs) * steps_per_epoch(train_set.size(), cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<PreparedSample*> batch;
      for (size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i)
        batch.push_back(&train_set[order[i]]);
      opt.set_lr(scheduled_lr(cfg, step, total_steps));
      auto loss = pretrain_batch(model, batch, cfg.weights, rng, true, &opt);
      step++;
      if (step % cfg.log_every == 0 || step == 1)
        log << nlohmann::json{{"step", step},
                              {"epoch", epoch},
                              {"l_align", loss.align},
                              {"l_desc", loss.desc},
                              {"l_distill", loss.distill},
                              {"total", loss.total},
                              {"tau_align",
                               std::exp(model.log_tau_align.value(0, 0))},
                              {"tau_desc",
                               std::exp(model.log_tau_desc.value(0, 0))}}
                   .dump()
            << "\n";
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
    }

    // validation loss in eval mode
    double vloss = 0.0;
    long vbatches = 0;
    for (size_t b = 0; b < val_set.size(); b += cfg.batch_size) {
      std::vector<PreparedSample*> batch;
      for (size_t i = b; i < std::min(val_set.size(), b + size_t(cfg.batch_size));
           ++i)
        batch.push_back(&val_set[i]);
      vloss +=
          pretrain_batch(model, batch, cfg.weights, rng, false, nullptr).total;
      vbatches++;
    }
    vloss /= std::max(1L, vbatches);
    log << nlohmann::json{{"epoch", epoch}, {"val_loss", vloss}}.dump() << "\n";
    if (vloss < result.best_val) {
      result.best_val = vloss;
      result.best_checkpoint = out_dir / "best";
      std::ostringstream rs;
      rs << rng;
      save_checkpoint(result.best_checkpoint, model,
                      {{"phase", "pretrain"},
                       {"epoch", epoch},
                       {"step", step},
                       {"val_loss", vloss},
                       {"train", cfg.to_json()}},
                      &opt, rs.str());
    }
    if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
  }
  result.steps = step;
  std::ostringstream rs;
  rs << rng;
  save_checkpoint(out_dir / "last", model,
                  {{"phase", "pretrain"},
                   {"epoch", cfg.epochs - 1},
                   {"step", step},
                   {"train", cfg.to_json()}},
                  &opt, rs.str());
  return result;
}

// ---------------------------------------------------------------------------
// Fine-tuning and evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0, rouge = 0.0;
  long num_samples = 0;
  std::vector<std::pair<std::string, std::string>> pairs;  // hyp, ref

  nlohmann::json to_json() const {
    return nlohmann::json{{"bleu1", bleu1},     {"bleu2", bleu2},
                          {"bleu3", bleu3},     {"bleu4", bleu4},
                          {"rouge_l", rouge},   {"num_samples", num_samples}};
  }
};

// Decodes every prepared sample and scores the corpus.
inline EvalReport evaluate_prepared(Model& model,
                                    std::vector<PreparedSample>& set,
                                    const DecodeOptions& dec,
                                    bool keep_pairs = false) {
  std::mt19937_64 rng(0);
  CorpusPair corpus;
  EvalReport rep;
  for (PreparedSample& p : set) {
    Tape t;
    auto states = model.encode_patch_rows(t, t.constant(p.patch_rows),
                                          p.frames, rng, false);
    TokenSequence hyp = model.translator.decode(t, states.y, states.mask, dec,
                                                model.vocab());
    corpus.hypotheses.push_back(tokenize(hyp.text));
    corpus.references.push_back(tokenize(p.target.text));
    if (keep_pairs) rep.pairs.emplace_back(hyp.text, p.target.text);
  }
  rep.bleu1 = bleu(corpus, 1);
  rep.bleu2 = bleu(corpus, 2);
  rep.bleu3 = bleu(corpus, 3);
  rep.bleu4 = bleu(corpus, 4);
  rep.rouge = rouge_l(corpus);
  rep.num_samples = long(corpus.hypotheses.size());
  return rep;
}

inline EvalReport evaluate(Model& model, const DatasetReader& reader,
                           const DecodeOptions& dec, bool keep_pairs = false) {
  auto set = prepare_samples(reader, model, Vocabulary(), {});
  return evaluate_prepared(model, set, dec, keep_pairs);
}

inline PhaseResult finetune(Model& model, const DatasetReader& train,
                            const DatasetReader& val, const TrainConfig& cfg,
                            const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "finetune_log.jsonl");

  auto train_set = prepare_samples(train, model, Vocabulary(), {});
  auto val_set = prepare_samples(val, model, Vocabulary(), {});

  std::mt19937_64 rng(cfg.seed);
  if (cfg.fresh_decoder) model.translator.init_decoder(rng);
  AdamW opt(model.parameters(), cfg.opt);

  PhaseResult result;
  result.best_val = -1.0;
  long step = 0;
  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  long total_steps =
      long(cfg.epochs) * steps_per_epoch(train_set.size(), cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t b = 0; b < order.size(); b += cfg.batch_size) {
      opt.set_lr(scheduled_lr(cfg, step, total_steps));
      Tape t;
      Var acc = t.constant(Mat::Zero(1, 1));
      long n = 0;
      for (size_t i = b; i < std::min(order.size(), b + size_t(cfg.batch_size));
           ++i) {
        PreparedSample& p = train_set[order[i]];
        auto states = model.encode_patch_rows(t, t.constant(p.patch_rows),
                                              p.frames, rng, true);
        Var logits = model.translator.decode_logits(
            t, states.y, states.mask, decoder_inputs(p.target), rng, true);
        acc = ad::add(acc, slt_loss(t, logits, decoder_targets(p.target)).mean);
        n++;
      }
      Var loss = ad::scale(acc, 1.0 / double(n));
      t.backward(loss);
      opt.step();
      step++;
      if (step % cfg.log_every == 0 || step == 1)
        log << nlohmann::json{{"step", step},
                              {"epoch", epoch},
                              {"loss", loss.val()(0, 0)}}
                   .dump()
            << "\n";
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
    }

    EvalReport vrep = evaluate_prepared(model, val_set, cfg.val_decode);
    log << nlohmann::json{{"epoch", epoch}, {"val_bleu4", vrep.bleu4}}.dump()
        << "\n";
    // BLEU-4 picks the checkpoint; BLEU-1 breaks ties, which matters on
    // small validation splits where corpus BLEU-4 is coarse.
    double score = vrep.bleu4 + 1e-3 * vrep.bleu1;
    if (score > result.best_val) {
      result.best_val = score;
      result.best_checkpoint = out_dir / "best";
      std::ostringstream rs;
      rs << rng;
      save_checkpoint(result.best_checkpoint, model,
                      {{"phase", "finetune"},
                       {"epoch", epoch},
                       {"step", step},
                       {"val_bleu4", vrep.bleu4},
                       {"train", cfg.to_json()}},
                      &opt, rs.str());
    }
    if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
  }
  result.steps = step;
  std::ostringstream rs;
  rs << rng;
  save_checkpoint(out_dir / "last", model,
                  {{"phase", "finetune"},
                   {"epoch", cfg.epochs - 1},
                   {"step", step},
                   {"train", cfg.to_json()}},
                  &opt, rs.str());
  return result;
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct AblationCell {
  std::string name;
  bool pretrain_phase = true;
  LossWeights weights;
};

struct AblationRow {
  std::string name;
  std::vector<double> bleu4;  // per seed; NaN marks a failed run
  double mean = 0.0, stddev = 0.0;
  std::vector<std::string> failures;
};

inline std::vector<AblationCell> default_ablation_cells() {
  auto w = [](double distill, double desc, double align) {
    LossWeights lw;
    lw.lambda_distill = distill;
    lw.lambda_desc = desc;
    lw.lambda_align = align;
    return lw;
  };
  return {
      {"no_pretrain", false, w(0, 0, 0)},
      {"align_only", true, w(0, 0, 1.0)},
      {"full", true, w(0.3, 0.5, 1.0)},
  };
}

inline std::vector<AblationRow> run_ablation(
    const fs::path& data_root, const ModelConfig& base_cfg,
    TrainConfig pre_cfg, TrainConfig fine_cfg,
    const std::vector<uint64_t>& seeds,
    const std::vector<AblationCell>& cells, const fs::path& out_dir,
    const DecodeOptions& test_decode = {}) {
  if (seeds.size() < 1) throw ConfigError("ablation: need at least one seed");
  fs::create_directories(out_dir);
  DatasetReader train(data_root, "train");
  DatasetReader val(data_root, "val");
  DatasetReader test(data_root, "test");
  Vocabulary vocab = target_vocab(train);

  std::vector<AblationRow> rows;
  for (const AblationCell& cell : cells) {
    AblationRow row;
    row.name = cell.name;
    for (uint64_t seed : seeds) {
      try {
        std::mt19937_64 rng(seed);
        Model model(base_cfg, vocab, rng);
        fs::path cell_dir =
            out_dir / (cell.name + "_seed" + std::to_string(seed));
        if (cell.pretrain_phase) {
          TrainConfig pc = pre_cfg;
          pc.seed = seed;
          pc.weights = cell.weights;
          pretrain(model, train, val, pc, cell_dir / "pretrain");
        }
        TrainConfig fc = fine_cfg;
        fc.seed = seed;
        finetune(model, train, val, fc, cell_dir / "finetune");
        Model best = load_model(cell_dir / "finetune" / "best");
        EvalReport rep = evaluate(best, test, test_decode);
        row.bleu4.push_back(rep.bleu4);
      } catch (const std::exception& e) {
        row.bleu4.push_back(std::numeric_limits<double>::quiet_NaN());
        row.failures.push_back("seed " + std::to_string(seed) + ": " +
                               e.what());
      }
    }
    double n = 0.0, sum = 0.0, sq = 0.0;
    for (double v : row.bleu4)
      if (std::isfinite(v)) {
        n++;
        sum += v;
        sq += v * v;
      }
    if (n > 0) {
      row.mean = sum / n;
      row.stddev = n > 1 ? std::sqrt((sq - sum * sum / n) / (n - 1)) : 0.0;
    }
    rows.push_back(std::move(row));
  }

  nlohmann::json report = nlohmann::json::array();
  for (const AblationRow& r : rows) {
    nlohmann::json jr{{"name", r.name},
                      {"bleu4", r.bleu4},
                      {"mean", r.mean},
                      {"std", r.stddev},
                      {"failures", r.failures}};
    report.push_back(jr);
  }
  std::ofstream(out_dir / "ablation.json") << report.dump(2) << "\n";
  std::ofstream table(out_dir / "ablation.txt");
  table << "setting              mean B-4   std\n";
  for (const AblationRow& r : rows) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-20s %8.2f %6.2f\n", r.name.c_str(),
                  r.mean, r.stddev);
    table << buf;
  }
  return rows;
}

}  // namespace gfslt
