// Command-line driver: dataset generation, description, two-phase
// training, translation, evaluation, and the ablation grid.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gfslt/checkpoint.hpp"
#include "gfslt/data.hpp"
#include "gfslt/descriptor.hpp"
#include "gfslt/metrics.hpp"
#include "gfslt/model.hpp"
#include "gfslt/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gfslt;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file: " + path);
  return json::parse(f);
}

json section(const json& cfg, const std::string& name) {
  return cfg.contains(name) ? cfg.at(name) : json::object();
}

ModelConfig model_config_from(const json& cfg) {
  std::string preset = cfg.value("model_preset", "default");
  ModelConfig mc = model_preset(preset);
  if (cfg.contains("model")) mc = ModelConfig::from_json(cfg.at("model"));
  return mc;
}

SyntheticDatasetConfig dataset_config_from(const json& cfg) {
  SyntheticDatasetConfig dc;
  if (cfg.contains("dataset")) {
    json merged = dc.to_json();
    for (auto& [k, v] : cfg.at("dataset").items()) merged[k] = v;
    dc = SyntheticDatasetConfig::from_json(merged);
  }
  return dc;
}

std::vector<std::string> splits_arg(const std::string& split) {
  if (split == "all") return {"train", "val", "test"};
  return {split};
}

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gloss-free sign language translation toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, split = "test", ckpt;
  uint64_t seed = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "JSON config file")
      ->each([](const std::string&) {});
  app.add_option("--seed", seed, "Random seed")
      ->each([&](const std::string&) { seed_set = true; });
  app.add_option("--out-dir", out_dir, "Output directory");

  // generate-data ------------------------------------------------------
  auto* gen = app.add_subcommand("generate-data", "Render a synthetic dataset");

  // describe -----------------------------------------------------------
  auto* desc = app.add_subcommand("describe", "Describe videos segment-wise");
  std::string backend_name = "mock", endpoint, cache_dir, prompts_dir;
  std::string desc_out;
  double rate_limit = 0.0;
  int max_attempts = 3, concurrency = 1;
  desc->add_option("--data", data_dir, "Dataset directory")->required();
  desc->add_option("--split", split, "train|val|test|all");
  desc->add_option("--backend", backend_name, "mock|http");
  desc->add_option("--endpoint", endpoint, "HTTP backend base URL");
  desc->add_option("--cache-dir", cache_dir, "Description cache directory");
  desc->add_option("--prompts-dir", prompts_dir,
                   "Directory with describe.txt and merge.txt");
  desc->add_option("--out", desc_out, "Output JSONL path");
  desc->add_option("--rate-limit", rate_limit, "Max requests per second");
  desc->add_option("--max-attempts", max_attempts, "Retry budget per segment");
  desc->add_option("--concurrency", concurrency, "Parallel segment requests");

  // pretrain / finetune --------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "Contrastive pre-training");
  auto* fine = app.add_subcommand("finetune", "Translation fine-tuning");
  std::string init_ckpt;
  for (auto* cmd : {pre, fine}) {
    cmd->add_option("--data", data_dir, "Dataset directory")->required();
    cmd->add_option("--init", init_ckpt, "Checkpoint to start from");
  }

  // translate ------------------------------------------------------------
  auto* tr = app.add_subcommand("translate", "Translate samples");
  long index = -1;
  tr->add_option("--ckpt", ckpt, "Model checkpoint directory")->required();
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--split", split, "train|val|test");
  tr->add_option("--index", index, "Sample index; -1 translates the split");
  int beam = 5;
  double length_penalty = 1.0;
  tr->add_option("--beam", beam, "Beam size (1 = greedy)");
  tr->add_option("--length-penalty", length_penalty, "Length exponent alpha");

  // evaluate ---------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a split");
  std::string html_out;
  ev->add_option("--ckpt", ckpt, "Model checkpoint directory")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--split", split, "train|val|test");
  ev->add_option("--beam", beam, "Beam size (1 = greedy)");
  ev->add_option("--length-penalty", length_penalty, "Length exponent alpha");
  ev->add_option("--html", html_out, "Optional HTML diff gallery path");

  // ablate ------------------------------------------------------------------
  auto* ab = app.add_subcommand("ablate", "Pre-training ablation grid");
  std::string seeds_arg = "1,2,3";
  ab->add_option("--data", data_dir, "Dataset directory")->required();
  ab->add_option("--seeds", seeds_arg, "Comma-separated seed list");

  // global options (--config/--seed/--out-dir) may appear after the
  // subcommand name
  for (auto* cmd : app.get_subcommands({})) cmd->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    json cfg = load_config(config_path);

    if (gen->parsed()) {
      if (out_dir.empty()) throw ConfigError("generate-data needs --out-dir");
      SyntheticDatasetConfig dc = dataset_config_from(cfg);
      if (seed_set) dc.seed = seed;
      generate_dataset(dc, out_dir);
      std::cout << "dataset written to " << out_dir << "\n";
      return 0;
    }

    if (desc->parsed()) {
      std::unique_ptr<DescriberBackend> backend;
      if (backend_name == "mock")
        backend = std::make_unique<MockBackend>();
      else if (backend_name == "http") {
        if (endpoint.empty()) throw ConfigError("http backend needs --endpoint");
        backend = std::make_unique<HttpBackend>(endpoint);
      } else {
        throw ConfigError("unknown backend: " + backend_name);
      }
      DescribeOptions opt;
      if (!cache_dir.empty()) opt.cache_dir = cache_dir;
      if (!prompts_dir.empty())
        opt.prompts = PromptTemplates::from_files(
            fs::path(prompts_dir) / "describe.txt",
            fs::path(prompts_dir) / "merge.txt");
      opt.retry.max_attempts = max_attempts;
      opt.rate_limit_rps = rate_limit;
      opt.max_concurrency = concurrency;
      fs::path out_path = desc_out.empty()
                              ? fs::path(data_dir) / "descriptions.jsonl"
                              : fs::path(desc_out);
      std::ofstream out(out_path);
      if (!out) throw IoError("cannot write " + out_path.string());
      DescribeStats stats;
      long count = 0;
      for (const std::string& sp : splits_arg(split)) {
        DatasetReader reader(data_dir, sp);
        for (size_t i = 0; i < reader.size(); ++i) {
          Sample s = reader.load(i);
          DescriptionDocument doc =
              describe_video(s.frames, *backend, opt, &stats);
          out << json{{"sample_id", doc.sample_id},
                      {"split", sp},
                      {"segments", doc.segment_texts},
                      {"description", doc.merged_text},
                      {"provenance", doc.provenance}}
                     .dump()
              << "\n";
          count++;
        }
      }
      std::cout << "described " << count << " samples ("
                << stats.backend_calls << " backend calls, "
                << stats.cache_hits << " cache hits) -> " << out_path << "\n";
      return 0;
    }

    if (pre->parsed() || fine->parsed()) {
      bool is_pre = pre->parsed();
      if (out_dir.empty()) throw ConfigError("training needs --out-dir");
      DatasetReader train_set(data_dir, "train");
      DatasetReader val_set(data_dir, "val");

      TrainConfig tc = TrainConfig::from_json(
          section(cfg, is_pre ? "pretrain" : "finetune"));
      if (!cfg.contains(is_pre ? "pretrain" : "finetune") ||
          !cfg.at(is_pre ? "pretrain" : "finetune").contains("epochs"))
        tc.epochs = is_pre ? 30 : 60;
      if (seed_set) tc.seed = seed;

      Model model;
      if (!init_ckpt.empty()) {
        model = load_model(init_ckpt);
      } else {
        std::mt19937_64 rng(tc.seed);
        model = Model(model_config_from(cfg), target_vocab(train_set), rng);
      }
      if (is_pre) {
        auto r = pretrain(model, train_set, val_set, tc, out_dir);
        std::cout << "pretraining done: best val loss " << r.best_val
                  << " after " << r.steps << " steps\n";
      } else {
        auto r = finetune(model, train_set, val_set, tc, out_dir);
        std::cout << "finetuning done: best val BLEU-4 " << r.best_val
                  << " after " << r.steps << " steps\n";
      }
      return 0;
    }

    if (tr->parsed() || ev->parsed()) {
      Model model = load_model(ckpt);
      DatasetReader reader(data_dir, split);
      DecodeOptions dopt;
      dopt.mode = beam <= 1 ? DecodeOptions::Mode::kGreedy
                            : DecodeOptions::Mode::kBeam;
      dopt.beam_size = beam;
      dopt.length_penalty = length_penalty;

      if (tr->parsed()) {
        std::mt19937_64 rng(0);
        size_t begin = index >= 0 ? size_t(index) : 0;
        size_t end = index >= 0 ? size_t(index) + 1 : reader.size();
        for (size_t i = begin; i < end; ++i) {
          Sample s = reader.load(i);
          Tape t;
          auto states = model.encode_video(t, s.frames, rng, false);
          TokenSequence hyp = model.translator.decode(t, states.y, states.mask,
                                                      dopt, model.vocab());
          std::cout << s.sample_id << "\t" << hyp.text << "\t(ref: "
                    << s.target_text << ")\n";
        }
        return 0;
      }

      EvalReport rep = evaluate(model, reader, dopt, !html_out.empty());
      json report = rep.to_json();
      report["split"] = split;
      std::cout << report.dump(2) << "\n";
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream(fs::path(out_dir) / "report.json")
            << report.dump(2) << "\n";
      }
      if (!html_out.empty()) {
        std::ofstream h(html_out);
        h << "<html><head><style>.match{background:#c8f7c5}</style></head>"
          << "<body><h1>Translations (" << split << ")</h1>\n";
        for (const auto& [hyp, ref] : rep.pairs) {
          auto toks = highlight_diff(tokenize(hyp), tokenize(ref));
          h << "<p><b>hyp:</b> " << render_diff_html(toks)
            << "<br><b>ref:</b> " << html_escape(ref) << "</p>\n";
        }
        h << "</body></html>\n";
      }
      return 0;
    }

    if (ab->parsed()) {
      if (out_dir.empty()) throw ConfigError("ablate needs --out-dir");
      std::vector<uint64_t> seeds;
      std::stringstream ss(seeds_arg);
      std::string tok;
      while (std::getline(ss, tok, ',')) seeds.push_back(std::stoull(tok));
      TrainConfig pc = TrainConfig::from_json(section(cfg, "pretrain"));
      TrainConfig fc = TrainConfig::from_json(section(cfg, "finetune"));
      auto rows = run_ablation(data_dir, model_config_from(cfg), pc, fc, seeds,
                               default_ablation_cells(), out_dir);
      for (const auto& r : rows)
        std::cout << r.name << ": mean B-4 " << r.mean << " +/- " << r.stddev
                  << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
