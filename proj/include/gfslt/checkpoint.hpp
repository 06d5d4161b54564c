#pragma once

// Directory-archive checkpoints:
//   <dir>/meta.json    format version, model config, vocabulary, parameter
//                      table, optimizer presence, rng state, extra fields
//   <dir>/params.bin   all parameter payloads, row-major float64 LE, in
//                      the model's collect() order
//   <dir>/opt.bin      AdamW first/second moments per parameter, same
//                      layout, interleaved (m then v)
//
// Payloads are stored at full double precision so save -> load -> resume
// reproduces training bit-for-bit.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gfslt/errors.hpp"
#include "gfslt/model.hpp"
#include "gfslt/optim.hpp"

namespace gfslt {

namespace fs = std::filesystem;

namespace detail {

inline void append_f64(std::ofstream& f, const Mat& m) {
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      double v = m(i, j);
      f.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
}

inline void read_f64(std::ifstream& f, Mat& m) {
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      double v;
      if (!f.read(reinterpret_cast<char*>(&v), sizeof(double)))
        throw IoError("checkpoint: payload truncated");
      m(i, j) = v;
    }
}

}  // namespace detail

struct CheckpointMeta {
  ModelConfig config;
  Vocabulary vocab;
  nlohmann::json extra;      // epoch / step / phase / train settings
  std::string rng_state;     // serialized mt19937_64, empty if absent
  bool has_optimizer = false;
  long optimizer_steps = 0;
};

inline void save_checkpoint(const fs::path& dir, Model& model,
                            const nlohmann::json& extra = {},
                            AdamW* opt = nullptr,
                            const std::string& rng_state = "") {
  fs::create_directories(dir);
  auto params = model.parameters();

  nlohmann::json table = nlohmann::json::array();
  {
    std::ofstream pf(dir / "params.bin", std::ios::binary);
    if (!pf) throw IoError("checkpoint: cannot write params.bin");
    for (Param* p : params) {
      table.push_back({{"name", p->name},
                       {"rows", p->value.rows()},
                       {"cols", p->value.cols()},
                       {"trainable", p->trainable}});
      detail::append_f64(pf, p->value);
    }
  }
  if (opt) {
    if (opt->params().size() != params.size())
      throw ConfigError("checkpoint: optimizer/model parameter count mismatch");
    std::ofstream of(dir / "opt.bin", std::ios::binary);
    if (!of) throw IoError("checkpoint: cannot write opt.bin");
    for (size_t i = 0; i < params.size(); ++i) {
      detail::append_f64(of, opt->first_moments()[i]);
      detail::append_f64(of, opt->second_moments()[i]);
    }
  }

  nlohmann::json meta{{"format", 1},
                      {"model_config", model.config().to_json()},
                      {"vocab", model.vocab().words()},
                      {"params", table},
                      {"rng", rng_state},
                      {"extra", extra},
                      {"optimizer",
                       {{"present", opt != nullptr},
                        {"steps", opt ? opt->steps() : 0}}}};
  std::ofstream mf(dir / "meta.json");
  if (!mf) throw IoError("checkpoint: cannot write meta.json");
  mf << meta.dump(2) << "\n";
}

inline CheckpointMeta read_checkpoint_meta(const fs::path& dir) {
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw IoError("checkpoint: missing meta.json in " + dir.string());
  nlohmann::json meta = nlohmann::json::parse(mf);
  if (meta.at("format") != 1)
    throw IoError("checkpoint: unsupported format version");
  CheckpointMeta out;
  out.config = ModelConfig::from_json(meta.at("model_config"));
  for (const std::string& w : meta.at("vocab")) out.vocab.add_word(w);
  out.extra = meta.at("extra");
  out.rng_state = meta.at("rng");
  out.has_optimizer = meta.at("optimizer").at("present");
  out.optimizer_steps = meta.at("optimizer").at("steps");
  return out;
}

// Reads params.bin into an already-constructed model, verifying the
// parameter table entry by entry.
inline void load_model_params(const fs::path& dir, Model& model) {
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw IoError("checkpoint: missing meta.json in " + dir.string());
  nlohmann::json meta = nlohmann::json::parse(mf);
  auto params = model.parameters();
  const auto& table = meta.at("params");
  if (table.size() != params.size())
    throw IoError("checkpoint: parameter count mismatch: file has " +
                  std::to_string(table.size()) + ", model has " +
                  std::to_string(params.size()));
  std::ifstream pf(dir / "params.bin", std::ios::binary);
  if (!pf) throw IoError("checkpoint: missing params.bin");
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = table[i];
    Param* p = params[i];
    if (e.at("name") != p->name)
      throw IoError("checkpoint: parameter " + std::to_string(i) + " is '" +
                    std::string(e.at("name")) + "' in file but '" + p->name +
                    "' in model");
    if (long(e.at("rows")) != p->value.rows() ||
        long(e.at("cols")) != p->value.cols())
      throw IoError("checkpoint: shape mismatch for " + p->name);
    detail::read_f64(pf, p->value);
    p->zero_grad();
  }
}

inline Model load_model(const fs::path& dir) {
  CheckpointMeta meta = read_checkpoint_meta(dir);
  std::mt19937_64 rng(0);  // values are overwritten from the payload
  Model model(meta.config, meta.vocab, rng);
  load_model_params(dir, model);
  return model;
}

inline void load_optimizer_state(const fs::path& dir, AdamW& opt) {
  CheckpointMeta meta = read_checkpoint_meta(dir);
  if (!meta.has_optimizer)
    throw IoError("checkpoint: no optimizer state in " + dir.string());
  std::ifstream of(dir / "opt.bin", std::ios::binary);
  if (!of) throw IoError("checkpoint: missing opt.bin");
  for (size_t i = 0; i < opt.params().size(); ++i) {
    detail::read_f64(of, opt.first_moments()[i]);
    detail::read_f64(of, opt.second_moments()[i]);
  }
  opt.set_steps(meta.optimizer_steps);
}

}  // namespace gfslt
