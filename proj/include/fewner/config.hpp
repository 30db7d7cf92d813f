#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fewner/errors.hpp"
#include "fewner/inference.hpp"
#include "fewner/model.hpp"
#include "fewner/training.hpp"

namespace fewner {

/// Everything a run needs. Loaded from a TOML-style
/// key/value file ([section] headers plus key = value lines) and overridable
/// from the command line as section.key=value.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  FinetuneConfig finetune;

  // inference
  double gamma = 0.7;
  double alpha = -1.0;  ///< < 0 derives 0.35 * (1 - gamma)
  double beta = -1.0;   ///< < 0 derives 0.65 * (1 - gamma)
  int k_knn = 0;        ///< 0 uses the episode's k_shot
  bool entity_only_bonus = true;
  bool eval_fine_tune = true;

  // data
  std::string corpus;
  std::string format = "column-bio";
  int n_way = 2;
  int k_shot = 2;
  int episodes = 10;
  std::string val_episodes;
  int eval_every = 0;  ///< validation cadence during training; 0 disables
  std::uint64_t model_seed = 1;

  RerankWeights rerank_weights() const {
    if (alpha >= 0.0 && beta >= 0.0) return RerankWeights{gamma, alpha, beta};
    return make_rerank_weights(gamma);
  }

  PredictOptions predict_options(int episode_k_shot) const {
    PredictOptions opts;
    opts.k_shot = episode_k_shot;
    opts.k_knn = k_knn;
    opts.weights = rerank_weights();
    opts.entity_only_bonus = entity_only_bonus;
    return opts;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected a boolean for " + key + ", got \"" + v + "\"");
}

template <typename T>
T parse_number(const std::string& v, const std::string& key) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (in.fail() || !(in >> std::ws).eof())
    throw ConfigError("expected a number for " + key + ", got \"" + v + "\"");
  return out;
}

inline std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
    return v.substr(1, v.size() - 2);
  return v;
}

}  // namespace detail

/// Applies one "section.key=value" assignment; unknown keys are errors.
inline void apply_config_entry(RunConfig& cfg, const std::string& key,
                               const std::string& raw_value) {
  using detail::parse_bool;
  using detail::parse_number;
  const std::string v = detail::unquote(raw_value);

  if (key == "model.d") cfg.model.d = parse_number<int>(v, key);
  else if (key == "model.layers") cfg.model.layers = parse_number<int>(v, key);
  else if (key == "model.heads") cfg.model.heads = parse_number<int>(v, key);
  else if (key == "model.hidden") cfg.model.hidden = parse_number<int>(v, key);
  else if (key == "model.rope_base") cfg.model.rope_base = parse_number<double>(v, key);
  else if (key == "model.leaky_slope") cfg.model.leaky_slope = parse_number<double>(v, key);
  else if (key == "model.two_encoders") cfg.model.two_encoders = parse_bool(v, key);
  else if (key == "model.max_len") cfg.model.max_len = parse_number<int>(v, key);
  else if (key == "model.dropout") cfg.model.dropout = parse_number<double>(v, key);
  else if (key == "model.vocab_size") cfg.model.vocab_size = parse_number<int>(v, key);
  else if (key == "model.chunk_len") cfg.model.chunk_len = parse_number<int>(v, key);
  else if (key == "model.vocab_file") cfg.model.vocab_file = v;
  else if (key == "model.template") cfg.model.template_text = v;
  else if (key == "model.pretrained") cfg.model.pretrained_path = v;
  else if (key == "model.seed") cfg.model_seed = parse_number<std::uint64_t>(v, key);
  else if (key == "train.encoder_lr") cfg.train.encoder_lr = parse_number<double>(v, key);
  else if (key == "train.decoder_lr") cfg.train.decoder_lr = parse_number<double>(v, key);
  else if (key == "train.weight_decay") cfg.train.weight_decay = parse_number<double>(v, key);
  else if (key == "train.warmup_fraction")
    cfg.train.warmup_fraction = parse_number<double>(v, key);
  else if (key == "train.max_steps") cfg.train.max_steps = parse_number<int>(v, key);
  else if (key == "train.seed") cfg.train.seed = parse_number<std::uint64_t>(v, key);
  else if (key == "train.use_contrastive") cfg.train.use_contrastive = parse_bool(v, key);
  else if (key == "train.negatives_in_class_loss")
    cfg.train.negatives_in_class_loss = parse_bool(v, key);
  else if (key == "train.clip_norm") cfg.train.clip_norm = parse_number<double>(v, key);
  else if (key == "train.contrastive_scale")
    cfg.train.contrastive_scale = parse_number<double>(v, key);
  else if (key == "finetune.loss_threshold")
    cfg.finetune.loss_threshold = parse_number<double>(v, key);
  else if (key == "finetune.max_steps")
    cfg.finetune.max_finetune_steps = parse_number<int>(v, key);
  else if (key == "infer.gamma") cfg.gamma = parse_number<double>(v, key);
  else if (key == "infer.alpha") cfg.alpha = parse_number<double>(v, key);
  else if (key == "infer.beta") cfg.beta = parse_number<double>(v, key);
  else if (key == "infer.k_knn") cfg.k_knn = parse_number<int>(v, key);
  else if (key == "infer.entity_only_bonus") cfg.entity_only_bonus = parse_bool(v, key);
  else if (key == "eval.fine_tune") cfg.eval_fine_tune = parse_bool(v, key);
  else if (key == "data.corpus") cfg.corpus = v;
  else if (key == "data.format") cfg.format = v;
  else if (key == "data.n_way") cfg.n_way = parse_number<int>(v, key);
  else if (key == "data.k_shot") cfg.k_shot = parse_number<int>(v, key);
  else if (key == "data.episodes") cfg.episodes = parse_number<int>(v, key);
  else if (key == "data.val_episodes") cfg.val_episodes = v;
  else if (key == "data.eval_every") cfg.eval_every = parse_number<int>(v, key);
  else throw ConfigError("unknown config key: " + key);
}

/// "section.key=value" CLI override.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like section.key=value: " + assignment);
  apply_config_entry(cfg, detail::trim(assignment.substr(0, eq)),
                     detail::trim(assignment.substr(eq + 1)));
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos && line.find('"') == std::string::npos)
      line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("bad section header at line " + std::to_string(line_no));
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected key = value at line " + std::to_string(line_no));
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    apply_config_entry(cfg, section.empty() ? key : section + "." + key, value);
  }
  return cfg;
}

}  // namespace fewner
