#pragma once

#include <memory>
#include <random>
#include <string>
#include <utility>

#include "fewner/encoder_backend.hpp"
#include "fewner/errors.hpp"
#include "fewner/params.hpp"
#include "fewner/prompt_builder.hpp"
#include "fewner/span_detector.hpp"
#include "fewner/tokenizer.hpp"

namespace fewner {

struct ModelConfig {
  int d = 32;
  int layers = 2;
  int heads = 2;
  int hidden = 16;  ///< biaffine hidden width (even, for the rotary transform)
  double rope_base = 10000.0;
  double leaky_slope = 0.01;
  bool two_encoders = true;
  int max_len = 128;
  double dropout = 0.1;
  int vocab_size = 2048;
  int chunk_len = 4;
  std::string vocab_file;  ///< non-empty selects the wordpiece tokenizer
  std::string template_text = PromptTemplate{}.prefix_text;
  std::string pretrained_path;  ///< non-empty: encoder weights come from disk
};

/// The full pipeline: detector encoder + classifier encoder (optionally the
/// same one) + biaffine scorer, all parameters in one store. Deep copies go
/// through clone(); plain copying is disabled to avoid accidental aliasing.
class NerModel {
 public:
  NerModel() = default;
  NerModel(const NerModel&) = delete;
  NerModel& operator=(const NerModel&) = delete;
  NerModel(NerModel&&) = default;
  NerModel& operator=(NerModel&&) = default;

  static NerModel make(const ModelConfig& cfg, std::uint64_t seed) {
    NerModel m;
    m.cfg_ = cfg;
    if (cfg.vocab_file.empty())
      m.tokenizer_ = std::make_shared<ChunkTokenizer>(cfg.vocab_size, cfg.chunk_len);
    else
      m.tokenizer_ = std::make_shared<WordPieceTokenizer>(cfg.vocab_file);
    m.params_ = std::make_shared<ParamStore>();
    std::mt19937_64 rng(seed);
    EncoderConfig ec;
    ec.d = cfg.d;
    ec.layers = cfg.layers;
    ec.heads = cfg.heads;
    ec.max_len = cfg.max_len;
    ec.dropout = cfg.dropout;
    detail::init_encoder_params(*m.params_, "cls.", ec, m.tokenizer_->vocab_size(), rng);
    if (cfg.two_encoders)
      detail::init_encoder_params(*m.params_, "det.", ec, m.tokenizer_->vocab_size(), rng);
    detail::init_biaffine_params(*m.params_, "bi.", cfg.d, cfg.hidden, rng);
    m.wire_handles(ec);
    return m;
  }

  NerModel clone() const {
    NerModel m;
    m.cfg_ = cfg_;
    m.tokenizer_ = tokenizer_;
    m.params_ = std::make_shared<ParamStore>(*params_);
    m.wire_handles(cls_.cfg);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return *params_; }
  const ParamStore& params() const { return *params_; }
  std::shared_ptr<ParamStore> params_ptr() const { return params_; }
  const Subtokenizer& tokenizer() const { return *tokenizer_; }
  TokenizerPtr tokenizer_ptr() const { return tokenizer_; }

  const EncoderHandle& detector_encoder() const { return det_; }
  const EncoderHandle& classifier_encoder() const { return cls_; }
  std::string detector_prefix() const { return det_.prefix; }
  std::string classifier_prefix() const { return cls_.prefix; }

  /// Materialized copy of the biaffine parameters for the plain scoring API.
  BiaffineParams biaffine() const {
    BiaffineParams p;
    p.w_start = params_->get("bi.Ws");
    p.w_end = params_->get("bi.We");
    p.w_pos = params_->get("bi.Wp");
    p.u = params_->get("bi.U");
    p.hidden = cfg_.hidden;
    p.rope_base = cfg_.rope_base;
    p.leaky_slope = cfg_.leaky_slope;
    return p;
  }

  PromptTemplate prompt_template() const { return PromptTemplate{cfg_.template_text}; }

  PromptedInput prompt(const std::vector<std::string>& sentence,
                       const EntityTypeSet& type_set) const {
    return build_prompted_input(sentence, type_set, prompt_template(), *tokenizer_);
  }

  /// True when a parameter belongs to an encoder (vs. the biaffine decoder);
  /// the two groups train with different learning rates.
  static bool is_encoder_param(const std::string& name) {
    return name.rfind("bi.", 0) != 0;
  }

  /// Used by checkpoint loading, which restores raw tensors.
  static NerModel from_parts(ModelConfig cfg, std::shared_ptr<ParamStore> params,
                             TokenizerPtr tokenizer) {
    NerModel m;
    m.cfg_ = std::move(cfg);
    m.params_ = std::move(params);
    m.tokenizer_ = std::move(tokenizer);
    EncoderConfig ec;
    ec.d = m.cfg_.d;
    ec.layers = m.cfg_.layers;
    ec.heads = m.cfg_.heads;
    ec.max_len = m.cfg_.max_len;
    ec.dropout = m.cfg_.dropout;
    m.wire_handles(ec);
    return m;
  }

 private:
  void wire_handles(const EncoderConfig& ec) {
    cls_ = EncoderHandle{cfg_.pretrained_path.empty()
                             ? EncoderHandle::Kind::tiny_trainable
                             : EncoderHandle::Kind::pretrained,
                         ec, "cls.", params_, tokenizer_};
    det_ = cls_;
    if (cfg_.two_encoders) det_.prefix = "det.";
  }

  ModelConfig cfg_;
  std::shared_ptr<ParamStore> params_;
  TokenizerPtr tokenizer_;
  EncoderHandle det_;
  EncoderHandle cls_;
};

}  // namespace fewner
