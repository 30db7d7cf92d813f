#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fewner/autodiff.hpp"
#include "fewner/encoder_backend.hpp"
#include "fewner/episode_data.hpp"
#include "fewner/errors.hpp"
#include "fewner/model.hpp"
#include "fewner/prompt_classifier.hpp"
#include "fewner/span_detector.hpp"

namespace fewner {

struct TrainConfig {
  double encoder_lr = 2e-5;
  double decoder_lr = 2e-3;
  double weight_decay = 1e-2;
  double warmup_fraction = 0.1;
  int max_steps = 1000;
  std::uint64_t seed = 1;
  bool use_contrastive = false;
  bool negatives_in_class_loss = true;
  double clip_norm = 5.0;          ///< <= 0 disables clipping
  double contrastive_scale = 0.0;  ///< 0 means 1/sqrt(d)
  bool use_schedule = true;        ///< fine-tuning runs with a constant multiplier
};

struct FinetuneConfig {
  double loss_threshold = 1e-2;
  int max_finetune_steps = 50;
};

/// Linear warmup to 1.0 over warmup_fraction * max_steps steps, then linear
/// decay to 0 at max_steps. Step is 0-based; step 0 gets 1/warmup_steps.
inline double schedule_multiplier(int step, const TrainConfig& cfg) {
  const int ws = std::max(
      1, static_cast<int>(std::llround(cfg.warmup_fraction * cfg.max_steps)));
  if (step < ws) return static_cast<double>(step + 1) / static_cast<double>(ws);
  const int decay_span = std::max(1, cfg.max_steps - ws);
  return std::max(0.0, static_cast<double>(cfg.max_steps - step) /
                           static_cast<double>(decay_span));
}

/// Adam with decoupled weight decay. Decay skips 1-row tensors (biases,
/// layer-norm vectors). Parameter groups: encoder vs. biaffine decoder.
class AdamW {
 public:
  void step(ParamStore& params, const std::map<std::string, Matrix>& grads,
            const TrainConfig& cfg, double lr_mult) {
    ++t_;
    double scale = 1.0;
    if (cfg.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [name, g] : grads)
        for (std::size_t k = 0; k < g.size(); ++k) sq += g.data()[k] * g.data()[k];
      const double norm = std::sqrt(sq);
      if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Matrix& p = params.get(name);
      auto mit = moments_.find(name);
      if (mit == moments_.end())
        mit = moments_
                  .emplace(name, std::make_pair(Matrix::zeros(p.rows(), p.cols()),
                                                Matrix::zeros(p.rows(), p.cols())))
                  .first;
      Matrix& m = mit->second.first;
      Matrix& v = mit->second.second;
      const double lr =
          lr_mult * (NerModel::is_encoder_param(name) ? cfg.encoder_lr : cfg.decoder_lr);
      const bool decay = p.rows() > 1;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g.data()[k] * scale;
        m.data()[k] = beta1_ * m.data()[k] + (1.0 - beta1_) * gk;
        v.data()[k] = beta2_ * v.data()[k] + (1.0 - beta2_) * gk * gk;
        const double mhat = m.data()[k] / bc1;
        const double vhat = v.data()[k] / bc2;
        p.data()[k] -= lr * (mhat / (std::sqrt(vhat) + eps_));
        if (decay) p.data()[k] -= lr * cfg.weight_decay * p.data()[k];
      }
    }
  }

 private:
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::map<std::string, std::pair<Matrix, Matrix>> moments_;
  std::int64_t t_ = 0;
};

/// Mutable training-session state: optimizer moments and the dropout RNG.
struct TrainerState {
  AdamW optimizer;
  std::mt19937_64 rng;
  std::int64_t contrastive_skips = 0;  ///< anchors without both pair sets

  explicit TrainerState(std::uint64_t seed = 1) : rng(seed) {}
};

struct LossBreakdown {
  double span = 0.0;
  double cls = 0.0;
  double contrastive = 0.0;

  double total() const { return span + cls + contrastive; }
};

// ---------------------------------------------------------------------------
// Contrastive loss
// ---------------------------------------------------------------------------

/// Gold span embeddings of one support set with their labels; anchor pair
/// sets (same-label / different-label, anchor excluded) are derived.
struct ContrastiveBatch {
  std::vector<SpanEmbedding> embeddings;
  std::vector<std::string> labels;
};

namespace detail {

inline std::vector<ad::AnchorSets> anchor_sets(const std::vector<std::string>& labels,
                                               std::int64_t* skipped) {
  std::vector<ad::AnchorSets> anchors;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ad::AnchorSets a;
    a.anchor = static_cast<int>(i);
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? a.positives : a.negatives).push_back(static_cast<int>(j));
    }
    if (a.positives.empty() || a.negatives.empty()) {
      if (skipped) ++*skipped;
      continue;
    }
    anchors.push_back(std::move(a));
  }
  return anchors;
}

}  // namespace detail

/// Scaled-dot-product contrastive loss over the batch; anchors lacking a
/// positive or a negative are skipped, and with none left the loss is 0.
inline double contrastive_loss(const ContrastiveBatch& batch, double scale = 0.0,
                               std::int64_t* skipped_anchors = nullptr) {
  if (batch.embeddings.size() != batch.labels.size())
    throw ContractError("contrastive batch embeddings/labels mismatch");
  auto anchors = detail::anchor_sets(batch.labels, skipped_anchors);
  if (anchors.empty()) return 0.0;
  std::vector<std::vector<double>> rows;
  for (const auto& e : batch.embeddings) rows.push_back(e.u);
  const Matrix u = Matrix::from_rows(rows);
  const double s = scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(u.cols()));
  ad::Tape tape;
  const auto un = tape.leaf(u);
  const auto sims = tape.scale(tape.matmul_nt(un, un), s);
  return tape.scalar(tape.contrastive_nll(sims, std::move(anchors)));
}

// ---------------------------------------------------------------------------
// Episode forward pass
// ---------------------------------------------------------------------------

namespace detail {

struct EpisodeGraph {
  ad::Tape::NodeId total = -1;
  LossBreakdown values;
  std::vector<double> per_sentence;  ///< L_span + L_class per sentence
};

/// Builds the flattened supervised objective over support + query sentences:
/// mean over sentences of (L_span + L_class), plus L_CL once when enabled.
inline EpisodeGraph episode_loss_graph(ad::Tape& tape, ParamBinder& bind,
                                       const NerModel& model, const Episode& ep,
                                       const TrainConfig& cfg, bool train,
                                       std::mt19937_64& rng,
                                       std::int64_t* contrastive_skips) {
  const auto& mc = model.config();
  const auto bi = bind_biaffine(bind, "bi.");
  std::vector<const TaggedSentence*> sentences;
  for (const auto& s : ep.support) sentences.push_back(&s);
  for (const auto& s : ep.query) sentences.push_back(&s);
  if (sentences.empty()) throw ContractError("episode has no sentences");

  std::vector<ad::Tape::NodeId> span_losses;
  std::vector<ad::Tape::NodeId> class_losses;
  EpisodeGraph out;
  out.per_sentence.assign(sentences.size(), 0.0);

  // Support sentences contribute their classifier-encoder gold embeddings to
  // the contrastive batch.
  std::vector<ad::Tape::NodeId> contrastive_parts;
  std::vector<std::string> contrastive_labels;

  for (std::size_t si = 0; si < sentences.size(); ++si) {
    const TaggedSentence& sent = *sentences[si];
    const auto pi = model.prompt(sent.words, ep.type_set);
    const auto g_det = encode_graph(tape, bind, model.detector_encoder(), pi, train, rng);
    const auto g_cls =
        model.config().two_encoders
            ? encode_graph(tape, bind, model.classifier_encoder(), pi, train, rng)
            : g_det;

    const auto gold = tags_to_spans(sent);
    const auto r = score_graph(tape, g_det.h_n, bi, mc.rope_base, mc.leaky_slope);
    auto [pos, neg] = split_cells(sent.words.size(), gold);
    const auto l_span = tape.span_imbalance_loss(r, std::move(pos), std::move(neg));
    span_losses.push_back(l_span);
    out.per_sentence[si] += tape.scalar(l_span);

    if (!gold.empty()) {
      std::vector<Span> spans;
      std::vector<int> targets;
      for (const auto& g : gold) {
        const int idx = ep.type_set.index_of(g.label);
        if (idx < 0) throw ContractError("gold label not in episode type set: " + g.label);
        spans.push_back({g.start, g.end});
        targets.push_back(idx);
      }
      if (cfg.negatives_in_class_loss) {
        ScoreMatrix sm;
        sm.r = tape.value(r);
        for (const auto& cand : extract_candidates(sm, ep.k_shot)) {
          const Span s{cand.start, cand.end};
          const bool is_gold = std::any_of(gold.begin(), gold.end(), [&](const auto& g) {
            return g.start == s.start && g.end == s.end;
          });
          if (!is_gold) {
            spans.push_back(s);
            targets.push_back(0);
          }
        }
      }
      const auto u = span_embeddings_graph(tape, g_cls.h_n, spans);
      const auto logits = class_logits_graph(tape, g_cls.h_m, u);
      const auto l_class = tape.softmax_nll(logits, std::move(targets));
      class_losses.push_back(l_class);
      out.per_sentence[si] += tape.scalar(l_class);
    }

    const bool is_support = si < ep.support.size();
    if (cfg.use_contrastive && is_support && !gold.empty()) {
      std::vector<Span> gspans;
      for (const auto& g : gold) gspans.push_back({g.start, g.end});
      contrastive_parts.push_back(span_embeddings_graph(tape, g_cls.h_n, gspans));
      for (const auto& g : gold) contrastive_labels.push_back(g.label);
      if (ep.k_shot == 1 && train) {
        // 1-shot: a second dropout pass over the same input manufactures
        // positive pairs for every anchor.
        const auto g_cls2 =
            encode_graph(tape, bind, model.classifier_encoder(), pi, train, rng);
        contrastive_parts.push_back(span_embeddings_graph(tape, g_cls2.h_n, gspans));
        for (const auto& g : gold) contrastive_labels.push_back(g.label);
      }
    }
  }

  const double inv_s = 1.0 / static_cast<double>(sentences.size());
  auto span_term = tape.scale(tape.add_scalars(span_losses), inv_s);
  out.values.span = tape.scalar(span_term);
  auto total = span_term;
  if (!class_losses.empty()) {
    auto class_term = tape.scale(tape.add_scalars(class_losses), inv_s);
    out.values.cls = tape.scalar(class_term);
    total = tape.add(total, class_term);
  }
  if (cfg.use_contrastive && !contrastive_labels.empty()) {
    auto anchors = anchor_sets(contrastive_labels, contrastive_skips);
    if (!anchors.empty()) {
      const double scale = cfg.contrastive_scale > 0.0
                               ? cfg.contrastive_scale
                               : 1.0 / std::sqrt(static_cast<double>(mc.d));
      const auto u_all = contrastive_parts.size() == 1
                             ? contrastive_parts.front()
                             : tape.concat_rows(contrastive_parts);
      const auto sims = tape.scale(tape.matmul_nt(u_all, u_all), scale);
      const auto l_cl = tape.contrastive_nll(sims, std::move(anchors));
      out.values.contrastive = tape.scalar(l_cl);
      total = tape.add(total, l_cl);
    }
  }
  out.total = total;
  return out;
}

}  // namespace detail

/// Forward-only episode loss (no update); exposes the component values.
inline LossBreakdown episode_loss(const NerModel& model, const Episode& ep,
                                  const TrainConfig& cfg, bool train,
                                  std::mt19937_64& rng) {
  ad::Tape tape;
  ParamBinder bind(tape, model.params());
  std::int64_t skips = 0;
  return detail::episode_loss_graph(tape, bind, model, ep, cfg, train, rng, &skips).values;
}

/// One optimizer step over one episode (the training batch unit).
inline double train_step(NerModel& model, const Episode& ep, const TrainConfig& cfg,
                         int step, TrainerState& state) {
  if (cfg.encoder_lr <= 0.0 || cfg.decoder_lr <= 0.0)
    throw ContractError("learning rates must be positive");
  if (cfg.warmup_fraction < 0.0 || cfg.warmup_fraction > 1.0)
    throw ContractError("warmup_fraction must lie in [0, 1]");
  ad::Tape tape;
  ParamBinder bind(tape, model.params());
  const auto graph = detail::episode_loss_graph(tape, bind, model, ep, cfg,
                                                /*train=*/true, state.rng,
                                                &state.contrastive_skips);
  const double loss = tape.scalar(graph.total);
  if (!std::isfinite(loss)) {
    std::string culprit = "<unknown>";
    for (std::size_t si = 0; si < graph.per_sentence.size(); ++si)
      if (!std::isfinite(graph.per_sentence[si])) {
        const auto& s = si < ep.support.size() ? ep.support[si]
                                               : ep.query[si - ep.support.size()];
        culprit = "sentence " + std::to_string(si) + ": ";
        for (const auto& w : s.words) culprit += w + " ";
        break;
      }
    throw ContractError("non-finite training loss at step " + std::to_string(step) +
                        " (" + culprit + ")");
  }
  tape.backward(graph.total);
  const double mult = cfg.use_schedule ? schedule_multiplier(step, cfg) : 1.0;
  state.optimizer.step(model.params(), bind.collect_grads(), cfg, mult);
  return loss;
}

// ---------------------------------------------------------------------------
// Support-only fine-tuning
// ---------------------------------------------------------------------------

enum class StopReason { threshold, cap };

struct FinetuneResult {
  int steps_taken = 0;
  double final_loss = 0.0;
  StopReason reason = StopReason::cap;
};

/// Repeats train_step on the support set alone, with a fresh optimizer and a
/// constant lr multiplier; stops as soon as the (pre-update) loss drops
/// under the threshold or the step cap is reached.
inline FinetuneResult finetune_on_support(NerModel& model,
                                          const std::vector<TaggedSentence>& support,
                                          const EntityTypeSet& type_set, int k_shot,
                                          const TrainConfig& train_cfg,
                                          const FinetuneConfig& ft_cfg,
                                          std::uint64_t seed) {
  if (support.empty()) throw ContractError("cannot fine-tune on an empty support set");
  if (ft_cfg.max_finetune_steps < 1 || ft_cfg.loss_threshold <= 0.0)
    throw ContractError("bad fine-tune configuration");
  Episode ep;
  ep.support = support;
  ep.type_set = type_set;
  ep.n_way = static_cast<int>(type_set.types.size()) - 1;
  ep.k_shot = k_shot;
  TrainConfig cfg = train_cfg;
  cfg.use_schedule = false;
  TrainerState state(seed);
  FinetuneResult res;
  for (int step = 0; step < ft_cfg.max_finetune_steps; ++step) {
    res.final_loss = train_step(model, ep, cfg, step, state);
    res.steps_taken = step + 1;
    if (res.final_loss < ft_cfg.loss_threshold) {
      res.reason = StopReason::threshold;
      return res;
    }
  }
  res.reason = StopReason::cap;
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned named-tensor binary with embedded JSON metadata
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kCheckpointMagic[4] = {'F', 'N', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& v, const char* what) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
}

inline nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["d"] = c.d;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["hidden"] = c.hidden;
  j["rope_base"] = c.rope_base;
  j["leaky_slope"] = c.leaky_slope;
  j["two_encoders"] = c.two_encoders;
  j["max_len"] = c.max_len;
  j["dropout"] = c.dropout;
  j["vocab_size"] = c.vocab_size;
  j["chunk_len"] = c.chunk_len;
  j["vocab_file"] = c.vocab_file;
  j["template_text"] = c.template_text;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d = j.at("d").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.rope_base = j.at("rope_base").get<double>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.two_encoders = j.at("two_encoders").get<bool>();
  c.max_len = j.at("max_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.chunk_len = j.at("chunk_len").get<int>();
  c.vocab_file = j.at("vocab_file").get<std::string>();
  c.template_text = j.at("template_text").get<std::string>();
  return c;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

struct CheckpointMeta {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

inline void save_checkpoint(const NerModel& model, const std::string& path,
                            const CheckpointMeta& meta = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path);
  const auto cfg_json = detail::model_config_json(model.config());
  nlohmann::ordered_json meta_json;
  meta_json["step"] = meta.step;
  meta_json["seed"] = meta.seed;
  meta_json["config_hash"] =
      std::to_string(detail::fnv1a(cfg_json.dump()));
  meta_json["model"] = cfg_json;
  const std::string meta_str = meta_json.dump();

  out.write(detail::kCheckpointMagic, 4);
  detail::write_pod(out, detail::kCheckpointVersion);
  detail::write_pod(out, static_cast<std::uint64_t>(meta_str.size()));
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  detail::write_pod(out, static_cast<std::uint64_t>(model.params().size()));
  for (const auto& [name, tensor] : model.params()) {
    detail::write_pod(out, static_cast<std::uint64_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(out, static_cast<std::uint64_t>(tensor.rows()));
    detail::write_pod(out, static_cast<std::uint64_t>(tensor.cols()));
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("write failed for checkpoint: " + path);
}

inline NerModel load_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 4) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  std::uint32_t version = 0;
  detail::read_pod(in, version, "version");
  if (version != detail::kCheckpointVersion)
    throw CheckpointError("checkpoint version mismatch: have " + std::to_string(version) +
                          ", expected " + std::to_string(detail::kCheckpointVersion));
  std::uint64_t meta_len = 0;
  detail::read_pod(in, meta_len, "metadata length");
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw CheckpointError("truncated checkpoint metadata: " + path);
  nlohmann::json meta_json;
  try {
    meta_json = nlohmann::json::parse(meta_str);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  const ModelConfig cfg = detail::model_config_from_json(meta_json.at("model"));
  if (meta_out) {
    meta_out->step = meta_json.value("step", std::int64_t{0});
    meta_out->seed = meta_json.value("seed", std::uint64_t{0});
    meta_out->config_hash = meta_json.value("config_hash", std::string{});
  }

  std::uint64_t count = 0;
  detail::read_pod(in, count, "tensor count");
  auto store = std::make_shared<ParamStore>();
  for (std::uint64_t t = 0; t < count; ++t) {
    std::uint64_t name_len = 0;
    detail::read_pod(in, name_len, "tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    std::uint64_t rows = 0, cols = 0;
    detail::read_pod(in, rows, "tensor rows");
    detail::read_pod(in, cols, "tensor cols");
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw CheckpointError("truncated tensor data in checkpoint: " + path);
    store->add(name, std::move(m));
  }
  if (!store->has("cls.tok_emb") || !store->has("bi.Ws"))
    throw CheckpointError("checkpoint lacks required tensors: " + path);

  TokenizerPtr tok;
  if (cfg.vocab_file.empty())
    tok = std::make_shared<ChunkTokenizer>(cfg.vocab_size, cfg.chunk_len);
  else
    tok = std::make_shared<WordPieceTokenizer>(cfg.vocab_file);
  ModelConfig wired = cfg;
  wired.pretrained_path = path;  // handles report the pretrained backend kind
  return NerModel::from_parts(wired, std::move(store), std::move(tok));
}

/// Fresh random model, or a warm start from an on-disk checkpoint when the
/// config names one. The checkpoint fixes the architecture in that case.
inline NerModel make_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.pretrained_path.empty()) return NerModel::make(cfg, seed);
  return load_checkpoint(cfg.pretrained_path);
}

}  // namespace fewner
