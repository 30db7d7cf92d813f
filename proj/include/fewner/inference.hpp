#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fewner/encoder_backend.hpp"
#include "fewner/episode_data.hpp"
#include "fewner/errors.hpp"
#include "fewner/matrix.hpp"
#include "fewner/model.hpp"
#include "fewner/prompt_classifier.hpp"
#include "fewner/span_detector.hpp"

namespace fewner {

/// Gold span embeddings from a support set, the kNN datastore at inference.
/// Row order: sentence order, then span order within the sentence.
struct GoldenEntityBank {
  Matrix embeddings;  ///< n_gold x d
  std::vector<std::string> labels;

  std::size_t size() const { return labels.size(); }
};

/// Mixture weights of the final prediction distribution. The default split
/// derives alpha/beta from gamma as 0.35/0.65 of the remaining mass.
struct RerankWeights {
  double gamma = 0.7;
  double alpha = 0.35 * 0.3;
  double beta = 0.65 * 0.3;
};

inline RerankWeights make_rerank_weights(double gamma) {
  RerankWeights w;
  w.gamma = gamma;
  w.alpha = 0.35 * (1.0 - gamma);
  w.beta = 0.65 * (1.0 - gamma);
  return w;
}

struct Prediction {
  Span span;
  std::string label;
  double final_score = 0.0;
};

/// Encodes the support set and stacks every gold mention's embedding.
inline GoldenEntityBank build_bank(const NerModel& model,
                                   const std::vector<TaggedSentence>& support,
                                   const EntityTypeSet& type_set) {
  std::vector<std::vector<double>> rows;
  GoldenEntityBank bank;
  for (const auto& sent : support) {
    const auto gold = tags_to_spans(sent);
    if (gold.empty()) continue;
    const auto pi = model.prompt(sent.words, type_set);
    const auto enc = encode(model.classifier_encoder(), pi);
    for (const auto& g : gold) {
      rows.push_back(embed_span(enc.h_n, Span{g.start, g.end}).u);
      bank.labels.push_back(g.label);
    }
  }
  if (rows.empty())
    throw ContractError("support set has zero gold mentions; cannot build entity bank");
  bank.embeddings = Matrix::from_rows(rows);
  return bank;
}

/// Scaled-similarity kNN vote. Classes with no retrieved neighbor (always
/// including "none", which the bank excludes) get exactly 0; retrieved mass
/// is min-shifted to be non-negative, then normalized to 1. If the shift
/// zeroes everything, the vote falls back to uniform over retrieved classes.
inline ClassDistribution knn_distribution(const SpanEmbedding& u,
                                          const GoldenEntityBank& bank, int k,
                                          const EntityTypeSet& type_set) {
  if (k < 1) throw ContractError("knn k must be >= 1");
  if (bank.size() == 0) throw ContractError("knn over an empty bank");
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), bank.size());

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(u.u.size()));
  std::vector<double> sims(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i)
    sims[i] = inv_sqrt_d * dot(bank.embeddings.row(i), u.u.data(), u.u.size());

  std::vector<std::size_t> order(bank.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sims[a] != sims[b]) return sims[a] > sims[b];
    return a < b;  // deterministic tie-break by bank row
  });
  order.resize(kk);

  double min_sim = sims[order.front()];
  for (std::size_t i : order) min_sim = std::min(min_sim, sims[i]);
  const double shift = std::min(0.0, min_sim);

  ClassDistribution dist;
  dist.probs.assign(type_set.size(), 0.0);
  double total = 0.0;
  for (std::size_t i : order) {
    const int cls = type_set.index_of(bank.labels[i]);
    if (cls <= 0) throw ContractError("bank label outside the episode type set");
    const double w = sims[i] - shift;
    dist.probs[static_cast<std::size_t>(cls)] += w;
    total += w;
  }
  if (total > 0.0) {
    for (double& p : dist.probs) p /= total;
  } else {
    std::vector<bool> retrieved(type_set.size(), false);
    std::size_t distinct = 0;
    for (std::size_t i : order) {
      const auto cls = static_cast<std::size_t>(type_set.index_of(bank.labels[i]));
      if (!retrieved[cls]) {
        retrieved[cls] = true;
        ++distinct;
      }
    }
    for (std::size_t c = 0; c < dist.probs.size(); ++c)
      dist.probs[c] = retrieved[c] ? 1.0 / static_cast<double>(distinct) : 0.0;
  }
  return dist;
}

/// Final mixture: alpha * p_prompt + beta * p_knn plus the detector bonus
/// gamma * sigmoid(span_score). With entity_only (the default) the bonus
/// goes to entity classes only, so a weak detector score favors "none"; the
/// literal uniform-bonus reading stays available for ablation.
inline std::vector<double> rerank(double span_score, const ClassDistribution& p_prompt,
                                  const ClassDistribution& p_knn,
                                  const RerankWeights& w, bool entity_only = true) {
  if (p_prompt.probs.size() != p_knn.probs.size())
    throw ContractError("rerank distributions disagree on the type set");
  const double bonus = w.gamma / (1.0 + std::exp(-span_score));
  std::vector<double> final_scores(p_prompt.probs.size());
  for (std::size_t c = 0; c < final_scores.size(); ++c) {
    final_scores[c] = w.alpha * p_prompt.probs[c] + w.beta * p_knn.probs[c];
    if (!entity_only || c != 0) final_scores[c] += bonus;
  }
  return final_scores;
}

/// Inference-time switches; the ablation harness drives these.
struct PredictOptions {
  int k_shot = 1;
  int k_knn = 0;  ///< 0 means "use k_shot"
  RerankWeights weights = make_rerank_weights(0.7);
  bool entity_only_bonus = true;
  bool use_sigmoid_bonus = true;    ///< false: gamma off, alpha/beta renormalized
  bool use_knn = true;              ///< false: beta mass folded into alpha
  bool biaffine_candidates = true;  ///< false: enumerate all spans instead of top-3k
  bool use_rotary_term = true;      ///< false: positional term zeroed in scoring
};

namespace detail {

inline RerankWeights effective_weights(const PredictOptions& opts) {
  RerankWeights w = opts.weights;
  if (!opts.use_knn) {
    w.alpha += w.beta;
    w.beta = 0.0;
  }
  if (!opts.use_sigmoid_bonus) {
    w.gamma = 0.0;
    const double mass = w.alpha + w.beta;
    if (mass > 0.0) {
      w.alpha /= mass;
      w.beta /= mass;
    }
  }
  return w;
}

/// Greedy flat decoding: keep the best-scoring spans, drop overlaps.
inline std::vector<Prediction> flat_decode(std::vector<Prediction> survivors) {
  std::sort(survivors.begin(), survivors.end(), [](const Prediction& a, const Prediction& b) {
    if (a.final_score != b.final_score) return a.final_score > b.final_score;
    return a.span < b.span;
  });
  std::vector<Prediction> kept;
  for (auto& p : survivors) {
    const bool clashes = std::any_of(kept.begin(), kept.end(), [&](const Prediction& q) {
      return spans_overlap(p.span, q.span);
    });
    if (!clashes) kept.push_back(std::move(p));
  }
  std::sort(kept.begin(), kept.end(),
            [](const Prediction& a, const Prediction& b) { return a.span < b.span; });
  return kept;
}

}  // namespace detail

/// Full single-sentence inference: recall candidates, rerank, drop spans
/// whose argmax is "none", then flat-decode the rest.
inline std::vector<Prediction> predict_sentence(const NerModel& model,
                                                const std::vector<std::string>& words,
                                                const EntityTypeSet& type_set,
                                                const GoldenEntityBank& bank,
                                                const PredictOptions& opts) {
  const auto pi = model.prompt(words, type_set);
  const auto enc_cls = encode(model.classifier_encoder(), pi);
  const bool shared = model.detector_prefix() == model.classifier_prefix();
  const auto enc_det = shared ? enc_cls : encode(model.detector_encoder(), pi);

  ScoreOptions sopts;
  sopts.use_rotary_term = opts.use_rotary_term;
  const auto scores = score_spans(enc_det.h_n, model.biaffine(), sopts);

  std::vector<SpanCandidate> candidates;
  if (opts.biaffine_candidates) {
    candidates = extract_candidates(scores, opts.k_shot);
  } else {
    candidates = all_spans(scores.n());
    for (auto& c : candidates)
      c.score = scores.r(static_cast<std::size_t>(c.start), static_cast<std::size_t>(c.end));
  }

  const RerankWeights w = detail::effective_weights(opts);
  const int k_knn = opts.k_knn > 0 ? opts.k_knn : opts.k_shot;
  ClassDistribution zero_knn;
  zero_knn.probs.assign(type_set.size(), 0.0);

  std::vector<Prediction> survivors;
  for (const auto& cand : candidates) {
    const auto u = embed_span(enc_cls.h_n, Span{cand.start, cand.end});
    const auto p_prompt = classify(enc_cls.h_m, u);
    const auto p_knn =
        opts.use_knn ? knn_distribution(u, bank, k_knn, type_set) : zero_knn;
    const auto final_scores =
        rerank(cand.score, p_prompt, p_knn, w, opts.entity_only_bonus);
    std::size_t best = 0;
    for (std::size_t c = 1; c < final_scores.size(); ++c)
      if (final_scores[c] > final_scores[best]) best = c;
    if (best == 0) continue;  // none = argmax: false positive filtered
    survivors.push_back(
        {Span{cand.start, cand.end}, type_set.types[best], final_scores[best]});
  }
  return detail::flat_decode(std::move(survivors));
}

}  // namespace fewner
