#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fewner/autodiff.hpp"
#include "fewner/episode_data.hpp"
#include "fewner/errors.hpp"
#include "fewner/matrix.hpp"

namespace fewner {

/// Word span without a label.
struct Span {
  int start = 0;
  int end = 0;

  bool operator==(const Span& o) const { return start == o.start && end == o.end; }
  bool operator<(const Span& o) const {
    return start != o.start ? start < o.start : end < o.end;
  }
};

inline bool spans_overlap(const Span& a, const Span& b) {
  return a.start <= b.end && b.start <= a.end;
}

/// Mean-pooled representation of one span.
struct SpanEmbedding {
  std::vector<double> u;
  Span span;
};

/// Probabilities over the type set ("none" first).
struct ClassDistribution {
  std::vector<double> probs;

  int argmax() const {
    int best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
      if (probs[i] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
  }
};

/// u = mean of the h_n rows covered by the span.
inline SpanEmbedding embed_span(const Matrix& h_n, const Span& span) {
  if (span.start < 0 || span.end < span.start ||
      static_cast<std::size_t>(span.end) >= h_n.rows())
    throw ContractError("span out of range in embed_span");
  SpanEmbedding se;
  se.span = span;
  se.u.assign(h_n.cols(), 0.0);
  const double inv = 1.0 / static_cast<double>(span.end - span.start + 1);
  for (int k = span.start; k <= span.end; ++k)
    for (std::size_t j = 0; j < h_n.cols(); ++j)
      se.u[j] += inv * h_n(static_cast<std::size_t>(k), j);
  return se;
}

/// Softmax(H_m u / sqrt(d)) over the m classes.
inline ClassDistribution classify(const Matrix& h_m, const SpanEmbedding& se) {
  if (h_m.cols() != se.u.size())
    throw ContractError("classify: embedding width mismatch");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(h_m.cols()));
  std::vector<double> logits(h_m.rows());
  for (std::size_t c = 0; c < h_m.rows(); ++c)
    logits[c] = inv_sqrt_d * dot(h_m.row(c), se.u.data(), h_m.cols());
  const double lse = log_sum_exp(logits);
  ClassDistribution dist;
  dist.probs.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c)
    dist.probs[c] = std::exp(logits[c] - lse);
  return dist;
}

namespace detail {

/// spans x n averaging matrix (row per span).
inline Matrix span_pooling_matrix(std::size_t n, const std::vector<Span>& spans) {
  Matrix pool(spans.size(), n);
  for (std::size_t s = 0; s < spans.size(); ++s) {
    const auto& sp = spans[s];
    if (sp.start < 0 || sp.end < sp.start || static_cast<std::size_t>(sp.end) >= n)
      throw ContractError("span out of range in span pooling");
    const double inv = 1.0 / static_cast<double>(sp.end - sp.start + 1);
    for (int k = sp.start; k <= sp.end; ++k)
      pool(s, static_cast<std::size_t>(k)) = inv;
  }
  return pool;
}

}  // namespace detail

/// Tape node of stacked span embeddings (spans x d).
inline ad::Tape::NodeId span_embeddings_graph(ad::Tape& tape, ad::Tape::NodeId h_n,
                                              const std::vector<Span>& spans) {
  return tape.const_premul(detail::span_pooling_matrix(tape.value(h_n).rows(), spans),
                           h_n);
}

/// Tape node of classification logits U H_m^T / sqrt(d) (spans x m).
inline ad::Tape::NodeId class_logits_graph(ad::Tape& tape, ad::Tape::NodeId h_m,
                                           ad::Tape::NodeId span_embs) {
  const double inv_sqrt_d =
      1.0 / std::sqrt(static_cast<double>(tape.value(h_m).cols()));
  return tape.scale(tape.matmul_nt(span_embs, h_m), inv_sqrt_d);
}

/// Mean NLL over gold spans plus optional "none"-labeled negatives.
/// Gold-only mode (empty negatives) matches the bare classifier objective.
inline double classification_loss(
    const Matrix& h_m, const Matrix& h_n,
    const std::vector<std::pair<Span, std::string>>& gold_pairs,
    const std::vector<Span>& negatives, const EntityTypeSet& type_set) {
  if (gold_pairs.empty() && negatives.empty())
    throw ContractError("classification loss over an empty span set is undefined");
  std::vector<Span> spans;
  std::vector<int> targets;
  for (const auto& [span, label] : gold_pairs) {
    const int idx = type_set.index_of(label);
    if (idx < 0) throw ContractError("label not in type set: " + label);
    spans.push_back(span);
    targets.push_back(idx);
  }
  for (const auto& span : negatives) {
    spans.push_back(span);
    targets.push_back(0);  // class 0 is "none"
  }
  ad::Tape tape;
  const auto u = span_embeddings_graph(tape, tape.leaf(h_n), spans);
  const auto logits = class_logits_graph(tape, tape.leaf(h_m), u);
  return tape.scalar(tape.softmax_nll(logits, std::move(targets)));
}

}  // namespace fewner
