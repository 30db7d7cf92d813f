#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "fewner/episode_data.hpp"
#include "fewner/errors.hpp"
#include "fewner/inference.hpp"

namespace fewner {

struct SentencePredictions {
  std::int64_t sentence_id = 0;
  std::vector<Prediction> spans;
};

struct SentenceGold {
  std::int64_t sentence_id = 0;
  std::vector<SpanAnnotation> spans;
};

/// Entity-level micro scores; per_seed/std_dev are filled by aggregation.
struct EvalResult {
  double micro_f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::vector<double> per_seed;
  double std_dev = 0.0;
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
};

struct ErrorBreakdown {
  double fp_span_ratio = 0.0;
  double fp_type_ratio = 0.0;
  std::int64_t fp_span_count = 0;
  std::int64_t fp_type_count = 0;
  bool has_false_positives = false;
};

namespace detail {

using MatchKey = std::tuple<std::int64_t, int, int, std::string>;

inline std::set<MatchKey> gold_keys(const std::vector<SentenceGold>& gold) {
  std::set<MatchKey> keys;
  for (const auto& g : gold)
    for (const auto& s : g.spans) keys.insert({g.sentence_id, s.start, s.end, s.label});
  return keys;
}

}  // namespace detail

/// Micro precision/recall/F1: a hit requires identical (start, end, label)
/// within the same sentence. TP/FP/FN aggregate over all sentences first.
inline EvalResult micro_f1(const std::vector<SentencePredictions>& predictions,
                           const std::vector<SentenceGold>& gold) {
  const auto gold_set = detail::gold_keys(gold);
  std::set<detail::MatchKey> seen;
  EvalResult res;
  for (const auto& p : predictions)
    for (const auto& s : p.spans) {
      const detail::MatchKey key{p.sentence_id, s.span.start, s.span.end, s.label};
      if (!seen.insert(key).second)
        throw ContractError("duplicate prediction for sentence " +
                            std::to_string(p.sentence_id));
      if (gold_set.count(key))
        ++res.tp;
      else
        ++res.fp;
    }
  std::int64_t gold_total = 0;
  for (const auto& g : gold) gold_total += static_cast<std::int64_t>(g.spans.size());
  res.fn = gold_total - res.tp;
  res.precision = (res.tp + res.fp) > 0
                      ? static_cast<double>(res.tp) / static_cast<double>(res.tp + res.fp)
                      : 0.0;
  res.recall = (res.tp + res.fn) > 0
                   ? static_cast<double>(res.tp) / static_cast<double>(res.tp + res.fn)
                   : 0.0;
  res.micro_f1 = (res.precision + res.recall) > 0.0
                     ? 2.0 * res.precision * res.recall / (res.precision + res.recall)
                     : 0.0;
  return res;
}

/// Population standard deviation across per-seed F1 values.
inline EvalResult aggregate_seeds(const std::vector<EvalResult>& runs) {
  EvalResult agg;
  if (runs.empty()) return agg;
  for (const auto& r : runs) {
    agg.per_seed.push_back(r.micro_f1);
    agg.micro_f1 += r.micro_f1;
    agg.precision += r.precision;
    agg.recall += r.recall;
    agg.tp += r.tp;
    agg.fp += r.fp;
    agg.fn += r.fn;
  }
  const double n = static_cast<double>(runs.size());
  agg.micro_f1 /= n;
  agg.precision /= n;
  agg.recall /= n;
  double var = 0.0;
  for (double f : agg.per_seed) var += (f - agg.micro_f1) * (f - agg.micro_f1);
  agg.std_dev = std::sqrt(var / n);
  return agg;
}

/// FP-Type: the span matches a gold span of the sentence but the label does
/// not. FP-Span: the boundaries match nothing. Ratios are over all FPs.
inline ErrorBreakdown error_breakdown(const std::vector<SentencePredictions>& predictions,
                                      const std::vector<SentenceGold>& gold) {
  std::map<std::int64_t, const SentenceGold*> by_id;
  for (const auto& g : gold) by_id[g.sentence_id] = &g;
  const auto gold_set = detail::gold_keys(gold);

  ErrorBreakdown out;
  for (const auto& p : predictions)
    for (const auto& s : p.spans) {
      if (gold_set.count({p.sentence_id, s.span.start, s.span.end, s.label})) continue;
      bool boundary_match = false;
      const auto it = by_id.find(p.sentence_id);
      if (it != by_id.end())
        for (const auto& g : it->second->spans)
          if (g.start == s.span.start && g.end == s.span.end) {
            boundary_match = true;
            break;
          }
      if (boundary_match)
        ++out.fp_type_count;
      else
        ++out.fp_span_count;
    }
  const std::int64_t total = out.fp_span_count + out.fp_type_count;
  out.has_false_positives = total > 0;
  if (out.has_false_positives) {
    out.fp_span_ratio = static_cast<double>(out.fp_span_count) / static_cast<double>(total);
    out.fp_type_ratio = static_cast<double>(out.fp_type_count) / static_cast<double>(total);
  }
  return out;
}

}  // namespace fewner
