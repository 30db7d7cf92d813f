#pragma once

#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewner/config.hpp"
#include "fewner/inference.hpp"
#include "fewner/metrics.hpp"
#include "fewner/model.hpp"
#include "fewner/training.hpp"

namespace fewner {

/// One ablation variant: which pipeline pieces stay on. Training-time flags
/// (contrastive, negatives_in_class_loss) apply to the per-episode
/// fine-tuning pass; two_encoders is fixed by the checkpoint architecture.
struct AblationConfig {
  std::string name = "full";
  bool fine_tune = true;
  bool rerank = true;
  bool knn_search = true;
  bool rope = true;
  bool biaffine = true;
  bool contrastive = false;
  bool two_encoders = true;
  bool negatives_in_class_loss = true;
};

/// The seven-variant component study.
inline std::vector<AblationConfig> grid_table3(bool two_encoders = true) {
  std::vector<AblationConfig> grid(7);
  for (auto& g : grid) g.two_encoders = two_encoders;
  grid[0].name = "full";
  grid[1].name = "w/o Fine-tune";
  grid[1].fine_tune = false;
  grid[2].name = "w/o Rerank";
  grid[2].rerank = false;
  grid[3].name = "w/o kNN Search";
  grid[3].knn_search = false;
  grid[4].name = "w/o Fine-tune and kNN Search";
  grid[4].fine_tune = false;
  grid[4].knn_search = false;
  grid[5].name = "w/o Position-aware Biaffine";
  grid[5].biaffine = false;
  grid[5].rerank = false;  // no detector scores, no sigmoid bonus
  grid[6].name = "w/o Fine-tune and RoPE";
  grid[6].fine_tune = false;
  grid[6].rope = false;
  return grid;
}

/// The rerank study: detector candidates and the bonus toggled separately.
inline std::vector<AblationConfig> grid_table5(bool two_encoders = true) {
  std::vector<AblationConfig> grid(4);
  for (auto& g : grid) g.two_encoders = two_encoders;
  grid[0].name = "full";
  grid[1].name = "w/o Rerank";
  grid[1].rerank = false;
  grid[2].name = "w/o Position-aware Biaffine and Rerank";
  grid[2].biaffine = false;
  grid[2].rerank = false;
  grid[3].name = "w/o Position-aware Biaffine but Rerank";
  grid[3].biaffine = false;
  return grid;
}

inline std::vector<AblationConfig> named_grid(const std::string& name,
                                              bool two_encoders = true) {
  if (name == "table3") return grid_table3(two_encoders);
  if (name == "table5") return grid_table5(two_encoders);
  throw ConfigError("unknown ablation grid: " + name + " (expected table3 or table5)");
}

struct EvalRow {
  std::string variant;
  std::uint64_t seed = 0;
  EvalResult scores;
  ErrorBreakdown errors;
  double avg_finetune_steps = 0.0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t h = seed * 0x9E3779B97F4A7C15ull + 0x2545F4914F6CDD1Dull;
  h ^= index + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
  h ^= h >> 33;
  h *= 0xFF51AFD7ED558CCDull;
  h ^= h >> 33;
  return h;
}

inline std::int64_t sentence_id(std::size_t episode_idx, std::size_t sentence_idx) {
  return static_cast<std::int64_t>(episode_idx) * 100000 +
         static_cast<std::int64_t>(sentence_idx);
}

}  // namespace detail

struct EvalArtifacts {
  std::vector<SentencePredictions> predictions;
  std::vector<SentenceGold> gold;
};

/// Evaluates one variant over the episodes for one seed. Each episode gets a
/// fresh clone of the base checkpoint (episode-independent adaptation).
inline EvalRow evaluate_episodes(const NerModel& base,
                                 const std::vector<Episode>& episodes,
                                 const RunConfig& cfg, const AblationConfig& variant,
                                 std::uint64_t seed,
                                 EvalArtifacts* artifacts = nullptr) {
  if (variant.two_encoders != base.config().two_encoders)
    throw ConfigError(
        "ablation flag two_encoders is a train-time choice and must match the "
        "checkpoint architecture");

  std::vector<SentencePredictions> predictions;
  std::vector<SentenceGold> gold;
  double total_steps = 0.0;

  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Episode& ep = episodes[e];
    NerModel clone = base.clone();
    if (variant.fine_tune) {
      TrainConfig ft = cfg.train;
      ft.use_contrastive = variant.contrastive;
      ft.negatives_in_class_loss = variant.negatives_in_class_loss;
      const auto res =
          finetune_on_support(clone, ep.support, ep.type_set, ep.k_shot, ft,
                              cfg.finetune, detail::mix_seed(seed, e));
      total_steps += res.steps_taken;
    }
    const auto bank = build_bank(clone, ep.support, ep.type_set);
    PredictOptions opts = cfg.predict_options(ep.k_shot);
    opts.use_sigmoid_bonus = variant.rerank;
    opts.use_knn = variant.knn_search;
    opts.biaffine_candidates = variant.biaffine;
    opts.use_rotary_term = variant.rope;

    for (std::size_t s = 0; s < ep.query.size(); ++s) {
      const auto id = detail::sentence_id(e, s);
      SentencePredictions sp;
      sp.sentence_id = id;
      sp.spans = predict_sentence(clone, ep.query[s].words, ep.type_set, bank, opts);
      predictions.push_back(std::move(sp));
      SentenceGold sg;
      sg.sentence_id = id;
      sg.spans = tags_to_spans(ep.query[s]);
      gold.push_back(std::move(sg));
    }
  }

  EvalRow row;
  row.variant = variant.name;
  row.seed = seed;
  row.scores = micro_f1(predictions, gold);
  row.errors = error_breakdown(predictions, gold);
  row.avg_finetune_steps =
      episodes.empty() || !variant.fine_tune
          ? 0.0
          : total_steps / static_cast<double>(episodes.size());
  if (artifacts) {
    artifacts->predictions = std::move(predictions);
    artifacts->gold = std::move(gold);
  }
  return row;
}

struct AblationTable {
  std::vector<EvalRow> rows;

  /// Mean and std of F1 per variant, preserving grid order.
  std::vector<std::pair<std::string, EvalResult>> aggregates() const {
    std::vector<std::pair<std::string, EvalResult>> out;
    std::vector<std::string> order;
    std::map<std::string, std::vector<EvalResult>> grouped;
    for (const auto& r : rows) {
      if (!grouped.count(r.variant)) order.push_back(r.variant);
      grouped[r.variant].push_back(r.scores);
    }
    for (const auto& name : order) out.emplace_back(name, aggregate_seeds(grouped[name]));
    return out;
  }

  std::string format() const {
    std::ostringstream os;
    os << std::left << std::setw(42) << "variant" << std::right << std::setw(10)
       << "mean F1" << std::setw(10) << "std" << std::setw(8) << "seeds" << "\n";
    for (const auto& [name, agg] : aggregates()) {
      os << std::left << std::setw(42) << name << std::right << std::fixed
         << std::setprecision(4) << std::setw(10) << agg.micro_f1 << std::setw(10)
         << agg.std_dev << std::setw(8) << agg.per_seed.size() << "\n";
    }
    return os.str();
  }
};

/// Runs the full (variant x seed) grid from one trained checkpoint.
inline AblationTable run_ablation(const NerModel& base,
                                  const std::vector<AblationConfig>& grid,
                                  const std::vector<Episode>& episodes,
                                  const std::vector<std::uint64_t>& seeds,
                                  const RunConfig& cfg) {
  AblationTable table;
  for (const auto& variant : grid)
    for (const auto seed : seeds)
      table.rows.push_back(evaluate_episodes(base, episodes, cfg, variant, seed));
  return table;
}

/// results.json rows: {variant, seed, p, r, f1, fp_span, fp_type, steps}.
inline nlohmann::ordered_json results_json(const std::vector<EvalRow>& rows) {
  nlohmann::ordered_json out;
  out["rows"] = nlohmann::ordered_json::array();
  std::vector<EvalResult> all;
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["variant"] = r.variant;
    j["seed"] = r.seed;
    j["p"] = r.scores.precision;
    j["r"] = r.scores.recall;
    j["f1"] = r.scores.micro_f1;
    j["fp_span"] = r.errors.fp_span_ratio;
    j["fp_type"] = r.errors.fp_type_ratio;
    j["steps"] = r.avg_finetune_steps;
    out["rows"].push_back(std::move(j));
    all.push_back(r.scores);
  }
  const auto agg = aggregate_seeds(all);
  out["aggregate"]["micro_f1_mean"] = agg.micro_f1;
  out["aggregate"]["micro_f1_std"] = agg.std_dev;
  out["aggregate"]["precision_mean"] = agg.precision;
  out["aggregate"]["recall_mean"] = agg.recall;
  out["aggregate"]["per_seed"] = agg.per_seed;

  std::vector<std::string> order;
  std::map<std::string, std::vector<EvalResult>> grouped;
  for (const auto& r : rows) {
    if (!grouped.count(r.variant)) order.push_back(r.variant);
    grouped[r.variant].push_back(r.scores);
  }
  out["by_variant"] = nlohmann::ordered_json::array();
  for (const auto& name : order) {
    const auto va = aggregate_seeds(grouped[name]);
    nlohmann::ordered_json j;
    j["variant"] = name;
    j["micro_f1_mean"] = va.micro_f1;
    j["micro_f1_std"] = va.std_dev;
    j["per_seed"] = va.per_seed;
    out["by_variant"].push_back(std::move(j));
  }
  return out;
}

inline void write_predictions_jsonl(const std::string& path,
                                    const std::vector<SentencePredictions>& predictions) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write predictions file: " + path);
  for (const auto& p : predictions) {
    nlohmann::ordered_json j;
    j["sentence_id"] = p.sentence_id;
    j["spans"] = nlohmann::ordered_json::array();
    for (const auto& s : p.spans) {
      nlohmann::ordered_json sj;
      sj["start"] = s.span.start;
      sj["end"] = s.span.end;
      sj["label"] = s.label;
      sj["score"] = s.final_score;
      j["spans"].push_back(std::move(sj));
    }
    out << j.dump() << "\n";
  }
}

}  // namespace fewner
