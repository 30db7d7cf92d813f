#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fewner/config.hpp"
#include "fewner/harness.hpp"
#include "fewner/selftest.hpp"
#include "fewner/synthetic.hpp"
#include "fewner/training.hpp"

namespace fewner::cli {

namespace detail {

inline std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    seeds.push_back(std::stoull(item));
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  return seeds;
}

inline RunConfig make_config(const std::string& config_path,
                             const std::vector<std::string>& overrides) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory: " + dir);
}

inline void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << j.dump(2) << "\n";
}

struct TrainOutcome {
  std::string checkpoint_path;
  double final_loss = 0.0;
  double best_val_f1 = -1.0;
  int best_step = -1;
};

inline TrainOutcome run_training(const RunConfig& cfg, const std::string& out_dir,
                                 std::ostream& os) {
  if (cfg.corpus.empty()) throw ConfigError("data.corpus is required for training");
  const auto corpus = load_corpus(cfg.corpus, parse_corpus_format(cfg.format));
  NerModel model = make_model(cfg.model, cfg.model_seed);
  TrainerState state(cfg.train.seed);

  std::vector<Episode> val;
  if (!cfg.val_episodes.empty()) val = load_episodes_jsonl(cfg.val_episodes);

  TrainOutcome outcome;
  nlohmann::ordered_json log;
  log["loss"] = nlohmann::ordered_json::array();
  std::optional<NerModel> best;

  for (int step = 0; step < cfg.train.max_steps; ++step) {
    const auto ep = sample_episode(corpus, cfg.n_way, cfg.k_shot,
                                   fewner::detail::mix_seed(cfg.train.seed,
                                                            static_cast<std::uint64_t>(step)));
    outcome.final_loss = train_step(model, ep, cfg.train, step, state);
    log["loss"].push_back(outcome.final_loss);
    if ((step + 1) % 50 == 0)
      os << "step " << (step + 1) << "/" << cfg.train.max_steps << "  loss "
         << outcome.final_loss << "\n";

    // model selection on validation F1 (fine-tuning disabled while selecting)
    if (!val.empty() && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
      AblationConfig variant;
      variant.fine_tune = false;
      variant.two_encoders = cfg.model.two_encoders;
      const auto row = evaluate_episodes(model, val, cfg, variant, cfg.train.seed);
      if (row.scores.micro_f1 > outcome.best_val_f1) {
        outcome.best_val_f1 = row.scores.micro_f1;
        outcome.best_step = step + 1;
        best = model.clone();
      }
      os << "validation F1 " << row.scores.micro_f1 << " at step " << (step + 1)
         << "\n";
    }
  }

  ensure_dir(out_dir);
  outcome.checkpoint_path = out_dir + "/checkpoint.bin";
  CheckpointMeta meta;
  meta.step = best ? outcome.best_step : cfg.train.max_steps;
  meta.seed = cfg.train.seed;
  save_checkpoint(best ? *best : model, outcome.checkpoint_path, meta);
  log["final_loss"] = outcome.final_loss;
  log["best_val_f1"] = outcome.best_val_f1;
  log["best_step"] = outcome.best_step;
  log["checkpoint"] = outcome.checkpoint_path;
  write_json(out_dir + "/train_log.json", log);
  os << "checkpoint written to " << outcome.checkpoint_path << "\n";
  return outcome;
}

}  // namespace detail

/// Entry point behind the fewner binary; also callable in-process (tests,
/// determinism checks). argv[0] is the program name.
inline int cli_main(const std::vector<std::string>& argv) {
  CLI::App app{"few-shot span NER toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration file");
    sub->add_option("--set", overrides, "override config entries (section.key=value)");
  };

  // --- sample ---------------------------------------------------------------
  auto* sample = app.add_subcommand("sample", "sample N-way K-shot episodes");
  add_common(sample);
  std::string sample_corpus, sample_format, sample_out;
  int sample_n_way = 0, sample_k_shot = 0, sample_count = 0, synthetic_n = 0,
      synthetic_types = 2;
  std::uint64_t sample_seed = 1;
  sample->add_option("--corpus", sample_corpus,
                     "corpus file to sample from (default: data.corpus)");
  sample->add_option("--format", sample_format, "column-bio or episode-json");
  sample->add_option("--synthetic", synthetic_n,
                     "generate a synthetic corpus of this many sentences instead");
  sample->add_option("--synthetic-types", synthetic_types, "entity types (1-3)");
  std::string synthetic_domain = "source";
  sample
      ->add_option("--synthetic-domain", synthetic_domain,
                   "source (person/company) or target (location/animal)")
      ->check(CLI::IsMember({"source", "target"}));
  std::string sample_corpus_out;
  sample->add_option("--corpus-out", sample_corpus_out,
                     "also write the (synthetic) corpus as column-bio here");
  sample->add_option("--n-way", sample_n_way, "entity classes per episode");
  sample->add_option("--k-shot", sample_k_shot, "target mentions per class");
  sample->add_option("--episodes", sample_count, "number of episodes");
  sample->add_option("--seed", sample_seed, "sampler seed");
  sample->add_option("--out", sample_out, "episodes JSON-lines output")->required();

  // --- train ----------------------------------------------------------------
  auto* train = app.add_subcommand("train", "episode training from a corpus");
  add_common(train);
  std::string train_out_dir = "out";
  train->add_option("--out-dir", train_out_dir, "output directory");

  // --- eval -----------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "fine-tune, predict and score episodes");
  add_common(eval);
  std::string eval_checkpoint, eval_episodes, eval_seeds = "1,2,3,4,5",
              eval_out_dir = "out";
  eval->add_option("--checkpoint", eval_checkpoint, "trained checkpoint")->required();
  eval->add_option("--episodes", eval_episodes, "episodes JSON-lines")->required();
  eval->add_option("--seeds", eval_seeds, "comma-separated seed list");
  eval->add_option("--out-dir", eval_out_dir, "output directory");

  // --- ablate ---------------------------------------------------------------
  auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
  add_common(ablate);
  std::string ablate_checkpoint, ablate_episodes, ablate_grid = "table3",
              ablate_seeds = "1,2,3,4,5", ablate_out_dir = "out";
  ablate->add_option("--checkpoint", ablate_checkpoint, "trained checkpoint")
      ->required();
  ablate->add_option("--episodes", ablate_episodes, "episodes JSON-lines")->required();
  ablate->add_option("--grid", ablate_grid, "table3 or table5");
  ablate->add_option("--seeds", ablate_seeds, "comma-separated seed list");
  ablate->add_option("--out-dir", ablate_out_dir, "output directory");

  // --- analyze-errors ---------------------------------------------------------
  auto* analyze = app.add_subcommand("analyze-errors",
                                     "FP-Span / FP-Type breakdown of predictions");
  add_common(analyze);
  std::string an_checkpoint, an_episodes, an_out_dir = "out";
  std::uint64_t an_seed = 1;
  analyze->add_option("--checkpoint", an_checkpoint, "trained checkpoint")->required();
  analyze->add_option("--episodes", an_episodes, "episodes JSON-lines")->required();
  analyze->add_option("--seed", an_seed, "evaluation seed");
  analyze->add_option("--out-dir", an_out_dir, "output directory");

  // --- selftest ---------------------------------------------------------------
  auto* selftest_cmd = app.add_subcommand("selftest", "run the property suite");

  std::vector<const char*> raw;
  raw.reserve(argv.size());
  for (const auto& a : argv) raw.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*sample) {
      // explicit flags win; anything omitted falls back to the config file
      const auto cfg = detail::make_config(config_path, overrides);
      const std::string corpus_path =
          sample_corpus.empty() ? cfg.corpus : sample_corpus;
      const std::string format = sample_format.empty() ? cfg.format : sample_format;
      const int n_way = sample_n_way > 0 ? sample_n_way : cfg.n_way;
      const int k_shot = sample_k_shot > 0 ? sample_k_shot : cfg.k_shot;
      const int count = sample_count > 0 ? sample_count : cfg.episodes;

      Corpus corpus;
      if (synthetic_n > 0)
        corpus = synthetic_domain == "target"
                     ? make_synthetic_target_corpus(synthetic_n, sample_seed)
                     : make_synthetic_corpus(synthetic_n, sample_seed, synthetic_types);
      else if (!corpus_path.empty())
        corpus = load_corpus(corpus_path, parse_corpus_format(format));
      else
        throw ConfigError("sample needs --corpus, --synthetic, or data.corpus");
      if (!sample_corpus_out.empty()) write_column_bio(sample_corpus_out, corpus);
      std::vector<Episode> episodes;
      int valid = 0;
      for (int i = 0; i < count; ++i) {
        episodes.push_back(sample_episode(
            corpus, n_way, k_shot,
            fewner::detail::mix_seed(sample_seed, static_cast<std::uint64_t>(i))));
        valid += validate_episode(episodes.back()).pass ? 1 : 0;
      }
      write_episodes_jsonl(sample_out, episodes);
      std::cout << "wrote " << episodes.size() << " episodes to " << sample_out << " ("
                << valid << " pass validation)\n";
      return 0;
    }

    if (*train) {
      const auto cfg = detail::make_config(config_path, overrides);
      detail::run_training(cfg, train_out_dir, std::cout);
      return 0;
    }

    if (*eval) {
      const auto cfg = detail::make_config(config_path, overrides);
      const auto model = load_checkpoint(eval_checkpoint);
      const auto episodes = load_episodes_jsonl(eval_episodes);
      const auto seeds = detail::parse_seed_list(eval_seeds);
      AblationConfig variant;
      variant.fine_tune = cfg.eval_fine_tune;
      variant.contrastive = cfg.train.use_contrastive;
      variant.negatives_in_class_loss = cfg.train.negatives_in_class_loss;
      variant.two_encoders = model.config().two_encoders;

      std::vector<EvalRow> rows;
      detail::ensure_dir(eval_out_dir);
      for (std::size_t i = 0; i < seeds.size(); ++i) {
        EvalArtifacts artifacts;
        rows.push_back(
            evaluate_episodes(model, episodes, cfg, variant, seeds[i], &artifacts));
        write_predictions_jsonl(
            eval_out_dir + "/predictions_seed" + std::to_string(seeds[i]) + ".jsonl",
            artifacts.predictions);
      }
      detail::write_json(eval_out_dir + "/results.json", results_json(rows));

      std::vector<EvalResult> scores;
      for (const auto& r : rows) scores.push_back(r.scores);
      const auto agg = aggregate_seeds(scores);
      std::cout << "micro-F1 " << agg.micro_f1 << " +/- " << agg.std_dev << " over "
                << seeds.size() << " seeds (P " << agg.precision << ", R "
                << agg.recall << ")\nresults written to " << eval_out_dir
                << "/results.json\n";
      return 0;
    }

    if (*ablate) {
      const auto cfg = detail::make_config(config_path, overrides);
      const auto model = load_checkpoint(ablate_checkpoint);
      const auto episodes = load_episodes_jsonl(ablate_episodes);
      const auto seeds = detail::parse_seed_list(ablate_seeds);
      const auto grid = named_grid(ablate_grid, model.config().two_encoders);
      const auto table = run_ablation(model, grid, episodes, seeds, cfg);
      detail::ensure_dir(ablate_out_dir);
      detail::write_json(ablate_out_dir + "/ablation.json", results_json(table.rows));
      std::cout << table.format() << "ablation rows written to " << ablate_out_dir
                << "/ablation.json\n";
      return 0;
    }

    if (*analyze) {
      const auto cfg = detail::make_config(config_path, overrides);
      const auto model = load_checkpoint(an_checkpoint);
      const auto episodes = load_episodes_jsonl(an_episodes);
      AblationConfig variant;
      variant.fine_tune = cfg.eval_fine_tune;
      variant.two_encoders = model.config().two_encoders;
      EvalArtifacts artifacts;
      const auto row = evaluate_episodes(model, episodes, cfg, variant, an_seed,
                                         &artifacts);
      nlohmann::ordered_json j;
      j["f1"] = row.scores.micro_f1;
      j["fp_span"] = row.errors.fp_span_ratio;
      j["fp_type"] = row.errors.fp_type_ratio;
      j["fp_span_count"] = row.errors.fp_span_count;
      j["fp_type_count"] = row.errors.fp_type_count;
      j["has_false_positives"] = row.errors.has_false_positives;
      detail::ensure_dir(an_out_dir);
      detail::write_json(an_out_dir + "/errors.json", j);
      std::cout << "F1 " << row.scores.micro_f1;
      if (row.errors.has_false_positives)
        std::cout << "  FP-Span " << 100.0 * row.errors.fp_span_ratio << "%  FP-Type "
                  << 100.0 * row.errors.fp_type_ratio << "%";
      else
        std::cout << "  no false positives";
      std::cout << "\nerror analysis written to " << an_out_dir << "/errors.json\n";
      return 0;
    }

    if (*selftest_cmd) {
      const int failures = selftest::run_property_suite(std::cout);
      std::cout << (failures == 0 ? "all property checks green\n"
                                  : std::to_string(failures) + " check(s) failed\n");
      return failures == 0 ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

inline int cli_main(int argc, char** argv) {
  return cli_main(std::vector<std::string>(argv, argv + argc));
}

}  // namespace fewner::cli
