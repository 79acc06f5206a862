#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "unlearn/corpus.hpp"
#include "unlearn/metrics.hpp"
#include "unlearn/objectives.hpp"
#include "unlearn/scheduler.hpp"
#include "unlearn/seqmodel.hpp"

namespace unlearn {

// Full description of one experiment. A run seed replaces every training and
// sampling seed (model init, fine-tuning order, schedule, composition,
// refusal choice); the synthetic corpus keeps its own seed.
struct ExperimentConfig {
  // Empty path: generate the corpus from `synthetic`.
  std::filesystem::path corpus_path;
  SyntheticSpec synthetic;
  RetainComposition composition{RetainMode::Full, 0};
  SamplingStrategy strategy{StrategyKind::Melu, 0};
  UnlearnConfig unlearn;
  // vocab_size is derived from the corpus.
  ModelConfig model;
  FinetuneSettings finetune;
  std::filesystem::path output_dir = "runs";
  // Fine-tuned checkpoint cache; empty means <output_dir>/cache.
  std::filesystem::path cache_dir;
  std::vector<std::uint64_t> seeds{0};
};

// JSON (de)serialisation. Missing fields keep their defaults.
nlohmann::ordered_json to_json(const ExperimentConfig &cfg, bool include_paths = true);
ExperimentConfig config_from_json(const nlohmann::json &j);
ExperimentConfig load_config(const std::filesystem::path &path);

// Config with `seed` pushed into every seeded component.
ExperimentConfig seeded(const ExperimentConfig &cfg, std::uint64_t seed);

CorpusBundle load_or_generate_corpus(const ExperimentConfig &cfg);

// Corpus vocabulary plus the refusal phrases.
Vocabulary experiment_vocabulary(const CorpusBundle &corpus, const UnlearnConfig &unlearn);

// Every pair of D_f, D_r, D_t tokenized for fine-tuning.
std::vector<TokenSeq> finetune_data(const CorpusBundle &corpus, const ModelState &model);

struct FinetunedModel {
  ModelState model;
  AggregateReport baseline;
  bool from_cache = false;
};

// Fine-tunes (or loads from the cache) and evaluates the baseline once.
FinetunedModel finetuned_model(const ExperimentConfig &seeded_cfg, const CorpusBundle &corpus);

struct RunResult {
  ExperimentConfig config; // seeded
  std::uint64_t seed = 0;
  AggregateReport baseline;
  AggregateReport final;
  std::filesystem::path telemetry_path; // relative to the run directory
  std::vector<std::string> warnings;
  double wall_time_s = 0.0;

  std::string run_id() const;
};

nlohmann::ordered_json to_json(const AggregateReport &report);
AggregateReport report_from_json(const nlohmann::json &j);
// run.json payload; wall time is included only when requested.
nlohmann::ordered_json to_json(const RunResult &result, bool include_wall_time = true);
RunResult run_from_json(const nlohmann::json &j);
RunResult load_run(const std::filesystem::path &run_json);

// One seed: corpus -> fine-tune -> baseline -> snapshot -> unlearn ->
// evaluate -> persist into <output_dir>/seed-<seed>/.
RunResult run_single(const ExperimentConfig &cfg, std::uint64_t seed);

// run_single for every seed, then emit_report into output_dir.
std::vector<RunResult> run_experiment(const ExperimentConfig &cfg);

// Seed-averaged summary.csv, per_entity.csv, and runs.csv (one row per run).
// Rows are ordered by method, then strategy, then composition.
void emit_report(std::span<const RunResult> results, const std::filesystem::path &out);

// Single report row: run_id,method,strategy,composition,FE,MU_T,PPL_F,PPL_T,
// distinct_1,distinct_2,EM.
std::string report_header();
std::string report_row(const std::string &run_id, const ExperimentConfig &cfg,
                       const AggregateReport &report);

std::string format_double(double v);

} // namespace unlearn
