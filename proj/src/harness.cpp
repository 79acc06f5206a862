#include "unlearn/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

template <class T>
void read_field(const nlohmann::json &j, const char *key, T &dst) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) {
    dst = it->get<T>();
  }
}

ojson adam_json(const AdamSettings &a) {
  return {{"learning_rate", a.learning_rate}, {"beta1", a.beta1},
          {"beta2", a.beta2},                 {"epsilon", a.epsilon},
          {"max_grad_norm", a.max_grad_norm}};
}

void read_adam(const nlohmann::json &j, AdamSettings &a) {
  read_field(j, "learning_rate", a.learning_rate);
  read_field(j, "beta1", a.beta1);
  read_field(j, "beta2", a.beta2);
  read_field(j, "epsilon", a.epsilon);
  read_field(j, "max_grad_norm", a.max_grad_norm);
}

ojson model_json(const ModelConfig &m) {
  return {{"d_model", m.d_model},         {"n_layers", m.n_layers},
          {"n_heads", m.n_heads},         {"max_seq_len", m.max_seq_len},
          {"vocab_size", m.vocab_size},   {"seed", m.seed}};
}

ojson finetune_json(const FinetuneSettings &f) {
  return {{"epochs", f.epochs},
          {"batch_size", f.batch_size},
          {"seed", f.seed},
          {"adam", adam_json(f.adam)}};
}

// JSON cannot hold inf/nan; they are written as strings.
ojson number_json(double v) {
  if (std::isfinite(v)) {
    return v;
  }
  if (std::isnan(v)) {
    return "nan";
  }
  return v > 0 ? "inf" : "-inf";
}

double number_from_json(const nlohmann::json &j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") {
      return std::numeric_limits<double>::infinity();
    }
    if (s == "-inf") {
      return -std::numeric_limits<double>::infinity();
    }
    return std::numeric_limits<double>::quiet_NaN();
  }
  return j.get<double>();
}

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot open " + path.string() + " for writing");
  }
  out << text;
  out.close();
  if (!out) {
    throw IoError("write failed: " + path.string());
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <class F>
auto stage(const char *name, F &&f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError &) {
    throw;
  } catch (const std::exception &e) {
    throw StageError(name, e.what());
  }
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

ojson to_json(const ExperimentConfig &cfg, bool include_paths) {
  ojson j;
  if (include_paths) {
    j["corpus_path"] = cfg.corpus_path.string();
  }
  j["synthetic"] = {{"n_entities", cfg.synthetic.n_entities},
                    {"forget_per_entity", cfg.synthetic.forget_per_entity},
                    {"direct_per_entity", cfg.synthetic.direct_per_entity},
                    {"indirect_per_entity", cfg.synthetic.indirect_per_entity},
                    {"n_general", cfg.synthetic.n_general},
                    {"test_per_entity", cfg.synthetic.test_per_entity},
                    {"n_test_general", cfg.synthetic.n_test_general},
                    {"seed", cfg.synthetic.seed}};
  j["composition"] = {{"mode", to_string(cfg.composition.mode)},
                      {"seed", cfg.composition.seed}};
  j["strategy"] = {{"kind", to_string(cfg.strategy.kind)}, {"seed", cfg.strategy.seed}};
  j["unlearn"] = {{"method", to_string(cfg.unlearn.method)},
                  {"beta", cfg.unlearn.beta},
                  {"alpha", cfg.unlearn.alpha},
                  {"gamma", cfg.unlearn.gamma},
                  {"retain_strength", cfg.unlearn.retain_strength},
                  {"epochs", cfg.unlearn.epochs},
                  {"batch_size", cfg.unlearn.batch_size},
                  {"seed", cfg.unlearn.seed},
                  {"adam", adam_json(cfg.unlearn.adam)},
                  {"refusal_pool", cfg.unlearn.refusal_pool}};
  j["model"] = model_json(cfg.model);
  j["finetune"] = finetune_json(cfg.finetune);
  if (include_paths) {
    j["output_dir"] = cfg.output_dir.string();
    j["cache_dir"] = cfg.cache_dir.string();
  }
  j["seeds"] = cfg.seeds;
  return j;
}

ExperimentConfig config_from_json(const nlohmann::json &j) {
  if (!j.is_object()) {
    throw ArgumentError("config must be a JSON object");
  }
  ExperimentConfig cfg;
  try {
    std::string path;
    if (j.contains("corpus_path")) {
      read_field(j, "corpus_path", path);
      cfg.corpus_path = path;
    }
    if (auto it = j.find("synthetic"); it != j.end()) {
      auto &s = cfg.synthetic;
      read_field(*it, "n_entities", s.n_entities);
      read_field(*it, "forget_per_entity", s.forget_per_entity);
      read_field(*it, "direct_per_entity", s.direct_per_entity);
      read_field(*it, "indirect_per_entity", s.indirect_per_entity);
      read_field(*it, "n_general", s.n_general);
      read_field(*it, "test_per_entity", s.test_per_entity);
      read_field(*it, "n_test_general", s.n_test_general);
      read_field(*it, "seed", s.seed);
    }
    if (auto it = j.find("composition"); it != j.end()) {
      if (it->is_string()) {
        cfg.composition.mode = parse_retain_mode(it->get<std::string>());
      } else {
        if (it->contains("mode")) {
          cfg.composition.mode = parse_retain_mode(it->at("mode").get<std::string>());
        }
        read_field(*it, "seed", cfg.composition.seed);
      }
    }
    if (auto it = j.find("strategy"); it != j.end()) {
      if (it->is_string()) {
        cfg.strategy.kind = parse_strategy(it->get<std::string>());
      } else {
        if (it->contains("kind")) {
          cfg.strategy.kind = parse_strategy(it->at("kind").get<std::string>());
        }
        read_field(*it, "seed", cfg.strategy.seed);
      }
    }
    if (auto it = j.find("unlearn"); it != j.end()) {
      auto &u = cfg.unlearn;
      if (it->contains("method")) {
        u.method = parse_method(it->at("method").get<std::string>());
      }
      read_field(*it, "beta", u.beta);
      read_field(*it, "alpha", u.alpha);
      read_field(*it, "gamma", u.gamma);
      read_field(*it, "retain_strength", u.retain_strength);
      read_field(*it, "epochs", u.epochs);
      read_field(*it, "batch_size", u.batch_size);
      read_field(*it, "seed", u.seed);
      read_field(*it, "refusal_pool", u.refusal_pool);
      if (auto a = it->find("adam"); a != it->end()) {
        read_adam(*a, u.adam);
      }
    }
    if (auto it = j.find("model"); it != j.end()) {
      auto &m = cfg.model;
      read_field(*it, "d_model", m.d_model);
      read_field(*it, "n_layers", m.n_layers);
      read_field(*it, "n_heads", m.n_heads);
      read_field(*it, "max_seq_len", m.max_seq_len);
      read_field(*it, "vocab_size", m.vocab_size);
      read_field(*it, "seed", m.seed);
    }
    if (auto it = j.find("finetune"); it != j.end()) {
      auto &f = cfg.finetune;
      read_field(*it, "epochs", f.epochs);
      read_field(*it, "batch_size", f.batch_size);
      read_field(*it, "seed", f.seed);
      if (auto a = it->find("adam"); a != it->end()) {
        read_adam(*a, f.adam);
      }
    }
    if (j.contains("output_dir")) {
      read_field(j, "output_dir", path);
      cfg.output_dir = path;
    }
    if (j.contains("cache_dir")) {
      path.clear();
      read_field(j, "cache_dir", path);
      cfg.cache_dir = path;
    }
    read_field(j, "seeds", cfg.seeds);
  } catch (const nlohmann::json::exception &e) {
    throw ArgumentError(std::string("bad config: ") + e.what());
  }
  if (cfg.seeds.empty()) {
    throw ArgumentError("config needs at least one seed");
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open config " + path.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error &e) {
    throw ParseError(0, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

ExperimentConfig seeded(const ExperimentConfig &cfg, std::uint64_t seed) {
  ExperimentConfig out = cfg;
  out.seeds = {seed};
  out.model.seed = seed;
  out.finetune.seed = seed;
  out.strategy.seed = seed;
  out.composition.seed = seed;
  out.unlearn.seed = seed;
  return out;
}

CorpusBundle load_or_generate_corpus(const ExperimentConfig &cfg) {
  if (cfg.corpus_path.empty()) {
    return generate_synthetic(cfg.synthetic);
  }
  return load_corpus(cfg.corpus_path);
}

Vocabulary experiment_vocabulary(const CorpusBundle &corpus, const UnlearnConfig &unlearn) {
  const auto &pool = unlearn.refusal_pool.empty() ? default_refusal_pool() : unlearn.refusal_pool;
  return Vocabulary::from_corpus(corpus, pool);
}

std::vector<TokenSeq> finetune_data(const CorpusBundle &corpus, const ModelState &model) {
  std::vector<TokenSeq> data;
  data.reserve(corpus.size());
  for (const auto *split : {&corpus.forget, &corpus.retain, &corpus.test}) {
    for (const auto &qa : *split) {
      data.push_back(tokenize(model.vocab, qa, model.config.max_seq_len));
    }
  }
  return data;
}

FinetunedModel finetuned_model(const ExperimentConfig &cfg, const CorpusBundle &corpus) {
  auto vocab = experiment_vocabulary(corpus, cfg.unlearn);
  ModelConfig mcfg = cfg.model;
  mcfg.vocab_size = vocab.size();
  validate(mcfg);

  std::ostringstream corpus_text;
  write_corpus(corpus, corpus_text);
  ojson key_doc{{"corpus", corpus_text.str()},
                {"vocabulary", vocab.tokens()},
                {"model", model_json(mcfg)},
                {"finetune", finetune_json(cfg.finetune)}};
  const auto key = hex64(fnv1a64(key_doc.dump()));
  const fs::path cache = cfg.cache_dir.empty() ? cfg.output_dir / "cache" : cfg.cache_dir;
  const auto ckpt_path = cache / ("ft-" + key + ".ckpt");
  const auto baseline_path = cache / ("ft-" + key + ".baseline.json");

  if (fs::exists(ckpt_path) && fs::exists(baseline_path)) {
    FinetunedModel out{load_checkpoint(ckpt_path), {}, true};
    std::ifstream in(baseline_path);
    out.baseline = report_from_json(nlohmann::json::parse(in));
    return out;
  }

  auto model = stage("finetune", [&] {
    auto init = init_model(mcfg, vocab);
    const auto data = finetune_data(corpus, init);
    return finetune(std::move(init), data, cfg.finetune);
  });
  auto baseline = stage("baseline", [&] { return evaluate(model, corpus); });
  stage("persist", [&] {
    fs::create_directories(cache);
    const auto tmp = ckpt_path.string() + ".tmp";
    save_checkpoint(model, tmp);
    fs::rename(tmp, ckpt_path);
    write_text(baseline_path, to_json(baseline).dump(2) + "\n");
    return 0;
  });
  return {std::move(model), std::move(baseline), false};
}

std::string RunResult::run_id() const {
  return std::string(to_string(config.unlearn.method)) + "-" +
         std::string(to_string(config.strategy.kind)) + "-" +
         std::string(to_string(config.composition.mode)) + "-s" + std::to_string(seed);
}

ojson to_json(const AggregateReport &r) {
  ojson j;
  j["forget_efficacy"] = number_json(r.forget_efficacy);
  j["model_utility"] = number_json(r.model_utility);
  ojson dn = ojson::object();
  for (const auto &[n, v] : r.distinct_n) {
    dn[std::to_string(n)] = number_json(v);
  }
  j["distinct_n"] = dn;
  j["perplexity_forget"] = number_json(r.perplexity_forget);
  j["perplexity_test"] = number_json(r.perplexity_test);
  j["perplexity_kind"] = "per-token, answer tokens only";
  j["exact_memorization"] = number_json(r.exact_memorization);
  j["embedding_source"] = "embed_sequence of the evaluated model";
  j["decoding"] = "greedy, up to " + std::to_string(kMaxNewTokens) + " new tokens";
  ojson pe = ojson::object();
  for (const auto &[id, e] : r.per_entity) {
    pe[id] = {{"forget_efficacy", number_json(e.forget_efficacy)},
              {"model_utility", number_json(e.model_utility)},
              {"exact_memorization", number_json(e.exact_memorization)}};
  }
  j["per_entity"] = pe;
  return j;
}

AggregateReport report_from_json(const nlohmann::json &j) {
  AggregateReport r;
  r.forget_efficacy = number_from_json(j.at("forget_efficacy"));
  r.model_utility = number_from_json(j.at("model_utility"));
  for (const auto &[n, v] : j.at("distinct_n").items()) {
    r.distinct_n[std::stoul(n)] = number_from_json(v);
  }
  r.perplexity_forget = number_from_json(j.at("perplexity_forget"));
  r.perplexity_test = number_from_json(j.at("perplexity_test"));
  r.exact_memorization = number_from_json(j.at("exact_memorization"));
  for (const auto &[id, e] : j.at("per_entity").items()) {
    r.per_entity[id] = {number_from_json(e.at("forget_efficacy")),
                        number_from_json(e.at("model_utility")),
                        number_from_json(e.at("exact_memorization"))};
  }
  return r;
}

ojson to_json(const RunResult &result, bool include_wall_time) {
  ojson j;
  j["run_id"] = result.run_id();
  j["seed"] = result.seed;
  j["config"] = to_json(result.config, false);
  j["baseline"] = to_json(result.baseline);
  j["final"] = to_json(result.final);
  j["telemetry"] = result.telemetry_path.generic_string();
  j["warnings"] = result.warnings;
  if (include_wall_time) {
    j["wall_time_s"] = result.wall_time_s;
  }
  return j;
}

RunResult run_from_json(const nlohmann::json &j) {
  RunResult r;
  try {
    r.config = config_from_json(j.at("config"));
    r.seed = j.at("seed").get<std::uint64_t>();
    r.baseline = report_from_json(j.at("baseline"));
    r.final = report_from_json(j.at("final"));
    r.telemetry_path = j.at("telemetry").get<std::string>();
    read_field(j, "warnings", r.warnings);
    read_field(j, "wall_time_s", r.wall_time_s);
  } catch (const nlohmann::json::exception &e) {
    throw ParseError(0, std::string("bad run record: ") + e.what());
  }
  return r;
}

RunResult load_run(const fs::path &run_json) {
  std::ifstream in(run_json);
  if (!in) {
    throw IoError("cannot open " + run_json.string());
  }
  try {
    return run_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error &e) {
    throw ParseError(0, run_json.string() + ": " + e.what());
  }
}

RunResult run_single(const ExperimentConfig &base, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = seeded(base, seed);
  validate(cfg.unlearn);
  if (!cfg.corpus_path.empty() && !fs::exists(cfg.corpus_path)) {
    throw StageError("corpus", "corpus not found: " + cfg.corpus_path.string());
  }

  RunResult result;
  result.config = cfg;
  result.seed = seed;

  const auto corpus = stage("corpus", [&] { return load_or_generate_corpus(cfg); });
  auto ft = finetuned_model(cfg, corpus);
  result.baseline = ft.baseline;

  // Unlearning starts from exactly the model the baseline was computed on;
  // that state is also the frozen reference.
  CorpusBundle unlearn_corpus = corpus;
  const auto schedule = stage("schedule", [&] {
    unlearn_corpus.retain = compose_retain(corpus, cfg.composition);
    return build_schedule(cfg.strategy, unlearn_corpus.forget, unlearn_corpus.retain,
                          cfg.unlearn.epochs);
  });
  result.warnings = schedule.warnings;

  const fs::path dir = cfg.output_dir / ("seed-" + std::to_string(seed));
  const auto marker = dir / "INCOMPLETE";
  stage("persist", [&] {
    fs::create_directories(dir);
    write_text(marker, "run started; outputs are partial until this file is removed\n");
    std::ostringstream sched;
    write_schedule(schedule, sched);
    write_text(dir / "schedule.jsonl", sched.str());
    save_checkpoint(ft.model, dir / "finetuned.ckpt");
    return 0;
  });

  result.telemetry_path = "telemetry.jsonl";
  std::ofstream telemetry(dir / result.telemetry_path, std::ios::binary);
  if (!telemetry) {
    throw StageError("persist", "cannot open telemetry stream in " + dir.string());
  }
  const auto unlearned = stage("unlearn", [&] {
    return unlearn_run(ft.model, schedule, unlearn_corpus, cfg.unlearn,
                       [&](const StepTelemetry &row) { write_telemetry(row, telemetry); });
  });
  telemetry.close();

  result.final = stage("evaluate", [&] { return evaluate(unlearned, corpus); });

  stage("persist", [&] {
    save_checkpoint(unlearned, dir / "unlearned.ckpt");
    write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
    emit_report(std::span<const RunResult>(&result, 1), dir);
    result.wall_time_s = elapsed_s(t0);
    write_text(dir / "run.json", to_json(result).dump(2) + "\n");
    fs::remove(marker);
    return 0;
  });
  return result;
}

std::vector<RunResult> run_experiment(const ExperimentConfig &cfg) {
  if (cfg.seeds.empty()) {
    throw ArgumentError("config needs at least one seed");
  }
  // Fail before anything is written.
  if (!cfg.corpus_path.empty() && !fs::exists(cfg.corpus_path)) {
    throw StageError("corpus", "corpus not found: " + cfg.corpus_path.string());
  }
  validate(cfg.unlearn);
  std::vector<RunResult> results;
  for (auto seed : cfg.seeds) {
    results.push_back(run_single(cfg, seed));
  }
  stage("persist", [&] {
    fs::create_directories(cfg.output_dir);
    write_text(cfg.output_dir / "config.json", to_json(cfg).dump(2) + "\n");
    emit_report(results, cfg.output_dir);
    return 0;
  });
  return results;
}

std::string format_double(double v) {
  if (std::isnan(v)) {
    return "nan";
  }
  if (std::isinf(v)) {
    return v > 0 ? "inf" : "-inf";
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string report_header() {
  return "run_id,method,strategy,composition,FE,MU_T,PPL_F,PPL_T,distinct_1,distinct_2,EM";
}

namespace {

double distinct_or_zero(const AggregateReport &r, std::size_t n) {
  auto it = r.distinct_n.find(n);
  return it == r.distinct_n.end() ? 0.0 : it->second;
}

std::string metric_cells(const AggregateReport &r) {
  return format_double(r.forget_efficacy) + "," + format_double(r.model_utility) + "," +
         format_double(r.perplexity_forget) + "," + format_double(r.perplexity_test) + "," +
         format_double(distinct_or_zero(r, 1)) + "," + format_double(distinct_or_zero(r, 2)) +
         "," + format_double(r.exact_memorization);
}

using CellKey = std::tuple<std::string, std::string, std::string>;

CellKey cell_key(const ExperimentConfig &cfg) {
  return {std::string(to_string(cfg.unlearn.method)),
          std::string(to_string(cfg.strategy.kind)),
          std::string(to_string(cfg.composition.mode))};
}

} // namespace

std::string report_row(const std::string &run_id, const ExperimentConfig &cfg,
                       const AggregateReport &report) {
  const auto [m, s, c] = cell_key(cfg);
  return run_id + "," + m + "," + s + "," + c + "," + metric_cells(report);
}

void emit_report(std::span<const RunResult> results, const fs::path &out) {
  if (results.empty()) {
    throw ArgumentError("emit_report needs at least one result");
  }
  struct Cell {
    std::size_t n = 0;
    AggregateReport sum;
    AggregateReport baseline;
    std::map<std::string, std::pair<std::size_t, EntityScores>> entities;
  };
  std::map<CellKey, Cell> cells;
  for (const auto &r : results) {
    auto &cell = cells[cell_key(r.config)];
    ++cell.n;
    auto add = [](AggregateReport &acc, const AggregateReport &x) {
      acc.forget_efficacy += x.forget_efficacy;
      acc.model_utility += x.model_utility;
      acc.perplexity_forget += x.perplexity_forget;
      acc.perplexity_test += x.perplexity_test;
      acc.exact_memorization += x.exact_memorization;
      for (std::size_t n : {1, 2}) {
        acc.distinct_n[n] += distinct_or_zero(x, n);
      }
    };
    add(cell.sum, r.final);
    add(cell.baseline, r.baseline);
    for (const auto &[id, e] : r.final.per_entity) {
      auto &[count, acc] = cell.entities[id];
      ++count;
      acc.forget_efficacy += e.forget_efficacy;
      acc.model_utility += e.model_utility;
      acc.exact_memorization += e.exact_memorization;
    }
  }
  auto mean = [](AggregateReport r, std::size_t n) {
    const double k = static_cast<double>(n);
    r.forget_efficacy /= k;
    r.model_utility /= k;
    r.perplexity_forget /= k;
    r.perplexity_test /= k;
    r.exact_memorization /= k;
    for (auto &[_, v] : r.distinct_n) {
      v /= k;
    }
    return r;
  };

  std::ostringstream summary, per_entity, runs;
  summary << report_header() << ",n_runs,baseline_FE,baseline_MU_T\n";
  per_entity << "run_id,method,strategy,composition,entity_id,FE,MU_T,EM,n_runs\n";
  for (const auto &[key, cell] : cells) {
    const auto &[m, s, c] = key;
    const auto avg = mean(cell.sum, cell.n);
    const auto base = mean(cell.baseline, cell.n);
    // Seed-averaged cells are identified by method-strategy-composition.
    const auto cell_id = m + "-" + s + "-" + c;
    summary << cell_id << ',' << m << ',' << s << ',' << c << ',' << metric_cells(avg) << ','
            << cell.n << ',' << format_double(base.forget_efficacy) << ',' << format_double(base.model_utility)
            << '\n';
    for (const auto &[id, ent] : cell.entities) {
      const auto &[count, acc] = ent;
      const double k = static_cast<double>(count);
      per_entity << cell_id << ',' << m << ',' << s << ',' << c << ',' << id << ','
                 << format_double(acc.forget_efficacy / k) << ','
                 << format_double(acc.model_utility / k) << ','
                 << format_double(acc.exact_memorization / k) << ',' << count << '\n';
    }
  }
  runs << report_header() << '\n';
  for (const auto &r : results) {
    runs << report_row(r.run_id(), r.config, r.final) << '\n';
  }

  try {
    fs::create_directories(out);
  } catch (const fs::filesystem_error &e) {
    throw IoError(e.what());
  }
  write_text(out / "summary.csv", summary.str());
  write_text(out / "per_entity.csv", per_entity.str());
  write_text(out / "runs.csv", runs.str());
}

} // namespace unlearn
