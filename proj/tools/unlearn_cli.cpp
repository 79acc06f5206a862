#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/harness.hpp"

namespace fs = std::filesystem;
using namespace unlearn;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<std::string> method;
  std::optional<std::string> composition;
  std::optional<std::size_t> epochs;
  std::string out;
  std::string checkpoint;
  std::vector<std::string> inputs;
};

void add_common(CLI::App *cmd, Flags &f) {
  cmd->add_option("--config", f.config, "JSON experiment config");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--out", f.out, "output directory");
}

void add_training(CLI::App *cmd, Flags &f) {
  cmd->add_option("--strategy", f.strategy, "sampling strategy")
      ->check(CLI::IsMember({"one2one-seq", "one2one-rand", "cyclic", "melu"}));
  cmd->add_option("--method", f.method, "unlearning objective")
      ->check(CLI::IsMember({"ga", "gd", "dpo", "npo"}));
  cmd->add_option("--composition", f.composition, "retain-set composition")
      ->check(CLI::IsMember({"direct", "indirect", "balanced", "full"}));
  cmd->add_option("--epochs", f.epochs, "unlearning epochs")->check(CLI::PositiveNumber);
}

// flags > file > defaults
ExperimentConfig effective_config(const Flags &f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (f.seed) {
    cfg.seeds = {*f.seed};
  }
  if (f.strategy) {
    cfg.strategy.kind = parse_strategy(*f.strategy);
  }
  if (f.method) {
    cfg.unlearn.method = parse_method(*f.method);
  }
  if (f.composition) {
    cfg.composition.mode = parse_retain_mode(*f.composition);
  }
  if (f.epochs) {
    cfg.unlearn.epochs = *f.epochs;
  }
  if (!f.out.empty()) {
    cfg.output_dir = f.out;
  }
  return cfg;
}

void write_file(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
}

void write_eval(const AggregateReport &report, const ExperimentConfig &cfg,
                const fs::path &dir) {
  fs::create_directories(dir);
  write_file(dir / "report.json", to_json(report).dump(2) + "\n");
  write_file(dir / "summary.csv",
             report_header() + "\n" + report_row("eval", cfg, report) + "\n");
  std::ostringstream pe;
  pe << "entity_id,FE,MU_T,EM\n";
  for (const auto &[id, e] : report.per_entity) {
    pe << id << ',' << format_double(e.forget_efficacy) << ','
       << format_double(e.model_utility) << ',' << format_double(e.exact_memorization) << '\n';
  }
  write_file(dir / "per_entity.csv", pe.str());
}

int cmd_synth(const Flags &f) {
  auto cfg = effective_config(f);
  if (f.seed) {
    cfg.synthetic.seed = *f.seed;
  }
  fs::create_directories(cfg.output_dir);
  const auto path = cfg.output_dir / "corpus.jsonl";
  const auto corpus = generate_synthetic(cfg.synthetic);
  save_corpus(corpus, path);
  std::cout << path.string() << '\n';
  std::cout << "forget/retain syntactic similarity: "
            << format_double(syntactic_similarity_mean(corpus.forget, corpus.retain)) << '\n';
  return 0;
}

int cmd_finetune(const Flags &f) {
  const auto cfg = seeded(effective_config(f), effective_config(f).seeds.front());
  const auto corpus = load_or_generate_corpus(cfg);
  const auto ft = finetuned_model(cfg, corpus);
  fs::create_directories(cfg.output_dir);
  save_checkpoint(ft.model, cfg.output_dir / "finetuned.ckpt");
  write_file(cfg.output_dir / "baseline.json", to_json(ft.baseline).dump(2) + "\n");
  std::cout << "baseline FE " << format_double(ft.baseline.forget_efficacy) << " MU_T "
            << format_double(ft.baseline.model_utility) << " EM "
            << format_double(ft.baseline.exact_memorization)
            << (ft.from_cache ? " (cached)" : "") << '\n';
  return 0;
}

int cmd_unlearn(const Flags &f) {
  const auto base = effective_config(f);
  const auto cfg = seeded(base, base.seeds.front());
  const auto corpus = load_or_generate_corpus(cfg);
  const auto model = load_checkpoint(f.checkpoint);
  CorpusBundle uc = corpus;
  uc.retain = compose_retain(corpus, cfg.composition);
  const auto schedule =
      build_schedule(cfg.strategy, uc.forget, uc.retain, cfg.unlearn.epochs);
  for (const auto &w : schedule.warnings) {
    std::cerr << "warning: " << w << '\n';
  }
  fs::create_directories(cfg.output_dir);
  {
    std::ostringstream s;
    write_schedule(schedule, s);
    write_file(cfg.output_dir / "schedule.jsonl", s.str());
  }
  std::ofstream tel(cfg.output_dir / "telemetry.jsonl", std::ios::binary);
  const auto out = unlearn_run(model, schedule, uc, cfg.unlearn,
                               [&](const StepTelemetry &row) { write_telemetry(row, tel); });
  save_checkpoint(out, cfg.output_dir / "unlearned.ckpt");
  std::cout << (cfg.output_dir / "unlearned.ckpt").string() << '\n';
  return 0;
}

int cmd_eval(const Flags &f) {
  const auto cfg = effective_config(f);
  const auto corpus = load_or_generate_corpus(cfg);
  const auto model = load_checkpoint(f.checkpoint);
  const auto report = evaluate(model, corpus);
  write_eval(report, cfg, cfg.output_dir);
  std::cout << report_header() << '\n' << report_row("eval", cfg, report) << '\n';
  return 0;
}

int cmd_report(const Flags &f) {
  std::vector<fs::path> files;
  for (const auto &in : f.inputs) {
    if (fs::is_directory(in)) {
      for (const auto &e : fs::recursive_directory_iterator(in)) {
        if (e.is_regular_file() && e.path().filename() == "run.json") {
          files.push_back(e.path());
        }
      }
    } else {
      files.emplace_back(in);
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<RunResult> results;
  for (const auto &p : files) {
    results.push_back(load_run(p));
  }
  const fs::path out = f.out.empty() ? fs::path(".") : fs::path(f.out);
  emit_report(results, out);
  std::cout << "report over " << results.size() << " runs in " << out.string() << '\n';
  return 0;
}

int cmd_run(const Flags &f) {
  const auto cfg = effective_config(f);
  for (const auto &r : run_experiment(cfg)) {
    std::cout << r.run_id() << ": FE " << format_double(r.baseline.forget_efficacy) << " -> "
              << format_double(r.final.forget_efficacy) << ", MU_T "
              << format_double(r.baseline.model_utility) << " -> "
              << format_double(r.final.model_utility) << '\n';
  }
  std::cout << (cfg.output_dir / "summary.csv").string() << '\n';
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"unlearn-lab: desk-scale machine unlearning experiments"};
  app.require_subcommand(1);
  Flags f;

  auto *synth = app.add_subcommand("synth", "generate a synthetic corpus");
  add_common(synth, f);

  auto *ft = app.add_subcommand("finetune", "fine-tune the toy model and score the baseline");
  add_common(ft, f);

  auto *ul = app.add_subcommand("unlearn", "unlearn from a checkpoint");
  add_common(ul, f);
  add_training(ul, f);
  ul->add_option("--checkpoint", f.checkpoint, "fine-tuned checkpoint")->required();

  auto *ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, f);
  ev->add_option("--checkpoint", f.checkpoint, "checkpoint to score")->required();

  auto *rep = app.add_subcommand("report", "aggregate run.json files");
  rep->add_option("--out", f.out, "output directory");
  rep->add_option("inputs", f.inputs, "run.json files or directories")->required();

  auto *run = app.add_subcommand("run", "full pipeline for every configured seed");
  add_common(run, f);
  add_training(run, f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      return cmd_synth(f);
    }
    if (ft->parsed()) {
      return cmd_finetune(f);
    }
    if (ul->parsed()) {
      return cmd_unlearn(f);
    }
    if (ev->parsed()) {
      return cmd_eval(f);
    }
    if (rep->parsed()) {
      return cmd_report(f);
    }
    return cmd_run(f);
  } catch (const ArgumentError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
