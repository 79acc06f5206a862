#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/scheduler.hpp"
#include "unlearn/seqmodel.hpp"

namespace unlearn {

enum class Method { GA, GD, DPO, NPO };

std::string_view to_string(Method method); // ga, gd, dpo, npo
Method parse_method(std::string_view s);

struct UnlearnConfig {
  Method method = Method::GD;
  double beta = 0.1;
  double alpha = 1.0;
  double gamma = 1.0;
  // Weight of the retain NLL in GD (the preference methods use gamma).
  double retain_strength = 1.0;
  std::size_t epochs = kDefaultEpochs;
  std::size_t batch_size = 8;
  AdamSettings adam{};
  std::uint64_t seed = 0;
  // Answers of y_win for DPO.
  std::vector<std::string> refusal_pool;
};

void validate(const UnlearnConfig &cfg);

// Refusal phrases used as y_win when no pool is configured.
const std::vector<std::string> &default_refusal_pool();

struct PreferenceTriple {
  std::string forget_id;
  std::vector<TokenId> prompt;
  std::vector<TokenId> y_win;  // refusal answer + EOS
  std::vector<TokenId> y_lose; // forget answer + EOS

  TokenSeq win() const { return {prompt, y_win}; }
  TokenSeq lose() const { return {prompt, y_lose}; }
};

// Chosen refusal phrase index per forget pair, keyed by (seed, pair id).
std::size_t refusal_choice(std::uint64_t seed, std::string_view pair_id,
                           std::size_t pool_size);

std::vector<PreferenceTriple> build_preference_set(std::span<const QAPair> forget,
                                                   std::span<const std::string> refusal_pool,
                                                   std::uint64_t seed,
                                                   const Vocabulary &vocab,
                                                   std::size_t max_seq_len);

struct LossBreakdown {
  double total = 0.0;
  double forget_term = 0.0;
  double retain_term = 0.0;
};

// Every loss below adds weight * d(total)/d(params) into `grad` when it is
// non-empty.

// -NLL(forget).
double ga_loss(const ModelState &model, const TokenSeq &forget_seq,
               std::span<double> grad = {}, double weight = 1.0);

// total = -NLL(forget) + lambda * NLL(retain).
LossBreakdown gd_loss(const ModelState &model, const TokenSeq &forget_seq,
                      const TokenSeq &retain_seq, double retain_strength,
                      std::span<double> grad = {}, double weight = 1.0);

// log p(y|x; ref) for the frozen reference, computed once per sequence.
struct ReferenceLogProbs {
  double win = 0.0;
  double lose = 0.0;
};

ReferenceLogProbs reference_logprobs(const ModelState &ref, const PreferenceTriple &triple);

// forget_term = -log sigmoid(beta * (d_win - d_lose)), d_y the answer log-ratio
// against the reference; total = alpha * forget_term + gamma * NLL(retain).
LossBreakdown dpo_loss(const ModelState &model, const ModelState &ref,
                       const PreferenceTriple &triple, const TokenSeq *retain_seq,
                       const UnlearnConfig &cfg, std::span<double> grad = {},
                       double weight = 1.0);
LossBreakdown dpo_loss(const ModelState &model, const ReferenceLogProbs &ref,
                       const PreferenceTriple &triple, const TokenSeq *retain_seq,
                       const UnlearnConfig &cfg, std::span<double> grad = {},
                       double weight = 1.0);

// forget_term = -(2/beta) log sigmoid(-beta * d_lose).
LossBreakdown npo_loss(const ModelState &model, const ModelState &ref,
                       const TokenSeq &forget_seq, const TokenSeq *retain_seq,
                       const UnlearnConfig &cfg, std::span<double> grad = {},
                       double weight = 1.0);
LossBreakdown npo_loss(const ModelState &model, double ref_lose_logprob,
                       const TokenSeq &forget_seq, const TokenSeq *retain_seq,
                       const UnlearnConfig &cfg, std::span<double> grad = {},
                       double weight = 1.0);

struct StepTelemetry {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  Method method = Method::GD;
  LossBreakdown loss;
};

// JSONL row {"epoch","batch","method","total","forget_term","retain_term"}.
void write_telemetry(const StepTelemetry &row, std::ostream &out);

// Runs the configured method over the schedule, one optimizer step per batch
// of the mean per-pair loss. Pairs are tokenized with the model vocabulary.
ModelState unlearn_run(ModelState model, const PairSchedule &schedule,
                       const CorpusBundle &corpus, const UnlearnConfig &cfg,
                       const std::function<void(const StepTelemetry &)> &on_step = {});

} // namespace unlearn
