#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/seqmodel.hpp"

namespace unlearn {

struct SampleScores {
  double rouge_l = 0.0;
  double probability = 0.0;
  double cosine = 0.0;
  std::string source_id;
};

// ROUGE-L F-measure over the longest common subsequence.
double rouge_l(std::span<const TokenId> generated, std::span<const TokenId> reference);

// max(cos(a, b), 0).
double truncated_cosine(std::span<const double> a, std::span<const double> b);

// Greedy generation budget used when scoring.
inline constexpr std::size_t kMaxNewTokens = 16;

struct ScoredSample {
  SampleScores scores;
  std::vector<TokenId> generation;
};

// Scores one pair: ROUGE-L and cosine of the greedy generation against the
// reference answer, and the mean per-token probability of the reference.
// An empty generation scores 0 on ROUGE-L and cosine.
ScoredSample score_sample_detailed(const ModelState &model, const QAPair &qa);
SampleScores score_sample(const ModelState &model, const QAPair &qa);

// 1 - mean over samples of (R + P + CS) / 3.
double forget_efficacy(std::span<const SampleScores> scores);

// Harmonic mean of the three per-metric means; 0 if any mean is 0.
double model_utility(std::span<const SampleScores> scores);

// Distinct n-grams / total n-grams across all generations; 0 if none.
double distinct_n(std::span<const std::vector<TokenId>> generations, std::size_t n);

struct MemorizationReport {
  double overall = 0.0;
  std::map<std::string, double> per_entity;
  std::vector<double> per_sequence;
};

// Fraction of answer positions where the teacher-forced argmax equals the
// ground truth. `entity_ids`, when given, runs parallel to `seqs`.
MemorizationReport exact_memorization(const ModelState &model,
                                      std::span<const TokenSeq> seqs,
                                      std::span<const std::string> entity_ids = {});

// exp(total answer NLL / total answer tokens).
double perplexity(const ModelState &model, std::span<const TokenSeq> seqs);

struct EntityScores {
  double forget_efficacy = 0.0;
  double model_utility = 0.0;
  double exact_memorization = 0.0;
};

struct AggregateReport {
  double forget_efficacy = 0.0;
  double model_utility = 0.0; // on the test split (MU-T)
  std::map<std::size_t, double> distinct_n; // over forget-set generations
  double perplexity_forget = 0.0;
  double perplexity_test = 0.0;
  double exact_memorization = 0.0; // over the forget split
  std::map<std::string, EntityScores> per_entity;
};

// Scores the forget split for FE / PPL-F / EM / distinct-n and the test split
// for MU-T / PPL-T. Per-entity MU-T uses the entity's test pairs; entities
// without test pairs report MU-T = 0.
AggregateReport evaluate(const ModelState &model, const CorpusBundle &corpus);

} // namespace unlearn
