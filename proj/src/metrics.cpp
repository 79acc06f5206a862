#include "unlearn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "unlearn/errors.hpp"

namespace unlearn {

namespace {

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct MetricMeans {
  double rouge = 0.0;
  double probability = 0.0;
  double cosine = 0.0;
};

MetricMeans metric_means(std::span<const SampleScores> scores) {
  if (scores.empty()) {
    throw ArgumentError("aggregate over an empty score list");
  }
  MetricMeans m;
  for (const auto &s : scores) {
    m.rouge += s.rouge_l;
    m.probability += s.probability;
    m.cosine += s.cosine;
  }
  const auto n = static_cast<double>(scores.size());
  m.rouge /= n;
  m.probability /= n;
  m.cosine /= n;
  return m;
}

} // namespace

double rouge_l(std::span<const TokenId> generated, std::span<const TokenId> reference) {
  if (reference.empty()) {
    throw ArgumentError("ROUGE-L needs a non-empty reference");
  }
  if (generated.empty()) {
    return 0.0;
  }
  const auto lcs = static_cast<double>(lcs_length(generated, reference));
  if (lcs == 0.0) {
    return 0.0;
  }
  const double p = lcs / static_cast<double>(generated.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

double truncated_cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ArgumentError("cosine of vectors with different dimensions");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    throw ArgumentError("cosine of a zero vector");
  }
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 1.0);
}

ScoredSample score_sample_detailed(const ModelState &model, const QAPair &qa) {
  const auto seq = tokenize(model.vocab, qa, model.config.max_seq_len, UnkPolicy::MapToUnk);
  const auto budget = std::min(kMaxNewTokens, model.config.max_seq_len - seq.prompt.size());
  ScoredSample out;
  out.generation = greedy_generate(model, seq.prompt, budget);
  const auto reference = seq.answer_words();
  out.scores.source_id = qa.id;
  out.scores.probability = conditional_probability(model, seq);
  if (!out.generation.empty() && !reference.empty()) {
    out.scores.rouge_l = rouge_l(out.generation, reference);
    const auto a = embed_sequence(model, out.generation);
    const auto b = embed_sequence(model, reference);
    try {
      out.scores.cosine = truncated_cosine(a, b);
    } catch (const ArgumentError &) {
      out.scores.cosine = 0.0;
    }
  }
  return out;
}

SampleScores score_sample(const ModelState &model, const QAPair &qa) {
  return score_sample_detailed(model, qa).scores;
}

double forget_efficacy(std::span<const SampleScores> scores) {
  const auto m = metric_means(scores);
  return 1.0 - (m.rouge + m.probability + m.cosine) / 3.0;
}

double model_utility(std::span<const SampleScores> scores) {
  const auto m = metric_means(scores);
  if (m.rouge == 0.0 || m.probability == 0.0 || m.cosine == 0.0) {
    return 0.0;
  }
  return 3.0 / (1.0 / m.rouge + 1.0 / m.probability + 1.0 / m.cosine);
}

double distinct_n(std::span<const std::vector<TokenId>> generations, std::size_t n) {
  if (n == 0) {
    throw ArgumentError("distinct-n needs n >= 1");
  }
  std::set<std::vector<TokenId>> seen;
  std::size_t total = 0;
  for (const auto &g : generations) {
    for (std::size_t i = 0; i + n <= g.size(); ++i) {
      seen.emplace(g.begin() + static_cast<std::ptrdiff_t>(i),
                   g.begin() + static_cast<std::ptrdiff_t>(i + n));
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(seen.size()) / static_cast<double>(total);
}

MemorizationReport exact_memorization(const ModelState &model,
                                      std::span<const TokenSeq> seqs,
                                      std::span<const std::string> entity_ids) {
  if (seqs.empty()) {
    throw ArgumentError("exact memorization over an empty list");
  }
  if (!entity_ids.empty() && entity_ids.size() != seqs.size()) {
    throw ArgumentError("entity id list does not match the sequence list");
  }
  MemorizationReport report;
  std::map<std::string, std::pair<double, std::size_t>> by_entity;
  double total = 0.0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto stats = answer_token_stats(model, seqs[i]);
    std::size_t hits = 0;
    for (std::size_t t = 0; t < stats.argmax.size(); ++t) {
      hits += stats.argmax[t] == seqs[i].answer[t] ? 1 : 0;
    }
    const double em = static_cast<double>(hits) / static_cast<double>(stats.argmax.size());
    report.per_sequence.push_back(em);
    total += em;
    if (!entity_ids.empty()) {
      auto &slot = by_entity[entity_ids[i]];
      slot.first += em;
      ++slot.second;
    }
  }
  report.overall = total / static_cast<double>(seqs.size());
  for (const auto &[entity, acc] : by_entity) {
    report.per_entity[entity] = acc.first / static_cast<double>(acc.second);
  }
  return report;
}

double perplexity(const ModelState &model, std::span<const TokenSeq> seqs) {
  if (seqs.empty()) {
    throw ArgumentError("perplexity over an empty list");
  }
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto &s : seqs) {
    nll += sequence_nll(model, s);
    tokens += s.answer.size();
  }
  return std::exp(nll / static_cast<double>(tokens));
}

AggregateReport evaluate(const ModelState &model, const CorpusBundle &corpus) {
  if (corpus.forget.empty() || corpus.test.empty()) {
    throw ArgumentError("evaluation needs non-empty forget and test splits");
  }
  const auto max_len = model.config.max_seq_len;
  AggregateReport report;

  std::vector<SampleScores> forget_scores, test_scores;
  std::vector<std::vector<TokenId>> generations;
  std::vector<TokenSeq> forget_seqs, test_seqs;
  std::vector<std::string> forget_entities;
  std::map<std::string, std::vector<SampleScores>> forget_by_entity, test_by_entity;
  for (const auto &qa : corpus.forget) {
    auto scored = score_sample_detailed(model, qa);
    forget_by_entity[qa.entity_id].push_back(scored.scores);
    forget_scores.push_back(std::move(scored.scores));
    generations.push_back(std::move(scored.generation));
    forget_seqs.push_back(tokenize(model.vocab, qa, max_len, UnkPolicy::MapToUnk));
    forget_entities.push_back(qa.entity_id);
  }
  for (const auto &qa : corpus.test) {
    auto scores = score_sample(model, qa);
    test_by_entity[qa.entity_id].push_back(scores);
    test_scores.push_back(std::move(scores));
    test_seqs.push_back(tokenize(model.vocab, qa, max_len, UnkPolicy::MapToUnk));
  }

  report.forget_efficacy = forget_efficacy(forget_scores);
  report.model_utility = model_utility(test_scores);
  for (std::size_t n : {1, 2}) {
    report.distinct_n[n] = distinct_n(generations, n);
  }
  report.perplexity_forget = perplexity(model, forget_seqs);
  report.perplexity_test = perplexity(model, test_seqs);
  const auto em = exact_memorization(model, forget_seqs, forget_entities);
  report.exact_memorization = em.overall;
  for (const auto &entity : corpus.entities) {
    EntityScores e;
    e.forget_efficacy = forget_efficacy(forget_by_entity.at(entity));
    if (auto it = test_by_entity.find(entity); it != test_by_entity.end()) {
      e.model_utility = model_utility(it->second);
    }
    e.exact_memorization = em.per_entity.at(entity);
    report.per_entity[entity] = e;
  }
  return report;
}

} // namespace unlearn
