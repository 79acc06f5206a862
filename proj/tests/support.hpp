#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/metrics.hpp"
#include "unlearn/rng.hpp"
#include "unlearn/seqmodel.hpp"

namespace unlearn::testing {

inline Vocabulary word_vocab(std::size_t n_words) {
  std::vector<std::string> words;
  for (std::size_t i = 0; i < n_words; ++i) {
    words.push_back("w" + std::to_string(i));
  }
  return Vocabulary(std::move(words));
}

// Small random model (well under 5,000 parameters) for gradient checks.
inline ModelState tiny_model(std::uint64_t seed, std::size_t n_words = 7,
                             std::size_t d_model = 8, std::size_t n_layers = 2,
                             std::size_t n_heads = 2, std::size_t max_len = 12) {
  const auto vocab = word_vocab(n_words);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = d_model;
  cfg.n_layers = n_layers;
  cfg.n_heads = n_heads;
  cfg.max_seq_len = max_len;
  cfg.seed = seed;
  return init_model(cfg, vocab);
}

// Re-draws every parameter from N(0, scale^2) so checks are not tied to the
// initialiser's structure (gains of exactly 1, zero biases).
inline void scramble(ModelState &model, std::uint64_t seed, double scale = 0.5) {
  SplitMix64 rng(seed);
  for (auto &p : model.params) {
    p = scale * rng.normal();
  }
}

inline TokenSeq random_seq(const ModelState &model, std::uint64_t seed,
                           std::size_t prompt_words, std::size_t answer_words) {
  SplitMix64 rng(seed);
  const auto &sp = model.vocab.special();
  const auto n = model.vocab.size();
  auto word = [&] { return static_cast<TokenId>(5 + rng.below(n - 5)); };
  TokenSeq seq;
  seq.prompt.push_back(sp.bos);
  for (std::size_t i = 0; i < prompt_words; ++i) {
    seq.prompt.push_back(word());
  }
  seq.prompt.push_back(sp.sep);
  for (std::size_t i = 0; i < answer_words; ++i) {
    seq.answer.push_back(word());
  }
  seq.answer.push_back(sp.eos);
  return seq;
}

// Model whose next-token distribution depends only on the current token:
// every block is zeroed so the residual stream carries the one-hot token
// embedding straight to the head. Needs d_model >= vocab size.
// `next[t]` is the favoured successor of t, with logit margin `margin`;
// tokens absent from `next` produce a uniform distribution.
inline ModelState bigram_model(const Vocabulary &vocab, const std::map<TokenId, TokenId> &next,
                               double margin, std::size_t max_len = 16) {
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = vocab.size() % 2 == 0 ? vocab.size() : vocab.size() + 1;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = max_len;
  ModelState model = init_model(cfg, vocab);
  std::fill(model.params.begin(), model.params.end(), 0.0);
  for (auto name : {"h0.ln1", "h0.ln2", "lnf"}) {
    auto g = model.tensor(name);
    std::fill(g.begin(), g.end(), 1.0);
  }
  const auto d = cfg.d_model;
  auto wte = model.tensor("wte");
  for (std::size_t t = 0; t < vocab.size(); ++t) {
    wte[t * d + t] = 1.0;
  }
  // RMSNorm scales a one-hot row by 1 / sqrt(1/d + eps).
  const double r = 1.0 / std::sqrt(1.0 / static_cast<double>(d) + 1e-5);
  auto head = model.tensor("head");
  for (const auto &[from, to] : next) {
    head[static_cast<std::size_t>(from) * vocab.size() + static_cast<std::size_t>(to)] =
        margin / r;
  }
  return model;
}

// Every block and the head zeroed: the exact uniform distribution.
inline ModelState uniform_model(const Vocabulary &vocab, std::size_t max_len = 16) {
  auto model = bigram_model(vocab, {}, 0.0, max_len);
  return model;
}

// Central finite differences of `f` over all parameters.
inline std::vector<double> numeric_gradient(ModelState &model,
                                            const std::function<double()> &f,
                                            double step = 1e-5) {
  std::vector<double> out(model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const double keep = model.params[i];
    model.params[i] = keep + step;
    const double up = f();
    model.params[i] = keep - step;
    const double down = f();
    model.params[i] = keep;
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

// Component-wise relative error |a - n| / max(|a|, |n|, floor), maximised.
// The floor keeps components that are zero in exact arithmetic (e.g. the
// gradient of an unused embedding row) from dividing rounding noise by zero.
inline double max_relative_error(const std::vector<double> &analytic,
                                 const std::vector<double> &numeric, double floor = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

// Quadratic DP longest common subsequence (full table).
template <class T>
std::size_t lcs_oracle(const std::vector<T> &a, const std::vector<T> &b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
    }
  }
  return t[a.size()][b.size()];
}

// Textbook recursive-table Levenshtein distance.
inline std::size_t levenshtein_oracle(const std::string &a, const std::string &b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) t[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) t[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      t[i][j] = std::min({t[i - 1][j] + 1, t[i][j - 1] + 1,
                          t[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
    }
  }
  return t[a.size()][b.size()];
}

inline QAPair make_pair(std::string id, std::string entity, NeighborKind kind,
                        std::string question = "what is it ?", std::string answer = "it is") {
  return {std::move(id), std::move(entity), std::move(question), std::move(answer), kind};
}

// Bundle with the published WPU-extended counts: 98 forget; 364 direct,
// 1144 indirect and 293 general retain; 738 test. 20 entities, each with at
// least as many indirect as direct pairs.
inline CorpusBundle wpu_counts_bundle() {
  std::vector<QAPair> pairs;
  const std::size_t n_entities = 20;
  auto entity = [](std::size_t e) { return "ent" + std::to_string(e); };
  for (std::size_t e = 0; e < n_entities; ++e) {
    const std::size_t n = e < 18 ? 5 : 4; // 18*5 + 2*4 = 98
    for (std::size_t j = 0; j < n; ++j) {
      pairs.push_back(make_pair("f" + std::to_string(e) + "_" + std::to_string(j), entity(e),
                                NeighborKind::Forget));
    }
  }
  for (std::size_t e = 0; e < n_entities; ++e) {
    const std::size_t nd = e < 18 ? 18 : 20; // 364
    const std::size_t ni = e < 16 ? 57 : 58; // 1144
    for (std::size_t j = 0; j < nd; ++j) {
      pairs.push_back(make_pair("d" + std::to_string(e) + "_" + std::to_string(j), entity(e),
                                NeighborKind::Direct));
    }
    for (std::size_t j = 0; j < ni; ++j) {
      pairs.push_back(make_pair("i" + std::to_string(e) + "_" + std::to_string(j), entity(e),
                                NeighborKind::Indirect));
    }
  }
  for (std::size_t j = 0; j < 293; ++j) {
    pairs.push_back(make_pair("g" + std::to_string(j), std::string(kGeneralEntity),
                              NeighborKind::General));
  }
  for (std::size_t j = 0; j < 738; ++j) {
    pairs.push_back(make_pair("t" + std::to_string(j), entity(j % n_entities),
                              NeighborKind::TestDirect));
  }
  return make_bundle(std::move(pairs));
}

// Random entity-structured corpus: 1..max_entities entities, 1..4 forget
// pairs each, a few direct/indirect neighbours, some general pairs. Retain
// entities are shuffled into the list so first-appearance order differs from
// the forget order.
inline CorpusBundle random_corpus(std::uint64_t seed, std::size_t max_entities = 50) {
  SplitMix64 rng(seed);
  const std::size_t n_entities = 1 + rng.below(max_entities);
  std::vector<QAPair> forget, retain;
  for (std::size_t e = 0; e < n_entities; ++e) {
    const auto ent = "e" + std::to_string(e);
    const auto nf = 1 + rng.below(4);
    for (std::size_t j = 0; j < nf; ++j) {
      forget.push_back(make_pair("f" + std::to_string(e) + "_" + std::to_string(j), ent,
                                 NeighborKind::Forget));
    }
    const auto nd = rng.below(5), ni = rng.below(7);
    for (std::size_t j = 0; j < nd; ++j) {
      retain.push_back(make_pair("d" + std::to_string(e) + "_" + std::to_string(j), ent,
                                 NeighborKind::Direct));
    }
    for (std::size_t j = 0; j < ni; ++j) {
      retain.push_back(make_pair("i" + std::to_string(e) + "_" + std::to_string(j), ent,
                                 NeighborKind::Indirect));
    }
  }
  const auto ng = (retain.empty() ? 1 : 0) + rng.below(10);
  for (std::size_t j = 0; j < ng; ++j) {
    retain.push_back(make_pair("g" + std::to_string(j), std::string(kGeneralEntity),
                               NeighborKind::General));
  }
  rng.shuffle(retain.begin(), retain.end());
  forget.insert(forget.end(), retain.begin(), retain.end());
  forget.push_back(make_pair("t0", "e0", NeighborKind::TestGeneral));
  return make_bundle(std::move(forget));
}


inline std::vector<TokenId> random_tokens(SplitMix64 &rng, std::size_t max_len, std::size_t alphabet) {
  std::vector<TokenId> out(rng.below(max_len + 1));
  for (auto &t : out) t = static_cast<TokenId>(rng.below(alphabet));
  return out;
}

inline double rouge_oracle(const std::vector<TokenId> &g, const std::vector<TokenId> &r) {
  const double l = static_cast<double>(lcs_oracle(g, r));
  if (l == 0.0) return 0.0;
  const double p = l / static_cast<double>(g.size());
  const double rec = l / static_cast<double>(r.size());
  return 2.0 * p * rec / (p + rec);
}

inline double distinct_oracle(const std::vector<std::vector<TokenId>> &gens, std::size_t n) {
  std::set<std::vector<TokenId>> uniq;
  std::size_t total = 0;
  for (const auto &g : gens) {
    for (std::size_t i = 0; i + n <= g.size(); ++i) {
      uniq.insert(std::vector<TokenId>(g.begin() + static_cast<std::ptrdiff_t>(i),
                                       g.begin() + static_cast<std::ptrdiff_t>(i + n)));
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(uniq.size()) / static_cast<double>(total);
}

inline SampleScores random_scores(SplitMix64 &rng) {
  return {rng.uniform(), rng.uniform(), rng.uniform(), ""};
}

// Random bigram table over the word tokens of `vocab`.
inline std::map<TokenId, TokenId> random_table(SplitMix64 &rng, const Vocabulary &vocab) {
  std::map<TokenId, TokenId> next;
  const auto v = vocab.size();
  for (TokenId t = 0; t < static_cast<TokenId>(v); ++t) {
    if (rng.below(5) != 0) {
      next[t] = static_cast<TokenId>(rng.below(v));
    }
  }
  return next;
}

// Teacher-forced greedy prediction after `prev` under the bigram table:
// the favoured successor, else the lowest id (uniform row).
inline TokenId bigram_argmax(const std::map<TokenId, TokenId> &next, TokenId prev) {
  auto it = next.find(prev);
  return it == next.end() ? 0 : it->second;
}

inline double bigram_logprob(const std::map<TokenId, TokenId> &next, double margin, std::size_t v,
                      TokenId prev, TokenId truth) {
  auto it = next.find(prev);
  if (it == next.end()) return -std::log(static_cast<double>(v));
  const double z = std::exp(margin) + static_cast<double>(v - 1);
  return (it->second == truth ? margin : 0.0) - std::log(z);
}


inline std::map<std::string, const QAPair *> index_of(const std::vector<QAPair> &v) {
  std::map<std::string, const QAPair *> out;
  for (const auto &qa : v) out[qa.id] = &qa;
  return out;
}

inline std::multiset<std::string> retain_ids(const std::vector<QAPair> &v) {
  std::multiset<std::string> out;
  for (const auto &qa : v) out.insert(qa.id);
  return out;
}

} // namespace unlearn::testing
