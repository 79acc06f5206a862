#include "unlearn/objectives.hpp"

#include <cmath>
#include <ostream>
#include <unordered_map>

#include "json.hpp"
#include "transformer.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace {

// log(1 + e^x) without overflow.
double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_finite(double v, std::string_view what) {
  if (!std::isfinite(v)) {
    throw NumericError("non-finite log ratio for " + std::string(what));
  }
}

double retain_nll(const ModelState &model, const TokenSeq *retain_seq, double gamma,
                  std::span<double> grad, double weight) {
  if (retain_seq == nullptr) {
    return 0.0;
  }
  return sequence_nll(model, *retain_seq, grad, weight * gamma);
}

} // namespace

std::string_view to_string(Method method) {
  switch (method) {
  case Method::GA:
    return "ga";
  case Method::GD:
    return "gd";
  case Method::DPO:
    return "dpo";
  case Method::NPO:
    return "npo";
  }
  throw ArgumentError("unknown method");
}

Method parse_method(std::string_view s) {
  for (auto m : {Method::GA, Method::GD, Method::DPO, Method::NPO}) {
    if (to_string(m) == s) {
      return m;
    }
  }
  throw ArgumentError("unknown method '" + std::string(s) + "'");
}

void validate(const UnlearnConfig &cfg) {
  if (!(cfg.beta > 0.0)) {
    throw ArgumentError("beta must be positive");
  }
  if (cfg.epochs == 0) {
    throw ArgumentError("unlearning needs at least one epoch");
  }
  if (cfg.batch_size == 0) {
    throw ArgumentError("batch_size must be at least 1");
  }
}

const std::vector<std::string> &default_refusal_pool() {
  static const std::vector<std::string> pool{
      "i don't know",
      "i have no idea",
      "i am not sure about that",
      "i cannot answer that",
      "that is unknown to me",
  };
  return pool;
}

std::size_t refusal_choice(std::uint64_t seed, std::string_view pair_id,
                           std::size_t pool_size) {
  auto rng = SplitMix64::keyed(seed, pair_id);
  return static_cast<std::size_t>(rng.below(pool_size));
}

std::vector<PreferenceTriple> build_preference_set(std::span<const QAPair> forget,
                                                   std::span<const std::string> refusal_pool,
                                                   std::uint64_t seed,
                                                   const Vocabulary &vocab,
                                                   std::size_t max_seq_len) {
  if (refusal_pool.empty()) {
    throw ArgumentError("refusal pool is empty");
  }
  std::vector<PreferenceTriple> out;
  out.reserve(forget.size());
  for (const auto &qa : forget) {
    const auto seq = tokenize(vocab, qa, max_seq_len);
    QAPair refusal = qa;
    refusal.answer = refusal_pool[refusal_choice(seed, qa.id, refusal_pool.size())];
    const auto win = tokenize(vocab, refusal, max_seq_len);
    out.push_back({qa.id, seq.prompt, win.answer, seq.answer});
  }
  return out;
}

double ga_loss(const ModelState &model, const TokenSeq &forget_seq,
               std::span<double> grad, double weight) {
  return answer_logprob(model, forget_seq, grad, weight);
}

LossBreakdown gd_loss(const ModelState &model, const TokenSeq &forget_seq,
                      const TokenSeq &retain_seq, double retain_strength,
                      std::span<double> grad, double weight) {
  LossBreakdown out;
  out.forget_term = ga_loss(model, forget_seq, grad, weight);
  out.retain_term = sequence_nll(model, retain_seq, grad, weight * retain_strength);
  out.total = out.forget_term + retain_strength * out.retain_term;
  return out;
}

ReferenceLogProbs reference_logprobs(const ModelState &ref, const PreferenceTriple &triple) {
  return {answer_logprob(ref, triple.win()), answer_logprob(ref, triple.lose())};
}

LossBreakdown dpo_loss(const ModelState &model, const ModelState &ref,
                       const PreferenceTriple &triple, const TokenSeq *retain_seq,
                       const UnlearnConfig &cfg, std::span<double> grad, double weight) {
  return dpo_loss(model, reference_logprobs(ref, triple), triple, retain_seq, cfg, grad,
                  weight);
}

LossBreakdown dpo_loss(const ModelState &model, const ReferenceLogProbs &ref,
                       const PreferenceTriple &triple, const TokenSeq *retain_seq,
                       const UnlearnConfig &cfg, std::span<double> grad, double weight) {
  const detail::LogProbTape win(model, triple.win());
  const detail::LogProbTape lose(model, triple.lose());
  const double d_win = win.logprob() - ref.win;
  const double d_lose = lose.logprob() - ref.lose;
  require_finite(d_win, "y_win of '" + triple.forget_id + "'");
  require_finite(d_lose, "y_lose of '" + triple.forget_id + "'");
  const double z = cfg.beta * (d_win - d_lose);

  LossBreakdown out;
  out.forget_term = softplus(-z);
  if (!grad.empty()) {
    // d(-log sigmoid(z))/dz = -sigmoid(-z)
    const double dz = -sigmoid(-z) * cfg.alpha * weight * cfg.beta;
    win.backward(dz, grad);
    lose.backward(-dz, grad);
  }
  out.retain_term = retain_nll(model, retain_seq, cfg.gamma, grad, weight);
  out.total = cfg.alpha * out.forget_term + cfg.gamma * out.retain_term;
  return out;
}

LossBreakdown npo_loss(const ModelState &model, const ModelState &ref,
                       const TokenSeq &forget_seq, const TokenSeq *retain_seq,
                       const UnlearnConfig &cfg, std::span<double> grad, double weight) {
  return npo_loss(model, answer_logprob(ref, forget_seq), forget_seq, retain_seq, cfg, grad,
                  weight);
}

LossBreakdown npo_loss(const ModelState &model, double ref_lose_logprob,
                       const TokenSeq &forget_seq, const TokenSeq *retain_seq,
                       const UnlearnConfig &cfg, std::span<double> grad, double weight) {
  const detail::LogProbTape lose(model, forget_seq);
  const double d_lose = lose.logprob() - ref_lose_logprob;
  require_finite(d_lose, "the forget answer");
  const double z = cfg.beta * d_lose;

  LossBreakdown out;
  // -(2/beta) log sigmoid(-z) = (2/beta) softplus(z)
  out.forget_term = 2.0 / cfg.beta * softplus(z);
  if (!grad.empty()) {
    lose.backward(2.0 * sigmoid(z) * cfg.alpha * weight, grad);
  }
  out.retain_term = retain_nll(model, retain_seq, cfg.gamma, grad, weight);
  out.total = cfg.alpha * out.forget_term + cfg.gamma * out.retain_term;
  return out;
}

void write_telemetry(const StepTelemetry &row, std::ostream &out) {
  nlohmann::ordered_json j;
  j["epoch"] = row.epoch;
  j["batch"] = row.batch;
  j["method"] = to_string(row.method);
  j["total"] = row.loss.total;
  j["forget_term"] = row.loss.forget_term;
  j["retain_term"] = row.loss.retain_term;
  out << j.dump() << '\n';
}

ModelState unlearn_run(ModelState model, const PairSchedule &schedule,
                       const CorpusBundle &corpus, const UnlearnConfig &cfg,
                       const std::function<void(const StepTelemetry &)> &on_step) {
  validate(cfg);
  const auto max_len = model.config.max_seq_len;

  std::unordered_map<std::string, TokenSeq> forget_seqs;
  std::unordered_map<std::string, TokenSeq> retain_seqs;
  for (const auto &qa : corpus.forget) {
    forget_seqs.emplace(qa.id, tokenize(model.vocab, qa, max_len));
  }
  for (const auto &qa : corpus.retain) {
    retain_seqs.emplace(qa.id, tokenize(model.vocab, qa, max_len));
  }
  for (const auto &epoch : schedule.epochs) {
    for (const auto &pair : epoch) {
      if (!forget_seqs.contains(pair.forget_id)) {
        throw ScheduleError("schedule references unknown forget id '" + pair.forget_id + "'");
      }
      if (!retain_seqs.contains(pair.retain_id)) {
        throw ScheduleError("schedule references unknown retain id '" + pair.retain_id + "'");
      }
    }
  }

  // The reference model is the state before the first step; only its answer
  // log-probabilities are needed, so they are computed once up front.
  std::unordered_map<std::string, PreferenceTriple> triples;
  std::unordered_map<std::string, ReferenceLogProbs> ref_logp;
  if (cfg.method == Method::DPO || cfg.method == Method::NPO) {
    const auto &pool = cfg.refusal_pool.empty() ? default_refusal_pool() : cfg.refusal_pool;
    for (auto &t : build_preference_set(corpus.forget, pool, cfg.seed, model.vocab, max_len)) {
      const auto id = t.forget_id;
      ReferenceLogProbs ref{};
      if (cfg.method == Method::DPO) {
        ref = reference_logprobs(model, t);
      } else {
        ref.lose = answer_logprob(model, t.lose());
      }
      ref_logp.emplace(id, ref);
      triples.emplace(id, std::move(t));
    }
  }

  const auto plan = batch_schedule(schedule, cfg.batch_size);
  AdamOptimizer opt(model.params.size(), cfg.adam);
  std::vector<double> grad(model.params.size());
  std::size_t batch_in_epoch = 0;
  std::size_t last_epoch = 0;
  for (const auto &batch : plan.batches) {
    if (batch.epoch != last_epoch) {
      last_epoch = batch.epoch;
      batch_in_epoch = 0;
    }
    const auto pairs = plan.slice(schedule, batch);
    const double weight = 1.0 / static_cast<double>(pairs.size());
    std::fill(grad.begin(), grad.end(), 0.0);
    LossBreakdown mean;
    try {
      for (const auto &pair : pairs) {
        const auto &f = forget_seqs.at(pair.forget_id);
        const auto &r = retain_seqs.at(pair.retain_id);
        LossBreakdown l;
        switch (cfg.method) {
        case Method::GA:
          l.forget_term = ga_loss(model, f, grad, weight);
          l.total = l.forget_term;
          break;
        case Method::GD:
          l = gd_loss(model, f, r, cfg.retain_strength, grad, weight);
          break;
        case Method::DPO:
          l = dpo_loss(model, ref_logp.at(pair.forget_id), triples.at(pair.forget_id), &r,
                       cfg, grad, weight);
          break;
        case Method::NPO:
          l = npo_loss(model, ref_logp.at(pair.forget_id).lose, f, &r, cfg, grad, weight);
          break;
        }
        mean.total += weight * l.total;
        mean.forget_term += weight * l.forget_term;
        mean.retain_term += weight * l.retain_term;
      }
    } catch (const NumericError &e) {
      throw TrainingError(batch.epoch, batch_in_epoch,
                          std::string(to_string(cfg.method)) + ": " + e.what());
    }
    if (!std::isfinite(mean.total)) {
      throw TrainingError(batch.epoch, batch_in_epoch,
                          std::string(to_string(cfg.method)) + ": non-finite loss");
    }
    opt.step(model.params, grad);
    if (on_step) {
      on_step({batch.epoch, batch_in_epoch, cfg.method, mean});
    }
    ++batch_in_epoch;
  }
  return model;
}

} // namespace unlearn
