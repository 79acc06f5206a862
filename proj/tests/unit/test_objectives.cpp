#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/objectives.hpp"

using namespace unlearn;
using namespace unlearn::testing;

namespace {

struct Fixture {
  ModelState model;
  ModelState ref;
  TokenSeq forget;
  TokenSeq retain;
  PreferenceTriple triple;
};

Fixture fixture(std::uint64_t point) {
  Fixture f{tiny_model(point), tiny_model(point), {}, {}, {}};
  scramble(f.model, 500 + point);
  scramble(f.ref, 600 + point);
  f.forget = random_seq(f.model, 700 + point, 3, 2);
  f.retain = random_seq(f.model, 800 + point, 2, 3);
  const auto win = random_seq(f.model, 900 + point, 0, 3);
  f.triple = {"f", f.forget.prompt, win.answer, f.forget.answer};
  return f;
}

double gradient_error(ModelState &model,
                      const std::function<double(std::span<double>)> &loss) {
  std::vector<double> grad(model.params.size(), 0.0);
  loss(grad);
  const auto numeric = numeric_gradient(model, [&] { return loss({}); });
  return max_relative_error(grad, numeric);
}

} // namespace

TEST_CASE("method names") {
  for (auto m : {Method::GA, Method::GD, Method::DPO, Method::NPO}) {
    CHECK(parse_method(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_method("sgd"), ArgumentError);
  UnlearnConfig cfg;
  CHECK(cfg.beta == 0.1);
  CHECK(cfg.alpha == 1.0);
  CHECK(cfg.gamma == 1.0);
  CHECK(cfg.epochs == 4);
  CHECK(cfg.batch_size == 8);
  cfg.beta = 0.0;
  CHECK_THROWS_AS(validate(cfg), ArgumentError);
}

TEST_CASE("analytic gradients match finite differences") {
  UnlearnConfig cfg;
  for (std::uint64_t point = 0; point < 5; ++point) {
    auto f = fixture(point);
    const auto ref_lp = reference_logprobs(f.ref, f.triple);
    CHECK(gradient_error(f.model, [&](std::span<double> g) {
            return ga_loss(f.model, f.forget, g);
          }) <= 1e-4);
    CHECK(gradient_error(f.model, [&](std::span<double> g) {
            return gd_loss(f.model, f.forget, f.retain, 0.7, g).total;
          }) <= 1e-4);
    CHECK(gradient_error(f.model, [&](std::span<double> g) {
            return dpo_loss(f.model, ref_lp, f.triple, &f.retain, cfg, g).total;
          }) <= 1e-4);
    CHECK(gradient_error(f.model, [&](std::span<double> g) {
            return npo_loss(f.model, ref_lp.lose, f.forget, &f.retain, cfg, g).total;
          }) <= 1e-4);
  }
}

TEST_CASE("ga is the negated NLL") {
  auto f = fixture(3);
  CHECK(ga_loss(f.model, f.forget) == -sequence_nll(f.model, f.forget));
}

TEST_CASE("loss anchors at the reference point") {
  UnlearnConfig cfg;
  for (std::uint64_t point = 0; point < 5; ++point) {
    auto f = fixture(point);
    const auto ref = snapshot_reference(f.model);
    const auto dpo = dpo_loss(f.model, ref, f.triple, nullptr, cfg);
    CHECK(std::abs(dpo.forget_term - std::log(2.0)) <= 1e-6);
    const auto npo = npo_loss(f.model, ref, f.forget, nullptr, cfg);
    CHECK(std::abs(npo.forget_term - 20.0 * std::log(2.0)) <= 1e-5);
    CHECK(npo.forget_term == doctest::Approx(13.8629).epsilon(1e-5));

    UnlearnConfig doubled = cfg;
    doubled.beta = 0.2;
    CHECK(npo_loss(f.model, ref, f.forget, nullptr, doubled).forget_term ==
          doctest::Approx(npo.forget_term / 2.0).epsilon(1e-12));

    // Retain strength 0 reduces GD to GA.
    CHECK(gd_loss(f.model, f.forget, f.retain, 0.0).total == ga_loss(f.model, f.forget));

    // alpha = 0, gamma = 1: only the retain NLL remains.
    UnlearnConfig retain_only = cfg;
    retain_only.alpha = 0.0;
    const double nll = sequence_nll(f.model, f.retain);
    CHECK(dpo_loss(f.model, f.ref, f.triple, &f.retain, retain_only).total == nll);
    CHECK(npo_loss(f.model, f.ref, f.forget, &f.retain, retain_only).total == nll);

    // Gradients follow the same reductions.
    std::vector<double> g_gd(f.model.params.size()), g_ga(f.model.params.size());
    gd_loss(f.model, f.forget, f.retain, 0.0, g_gd);
    ga_loss(f.model, f.forget, g_ga);
    CHECK(g_gd == g_ga);
  }
}

TEST_CASE("npo forget term is bounded as the forget answer becomes unlikely") {
  auto f = fixture(9);
  const auto ref = snapshot_reference(f.model);
  UnlearnConfig cfg;
  const double at_ref = npo_loss(f.model, ref, f.forget, nullptr, cfg).forget_term;
  AdamSettings adam;
  adam.learning_rate = 0.05;
  AdamOptimizer opt(f.model.params.size(), adam);
  std::vector<double> grad(f.model.params.size());
  for (int step = 0; step < 60; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    npo_loss(f.model, ref, f.forget, nullptr, cfg, grad);
    opt.step(f.model.params, grad);
  }
  const auto after = npo_loss(f.model, ref, f.forget, nullptr, cfg).forget_term;
  CHECK(after < at_ref);
  CHECK(after >= 0.0);
  CHECK(answer_logprob(f.model, f.forget) < answer_logprob(ref, f.forget));
}

TEST_CASE("non-finite log ratios are numeric errors") {
  auto f = fixture(2);
  UnlearnConfig cfg;
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(npo_loss(f.model, -inf, f.forget, nullptr, cfg), NumericError);
  CHECK_THROWS_AS(dpo_loss(f.model, ReferenceLogProbs{-inf, 0.0}, f.triple, nullptr, cfg),
                  NumericError);
}

TEST_CASE("preference set") {
  const auto corpus = generate_synthetic({.n_entities = 3});
  const auto &pool = default_refusal_pool();
  CHECK(pool.size() == 5);
  const auto vocab = Vocabulary::from_corpus(corpus, pool);
  const auto triples = build_preference_set(corpus.forget, pool, 4, vocab, 32);
  REQUIRE(triples.size() == corpus.forget.size());
  std::set<std::vector<TokenId>> wins;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const auto seq = tokenize(vocab, corpus.forget[i], 32);
    CHECK(triples[i].forget_id == corpus.forget[i].id);
    CHECK(triples[i].prompt == seq.prompt);
    CHECK(triples[i].y_lose == seq.answer);
    const auto w = decode(vocab, std::span<const TokenId>(triples[i].y_win).first(
                                     triples[i].y_win.size() - 1));
    CHECK(std::find(pool.begin(), pool.end(), w) != pool.end());
    wins.insert(triples[i].y_win);
  }
  CHECK(wins.size() > 1);
  CHECK(build_preference_set(corpus.forget, pool, 4, vocab, 32).front().y_win ==
        triples.front().y_win);
  CHECK_THROWS_AS(build_preference_set(corpus.forget, std::vector<std::string>{}, 4, vocab, 32),
                  ArgumentError);
}

TEST_CASE("unlearn_run") {
  const auto corpus = generate_synthetic({.n_entities = 2,
                                          .forget_per_entity = 2,
                                          .direct_per_entity = 2,
                                          .indirect_per_entity = 2,
                                          .n_general = 2,
                                          .test_per_entity = 1,
                                          .n_test_general = 1});
  const auto vocab = Vocabulary::from_corpus(corpus, default_refusal_pool());
  // Start from a fine-tuned model, as the pipeline does.
  auto model = init_model({vocab.size(), 16, 1, 2, 24, 3}, vocab);
  std::vector<TokenSeq> data;
  for (const auto *split : {&corpus.forget, &corpus.retain, &corpus.test}) {
    for (const auto &qa : *split) data.push_back(tokenize(vocab, qa, 24));
  }
  FinetuneSettings ft;
  ft.epochs = 40;
  ft.batch_size = 4;
  ft.adam.learning_rate = 1e-2;
  model = finetune(model, data, ft);
  const auto schedule = build_schedule({StrategyKind::Cyclic, 0}, corpus.forget, corpus.retain, 2);

  for (auto method : {Method::GA, Method::GD, Method::DPO, Method::NPO}) {
    UnlearnConfig cfg;
    cfg.method = method;
    cfg.batch_size = 3;
    cfg.adam.learning_rate = 1e-2;
    std::vector<StepTelemetry> rows;
    const auto out = unlearn_run(model, schedule, corpus, cfg,
                                 [&](const StepTelemetry &r) { rows.push_back(r); });
    CHECK(rows.size() == batch_schedule(schedule, 3).batches.size());
    CHECK(rows.front().epoch == 0);
    CHECK(rows.front().batch == 0);
    CHECK(rows.back().epoch == 1);
    CHECK(rows.front().method == method);
    if (method == Method::DPO) {
      CHECK(rows.front().loss.forget_term == doctest::Approx(std::log(2.0)));
    }
    if (method == Method::NPO) {
      CHECK(rows.front().loss.forget_term == doctest::Approx(20.0 * std::log(2.0)));
    }
    CHECK(out.params != model.params);
    CHECK(unlearn_run(model, schedule, corpus, cfg).params == out.params);

    double before = 0.0, after = 0.0;
    for (const auto &qa : corpus.forget) {
      const auto seq = tokenize(vocab, qa, 24);
      before += sequence_nll(model, seq);
      after += sequence_nll(out, seq);
    }
    CHECK(after > before);
  }

  PairSchedule bad{{{{"nope", corpus.retain.front().id}}}, {}};
  CHECK_THROWS_AS(unlearn_run(model, bad, corpus, {}), ScheduleError);
}

TEST_CASE("telemetry rows") {
  std::stringstream out;
  write_telemetry({1, 2, Method::NPO, {3.0, 2.5, 0.5}}, out);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j["epoch"] == 1);
  CHECK(j["batch"] == 2);
  CHECK(j["method"] == "npo");
  CHECK(j["total"] == 3.0);
  CHECK(j["forget_term"] == 2.5);
  CHECK(j["retain_term"] == 0.5);
}
