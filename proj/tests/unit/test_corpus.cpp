#include <set>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "unlearn/corpus.hpp"
#include "unlearn/errors.hpp"

using namespace unlearn;
using namespace unlearn::testing;

namespace {

std::size_t count_kind(const std::vector<QAPair> &v, NeighborKind k) {
  return static_cast<std::size_t>(
      std::count_if(v.begin(), v.end(), [&](const QAPair &qa) { return qa.kind == k; }));
}

std::string line(std::string id, std::string entity, std::string kind,
                 std::string q = "q ?", std::string a = "a") {
  return R"({"id":")" + id + R"(","entity_id":")" + entity + R"(","neighbor_kind":")" + kind +
         R"(","question":")" + q + R"(","answer":")" + a + "\"}\n";
}

} // namespace

TEST_CASE("neighbor kinds map to splits and round-trip their names") {
  for (auto k : {NeighborKind::Forget, NeighborKind::Direct, NeighborKind::Indirect,
                 NeighborKind::General, NeighborKind::TestDirect, NeighborKind::TestIndirect,
                 NeighborKind::TestGeneral}) {
    CHECK(parse_neighbor_kind(to_string(k)) == k);
  }
  CHECK(split_of(NeighborKind::Forget) == Split::Forget);
  CHECK(split_of(NeighborKind::General) == Split::Retain);
  CHECK(split_of(NeighborKind::TestIndirect) == Split::Test);
  CHECK_THROWS_AS(parse_neighbor_kind("neighbor"), ArgumentError);
}

TEST_CASE("published corpus counts load and compose") {
  const auto bundle = wpu_counts_bundle();
  CHECK(bundle.forget.size() == 98);
  CHECK(bundle.retain.size() == 1801);
  CHECK(bundle.test.size() == 738);
  CHECK(364 + 1144 + 293 == 1801);

  std::stringstream buf;
  write_corpus(bundle, buf);
  const auto loaded = read_corpus(buf);
  CHECK(loaded == bundle);

  CHECK(compose_retain(bundle, {RetainMode::DirectOnly, 0}).size() == 657);
  CHECK(compose_retain(bundle, {RetainMode::IndirectOnly, 0}).size() == 1437);
  CHECK(compose_retain(bundle, {RetainMode::Full, 0}).size() == 1801);
  const auto balanced = compose_retain(bundle, {RetainMode::Balanced, 3});
  CHECK(balanced.size() == 364 + 364 + 293);
}

TEST_CASE("reading rejects malformed input with a line number") {
  SUBCASE("empty file") {
    std::stringstream in("");
    CHECK_THROWS_AS(read_corpus(in), ValidationError);
  }
  SUBCASE("duplicate id") {
    std::stringstream in(line("q1", "e", "forget") + line("q1", "e", "direct"));
    CHECK_THROWS_AS(read_corpus(in), ValidationError);
  }
  SUBCASE("forget pair without entity") {
    std::stringstream in(line("q1", "", "forget"));
    CHECK_THROWS_AS(read_corpus(in), ValidationError);
  }
  SUBCASE("bad JSON on line 2") {
    std::stringstream in(line("q1", "e", "forget") + "{not json\n");
    try {
      read_corpus(in);
      FAIL("expected a parse error");
    } catch (const ParseError &e) {
      CHECK(e.line() == 2);
    }
  }
  SUBCASE("split contradicting the kind") {
    std::stringstream in(
        R"({"id":"a","entity_id":"e","split":"retain","neighbor_kind":"forget","question":"q","answer":"a"})"
        "\n");
    CHECK_THROWS_AS(read_corpus(in), ParseError);
  }
  SUBCASE("empty answer") {
    std::stringstream in(line("q1", "e", "forget", "q ?", ""));
    CHECK_THROWS_AS(read_corpus(in), ValidationError);
  }
}

TEST_CASE("entities are recorded in first-appearance order") {
  std::stringstream in(line("a", "zed", "forget") + line("b", "amy", "forget") +
                       line("c", "zed", "forget") + line("d", "general", "general"));
  const auto b = read_corpus(in);
  CHECK(b.entities == std::vector<std::string>{"zed", "amy"});
  CHECK(b.retain.size() == 1);
}

TEST_CASE("file round trip") {
  const auto bundle = generate_synthetic({});
  const auto path = std::filesystem::temp_directory_path() / "unlearn_corpus_roundtrip.jsonl";
  save_corpus(bundle, path);
  CHECK(load_corpus(path) == bundle);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_corpus(path), IoError);
}

TEST_CASE("compose_retain properties over random corpora") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto b = random_corpus(s, 12);
    CHECK(compose_retain(b, {RetainMode::Full, s}) == b.retain);

    const auto direct = compose_retain(b, {RetainMode::DirectOnly, s});
    const auto indirect = compose_retain(b, {RetainMode::IndirectOnly, s});
    CHECK(count_kind(direct, NeighborKind::Indirect) == 0);
    CHECK(count_kind(indirect, NeighborKind::Direct) == 0);
    // Between them, every non-general pair exactly once; general in both.
    std::multiset<std::string> seen;
    for (const auto &v : {direct, indirect}) {
      for (const auto &qa : v) {
        if (qa.kind != NeighborKind::General) {
          seen.insert(qa.id);
        }
      }
    }
    std::multiset<std::string> expected;
    for (const auto &qa : b.retain) {
      if (qa.kind != NeighborKind::General) {
        expected.insert(qa.id);
      }
    }
    CHECK(seen == expected);
    CHECK(count_kind(direct, NeighborKind::General) == count_kind(b.retain, NeighborKind::General));

    std::map<std::string, std::pair<std::size_t, std::size_t>> per_entity;
    for (const auto &qa : b.retain) {
      if (qa.kind == NeighborKind::Direct) ++per_entity[qa.entity_id].first;
      if (qa.kind == NeighborKind::Indirect) ++per_entity[qa.entity_id].second;
    }
    const bool feasible = std::all_of(per_entity.begin(), per_entity.end(),
                                      [](const auto &kv) { return kv.second.second >= kv.second.first; });
    if (!feasible) {
      CHECK_THROWS_AS(compose_retain(b, {RetainMode::Balanced, s}), CompositionError);
      continue;
    }
    const auto bal = compose_retain(b, {RetainMode::Balanced, s});
    CHECK(bal == compose_retain(b, {RetainMode::Balanced, s}));
    std::map<std::string, std::pair<std::size_t, std::size_t>> got;
    for (const auto &qa : bal) {
      if (qa.kind == NeighborKind::Direct) ++got[qa.entity_id].first;
      if (qa.kind == NeighborKind::Indirect) ++got[qa.entity_id].second;
    }
    for (const auto &[e, counts] : got) {
      CHECK(counts.first == counts.second);
      CHECK(counts.first == per_entity[e].first);
    }
    // Output keeps input order.
    std::size_t pos = 0;
    for (const auto &qa : bal) {
      while (pos < b.retain.size() && b.retain[pos].id != qa.id) ++pos;
      CHECK(pos < b.retain.size());
    }
  }
}

TEST_CASE("balanced selection is keyed per entity, not by list order") {
  auto b = wpu_counts_bundle();
  const auto before = compose_retain(b, {RetainMode::Balanced, 11});
  // Moving another entity's pairs to the end does not change ent0's choice.
  std::stable_partition(b.retain.begin(), b.retain.end(),
                        [](const QAPair &qa) { return qa.entity_id != "ent5"; });
  const auto after = compose_retain(b, {RetainMode::Balanced, 11});
  auto ids_of = [](const std::vector<QAPair> &v, const std::string &e) {
    std::set<std::string> out;
    for (const auto &qa : v) {
      if (qa.entity_id == e && qa.kind == NeighborKind::Indirect) out.insert(qa.id);
    }
    return out;
  };
  CHECK(ids_of(before, "ent0") == ids_of(after, "ent0"));
  CHECK(ids_of(before, "ent5") == ids_of(after, "ent5"));
  CHECK(ids_of(before, "ent0") != ids_of(compose_retain(b, {RetainMode::Balanced, 12}), "ent0"));
}

TEST_CASE("balanced composition names the short entity") {
  std::vector<QAPair> pairs{make_pair("f", "bob", NeighborKind::Forget),
                            make_pair("d1", "bob", NeighborKind::Direct),
                            make_pair("d2", "bob", NeighborKind::Direct),
                            make_pair("i1", "bob", NeighborKind::Indirect)};
  const auto b = make_bundle(pairs);
  try {
    compose_retain(b, {RetainMode::Balanced, 0});
    FAIL("expected a composition error");
  } catch (const CompositionError &e) {
    CHECK(std::string(e.what()).find("bob") != std::string::npos);
  }
}

TEST_CASE("levenshtein and syntactic similarity") {
  CHECK(levenshtein("kitten", "sitting") == 3);
  CHECK(normalized_similarity("kitten", "sitting") == doctest::Approx(1.0 - 3.0 / 7.0));
  CHECK(normalized_similarity("", "") == 1.0);
  CHECK(normalized_similarity("abcd", "wxyz") == 0.0);

  const std::vector<QAPair> same{make_pair("a", "e", NeighborKind::Forget, "When was X born?")};
  const std::vector<QAPair> same_r{make_pair("b", "e", NeighborKind::Direct, "When was X born?")};
  CHECK(syntactic_similarity_mean(same, same_r) == 1.0);
  const std::vector<QAPair> k{make_pair("a", "e", NeighborKind::Forget, "kitten")};
  const std::vector<QAPair> s{make_pair("b", "e", NeighborKind::Direct, "sitting"),
                              make_pair("c", "e", NeighborKind::Direct, "zzzzzzzzzzzz")};
  CHECK(syntactic_similarity_mean(k, s) == doctest::Approx(1.0 - 3.0 / 7.0));
  CHECK_THROWS_AS(syntactic_similarity_mean(k, std::vector<QAPair>{}), ArgumentError);

  SplitMix64 rng(5);
  for (int i = 0; i < 300; ++i) {
    auto word = [&] {
      std::string w(rng.below(9), ' ');
      for (auto &c : w) c = static_cast<char>('a' + rng.below(4));
      return w;
    };
    const auto a = word(), b = word();
    CHECK(levenshtein(a, b) == levenshtein_oracle(a, b));
    CHECK(levenshtein(a, b) == levenshtein(b, a));
    const double sim = normalized_similarity(a, b);
    CHECK(sim >= 0.0);
    CHECK(sim <= 1.0);
  }
}

TEST_CASE("synthetic corpus") {
  const auto b = generate_synthetic({});
  CHECK(b.forget.size() == 50);
  CHECK(b.retain.size() == 150);
  CHECK(b.entities.size() == 10);
  CHECK(b.test.size() == 30);
  CHECK(generate_synthetic({}) == b);
  CHECK_NOTHROW(validate(b));
  CHECK(syntactic_similarity_mean(b.forget, b.retain) >= 0.3);

  SyntheticSpec two{.n_entities = 2};
  auto seven = generate_synthetic(two);
  two.seed = 8;
  auto eight = generate_synthetic(two);
  CHECK(seven.forget.front().answer + seven.forget.front().question !=
        eight.forget.front().answer + eight.forget.front().question);

  // Every non-general retain pair belongs to a forget entity.
  const std::set<std::string> ents(b.entities.begin(), b.entities.end());
  for (const auto &qa : b.retain) {
    if (qa.kind != NeighborKind::General) {
      CHECK(ents.contains(qa.entity_id));
    } else {
      CHECK(qa.entity_id == kGeneralEntity);
    }
  }
  CHECK_THROWS_AS(generate_synthetic({.n_entities = 0}), ArgumentError);
  CHECK_THROWS_AS(generate_synthetic({.forget_per_entity = 0}), ArgumentError);
}
