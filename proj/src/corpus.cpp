#include "unlearn/corpus.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace {

constexpr std::array<std::pair<NeighborKind, std::string_view>, 7> kKindNames{{
    {NeighborKind::Forget, "forget"},
    {NeighborKind::Direct, "direct"},
    {NeighborKind::Indirect, "indirect"},
    {NeighborKind::General, "general"},
    {NeighborKind::TestDirect, "test_direct"},
    {NeighborKind::TestIndirect, "test_indirect"},
    {NeighborKind::TestGeneral, "test_general"},
}};

constexpr std::array<std::pair<RetainMode, std::string_view>, 4> kModeNames{{
    {RetainMode::DirectOnly, "direct"},
    {RetainMode::IndirectOnly, "indirect"},
    {RetainMode::Balanced, "balanced"},
    {RetainMode::Full, "full"},
}};

bool needs_entity(NeighborKind kind) {
  return kind == NeighborKind::Forget || kind == NeighborKind::Direct ||
         kind == NeighborKind::Indirect;
}

} // namespace

std::string_view to_string(NeighborKind kind) {
  for (const auto &[k, name] : kKindNames) {
    if (k == kind) {
      return name;
    }
  }
  throw ArgumentError("unknown neighbor kind");
}

NeighborKind parse_neighbor_kind(std::string_view s) {
  for (const auto &[k, name] : kKindNames) {
    if (name == s) {
      return k;
    }
  }
  throw ArgumentError("unknown neighbor_kind '" + std::string(s) + "'");
}

std::string_view to_string(Split split) {
  switch (split) {
  case Split::Forget:
    return "forget";
  case Split::Retain:
    return "retain";
  case Split::Test:
    return "test";
  }
  throw ArgumentError("unknown split");
}

Split split_of(NeighborKind kind) {
  switch (kind) {
  case NeighborKind::Forget:
    return Split::Forget;
  case NeighborKind::Direct:
  case NeighborKind::Indirect:
  case NeighborKind::General:
    return Split::Retain;
  case NeighborKind::TestDirect:
  case NeighborKind::TestIndirect:
  case NeighborKind::TestGeneral:
    return Split::Test;
  }
  throw ArgumentError("unknown neighbor kind");
}

std::string_view to_string(RetainMode mode) {
  for (const auto &[m, name] : kModeNames) {
    if (m == mode) {
      return name;
    }
  }
  throw ArgumentError("unknown retain mode");
}

RetainMode parse_retain_mode(std::string_view s) {
  for (const auto &[m, name] : kModeNames) {
    if (name == s) {
      return m;
    }
  }
  throw ArgumentError("unknown composition '" + std::string(s) + "'");
}

void validate(const CorpusBundle &bundle) {
  std::unordered_set<std::string_view> ids;
  auto check = [&](const QAPair &qa, Split expected) {
    if (qa.id.empty()) {
      throw ValidationError("pair with empty id");
    }
    if (!ids.insert(qa.id).second) {
      throw ValidationError("duplicate id '" + qa.id + "'");
    }
    if (qa.question.empty() || qa.answer.empty()) {
      throw ValidationError("pair '" + qa.id + "' has an empty question or answer");
    }
    if (split_of(qa.kind) != expected) {
      throw ValidationError("pair '" + qa.id + "' of kind " +
                            std::string(to_string(qa.kind)) + " is in the " +
                            std::string(to_string(expected)) + " split");
    }
    if (needs_entity(qa.kind) && qa.entity_id.empty()) {
      throw ValidationError("pair '" + qa.id + "' of kind " +
                            std::string(to_string(qa.kind)) +
                            " has an empty entity_id");
    }
  };
  for (const auto &qa : bundle.forget) {
    check(qa, Split::Forget);
  }
  for (const auto &qa : bundle.retain) {
    check(qa, Split::Retain);
  }
  for (const auto &qa : bundle.test) {
    check(qa, Split::Test);
  }
  const std::set<std::string_view> entities(bundle.entities.begin(),
                                            bundle.entities.end());
  for (const auto &qa : bundle.forget) {
    if (!entities.contains(qa.entity_id)) {
      throw ValidationError("forget entity '" + qa.entity_id +
                            "' missing from the entity list");
    }
  }
}

CorpusBundle make_bundle(std::vector<QAPair> pairs) {
  CorpusBundle bundle;
  std::unordered_set<std::string> seen_entities;
  for (auto &qa : pairs) {
    switch (split_of(qa.kind)) {
    case Split::Forget:
      if (!qa.entity_id.empty() && seen_entities.insert(qa.entity_id).second) {
        bundle.entities.push_back(qa.entity_id);
      }
      bundle.forget.push_back(std::move(qa));
      break;
    case Split::Retain:
      bundle.retain.push_back(std::move(qa));
      break;
    case Split::Test:
      bundle.test.push_back(std::move(qa));
      break;
    }
  }
  validate(bundle);
  return bundle;
}

CorpusBundle read_corpus(std::istream &in) {
  std::vector<QAPair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error &e) {
      throw ParseError(line_no, e.what());
    }
    try {
      QAPair qa;
      qa.id = obj.at("id").get<std::string>();
      qa.entity_id = obj.value("entity_id", std::string{});
      qa.question = obj.at("question").get<std::string>();
      qa.answer = obj.at("answer").get<std::string>();
      qa.kind = parse_neighbor_kind(obj.at("neighbor_kind").get<std::string>());
      if (obj.contains("split")) {
        const auto split = obj.at("split").get<std::string>();
        if (split != to_string(split_of(qa.kind))) {
          throw ParseError(line_no, "split '" + split +
                                        "' disagrees with neighbor_kind");
        }
      }
      pairs.push_back(std::move(qa));
    } catch (const nlohmann::json::exception &e) {
      throw ParseError(line_no, e.what());
    } catch (const ArgumentError &e) {
      throw ParseError(line_no, e.what());
    }
  }
  if (pairs.empty()) {
    throw ValidationError("empty corpus");
  }
  return make_bundle(std::move(pairs));
}

CorpusBundle load_corpus(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open corpus '" + path.string() + "'");
  }
  return read_corpus(in);
}

void write_corpus(const CorpusBundle &bundle, std::ostream &out) {
  auto emit = [&](const QAPair &qa) {
    nlohmann::ordered_json obj;
    obj["id"] = qa.id;
    obj["entity_id"] = qa.entity_id;
    obj["split"] = to_string(split_of(qa.kind));
    obj["neighbor_kind"] = to_string(qa.kind);
    obj["question"] = qa.question;
    obj["answer"] = qa.answer;
    out << obj.dump() << '\n';
  };
  for (const auto &qa : bundle.forget) {
    emit(qa);
  }
  for (const auto &qa : bundle.retain) {
    emit(qa);
  }
  for (const auto &qa : bundle.test) {
    emit(qa);
  }
}

void save_corpus(const CorpusBundle &bundle, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write corpus '" + path.string() + "'");
  }
  write_corpus(bundle, out);
  if (!out) {
    throw IoError("write failed for '" + path.string() + "'");
  }
}

std::vector<QAPair> compose_retain(const CorpusBundle &bundle,
                                   const RetainComposition &comp) {
  std::vector<QAPair> out;
  switch (comp.mode) {
  case RetainMode::Full:
    return bundle.retain;
  case RetainMode::DirectOnly:
  case RetainMode::IndirectOnly: {
    const auto keep = comp.mode == RetainMode::DirectOnly
                          ? NeighborKind::Direct
                          : NeighborKind::Indirect;
    for (const auto &qa : bundle.retain) {
      if (qa.kind == keep || qa.kind == NeighborKind::General) {
        out.push_back(qa);
      }
    }
    return out;
  }
  case RetainMode::Balanced:
    break;
  }

  // Per entity, pick as many INDIRECT pairs as it has DIRECT pairs.
  std::map<std::string, std::size_t> direct_count;
  std::map<std::string, std::vector<std::size_t>> indirect_at;
  for (std::size_t i = 0; i < bundle.retain.size(); ++i) {
    const auto &qa = bundle.retain[i];
    if (qa.kind == NeighborKind::Direct) {
      ++direct_count[qa.entity_id];
    } else if (qa.kind == NeighborKind::Indirect) {
      indirect_at[qa.entity_id].push_back(i);
    }
  }
  std::vector<bool> selected(bundle.retain.size(), false);
  for (const auto &[entity, need] : direct_count) {
    auto &pool = indirect_at[entity];
    if (pool.size() < need) {
      throw CompositionError("entity '" + entity + "' has " +
                             std::to_string(need) + " direct but only " +
                             std::to_string(pool.size()) +
                             " indirect samples");
    }
    auto rng = SplitMix64::keyed(comp.seed, entity);
    for (std::size_t k = 0; k < need; ++k) {
      const auto j = k + rng.below(pool.size() - k);
      std::swap(pool[k], pool[j]);
      selected[pool[k]] = true;
    }
  }
  for (std::size_t i = 0; i < bundle.retain.size(); ++i) {
    const auto &qa = bundle.retain[i];
    if (qa.kind != NeighborKind::Indirect || selected[i]) {
      out.push_back(qa);
    }
  }
  return out;
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) {
    prev[j] = j;
  }
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double normalized_similarity(std::string_view a, std::string_view b) {
  const auto longest = std::max(a.size(), b.size());
  if (longest == 0) {
    return 1.0;
  }
  return 1.0 - static_cast<double>(levenshtein(a, b)) /
                   static_cast<double>(longest);
}

double syntactic_similarity_mean(std::span<const QAPair> forget,
                                 std::span<const QAPair> retain) {
  if (forget.empty() || retain.empty()) {
    throw ArgumentError("syntactic similarity needs non-empty forget and retain lists");
  }
  double total = 0.0;
  for (const auto &f : forget) {
    double best = 0.0;
    for (const auto &r : retain) {
      best = std::max(best, normalized_similarity(f.question, r.question));
      if (best == 1.0) {
        break;
      }
    }
    total += best;
  }
  return total / static_cast<double>(forget.size());
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation

namespace {

constexpr std::array<std::string_view, 24> kAttributes{
    "birthplace", "profession", "award",   "spouse",   "school", "hobby",
    "mentor",     "debut",      "instrument", "motto", "color",  "rival",
    "city",       "pet",        "car",     "language", "sport",  "team",
    "genre",      "symbol",     "employer", "nickname", "river", "festival"};

constexpr std::array<std::string_view, 8> kRelations{
    "father", "mother", "brother", "sister",
    "hometown", "company", "partner", "teacher"};

constexpr std::array<std::string_view, 64> kValues{
    "amber",   "basalt",  "cedar",   "delta",   "ember",   "falcon",
    "garnet",  "harbor",  "indigo",  "juniper", "kestrel", "lantern",
    "marble",  "nectar",  "onyx",    "pepper",  "quartz",  "raven",
    "saffron", "tundra",  "umber",   "velvet",  "willow",  "xenon",
    "yarrow",  "zephyr",  "anchor",  "bramble", "cobalt",  "dune",
    "echo",    "fjord",   "glacier", "hazel",   "iris",    "jade",
    "kelp",    "lotus",   "meadow",  "nova",    "orchid",  "pine",
    "quill",   "ridge",   "sable",   "thistle", "umbra",   "vale",
    "wren",    "yew",     "zinc",    "arrow",   "birch",   "coral",
    "drift",   "elm",     "flint",   "grove",   "heron",   "ivory",
    "jasper",  "knoll",   "lark",    "moss"};

constexpr std::array<std::string_view, 16> kPersonSyllables{
    "ka", "lo", "mer", "tin", "sa", "vo", "ri", "dan",
    "el", "mu", "zor", "pe", "ba", "qui", "nor", "ty"};

constexpr std::array<std::string_view, 12> kPlaceSyllables{
    "gra", "ost", "wel", "han", "dor", "lis", "ket", "bru", "amo", "sil",
    "vek", "un"};

class NameSource {
public:
  explicit NameSource(std::uint64_t seed) : rng_(SplitMix64::keyed(seed, "names")) {}

  template <std::size_t N>
  std::string next(const std::array<std::string_view, N> &syllables) {
    for (;;) {
      std::string name;
      const auto parts = 2 + rng_.below(2);
      for (std::uint64_t i = 0; i < parts; ++i) {
        name += syllables[rng_.below(N)];
      }
      if (used_.insert(name).second) {
        return name;
      }
    }
  }

private:
  SplitMix64 rng_;
  std::unordered_set<std::string> used_;
};

std::string question_for(std::string_view attribute, std::string_view subject) {
  std::string q = "what is the ";
  q += attribute;
  q += " of ";
  q += subject;
  q += " ?";
  return q;
}

std::string answer_for(std::uint64_t seed, std::string_view id) {
  auto rng = SplitMix64::keyed(seed, id);
  const auto words = 2 + rng.below(2);
  std::string a;
  for (std::uint64_t i = 0; i < words; ++i) {
    if (i > 0) {
      a += ' ';
    }
    a += kValues[rng.below(kValues.size())];
  }
  return a;
}

std::string padded(std::size_t v) {
  std::string s = std::to_string(v);
  return s.size() < 3 ? std::string(3 - s.size(), '0') + s : s;
}

// Enumerates (subject, attribute) facts for a fixed subject list, visiting
// every subject before reusing it with a new attribute.
class FactCursor {
public:
  FactCursor(std::vector<std::string> subjects, std::vector<std::string_view> attributes)
      : subjects_(std::move(subjects)), attributes_(std::move(attributes)) {}

  std::string next_question() {
    if (k_ >= subjects_.size() * attributes_.size()) {
      throw ArgumentError("synthetic corpus exhausted its fact templates");
    }
    const auto &subject = subjects_[k_ % subjects_.size()];
    const auto attribute = attributes_[(k_ / subjects_.size()) % attributes_.size()];
    ++k_;
    return question_for(attribute, subject);
  }

private:
  std::vector<std::string> subjects_;
  std::vector<std::string_view> attributes_;
  std::size_t k_ = 0;
};

std::vector<std::string_view> shuffled_attributes(std::uint64_t seed, std::string_view key) {
  std::vector<std::string_view> attrs(kAttributes.begin(), kAttributes.end());
  auto rng = SplitMix64::keyed(seed, key);
  rng.shuffle(attrs.begin(), attrs.end());
  return attrs;
}

} // namespace

CorpusBundle generate_synthetic(const SyntheticSpec &spec) {
  if (spec.n_entities == 0 || spec.forget_per_entity == 0 ||
      spec.direct_per_entity == 0 || spec.indirect_per_entity == 0 ||
      spec.n_general == 0) {
    throw ArgumentError("synthetic corpus counts must all be at least 1");
  }
  if (spec.forget_per_entity > kAttributes.size()) {
    throw ArgumentError("at most " + std::to_string(kAttributes.size()) +
                        " forget facts per entity are supported");
  }

  NameSource names(spec.seed);
  std::vector<QAPair> pairs;
  auto add = [&](std::string id, std::string entity, std::string question,
                 NeighborKind kind) {
    QAPair qa;
    qa.answer = answer_for(spec.seed, id);
    qa.id = std::move(id);
    qa.entity_id = std::move(entity);
    qa.question = std::move(question);
    qa.kind = kind;
    pairs.push_back(std::move(qa));
  };

  const std::size_t test_direct = (spec.test_per_entity + 1) / 2;
  const std::size_t test_indirect = spec.test_per_entity / 2;

  std::vector<std::string> entity_names;
  for (std::size_t e = 0; e < spec.n_entities; ++e) {
    entity_names.push_back(names.next(kPersonSyllables));
  }

  for (std::size_t e = 0; e < spec.n_entities; ++e) {
    const auto &name = entity_names[e];
    const auto tag = "e" + padded(e);
    const auto attrs = shuffled_attributes(spec.seed, name);

    for (std::size_t j = 0; j < spec.forget_per_entity; ++j) {
      add("f-" + tag + "-" + padded(j), name, question_for(attrs[j], name),
          NeighborKind::Forget);
    }

    // Direct neighbours: objects linked to the entity by a relation.
    std::vector<std::string> linked;
    for (auto rel : kRelations) {
      linked.push_back("the " + std::string(rel) + " of " + name);
    }
    FactCursor direct(std::move(linked), shuffled_attributes(spec.seed, name + "/direct"));
    for (std::size_t j = 0; j < spec.direct_per_entity; ++j) {
      add("d-" + tag + "-" + padded(j), name, direct.next_question(),
          NeighborKind::Direct);
    }
    for (std::size_t j = 0; j < test_direct; ++j) {
      add("td-" + tag + "-" + padded(j), name, direct.next_question(),
          NeighborKind::TestDirect);
    }

    // Indirect neighbours: peer entities related to the target.
    const std::size_t n_peers = std::max<std::size_t>(2, (spec.indirect_per_entity + 1) / 2);
    std::vector<std::string> peers;
    for (std::size_t p = 0; p < n_peers; ++p) {
      peers.push_back(names.next(kPersonSyllables));
    }
    FactCursor indirect(std::move(peers), shuffled_attributes(spec.seed, name + "/indirect"));
    for (std::size_t j = 0; j < spec.indirect_per_entity; ++j) {
      add("i-" + tag + "-" + padded(j), name, indirect.next_question(),
          NeighborKind::Indirect);
    }
    for (std::size_t j = 0; j < test_indirect; ++j) {
      add("ti-" + tag + "-" + padded(j), name, indirect.next_question(),
          NeighborKind::TestIndirect);
    }
  }

  // General knowledge: facts about places unrelated to any entity.
  const std::size_t n_places =
      std::max<std::size_t>(4, (spec.n_general + spec.n_test_general + 2) / 3);
  std::vector<std::string> places;
  for (std::size_t p = 0; p < n_places; ++p) {
    places.push_back(names.next(kPlaceSyllables));
  }
  FactCursor general(std::move(places), shuffled_attributes(spec.seed, "general"));
  for (std::size_t j = 0; j < spec.n_general; ++j) {
    add("g-" + padded(j), std::string(kGeneralEntity), general.next_question(),
        NeighborKind::General);
  }
  for (std::size_t j = 0; j < spec.n_test_general; ++j) {
    add("tg-" + padded(j), std::string(kGeneralEntity), general.next_question(),
        NeighborKind::TestGeneral);
  }

  return make_bundle(std::move(pairs));
}

} // namespace unlearn
