#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace unlearn {

enum class NeighborKind {
  Forget,
  Direct,
  Indirect,
  General,
  TestDirect,
  TestIndirect,
  TestGeneral,
};

std::string_view to_string(NeighborKind kind);
NeighborKind parse_neighbor_kind(std::string_view s);

enum class Split { Forget, Retain, Test };

std::string_view to_string(Split split);
Split split_of(NeighborKind kind);

inline constexpr std::string_view kGeneralEntity = "general";

struct QAPair {
  std::string id;
  std::string entity_id;
  std::string question;
  std::string answer;
  NeighborKind kind = NeighborKind::Forget;

  friend bool operator==(const QAPair &, const QAPair &) = default;
};

// Forget / retain / test partitions of an entity-structured corpus.
struct CorpusBundle {
  std::vector<QAPair> forget;
  std::vector<QAPair> retain;
  std::vector<QAPair> test;
  // Forget entity ids in first-appearance order.
  std::vector<std::string> entities;

  std::size_t size() const {
    return forget.size() + retain.size() + test.size();
  }
  friend bool operator==(const CorpusBundle &, const CorpusBundle &) = default;
};

// Throws ValidationError if any bundle invariant is violated.
void validate(const CorpusBundle &bundle);

// Builds a bundle from pairs in file order and validates it.
CorpusBundle make_bundle(std::vector<QAPair> pairs);

CorpusBundle read_corpus(std::istream &in);
CorpusBundle load_corpus(const std::filesystem::path &path);
void write_corpus(const CorpusBundle &bundle, std::ostream &out);
void save_corpus(const CorpusBundle &bundle, const std::filesystem::path &path);

enum class RetainMode { DirectOnly, IndirectOnly, Balanced, Full };

std::string_view to_string(RetainMode mode);
RetainMode parse_retain_mode(std::string_view s);

struct RetainComposition {
  RetainMode mode = RetainMode::Full;
  std::uint64_t seed = 0;
};

std::vector<QAPair> compose_retain(const CorpusBundle &bundle,
                                   const RetainComposition &comp);

// Character-level edit distance.
std::size_t levenshtein(std::string_view a, std::string_view b);

// 1 - lev(a, b) / max(|a|, |b|); two empty strings are identical.
double normalized_similarity(std::string_view a, std::string_view b);

// Mean over forget questions of the best normalized similarity against any
// retain question.
double syntactic_similarity_mean(std::span<const QAPair> forget,
                                 std::span<const QAPair> retain);

struct SyntheticSpec {
  std::size_t n_entities = 10;
  std::size_t forget_per_entity = 5;
  std::size_t direct_per_entity = 4;
  std::size_t indirect_per_entity = 8;
  std::size_t n_general = 30;
  std::size_t test_per_entity = 2;
  std::size_t n_test_general = 10;
  std::uint64_t seed = 7;
};

// Templated corpus over a closed vocabulary; deterministic in spec.seed.
CorpusBundle generate_synthetic(const SyntheticSpec &spec);

} // namespace unlearn
