#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unlearn/corpus.hpp"

namespace unlearn {

enum class StrategyKind { OneToOneSeq, OneToOneRandom, Cyclic, Melu };

// CLI spelling: one2one-seq, one2one-rand, cyclic, melu.
std::string_view to_string(StrategyKind kind);
StrategyKind parse_strategy(std::string_view s);

struct SamplingStrategy {
  StrategyKind kind = StrategyKind::Melu;
  std::uint64_t seed = 0;
};

struct SchedulePair {
  std::string forget_id;
  std::string retain_id;

  friend bool operator==(const SchedulePair &, const SchedulePair &) = default;
};

using Epoch = std::vector<SchedulePair>;

struct PairSchedule {
  std::vector<Epoch> epochs;
  // Non-fatal conditions met while building (e.g. MELU surplus forget samples).
  std::vector<std::string> warnings;

  std::size_t total_pairs() const;
  friend bool operator==(const PairSchedule &a, const PairSchedule &b) {
    return a.epochs == b.epochs;
  }
};

inline constexpr std::size_t kDefaultEpochs = 4;

PairSchedule build_schedule(const SamplingStrategy &strategy,
                            std::span<const QAPair> forget,
                            std::span<const QAPair> retain,
                            std::size_t n_epochs = kDefaultEpochs);

// A contiguous slice [begin, begin + size) of one epoch.
struct Batch {
  std::size_t epoch = 0;
  std::size_t begin = 0;
  std::size_t size = 0;
};

// Batches never straddle epochs; within an epoch every batch but the last
// holds exactly batch_size pairs.
struct BatchPlan {
  std::size_t batch_size = 0;
  std::vector<Batch> batches;

  std::span<const SchedulePair> slice(const PairSchedule &schedule,
                                      const Batch &batch) const;
};

BatchPlan batch_schedule(const PairSchedule &schedule, std::size_t batch_size);

// JSONL: {"epoch", "index", "forget_id", "retain_id"} per pair.
void write_schedule(const PairSchedule &schedule, std::ostream &out);

} // namespace unlearn
