#include "unlearn/scheduler.hpp"

#include <map>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include "json.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
  case StrategyKind::OneToOneSeq:
    return "one2one-seq";
  case StrategyKind::OneToOneRandom:
    return "one2one-rand";
  case StrategyKind::Cyclic:
    return "cyclic";
  case StrategyKind::Melu:
    return "melu";
  }
  throw ArgumentError("unknown strategy");
}

StrategyKind parse_strategy(std::string_view s) {
  for (auto kind : {StrategyKind::OneToOneSeq, StrategyKind::OneToOneRandom,
                    StrategyKind::Cyclic, StrategyKind::Melu}) {
    if (to_string(kind) == s) {
      return kind;
    }
  }
  throw ArgumentError("unknown strategy '" + std::string(s) + "'");
}

std::size_t PairSchedule::total_pairs() const {
  std::size_t n = 0;
  for (const auto &epoch : epochs) {
    n += epoch.size();
  }
  return n;
}

namespace {

Epoch one_to_one_seq(std::span<const QAPair> forget,
                     std::span<const QAPair> retain) {
  Epoch epoch;
  epoch.reserve(forget.size());
  for (std::size_t i = 0; i < forget.size(); ++i) {
    epoch.push_back({forget[i].id, retain[i].id});
  }
  return epoch;
}

Epoch one_to_one_random(std::span<const QAPair> forget,
                        std::span<const QAPair> retain, std::uint64_t seed,
                        std::size_t epoch_index) {
  std::vector<std::size_t> pool(retain.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  auto rng = SplitMix64::keyed(seed, "one2one-rand/epoch-" + std::to_string(epoch_index));
  Epoch epoch;
  epoch.reserve(forget.size());
  for (std::size_t i = 0; i < forget.size(); ++i) {
    const auto j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
    epoch.push_back({forget[i].id, retain[pool[i]].id});
  }
  return epoch;
}

Epoch cyclic(std::span<const QAPair> forget, std::span<const QAPair> retain) {
  Epoch epoch;
  epoch.reserve(retain.size());
  for (std::size_t k = 0; k < retain.size(); ++k) {
    epoch.push_back({forget[k % forget.size()].id, retain[k].id});
  }
  return epoch;
}

Epoch melu(std::span<const QAPair> forget, std::span<const QAPair> retain,
           std::uint64_t seed, std::vector<std::string> &warnings) {
  std::unordered_map<std::string_view, std::vector<std::size_t>> forget_of;
  for (std::size_t i = 0; i < forget.size(); ++i) {
    forget_of[forget[i].entity_id].push_back(i);
  }

  std::vector<std::string_view> order;
  std::unordered_map<std::string_view, std::vector<std::size_t>> retain_of;
  std::vector<std::size_t> general;
  for (std::size_t i = 0; i < retain.size(); ++i) {
    const auto &qa = retain[i];
    if (qa.kind == NeighborKind::General) {
      general.push_back(i);
      continue;
    }
    if (!forget_of.contains(qa.entity_id)) {
      throw ScheduleError("retain entity '" + qa.entity_id +
                          "' has no forget samples (retain id '" + qa.id + "')");
    }
    auto &slot = retain_of[qa.entity_id];
    if (slot.empty()) {
      order.push_back(qa.entity_id);
    }
    slot.push_back(i);
  }

  Epoch epoch;
  epoch.reserve(retain.size());
  for (auto entity : order) {
    const auto &fs = forget_of.at(entity);
    const auto &rs = retain_of.at(entity);
    if (fs.size() > rs.size()) {
      warnings.push_back("entity '" + std::string(entity) + "' has " +
                         std::to_string(fs.size()) + " forget but only " +
                         std::to_string(rs.size()) +
                         " retain samples; surplus forget samples are unused");
    }
    for (std::size_t j = 0; j < rs.size(); ++j) {
      epoch.push_back({forget[fs[j % fs.size()]].id, retain[rs[j]].id});
    }
  }
  for (auto i : general) {
    auto rng = SplitMix64::keyed(seed, retain[i].id);
    epoch.push_back({forget[rng.below(forget.size())].id, retain[i].id});
  }
  return epoch;
}

} // namespace

PairSchedule build_schedule(const SamplingStrategy &strategy,
                            std::span<const QAPair> forget,
                            std::span<const QAPair> retain,
                            std::size_t n_epochs) {
  if (forget.empty() || retain.empty()) {
    throw ArgumentError("schedules need non-empty forget and retain lists");
  }
  if (n_epochs == 0) {
    throw ArgumentError("n_epochs must be at least 1");
  }
  const bool one_to_one = strategy.kind == StrategyKind::OneToOneSeq ||
                          strategy.kind == StrategyKind::OneToOneRandom;
  if (one_to_one && retain.size() < forget.size()) {
    throw ScheduleError("1:1 sampling needs at least " +
                        std::to_string(forget.size()) + " retain samples, got " +
                        std::to_string(retain.size()));
  }

  PairSchedule schedule;
  schedule.epochs.reserve(n_epochs);
  switch (strategy.kind) {
  case StrategyKind::OneToOneSeq:
    schedule.epochs.assign(n_epochs, one_to_one_seq(forget, retain));
    break;
  case StrategyKind::OneToOneRandom:
    for (std::size_t e = 0; e < n_epochs; ++e) {
      schedule.epochs.push_back(one_to_one_random(forget, retain, strategy.seed, e));
    }
    break;
  case StrategyKind::Cyclic:
    schedule.epochs.assign(n_epochs, cyclic(forget, retain));
    break;
  case StrategyKind::Melu:
    schedule.epochs.assign(n_epochs, melu(forget, retain, strategy.seed, schedule.warnings));
    break;
  }
  return schedule;
}

std::span<const SchedulePair> BatchPlan::slice(const PairSchedule &schedule,
                                               const Batch &batch) const {
  return std::span<const SchedulePair>(schedule.epochs.at(batch.epoch))
      .subspan(batch.begin, batch.size);
}

BatchPlan batch_schedule(const PairSchedule &schedule, std::size_t batch_size) {
  if (batch_size == 0) {
    throw ArgumentError("batch_size must be at least 1");
  }
  BatchPlan plan;
  plan.batch_size = batch_size;
  for (std::size_t e = 0; e < schedule.epochs.size(); ++e) {
    const auto n = schedule.epochs[e].size();
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
      plan.batches.push_back({e, begin, std::min(batch_size, n - begin)});
    }
  }
  return plan;
}

void write_schedule(const PairSchedule &schedule, std::ostream &out) {
  for (std::size_t e = 0; e < schedule.epochs.size(); ++e) {
    const auto &epoch = schedule.epochs[e];
    for (std::size_t i = 0; i < epoch.size(); ++i) {
      nlohmann::ordered_json row;
      row["epoch"] = e;
      row["index"] = i;
      row["forget_id"] = epoch[i].forget_id;
      row["retain_id"] = epoch[i].retain_id;
      out << row.dump() << '\n';
    }
  }
}

} // namespace unlearn
