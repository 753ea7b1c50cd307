#pragma once

// Reference strategies on top of the single trainer: naive fine-tuning,
// frozen-teacher rehearsal, the ablation variants, and joint training.

#include <algorithm>
#include <numeric>
#include <vector>

#include "krkc/data.hpp"
#include "krkc/evaluation.hpp"
#include "krkc/strategy.hpp"
#include "krkc/trainer.hpp"

namespace krkc {

// All training data of the stream in one task. Rows are ordered by identity
// (then by original position), so the pool does not depend on task order.
inline TaskDataset pool_training_data(const std::vector<TaskDataset>& stream) {
  struct Row {
    int identity;
    std::size_t task_pos;
    std::size_t row;
  };
  std::vector<Row> rows;
  for (std::size_t t = 0; t < stream.size(); ++t)
    for (std::size_t i = 0; i < stream[t].train.size(); ++i) rows.push_back({stream[t].train.identities[i], t, i});
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.identity < b.identity; });
  TaskDataset pooled;
  pooled.task = 1;
  for (const auto& r : rows) pooled.train.push(stream[r.task_pos].train.row(r.row), r.identity);
  return pooled;
}

// Joint training: one model on the pooled data, scored on every task. Every row
// of the accuracy matrix holds the same model's scores.
inline SequenceResult run_joint_sequence(const std::vector<TaskDataset>& stream, const TrainConfig& c,
                                         const SequenceObserver& observer = {},
                                         const std::vector<TaskScore>* references = nullptr) {
  if (stream.empty()) throw Error("run_joint: empty stream");
  const TaskDataset pooled = pool_training_data(stream);
  SequenceResult result;
  result.state = train_first_task(pooled, c, strategies::naive(), observer.hooks);
  if (observer.on_task_end) observer.on_task_end(pooled, result.state);
  const RunState& s = result.state;
  std::vector<TaskScore> scores;
  for (const auto& task : stream) scores.push_back(score(s.retrieval, task));
  MetricsReport& report = result.report;
  for (std::size_t i = 1; i <= stream.size(); ++i) {
    std::vector<double> map_row, rank1_row;
    for (std::size_t j = 0; j < i; ++j) {
      map_row.push_back(scores[j].map);
      rank1_row.push_back(scores[j].rank1);
    }
    report.map.append_row(std::move(map_row));
    report.rank1.append_row(std::move(rank1_row));
  }
  std::vector<TaskScore> own_refs;
  if (!references && c.compute_references && stream.size() >= 2) {
    own_refs = compute_references(stream, c);
    references = &own_refs;
  }
  record_references(report, references, stream.size());
  finalize_metrics(report);
  return result;
}

inline MetricsReport run_joint(const std::vector<TaskDataset>& stream, const TrainConfig& c,
                               const std::vector<TaskScore>* references = nullptr) {
  return run_joint_sequence(stream, c, {}, references).report;
}

// Runs any strategy and keeps the final training state.
inline SequenceResult run_strategy_sequence(const Strategy& strategy, const std::vector<TaskDataset>& stream,
                                            const TrainConfig& c, const SequenceObserver& observer = {},
                                            const std::vector<TaskScore>* references = nullptr) {
  validate(strategy);
  if (strategy.joint) return run_joint_sequence(stream, c, observer, references);
  return run_sequence(stream, c, strategy, observer, references);
}

inline MetricsReport run_strategy(const Strategy& strategy, const std::vector<TaskDataset>& stream,
                                  const TrainConfig& c, const SequenceObserver& observer = {},
                                  const std::vector<TaskScore>* references = nullptr) {
  return run_strategy_sequence(strategy, stream, c, observer, references).report;
}

}  // namespace krkc
