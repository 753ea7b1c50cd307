#pragma once

// The lifelong training loop. Per batch: a rehearsal step on the working model,
// then a refreshing step on the memory model. Per task: consolidation, fusion
// switch-over and exemplar memory update.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "krkc/data.hpp"
#include "krkc/error.hpp"
#include "krkc/evaluation.hpp"
#include "krkc/losses.hpp"
#include "krkc/models.hpp"
#include "krkc/optim.hpp"
#include "krkc/rng.hpp"
#include "krkc/strategy.hpp"

namespace krkc {

struct TrainConfig {
  int epochs = 30;
  double rehearsal_lr = 3.5e-4;
  double refreshing_lr = 3.5e-5;
  double last_task_refreshing_lr = 3.5e-6;
  double decay_factor = 0.1;
  double temperature = 2.0;
  double margin = 0.3;
  std::size_t P = 8;
  std::size_t K = 4;
  std::size_t exemplar_ids_per_task = 32;
  std::size_t batches_per_epoch = 0;  // 0: floor(train samples / (P*K)), at least 1
  bool open_ended = false;            // never apply the last-task refreshing rate
  bool distill_all_classes = true;    // false: distill only classes of earlier tasks
  bool compute_references = true;     // single-task runs for forward transfer
  Architecture arch;
  std::uint64_t seed = 1;

  bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw Error("train: epochs must be >= 1");
  if (!(c.rehearsal_lr > 0.0)) throw Error("train: rehearsal_lr must be positive");
  if (!(c.refreshing_lr >= 0.0) || !(c.last_task_refreshing_lr >= 0.0)) {
    throw Error("train: refreshing rates must be non-negative");
  }
  if (!(c.decay_factor > 0.0 && c.decay_factor <= 1.0)) throw Error("train: decay_factor must lie in (0,1]");
  if (!(c.temperature > 0.0)) throw Error("train: temperature must be positive");
  if (!(c.margin >= 0.0)) throw Error("train: margin must be non-negative");
  if (c.P < 2 || c.K < 2) throw Error("train: PK sampling needs P >= 2 and K >= 2");
  if (c.exemplar_ids_per_task == 0) throw Error("train: exemplar_ids_per_task must be positive");
  if (c.arch.input_dim == 0 || c.arch.embedding_dim == 0) throw Error("train: zero-width architecture");
}

struct LearningRates {
  double rehearsal;   // γ
  double refreshing;  // η
};

// First task: γ decays after epoch ceil(2E/3) and η is unused (0).
// Later tasks: both decay after epoch ceil(E/2); η uses the smaller last-task
// base when t == n_tasks (unless open_ended). Epochs are 1-based.
inline LearningRates lr_for(int t, int n_tasks, int epoch, const TrainConfig& c) {
  if (t < 1 || t > n_tasks) throw Error("lr_for: task index out of range");
  const int e = c.epochs;
  if (t == 1) {
    const int decay_after = (2 * e + 2) / 3;
    return {c.rehearsal_lr * (epoch > decay_after ? c.decay_factor : 1.0), 0.0};
  }
  const int decay_after = (e + 1) / 2;
  const double f = epoch > decay_after ? c.decay_factor : 1.0;
  const bool last = t == n_tasks && !c.open_ended;
  return {c.rehearsal_lr * f, (last ? c.last_task_refreshing_lr : c.refreshing_lr) * f};
}

enum class Phase { adaptation, rehearsal, refreshing };

inline const char* phase_model(Phase p) { return p == Phase::refreshing ? "memory" : "working"; }

struct LossRecord {
  int task = 0;
  int epoch = 0;
  std::size_t batch = 0;
  Phase phase = Phase::adaptation;
  double distill = 0.0;
  double ce = 0.0;
  double trip = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

struct StepInfo {
  Phase phase;
  int task;
  int epoch;
  std::size_t batch;
  const Batch* new_batch;
  const Batch* exemplar_batch;     // null when no exemplars are replayed
  const Tensor* teacher_logits;    // the constant side of the distillation, if any
  const ModelPair* models;
};

struct TrainHooks {
  std::function<void(const StepInfo&)> before_step;
  std::function<void(const StepInfo&)> after_step;
};

struct RunState {
  ModelPair models;
  ExemplarMemory memory;
  std::map<int, int> class_of_identity;
  RetrievalModel retrieval;  // what evaluation uses after the latest task
  bool fusion_active = false;
  std::vector<LossRecord> log;
  std::int64_t steps = 0;
  double seconds = 0.0;
};

namespace detail {

inline std::vector<int> class_labels(const RunState& s, const std::vector<int>& identities) {
  std::vector<int> out;
  out.reserve(identities.size());
  for (int id : identities) {
    auto it = s.class_of_identity.find(id);
    if (it == s.class_of_identity.end()) throw Error("trainer: identity " + std::to_string(id) + " has no class");
    out.push_back(it->second);
  }
  return out;
}

inline void register_task_classes(RunState& s, const TaskDataset& task, const TrainConfig& c) {
  const auto ids = task.train_identities();
  const auto base = static_cast<int>(s.models.working.classifier.num_classes());
  expand_classifier(s.models, task.task, ids.size(), derive_seed(c.seed, "classifier", static_cast<std::uint64_t>(task.task)));
  for (std::size_t k = 0; k < ids.size(); ++k) s.class_of_identity[ids[k]] = base + static_cast<int>(k);
}

inline std::size_t batches_per_epoch(const TaskDataset& task, const TrainConfig& c) {
  if (c.batches_per_epoch) return c.batches_per_epoch;
  return std::max<std::size_t>(1, task.train.size() / (c.P * c.K));
}

inline void record(RunState& s, int task, int epoch, std::size_t batch, Phase phase, const LossBreakdown& l,
                   double lr) {
  if (!std::isfinite(l.total)) {
    throw Error("trainer: non-finite loss at task " + std::to_string(task) + " epoch " + std::to_string(epoch));
  }
  s.log.push_back({task, epoch, batch, phase, l.distill, l.ce, l.trip, l.total, lr});
}

inline void update_exemplars(RunState& s, const TaskDataset& task, const TrainConfig& c) {
  Rng rng(derive_seed(c.seed, "exemplars", static_cast<std::uint64_t>(task.task)));
  s.memory.add(select_exemplars(s.models.working.extractor, task, ExemplarMemory::kPerIdentity,
                                c.exemplar_ids_per_task, rng));
}

// CE + triplet on the working model only (first task, naive fine-tuning).
// `schedule_task` selects the learning-rate schedule: 1 for the first-task one.
inline void train_working_alone(const TaskDataset& task, RunState& s, const TrainConfig& c, const Strategy& strategy,
                                int schedule_task, int n_tasks, const TrainHooks& hooks) {
  const auto started = std::chrono::steady_clock::now();
  const LossOptions opts{c.temperature, c.margin, 0};
  IdentityIndex index(task.train);
  const bool replay = strategy.use_exemplars && !s.memory.empty();
  std::optional<IdentityIndex> memory_index;
  if (replay) memory_index.emplace(s.memory.samples());
  Rng new_rng(derive_seed(c.seed, "sampler", static_cast<std::uint64_t>(task.task)));
  Rng exemplar_rng(derive_seed(c.seed, "exemplar-sampler", static_cast<std::uint64_t>(task.task)));
  AdamState adam;
  auto params = s.models.working.parameters();
  const std::size_t nb = batches_per_epoch(task, c);
  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    const double gamma = lr_for(schedule_task, std::max(n_tasks, schedule_task), epoch, c).rehearsal;
    for (std::size_t b = 0; b < nb; ++b) {
      Batch fresh = pk_sample(task.train, index, c.P, c.K, new_rng);
      std::optional<Batch> replayed;
      if (replay) replayed = pk_sample(s.memory.samples(), *memory_index, c.P, c.K, exemplar_rng, Provenance::exemplar);
      StepInfo info{Phase::adaptation, task.task, epoch, b, &fresh, replayed ? &*replayed : nullptr, nullptr, &s.models};
      if (hooks.before_step) hooks.before_step(info);
      auto labels = class_labels(s, fresh.labels);
      auto out = s.models.working.forward(fresh.inputs);
      Tensor ex_emb = replayed ? s.models.working.extractor.forward(replayed->inputs) : Tensor{};
      auto loss = adaptation_loss(out, ex_emb, labels, replayed ? replayed->labels : std::vector<int>{}, opts);
      loss.loss.backward();
      adam_step(params, adam, gamma);
      record(s, task.task, epoch, b, Phase::adaptation, loss, gamma);
      ++s.steps;
      if (hooks.after_step) hooks.after_step(info);
    }
  }
  s.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
}

}  // namespace detail

inline RunState make_run_state(const TrainConfig& c) {
  validate(c);
  RunState s;
  s.models = make_model_pair(c.arch, derive_seed(c.seed, "init"));
  s.memory = ExemplarMemory(c.exemplar_ids_per_task);
  return s;
}

// Bootstrap: the working model learns task 1 with CE + triplet, the memory
// model becomes its copy, and task-1 exemplars enter the memory.
inline RunState train_first_task(const TaskDataset& task, const TrainConfig& c, const Strategy& strategy = strategies::krkc(),
                                 const TrainHooks& hooks = {}) {
  validate(strategy);
  RunState s = make_run_state(c);
  if (!s.memory.empty()) throw Error("train_first_task: exemplar memory must start empty");
  detail::register_task_classes(s, task, c);
  detail::train_working_alone(task, s, c, strategy, 1, 1, hooks);
  s.models.memory = clone_model(s.models.working);
  s.models.task = task.task;
  s.retrieval = {s.models.working.extractor.clone(), Extractor{}, false};
  if (strategy.use_exemplars) detail::update_exemplars(s, task, c);
  return s;
}

// One task t >= 2 with a teacher: rehearsal then refreshing per batch, then
// consolidation and the memory update.
inline void train_task_krkc(const TaskDataset& task, RunState& s, const TrainConfig& c, const Strategy& strategy,
                            int n_tasks, const TrainHooks& hooks = {}) {
  validate(strategy);
  if (task.task < 2) throw Error("train_task_krkc: task index must be >= 2");
  if (strategy.teacher == TeacherUpdates::none) throw Error("train_task_krkc: strategy has no teacher");
  if (s.memory.empty()) throw Error("train_task_krkc: exemplar memory is empty; run train_first_task first");
  const auto started = std::chrono::steady_clock::now();

  const std::size_t old_classes = s.models.working.classifier.num_classes();
  detail::register_task_classes(s, task, c);
  const LossOptions opts{c.temperature, c.margin, c.distill_all_classes ? 0 : old_classes};
  IdentityIndex index(task.train);
  const SampleSet& replay_set = s.memory.samples();
  IdentityIndex memory_index(replay_set);
  Rng new_rng(derive_seed(c.seed, "sampler", static_cast<std::uint64_t>(task.task)));
  Rng exemplar_rng(derive_seed(c.seed, "exemplar-sampler", static_cast<std::uint64_t>(task.task)));
  AdamState working_adam, memory_adam;
  auto working_params = s.models.working.parameters();
  auto memory_params = s.models.memory.parameters();
  const bool refresh = strategy.teacher == TeacherUpdates::refreshing;
  const std::size_t nb = detail::batches_per_epoch(task, c);

  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    const auto rates = lr_for(task.task, n_tasks, epoch, c);
    for (std::size_t b = 0; b < nb; ++b) {
      Batch fresh = pk_sample(task.train, index, c.P, c.K, new_rng);
      Batch replayed = pk_sample(replay_set, memory_index, c.P, c.K, exemplar_rng, Provenance::exemplar);
      const auto labels = detail::class_labels(s, fresh.labels);

      // Knowledge rehearsal: update the working model.
      {
        Tensor teacher;
        {
          NoGradGuard guard;
          teacher = s.models.memory.forward(fresh.inputs).logits;
        }
        StepInfo info{Phase::rehearsal, task.task, epoch, b, &fresh, &replayed, &teacher, &s.models};
        if (hooks.before_step) hooks.before_step(info);
        auto out = s.models.working.forward(fresh.inputs);
        Tensor ex_emb = s.models.working.extractor.forward(replayed.inputs);
        auto loss = rehearsal_loss(out, teacher, ex_emb, labels, replayed.labels, opts);
        loss.loss.backward();
        adam_step(working_params, working_adam, rates.rehearsal);
        detail::record(s, task.task, epoch, b, Phase::rehearsal, loss, rates.rehearsal);
        ++s.steps;
        if (hooks.after_step) hooks.after_step(info);
      }

      // Knowledge refreshing: update the memory model against the updated working model.
      if (refresh) {
        Tensor teacher;
        {
          NoGradGuard guard;
          teacher = s.models.working.forward(fresh.inputs).logits;
        }
        StepInfo info{Phase::refreshing, task.task, epoch, b, &fresh, &replayed, &teacher, &s.models};
        if (hooks.before_step) hooks.before_step(info);
        auto out = s.models.memory.forward(fresh.inputs);
        Tensor ex_emb = s.models.memory.extractor.forward(replayed.inputs);
        auto loss = refreshing_loss(out, teacher, ex_emb, labels, replayed.labels, opts);
        loss.loss.backward();
        adam_step(memory_params, memory_adam, rates.refreshing);
        detail::record(s, task.task, epoch, b, Phase::refreshing, loss, rates.refreshing);
        ++s.steps;
        if (hooks.after_step) hooks.after_step(info);
      }
    }
  }

  // Fused retrieval uses the two trained extractors, before consolidation.
  s.fusion_active = strategy.fsc;
  if (strategy.fsc) s.retrieval = {s.models.working.extractor.clone(), s.models.memory.extractor.clone(), true};
  if (strategy.msc) {
    consolidate_model_space(s.models, task.task);
  } else {
    s.models.memory = clone_model(s.models.working);
  }
  if (!strategy.fsc) s.retrieval = {s.models.working.extractor.clone(), Extractor{}, false};
  s.models.task = task.task;
  detail::update_exemplars(s, task, c);
  s.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
}

// Plain sequential fine-tuning of the working model on a later task.
inline void train_task_plain(const TaskDataset& task, RunState& s, const TrainConfig& c, const Strategy& strategy,
                             int n_tasks, const TrainHooks& hooks = {}) {
  detail::register_task_classes(s, task, c);
  detail::train_working_alone(task, s, c, strategy, task.task, n_tasks, hooks);
  s.models.memory = clone_model(s.models.working);
  s.models.task = task.task;
  s.retrieval = {s.models.working.extractor.clone(), Extractor{}, false};
  if (strategy.use_exemplars) detail::update_exemplars(s, task, c);
}

struct TaskScore {
  double map = 0.0;
  double rank1 = 0.0;
};

inline TaskScore score(const RetrievalModel& model, const TaskDataset& task) {
  auto r = evaluate_task(model, task);
  return {r.mean_ap, r.rank1};
}

// R̄_{i,i}: a model trained on task i alone from the run's random
// initialisation, with the first-task schedule and the same epoch budget.
inline std::vector<TaskScore> compute_references(const std::vector<TaskDataset>& stream, const TrainConfig& c) {
  std::vector<TaskScore> out;
  for (const auto& task : stream) {
    RunState s = train_first_task(task, c, strategies::naive());
    out.push_back(score(s.retrieval, task));
  }
  return out;
}

struct SequenceObserver {
  TrainHooks hooks;
  std::function<void(const TaskDataset&, const RunState&)> on_task_end;
};

struct SequenceResult {
  MetricsReport report;
  RunState state;
};

inline void record_references(MetricsReport& report, const std::vector<TaskScore>* refs, std::size_t n) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  report.reference_map.assign(n, nan);
  report.reference_rank1.assign(n, nan);
  if (!refs) return;
  if (refs->size() != n) throw Error("run_sequence: reference count does not match the stream");
  for (std::size_t i = 0; i < n; ++i) {
    report.reference_map[i] = (*refs)[i].map;
    report.reference_rank1[i] = (*refs)[i].rank1;
  }
}

// Trains the stream in order; after task i, scores every task j <= i to fill
// row i of the accuracy matrices.
inline SequenceResult run_sequence(const std::vector<TaskDataset>& stream, const TrainConfig& c,
                                   const Strategy& strategy = strategies::krkc(), const SequenceObserver& observer = {},
                                   const std::vector<TaskScore>* references = nullptr) {
  validate(c);
  validate(strategy);
  if (strategy.joint) throw Error("run_sequence: joint training is not sequential; use run_strategy");
  if (stream.size() < 2) throw Error("run_sequence: needs at least two tasks");
  const int n = static_cast<int>(stream.size());
  for (int i = 0; i < n; ++i) {
    if (stream[static_cast<std::size_t>(i)].task != i + 1) throw Error("run_sequence: tasks must be numbered 1..N in order");
  }

  SequenceResult result;
  for (int t = 1; t <= n; ++t) {
    const auto& task = stream[static_cast<std::size_t>(t - 1)];
    if (t == 1) {
      result.state = train_first_task(task, c, strategy, observer.hooks);
    } else if (strategy.teacher == TeacherUpdates::none) {
      train_task_plain(task, result.state, c, strategy, n, observer.hooks);
    } else {
      train_task_krkc(task, result.state, c, strategy, n, observer.hooks);
    }
    std::vector<double> map_row, rank1_row;
    for (int j = 1; j <= t; ++j) {
      auto sc = score(result.state.retrieval, stream[static_cast<std::size_t>(j - 1)]);
      map_row.push_back(sc.map);
      rank1_row.push_back(sc.rank1);
    }
    result.report.map.append_row(std::move(map_row));
    result.report.rank1.append_row(std::move(rank1_row));
    if (observer.on_task_end) observer.on_task_end(task, result.state);
  }

  std::vector<TaskScore> own_refs;
  if (!references && c.compute_references) {
    own_refs = compute_references(stream, c);
    references = &own_refs;
  }
  record_references(result.report, references, stream.size());
  finalize_metrics(result.report);
  return result;
}

}  // namespace krkc
