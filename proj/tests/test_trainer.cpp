#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "krkc/baselines.hpp"
#include "krkc/trainer.hpp"

using namespace krkc;

namespace {

StreamConfig small_stream(int tasks = 2, std::uint64_t seed = 3) {
  StreamConfig s;
  s.n_tasks = tasks;
  s.train_ids_per_task = 8;
  s.test_ids_per_task = 4;
  s.samples_per_id = 6;
  s.queries_per_id = 2;
  s.input_dim = 8;
  s.identity_dim = 4;
  s.seed = seed;
  return s;
}

TrainConfig small_train(std::uint64_t seed = 5) {
  TrainConfig c;
  c.epochs = 4;
  c.P = 4;
  c.K = 2;
  c.exemplar_ids_per_task = 4;
  c.arch = {8, {12}, 6};
  c.compute_references = false;
  c.seed = seed;
  return c;
}

std::vector<double> flat(const Model& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

bool same_log(const std::vector<LossRecord>& a, const std::vector<LossRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto &x = a[i], &y = b[i];
    if (x.task != y.task || x.epoch != y.epoch || x.batch != y.batch || x.phase != y.phase || x.distill != y.distill ||
        x.ce != y.ce || x.trip != y.trip || x.total != y.total || x.lr != y.lr) {
      return false;
    }
  }
  return true;
}

bool same_matrix(const AccuracyMatrix& a, const AccuracyMatrix& b) {
  if (a.steps() != b.steps()) return false;
  for (std::size_t i = 1; i <= a.steps(); ++i)
    for (std::size_t j = 1; j <= i; ++j)
      if (a.at(i, j) != b.at(i, j)) return false;
  return true;
}

}  // namespace

TEST(Schedule, SubsequentTaskBeforeDecay) {
  TrainConfig c;
  auto r = lr_for(2, 4, 1, c);
  EXPECT_EQ(r.rehearsal, 3.5e-4);
  EXPECT_EQ(r.refreshing, 3.5e-5);
  EXPECT_EQ(lr_for(3, 4, 15, c).refreshing, 3.5e-5);
}

TEST(Schedule, LastTaskUsesSmallerRefreshingRate) {
  TrainConfig c;
  EXPECT_EQ(lr_for(4, 4, 1, c).refreshing, 3.5e-6);
  EXPECT_EQ(lr_for(4, 4, 1, c).rehearsal, 3.5e-4);
  c.open_ended = true;
  EXPECT_EQ(lr_for(4, 4, 1, c).refreshing, 3.5e-5);
}

TEST(Schedule, DecayMultipliesBothRatesByTenth) {
  TrainConfig c;  // 30 epochs: later tasks decay after epoch 15
  auto before = lr_for(2, 4, 15, c), after = lr_for(2, 4, 16, c);
  EXPECT_DOUBLE_EQ(after.rehearsal, 0.1 * before.rehearsal);
  EXPECT_DOUBLE_EQ(after.refreshing, 0.1 * before.refreshing);
  EXPECT_DOUBLE_EQ(lr_for(4, 4, 30, c).refreshing, 3.5e-7);
}

TEST(Schedule, FirstTaskDecaysLaterAndHasNoRefreshing) {
  TrainConfig c;  // 30 epochs: first task decays after epoch 20
  EXPECT_EQ(lr_for(1, 4, 20, c).rehearsal, 3.5e-4);
  EXPECT_DOUBLE_EQ(lr_for(1, 4, 21, c).rehearsal, 3.5e-5);
  EXPECT_EQ(lr_for(1, 4, 1, c).refreshing, 0.0);
  c.epochs = 4;  // ceil(8/3) = 3 and ceil(4/2) = 2
  EXPECT_EQ(lr_for(1, 4, 3, c).rehearsal, 3.5e-4);
  EXPECT_LT(lr_for(1, 4, 4, c).rehearsal, 3.5e-4);
  EXPECT_EQ(lr_for(2, 4, 2, c).rehearsal, 3.5e-4);
  EXPECT_LT(lr_for(2, 4, 3, c).rehearsal, 3.5e-4);
}

TEST(Schedule, TaskOutOfRange) {
  TrainConfig c;
  EXPECT_THROW(lr_for(0, 4, 1, c), Error);
  EXPECT_THROW(lr_for(5, 4, 1, c), Error);
}

TEST(FirstTask, MemoryIsCopyAndLogIsFinite) {
  auto stream = generate_stream(small_stream());
  auto c = small_train();
  RunState s = train_first_task(stream[0], c);
  EXPECT_EQ(flat(s.models.working), flat(s.models.memory));
  const std::size_t nb = stream[0].train.size() / (c.P * c.K);
  EXPECT_EQ(s.log.size(), static_cast<std::size_t>(c.epochs) * nb);
  for (const auto& r : s.log) {
    EXPECT_TRUE(std::isfinite(r.total));
    EXPECT_EQ(r.phase, Phase::adaptation);
  }
  EXPECT_FALSE(s.memory.empty());
  EXPECT_EQ(s.models.task, 1);
}

TEST(FirstTask, TrainingBeatsUntrainedModel) {
  auto sc = small_stream(2, 11);
  sc.train_ids_per_task = 16;
  sc.test_ids_per_task = 16;
  sc.samples_per_id = 8;
  auto stream = generate_stream(sc);
  auto c = small_train(11);
  c.epochs = 20;
  c.rehearsal_lr = 3e-3;
  RunState untrained = make_run_state(c);
  const double before = score({untrained.models.working.extractor.clone(), Extractor{}, false}, stream[0]).rank1;
  RunState s = train_first_task(stream[0], c);
  EXPECT_GT(score(s.retrieval, stream[0]).rank1, before);
}

TEST(LaterTask, RequiresMemoryAndValidIndex) {
  auto stream = generate_stream(small_stream());
  auto c = small_train();
  RunState fresh = make_run_state(c);
  EXPECT_THROW(train_task_krkc(stream[1], fresh, c, strategies::krkc(), 2), Error);
  RunState s = train_first_task(stream[0], c);
  EXPECT_THROW(train_task_krkc(stream[0], s, c, strategies::krkc(), 2), Error);
  EXPECT_THROW(train_task_krkc(stream[1], s, c, strategies::naive(), 2), Error);
}

TEST(LaterTask, RehearsalPrecedesRefreshingAndTeacherIsUpdatedWorkingModel) {
  auto stream = generate_stream(small_stream());
  auto c = small_train();
  RunState s = train_first_task(stream[0], c);
  std::vector<Phase> order;
  Tensor pre_update;
  int checked = 0;
  TrainHooks hooks;
  hooks.before_step = [&](const StepInfo& info) {
    order.push_back(info.phase);
    NoGradGuard guard;
    if (info.phase == Phase::rehearsal) {
      // The rehearsal teacher is the memory model on the new batch.
      Tensor mem = info.models->memory.forward(info.new_batch->inputs).logits;
      ASSERT_EQ(mem.data().size(), info.teacher_logits->data().size());
      for (std::size_t i = 0; i < mem.numel(); ++i) ASSERT_EQ(mem[i], (*info.teacher_logits)[i]);
      pre_update = info.models->working.forward(info.new_batch->inputs).logits;
    } else {
      Tensor now = info.models->working.forward(info.new_batch->inputs).logits;
      bool moved = false;
      for (std::size_t i = 0; i < now.numel(); ++i) {
        ASSERT_EQ(now[i], (*info.teacher_logits)[i]);
        moved = moved || now[i] != pre_update[i];
      }
      EXPECT_TRUE(moved);
      ++checked;
    }
  };
  train_task_krkc(stream[1], s, c, strategies::krkc(), 2, hooks);
  ASSERT_FALSE(order.empty());
  ASSERT_EQ(order.size() % 2, 0u);
  for (std::size_t i = 0; i < order.size(); i += 2) {
    EXPECT_EQ(order[i], Phase::rehearsal);
    EXPECT_EQ(order[i + 1], Phase::refreshing);
  }
  EXPECT_EQ(static_cast<std::size_t>(checked), order.size() / 2);
}

TEST(LaterTask, EachStepUpdatesOnlyItsOwnModel) {
  auto stream = generate_stream(small_stream(3));
  auto c = small_train();
  std::vector<double> w0, m0;
  int steps = 0;
  SequenceObserver obs;
  obs.hooks.before_step = [&](const StepInfo& info) {
    w0 = flat(info.models->working);
    m0 = flat(info.models->memory);
  };
  obs.hooks.after_step = [&](const StepInfo& info) {
    const auto w1 = flat(info.models->working), m1 = flat(info.models->memory);
    if (info.phase == Phase::refreshing) {
      EXPECT_EQ(w1, w0);
      EXPECT_NE(m1, m0);
    } else {
      EXPECT_EQ(m1, m0);
      EXPECT_NE(w1, w0);
    }
    ++steps;
  };
  run_sequence(stream, c, strategies::krkc(), obs);
  EXPECT_GT(steps, 0);
}

TEST(LaterTask, ZeroRefreshingRateLeavesMemoryUntouched) {
  auto stream = generate_stream(small_stream());
  auto c = small_train();
  c.refreshing_lr = 0.0;
  c.last_task_refreshing_lr = 0.0;
  RunState s = train_first_task(stream[0], c);
  // Snapshot after the classifier has been widened for the new task.
  std::vector<double> first, last;
  TrainHooks hooks;
  hooks.before_step = [&](const StepInfo& info) {
    if (first.empty()) first = flat(info.models->memory);
  };
  hooks.after_step = [&](const StepInfo& info) { last = flat(info.models->memory); };
  train_task_krkc(stream[1], s, c, strategies::krh_krf(), 2, hooks);
  ASSERT_FALSE(first.empty());
  EXPECT_EQ(last, first);
}

TEST(LaterTask, LogLengthAndComponentSums) {
  auto stream = generate_stream(small_stream(3));
  auto c = small_train();
  const std::size_t nb = stream[0].train.size() / (c.P * c.K);
  SequenceObserver obs;
  obs.on_task_end = [&](const TaskDataset& task, const RunState& s) {
    std::size_t rehearsal = 0, refreshing = 0, adaptation = 0;
    for (const auto& r : s.log) {
      if (r.task != task.task) continue;
      rehearsal += r.phase == Phase::rehearsal;
      refreshing += r.phase == Phase::refreshing;
      adaptation += r.phase == Phase::adaptation;
    }
    const std::size_t per_phase = static_cast<std::size_t>(c.epochs) * nb;
    if (task.task == 1) {
      EXPECT_EQ(adaptation, per_phase);
    } else {
      EXPECT_EQ(rehearsal, per_phase);
      EXPECT_EQ(refreshing, per_phase);
    }
  };
  auto result = run_sequence(stream, c, strategies::krkc(), obs);
  for (const auto& r : result.state.log) {
    EXPECT_TRUE(std::isfinite(r.total));
    EXPECT_NEAR(r.distill + r.ce + r.trip, r.total, 1e-12 * std::max(1.0, std::abs(r.total)));
  }
}

TEST(Sequence, MatrixShapeAndErrors) {
  auto stream = generate_stream(small_stream());
  auto c = small_train();
  auto r = run_sequence(stream, c).report;
  ASSERT_EQ(r.rank1.steps(), 2u);
  EXPECT_NO_THROW(r.rank1.at(1, 1));
  EXPECT_NO_THROW(r.rank1.at(2, 2));
  EXPECT_THROW(r.rank1.at(1, 2), Error);
  EXPECT_TRUE(std::isnan(r.reference_rank1[0]));
  std::vector<TaskDataset> one{stream[0]};
  EXPECT_THROW(run_sequence(one, c), Error);
  EXPECT_THROW(run_sequence(stream, c, strategies::joint()), Error);
  std::vector<TaskDataset> swapped{stream[1], stream[0]};
  EXPECT_THROW(run_sequence(swapped, c), Error);
}

TEST(Sequence, DeterministicForFixedSeed) {
  auto stream = generate_stream(small_stream(3));
  auto c = small_train();
  c.compute_references = true;
  auto a = run_sequence(stream, c);
  auto b = run_sequence(stream, c);
  EXPECT_TRUE(same_matrix(a.report.rank1, b.report.rank1));
  EXPECT_TRUE(same_matrix(a.report.map, b.report.map));
  EXPECT_EQ(a.report.reference_rank1, b.report.reference_rank1);
  EXPECT_EQ(a.report.fwt, b.report.fwt);
  EXPECT_TRUE(same_log(a.state.log, b.state.log));
  EXPECT_EQ(flat(a.state.models.working), flat(b.state.models.working));
  c.seed = 6;
  auto d = run_sequence(stream, c);
  EXPECT_NE(flat(a.state.models.working), flat(d.state.models.working));
}

TEST(Sequence, EvaluationDoesNotMutateModels) {
  auto stream = generate_stream(small_stream());
  auto c = small_train();
  RunState s = train_first_task(stream[0], c);
  const auto w = checkpoint_string(s.models.working, 1), m = checkpoint_string(s.models.memory, 1);
  score(s.retrieval, stream[0]);
  score(s.retrieval, stream[1]);
  EXPECT_EQ(checkpoint_string(s.models.working, 1), w);
  EXPECT_EQ(checkpoint_string(s.models.memory, 1), m);
}

TEST(Sequence, FrozenTeacherEqualsZeroRefreshingRateWithoutConsolidation) {
  auto stream = generate_stream(small_stream(3));
  auto c = small_train();
  c.refreshing_lr = 0.0;
  c.last_task_refreshing_lr = 0.0;
  auto frozen = run_sequence(stream, c, strategies::frozen_teacher());
  auto refreshed = run_sequence(stream, c, strategies::krh_krf());
  EXPECT_TRUE(same_matrix(frozen.report.rank1, refreshed.report.rank1));
  EXPECT_TRUE(same_matrix(frozen.report.map, refreshed.report.map));
  EXPECT_EQ(flat(frozen.state.models.working), flat(refreshed.state.models.working));
  EXPECT_EQ(flat(frozen.state.models.memory), flat(refreshed.state.models.memory));
  // The working-model trajectory matches step for step.
  std::vector<LossRecord> a, b;
  for (const auto& r : frozen.state.log)
    if (r.phase != Phase::refreshing) a.push_back(r);
  for (const auto& r : refreshed.state.log)
    if (r.phase != Phase::refreshing) b.push_back(r);
  EXPECT_TRUE(same_log(a, b));
}

TEST(Sequence, FusionActiveOnlyWithFusedStrategies) {
  auto stream = generate_stream(small_stream());
  auto c = small_train();
  EXPECT_TRUE(run_sequence(stream, c, strategies::krkc()).state.fusion_active);
  EXPECT_TRUE(run_sequence(stream, c, strategies::krkc()).state.retrieval.fuse);
  EXPECT_FALSE(run_sequence(stream, c, strategies::krh_krf()).state.retrieval.fuse);
  EXPECT_FALSE(run_sequence(stream, c, strategies::naive()).state.retrieval.fuse);
}
