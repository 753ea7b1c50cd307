#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "krkc/models.hpp"

using namespace krkc;

namespace {

Tensor random_input(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> v(n * d);
  for (auto& x : v) x = g(rng);
  return Tensor({n, d}, std::move(v));
}

std::vector<double> flat(const Model& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

void fill(Model& m, double v) {
  for (auto& p : m.parameters()) std::fill(p.mutable_data().begin(), p.mutable_data().end(), v);
}

Architecture tiny() { return {4, {5}, 3}; }

}  // namespace

TEST(Forward, ShapesAndDimensionCheck) {
  auto pair = make_model_pair(Architecture{}, 1);
  expand_classifier(pair, 1, 7, 2);
  auto out = pair.working.forward(random_input(6, 32, 3));
  EXPECT_EQ(out.embeddings.shape(), (Shape{6, 32}));
  EXPECT_EQ(out.logits.shape(), (Shape{6, 7}));
  EXPECT_THROW(pair.working.forward(random_input(2, 31, 3)), Error);
}

TEST(Forward, ZeroWeightsGiveUniformSoftmax) {
  auto pair = make_model_pair(tiny(), 1);
  expand_classifier(pair, 1, 4, 2);
  fill(pair.working, 0.0);
  auto out = pair.working.forward(random_input(3, 4, 5));
  Tensor p = softmax(out.logits);
  for (double v : out.logits.data()) EXPECT_EQ(v, 0.0);
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Forward, NoCouplingAcrossBatchRows) {
  auto pair = make_model_pair(Architecture{}, 4);
  expand_classifier(pair, 1, 5, 6);
  Tensor x = random_input(8, 32, 7);
  auto batch = pair.working.forward(x);
  for (std::size_t i = 0; i < 8; ++i) {
    std::vector<double> row(x.data().begin() + i * 32, x.data().begin() + (i + 1) * 32);
    auto single = pair.working.forward(Tensor({1, 32}, row));
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(single.logits.at(0, c), batch.logits.at(i, c));
  }
}

TEST(Forward, SeedFixedWeightsAreBitIdentical) {
  auto a = make_model_pair(Architecture{}, 9);
  auto b = make_model_pair(Architecture{}, 9);
  expand_classifier(a, 1, 3, 10);
  expand_classifier(b, 1, 3, 10);
  Tensor x = random_input(4, 32, 11);
  auto la = a.working.forward(x).logits, lb = b.working.forward(x).logits;
  for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_EQ(la[i], lb[i]);
}

TEST(Expand, ZeroWidthForbidden) {
  auto pair = make_model_pair(tiny(), 1);
  EXPECT_THROW(expand_classifier(pair, 1, 0, 1), Error);
}

TEST(Expand, GrowsClassCountAndRegistersRange) {
  auto pair = make_model_pair(tiny(), 1);
  expand_classifier(pair, 1, 3, 1);
  expand_classifier(pair, 2, 5, 2);
  EXPECT_EQ(pair.working.classifier.num_classes(), 8u);
  EXPECT_EQ(pair.memory.classifier.num_classes(), 8u);
  const auto& r = pair.working.classifier.ranges();
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0], (ClassRange{1, 0, 3}));
  EXPECT_EQ(r[1], (ClassRange{2, 3, 8}));
}

TEST(Expand, OldLogitsUnchangedBitwise) {
  auto pair = make_model_pair(Architecture{}, 1);
  expand_classifier(pair, 1, 6, 2);
  Tensor x = random_input(5, 32, 3);
  Tensor before = pair.working.forward(x).logits;
  expand_classifier(pair, 2, 4, 4);
  Tensor after = pair.working.forward(x).logits;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(before.at(i, c), after.at(i, c));
}

TEST(Expand, WorkingAndMemoryGetIdenticalColumns) {
  auto pair = make_model_pair(tiny(), 1);
  // Make the two models differ first so only the new block can match.
  fill(pair.memory, 0.5);
  expand_classifier(pair, 1, 3, 77);
  auto w = pair.working.classifier.parameters()[0].data();
  auto m = pair.memory.classifier.parameters()[0].data();
  ASSERT_EQ(w.size(), m.size());
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(w[i], m[i]);
  const double bound = 1.0 / std::sqrt(3.0);
  for (double v : w) EXPECT_LE(std::abs(v), bound);
}

TEST(Consolidation, WeightsSumToOne) {
  for (int t = 1; t <= 10; ++t) {
    auto w = consolidation_weights(t);
    EXPECT_EQ(w.working + w.memory, 1.0) << "t=" << t;
    EXPECT_DOUBLE_EQ(w.working, 1.0 / (t + 1));
  }
  auto w1 = consolidation_weights(1);
  EXPECT_EQ(w1.working, 0.5);
  EXPECT_EQ(w1.memory, 0.5);
  EXPECT_THROW(consolidation_weights(0), Error);
}

TEST(Consolidation, ScalarExample) {
  auto pair = make_model_pair({1, {}, 1}, 1);
  expand_classifier(pair, 1, 1, 1);
  fill(pair.working, 4.0);
  fill(pair.memory, 0.0);
  consolidate_model_space(pair, 3);
  for (double v : flat(pair.working)) EXPECT_EQ(v, 1.0);
  for (double v : flat(pair.memory)) EXPECT_EQ(v, 1.0);
}

TEST(Consolidation, FixedPointIsBitwise) {
  auto pair = make_model_pair(Architecture{}, 3);
  expand_classifier(pair, 1, 9, 4);
  const auto before = flat(pair.working);
  for (int t = 1; t <= 10; ++t) {
    consolidate_model_space(pair, t);
    EXPECT_EQ(flat(pair.working), before) << "t=" << t;
  }
}

TEST(Consolidation, IsLinear) {
  auto base = make_model_pair(tiny(), 5);
  expand_classifier(base, 1, 2, 6);
  Rng rng(8);
  base.memory = Model(tiny(), rng);
  base.memory.classifier = base.working.classifier.clone();
  fill(base.memory, 0.0);
  {
    std::mt19937_64 r(12);
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& p : base.memory.parameters())
      for (auto& v : p.mutable_data()) v = u(r);
  }
  auto scaled = ModelPair{clone_model(base.working), clone_model(base.memory), 0};
  const double a = 2.0;  // power of two keeps the scaling exact
  for (auto* m : {&scaled.working, &scaled.memory})
    for (auto& p : m->parameters())
      for (auto& v : p.mutable_data()) v *= a;
  consolidate_model_space(base, 2);
  consolidate_model_space(scaled, 2);
  const auto x = flat(base.working), y = flat(scaled.working);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], a * x[i], 1e-15);
  EXPECT_EQ(flat(scaled.memory), y);
}

TEST(Consolidation, ShapeMismatchIsAnError) {
  auto pair = make_model_pair(tiny(), 1);
  expand_classifier(pair, 1, 2, 1);
  Rng rng(3);
  pair.memory = Model({4, {6}, 3}, rng);
  pair.memory.classifier = pair.working.classifier.clone();
  EXPECT_THROW(consolidate_model_space(pair, 1), Error);
}

TEST(Clone, DeepCopySemantics) {
  auto pair = make_model_pair(Architecture{}, 2);
  expand_classifier(pair, 1, 4, 3);
  Tensor x = random_input(3, 32, 4);
  Model copy = clone_model(pair.working);
  auto a = pair.working.forward(x).logits, b = copy.forward(x).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  fill(copy, 0.25);
  auto c = pair.working.forward(x).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], c[i]);
  EXPECT_EQ(flat(clone_model(clone_model(pair.working))), flat(pair.working));
}

TEST(Clone, PairStartsIdentical) {
  auto pair = make_model_pair(Architecture{}, 2);
  EXPECT_EQ(flat(pair.working), flat(pair.memory));
  EXPECT_EQ(pair.working.parameters().size(), pair.memory.parameters().size());
}

TEST(Checkpoint, RoundTripIsExactAndByteStable) {
  auto pair = make_model_pair(Architecture{}, 2);
  expand_classifier(pair, 1, 4, 3);
  expand_classifier(pair, 2, 2, 5);
  const std::string text = checkpoint_string(pair.working, 2);
  EXPECT_EQ(text, checkpoint_string(pair.working, 2));
  std::istringstream is(text);
  auto loaded = load_checkpoint(is);
  EXPECT_EQ(loaded.task, 2);
  EXPECT_EQ(flat(loaded.model), flat(pair.working));
  EXPECT_EQ(loaded.model.classifier.ranges(), pair.working.classifier.ranges());
  EXPECT_EQ(loaded.model.extractor.architecture(), pair.working.extractor.architecture());
  EXPECT_EQ(checkpoint_string(loaded.model, 2), text);
  EXPECT_EQ(text.rfind("krkc-checkpoint 1\n", 0), 0u);
}

TEST(Checkpoint, CorruptInputRejected) {
  auto pair = make_model_pair(tiny(), 2);
  expand_classifier(pair, 1, 2, 3);
  std::string text = checkpoint_string(pair.working, 1);
  std::istringstream truncated(text.substr(0, text.size() / 2));
  EXPECT_THROW(load_checkpoint(truncated), Error);
  std::istringstream wrong("not-a-checkpoint 1\n");
  EXPECT_THROW(load_checkpoint(wrong), Error);
}
