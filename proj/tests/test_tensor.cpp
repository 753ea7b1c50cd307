#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "krkc/gradcheck.hpp"
#include "krkc/optim.hpp"
#include "krkc/tensor.hpp"

using namespace krkc;

namespace {

Tensor random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

}  // namespace

TEST(Softmax, UniformForEqualLogits) {
  Tensor s = softmax(Tensor({1, 2}, {0.0, 0.0}), 1.0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, TemperatureDividesLogits) {
  Tensor a = softmax(Tensor({1, 2}, {2.0, 0.0}), 2.0);
  Tensor b = softmax(Tensor({1, 2}, {1.0, 0.0}), 1.0);
  const double expect = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(a[0], expect, 1e-15);
  EXPECT_NEAR(a[0], 0.7311, 1e-4);
  EXPECT_NEAR(a[1], 0.2689, 1e-4);
  EXPECT_DOUBLE_EQ(a[0], b[0]);
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tensor s = softmax(Tensor({1, 3}, {1000.0, 0.0, -1000.0}), 1.0);
  EXPECT_NEAR(s[0], 1.0, 1e-15);
  EXPECT_TRUE(std::isfinite(s[2]));
}

TEST(StopGradient, ForwardIdentityBackwardZero) {
  Tensor w = Tensor::parameter({2}, {1.5, -2.0});
  Tensor s = stop_gradient(w);
  EXPECT_EQ(s[0], 1.5);
  EXPECT_EQ(s[1], -2.0);
  Tensor loss = add(sum(mul(s, s)), scale(sum(w), 0.0));
  loss.backward();
  ASSERT_TRUE(w.has_grad());
  EXPECT_EQ(w.grad()[0], 0.0);
  EXPECT_EQ(w.grad()[1], 0.0);
}

TEST(Backward, SumOfSquares) {
  Tensor w = Tensor::parameter({2}, {1.0, 2.0});
  sum(mul(w, w)).backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 4.0);
}

TEST(Backward, MeanOfRelu) {
  Tensor w = Tensor::parameter({2}, {-1.0, 3.0});
  mean(relu(w)).backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 0.5);
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  Tensor w = Tensor::parameter({2}, {1.0, 2.0});
  sum(mul(w, w)).backward();
  sum(mul(w, w)).backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 8.0);
}

TEST(Backward, SharedSubexpressionCountedOnce) {
  Tensor w = Tensor::parameter({1}, {3.0});
  Tensor y = mul(w, w);
  sum(add(y, y)).backward();  // d/dw 2w^2 = 4w
  EXPECT_DOUBLE_EQ(w.grad()[0], 12.0);
}

TEST(Backward, NonScalarIsAnError) {
  Tensor w = Tensor::parameter({2}, {1.0, 2.0});
  EXPECT_THROW(mul(w, w).backward(), Error);
}

TEST(NoGrad, BuildsNoGraph) {
  Tensor w = Tensor::parameter({2}, {1.0, 2.0});
  Tensor y;
  {
    NoGradGuard g;
    y = sum(mul(w, w));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_DOUBLE_EQ(y.item(), 5.0);
}

TEST(Errors, ShapeMismatchNamesOpAndShapes) {
  Tensor a({2, 3}, std::vector<double>(6, 1.0));
  Tensor b({2, 3}, std::vector<double>(6, 1.0));
  try {
    matmul(a, b);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
}

TEST(Errors, NonFiniteInputRejected) {
  Tensor a({1, 2}, {1.0, std::nan("")});
  EXPECT_THROW(relu(a), Error);
  EXPECT_THROW(softmax(a), Error);
  Tensor inf({1, 1}, {INFINITY});
  EXPECT_THROW(matmul(inf, inf), Error);
}

TEST(Errors, BadConstruction) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), Error);
  EXPECT_THROW(Tensor::scalar(1.0).backward(), std::exception);
}

TEST(Ops, PairwiseDistancesMatchDirectComputation) {
  std::mt19937_64 rng(3);
  Tensor x = random_param({5, 3}, rng);
  Tensor d = pairwise_sq_distances(x);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += (x.at(i, k) - x.at(j, k)) * (x.at(i, k) - x.at(j, k));
      EXPECT_NEAR(d.at(i, j), s, 1e-14);
    }
    EXPECT_EQ(d.at(i, i), 0.0);
  }
}

TEST(Ops, SqrtSubgradientZeroAtZero) {
  Tensor w = Tensor::parameter({2}, {0.0, 4.0});
  sum(sqrt(w)).backward();
  EXPECT_EQ(w.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 0.25);
}

TEST(Ops, L2NormalizeGivesUnitRows) {
  Tensor x({2, 2}, {3.0, 4.0, -1.0, 0.0});
  Tensor n = l2_normalize_rows(x);
  EXPECT_DOUBLE_EQ(n.at(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(n.at(0, 1), 0.8);
  EXPECT_DOUBLE_EQ(n.at(1, 0), -1.0);
}

TEST(Gradcheck, EveryOpMatchesCentralDifferences) {
  std::mt19937_64 rng(11);
  Tensor a = random_param({3, 4}, rng);
  Tensor b = random_param({4, 2}, rng);
  Tensor bias = random_param({2}, rng);
  Tensor pos = random_param({3, 2}, rng, 0.5, 2.0);
  std::vector<std::size_t> pick_idx{1, 0, 1};
  std::vector<std::size_t> rows{0, 2, 1}, cols{1, 1, 0};
  std::vector<Tensor> params{a, b, bias, pos};
  auto f = [&]() {
    Tensor h = add_bias(matmul(a, b), bias);
    Tensor t1 = sum(mul(relu(h), h));
    Tensor t2 = mean(log_softmax(h, 1.7));
    Tensor t3 = sum(pick(softmax(h, 0.9), pick_idx));
    Tensor t4 = sum(sqrt(add_scalar(pairwise_sq_distances(a), 0.1)));
    Tensor t5 = sum(mul(l2_normalize_rows(a), slice_cols(concat_cols(a, a), 2, 6)));
    Tensor t6 = sum(gather(log(pos, 1e-12), rows, cols));
    Tensor t7 = sum(sub(scale(pos, 2.5), h));
    return add(add(add(t1, t2), add(t3, t4)), add(add(t5, t6), t7));
  };
  EXPECT_LT(finite_difference_check(f, params), 1e-6);
}

TEST(Gradcheck, SumOfSquaresBelowOneInAMillion) {
  Tensor w = Tensor::parameter({3}, {0.3, -1.2, 2.0});
  std::vector<Tensor> params{w};
  EXPECT_LT(finite_difference_check([&] { return sum(mul(w, w)); }, params), 1e-6);
}

TEST(Gradcheck, ConstantFunctionHasZeroError) {
  Tensor w = Tensor::parameter({3}, {0.3, -1.2, 2.0});
  std::vector<Tensor> params{w};
  EXPECT_EQ(finite_difference_check([&] { return Tensor::scalar(4.0); }, params), 0.0);
}

TEST(Gradcheck, RejectsBadStepAndNonFiniteObjective) {
  Tensor w = Tensor::parameter({1}, {1.0});
  std::vector<Tensor> params{w};
  auto f = [&] { return sum(w); };
  EXPECT_THROW(finite_difference_check(f, params, 0.0), Error);
  EXPECT_THROW(finite_difference_check(f, params, 0.1), Error);
  EXPECT_THROW(finite_difference_check([] { return Tensor::scalar(NAN); }, params), Error);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor w = Tensor::parameter({2}, {1.0, -1.0});
  sum(scale(w, 0.0)).backward();
  std::vector<Tensor> params{w};
  AdamState st;
  adam_step(params, st, 0.1);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(w[1], -1.0);
}

TEST(Adam, FirstStepMatchesClosedForm) {
  Tensor w = Tensor::parameter({1}, {0.0});
  sum(w).backward();  // g = 1
  std::vector<Tensor> params{w};
  AdamState st;
  adam_step(params, st, 0.1);
  // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
  EXPECT_NEAR(w[0], -0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(w[0], -0.1, 1e-8);
  EXPECT_EQ(w.grad()[0], 0.0);
}

TEST(Adam, ConstantGradientDecreasesMonotonically) {
  Tensor w = Tensor::parameter({1}, {0.0});
  std::vector<Tensor> params{w};
  AdamState st;
  double prev = w[0];
  for (int i = 0; i < 2; ++i) {
    sum(scale(w, 3.0)).backward();
    adam_step(params, st, 0.05);
    EXPECT_LT(w[0], prev);
    prev = w[0];
  }
  // Constant gradient: bias-corrected ratio is exactly 1 at every step.
  EXPECT_NEAR(w[0], -0.1, 1e-8);
}

TEST(Adam, MissingGradientIsAnError) {
  Tensor w = Tensor::parameter({1}, {0.0});
  std::vector<Tensor> params{w};
  AdamState st;
  EXPECT_THROW(adam_step(params, st, 0.1), Error);
}
