#include <gtest/gtest.h>

#include <random>

#include "fewshot/autograd.hpp"
#include "test_support.hpp"

using namespace fewshot;
using fstest::gradcheck;
using fstest::uniform_tensor;

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.ensure_grad().size(), t.size());
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(t.dim(2), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Tensor, ScalarHasOneElement) {
  Tensor s = Tensor::scalar(4.0);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.item(), 4.0);
}

TEST(Tensor, ReshapeKeepsDataDropsGrad) {
  Tensor t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  t.ensure_grad();
  Tensor r = t.reshaped(Shape{3, 2});
  EXPECT_EQ(r.values(), t.values());
  EXPECT_FALSE(r.has_grad());
  EXPECT_THROW(t.reshaped(Shape{4}), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x(Shape{4}, std::vector<double>{1, -2, 3, 0.5});
  Tape tape;
  tape.backward(sum(tape.parameter(x)));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquares) {
  Tensor x(Shape{3}, std::vector<double>{1, 2, 3});
  Tape tape;
  Var v = tape.parameter(x);
  tape.backward(sum(mul(v, v)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_EQ(x.grad()[2], 6.0);
}

TEST(Backward, RejectsNonScalarRoot) {
  Tensor x(Shape{3}, 1.0);
  Tape tape;
  Var v = tape.parameter(x);
  EXPECT_THROW(tape.backward(v), TapeError);
}

TEST(Backward, RejectsSecondRunAndForeignVars) {
  Tensor x(Shape{2}, 1.0);
  Tape a, b;
  Var va = a.parameter(x);
  Var vb = b.parameter(x);
  EXPECT_THROW(add(va, vb), TapeError);
  Var loss = sum(va);
  a.backward(loss);
  EXPECT_THROW(a.backward(loss), TapeError);
  EXPECT_THROW(b.backward(loss), TapeError);
}

TEST(Backward, ReverseConstructionOrder) {
  Tensor x(Shape{2}, std::vector<double>{1, 2});
  Tape tape;
  Var v = tape.parameter(x);
  Var y = exp(scale(v, 2.0));
  Var loss = sum(log(y));
  EXPECT_EQ(tape.op_trace(), (std::vector<std::string>{"scale", "exp", "log", "sum"}));
  tape.backward(loss);
  EXPECT_NEAR(x.grad()[0], 2.0, 1e-12);
  EXPECT_NEAR(x.grad()[1], 2.0, 1e-12);
}

TEST(Backward, AccumulationIsAdditive) {
  // x consumed by three ops: grad = 1 + 2 + 2x.
  Tensor x(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
  Tape tape;
  Var v = tape.parameter(x);
  tape.backward(sum(add(add(v, scale(v, 2.0)), mul(v, v))));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x.grad()[i], 3.0 + 2.0 * x[i], 1e-12);
}

TEST(Backward, Linearity) {
  std::mt19937_64 rng(11);
  Tensor x = uniform_tensor(Shape{5}, rng);
  const double a = 0.7, b = -1.3;
  auto l1 = [](Var v) { return sum(exp(v)); };
  auto l2 = [](Var v) { return sum(mul(v, mul(v, v))); };

  Tensor x1 = x, x2 = x, x12 = x;
  { Tape t; t.backward(l1(t.parameter(x1))); }
  { Tape t; t.backward(l2(t.parameter(x2))); }
  {
    Tape t;
    Var v = t.parameter(x12);
    t.backward(add(scale(l1(v), a), scale(l2(v), b)));
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(x12.grad()[i], a * x1.grad()[i] + b * x2.grad()[i], 1e-12);
  }
}

TEST(Backward, ConstantsGetNoGrad) {
  Tensor x(Shape{2}, 1.0);
  Tape tape;
  Var c = tape.constant(Tensor(Shape{2}, 3.0));
  Var v = tape.parameter(x);
  Var prod = mul(c, c);
  EXPECT_FALSE(prod.requires_grad());
  tape.backward(sum(mul(prod, v)));
  EXPECT_EQ(x.grad()[0], 9.0);
  EXPECT_EQ(tape.node_count(), 2u);
}

TEST(Backward, Determinism) {
  std::mt19937_64 rng(3);
  const Tensor base = uniform_tensor(Shape{3, 4}, rng);
  auto run = [&base]() {
    Tensor x = base;
    Tape tape;
    Var v = tape.parameter(x);
    std::vector<std::size_t> idx{1, 3, 0};
    Var loss = mean(sub(logsumexp_rows(v), gather_rows(v, idx)));
    tape.backward(loss);
    return std::make_pair(loss.value().item(), std::vector<double>(x.grad().begin(), x.grad().end()));
  };
  EXPECT_EQ(run(), run());
}

// Per-op finite-difference checks, entries uniform in [-1, 1].

class OpGrad : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
  static constexpr double kTol = 1e-5;
};

TEST_F(OpGrad, AddSubMul) {
  std::vector<Tensor> leaves{uniform_tensor(Shape{3, 4}, rng), uniform_tensor(Shape{3, 4}, rng)};
  const auto w = fstest::uniform_vector(12, rng);
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) {
    return dot_const(mul(add(v[0], v[1]), sub(v[0], v[1])), w);
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST_F(OpGrad, ScaleExpLog) {
  std::vector<Tensor> leaves{uniform_tensor(Shape{6}, rng, 0.5, 2.0)};
  const auto w = fstest::uniform_vector(6, rng);
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) {
    return dot_const(log(add(exp(scale(v[0], -0.5)), v[0])), w);
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST_F(OpGrad, SumMeanSlice) {
  std::vector<Tensor> leaves{uniform_tensor(Shape{4, 3}, rng)};
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) {
    Var top = slice_rows(v[0], 1, 3);
    return add(mean(mul(top, top)), scale(sum(mul(v[0], v[0])), 0.25));
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST_F(OpGrad, LogsumexpGather) {
  std::vector<Tensor> leaves{uniform_tensor(Shape{4, 5}, rng, -3.0, 3.0)};
  std::vector<std::size_t> idx{0, 4, 2, 2};
  const auto w = fstest::uniform_vector(4, rng);
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) {
    return dot_const(sub(logsumexp_rows(v[0]), gather_rows(v[0], idx)), w);
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Ops, LogsumexpIsStable) {
  Tape tape;
  Var v = tape.constant(Tensor(Shape{1, 3}, std::vector<double>{1000.0, 999.0, -5000.0}));
  const double got = logsumexp_rows(v).value()[0];
  EXPECT_NEAR(got, 1000.0 + std::log1p(std::exp(-1.0)), 1e-9);
}

TEST(Ops, ShapeChecks) {
  Tape tape;
  Var a = tape.constant(Tensor(Shape{2, 2}));
  Var b = tape.constant(Tensor(Shape{4}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(slice_rows(a, 1, 3), ShapeError);
  std::vector<std::size_t> bad{0, 2};
  EXPECT_THROW(gather_rows(a, bad), ShapeError);
  std::vector<double> w(3);
  EXPECT_THROW(dot_const(a, w), ShapeError);
}
