#include <gtest/gtest.h>

#include <random>

#include "fewshot/layers.hpp"
#include "test_support.hpp"

using namespace fewshot;
using fstest::gradcheck;
using fstest::uniform_tensor;
using fstest::uniform_vector;

namespace {

// Direct 3x3 same-padding convolution, one output element at a time.
double naive_conv_at(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t n,
                     std::size_t f, std::size_t y, std::size_t xo) {
  const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  double acc = b[f];
  for (std::size_t c = 0; c < C; ++c) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(xo) + dx;
        if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
        acc += x[((n * C + c) * H + static_cast<std::size_t>(yy)) * W + static_cast<std::size_t>(xx)] *
               w[((f * C + c) * 3 + static_cast<std::size_t>(dy + 1)) * 3 + static_cast<std::size_t>(dx + 1)];
      }
    }
  }
  return acc;
}

}  // namespace

TEST(Conv2d, ZeroInputGivesBias) {
  std::mt19937_64 rng(1);
  Tape tape;
  Var x = tape.constant(Tensor(Shape{2, 3, 5, 4}, 0.0));
  Var w = tape.constant(uniform_tensor(Shape{2, 3, 3, 3}, rng));
  Var b = tape.constant(Tensor(Shape{2}, std::vector<double>{0.25, -1.5}));
  const Tensor& out = conv2d(x, w, b).value();
  ASSERT_EQ(out.shape(), (Shape{2, 2, 5, 4}));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], (i / 20) % 2 == 0 ? 0.25 : -1.5);
}

TEST(Conv2d, OnesFullOverlapIsNine) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
  Var w = tape.constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
  Var b = tape.constant(Tensor(Shape{1}, 0.0));
  const Tensor& out = conv2d(x, w, b).value();
  EXPECT_EQ(out[4], 9.0);
  EXPECT_EQ(out[0], 4.0);
  EXPECT_EQ(out[1], 6.0);
}

TEST(Conv2d, MatchesNaiveLoop) {
  std::mt19937_64 rng(2);
  const Tensor x = uniform_tensor(Shape{2, 3, 6, 5}, rng);
  const Tensor w = uniform_tensor(Shape{4, 3, 3, 3}, rng);
  const Tensor b = uniform_tensor(Shape{4}, rng);
  Tape tape;
  const Tensor& out = conv2d(tape.constant(x), tape.constant(w), tape.constant(b)).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t xo = 0; xo < 5; ++xo)
          EXPECT_NEAR(out[((n * 4 + f) * 6 + y) * 5 + xo], naive_conv_at(x, w, b, n, f, y, xo), 1e-12);
}

TEST(Conv2d, ChannelMismatchRejected) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{1, 2, 4, 4}));
  Var w = tape.constant(Tensor(Shape{1, 3, 3, 3}));
  Var b = tape.constant(Tensor(Shape{1}));
  EXPECT_THROW(conv2d(x, w, b), ShapeError);
}

TEST(Conv2d, SumGradientWrtWeight) {
  std::mt19937_64 rng(3);
  const Tensor x = uniform_tensor(Shape{2, 2, 5, 5}, rng);
  std::vector<Tensor> leaves{uniform_tensor(Shape{3, 2, 3, 3}, rng), uniform_tensor(Shape{3}, rng)};
  auto r = gradcheck(leaves, [&](Tape& t, const std::vector<Var>& v) {
    return sum(conv2d(t.constant(x), v[0], v[1]));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Conv2d, GradientAllInputs) {
  std::mt19937_64 rng(4);
  std::vector<Tensor> leaves{uniform_tensor(Shape{2, 2, 4, 5}, rng),
                             uniform_tensor(Shape{3, 2, 3, 3}, rng), uniform_tensor(Shape{3}, rng)};
  const auto proj = uniform_vector(2 * 3 * 4 * 5, rng);
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) {
    return dot_const(conv2d(v[0], v[1], v[2]), proj);
  });
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  Tape tape;
  BatchNormState st(2);
  Tensor x(Shape{2, 2, 3, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (i / 9) % 2 == 0 ? 3.0 : -7.0;
  Var out = batchnorm2d(tape.constant(x), tape.constant(Tensor(Shape{2}, 2.0)),
                        tape.constant(Tensor(Shape{2}, std::vector<double>{0.5, -0.25})), st,
                        Mode::train);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(out.value()[i], (i / 9) % 2 == 0 ? 0.5 : -0.25);
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
  std::mt19937_64 rng(5);
  Tensor x = uniform_tensor(Shape{4, 1, 5, 5}, rng);
  double m = 0.0, v = 0.0;
  for (double a : x.data()) m += a;
  m /= static_cast<double>(x.size());
  for (double a : x.data()) v += (a - m) * (a - m);
  v /= static_cast<double>(x.size());
  for (double& a : x.data()) a = (a - m) / std::sqrt(v);
  Tape tape;
  BatchNormState st(1);
  Var out = batchnorm2d(tape.constant(x), tape.constant(Tensor(Shape{1}, 1.0)),
                        tape.constant(Tensor(Shape{1}, 0.0)), st, Mode::train);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out.value()[i], x[i], 1e-4);
}

TEST(BatchNorm, RunningStatsUpdate) {
  Tensor x(Shape{2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  Tape tape;
  BatchNormState st(1);
  batchnorm2d(tape.constant(x), tape.constant(Tensor(Shape{1}, 1.0)),
              tape.constant(Tensor(Shape{1}, 0.0)), st, Mode::train);
  EXPECT_NEAR(st.running_mean[0], 0.1 * 2.5, 1e-15);
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-15);
}

TEST(BatchNorm, EvalUsesInitialStatsAndIsPure) {
  std::mt19937_64 rng(6);
  const Tensor x = uniform_tensor(Shape{2, 2, 2, 2}, rng);
  BatchNormState st(2);
  auto run = [&]() {
    Tape tape;
    return batchnorm2d(tape.constant(x), tape.constant(Tensor(Shape{2}, 1.0)),
                       tape.constant(Tensor(Shape{2}, 0.0)), st, Mode::eval)
        .value();
  };
  const Tensor a = run();
  const Tensor b = run();
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(a[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_EQ(st.running_mean[0], 0.0);
  EXPECT_EQ(st.running_var[1], 1.0);
}

TEST(BatchNorm, TrainGradient) {
  std::mt19937_64 rng(7);
  std::vector<Tensor> leaves{uniform_tensor(Shape{2, 3, 4, 4}, rng), uniform_tensor(Shape{3}, rng, 0.5, 1.5),
                             uniform_tensor(Shape{3}, rng)};
  const auto proj = uniform_vector(2 * 3 * 4 * 4, rng);
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) {
    BatchNormState st(3);
    return dot_const(batchnorm2d(v[0], v[1], v[2], st, Mode::train), proj);
  });
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(BatchNorm, EvalGradient) {
  std::mt19937_64 rng(8);
  std::vector<Tensor> leaves{uniform_tensor(Shape{2, 3, 2, 2}, rng), uniform_tensor(Shape{3}, rng),
                             uniform_tensor(Shape{3}, rng)};
  const auto proj = uniform_vector(24, rng);
  BatchNormState st(3);
  st.running_mean = uniform_tensor(Shape{3}, rng);
  st.running_var = uniform_tensor(Shape{3}, rng, 0.5, 2.0);
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) {
    return dot_const(batchnorm2d(v[0], v[1], v[2], st, Mode::eval), proj);
  });
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(BatchNorm, TrainNeedsTwoValues) {
  Tape tape;
  BatchNormState st(1);
  EXPECT_THROW(batchnorm2d(tape.constant(Tensor(Shape{1, 1, 1, 1})), tape.constant(Tensor(Shape{1}, 1.0)),
                           tape.constant(Tensor(Shape{1})), st, Mode::train),
               ShapeError);
}

TEST(Relu, ValuesAndSubgradient) {
  Tensor x(Shape{4}, std::vector<double>{-2.0, 0.0, 0.5, 3.0});
  Tape tape;
  Var y = relu(tape.parameter(x));
  EXPECT_EQ(y.value().values(), (std::vector<double>{0.0, 0.0, 0.5, 3.0}));
  tape.backward(sum(y));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 0, 1, 1}));
}

TEST(Relu, Gradient) {
  std::mt19937_64 rng(9);
  std::vector<Tensor> leaves{uniform_tensor(Shape{3, 5}, rng)};
  const auto proj = uniform_vector(15, rng);
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) { return dot_const(relu(v[0]), proj); });
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(MaxPool, PicksMaxAndRoutesGradient) {
  Tensor x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tape tape;
  Var y = maxpool2x2(tape.parameter(x));
  ASSERT_EQ(y.value().size(), 1u);
  EXPECT_EQ(y.value()[0], 4.0);
  tape.backward(sum(y));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 0, 0, 1}));
}

TEST(MaxPool, TiesGoToFirstIndex) {
  Tensor x(Shape{1, 1, 2, 2}, 5.0);
  Tape tape;
  tape.backward(sum(maxpool2x2(tape.parameter(x))));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPool, FloorTruncation) {
  Tape tape;
  EXPECT_EQ(maxpool2x2(tape.constant(Tensor(Shape{1, 2, 21, 21}))).value().shape(), (Shape{1, 2, 10, 10}));
  EXPECT_EQ(maxpool2x2(tape.constant(Tensor(Shape{1, 1, 7, 7}))).value().shape(), (Shape{1, 1, 3, 3}));
  EXPECT_THROW(maxpool2x2(tape.constant(Tensor(Shape{1, 1, 1, 4}))), ShapeError);
}

TEST(MaxPool, Gradient) {
  std::mt19937_64 rng(10);
  std::vector<Tensor> leaves{uniform_tensor(Shape{2, 2, 5, 4}, rng)};
  const auto proj = uniform_vector(2 * 2 * 2 * 2, rng);
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) { return dot_const(maxpool2x2(v[0]), proj); });
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Flatten, Shape576) {
  Tape tape;
  EXPECT_EQ(flatten(tape.constant(Tensor(Shape{2, 64, 3, 3}))).value().shape(), (Shape{2, 576}));
}

TEST(Linear, ValuesAndGradient) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{1, 2}, std::vector<double>{1, 2}));
  Var w = tape.constant(Tensor(Shape{2, 2}, std::vector<double>{1, 0, 1, 1}));
  Var b = tape.constant(Tensor(Shape{2}, std::vector<double>{0.5, -1}));
  EXPECT_EQ(linear(x, w, b).value().values(), (std::vector<double>{1.5, 2.0}));

  std::mt19937_64 rng(11);
  std::vector<Tensor> leaves{uniform_tensor(Shape{3, 4}, rng), uniform_tensor(Shape{2, 4}, rng),
                             uniform_tensor(Shape{2}, rng)};
  const auto proj = uniform_vector(6, rng);
  auto r = gradcheck(leaves, [&](Tape&, const std::vector<Var>& v) {
    return dot_const(linear(flatten(v[0]), v[1], v[2]), proj);
  });
  EXPECT_LT(r.max_rel_error, 1e-5);
}
