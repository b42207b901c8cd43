#include <gtest/gtest.h>

#include <cmath>

#include "xmb/attack.hpp"
#include "xmb/fd_check.hpp"
#include "xmb/rng.hpp"
#include "xmb/tape.hpp"

using namespace xmb;

namespace {

Mat random_mat(std::uint64_t seed, std::size_t r, std::size_t c) {
  Rng rng(seed);
  Mat m(r, c);
  for (auto& v : m.data) v = normal(rng);
  return m;
}

}  // namespace

TEST(Mat, RejectsWrongDataLength) { EXPECT_THROW(Mat(2, 2, std::vector<double>{1, 2, 3}), DimensionError); }

TEST(Forward, CosineSelfIsOne) {
  Tape t;
  Var v = t.constant(Mat::row({0.3, -2.0, 5.5}));
  EXPECT_NEAR(cosine(v, v).value()[0], 1.0, 1e-15);
}

TEST(Forward, SqnormDiffSelfIsZero) {
  Tape t;
  Var v = t.constant(Mat::row({0.3, -2.0, 5.5}));
  EXPECT_EQ(sqnorm_diff(v, v).value()[0], 0.0);
}

TEST(Forward, SoftmaxXentUniformPair) {
  Tape t;
  Var logits = t.constant(Mat::row({0.0, 0.0}));
  EXPECT_NEAR(softmax_xent(logits, {0}).value()[0], std::log(2.0), 1e-15);
}

TEST(Forward, AffineMatchesHandComputation) {
  Tape t;
  Var x = t.constant(Mat::row({1.0, 2.0}));
  Var w = t.constant(Mat(2, 2, std::vector<double>{1, 0, 3, -1}));  // out × in
  Var b = t.constant(Mat::row({0.5, 0.25}));
  const Mat y = affine(x, w, b).value();
  EXPECT_DOUBLE_EQ(y[0], 1.5);
  EXPECT_DOUBLE_EQ(y[1], 1.25);
}

TEST(Forward, ConcatJoinsColumns) {
  Tape t;
  const Mat y = concat(t.constant(Mat::row({1, 2})), t.constant(Mat::row({3}))).value();
  ASSERT_EQ(y.cols, 3u);
  EXPECT_EQ(y[2], 3.0);
}

TEST(Forward, ShapeMismatchIsDimensionError) {
  Tape t;
  EXPECT_THROW(add(t.constant(Mat(1, 3)), t.constant(Mat(2, 2))), DimensionError);
}

TEST(Forward, NonFiniteInputIsNumericError) {
  Tape t;
  EXPECT_THROW(tanh(t.constant(Mat::row({NAN}))), NumericError);
}

TEST(Backward, SquareGradient) {
  Tape t;
  Var x = t.leaf(Mat::row({3.0}));
  Var loss = sum(sqnorm_diff(x, t.constant(Mat::row({0.0}))));
  t.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, CosineGradientVanishesWhenAligned) {
  Tape t;
  const Mat c = Mat::row({1.0, -2.0, 0.5});
  Var x = t.leaf(c);
  t.backward(sum(cosine(x, t.constant(c))));
  for (double g : x.grad().data) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, UnreferencedLeafHasZeroGrad) {
  Tape t;
  Var used = t.leaf(Mat::row({1.0, 2.0}));
  Var unused = t.leaf(Mat::row({4.0, 5.0}));
  t.backward(sum(tanh(used)));
  for (double g : unused.grad().data) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape t;
  Var x = t.leaf(Mat::row({1.0, 2.0}));
  EXPECT_THROW(t.backward(tanh(x)), ContractError);
}

TEST(Backward, IsLinearInTheLoss) {
  const Mat x0 = random_mat(3, 2, 5);
  const Mat c = random_mat(4, 1, 5);
  auto grad_of = [&](double a, double b) {
    Tape t;
    Var x = t.leaf(x0);
    Var f = sum(activation_loss_rows(x, t.constant(c), 1.0, 0.1));
    Var g = sum(tanh(x));
    t.backward(add(scale(f, a), scale(g, b)));
    return x.grad();
  };
  const Mat gf = grad_of(1.0, 0.0), gg = grad_of(0.0, 1.0), gc = grad_of(2.5, -0.75);
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], 2.5 * gf[i] - 0.75 * gg[i], 1e-12);
}

TEST(Backward, RepeatedPassesAreBitIdentical) {
  const Mat x0 = random_mat(5, 3, 4);
  Tape t;
  Var x = t.leaf(x0);
  Var loss = sum(tanh(affine(x, t.constant(random_mat(6, 2, 4)), t.constant(random_mat(7, 1, 2)))));
  t.backward(loss);
  const Mat first = x.grad();
  t.backward(loss);
  EXPECT_EQ(first.data, x.grad().data);
}

TEST(FdCheck, QuadraticIsTight) {
  const Mat c = random_mat(8, 1, 6);
  auto build = [&](Tape& t, Var x) { return sum(sqnorm_diff(x, t.constant(c))); };
  const FdResult r = fd_check(build, random_mat(9, 1, 6), 1e-5, 1e-5);
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.max_rel_err, 1e-8);
}

TEST(FdCheck, ActivationLossOnEightDims) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Mat c = random_mat(100 + s, 1, 8);
    auto build = [&](Tape& t, Var x) { return sum(activation_loss_rows(x, t.constant(c), 1.0, 0.1)); };
    const FdResult r = fd_check(build, random_mat(200 + s, 1, 8), 1e-5, 1e-5);
    EXPECT_TRUE(r.pass) << "seed " << s << " err " << r.max_rel_err;
  }
}

TEST(FdCheck, ConstantLossHasZeroGradients) {
  auto build = [](Tape& t, Var x) { return add(scale(sum(x), 0.0), t.constant(Mat::row({3.0}))); };
  const FdResult r = fd_check(build, random_mat(10, 2, 3), 1e-5, 1e-5);
  EXPECT_TRUE(r.pass);
  for (double v : r.analytic.data) EXPECT_EQ(v, 0.0);
  for (double v : r.numeric.data) EXPECT_EQ(v, 0.0);
}

TEST(FdCheck, ReportsMismatchWithoutThrowing) {
  // A wrong analytic gradient through straight-through on a nonlinear map.
  auto build = [](Tape&, Var x) {
    Mat fwd = x.value();
    for (auto& v : fwd.data) v = v * v * v;
    return sum(straight_through(x, fwd));
  };
  const FdResult r = fd_check(build, Mat::row({1.0, 2.0}), 1e-5, 1e-5);
  EXPECT_FALSE(r.pass);
  EXPECT_GT(r.max_rel_err, 0.1);
}

TEST(Rng, DeriveSeedSeparatesTags) {
  EXPECT_NE(derive_seed(1, "world"), derive_seed(1, "pretrain"));
  EXPECT_EQ(derive_seed(1, "world"), splitmix64(1 ^ fnv1a("world")));
  EXPECT_NE(derive_seed(1, "x", 0), derive_seed(1, "x", 1));
}
