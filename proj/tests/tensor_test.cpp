// SPDX-License-Identifier: Apache-2.0

#include "hgrn/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

namespace hgrn {
namespace {

using testing::gradient_check;
using testing::relative_error;

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(matmul(eye, b).to_vector(), b.to_vector());
}

TEST(Matmul, HandArithmetic) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 1}, {1, 1});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.to_vector(), (std::vector<double>{3, 7}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4, 5]"), std::string::npos);
  }
}

TEST(Matmul, MatchesNaiveOracleBatchedAndShared) {
  Rng rng(3);
  const Tensor a = randn({3, 4, 5}, rng);
  const Tensor b = randn({3, 5, 2}, rng);
  const Tensor shared = randn({5, 2}, rng);
  const Tensor left = randn({4, 5}, rng);
  const Tensor batched = matmul(a, b);
  const Tensor by_shared = matmul(a, shared);
  const Tensor left_shared = matmul(left, b);
  for (int t = 0; t < 3; ++t) {
    const auto ab = a.data().subspan(static_cast<std::size_t>(t * 20), 20);
    const auto bb = b.data().subspan(static_cast<std::size_t>(t * 10), 10);
    const auto expect = testing::naive_matmul(ab, bb, 4, 5, 2);
    const auto expect_shared = testing::naive_matmul(ab, shared.data(), 4, 5, 2);
    const auto expect_left = testing::naive_matmul(left.data(), bb, 4, 5, 2);
    for (int k = 0; k < 8; ++k) {
      EXPECT_NEAR(batched.data()[static_cast<std::size_t>(t * 8 + k)], expect[static_cast<std::size_t>(k)], 1e-12);
      EXPECT_NEAR(by_shared.data()[static_cast<std::size_t>(t * 8 + k)], expect_shared[static_cast<std::size_t>(k)], 1e-12);
      EXPECT_NEAR(left_shared.data()[static_cast<std::size_t>(t * 8 + k)], expect_left[static_cast<std::size_t>(k)], 1e-12);
    }
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor a = uniform({5, 7}, rng, -2, 2, true);
  Tensor b = uniform({7, 3}, rng, -2, 2, true);
  EXPECT_LT(gradient_check({&a, &b}, [&] { return sum(matmul(a, b)); }), 1e-7);
}

TEST(Matmul, BatchedAndSharedGradients) {
  Rng rng(12);
  Tensor a = uniform({2, 3, 4}, rng, -2, 2, true);
  Tensor b = uniform({2, 4, 3}, rng, -2, 2, true);
  Tensor w = uniform({4, 2}, rng, -2, 2, true);
  Tensor left = uniform({3, 3}, rng, -2, 2, true);
  const Tensor weights = uniform({2, 3, 3}, rng, -1, 1);
  EXPECT_LT(gradient_check({&a, &b, &w, &left},
                           [&] { return sum(matmul(left, matmul(a, b)) * weights) + sum(matmul(a, w) * matmul(a, w)); }),
            1e-7);
}

TEST(Elementwise, IdentitiesAndHandValues) {
  Rng rng(1);
  const Tensor x = randn({3, 4}, rng);
  EXPECT_EQ(mul(x, Tensor::full({3, 4}, 1.0)).to_vector(), x.to_vector());
  const Tensor s = add(Tensor::from({2}, {1, 2}), Tensor::from({2}, {3, 4}));
  EXPECT_EQ(s.to_vector(), (std::vector<double>{4, 6}));
}

TEST(Elementwise, LeadingOneBroadcastOnly) {
  const Tensor big = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(add(big, Tensor::zeros({4})).shape(), (Shape{2, 3, 4}));
  EXPECT_EQ(add(Tensor::zeros({1, 3, 4}), big).shape(), (Shape{2, 3, 4}));
  EXPECT_EQ(add(big, Tensor::scalar(1.0)).shape(), (Shape{2, 3, 4}));
  EXPECT_THROW(add(big, Tensor::zeros({3, 1})), ShapeError);
  EXPECT_THROW(add(big, Tensor::zeros({2, 1, 4})), ShapeError);
}

TEST(Elementwise, DivisionByTinyValueIsDegenerate) {
  EXPECT_THROW(div(Tensor::from({2}, {1, 1}), Tensor::from({2}, {1, 1e-301})), DomainError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  Tensor a = uniform({3, 4}, rng, -2, 2, true);
  Tensor b = uniform({3, 4}, rng, -2, 2, true);
  Tensor row = uniform({4}, rng, -2, 2, true);
  Tensor denom = uniform({3, 4}, rng, 0.5, 2, true);
  EXPECT_LT(gradient_check({&a, &b}, [&] { return sum(mul(a, b)); }), 1e-7);
  EXPECT_LT(gradient_check({&a, &row, &denom}, [&] { return sum((a - row) / denom + row * a); }), 1e-7);
}

TEST(Activation, PointValues) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_NEAR(silu(Tensor::scalar(1.0)).item(), 0.7310585786300049, 1e-15);
  const Tensor col = softmax_dim0(Tensor::full({5, 1}, 3.0));
  for (double v : col.data()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Activation, SoftmaxColumnsSumToOne) {
  Rng rng(9);
  const Tensor s = softmax_dim0(uniform({6, 5}, rng, -30, 30));
  for (int c = 0; c < 5; ++c) {
    double total = 0.0;
    for (int r = 0; r < 6; ++r) total += s.at({r, c});
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Activation, LogRejectsNonPositive) {
  EXPECT_THROW(log(Tensor::from({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor::from({1}, {-3.0})), DomainError);
}

TEST(Activation, GradientsMatchFiniteDifferences) {
  Rng rng(21);
  Tensor x = uniform({4, 3}, rng, -2, 2, true);
  Tensor pos = uniform({4, 3}, rng, 0.2, 2, true);
  const Tensor w = uniform({4, 3}, rng, -1, 1);
  EXPECT_LT(gradient_check({&x}, [&] { return sum(sigmoid(x) * w); }), 1e-7);
  EXPECT_LT(gradient_check({&x}, [&] { return sum(silu(x) * w); }), 1e-7);
  EXPECT_LT(gradient_check({&x}, [&] { return sum(softmax_dim0(x) * w); }), 1e-7);
  EXPECT_LT(gradient_check({&x}, [&] { return sum(exp(x) * w); }), 1e-7);
  EXPECT_LT(gradient_check({&pos}, [&] { return sum(log(pos) * w); }), 1e-7);
}

TEST(Cumsum, HandValuesAndIdentity) {
  EXPECT_EQ(cumsum_dim0(Tensor::from({3}, {1, 1, 1})).to_vector(), (std::vector<double>{1, 2, 3}));
  const Tensor row = Tensor::from({1, 3}, {4, 5, 6});
  EXPECT_EQ(cumsum_dim0(row).to_vector(), row.to_vector());
  EXPECT_THROW(cumsum_dim0(Tensor::scalar(1.0)), ShapeError);
}

TEST(Cumsum, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  Tensor x = uniform({5, 3}, rng, -2, 2, true);
  const Tensor w = uniform({5, 3}, rng, -1, 1);
  EXPECT_LT(gradient_check({&x}, [&] { return sum(cumsum_dim0(x) * w); }), 1e-7);
}

TEST(Outer, HandValuesZeroCaseAndRankCheck) {
  EXPECT_EQ(outer(Tensor::from({2}, {1, 2}), Tensor::from({2}, {1, 1})).to_vector(),
            (std::vector<double>{1, 1, 2, 2}));
  const Tensor z = outer(Tensor::from({2}, {3, 4}), Tensor::zeros({3}));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(outer(Tensor::zeros({2, 1}), Tensor::zeros({2})), ShapeError);
}

TEST(Outer, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  Tensor u = uniform({5}, rng, -2, 2, true);
  Tensor v = uniform({3}, rng, -2, 2, true);
  const Tensor w = uniform({5, 3}, rng, -1, 1);
  EXPECT_LT(gradient_check({&u, &v}, [&] { return sum(outer(u, v) * w); }), 1e-7);
}

TEST(ShapeOps, GradientsMatchFiniteDifferences) {
  Rng rng(13);
  Tensor x = uniform({2, 3, 4}, rng, -2, 2, true);
  Tensor y = uniform({2, 1, 4}, rng, -2, 2, true);
  const Tensor w = uniform({4, 2, 3}, rng, -1, 1);
  EXPECT_LT(gradient_check({&x}, [&] { return sum(permute(x, {2, 0, 1}) * w); }), 1e-7);
  EXPECT_LT(gradient_check({&x}, [&] { return sum(index_select(x, 1, {2, 0, 2}) * index_select(x, 1, {1, 1, 0})); }),
            1e-7);
  EXPECT_LT(gradient_check({&x, &y}, [&] { return sum(concat({x, y, x}, 1) * concat({y, x, x}, 1)); }), 1e-7);
  EXPECT_LT(gradient_check({&x}, [&] { return sum(sum_dim(x, 1) * sum_dim(x, 1)); }), 1e-7);
  EXPECT_LT(gradient_check({&x}, [&] { return sum(transpose(reshape(x, {6, 4})) * reshape(w, {4, 6})); }), 1e-7);
}

TEST(ShapeOps, PermuteMovesElements) {
  const Tensor x = Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(permute(x, {1, 0}).to_vector(), (std::vector<double>{0, 3, 1, 4, 2, 5}));
  EXPECT_THROW(permute(x, {0, 0}), ShapeError);
  EXPECT_THROW(index_select(x, 1, {3}), ShapeError);
  EXPECT_THROW(reshape(x, {4}), ShapeError);
}

TEST(Backward, SumAndSquare) {
  Rng rng(2);
  Tensor x = randn({3, 2}, rng, 1.0, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  x.zero_grad();
  backward(sum(mul(x, x)));
  for (std::size_t k = 0; k < 6; ++k) EXPECT_DOUBLE_EQ(x.grad()[k], 2.0 * x.data()[k]);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::zeros({2}, true);
  EXPECT_THROW(backward(x * 2.0), ShapeError);
}

TEST(Backward, UnreachableTensorsKeepZeroGradient) {
  Tensor x = Tensor::full({2}, 1.0, true);
  Tensor unused = Tensor::full({2}, 1.0, true);
  backward(sum(x * x));
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SecondCallAccumulatesExactlyTwice) {
  Rng rng(17);
  Tensor x = uniform({4, 3}, rng, -2, 2, true);
  Tensor w = uniform({3, 2}, rng, -2, 2, true);
  const Tensor loss = sum(sigmoid(matmul(x, w)) * exp(matmul(x, w)));
  backward(loss);
  const std::vector<double> once(x.grad().begin(), x.grad().end());
  backward(loss);
  for (std::size_t k = 0; k < once.size(); ++k) EXPECT_EQ(x.grad()[k], 2.0 * once[k]);
}

TEST(Backward, SharedSubexpressionSumsContributions) {
  Tensor x = Tensor::from({1}, {3.0}, true);
  const Tensor y = x * x;
  backward(sum(y + y * x));  // d/dx (x^2 + x^3) = 2x + 3x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0 + 27.0);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::full({2}, 1.0, true);
  NoGradGuard guard;
  const Tensor y = x * 2.0;
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, LongChainsReleaseWithoutRecursion) {
  Tensor x = Tensor::full({1}, 1.0, true);
  Tensor h = x;
  for (int t = 0; t < 200000; ++t) h = h * 1.0;
  backward(sum(h));
  EXPECT_EQ(x.grad()[0], 1.0);
}

}  // namespace
}  // namespace hgrn
