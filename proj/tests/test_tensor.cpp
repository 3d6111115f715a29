#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "fqa/tensor.hpp"
#include "gradcheck.hpp"

using namespace fqa;
using fqa::testing::check_gradients;
using fqa::testing::probe_sum;
using fqa::testing::random_parameter;

namespace {

constexpr double kTol = 1e-5;

std::vector<double> grad_of_loss(const Tensor& leaf, const std::function<Tensor()>& f) {
  Tensor x = leaf;
  x.zero_grad();
  Tape tape;
  tape.backward(f());
  return x.grad();
}

}  // namespace

TEST(Matmul, IdentityAndArithmetic) {
  const Tensor I = Tensor::constant({2, 2}, {1, 0, 0, 1});
  const Tensor B = Tensor::constant({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(matmul(I, B).values(), (std::vector<double>{5, 6, 7, 8}));
  EXPECT_EQ(matmul(Tensor::constant({1, 2}, {1, 2}), Tensor::constant({2, 1}, {3, 4})).values(),
            (std::vector<double>{11}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  std::mt19937_64 rng(1);
  Tensor A = random_parameter({3, 4}, rng), B = random_parameter({4, 2}, rng);
  const auto g = grad_of_loss(A, [&] { return sum(matmul(A, B)); });
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(g[i * 4 + k], B[k * 2] + B[k * 2 + 1], 1e-12);
  EXPECT_LT(check_gradients({A, B}, [&] { return sum(matmul(A, B)); }).worst, kTol);
}

TEST(Elementwise, Values) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_EQ(relu(Tensor::scalar(-3.0)).item(), 0.0);
  Tensor x = Tensor::parameter({1}, {-3.0});
  EXPECT_EQ(grad_of_loss(x, [&] { return sum(relu(x)); })[0], 0.0);
  EXPECT_NEAR(softplus(Tensor::scalar(800.0)).item(), 800.0, 1e-12);
  EXPECT_NEAR(softplus(Tensor::scalar(0.0)).item(), std::log(2.0), 1e-15);
}

TEST(Elementwise, TanhGradientAtPointSeven) {
  Tensor x = Tensor::parameter({1}, {0.7});
  const double g = grad_of_loss(x, [&] { return sum(tanh(x)); })[0];
  const double h = 1e-6;
  const double fd = (std::tanh(0.7 + h) - std::tanh(0.7 - h)) / (2 * h);
  EXPECT_LT(std::abs(g - fd) / std::abs(fd), 1e-6);
}

TEST(Elementwise, IncompatibleShapesThrow) {
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
  EXPECT_THROW(mul(Tensor::zeros({3}), Tensor::zeros({2, 3})), DimensionError);
  EXPECT_NO_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3})));
}

// Every differentiable op on random inputs in [-2, 2].
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()) + 10);
  Tensor a = random_parameter({3, 4}, rng), b = random_parameter({3, 4}, rng), r = random_parameter({4}, rng);
  Tensor w = random_parameter({4, 5}, rng), bias = random_parameter({5}, rng);
  Tensor k = random_parameter({3, 2, 4}, rng), q = random_parameter({3, 2, 4}, rng);
  Tensor s = random_parameter({3}, rng);
  Tensor c = random_parameter({3, 2}, rng);
  struct Case {
    const char* name;
    std::vector<Tensor> leaves;
    std::function<Tensor()> f;
  };
  const std::vector<Case> cases = {
      {"add", {a, b}, [&] { return probe_sum(add(a, b)); }},
      {"add_broadcast", {a, r}, [&] { return probe_sum(add(a, r)); }},
      {"sub", {a, b}, [&] { return probe_sum(sub(a, b)); }},
      {"sub_broadcast", {a, r}, [&] { return probe_sum(sub(a, r)); }},
      {"mul", {a, b}, [&] { return probe_sum(mul(a, b)); }},
      {"mul_broadcast", {a, r}, [&] { return probe_sum(mul(a, r)); }},
      {"scale", {a}, [&] { return probe_sum(scale(a, -1.7)); }},
      {"sigmoid", {a}, [&] { return probe_sum(sigmoid(a)); }},
      {"tanh", {a}, [&] { return probe_sum(tanh(a)); }},
      {"softplus", {a}, [&] { return probe_sum(softplus(a)); }},
      {"relu", {a}, [&] { return probe_sum(relu(a)); }},
      {"clamp", {a}, [&] { return probe_sum(clamp(a, -1.0, 1.0)); }},
      {"one_minus", {a}, [&] { return probe_sum(one_minus(a)); }},
      {"mul_rows", {a, s}, [&] { return probe_sum(mul_rows(a, s)); }},
      {"matmul", {a, w}, [&] { return probe_sum(matmul(a, w)); }},
      {"affine", {a, w, bias}, [&] { return probe_sum(affine(a, w, bias)); }},
      {"rowwise_dot", {k, q}, [&] { return probe_sum(rowwise_dot(k, q)); }},
      {"reshape", {a}, [&] { return probe_sum(reshape(a, {4, 3})); }},
      {"concat0", {a, b}, [&] { return probe_sum(concat({a, b}, 0)); }},
      {"concat1", {a, c}, [&] { return probe_sum(concat({a, c}, 1)); }},
      {"slice_last", {a}, [&] { return probe_sum(slice_last(a, 1, 3)); }},
      {"gather_rows", {a}, [&] { return probe_sum(gather_rows(a, {2, 0, 2, 1})); }},
      {"unit_rows", {a}, [&] { return probe_sum(unit_rows(a)); }},
      {"maxpool_set", {a}, [&] { return probe_sum(maxpool_set(a)); }},
      {"segment_max", {a}, [&] { return probe_sum(segment_max(a, {1, 0, 1}, 3)); }},
      {"sum", {a}, [&] { return sum(a); }},
      {"mean", {a}, [&] { return mean(a); }},
      {"mse", {a, b}, [&] { return mse(a, b); }},
  };
  for (const auto& cs : cases) {
    const auto res = check_gradients(cs.leaves, cs.f);
    EXPECT_LT(res.worst, kTol) << cs.name << " at " << res.where;
  }
}

INSTANTIATE_TEST_SUITE_P(RandomInputs, OpGradient, ::testing::Range(0, 5));

TEST(RowwiseDot, Examples) {
  const Tensor K = Tensor::constant({1, 2, 2}, {1, 2, 3, 4});
  const Tensor Q = Tensor::constant({1, 2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(rowwise_dot(K, Q).values(), (std::vector<double>{1, 4}));
  EXPECT_EQ(rowwise_dot(K, Tensor::zeros({1, 2, 2})).values(), (std::vector<double>{0, 0}));
  EXPECT_THROW(rowwise_dot(K, Tensor::zeros({1, 4})), DimensionError);
}

TEST(RowwiseDot, AdjointWrtKIsQ) {
  std::mt19937_64 rng(3);
  Tensor K = random_parameter({2, 3, 4}, rng), Q = random_parameter({2, 3, 4}, rng);
  const auto g = grad_of_loss(K, [&] { return sum(rowwise_dot(K, Q)); });
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(g[i], Q[i]);
}

TEST(Concat, Examples) {
  EXPECT_EQ(concat({Tensor::constant({2}, {1, 2}), Tensor::constant({1}, {3})}, 0).values(),
            (std::vector<double>{1, 2, 3}));
  const Tensor x = Tensor::constant({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(concat({x}, 1).values(), x.values());
  EXPECT_THROW(concat({Tensor::zeros({2, 2}), Tensor::zeros({3, 2})}, 1), DimensionError);
}

TEST(Maxpool, Examples) {
  EXPECT_EQ(maxpool_set(Tensor::constant({2, 2}, {1, 5, 3, 2})).values(), (std::vector<double>{3, 5}));
  EXPECT_EQ(maxpool_set(Tensor::constant({1, 3}, {4, -1, 2})).values(), (std::vector<double>{4, -1, 2}));
  EXPECT_THROW(maxpool_set(Tensor::zeros({0, 2})), EmptySetError);
}

TEST(Maxpool, TiesRouteToFirstRow) {
  Tensor x = Tensor::parameter({2, 2}, {2, 2, 2, 0});
  const auto g = grad_of_loss(x, [&] { return sum(maxpool_set(x)); });
  EXPECT_EQ(g, (std::vector<double>{1, 1, 0, 0}));
}

TEST(Maxpool, PermutationInvariantForward) {
  std::mt19937_64 rng(5);
  const Tensor x = random_parameter({6, 3}, rng);
  std::vector<std::size_t> perm{3, 1, 5, 0, 4, 2};
  EXPECT_EQ(maxpool_set(x).values(), maxpool_set(gather_rows(x, perm)).values());
}

TEST(SegmentMax, EmptySegmentIsZero) {
  const Tensor x = Tensor::constant({2, 2}, {1, -5, 3, -2});
  EXPECT_EQ(segment_max(x, {0, 0}, 2).values(), (std::vector<double>{3, -2, 0, 0}));
}

TEST(UnitRows, DegenerateRowIsZero) {
  Tensor x = Tensor::parameter({2, 2}, {3, 4, 0, 0});
  const Tensor u = unit_rows(x);
  EXPECT_EQ(u.values(), (std::vector<double>{0.6, 0.8, 0, 0}));
  const auto g = grad_of_loss(x, [&] { return probe_sum(unit_rows(x)); });
  EXPECT_EQ(g[2], 0.0);
  EXPECT_EQ(g[3], 0.0);
}

TEST(Detach, ForwardIdentityNoGradient) {
  Tensor x = Tensor::parameter({3}, {1, 2, 3});
  EXPECT_EQ(detach(x).values(), (std::vector<double>{1, 2, 3}));
  EXPECT_FALSE(detach(x).requires_grad());
  EXPECT_EQ(grad_of_loss(x, [&] { return sum(detach(x)); }), (std::vector<double>{0, 0, 0}));
}

TEST(Detach, OnlyUndetachedFactorContributes) {
  Tensor x = Tensor::parameter({3}, {1.5, -2, 0.25});
  EXPECT_EQ(grad_of_loss(x, [&] { return sum(mul(detach(x), x)); }), x.values());
  // Oracle: with the detached factor held fixed at c, d/dx sum(c * x) = c.
  const Tensor c = Tensor::constant({3}, x.values());
  EXPECT_LT(check_gradients({x}, [&] { return sum(mul(c, x)); }).worst, kTol);
}

TEST(Detach, NeverChangesForwardValues) {
  std::mt19937_64 rng(8);
  Tensor x = random_parameter({3, 4}, rng), w = random_parameter({4, 2}, rng);
  auto graph = [&](bool d) { return tanh(matmul(d ? detach(x) : x, w)).values(); };
  EXPECT_EQ(graph(false), graph(true));
}

TEST(Backward, Examples) {
  Tensor x = Tensor::parameter({1}, {3.0});
  EXPECT_EQ(grad_of_loss(x, [&] { return sum(mul(x, x)); })[0], 6.0);
  Tensor y = Tensor::parameter({4}, {1, -2, 3, 0.5});
  EXPECT_EQ(grad_of_loss(y, [&] { return mse(y, y); }), (std::vector<double>(4, 0.0)));
}

TEST(Backward, NonScalarLossIsRankError) {
  Tensor x = Tensor::parameter({2}, {1, 2});
  Tape tape;
  EXPECT_THROW(tape.backward(scale(x, 2.0)), RankError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = Tensor::parameter({1}, {3.0});
  x.zero_grad();
  Tape tape;
  const Tensor loss = sum(mul(x, x));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Backward, RandomCompositeGraph) {
  std::mt19937_64 rng(21);
  Tensor x = random_parameter({4, 3}, rng), w = random_parameter({3, 3}, rng), b = random_parameter({3}, rng);
  Tensor v = random_parameter({3}, rng);
  auto f = [&] { return mean(mul(sigmoid(affine(tanh(x), w, b)), v)); };
  EXPECT_LT(check_gradients({x, w, b, v}, f).worst, kTol);
}

TEST(Backward, IsLinearInTheLoss) {
  std::mt19937_64 rng(22);
  Tensor x = random_parameter({3, 3}, rng);
  auto l1 = [&] { return sum(tanh(x)); };
  auto l2 = [&] { return mean(mul(x, x)); };
  const auto g1 = grad_of_loss(x, l1), g2 = grad_of_loss(x, l2);
  const auto g = grad_of_loss(x, [&] { return add(scale(l1(), 2.5), scale(l2(), -0.5)); });
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], 2.5 * g1[i] - 0.5 * g2[i], 1e-12);
}

TEST(Tape, ForwardOnlyWithoutTape) {
  Tensor x = Tensor::parameter({2}, {1, 2});
  const Tensor y = mul(x, x);
  EXPECT_EQ(y.values(), (std::vector<double>{1, 4}));
  EXPECT_TRUE(y.node().inputs.empty());
}

TEST(Tape, NodesInTopologicalOrder) {
  Tensor x = Tensor::parameter({2}, {1, 2});
  Tape tape;
  const Tensor y = tanh(mul(x, x));
  const Tensor z = sum(add(y, x));
  for (const auto* t : {&y, &z})
    for (const auto& in : t->node().inputs)
      if (!in->is_leaf) {
        EXPECT_LT(in->tape_index, t->node().tape_index);
      }
}
