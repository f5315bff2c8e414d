#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "mmfd/grad_check.hpp"
#include "mmfd/ops.hpp"
#include "test_util.hpp"

using namespace mmfd;
using mmfd::testing::random_nonzero;
using mmfd::testing::random_tensor;
using mmfd::testing::to_vec;

namespace {

// Projects any tensor to a scalar with fixed random weights so that no
// gradient is trivially zero (a plain sum of softmax rows would be).
Tensor probe(const Tensor& y, std::uint64_t key) {
  Rng rng(99, {key});
  Tensor w = random_tensor(rng, y.shape());
  return sum(mul(y, w));
}

}  // namespace

TEST(Tensor, ShapeAndValueInvariants) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Matmul, IdentityRightFactor) {
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(to_vec(matmul(a, Tensor::identity(2))), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, HandComputedDot) {
  Tensor c = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  ASSERT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, ZeroFactorGivesZeros) {
  Rng rng(1);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor c = matmul(a, Tensor::zeros({4, 5}));
  EXPECT_EQ(c.shape(), (Shape{3, 5}));
  for (double v : c.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 5}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Matmul, IdentityPropertyWithinTolerance) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(7), n = 1 + rng.below(7);
    Tensor a = random_tensor(rng, {m, n}, false, 100.0);
    Tensor c = matmul(a, Tensor::identity(n));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(c[i], a[i], 1e-12);
  }
}

TEST(Matmul, RegistersNodeOnlyWhenNeeded) {
  Tensor a({2, 2}, 1.0), b({2, 2}, 1.0, true);
  EXPECT_FALSE(matmul(a, a).requires_grad());
  EXPECT_TRUE(matmul(a, b).requires_grad());
  NoGradGuard guard;
  EXPECT_FALSE(matmul(a, b).requires_grad());
}

TEST(Softmax, SymmetricRow) {
  Tensor s = softmax_rows(Tensor::matrix({{0, 0}}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, ClosedFormTwoThirds) {
  Tensor s = softmax_rows(Tensor::matrix({{std::log(2.0), 0}}));
  EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor(rng, {3, 5}, false, 10.0);
    const double c = rng.uniform(-50.0, 50.0);
    Tensor a = softmax_rows(x), b = softmax_rows(add_scalar(x, c));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Softmax, RowsAreProbabilityVectors) {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t m = 1 + rng.below(6), n = 1 + rng.below(9);
    Tensor s = softmax_rows(random_tensor(rng, {m, n}, false, 300.0));
    for (std::size_t i = 0; i < m; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double p = s.at(i, j);
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, NonFiniteInputIsDomainError) {
  EXPECT_THROW(softmax_rows(Tensor::matrix({{0, INFINITY}})), NumericError);
  EXPECT_THROW(softmax_rows(Tensor::matrix({{NAN, 0}})), NumericError);
}

TEST(LayerNorm, ConstantRowMapsToBeta) {
  Tensor y = layer_norm(Tensor::matrix({{1, 1, 1}}), Tensor::ones({3}), Tensor::zeros({3}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, AlreadyStandardisedRow) {
  Tensor y = layer_norm(Tensor::matrix({{1, -1}}), Tensor::ones({2}), Tensor::zeros({2}), 1e-300);
  EXPECT_NEAR(y[0], 1.0, 1e-15);
  EXPECT_NEAR(y[1], -1.0, 1e-15);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  Rng rng(5);
  Tensor beta = random_tensor(rng, {4});
  Tensor y = layer_norm(random_tensor(rng, {3, 4}), Tensor::zeros({4}), beta);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y.at(i, j), beta[j]);
}

TEST(LayerNorm, Errors) {
  EXPECT_THROW(layer_norm(Tensor({2, 3}), Tensor::ones({2}), Tensor::zeros({3})), ShapeError);
  EXPECT_THROW(layer_norm(Tensor({2, 3}), Tensor::ones({3}), Tensor::zeros({3}), 0.0), ContractError);
}

TEST(Conv1d, IdentityKernel) {
  Tensor y = conv1d(Tensor({3, 1}, {1, 2, 3}), Tensor({1, 1, 1}, {1}), 1);
  EXPECT_EQ(to_vec(y), (std::vector<double>{1, 2, 3}));
}

TEST(Conv1d, SlidingSums) {
  Tensor y = conv1d(Tensor({3, 1}, {1, 2, 3}), Tensor({1, 1, 2}, {1, 1}), 1);
  EXPECT_EQ(to_vec(y), (std::vector<double>{3, 5}));
}

TEST(Conv1d, StrideLengthFormula) {
  EXPECT_EQ(conv1d(Tensor({5, 1}), Tensor({1, 1, 1}), 2).dim(0), 3u);
  EXPECT_EQ(conv1d(Tensor({10, 2}), Tensor({3, 2, 4}), 3).shape(), (Shape{3, 3}));
}

TEST(Conv1d, KernelWiderThanInput) {
  EXPECT_THROW(conv1d(Tensor({2, 1}), Tensor({1, 1, 3}), 1), ShapeError);
  EXPECT_THROW(conv1d(Tensor({4, 2}), Tensor({1, 1, 3}), 1), ShapeError);
}

TEST(Conv1d, MatchesDirectLoop) {
  Rng rng(6);
  Tensor x = random_tensor(rng, {9, 3}), k = random_tensor(rng, {4, 3, 3});
  Tensor y = conv1d(x, k, 2);
  ASSERT_EQ(y.shape(), (Shape{4, 4}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t o = 0; o < 4; ++o) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t t = 0; t < 3; ++t) s += x[(2 * i + t) * 3 + c] * k[(o * 3 + c) * 3 + t];
      EXPECT_NEAR(y.at(i, o), s, 1e-12);
    }
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(7);
  Tensor x = random_tensor(rng, {3, 4, 1});
  Tensor y = conv2d(x, Tensor({1, 1, 1, 1}, {1}), 1);
  EXPECT_EQ(to_vec(y), to_vec(x));
}

TEST(Conv2d, TwoByTwoSum) {
  Tensor x({2, 2, 1}, {1, 2, 3, 4});
  Tensor y = conv2d(x, Tensor({1, 1, 2, 2}, 1.0), 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y[0], 10.0);
}

TEST(Conv2d, StrideArithmetic) {
  EXPECT_EQ(conv2d(Tensor({5, 7, 2}), Tensor({3, 2, 1, 1}), 2).shape(), (Shape{3, 4, 3}));
  EXPECT_EQ(conv2d(Tensor({6, 6, 1}), Tensor({2, 1, 3, 3}), 1).shape(), (Shape{4, 4, 2}));
  EXPECT_THROW(conv2d(Tensor({2, 6, 1}), Tensor({1, 1, 3, 3}), 1), ShapeError);
}

TEST(Conv2d, MatchesDirectLoop) {
  Rng rng(8);
  Tensor x = random_tensor(rng, {6, 5, 2}), k = random_tensor(rng, {3, 2, 3, 2});
  Tensor y = conv2d(x, k, 1);
  ASSERT_EQ(y.shape(), (Shape{4, 4, 3}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t o = 0; o < 3; ++o) {
        double s = 0.0;
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t q = 0; q < 2; ++q) s += x[((i + r) * 5 + (j + q)) * 2 + c] * k[((o * 2 + c) * 3 + r) * 2 + q];
        EXPECT_NEAR(y[(i * 4 + j) * 3 + o], s, 1e-12);
      }
}

TEST(Pool, MeanOverWholeAxis) {
  Tensor y = pool1d(Tensor({2, 1}, {2, 4}), PoolKind::mean, 2, 2);
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_EQ(y[0], 3.0);
}

TEST(Pool, MaxWindowOneIsIdentity) {
  Rng rng(9);
  Tensor x = random_tensor(rng, {5, 3});
  EXPECT_EQ(to_vec(pool1d(x, PoolKind::max, 1, 1)), to_vec(x));
  Tensor x2 = random_tensor(rng, {4, 3, 2});
  EXPECT_EQ(to_vec(pool2d(x2, PoolKind::max, 1, 1)), to_vec(x2));
}

TEST(Pool, MeanOfConstant) {
  Tensor y = pool2d(Tensor({4, 6, 2}, 2.5), PoolKind::mean, 2, 2);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 2.5);
}

TEST(Pool, WindowLargerThanInput) {
  EXPECT_THROW(pool1d(Tensor({2, 1}), PoolKind::max, 3, 1), ShapeError);
  EXPECT_THROW(pool2d(Tensor({4, 2, 1}), PoolKind::mean, 3, 1), ShapeError);
}

TEST(Elementwise, ReluAndGelu) {
  EXPECT_EQ(elementwise(Tensor::vector({-1}), Elementwise::relu)[0], 0.0);
  EXPECT_EQ(elementwise(Tensor::vector({2}), Elementwise::relu)[0], 2.0);
  EXPECT_EQ(elementwise(Tensor::vector({0}), Elementwise::gelu)[0], 0.0);
  // x·Φ(x) at x = 1
  EXPECT_NEAR(gelu(Tensor::vector({1}))[0], 0.5 * (1 + std::erf(1 / std::numbers::sqrt2)), 1e-15);
  EXPECT_EQ(elementwise(Tensor::vector({1.5}), Elementwise::add, 2.0)[0], 3.5);
  EXPECT_EQ(elementwise(Tensor::vector({1.5}), Elementwise::mul_scalar, -2.0)[0], -3.0);
}

TEST(Backward, SumGivesOnes) {
  Tensor w({2, 3}, 0.7, true);
  backward(sum(w));
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoW) {
  Tensor w({2}, {1, 2}, true);
  backward(sum(mul(w, w)));
  EXPECT_EQ(to_vec(Tensor({2}, {w.grad()[0], w.grad()[1]})), (std::vector<double>{2, 4}));
}

TEST(Backward, SquareExactOnRandomInputs) {
  Rng rng(10);
  Tensor w = random_tensor(rng, {17}, true, 5.0);
  backward(sum(mul(w, w)));
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_EQ(w.grad()[i], 2.0 * w[i]);
}

TEST(Backward, FanOutAccumulates) {
  Tensor w({3}, 1.0, true);
  backward(add(sum(w), sum(w)));
  for (double g : w.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, LeafGradientsAccumulateAcrossCalls) {
  Tensor w({2}, 1.0, true);
  backward(sum(w));
  backward(sum(w));
  for (double g : w.grad()) EXPECT_EQ(g, 2.0);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST(Backward, NonScalarIsContractError) {
  Tensor w({2}, 1.0, true);
  EXPECT_THROW(backward(scale(w, 2.0)), ContractError);
}

TEST(Backward, TopologicalOrderPutsParentsFirst) {
  Rng rng(11);
  Tensor a = random_tensor(rng, {3, 3}, true);
  Tensor b = matmul(a, a);
  Tensor c = add(b, a);
  Tensor loss = sum(relu(c));
  auto order = topological_order(loss);
  std::map<detail::Node*, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
  for (auto* n : order) {
    for (const auto& p : n->parents) {
      if (p->requires_grad) {
        EXPECT_LT(pos.at(p.get()), pos.at(n));
      }
    }
  }
  EXPECT_EQ(order.back(), loss.node());
}

TEST(GradCheck, LinearFunctionIsExact) {
  Tensor w({1}, {0.3}, true);
  auto r = grad_check([&] { return scale(w, 3.0); }, {w});
  EXPECT_LT(r.max_rel_err, 1e-8);
  EXPECT_EQ(r.checked, 1u);
}

TEST(GradCheck, SquareAtOneMatchesTaylor) {
  Tensor w({1}, {1.0}, true);
  auto r = grad_check([&] { return sum(mul(w, w)); }, {w}, 1e-3);
  // FD of a quadratic is exact up to rounding: (1+e)^2 - (1-e)^2 = 4e
  EXPECT_LT(r.max_abs_err, 1e-9);
  EXPECT_DOUBLE_EQ(w.grad()[0], 2.0);
}

TEST(GradCheck, DetectsNonDeterminism) {
  Tensor w({1}, {1.0}, true);
  int calls = 0;
  auto f = [&] { return scale(w, static_cast<double>(++calls)); };
  EXPECT_THROW(grad_check(f, {w}), OracleInvalidError);
}

TEST(GradCheck, ReportsWorstParameter) {
  Tensor good({2}, {1.0, 2.0}, true), bad({1}, {1.0}, true);
  // a deliberately wrong backward: y = 2·bad but the gradient says 1
  auto f = [&] {
    Tensor y = detail::make_result({1}, {2.0 * bad[0]}, {bad}, [bad](detail::Node& n) {
      detail::pgrad(n, 0)[0] += n.grad[0];
    });
    return add(sum(good), y);
  };
  auto r = grad_check(f, {{"good", good}, {"bad", bad}});
  EXPECT_EQ(r.worst_param, "bad[0]");
  EXPECT_NEAR(r.max_rel_err, 0.5, 1e-6);
  EXPECT_NEAR(r.max_abs_err, 1.0, 1e-6);
}

// Every differentiable op, random small inputs, weighted-sum loss.
TEST(GradCheck, EveryOperation) {
  Rng rng(12);
  struct Case {
    const char* name;
    std::function<Tensor()> f;
    std::vector<Tensor> params;
  };
  std::vector<Case> cases;
  {
    Tensor a = random_tensor(rng, {3, 4}, true), b = random_tensor(rng, {4, 2}, true);
    cases.push_back({"matmul", [=] { return probe(matmul(a, b), 1); }, {a, b}});
  }
  {
    Tensor a = random_tensor(rng, {3, 4}, true), b = random_tensor(rng, {5, 4}, true);
    cases.push_back({"matmul_nt", [=] { return probe(matmul_nt(a, b), 2); }, {a, b}});
  }
  {
    Tensor a = random_tensor(rng, {3, 4}, true);
    cases.push_back({"transpose", [=] { return probe(transpose(a), 3); }, {a}});
    cases.push_back({"reshape", [=] { return probe(reshape(a, {2, 6}), 4); }, {a}});
    cases.push_back({"softmax", [=] { return probe(softmax_rows(scale(a, 3.0)), 5); }, {a}});
    cases.push_back({"gelu", [=] { return probe(gelu(scale(a, 2.0)), 6); }, {a}});
    cases.push_back({"mean_rows", [=] { return probe(mean_rows(a), 7); }, {a}});
    cases.push_back({"slice_cols", [=] { return probe(slice_cols(a, 1, 3), 8); }, {a}});
    cases.push_back({"row", [=] { return probe(row(a, 2), 9); }, {a}});
    cases.push_back({"mean", [=] { return mean(mul(a, a)); }, {a}});
    cases.push_back({"add_scalar", [=] { return probe(add_scalar(a, 1.5), 10); }, {a}});
  }
  {
    Tensor a = random_nonzero(rng, {3, 4}, true);
    cases.push_back({"relu", [=] { return probe(relu(a), 11); }, {a}});
  }
  {
    Tensor a = random_tensor(rng, {3, 4}, true), b = random_tensor(rng, {3, 4}, true);
    cases.push_back({"add", [=] { return probe(add(a, b), 12); }, {a, b}});
    cases.push_back({"sub", [=] { return probe(sub(a, b), 13); }, {a, b}});
    cases.push_back({"mul", [=] { return probe(mul(a, b), 14); }, {a, b}});
    cases.push_back({"concat_cols", [=] { return probe(concat_cols({a, b}), 15); }, {a, b}});
    cases.push_back({"concat_rows", [=] { return probe(concat_rows({a, b}), 16); }, {a, b}});
  }
  {
    Tensor x = random_tensor(rng, {3, 5}, true), g = random_tensor(rng, {5}, true), b = random_tensor(rng, {5}, true);
    cases.push_back({"layer_norm", [=] { return probe(layer_norm(x, g, b), 17); }, {x, g, b}});
    cases.push_back({"add_row", [=] { return probe(add_row(x, b), 18); }, {x, b}});
  }
  {
    Tensor x = random_tensor(rng, {9, 2}, true), k = random_tensor(rng, {3, 2, 3}, true);
    cases.push_back({"conv1d", [=] { return probe(conv1d(x, k, 2), 19); }, {x, k}});
  }
  {
    Tensor x = random_tensor(rng, {5, 6, 2}, true), k = random_tensor(rng, {3, 2, 2, 3}, true);
    cases.push_back({"conv2d", [=] { return probe(conv2d(x, k, 1), 20); }, {x, k}});
    cases.push_back({"conv2d_stride", [=] { return probe(conv2d(x, k, 2), 21); }, {x, k}});
  }
  {
    Tensor x = random_tensor(rng, {7, 3}, true);
    cases.push_back({"pool1d_max", [=] { return probe(pool1d(x, PoolKind::max, 2, 2), 22); }, {x}});
    cases.push_back({"pool1d_mean", [=] { return probe(pool1d(x, PoolKind::mean, 3, 1), 23); }, {x}});
  }
  {
    Tensor x = random_tensor(rng, {4, 5, 2}, true);
    cases.push_back({"pool2d_max", [=] { return probe(pool2d(x, PoolKind::max, 2, 2), 24); }, {x}});
    cases.push_back({"pool2d_mean", [=] { return probe(pool2d(x, PoolKind::mean, 2, 1), 25); }, {x}});
    cases.push_back({"slice_first", [=] { return probe(slice_first(x, 2), 26); }, {x}});
  }
  {
    Tensor table = random_tensor(rng, {6, 3}, true);
    cases.push_back({"gather_rows", [=] { return probe(gather_rows(table, {4, 1, 4, 0}), 27); }, {table}});
  }
  for (auto& c : cases) {
    auto r = grad_check(c.f, c.params);
    EXPECT_LT(r.max_rel_err, 1e-4) << c.name << " worst " << r.worst_param;
    EXPECT_GT(r.checked, 0u) << c.name;
  }
}

TEST(Ops, GatherRejectsOutOfRange) {
  Tensor table({4, 2});
  EXPECT_THROW(gather_rows(table, {4}), InputError);
  EXPECT_THROW(gather_rows(table, {-1}), InputError);
}

TEST(Ops, SliceAndConcatRoundTrip) {
  Rng rng(13);
  Tensor a = random_tensor(rng, {3, 6});
  Tensor back = concat_cols({slice_cols(a, 0, 2), slice_cols(a, 2, 6)});
  EXPECT_EQ(to_vec(back), to_vec(a));
}
