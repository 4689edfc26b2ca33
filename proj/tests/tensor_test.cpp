#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "steerscope/errors.hpp"
#include "steerscope/ops.hpp"

using namespace steerscope;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor(Shape{0, 3}), DimensionError);
  Tensor s = Tensor::scalar(2.5);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s.item(), 2.5);
}

TEST(RmsNorm, Examples) {
  Tape tape;
  auto ones = tape.constant(Tensor::matrix(1, 4, {1, 1, 1, 1}));
  auto g4 = tape.constant(Tensor::vector({1, 1, 1, 1}));
  auto y = ops::rmsnorm(ones, g4, 0.0).value();
  for (double v : y.values()) EXPECT_NEAR(v, 1.0, 1e-15);

  auto x = tape.constant(Tensor::matrix(1, 2, {3, 4}));
  auto y1 = ops::rmsnorm(x, tape.constant(Tensor::vector({1, 1})), 0.0).value();
  EXPECT_NEAR(y1[0], 3.0 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(y1[0], 0.8485, 1e-4);
  EXPECT_NEAR(y1[1], 1.1314, 1e-4);
  auto y2 = ops::rmsnorm(x, tape.constant(Tensor::vector({2, 0})), 0.0).value();
  EXPECT_NEAR(y2[0], 1.6971, 1e-4);
  EXPECT_EQ(y2[1], 0.0);
}

TEST(RmsNorm, ShapeMismatch) {
  Tape tape;
  auto x = tape.constant(Tensor::matrix(1, 2, {3, 4}));
  EXPECT_THROW(ops::rmsnorm(x, tape.constant(Tensor::vector({1, 1, 1})), 1e-6), DimensionError);
}

TEST(RmsNorm, ScaleInvariantWithoutEps) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    Tensor x = random_tensor({3, 8}, rng);
    Tensor gamma = random_tensor({8}, rng);
    const double c = std::uniform_real_distribution<double>(0.01, 50.0)(rng);
    auto a = ops::rmsnorm(tape.constant(x), tape.constant(gamma), 0.0).value();
    auto b = ops::rmsnorm(tape.constant(x * c), tape.constant(gamma), 0.0).value();
    EXPECT_LT(max_abs_diff(a, b), 1e-10);
  }
}

TEST(Softmax, Examples) {
  Tape tape;
  auto y = ops::softmax_rows(tape.constant(Tensor::matrix(3, 3, {0, 0, 0, 1000, 1000, 1000, 0, 0, std::log(3.0)}))).value();
  EXPECT_NEAR(y.at(0, 0), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.at(1, 2), 1.0 / 3.0, 1e-15);
  auto z = ops::softmax_rows(tape.constant(Tensor::matrix(2, 2, {1000, 1000, 0, std::log(3.0)}))).value();
  EXPECT_NEAR(z.at(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(z.at(1, 0), 0.25, 1e-15);
  EXPECT_NEAR(z.at(1, 1), 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(11);
  Tape tape;
  auto y = ops::softmax_rows(tape.constant(random_tensor({16, 33}, rng, -30, 30))).value();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double s = 0;
    for (double v : y.row(r)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, RejectsNonFinite) {
  Tape tape;
  EXPECT_THROW(ops::softmax_rows(tape.constant(Tensor::matrix(1, 2, {0, NAN}))), NumericError);
}

TEST(Backward, Quadratic) {
  Tape tape;
  auto x = tape.leaf(Tensor::vector({1, 2, 3}), true);
  tape.backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(x.grad(), Tensor::vector({2, 4, 6}));
}

TEST(Backward, ConstantLossGivesZeroGrad) {
  Tape tape;
  auto x = tape.leaf(Tensor::vector({1, 2, 3}), true);
  auto c = tape.constant(Tensor::vector({4, 5, 6}));
  tape.backward(ops::add(ops::sum(ops::scale(x, 0.0)), ops::sum(c)));
  EXPECT_EQ(x.grad(), Tensor::vector({0, 0, 0}));
}

TEST(Backward, OverwritesUnlessAccumulating) {
  Tape tape;
  auto x = tape.leaf(Tensor::vector({1, 2}), true);
  auto loss = ops::sum(ops::mul(x, x));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(x.grad(), Tensor::vector({2, 4}));
  tape.backward(loss, true);
  EXPECT_EQ(x.grad(), Tensor::vector({4, 8}));
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape tape;
  auto x = tape.leaf(Tensor::vector({1, 2}), true);
  EXPECT_THROW(tape.backward(ops::mul(x, x)), ContractError);
}

TEST(GradCheck, SumOfSquares) {
  std::mt19937_64 rng(3);
  auto f = [](Tape&, Var x) { return ops::sum(ops::mul(x, x)); };
  EXPECT_LT(ops::grad_check(f, random_tensor({5, 4}, rng), 1e-5), 1e-7);
  EXPECT_THROW(ops::grad_check(f, random_tensor({2}, rng), 0.0), ContractError);
}

TEST(GradCheck, RmsNormSum) {
  std::mt19937_64 rng(5);
  auto f = [](Tape& t, Var x) {
    return ops::sum(ops::rmsnorm(x, t.constant(Tensor(Shape{6}, 1.0)), 1e-6));
  };
  EXPECT_LT(ops::grad_check(f, random_tensor({4, 6}, rng), 1e-5), 1e-4);
}

// Every differentiable op agrees with central differences on random inputs in [-2, 2].
TEST(GradCheck, EveryOperation) {
  std::mt19937_64 rng(17);
  const double step = 1e-5, tol = 1e-4;
  const Tensor w43 = random_tensor({4, 3}, rng);
  const Tensor w34 = random_tensor({3, 4}, rng);
  const Tensor w53 = random_tensor({5, 3}, rng);
  const Tensor w33 = random_tensor({3, 3}, rng);
  const Tensor g3 = random_tensor({3}, rng);
  const Tensor c4 = random_tensor({4}, rng);
  const std::vector<int> ids{2, 0, 2, 1};
  const std::vector<int> targets{1, -1, 2, 0};

  struct Case {
    const char* name;
    Shape shape;
    std::function<Var(Tape&, Var)> f;
  };
  std::vector<Case> cases{
      {"add", {4, 3}, [&](Tape& t, Var x) { return ops::weighted_sum(ops::add(x, t.constant(w43)), w43); }},
      {"sub", {4, 3}, [&](Tape& t, Var x) { return ops::weighted_sum(ops::sub(t.constant(w43), x), w43); }},
      {"mul", {4, 3}, [&](Tape& t, Var x) { return ops::weighted_sum(ops::mul(x, x), w43); }},
      {"scale", {4, 3}, [&](Tape&, Var x) { return ops::weighted_sum(ops::scale(x, -1.7), w43); }},
      {"add_n", {4, 3}, [&](Tape& t, Var x) {
         std::vector<Var> terms{x, ops::mul(x, x), t.constant(w43)};
         return ops::weighted_sum(ops::add_n(terms), w43);
       }},
      {"add_row", {3}, [&](Tape& t, Var x) { return ops::weighted_sum(ops::add_row(t.constant(w43), x), w43); }},
      {"mul_row", {3}, [&](Tape& t, Var x) { return ops::weighted_sum(ops::mul_row(t.constant(w43), ops::mul(x, x)), w43); }},
      {"matmul_lhs", {4, 3}, [&](Tape& t, Var x) { return ops::weighted_sum(ops::matmul(x, t.constant(w34)), Tensor(Shape{4, 4}, 0.3)); }},
      {"matmul_rhs", {3, 4}, [&](Tape& t, Var x) { return ops::sum(ops::mul(ops::matmul(t.constant(w43), x), ops::matmul(t.constant(w43), x))); }},
      {"matmul_nt", {5, 3}, [&](Tape& t, Var x) {
         auto y = ops::matmul_nt(t.constant(w43), x);
         return ops::sum(ops::mul(y, y));
       }},
      {"matmul_nt_lhs", {4, 3}, [&](Tape& t, Var x) {
         auto y = ops::matmul_nt(x, t.constant(w53));
         return ops::sum(ops::mul(y, y));
       }},
      {"transpose", {4, 3}, [&](Tape&, Var x) { return ops::weighted_sum(ops::transpose(x), transpose(w43)); }},
      {"rmsnorm_x", {4, 3}, [&](Tape& t, Var x) { return ops::weighted_sum(ops::rmsnorm(x, t.constant(g3), 1e-6), w43); }},
      {"rmsnorm_gamma", {3}, [&](Tape& t, Var x) { return ops::weighted_sum(ops::rmsnorm(t.constant(w43), x, 1e-6), w43); }},
      {"softmax_rows", {4, 3}, [&](Tape&, Var x) { return ops::weighted_sum(ops::softmax_rows(x), w43); }},
      {"causal_softmax", {3, 3}, [&](Tape&, Var x) { return ops::weighted_sum(ops::causal_softmax(x), w33); }},
      {"log_softmax", {4, 3}, [&](Tape&, Var x) { return ops::weighted_sum(ops::log_softmax_rows(x), w43); }},
      {"gelu", {4, 3}, [&](Tape&, Var x) { return ops::weighted_sum(ops::gelu(x), w43); }},
      {"log_sigmoid", {4, 3}, [&](Tape&, Var x) { return ops::weighted_sum(ops::log_sigmoid(ops::scale(x, 4.0)), w43); }},
      {"gather_rows", {3, 3}, [&](Tape&, Var x) { return ops::weighted_sum(ops::gather_rows(x, ids), w43); }},
      {"slice_concat_rows", {4, 3}, [&](Tape&, Var x) {
         std::vector<Var> parts{ops::slice_rows(x, 2, 2), ops::slice_rows(x, 0, 2)};
         return ops::weighted_sum(ops::mul(ops::concat_rows(parts), x), w43);
       }},
      {"slice_concat_cols", {4, 3}, [&](Tape&, Var x) {
         std::vector<Var> parts{ops::slice_cols(x, 1, 2), ops::slice_cols(x, 0, 1)};
         return ops::weighted_sum(ops::mul(ops::concat_cols(parts), x), w43);
       }},
      {"dot", {4}, [&](Tape& t, Var x) { return ops::dot(ops::mul(x, x), t.constant(c4)); }},
      {"pick", {4, 3}, [&](Tape&, Var x) { return ops::weighted_sum(ops::pick(ops::mul(x, x), targets), c4); }},
      {"cross_entropy", {4, 3}, [&](Tape&, Var x) { return ops::cross_entropy_rows(x, targets); }},
      {"sub_scaled_rows", {4, 3}, [&](Tape&, Var x) {
         return ops::weighted_sum(ops::mul(ops::sub_scaled_rows(x, c4, g3), x), w43);
       }},
  };
  for (const auto& c : cases) {
    for (int draw = 0; draw < 5; ++draw) {
      const double err = ops::grad_check(c.f, random_tensor(c.shape, rng), step);
      EXPECT_LT(err, tol) << c.name << " draw " << draw;
    }
  }
}

TEST(Tape, ReplayIsBitwiseDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tape tape;
    auto x = tape.leaf(random_tensor({6, 5}, rng), true);
    auto w = tape.leaf(random_tensor({5, 5}, rng), true);
    auto y = ops::softmax_rows(ops::matmul(ops::rmsnorm(x, tape.constant(Tensor(Shape{5}, 1.0)), 1e-6), w));
    auto loss = ops::cross_entropy_rows(y, std::vector<int>{0, 1, 2, 3, 4, 0});
    tape.backward(loss);
    return std::tuple(loss.value(), x.grad(), w.grad());
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, RecordsInTopologicalOrder) {
  Tape tape;
  auto a = tape.leaf(Tensor::vector({1, 2}), true);
  auto b = ops::mul(a, a);
  auto c = ops::add(b, a);
  auto loss = ops::sum(c);
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (auto in : tape.inputs(i)) EXPECT_LT(in, i);
  tape.backward(loss);
  EXPECT_EQ(a.grad(), Tensor::vector({3, 5}));
}
