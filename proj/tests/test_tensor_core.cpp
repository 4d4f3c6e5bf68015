#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cookie/autograd.hpp"
#include "cookie/gradcheck.hpp"
#include "cookie/ops.hpp"
#include "oracles.hpp"

using namespace cookie;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

TEST(Tensor, RejectsDataLengthMismatch) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), DimensionError);
  Tensor<float> t(Shape{2, 3});
  EXPECT_EQ(t.size(), 6u);
}

TEST(Matmul, IdentityAndHandComputed) {
  Tape<double> tape;
  auto eye = tape.constant(Tensor<double>::matrix({{1, 0}, {0, 1}}));
  auto b = tape.constant(Tensor<double>::matrix({{3, 4}, {5, 6}}));
  EXPECT_EQ(matmul(eye, b).value(), Tensor<double>::matrix({{3, 4}, {5, 6}}));
  auto r = tape.constant(Tensor<double>::matrix({{1, 2}}));
  auto c = tape.constant(Tensor<double>::matrix({{3}, {4}}));
  EXPECT_DOUBLE_EQ(matmul(r, c).value().item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{2, 3}));
  auto b = tape.constant(Tensor<double>(Shape{4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,2]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  Parameter<double> a{"a", random_tensor({5, 7}, rng)};
  Parameter<double> b{"b", random_tensor({7, 3}, rng)};
  Tape<double> tape;
  auto loss = sum(matmul(tape.param(a), tape.param(b)));
  auto grads = tape.backward(loss);

  auto eval = [&](const oracle::Vec& av, const oracle::Vec& bv) {
    double s = 0;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t k = 0; k < 7; ++k) s += av[i * 7 + k] * bv[k * 3 + j];
    return s;
  };
  const oracle::Vec av(a.value.data().begin(), a.value.data().end());
  const oracle::Vec bv(b.value.data().begin(), b.value.data().end());
  auto ga = oracle::central_difference([&](const oracle::Vec& x) { return eval(x, bv); }, av);
  auto gb = oracle::central_difference([&](const oracle::Vec& x) { return eval(av, x); }, bv);
  EXPECT_LT(oracle::max_relative_error(ga, {grads.at("a").data().begin(), grads.at("a").data().end()}), 1e-6);
  EXPECT_LT(oracle::max_relative_error(gb, {grads.at("b").data().begin(), grads.at("b").data().end()}), 1e-6);
}

TEST(Matmul, BatchedAndTransposedGradients) {
  std::mt19937_64 rng(11);
  Parameter<double> a{"a", random_tensor({2, 3, 4}, rng)};
  Parameter<double> b{"b", random_tensor({2, 5, 4}, rng)};
  Parameter<double> w{"w", random_tensor({4, 3}, rng)};
  auto f = [&](Tape<double>& t) {
    auto y = matmul(t.param(a), t.param(b), true);  // [2,3,5]
    auto z = matmul(t.param(a), t.param(w));        // [2,3,3]
    return add(sum(mul(y, y)), sum(mul(z, z)));
  };
  EXPECT_LT(grad_check(f, {&a, &b, &w}).max_relative_error, 1e-6);
}

TEST(Softmax, UniformAndStabilized) {
  Tape<double> tape;
  auto y = softmax(tape.constant(Tensor<double>::vector({0, 0, 0})), 0);
  for (double v : y.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto z = softmax(tape.constant(Tensor<double>::vector({1000, 0})), 0);
  EXPECT_NEAR(z.value()[0], 1.0, 1e-12);
  EXPECT_NEAR(z.value()[1], 0.0, 1e-12);
  EXPECT_TRUE(z.value().all_finite());
}

TEST(Softmax, RowsSumToOneAndPositive) {
  std::mt19937_64 rng(3);
  Tape<double> tape;
  auto x = tape.constant(random_tensor({4, 6}, rng, -20, 20));
  auto y = softmax(x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_GT(y.value().at(r, c), 0.0);
      s += y.value().at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_THROW(softmax(x, 2), DimensionError);
}

TEST(Softmax, GradientAlongInnerAxis) {
  std::mt19937_64 rng(5);
  Parameter<double> x{"x", random_tensor({3, 4, 2}, rng)};
  Tensor<double> wt = random_tensor({3, 4, 2}, rng);
  auto f = [&](Tape<double>& t) { return sum(mul(softmax(t.param(x), 1), t.constant(wt))); };
  EXPECT_LT(grad_check(f, {&x}).max_relative_error, 1e-6);
}

TEST(LayerNorm, ConstantRowAndTwoPoint) {
  Tape<double> tape;
  auto g = tape.constant(Tensor<double>(Shape{4}, 1.0));
  auto b = tape.constant(Tensor<double>(Shape{4}, 0.0));
  auto y = layer_norm(tape.constant(Tensor<double>(Shape{1, 4}, 3.0)), g, b, 1e-5);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);

  auto g2 = tape.constant(Tensor<double>(Shape{2}, 1.0));
  auto b2 = tape.constant(Tensor<double>(Shape{2}, 0.0));
  auto z = layer_norm(tape.constant(Tensor<double>::matrix({{1, 3}})), g2, b2, 1e-12);
  EXPECT_NEAR(z.value()[0], -1.0, 1e-9);
  EXPECT_NEAR(z.value()[1], 1.0, 1e-9);
  EXPECT_THROW(layer_norm(y, g, b, 0.0), ContractError);
}

TEST(LayerNorm, RowStatistics) {
  std::mt19937_64 rng(9);
  Tape<double> tape;
  auto x = tape.constant(random_tensor({3, 8}, rng, -5, 5));
  auto y = layer_norm(x, tape.constant(Tensor<double>(Shape{8}, 1.0)), tape.constant(Tensor<double>(Shape{8})), 1e-5);
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mu += y.value().at(r, c) / 8;
    for (std::size_t c = 0; c < 8; ++c) var += (y.value().at(r, c) - mu) * (y.value().at(r, c) - mu) / 8;
    EXPECT_LT(std::abs(mu), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(LayerNorm, Gradient) {
  std::mt19937_64 rng(13);
  Parameter<double> x{"x", random_tensor({3, 8}, rng)};
  Parameter<double> g{"g", random_tensor({8}, rng, 0.5, 1.5)};
  Parameter<double> b{"b", random_tensor({8}, rng)};
  Tensor<double> wt = random_tensor({3, 8}, rng);
  auto f = [&](Tape<double>& t) {
    return sum(mul(layer_norm(t.param(x), t.param(g), t.param(b), 1e-5), t.constant(wt)));
  };
  EXPECT_LT(grad_check(f, {&x, &g, &b}).max_relative_error, 1e-4);
}

TEST(Backward, SumAndQuadratic) {
  Parameter<double> x{"x", Tensor<double>::vector({1, 2, 3})};
  {
    Tape<double> tape;
    auto g = tape.backward(sum(tape.param(x)));
    for (double v : g.at("x").data()) EXPECT_EQ(v, 1.0);
  }
  Tape<double> tape;
  auto px = tape.param(x);
  auto g = tape.backward(sum(mul(px, px)));
  EXPECT_EQ(g.at("x"), Tensor<double>::vector({2, 4, 6}));
}

TEST(Backward, NonScalarLossRejected) {
  Parameter<double> x{"x", Tensor<double>::vector({1, 2})};
  Tape<double> tape;
  EXPECT_THROW(tape.backward(tape.param(x)), ContractError);
}

TEST(Backward, SharedParameterAccumulatesAcrossUseSites) {
  std::mt19937_64 rng(17);
  Parameter<double> w{"w", random_tensor({4, 4}, rng)};
  Tensor<double> x1 = random_tensor({3, 4}, rng);
  Tensor<double> x2 = random_tensor({2, 4}, rng);
  auto site1 = [&](Tape<double>& t) { return sum(gelu(matmul(t.constant(x1), t.param(w)))); };
  auto site2 = [&](Tape<double>& t) {
    auto y = matmul(t.constant(x2), t.param(w));
    return sum(mul(y, y));
  };
  Tape<double> t1, t2, both;
  auto g1 = t1.backward(site1(t1));
  auto g2 = t2.backward(site2(t2));
  auto gb = both.backward(add(site1(both), site2(both)));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(gb.at("w")[i], g1.at("w")[i] + g2.at("w")[i], 1e-12);

  auto f = [&](Tape<double>& t) { return add(site1(t), site2(t)); };
  EXPECT_LT(grad_check(f, {&w}).max_relative_error, 1e-6);
}

TEST(Backward, UnreachableParametersAreZero) {
  Parameter<double> used{"used", Tensor<double>::vector({1, 2})};
  Parameter<double> unused{"unused", Tensor<double>::vector({5, 6})};
  Tape<double> tape;
  tape.param(unused);
  auto g = tape.backward(sum(tape.param(used)));
  std::vector<Parameter<double>*> all{&used, &unused};
  g.fill_missing(all);
  EXPECT_EQ(g.at("unused"), Tensor<double>(Shape{2}));
}

TEST(GradCheck, LinearMapIsExact) {
  std::mt19937_64 rng(19);
  Parameter<double> w{"w", random_tensor({3, 5}, rng)};
  Tensor<double> x = random_tensor({5, 1}, rng);
  auto f = [&](Tape<double>& t) { return sum(matmul(t.param(w), t.constant(x))); };
  EXPECT_LT(grad_check(f, {&w}).max_relative_error, 1e-10);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  std::mt19937_64 rng(23);
  Parameter<double> logits{"logits", random_tensor({4, 5}, rng, -2, 2)};
  auto f = [&](Tape<double>& t) {
    auto lp = log_softmax(t.param(logits));
    return scale(sum(gather_elements(lp, {0, 1, 2, 3}, {1, 4, 0, 2})), -0.25);
  };
  EXPECT_LT(grad_check(f, {&logits}).max_relative_error, 1e-6);
}

TEST(GradCheck, ElementwiseAndPoolingOps) {
  std::mt19937_64 rng(29);
  Parameter<double> x{"x", random_tensor({2, 3, 4}, rng, 0.5, 2.0)};
  Mask mask{1, 1, 0, 1, 0, 1};
  auto f = [&](Tape<double>& t) {
    auto px = t.param(x);
    auto a = max_pool(mul(px, px), mask);
    auto b = mean_pool(log(px), mask);
    auto c = l2_normalize(exp(scale(px, 0.3)));
    return add(add(sum(a), sum(b)), sum(mul(c, c)));
  };
  EXPECT_LT(grad_check(f, {&x}).max_relative_error, 1e-6);
}

TEST(GradCheck, NonFiniteIntermediateNamesOperation) {
  Parameter<double> x{"x", Tensor<double>::vector({-1.0, 2.0})};
  auto f = [&](Tape<double>& t) { return sum(log(t.param(x))); };
  try {
    grad_check(f, {&x});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
  EXPECT_THROW(grad_check(f, {&x}, {.step = 1e-2}), ContractError);
}

TEST(Determinism, ForwardIsBitwiseRepeatable) {
  std::mt19937_64 rng(31);
  Tensor<float> a = random_tensor({6, 9}, rng).cast<float>();
  Tensor<float> b = random_tensor({9, 4}, rng).cast<float>();
  auto run = [&] {
    Tape<float> t(false);
    return softmax(matmul(t.constant(a), t.constant(b)), 1).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Permute, RoundTripAndGradient) {
  std::mt19937_64 rng(37);
  Parameter<double> x{"x", random_tensor({2, 3, 4, 5}, rng)};
  Tape<double> tape;
  auto y = permute(permute(tape.param(x), {0, 2, 1, 3}), {0, 2, 1, 3});
  EXPECT_EQ(y.value(), x.value);
  Tensor<double> wt = random_tensor({2, 4, 3, 5}, rng);
  auto f = [&](Tape<double>& t) { return sum(mul(permute(t.param(x), {0, 2, 1, 3}), t.constant(wt))); };
  EXPECT_LT(grad_check(f, {&x}).max_relative_error, 1e-6);
}
