#include <gtest/gtest.h>

#include <cmath>

#include "convattn/gradcheck.hpp"
#include "convattn/ops.hpp"
#include "convattn/rng.hpp"

namespace convattn {
namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, -1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

void expect_values(const Tensor& t, const std::vector<double>& expected, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.at(i), expected[i], tol) << "index " << i;
}

TEST(Affine, IdentityWeights) {
  auto x = Tensor::from({1, 2}, {1, 2});
  auto w = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2}, {0, 0});
  expect_values(ops::affine(x, w, b), {1, 2});
}

TEST(Affine, ZeroWeightsPassBias) {
  auto x = Tensor::from({1, 2}, {1, 2});
  expect_values(ops::affine(x, Tensor::zeros({2, 2}), Tensor::from({2}, {3, 4})), {3, 4});
}

TEST(Affine, HandMultiply) {
  auto x = Tensor::from({1, 2}, {1, 2});
  auto w = Tensor::from({2, 2}, {1, 1, 1, 1});
  expect_values(ops::affine(x, w, Tensor::from({2}, {0, 1})), {3, 4});
}

TEST(Affine, ShapeMismatchNamesBothShapes) {
  auto x = Tensor::zeros({1, 3});
  auto w = Tensor::zeros({2, 2});
  try {
    ops::affine(x, w, Tensor::zeros({2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[1x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, Definitions) {
  expect_values(ops::relu(Tensor::from({3}, {-1, 0, 2})), {0, 0, 2});
  expect_values(ops::sigmoid(Tensor::from({1}, {0})), {0.5});
  expect_values(ops::tanh(Tensor::from({1}, {0})), {0});
  EXPECT_THROW(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

TEST(Softmax, Examples) {
  expect_values(ops::softmax(Tensor::from({1, 2}, {0, 0})), {0.5, 0.5});
  expect_values(ops::softmax(Tensor::from({1, 2}, {1000, 1000})), {0.5, 0.5});
  expect_values(ops::softmax(Tensor::from({1, 2}, {std::log(1.0), std::log(3.0)})), {0.25, 0.75});
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({4, 9}, rng, false);
    auto shifted = x.clone();
    const double c = uniform(rng, -50, 50);
    for (std::size_t j = 0; j < 9; ++j) shifted.mutable_data()[2 * 9 + j] += c;
    auto y = ops::softmax(x);
    auto ys = ops::softmax(shifted);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) s += y.at(r * 9 + j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.at(i), ys.at(i), 1e-9);
  }
}

TEST(Softmax, MaskedPositionsGetZero) {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = ops::masked_softmax(x, {true, true, false, true, false, false});
  EXPECT_EQ(y.at(2), 0.0);
  EXPECT_NEAR(y.at(0) + y.at(1), 1.0, 1e-15);
  EXPECT_NEAR(y.at(3), 1.0, 1e-15);
  EXPECT_THROW(ops::masked_softmax(x, {false, false, false, true, true, true}), DimensionError);
}

TEST(Conv2d, IdentityKernelAddsBias) {
  Rng rng(3);
  auto x = random_tensor({1, 4, 5, 1}, rng, false);
  auto y = ops::conv2d(x, Tensor::from({1, 1, 1, 1}, {1}), Tensor::from({1}, {0.5}), {});
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.at(i), x.at(i) + 0.5);
}

TEST(Conv2d, ValidAllOnes) {
  auto y = ops::conv2d(Tensor::full({1, 3, 3, 1}, 1.0), Tensor::full({1, 3, 3, 1}, 1.0), Tensor::zeros({1}),
                       {1, 1, ops::Padding::valid});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2d, SameStrideShape) {
  // 41 frequency bins x 9 frames x 3 channels, stride 1x3.
  auto y = ops::conv2d(Tensor::zeros({1, 41, 9, 3}), Tensor::zeros({128, 3, 3, 3}), Tensor::zeros({128}),
                       {1, 3, ops::Padding::same});
  EXPECT_EQ(y.shape(), (Shape{1, 41, 3, 128}));
}

TEST(Conv2d, KernelLargerThanInput) {
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 2, 2, 1}), Tensor::zeros({1, 3, 3, 1}), Tensor(),
                           {1, 1, ops::Padding::valid}),
               DimensionError);
}

TEST(Conv2d, SamePreservesExtentsForOddKernels) {
  Rng rng(11);
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    for (std::size_t h = 1; h <= 9; ++h) {
      auto x = random_tensor({2, h, h + 2, 2}, rng, false);
      auto y = ops::conv2d(x, random_tensor({3, k, k, 2}, rng, false), Tensor(), {});
      EXPECT_EQ(y.shape(), (Shape{2, h, h + 2, 3}));
    }
  }
}

TEST(Backward, Examples) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  ops::sum(x).backward();
  expect_values(Tensor::from({3}, std::vector<double>(x.grad().begin(), x.grad().end())), {1, 1, 1});

  auto y = Tensor::from({1}, {2}, true);
  ops::sum(ops::mul(y, y)).backward();
  EXPECT_DOUBLE_EQ(y.grad()[0], 4.0);

  auto z = Tensor::from({2}, {-1, 2}, true);
  ops::sum(ops::relu(z)).backward();
  EXPECT_DOUBLE_EQ(z.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(z.grad()[1], 1.0);
}

TEST(Backward, RejectsNonScalarAndSecondCall) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(ops::tanh(x).backward(), GraphError);
  auto loss = ops::sum(ops::tanh(x));
  loss.backward();
  EXPECT_THROW(loss.backward(), GraphError);
}

TEST(Backward, SharedValueAccumulates) {
  Rng rng(5);
  auto x = random_tensor({5}, rng);
  auto g = [](const Tensor& v) { return ops::tanh(ops::mul(v, v)); };
  ops::sum(ops::add(g(x), g(x))).backward();
  for (std::size_t i = 0; i < 5; ++i) {
    const double v = x.at(i);
    const double t = std::tanh(v * v);
    EXPECT_NEAR(x.grad()[i], 2.0 * (1 - t * t) * 2 * v, 1e-12);
  }
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensor::from({1}, {1}, true);
  NoGradGuard guard;
  auto y = ops::tanh(x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Numeric, NonFiniteRaises) {
  EXPECT_THROW(Tensor::from({1}, {std::nan("")}), NumericError);
  auto x = Tensor::from({1}, {1e308});
  EXPECT_THROW(ops::scale(x, 10.0), NumericError);
}

TEST(FiniteDiff, QuadraticAndConstant) {
  auto theta = Tensor::from({1}, {3.0}, true);
  std::vector<NamedTensor> p{{"theta", theta}};
  auto rep = finite_diff_check([&] { return ops::sum(ops::mul(theta, theta)); }, p);
  ASSERT_EQ(rep.worst.size(), 1u);
  EXPECT_NEAR(rep.worst[0].analytic, 6.0, 1e-12);
  EXPECT_NEAR(rep.worst[0].numeric, 6.0, 1e-6);

  auto c = Tensor::from({2}, {1.0, 2.0}, true);
  std::vector<NamedTensor> q{{"c", c}};
  auto rep2 = finite_diff_check([&] { return ops::add(ops::scale(ops::sum(c), 0.0), Tensor::scalar(4.0)); }, q);
  EXPECT_EQ(rep2.max_rel_error, 0.0);
  EXPECT_EQ(rep2.worst[0].analytic, 0.0);
}

TEST(FiniteDiff, DetectsCorruptedBackward) {
  Rng rng(1);
  auto x = random_tensor({6}, rng);
  std::vector<NamedTensor> p{{"x", x}};
  ScopedBackwardFault fault("tanh", 1.5);
  auto rep = finite_diff_check([&] { return ops::sum(ops::tanh(x)); }, p);
  EXPECT_GT(rep.max_rel_error, 0.1);
  EXPECT_EQ(rep.failing(1e-4), std::vector<std::string>{"x"});
}

// Every op against central differences on U(-1, 1) inputs over 20 seeds.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
  Rng rng(1000 + GetParam());
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto bias = random_tensor({5}, rng);
  auto v4 = random_tensor({4}, rng);
  auto a3 = random_tensor({2, 3, 4}, rng);
  auto b3 = random_tensor({2, 4, 2}, rng);
  auto img = random_tensor({2, 5, 4, 2}, rng);
  auto filt = random_tensor({3, 3, 3, 2}, rng);
  auto fb = random_tensor({3}, rng);
  auto gamma = random_tensor({4}, rng);
  auto beta = random_tensor({4}, rng);
  const std::vector<double> rm{0.1, -0.2, 0.3, 0.0}, rv{1.0, 0.5, 2.0, 0.8};
  // Fixed non-uniform weights so that sum-invariant ops still see gradient.
  auto weights = [&](const Tensor& t) {
    std::vector<double> v(t.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(1.0 + static_cast<double>(i));
    return ops::sum(ops::mul(t, Tensor::from(t.shape(), v)));
  };

  struct Case {
    std::string name;
    std::function<Tensor()> f;
    std::vector<NamedTensor> params;
  };
  std::vector<Case> cases = {
      {"affine", [&] { return weights(ops::affine(a, w, bias)); }, {{"a", a}, {"w", w}, {"b", bias}}},
      {"matmul", [&] { return weights(ops::matmul(a, w)); }, {{"a", a}, {"w", w}}},
      {"tanh", [&] { return weights(ops::tanh(a)); }, {{"a", a}}},
      {"sigmoid", [&] { return weights(ops::sigmoid(a)); }, {{"a", a}}},
      {"relu", [&] { return weights(ops::relu(a)); }, {{"a", a}}},
      {"add/sub/mul", [&] { return weights(ops::mul(ops::sub(a, b), ops::add(a, b))); }, {{"a", a}, {"b", b}}},
      {"rowvec", [&] { return weights(ops::add_rowvec(ops::mul_rowvec(a, v4), v4)); }, {{"a", a}, {"v", v4}}},
      {"softmax", [&] { return weights(ops::softmax(a)); }, {{"a", a}}},
      {"log_softmax", [&] { return weights(ops::log_softmax(a)); }, {{"a", a}}},
      {"masked_softmax",
       [&] {
         return weights(ops::masked_softmax(a, {true, true, false, true, true, true, true, true, false, false, true, true}));
       },
       {{"a", a}}},
      {"concat/slice",
       [&] { return weights(ops::slice_last(ops::concat_last({a, ops::scale(b, 2.0)}), 2, 5)); },
       {{"a", a}, {"b", b}}},
      {"bmm", [&] { return weights(ops::bmm(a3, b3)); }, {{"a3", a3}, {"b3", b3}}},
      {"time", [&] { return weights(ops::stack_time({ops::time_slice(a3, 2), ops::time_slice(a3, 0)})); }, {{"a3", a3}}},
      {"reshape/pick", [&] { return weights(ops::pick(ops::reshape(a3, {6, 4}), {0, 3, -1, 2, 1, 1})); }, {{"a3", a3}}},
      {"conv_same",
       [&] { return weights(ops::conv2d(img, filt, fb, {1, 2, ops::Padding::same})); },
       {{"img", img}, {"filt", filt}, {"fb", fb}}},
      {"conv_valid",
       [&] { return weights(ops::conv2d(img, filt, fb, {2, 1, ops::Padding::valid})); },
       {{"img", img}, {"filt", filt}, {"fb", fb}}},
      {"batch_norm",
       [&] { return weights(ops::batch_norm_train(a, gamma, beta, 1e-5)); },
       {{"a", a}, {"gamma", gamma}, {"beta", beta}}},
      {"batch_norm_infer",
       [&] { return weights(ops::batch_norm_infer(a, gamma, beta, rm, rv, 1e-5)); },
       {{"a", a}, {"gamma", gamma}, {"beta", beta}}},
  };
  for (auto& c : cases) {
    auto rep = finite_diff_check(c.f, c.params);
    EXPECT_LT(rep.max_rel_error, 1e-4) << c.name << " worst " << rep.worst[0].tensor << "[" << rep.worst[0].index
                                       << "] analytic " << rep.worst[0].analytic << " numeric "
                                       << rep.worst[0].numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range(0, 20));

}  // namespace
}  // namespace convattn
