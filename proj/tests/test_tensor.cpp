#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "tardis/gradcheck.hpp"
#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

using namespace tardis;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Scalarizes a tensor with fixed random weights so every output element
// contributes a distinct adjoint.
Tensor weighted_sum(const Tensor& y, const std::vector<double>& w) {
  return sum(mul(y, Tensor::from(y.shape(), w)));
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  return w;
}

}  // namespace

TEST(Tensor, MatmulIdentity) {
  const Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor x = Tensor::vector({0.3, -1.2, 4.5});
  const Tensor y = matmul(eye, x);
  ASSERT_EQ(y.shape(), Shape{3});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Tensor, SoftmaxOfZerosIsUniform) {
  const Tensor y = softmax(Tensor::vector({0, 0, 0, 0}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], 0.25);
}

TEST(Tensor, ScatterThenGather) {
  Rng rng(3);
  const Tensor m = random_tensor({3, 4}, rng);
  const std::vector<double> before(m.values().begin(), m.values().end());
  const Tensor v = Tensor::vector({1, 2, 3, 4});
  const Tensor m2 = scatter_row(m, 1, v);
  const Tensor r1 = gather_row(m2, 1);
  const Tensor r0 = gather_row(m2, 0);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r1[i], v[i]);
    EXPECT_EQ(r0[i], m.at(0, i));
  }
  // functional: the source is unchanged
  EXPECT_EQ(std::vector<double>(m.values().begin(), m.values().end()), before);
}

TEST(Tensor, ShapeMismatchNamesOpAndShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2});
  try {
    (void)matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[2]"), std::string::npos);
  }
  EXPECT_THROW((void)add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  EXPECT_THROW((void)softmax(Tensor::zeros({0})), ShapeError);
  EXPECT_THROW((void)softmax(Tensor::zeros({2, 0})), ShapeError);
}

TEST(Backward, SquareGradient) {
  Tensor x = Tensor::vector({3.0}, true);
  Graph g;
  g.backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, CrossEntropyOfZeroLogits) {
  Tensor z = Tensor::vector({0, 0, 0, 0}, true);
  Graph g;
  g.backward(cross_entropy_with_softmax(z, Tensor::one_hot(4, 3)));
  const std::vector<double> expected{0.25, 0.25, 0.25, -0.75};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(z.grad()[i], expected[i], 1e-15);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  Graph g;
  EXPECT_THROW(g.backward(scale(x, 2.0)), ShapeError);
}

TEST(Backward, UnusedParameterGetsZeroGrad) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  Tensor unused = Tensor::vector({5.0}, true);
  Graph g;
  // `unused` reaches the graph through a zero-weight product.
  Tensor y = add(sum(x), scale(sum(unused), 0.0));
  g.backward(y);
  ASSERT_TRUE(unused.has_grad());
  EXPECT_EQ(unused.grad()[0], 0.0);
}

TEST(Backward, ScatterRoutesAdjoints) {
  Tensor m = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor v = Tensor::vector({7, 8}, true);
  Graph g;
  Tensor m2 = scatter_row(m, 1, v);
  g.backward(weighted_sum(m2, {1, 2, 3, 4, 5, 6}));
  const std::vector<double> gm{1, 2, 0, 0, 5, 6};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(m.grad()[i], gm[i]);
  EXPECT_EQ(v.grad()[0], 3.0);
  EXPECT_EQ(v.grad()[1], 4.0);
}

TEST(Backward, NoGraphMeansNoTracking) {
  Tensor x = Tensor::vector({1.0}, true);
  Tensor y = tanh(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, TanhAnalytic) {
  Tensor x = Tensor::vector({0.5}, true);
  auto rep = check_gradients([&] { return sum(tanh(x)); }, {{"x", x}});
  EXPECT_LT(rep.max_rel_error(), 1e-8);
  Graph g;
  g.backward(sum(tanh(x)));
  EXPECT_NEAR(x.grad()[0], 1.0 - std::pow(std::tanh(0.5), 2), 1e-15);
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  Tensor x = Tensor::vector({0.5, -1.0}, true);
  auto rep = check_gradients([&] { return add_constant(scale(sum(x), 0.0), 3.0); }, {{"x", x}});
  EXPECT_EQ(rep.max_rel_error(), 0.0);
  Graph g;
  g.backward(add_constant(scale(sum(x), 0.0), 3.0));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(GradCheck, NonFiniteIsReported) {
  Tensor x = Tensor::vector({-1.0}, true);
  auto rep = check_gradients([&] { return sum(log(x)); }, {{"x", x}});
  EXPECT_FALSE(rep.all_finite());
  EXPECT_FALSE(rep.passed(1e-4));
}

TEST(GradCheck, InjectedFaultIsDetected) {
  Tensor x = Tensor::vector({0.5, 0.2}, true);
  GradCheckOptions opt;
  opt.inject_fault = true;
  auto rep = check_gradients([&] { return sum(mul(x, x)); }, {{"x", x}}, opt);
  EXPECT_GT(rep.max_rel_error(), 1e-4);
}

TEST(GradCheck, RandomThreeLayerComposition) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Tensor w1 = random_tensor({5, 4}, rng);
    Tensor w2 = random_tensor({5, 5}, rng);
    Tensor w3 = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({5}, rng);
    const Tensor x = random_tensor({4}, rng).detach();
    const Tensor target = Tensor::one_hot(3, seed % 3);
    auto f = [&] {
      Tensor h1 = tanh(add(matmul(w1, x), b));
      Tensor h2 = sigmoid(matmul(w2, h1));
      return cross_entropy_with_softmax(matmul(w3, h2), target);
    };
    auto rep = check_gradients(f, {{"w1", w1}, {"w2", w2}, {"w3", w3}, {"b", b}});
    EXPECT_LT(rep.max_rel_error(), 1e-6) << "seed " << seed;
  }
}

// Every op's backward against central differences, 100 seeds each.
struct OpCase {
  const char* name;
  std::function<std::vector<Tensor>(Rng&)> inputs;  // constants have requires_grad == false
  std::function<Tensor(const std::vector<Tensor>&)> apply;
};

std::vector<OpCase> op_cases() {
  auto R = [](Shape s) {
    return [s](Rng& r) { return std::vector<Tensor>{random_tensor(s, r)}; };
  };
  auto RR = [](Shape a, Shape b) {
    return [a, b](Rng& r) { return std::vector<Tensor>{random_tensor(a, r), random_tensor(b, r)}; };
  };
  using In = const std::vector<Tensor>&;
  return {
      {"matmul_mm", RR({3, 4}, {4, 2}), [](In p) { return matmul(p[0], p[1]); }},
      {"matmul_mv", RR({3, 4}, {4}), [](In p) { return matmul(p[0], p[1]); }},
      {"matmul_vm", RR({4}, {4, 3}), [](In p) { return matmul(p[0], p[1]); }},
      {"add", RR({5}, {5}), [](In p) { return add(p[0], p[1]); }},
      {"sub", RR({5}, {5}), [](In p) { return sub(p[0], p[1]); }},
      {"mul", RR({2, 3}, {2, 3}), [](In p) { return mul(p[0], p[1]); }},
      {"mul_scalar", RR({1}, {4}), [](In p) { return mul_scalar(p[0], p[1]); }},
      {"add_row", RR({3, 4}, {4}), [](In p) { return add_row(p[0], p[1]); }},
      {"tanh", R({6}), [](In p) { return tanh(p[0]); }},
      {"sigmoid", R({6}), [](In p) { return sigmoid(p[0]); }},
      {"softplus", R({6}), [](In p) { return softplus(p[0]); }},
      {"softmax", R({2, 5}), [](In p) { return softmax(p[0]); }},
      {"log_softmax", R({5}), [](In p) { return log_softmax(p[0]); }},
      {"log", [](Rng& r) { return std::vector<Tensor>{random_tensor({6}, r, 0.5, 2.5)}; },
       [](In p) { return log(p[0]); }},
      {"exp", R({6}), [](In p) { return exp(p[0]); }},
      {"concat", RR({3}, {2}), [](In p) { return concat({p[0], p[1]}); }},
      {"concat_cols", RR({3, 2}, {3, 3}), [](In p) { return concat({p[0], p[1]}, 1); }},
      {"slice", R({7}), [](In p) { return slice(p[0], 2, 5); }},
      {"gather_row", R({4, 3}), [](In p) { return gather_row(p[0], 2); }},
      {"scatter_row", RR({4, 3}, {3}), [](In p) { return scatter_row(p[0], 1, p[1]); }},
      {"sum", R({2, 3}), [](In p) { return sum(p[0]); }},
      {"mean", R({2, 3}), [](In p) { return mean(p[0]); }},
      {"cross_entropy_with_softmax",
       [](Rng& r) {
         Tensor t = softmax(random_tensor({5}, r).detach());
         return std::vector<Tensor>{random_tensor({5}, r), t};
       },
       [](In p) { return cross_entropy_with_softmax(p[0], p[1]); }},
      {"bce_with_logits",
       [](Rng& r) {
         return std::vector<Tensor>{random_tensor({5}, r), Tensor::vector({0, 1, 1, 0, 1})};
       },
       [](In p) { return bce_with_logits(p[0], p[1]); }},
  };
}

TEST(GradCheck, EveryOpMatchesFiniteDifferences) {
  for (const auto& c : op_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed * 7919 + 17);
      const std::vector<Tensor> inputs = c.inputs(rng);
      const Tensor probe = c.apply(inputs);
      const auto w = random_weights(probe.size(), rng);
      std::vector<NamedTensor> checked;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].requires_grad()) checked.push_back({"in" + std::to_string(i), inputs[i]});
      }
      auto rep = check_gradients([&] { return weighted_sum(c.apply(inputs), w); }, checked);
      ASSERT_TRUE(rep.all_finite()) << c.name << " seed " << seed;
      worst = std::max(worst, rep.max_rel_error());
    }
    EXPECT_LT(worst, 1e-6) << c.name;
  }
}

TEST(Tensor, SoftmaxRowsAreDistributions) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const Tensor y = softmax(random_tensor({3, 7}, rng, -20.0, 20.0));
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        ASSERT_GE(y.at(r, c), 0.0);
        s += y.at(r, c);
      }
      ASSERT_NEAR(s, 1.0, 1e-12);
    }
  }
}
