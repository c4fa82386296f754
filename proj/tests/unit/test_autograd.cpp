#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "bld/autograd.hpp"
#include "bld/nn.hpp"
#include "support.hpp"

namespace bld::ag {
namespace {

using Fn = std::function<Var(const std::vector<Var>&)>;

// Compares backprop against central differences for every input element.
void check_gradients(const Fn& f, std::vector<Tensor> inputs, double tol = 2e-2) {
  std::vector<Var> vars;
  for (auto& t : inputs) vars.emplace_back(t, true);
  backward(f(vars));
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = vars[k].grad();
    ASSERT_EQ(analytic.size(), inputs[k].size());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const float h = 1e-2f;
      auto eval = [&](float delta) {
        std::vector<Var> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          probe.emplace_back(t, false);
        }
        return static_cast<double>(f(probe).value()[0]);
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      EXPECT_NEAR(analytic[i], numeric, tol * std::max(1.0, std::fabs(numeric))) << "input " << k << " element " << i;
    }
  }
}

Var sum_sq(const Var& x) { return mse(x, Tensor(x.shape())); }

TEST(Autograd, ElementwiseOps) {
  const Tensor a = test::random_tensor({2, 3}, 1), b = test::random_tensor({2, 3}, 2);
  check_gradients([](auto& v) { return sum_sq(add(v[0], v[1])); }, {a, b});
  check_gradients([](auto& v) { return sum_sq(sub(v[0], v[1])); }, {a, b});
  check_gradients([](auto& v) { return sum_sq(mul(v[0], v[1])); }, {a, b});
  check_gradients([](auto& v) { return sum_sq(scale(v[0], -1.5f)); }, {a});
  check_gradients([](auto& v) { return sum_sq(silu(v[0])); }, {a});
  check_gradients([](auto& v) { return sum_sq(tanh(v[0])); }, {a});
  check_gradients([](auto& v) { return sum_sq(exp(scale(v[0], 0.5f))); }, {a});
}

TEST(Autograd, Conv2dStrideAndPadding) {
  const Tensor x = test::random_tensor({2, 2, 5, 5}, 3), w = test::random_tensor({3, 2, 3, 3}, 4, 0.3f),
               b = test::random_tensor({3}, 5);
  check_gradients([](auto& v) { return sum_sq(conv2d(v[0], v[1], v[2], 1, 1)); }, {x, w, b});
  check_gradients([](auto& v) { return sum_sq(conv2d(v[0], v[1], v[2], 2, 1)); }, {x, w, b});
}

TEST(Autograd, ShapeOps) {
  const Tensor x = test::random_tensor({2, 4, 3, 3}, 6), y = test::random_tensor({2, 2, 3, 3}, 7);
  check_gradients([](auto& v) { return sum_sq(upsample2x(v[0])); }, {x});
  check_gradients([](auto& v) { return sum_sq(concat_channels(v[0], v[1])); }, {x, y});
  check_gradients([](auto& v) { return sum_sq(slice_channels(v[0], 1, 2)); }, {x});
  check_gradients([](auto& v) { return sum_sq(global_avg_pool(v[0])); }, {x});
  check_gradients([](auto& v) { return sum_sq(flatten(v[0])); }, {x});
  check_gradients([](auto& v) { return sum_sq(add_channel_bias(v[0], v[1])); }, {x, test::random_tensor({2, 4}, 8)});
}

TEST(Autograd, Normalisation) {
  const Tensor x = test::random_tensor({2, 4, 3, 3}, 9), g = test::random_tensor({4}, 10), b = test::random_tensor({4}, 11);
  check_gradients([](auto& v) { return sum_sq(add(group_norm(v[0], v[1], v[2], 2), scale(v[0], 0.3f))); }, {x, g, b});
  check_gradients([](auto& v) { return sum_sq(add(l2_normalize_rows(v[0]), v[0])); }, {test::random_tensor({3, 4}, 12)});
}

TEST(Autograd, DenseOps) {
  const Tensor x = test::random_tensor({3, 4}, 13), w = test::random_tensor({5, 4}, 14), b = test::random_tensor({5}, 15);
  check_gradients([](auto& v) { return sum_sq(linear(v[0], v[1], v[2])); }, {x, w, b});
  check_gradients([](auto& v) { return sum_sq(matmul_nt(v[0], v[1])); }, {x, w});
  check_gradients([](auto& v) { return sum_sq(gather_rows(v[0], {2, 0, 2})); }, {x});
}

TEST(Autograd, Losses) {
  const Tensor p = test::random_tensor({2, 3}, 16), t = test::random_tensor({2, 3}, 17);
  Tensor w({2, 3});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(i % 3);
  check_gradients([&](auto& v) { return weighted_mse(v[0], t, w); }, {p});
  check_gradients([](auto& v) { return cross_entropy(v[0], {2, 0}); }, {p});
  check_gradients([](auto& v) { return gaussian_kl(v[0], v[1]); }, {p, scale(Var(t), 0.3f).value()});
}

TEST(Autograd, CrossEntropyValue) {
  const Tensor logits({1, 3}, {1.0f, 2.0f, 3.0f});
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  EXPECT_NEAR(cross_entropy(Var(logits), {0}).value()[0], expected, 1e-5);
}

TEST(Autograd, InferenceBuildsNoGraph) {
  const Var x(test::random_tensor({2, 2}, 1));
  const Var y = silu(add(x, x));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Adam, MinimisesAQuadratic) {
  Var w(Tensor({3}, {3.0f, -2.0f, 1.0f}), true);
  nn::Adam opt({w}, {.learning_rate = 0.1f});
  for (int i = 0; i < 300; ++i) {
    opt.zero_grad();
    backward(sum_sq(w));
    opt.step();
  }
  for (float v : w.value().values()) EXPECT_NEAR(v, 0.0f, 1e-2);
  EXPECT_EQ(opt.steps_taken(), 300);
}

TEST(TimestepEmbedding, DistinctAndBounded) {
  const Tensor e = nn::timestep_embedding({0, 1, 999}, 16);
  ASSERT_EQ(e.shape(), (Shape{3, 16}));
  for (float v : e.values()) EXPECT_LE(std::fabs(v), 1.0f);
  EXPECT_FALSE(bit_equal(e.batch_slice(0), e.batch_slice(1)));
}

}  // namespace
}  // namespace bld::ag
