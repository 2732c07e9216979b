// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "heartlora/tensor.hpp"
#include "oracle.hpp"

using namespace heartlora;
using oracle::random_tensor;

namespace {

constexpr int kSeeds = 10;

// sum(out * R) with a fixed random R, so every output element carries a distinct weight.
TensorPtr<double> project_to_scalar(Graph<double>& g, const TensorPtr<double>& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xABCDEF);
  auto r = random_tensor<double>(out->shape, rng, 1.0, false);
  return g.sum(g.mul(out, r));
}

void expect_fd(const oracle::LossFn& f, const std::vector<TensorPtr<double>>& params, double tol = 1e-3) {
  auto r = oracle::check_gradients(f, params);
  EXPECT_LT(r.max_rel_err, tol) << "checked " << r.checked << " elements";
}

}  // namespace

TEST(Matmul, IdentityAndHandExample) {
  Graph<float> g(GradMode::off);
  auto m = make_tensor<float>({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto eye = make_tensor<float>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(g.matmul(eye, m)->values, m->values);
  auto a = make_tensor<float>({2, 2}, {1, 2, 3, 4});
  auto b = make_tensor<float>({2, 1}, {1, 1});
  EXPECT_EQ(g.matmul(a, b)->values, (std::vector<float>{3, 7}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<float> g;
  auto a = zeros<float>({2, 3});
  auto b = zeros<float>({2, 3});
  try {
    g.matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] * [2x3]"), std::string::npos);
  }
}

TEST(Matmul, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    auto a = random_tensor<double>({4, 5}, rng);
    auto b = random_tensor<double>({5, 3}, rng);
    expect_fd([&](Graph<double>& g) { return g.sum(g.matmul(a, b)); }, {a, b});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.matmul(a, b), s); }, {a, b});
  }
}

TEST(Softmax, UniformAndStable) {
  Graph<float> g(GradMode::off);
  auto z = g.softmax_rows(zeros<float>({1, 4}));
  for (auto v : z->values) EXPECT_FLOAT_EQ(v, 0.25f);
  auto big = g.softmax_rows(make_tensor<float>({1, 2}, {1000, 0}));
  EXPECT_NEAR(big->values[0], 1.0, 1e-6);
  EXPECT_NEAR(big->values[1], 0.0, 1e-6);
}

TEST(Softmax, RowsSumToOneForLargeInputs) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1e4, 1e4);
  std::vector<float> v(50 * 17);
  for (auto& x : v) x = static_cast<float>(u(rng));
  Graph<float> g(GradMode::off);
  auto p = g.softmax_rows(make_tensor<float>({50, 17}, v));
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 17; ++c) s += p->at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(100 + s);
    auto a = random_tensor<double>({3, 6}, rng, 2.0);
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.softmax_rows(a), s); }, {a});
  }
}

TEST(LayerNorm, ConstantRowAndZeroMean) {
  Graph<float> g(GradMode::off);
  auto gamma = make_tensor<float>({4}, {1, 1, 1, 1});
  auto beta = zeros<float>({4});
  auto out = g.layer_norm(make_tensor<float>({1, 4}, {3, 3, 3, 3}), gamma, beta, 1e-5f);
  for (auto v : out->values) EXPECT_EQ(v, 0.0f);
  std::mt19937_64 rng(1);
  auto x = random_tensor<float>({5, 16}, rng, 3.0, false);
  auto y = g.layer_norm(x, make_tensor<float>({16}, std::vector<float>(16, 1.0f)), zeros<float>({16}), 1e-5f);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y->at(r, c);
    EXPECT_NEAR(m / 16, 0.0, 1e-6);
  }
}

TEST(LayerNorm, RejectsNonPositiveEps) {
  Graph<float> g;
  EXPECT_THROW(g.layer_norm(zeros<float>({1, 2}), zeros<float>({2}), zeros<float>({2}), 0.0f), ConfigError);
}

TEST(LayerNorm, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(200 + s);
    auto a = random_tensor<double>({3, 8}, rng);
    auto gamma = random_tensor<double>({8}, rng);
    auto beta = random_tensor<double>({8}, rng);
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.layer_norm(a, gamma, beta, 1e-5), s); },
              {a, gamma, beta});
  }
}

TEST(Gelu, ValuesAndAsymptote) {
  Graph<double> g(GradMode::off);
  auto y = g.gelu(make_tensor<double>({2}, {0.0, 10.0}));
  EXPECT_EQ(y->values[0], 0.0);
  EXPECT_LT(std::abs(y->values[1] - 10.0), 1e-4);
}

TEST(Gelu, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(300 + s);
    auto a = random_tensor<double>({4, 7}, rng, 2.0);
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.gelu(a), s); }, {a});
  }
}

TEST(CrossEntropy, AnalyticCases) {
  Graph<double> g(GradMode::off);
  const std::vector<int> label{2};
  EXPECT_NEAR(g.cross_entropy(zeros<double>({1, 4}), label)->values[0], std::log(4.0), 1e-12);
  EXPECT_LT(g.cross_entropy(make_tensor<double>({1, 4}, {0, 0, 500, 0}), label)->values[0], 1e-12);
  const std::vector<int> bad{4};
  EXPECT_THROW(g.cross_entropy(zeros<double>({1, 4}), bad), IndexError);
}

TEST(CrossEntropy, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(400 + s);
    auto logits = random_tensor<double>({5, 4}, rng, 2.0);
    std::vector<int> labels{0, 3, 1, 2, 3};
    expect_fd([&](Graph<double>& g) { return g.cross_entropy(logits, labels); }, {logits});
  }
}

TEST(PlumbingOps, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(500 + s);
    auto a = random_tensor<double>({3, 6}, rng);
    auto b = random_tensor<double>({3, 6}, rng);
    auto bias = random_tensor<double>({6}, rng);
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.add(a, b), s); }, {a, b});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.sub(a, b), s); }, {a, b});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.mul(a, b), s); }, {a, b});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.scale(a, 1.7), s); }, {a});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.transpose(a), s); }, {a});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.reshape(a, {2, 9}), s); }, {a});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.slice_cols(a, 1, 4), s); }, {a});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.concat_cols({a, b, a}), s); }, {a, b});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.add_bias(a, bias), s); }, {a, bias});
    expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.gather_rows(a, {2, 0, 2}), s); }, {a});
    expect_fd([&](Graph<double>& g) { return g.mean(g.mul(a, a)); }, {a});
  }
}

TEST(EmbeddingAdd, LayoutAndFiniteDifferences) {
  Graph<double> g(GradMode::off);
  auto patches = make_tensor<double>({2, 1}, {10, 20});  // batch 2, one patch each
  auto cls = make_tensor<double>({1, 1}, {1});
  auto pos = make_tensor<double>({2, 1}, {100, 200});
  auto out = g.embedding_add(patches, cls, pos, 2);
  EXPECT_EQ(out->values, (std::vector<double>{101, 210, 101, 220}));
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(600 + s);
    auto p = random_tensor<double>({6, 4}, rng);
    auto c = random_tensor<double>({1, 4}, rng);
    auto q = random_tensor<double>({4, 4}, rng);
    expect_fd([&](Graph<double>& gg) { return project_to_scalar(gg, gg.embedding_add(p, c, q, 2), s); }, {p, c, q});
  }
}

TEST(Attention, FiniteDifferencesWithMask) {
  const std::vector<std::uint8_t> all{1, 1, 1, 1}, some{1, 0, 1, 0};
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(700 + s);
    auto q = random_tensor<double>({6, 8}, rng);
    auto k = random_tensor<double>({6, 8}, rng);
    auto v = random_tensor<double>({6, 8}, rng);
    for (const auto* m : {&all, &some})
      expect_fd([&](Graph<double>& g) { return project_to_scalar(g, g.attention(q, k, v, 2, 4, *m), s); },
                {q, k, v});
  }
}

TEST(Backward, SumAndSquare) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<float>({3, 4}, rng);
  {
    Graph<float> g;
    g.backward(g.sum(x));
  }
  for (auto v : x->grad) EXPECT_EQ(v, 1.0f);
  x->zero_grad();
  {
    Graph<float> g;
    g.backward(g.scale(g.sum(g.mul(x, x)), 0.5f));
  }
  for (std::size_t i = 0; i < x->size(); ++i) EXPECT_NEAR(x->grad[i], x->values[i], 1e-6);
}

TEST(Backward, TwiceWithoutZeroingDoublesExactly) {
  std::mt19937_64 rng(10);
  auto a = random_tensor<float>({4, 5}, rng);
  auto b = random_tensor<float>({5, 3}, rng);
  Graph<float> g;
  auto loss = g.mean(g.gelu(g.matmul(a, b)));
  g.backward(loss);
  const auto once = a->grad;
  g.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(a->grad[i], 2 * once[i]);
}

TEST(Backward, RejectsNonScalarAndUnrecorded) {
  std::mt19937_64 rng(11);
  auto a = random_tensor<float>({2, 2}, rng);
  Graph<float> g;
  EXPECT_THROW(g.backward(g.scale(a, 2.0f)), ContractError);
  Graph<float> off(GradMode::off);
  EXPECT_THROW(off.backward(off.sum(a)), ContractError);
}

TEST(Backward, TapeVisitsEachOpOnce) {
  std::mt19937_64 rng(12);
  auto a = random_tensor<float>({2, 2}, rng);
  auto frozen = random_tensor<float>({2, 2}, rng, 1.0, false);
  Graph<float> g;
  auto loss = g.sum(g.add(g.matmul(a, frozen), g.matmul(frozen, frozen)));
  EXPECT_EQ(g.num_ops(), 3u);  // the frozen-only product is not taped
  g.backward(loss);
  EXPECT_TRUE(a->has_grad());
}

TEST(FiniteChecks, NonFiniteOutputIsAnError) {
  Graph<float> g;
  auto a = make_tensor<float>({1, 2}, {1e30f, 1e30f});
  EXPECT_THROW(g.mul(a, a), NonFiniteError);
}

TEST(Determinism, SameInputsSameBits) {
  auto run = [] {
    std::mt19937_64 rng(13);
    auto a = random_tensor<float>({8, 8}, rng);
    auto b = random_tensor<float>({8, 8}, rng);
    Graph<float> g;
    auto loss = g.mean(g.softmax_rows(g.gelu(g.matmul(a, b))));
    g.backward(loss);
    return std::make_pair(loss->values, a->grad);
  };
  EXPECT_EQ(run(), run());
}

TEST(Tensor, ConstructorInvariants) {
  EXPECT_THROW(Tensor<float>({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor<float>({0, 2}, {}), DimensionError);
  auto t = cast<double>(make_tensor<float>({2}, {0.5f, 1.5f}));
  EXPECT_EQ(t->values, (std::vector<double>{0.5, 1.5}));
}
