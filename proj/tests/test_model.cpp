// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "heartlora/lora.hpp"
#include "heartlora/model.hpp"
#include "oracle.hpp"

using namespace heartlora;

namespace {

template <typename T>
AdapterSet<T> random_adapters(const ModelConfig& cfg, const std::vector<Target>& targets, std::uint64_t seed,
                              double b_std = 0.3) {
  auto set = init_adapters<T>(cfg, targets, 2, T(1.5), seed);
  std::mt19937_64 rng(seed + 7);
  std::normal_distribution<double> n(0.0, b_std);
  for (auto& p : set.pairs)
    for (auto& x : p.b->values) x = static_cast<T>(n(rng));
  return set;
}

// Straightforward scalar-loop attention for one sequence: returns each head's
// summand softmax(Q_i K_i^T / sqrt(dh)) V_i W_o[rows of head i] separately.
std::vector<std::vector<double>> head_summands(const std::vector<double>& x, std::size_t t, std::size_t c,
                                               std::size_t heads, const Tensor<double>& wq,
                                               const Tensor<double>& wk, const Tensor<double>& wv,
                                               const Tensor<double>& wo) {
  auto proj = [&](const Tensor<double>& w) {
    std::vector<double> y(t * c, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t p = 0; p < c; ++p) y[i * c + j] += x[i * c + p] * w.values[p * c + j];
    return y;
  };
  const auto q = proj(wq), k = proj(wk), v = proj(wv);
  const auto dh = c / heads;
  std::vector<std::vector<double>> out(heads, std::vector<double>(t * c, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> s(t);
      double mx = -1e300;
      for (std::size_t j = 0; j < t; ++j) {
        double d = 0;
        for (std::size_t e = 0; e < dh; ++e) d += q[i * c + h * dh + e] * k[j * c + h * dh + e];
        s[j] = d / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      std::vector<double> head_out(dh, 0.0);
      for (std::size_t j = 0; j < t; ++j)
        for (std::size_t e = 0; e < dh; ++e) head_out[e] += s[j] / z * v[j * c + h * dh + e];
      for (std::size_t col = 0; col < c; ++col)
        for (std::size_t e = 0; e < dh; ++e) out[h][i * c + col] += head_out[e] * wo.values[(h * dh + e) * c + col];
    }
  }
  return out;
}

}  // namespace

TEST(Mhsa, AllOnesPatternIsBitwiseIdentity) {
  auto cfg = oracle::toy_config();
  auto w = init_backbone<float>(cfg, 1);
  oracle::randomize(w, 2, 0.2);
  auto adapters = random_adapters<float>(cfg, {Target::q, Target::v}, 3);
  auto images = oracle::random_images<float>(cfg, 3, 4);
  auto ones = HeadPattern::all_ones(cfg.num_layers, cfg.num_heads);
  Graph<float> g(GradMode::off);
  ForwardOptions<float> plain, masked;
  plain.adapters = masked.adapters = &adapters;
  masked.pattern = &ones;
  EXPECT_EQ(model_forward(g, cfg, w, images, plain)->values, model_forward(g, cfg, w, images, masked)->values);
}

// Masked head i == model whose value slice (backbone + adapter) for head i is zero.
TEST(Mhsa, MaskingEqualsZeroWeightOracle) {
  auto cfg = oracle::toy_config();
  std::mt19937_64 rng(5);
  auto w = init_backbone<double>(cfg, 5);
  oracle::randomize(w, 6, 0.3);
  auto adapters = random_adapters<double>(cfg, {Target::q, Target::v}, 7);
  const auto& blk = w.blocks[0];
  auto x = oracle::random_tensor<double>({2 * cfg.tokens(), cfg.embed_dim}, rng, 1.0, false);
  const auto dh = cfg.head_dim();
  for (std::size_t i = 0; i < cfg.num_heads; ++i) {
    std::vector<std::uint8_t> pattern(cfg.num_heads, 1);
    pattern[i] = 0;
    Graph<double> g(GradMode::off);
    auto masked = mhsa_forward(g, cfg, x, blk, 0, 2, pattern, &adapters);

    auto zb = blk;
    zb.wv = clone(blk.wv);
    auto za = adapters.clone();
    for (auto& p : za.pairs)
      if (p.layer == 0 && p.target == Target::v)
        for (std::size_t r = 0; r < p.rank; ++r)
          for (std::size_t col = i * dh; col < (i + 1) * dh; ++col) p.b->values[r * cfg.embed_dim + col] = 0;
    for (std::size_t r = 0; r < cfg.embed_dim; ++r)
      for (std::size_t col = i * dh; col < (i + 1) * dh; ++col) zb.wv->values[r * cfg.embed_dim + col] = 0;
    const std::vector<std::uint8_t> ones(cfg.num_heads, 1);
    auto ref = mhsa_forward(g, cfg, x, zb, 0, 2, ones, &za);
    for (std::size_t k = 0; k < ref->size(); ++k) ASSERT_NEAR(masked->values[k], ref->values[k], 1e-6) << "head " << i;
  }
}

TEST(Mhsa, AllZerosPatternLeavesOnlyOutputBias) {
  auto cfg = oracle::toy_config();
  cfg.attn_bias = true;
  auto w = init_backbone<float>(cfg, 8);
  oracle::randomize(w, 9, 0.2);
  std::mt19937_64 rng(10);
  auto x = oracle::random_tensor<float>({cfg.tokens(), cfg.embed_dim}, rng, 1.0, false);
  const std::vector<std::uint8_t> zeros_pattern(cfg.num_heads, 0);
  Graph<float> g(GradMode::off);
  auto out = mhsa_forward(g, cfg, x, w.blocks[0], 0, 1, zeros_pattern);
  for (std::size_t r = 0; r < cfg.tokens(); ++r)
    for (std::size_t c = 0; c < cfg.embed_dim; ++c) EXPECT_EQ(out->at(r, c), w.blocks[0].bo->values[c]);
  cfg.attn_bias = false;
  auto w2 = init_backbone<float>(cfg, 8);
  auto out2 = mhsa_forward(g, cfg, x, w2.blocks[0], 0, 1, zeros_pattern);
  for (auto v : out2->values) EXPECT_EQ(v, 0.0f);
}

TEST(Mhsa, MaskRemovesExactlyOneSummand) {
  auto cfg = oracle::toy_config();
  cfg.num_heads = 2;
  auto w = init_backbone<double>(cfg, 11);
  oracle::randomize(w, 12, 0.3);
  std::mt19937_64 rng(13);
  auto x = oracle::random_tensor<double>({cfg.tokens(), cfg.embed_dim}, rng, 1.0, false);
  const auto& b = w.blocks[0];
  auto summands = head_summands(x->values, cfg.tokens(), cfg.embed_dim, 2, *b.wq, *b.wk, *b.wv, *b.wo);
  Graph<double> g(GradMode::off);
  auto full = mhsa_forward(g, cfg, x, b, 0, 1, std::vector<std::uint8_t>{1, 1});
  for (std::size_t k = 0; k < full->size(); ++k) EXPECT_NEAR(full->values[k], summands[0][k] + summands[1][k], 1e-10);
  for (std::size_t h = 0; h < 2; ++h) {
    std::vector<std::uint8_t> p{1, 1};
    p[h] = 0;
    auto masked = mhsa_forward(g, cfg, x, b, 0, 1, p);
    for (std::size_t k = 0; k < full->size(); ++k)
      EXPECT_NEAR(full->values[k] - masked->values[k], summands[h][k], 1e-10);
  }
}

TEST(Mhsa, PatternValidation) {
  auto cfg = oracle::toy_config();
  auto w = init_backbone<float>(cfg, 1);
  std::mt19937_64 rng(1);
  auto x = oracle::random_tensor<float>({cfg.tokens(), cfg.embed_dim}, rng, 1.0, false);
  Graph<float> g(GradMode::off);
  EXPECT_THROW(mhsa_forward(g, cfg, x, w.blocks[0], 0, 1, std::vector<std::uint8_t>{1, 1, 1}), ConfigError);
  EXPECT_THROW(mhsa_forward(g, cfg, x, w.blocks[0], 0, 1, std::vector<std::uint8_t>{1, 2, 1, 1}), ConfigError);
}

TEST(ModelForward, ShapeAndBatchIndependence) {
  auto cfg = oracle::toy_config();
  auto w = init_backbone<float>(cfg, 14);
  oracle::randomize(w, 15, 0.2);
  auto images = oracle::random_images<float>(cfg, 8, 16);
  Graph<float> g(GradMode::off);
  auto logits = model_forward(g, cfg, w, images);
  EXPECT_EQ(logits->shape, (Shape{8, cfg.num_classes}));
  const auto per = cfg.channels * cfg.image_size * cfg.image_size;
  for (std::size_t n = 0; n < 8; ++n) {
    Tensor<float> one({1, cfg.channels, cfg.image_size, cfg.image_size},
                      std::vector<float>(images.values.begin() + n * per, images.values.begin() + (n + 1) * per));
    auto l1 = model_forward(g, cfg, w, one);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) EXPECT_NEAR(l1->values[c], logits->at(n, c), 1e-5);
  }
}

TEST(ModelForward, RejectsWrongImageShape) {
  auto cfg = oracle::toy_config();
  auto w = init_backbone<float>(cfg, 1);
  Graph<float> g(GradMode::off);
  Tensor<float> bad({1, 3, 4, 4}, std::vector<float>(48, 0.0f));
  EXPECT_THROW(model_forward(g, cfg, w, bad), DimensionError);
}

TEST(ModelForward, FullModelGradientMatchesFiniteDifferences) {
  auto cfg = oracle::toy_config();
  auto w = init_backbone<double>(cfg, 17);
  oracle::randomize(w, 18, 0.25);
  set_trainable(w, true);
  auto adapters = random_adapters<double>(cfg, {Target::q, Target::k, Target::v, Target::o}, 19);
  auto images = oracle::random_images<double>(cfg, 2, 20);
  const std::vector<int> labels{1, 3};
  auto params = w.parameters();
  for (auto& t : adapters.parameters()) params.push_back(t);
  ForwardOptions<double> opt;
  opt.adapters = &adapters;
  const HeadPattern pattern{{{1, 0, 1, 1}, {1, 1, 1, 0}}};
  opt.pattern = &pattern;
  auto r = oracle::check_gradients(
      [&](Graph<double>& g) { return g.cross_entropy(model_forward(g, cfg, w, images, opt), labels); }, params,
      1e-4, 1e-5, oracle::Stencil::five_point);
  EXPECT_LT(r.max_rel_err, 1e-6) << r.checked << " elements";
}

TEST(FlopCounter, ProportionalToActiveHeads) {
  auto cfg = oracle::toy_config();
  auto w = init_backbone<float>(cfg, 21);
  auto images = oracle::random_images<float>(cfg, 2, 22);
  auto count = [&](const HeadPattern& p) {
    FlopCounter f;
    ForwardOptions<float> opt;
    opt.pattern = &p;
    opt.flops = &f;
    Graph<float> g(GradMode::off);
    model_forward(g, cfg, w, images, opt);
    return f.value_path;
  };
  const auto full = count(HeadPattern::all_ones(cfg.num_layers, cfg.num_heads));
  HeadPattern half{{{0, 1, 0, 1}, {1, 0, 0, 1}}};
  EXPECT_EQ(2 * count(half), full);
}
