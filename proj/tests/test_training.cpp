// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "heartlora/training.hpp"
#include "oracle.hpp"

using namespace heartlora;

namespace {

struct Toy {
  ModelConfig cfg = oracle::toy_config();
  DatasetSplits data;
  BackboneWeights<float> backbone;
  TrainPlan plan;

  Toy() {
    SyntheticTaskSpec s;
    s.num_classes = cfg.num_classes;
    s.image_size = cfg.image_size;
    s.channels = cfg.channels;
    s.train = 48;
    s.val = 24;
    s.test = 24;
    s.noise_std = 0.2;
    s.seed = 5;
    data = generate(s);
    backbone = init_backbone<float>(cfg, 31);
    oracle::randomize(backbone, 32, 0.1);
    set_trainable(backbone, false);
    plan.epochs = 4;
    plan.warmup_epochs = 2;
    plan.batch_size = 16;
    plan.rank = 2;
    plan.learning_rate = 5e-3;
    plan.seed = 77;
    plan.ne = 1;
    plan.criterion = "taylor_raw";
  }
};

bool same_adapters(const AdapterSet<float>& a, const AdapterSet<float>& b) {
  if (a.pairs.size() != b.pairs.size()) return false;
  for (std::size_t i = 0; i < a.pairs.size(); ++i)
    if (a.pairs[i].a->values != b.pairs[i].a->values || a.pairs[i].b->values != b.pairs[i].b->values) return false;
  return true;
}

}  // namespace

// Plain scalar AdamW, written out independently.
TEST(AdamW, MatchesScalarOracleOverSeveralSteps) {
  std::mt19937_64 rng(1);
  auto p = oracle::random_tensor<double>({3, 4}, rng);
  std::vector<double> x = p->values, m(12, 0.0), v(12, 0.0);
  AdamWState<double> st;
  const double lr = 0.01, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::normal_distribution<double> n;
  for (int t = 1; t <= 5; ++t) {
    p->ensure_grad();
    for (std::size_t i = 0; i < 12; ++i) p->grad[i] = n(rng);
    for (std::size_t i = 0; i < 12; ++i) {
      const double g = p->grad[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
      x[i] = x[i] * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + eps);
    }
    const std::vector<TensorPtr<double>> ps{p};
    adamw_step<double>(ps, st, lr, wd);
    for (std::size_t i = 0; i < 12; ++i) ASSERT_NEAR(p->values[i], x[i], 1e-14);
  }
  EXPECT_EQ(st.t, 5u);
}

TEST(AdamW, ZeroGradientCases) {
  std::mt19937_64 rng(2);
  auto p = oracle::random_tensor<double>({5}, rng);
  const auto before = p->values;
  AdamWState<double> st;
  const std::vector<TensorPtr<double>> ps{p};
  p->ensure_grad();
  adamw_step<double>(ps, st, 0.1, 0.0);
  EXPECT_EQ(p->values, before);
  adamw_step<double>(ps, st, 0.1, 0.5);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(p->values[i], before[i] * (1 - 0.05));
  p->grad[2] = std::nan("");
  EXPECT_THROW(adamw_step<double>(ps, st, 0.1, 0.0), NonFiniteError);
}

TEST(CosineLr, Examples) {
  EXPECT_EQ(cosine_lr(0, 100, 0.3), 0.3);
  EXPECT_NEAR(cosine_lr(100, 100, 0.3), 0.0, 1e-17);
  EXPECT_NEAR(cosine_lr(50, 100, 0.3), 0.15, 1e-15);
  double prev = 1.0;
  for (std::uint64_t s = 0; s <= 40; ++s) {
    const double lr = cosine_lr(s, 40, 1.0);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(cosine_lr(101, 100, 0.3), ConfigError);
}

TEST(TrainPlan, Validation) {
  TrainPlan p;
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(TrainPlan::full_preset().epochs, 100u);
  EXPECT_EQ(TrainPlan::full_preset().warmup_epochs, 10u);
  p.warmup_epochs = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = TrainPlan{};
  p.warmup_epochs = p.epochs + 1;
  EXPECT_THROW(p.validate(), ConfigError);
  p = TrainPlan{};
  p.criterion = "nope";
  EXPECT_THROW(p.validate(), ConfigError);
  EXPECT_EQ(parse_baseline(to_string(BaselineMode::front_k)), BaselineMode::front_k);
}

TEST(EpochOrder, PermutationDependingOnSeedAndEpoch) {
  auto a = epoch_order(3, 0, 100);
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 100u);
  EXPECT_EQ(a, epoch_order(3, 0, 100));
  EXPECT_NE(a, epoch_order(3, 1, 100));
  EXPECT_NE(a, epoch_order(4, 0, 100));
}

TEST(Evaluate, MemorisedAndRandomAndEmpty) {
  auto cfg = oracle::toy_config();
  auto w = init_backbone<float>(cfg, 1);
  std::fill(w.head_w->values.begin(), w.head_w->values.end(), 0.0f);
  std::fill(w.head_b->values.begin(), w.head_b->values.end(), 0.0f);
  w.head_b->values[2] = 10.0f;
  SyntheticTaskSpec s;
  s.num_classes = 4;
  s.image_size = cfg.image_size;
  s.train = 20;
  s.val = s.test = 0;
  auto d = generate(s).train;
  for (auto& l : d.labels) l = 2;
  auto r = evaluate<float>(cfg, w, nullptr, nullptr, d, 7);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.count, 20u);
  EXPECT_THROW(evaluate<float>(cfg, w, nullptr, nullptr, RawDataset{}), ConfigError);

  cfg.num_classes = 10;
  auto rnd = init_backbone<float>(cfg, 2);
  s.num_classes = 10;
  s.train = 1000;
  auto balanced = generate(s).train;
  EXPECT_NEAR(evaluate<float>(cfg, rnd, nullptr, nullptr, balanced).accuracy, 0.1, 0.05);
}

TEST(Adaptation, DeterministicForSeed) {
  Toy t;
  auto a = run_adaptation(t.cfg, t.plan, t.backbone, t.data);
  auto b = run_adaptation(t.cfg, t.plan, t.backbone, t.data);
  EXPECT_TRUE(a.state.record.same_result(b.state.record));
  EXPECT_TRUE(same_adapters(a.state.adapters, b.state.adapters));
  EXPECT_EQ(a.pattern, b.pattern);
}

TEST(Adaptation, PatternAllOnesInWarmupThenFixed) {
  Toy t;
  auto r = run_adaptation(t.cfg, t.plan, t.backbone, t.data);
  const auto ones = HeadPattern::all_ones(t.cfg.num_layers, t.cfg.num_heads).hash();
  ASSERT_EQ(r.state.record.epochs.size(), t.plan.epochs);
  for (std::size_t e = 0; e < t.plan.epochs; ++e) {
    const auto& rec = r.state.record.epochs[e];
    if (e < t.plan.warmup_epochs) {
      EXPECT_EQ(rec.phase, "warmup");
      EXPECT_EQ(rec.pattern_hash, ones);
    } else {
      EXPECT_EQ(rec.phase, "masked");
      EXPECT_EQ(rec.pattern_hash, r.pattern.hash());
    }
  }
  for (std::size_t l = 0; l < t.cfg.num_layers; ++l) EXPECT_EQ(r.pattern.zeros_in(l), t.plan.ne);
  EXPECT_EQ(r.state.record.epochs[0].trainable_params, analytic_trainable_params(t.cfg, t.plan));
}

TEST(Adaptation, NeZeroIsBitwisePlainLora) {
  Toy t;
  t.plan.ne = 0;
  auto heart = run_adaptation(t.cfg, t.plan, t.backbone, t.data);
  auto p = t.plan;
  p.baseline = BaselineMode::none;
  auto lora = run_adaptation(t.cfg, p, t.backbone, t.data);
  EXPECT_TRUE(heart.pattern.all_active());
  EXPECT_TRUE(heart.state.record.same_result(lora.state.record));
  EXPECT_TRUE(same_adapters(heart.state.adapters, lora.state.adapters));
  EXPECT_EQ(heart.test.accuracy, lora.test.accuracy);
}

TEST(Adaptation, FrontKZerosLeadingHeads) {
  Toy t;
  t.plan.baseline = BaselineMode::front_k;
  t.plan.ne = 3;
  auto r = run_adaptation(t.cfg, t.plan, t.backbone, t.data);
  EXPECT_EQ(r.pattern, front_k_pattern(t.cfg.num_layers, t.cfg.num_heads, 3));
}

TEST(Adaptation, BackboneStaysFrozenAndMaskedSlicesStayPut) {
  Toy t;
  std::vector<std::vector<float>> before;
  for (auto& p : t.backbone.parameters()) before.push_back(p->values);
  auto boundary = init_trainer(t.cfg, t.plan, t.backbone);
  run_warmup(boundary, t.cfg, t.plan, t.data);
  auto r = finish_from_boundary(boundary, t.cfg, t.plan, t.data);
  auto params = t.backbone.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i] == t.backbone.head_w || params[i] == t.backbone.head_b) continue;
    EXPECT_EQ(params[i]->values, before[i]);
  }
  // Masked slices get no gradient, so after the boundary they follow AdamW
  // with g = 0 from the carried-over moments. Replay that in double.
  const auto dh = t.cfg.head_dim();
  const auto steps_per_epoch = (t.data.train.count + t.plan.batch_size - 1) / t.plan.batch_size;
  const std::uint64_t total = steps_per_epoch * t.plan.epochs;
  for (std::size_t i = 0; i < r.state.adapters.pairs.size(); ++i) {
    const auto& p = r.state.adapters.pairs[i];
    if (p.target != Target::v) continue;
    const auto& b0 = boundary.adapters.pairs[i].b->values;
    const auto& m0 = boundary.opt.m[2 * i + 1];
    const auto& v0 = boundary.opt.v[2 * i + 1];
    for (std::size_t h = 0; h < t.cfg.num_heads; ++h) {
      if (r.pattern.layers[p.layer][h]) continue;
      for (std::size_t row = 0; row < p.rank; ++row)
        for (std::size_t e = 0; e < dh; ++e) {
          const auto k = row * t.cfg.embed_dim + h * dh + e;
          double x = b0[k], m = m0[k], v = v0[k];
          for (std::uint64_t s = boundary.step; s < r.state.step; ++s) {
            const double lr = cosine_lr(s, total, t.plan.learning_rate);
            m *= 0.9;
            v *= 0.999;
            const auto tt = static_cast<double>(s + 1);
            x = x * (1 - lr * t.plan.weight_decay) -
                lr * (m / (1 - std::pow(0.9, tt))) / (std::sqrt(v / (1 - std::pow(0.999, tt))) + 1e-8);
          }
          EXPECT_NEAR(p.b->values[k], x, 1e-6);
        }
    }
  }
}

TEST(Adaptation, StarvationCheckFlagsGradientOnMaskedSlice) {
  auto cfg = oracle::toy_config();
  auto set = init_adapters<float>(cfg, {Target::v}, 2, 1.0f, 1);
  auto pattern = HeadPattern::all_ones(cfg.num_layers, cfg.num_heads);
  pattern.layers[1][2] = 0;
  for (auto& t : set.parameters()) t->ensure_grad();
  EXPECT_NO_THROW(check_masked_starvation(set, pattern, cfg.num_heads));
  set.pairs[1].b->grad[2 * cfg.head_dim()] = 1.0f;
  EXPECT_THROW(check_masked_starvation(set, pattern, cfg.num_heads), ContractError);
}

TEST(Adaptation, FallbackRerunsWithAllHeads) {
  Toy t;
  auto boundary = init_trainer(t.cfg, t.plan, t.backbone);
  run_warmup(boundary, t.cfg, t.plan, t.data);
  boundary.boundary_val_accuracy = 2.0;  // unreachable, forces the fallback
  auto p = t.plan;
  p.auto_fallback = true;
  auto fb = finish_from_boundary(boundary, t.cfg, p, t.data);
  EXPECT_TRUE(fb.fell_back);
  EXPECT_TRUE(fb.pattern.all_active());
  auto q = t.plan;
  q.ne = 0;
  auto plain = finish_from_boundary(boundary, t.cfg, q, t.data);
  EXPECT_TRUE(same_adapters(fb.state.adapters, plain.state.adapters));
  EXPECT_EQ(fb.test.accuracy, plain.test.accuracy);
}

TEST(Adaptation, DivergenceHandsBackLastGoodState) {
  Toy t;
  t.plan.learning_rate = 1e30;
  set_finite_checks(false);
  bool called = false;
  std::size_t good_epoch = 99;
  DivergenceHook<float> hook = [&](const TrainerState<float>& s) {
    called = true;
    good_epoch = s.next_epoch;
    for (auto& p : s.trainable())
      for (auto v : p->values) ASSERT_TRUE(std::isfinite(v));
  };
  EXPECT_THROW(run_adaptation(t.cfg, t.plan, t.backbone, t.data, hook), DivergenceError);
  set_finite_checks(true);
  EXPECT_TRUE(called);
  EXPECT_EQ(good_epoch, 0u);
}

TEST(Experiments, SweepSharesBoundaryAndNeZeroMatchesBaseline) {
  Toy t;
  std::vector<AdaptationResult<float>> results;
  auto rows = sweep_ne(t.cfg, t.plan, t.backbone, t.data, {0, 1, 3}, &results);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) EXPECT_EQ(r.warmup_loss, rows[0].warmup_loss);
  EXPECT_EQ(rows[0].deactivated, 0u);
  EXPECT_EQ(rows[1].deactivated, t.cfg.num_layers);
  EXPECT_EQ(rows[2].deactivated, 3 * t.cfg.num_layers);
  auto p = t.plan;
  p.ne = 0;
  p.baseline = BaselineMode::none;
  auto base = run_adaptation(t.cfg, p, t.backbone, t.data);
  EXPECT_EQ(rows[0].test_accuracy, base.test.accuracy);
  EXPECT_TRUE(same_adapters(results[0].state.adapters, base.state.adapters));
  EXPECT_EQ(4 * rows[2].value_path_flops, rows[0].value_path_flops);
}

TEST(Experiments, CompareHasThreeRowsWithSharedWarmup) {
  Toy t;
  t.plan.epochs = 3;
  auto rows = compare_methods(t.cfg, t.plan, t.backbone, t.data);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].method, "heart");
  EXPECT_EQ(rows[1].method, "front_k");
  EXPECT_EQ(rows[2].method, "lora");
  EXPECT_EQ(rows[2].ne, 0u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.warmup_loss_int8, rows[0].warmup_loss_int8);
    EXPECT_EQ(r.warmup_loss_fp32, rows[0].warmup_loss_fp32);
  }
  EXPECT_NE(rows[0].warmup_loss_int8, rows[0].warmup_loss_fp32);
}

TEST(Pretrain, LearnsAndFreezes) {
  auto cfg = oracle::toy_config();
  SyntheticTaskSpec s;
  s.family = MotifFamily::frequency;
  s.num_classes = cfg.num_classes;
  s.image_size = cfg.image_size;
  s.train = 64;
  s.val = 32;
  s.test = 0;
  s.noise_std = 0.1;
  PretrainPlan pp;
  pp.epochs = 6;
  pp.batch_size = 16;
  pp.learning_rate = 3e-3;
  auto r = pretrain_backbone<float>(cfg, pp, generate(s));
  EXPECT_LT(r.train_loss.back(), r.train_loss.front());
  for (auto& p : r.weights.parameters()) EXPECT_FALSE(p->requires_grad);
}
