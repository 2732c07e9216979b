// SPDX-License-Identifier: Apache-2.0
#pragma once

// Adaptation schedule: warm-up with every head on, one-shot responsiveness
// scoring at the boundary, then masked continuation with the pattern fixed.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "heartlora/data.hpp"
#include "heartlora/lora.hpp"
#include "heartlora/model.hpp"
#include "heartlora/responsiveness.hpp"
#include "heartlora/tensor.hpp"
#include "heartlora/types.hpp"

namespace heartlora {

// Moment constants are not taken from any reference recipe; these are the usual defaults.
struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamWState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t t = 0;
};

// One AdamW step with decoupled weight decay and bias-corrected moments.
// A parameter without a gradient buffer is treated as having zero gradient.
template <typename T>
void adamw_step(std::span<const TensorPtr<T>> params, AdamWState<T>& st, double lr, double wd,
                const AdamWConfig& cfg = {}) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p->size(), T(0));
      st.v.emplace_back(p->size(), T(0));
    }
  }
  if (st.m.size() != params.size()) throw ContractError("optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (st.m[i].size() != params[i]->size()) throw ContractError("optimizer state shape mismatch");
    for (auto g : params[i]->grad)
      if (!std::isfinite(static_cast<double>(g)))
        throw NonFiniteError("non-finite gradient in parameter " + std::to_string(i) + " of shape " +
                             shape_str(params[i]->shape));
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const double decay = 1.0 - lr * wd;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = p.has_grad() ? static_cast<double>(p.grad[j]) : 0.0;
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double x = static_cast<double>(p.values[j]) * decay;
      x -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      p.values[j] = static_cast<T>(x);
    }
  }
}

inline double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr) {
  if (step > total_steps) throw ConfigError("cosine_lr: step beyond schedule");
  if (total_steps == 0) return base_lr;
  return base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps))) /
         2.0;
}

enum class BaselineMode { heart, front_k, none };

inline std::string to_string(BaselineMode m) {
  switch (m) {
    case BaselineMode::heart: return "heart";
    case BaselineMode::front_k: return "front_k";
    default: return "none";
  }
}

inline BaselineMode parse_baseline(const std::string& s) {
  if (s == "heart") return BaselineMode::heart;
  if (s == "front_k") return BaselineMode::front_k;
  if (s == "none") return BaselineMode::none;
  throw ConfigError("unknown baseline mode '" + s + "'");
}

// "taylor_auto" picks raw / negated / abs at the boundary by validation loss.
inline constexpr const char* kTaylorAuto = "taylor_auto";

struct TrainPlan {
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 3;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  std::size_t ne = 1;
  double ratio = 0.0;
  std::string criterion = kTaylorAuto;
  Accumulation accumulation = Accumulation::global;
  TargetReduction reduction = TargetReduction::sum;
  std::vector<Target> targets{Target::q, Target::v};
  double scale = 1.0;
  std::size_t rank = 8;
  bool quantize = true;
  std::uint64_t seed = 0;
  BaselineMode baseline = BaselineMode::heart;
  bool auto_fallback = false;

  // 100 epochs with a 10-epoch warm-up.
  static TrainPlan full_preset() {
    TrainPlan p;
    p.epochs = 100;
    p.warmup_epochs = 10;
    return p;
  }

  // Desk scale: 30 epochs, 3 warm-up (same 10% ratio).
  static TrainPlan desk_preset() { return TrainPlan{}; }

  void validate() const {
    if (warmup_epochs < 1 || warmup_epochs > epochs)
      throw ConfigError("need 1 <= warmup_epochs <= epochs (got " + std::to_string(warmup_epochs) + " / " +
                        std::to_string(epochs) + ")");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0) || !(weight_decay >= 0)) throw ConfigError("learning rate / weight decay out of range");
    if (!(ratio >= 0 && ratio <= 1)) throw ConfigError("ratio must lie in [0, 1]");
    if (criterion != kTaylorAuto) (void)parse_criterion(criterion);
    if (targets.empty()) throw ConfigError("no adapter targets");
  }

  std::string to_string() const {
    std::ostringstream os;
    os.precision(17);
    os << "epochs=" << epochs << ";warmup_epochs=" << warmup_epochs << ";batch_size=" << batch_size
       << ";learning_rate=" << learning_rate << ";weight_decay=" << weight_decay << ";ne=" << ne
       << ";ratio=" << ratio << ";criterion=" << criterion << ";accumulation=" << heartlora::to_string(accumulation)
       << ";reduction=" << heartlora::to_string(reduction) << ";targets=" << targets_string(targets)
       << ";scale=" << scale << ";rank=" << rank << ";quantize=" << (quantize ? 1 : 0) << ";seed=" << seed
       << ";baseline=" << heartlora::to_string(baseline) << ";auto_fallback=" << (auto_fallback ? 1 : 0);
    return os.str();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string phase;  // "warmup" or "masked"
  double train_loss = 0;
  double val_accuracy = 0;
  std::uint64_t pattern_hash = 0;
  std::size_t active_heads = 0;
  std::size_t trainable_params = 0;
  std::uint64_t value_path_flops = 0;
  double wall_ms = 0;

  // Everything except wall time.
  bool same_result(const EpochRecord& o) const {
    return epoch == o.epoch && phase == o.phase && train_loss == o.train_loss && val_accuracy == o.val_accuracy &&
           pattern_hash == o.pattern_hash && active_heads == o.active_heads &&
           trainable_params == o.trainable_params && value_path_flops == o.value_path_flops;
  }
};

struct RunRecord {
  std::vector<EpochRecord> epochs;

  bool same_result(const RunRecord& o) const {
    if (epochs.size() != o.epochs.size()) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i)
      if (!epochs[i].same_result(o.epochs[i])) return false;
    return true;
  }
};

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
  std::size_t count = 0;
};

// Top-1 accuracy and mean cross-entropy over a split, in fixed sample order.
template <typename T>
EvalResult evaluate(const ModelConfig& cfg, const BackboneWeights<T>& model, const AdapterSet<T>* adapters,
                    const HeadPattern* pattern, const RawDataset& split, std::size_t batch_size = 64) {
  if (split.count == 0) throw ConfigError("cannot evaluate on an empty split");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  EvalResult r;
  double loss_sum = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < split.count; start += batch_size) {
    const auto end = std::min<std::size_t>(split.count, start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto [images, labels] = make_batch<T>(split, idx);
    Graph<T> g(GradMode::off);
    ForwardOptions<T> opt;
    opt.adapters = adapters;
    opt.pattern = pattern;
    auto logits = model_forward(g, cfg, model, images, opt);
    const auto c = logits->cols();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const T* row = logits->values.data() + i * c;
      const auto arg = static_cast<std::size_t>(std::max_element(row, row + c) - row);
      correct += arg == static_cast<std::size_t>(labels[i]);
    }
    loss_sum += static_cast<double>(g.cross_entropy(logits, labels)->values[0]) * static_cast<double>(labels.size());
  }
  r.count = split.count;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(split.count);
  r.loss = loss_sum / static_cast<double>(split.count);
  return r;
}

// Epoch-local shuffle: depends only on (seed, epoch), so a run resumed from a
// saved boundary sees exactly the batches an uninterrupted run would.
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(detail::split_seed(seed, 0x1000 + epoch));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// Mutable state of one adaptation run; clone() gives an independent copy.
template <typename T>
struct TrainerState {
  BackboneWeights<T> model;  // frozen backbone tensors are shared between clones
  AdapterSet<T> adapters;
  AdamWState<T> opt;
  std::uint64_t step = 0;
  std::size_t next_epoch = 0;
  RunRecord record;
  ScoringGrads<T> scoring;
  double warmup_loss = 0;         // train loss of the final warm-up epoch
  double boundary_val_accuracy = 0;

  std::vector<TensorPtr<T>> trainable() const {
    auto ps = adapters.parameters();
    for (auto& t : model.classifier()) ps.push_back(t);
    return ps;
  }

  TrainerState clone() const {
    TrainerState out = *this;
    out.adapters = adapters.clone();
    out.model.head_w = heartlora::clone(model.head_w);
    out.model.head_b = heartlora::clone(model.head_b);
    return out;
  }
};

// Analytic trainable-parameter count: 2*C*d per adapted projection plus classifier.
inline std::size_t analytic_trainable_params(const ModelConfig& cfg, const TrainPlan& plan) {
  return 2 * cfg.embed_dim * plan.rank * plan.targets.size() * cfg.num_layers +
         cfg.embed_dim * cfg.num_classes + cfg.num_classes;
}

template <typename T>
TrainerState<T> init_trainer(const ModelConfig& cfg, const TrainPlan& plan, const BackboneWeights<T>& backbone) {
  cfg.validate();
  plan.validate();
  TrainerState<T> st;
  st.model = backbone;  // shallow: frozen tensors are shared read-only
  reset_classifier(st.model, cfg.num_classes, detail::split_seed(plan.seed, 0xC1A5));
  for (auto& t : st.model.parameters())
    if (t != st.model.head_w && t != st.model.head_b && t->requires_grad)
      throw ContractError("backbone tensors must be frozen before adaptation");
  st.model.head_w->requires_grad = st.model.head_b->requires_grad = true;
  st.adapters = init_adapters<T>(cfg, plan.targets, plan.rank, static_cast<T>(plan.scale),
                                 detail::split_seed(plan.seed, 0xADA7));
  st.adapters.quantized = plan.quantize;
  return st;
}

// Throws if any gradient reaches the head slice of a deactivated head.
template <typename T>
void check_masked_starvation(const AdapterSet<T>& set, const HeadPattern& pattern, std::size_t num_heads) {
  for (const auto& p : set.pairs) {
    const auto& row = pattern.layers.at(p.layer);
    const bool rows = heads_on_a_rows(p.target);
    const auto& f = rows ? *p.a : *p.b;
    if (!f.has_grad()) continue;
    const auto axis = rows ? f.rows() : f.cols();
    const auto w = axis / num_heads;
    for (std::size_t h = 0; h < num_heads; ++h) {
      if (row[h]) continue;
      for (std::size_t i = 0; i < f.rows(); ++i)
        for (std::size_t j = 0; j < f.cols(); ++j) {
          const auto head = rows ? i / w : j / w;
          if (head == h && f.grad[i * f.cols() + j] != T(0))
            throw ContractError("gradient reached deactivated head " + std::to_string(h) + " of adapter " + p.name());
        }
    }
  }
}

template <typename T>
void train_epoch(TrainerState<T>& st, const ModelConfig& cfg, const TrainPlan& plan, const DatasetSplits& data,
                 const HeadPattern& pattern, const std::string& phase, bool collect_scoring) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = data.train.count;
  if (n == 0) throw ConfigError("training split is empty");
  const auto steps_per_epoch = (n + plan.batch_size - 1) / plan.batch_size;
  const auto total_steps = static_cast<std::uint64_t>(steps_per_epoch * plan.epochs);
  const auto epoch = st.next_epoch;
  const auto order = epoch_order(plan.seed, epoch, n);
  const auto params = st.trainable();
  if (collect_scoring) st.scoring = ScoringGrads<T>::zeros_like(st.adapters);
  FlopCounter flops;
  double loss_sum = 0;
  for (std::size_t b = 0; b < steps_per_epoch; ++b) {
    const auto lo = b * plan.batch_size, hi = std::min(n, lo + plan.batch_size);
    std::span<const std::size_t> idx(order.data() + lo, hi - lo);
    auto [images, labels] = make_batch<T>(data.train, idx);
    for (auto& p : params) p->zero_grad();
    Graph<T> g;
    ForwardOptions<T> opt;
    opt.adapters = &st.adapters;
    opt.pattern = &pattern;
    opt.flops = &flops;
    auto loss = g.cross_entropy(model_forward(g, cfg, st.model, images, opt), labels);
    const double lv = static_cast<double>(loss->values[0]);
    if (!std::isfinite(lv))
      throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b));
    loss_sum += lv * static_cast<double>(labels.size());
    g.backward(loss);
    if (collect_scoring) st.scoring.accumulate(st.adapters);
    if (!pattern.all_active()) check_masked_starvation(st.adapters, pattern, cfg.num_heads);
    adamw_step<T>(params, st.opt, cosine_lr(st.step, total_steps, plan.learning_rate), plan.weight_decay);
    st.step += 1;
  }
  EpochRecord rec;
  rec.epoch = epoch;
  rec.phase = phase;
  rec.train_loss = loss_sum / static_cast<double>(n);
  rec.val_accuracy = data.val.count ? evaluate(cfg, st.model, &st.adapters, &pattern, data.val).accuracy : 0.0;
  rec.pattern_hash = pattern.hash();
  rec.active_heads = cfg.num_layers * cfg.num_heads - pattern.total_zeros();
  rec.trainable_params = 0;
  for (auto& p : params) rec.trainable_params += p->size();
  rec.value_path_flops = flops.value_path;
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  st.record.epochs.push_back(rec);
  st.next_epoch += 1;
}

// Receives the state as of the last completed epoch when training diverges.
template <typename T>
using DivergenceHook = std::function<void(const TrainerState<T>&)>;

template <typename T>
void guarded_epoch(TrainerState<T>& st, const ModelConfig& cfg, const TrainPlan& plan, const DatasetSplits& data,
                   const HeadPattern& pattern, const std::string& phase, bool collect_scoring,
                   const DivergenceHook<T>& on_divergence) {
  if (!on_divergence) return train_epoch(st, cfg, plan, data, pattern, phase, collect_scoring);
  auto last_good = st.clone();
  try {
    train_epoch(st, cfg, plan, data, pattern, phase, collect_scoring);
  } catch (const DivergenceError&) {
    on_divergence(last_good);
    throw;
  }
}

// Warm-up: all heads on; scoring gradients are summed over the final warm-up epoch.
template <typename T>
void run_warmup(TrainerState<T>& st, const ModelConfig& cfg, const TrainPlan& plan, const DatasetSplits& data,
                const DivergenceHook<T>& on_divergence = {}) {
  const auto ones = HeadPattern::all_ones(cfg.num_layers, cfg.num_heads);
  while (st.next_epoch < plan.warmup_epochs)
    guarded_epoch(st, cfg, plan, data, ones, "warmup", st.next_epoch + 1 == plan.warmup_epochs, on_divergence);
  st.warmup_loss = st.record.epochs.back().train_loss;
  st.boundary_val_accuracy = st.record.epochs.back().val_accuracy;
}

template <typename T>
ResponsivenessReport responsiveness_report(const TrainerState<T>& st, const ModelConfig& cfg, Criterion criterion,
                                           Accumulation mode, TargetReduction reduction) {
  auto scores = layer_scores(st.adapters, st.scoring, cfg.num_layers, cfg.num_heads, criterion, reduction);
  return accumulate(scores, mode, criterion, static_cast<std::size_t>(st.step));
}

struct BoundaryDecision {
  HeadPattern pattern;
  ResponsivenessReport report;
  std::string criterion;  // criterion actually used
};

// Builds the head pattern fixed for the rest of training.
template <typename T>
BoundaryDecision decide_pattern(const TrainerState<T>& st, const ModelConfig& cfg, const TrainPlan& plan,
                                const DatasetSplits& data) {
  const Selection sel{plan.ne, plan.ratio};
  if (plan.accumulation != Accumulation::grouped && plan.ne > cfg.num_heads)
    throw ConfigError("ne = " + std::to_string(plan.ne) + " exceeds " + std::to_string(cfg.num_heads) + " heads");
  std::vector<Criterion> candidates;
  if (plan.criterion == kTaylorAuto)
    candidates = {Criterion::taylor_raw, Criterion::taylor_negated, Criterion::taylor_abs};
  else
    candidates = {parse_criterion(plan.criterion)};

  BoundaryDecision d;
  d.report = responsiveness_report(st, cfg, candidates[0], plan.accumulation, plan.reduction);
  d.criterion = to_string(candidates[0]);
  d.pattern = HeadPattern::all_ones(cfg.num_layers, cfg.num_heads);
  if (plan.baseline == BaselineMode::none) return d;
  if (plan.baseline == BaselineMode::front_k) {
    d.pattern = front_k_pattern(cfg.num_layers, cfg.num_heads, plan.ne);
    d.criterion = "front_k";
    return d;
  }
  const bool nothing_to_drop =
      plan.accumulation == Accumulation::grouped ? ratio_count(plan.ratio, cfg.num_heads) == 0 : plan.ne == 0;
  if (nothing_to_drop) return d;
  double best = std::numeric_limits<double>::infinity();
  for (auto c : candidates) {
    auto report = responsiveness_report(st, cfg, c, plan.accumulation, plan.reduction);
    auto pattern = select_deactivation_set(report, sel);
    double score = 0;
    if (candidates.size() > 1) {
      if (data.val.count == 0) throw ConfigError("criterion auto-selection needs a validation split");
      score = evaluate(cfg, st.model, &st.adapters, &pattern, data.val).loss;
    }
    if (score < best) {
      best = score;
      d = BoundaryDecision{std::move(pattern), std::move(report), to_string(c)};
    }
  }
  return d;
}

template <typename T>
void run_continuation(TrainerState<T>& st, const ModelConfig& cfg, const TrainPlan& plan, const DatasetSplits& data,
                      const HeadPattern& pattern, const DivergenceHook<T>& on_divergence = {}) {
  pattern.check(cfg.num_layers, cfg.num_heads);
  while (st.next_epoch < plan.epochs) guarded_epoch(st, cfg, plan, data, pattern, "masked", false, on_divergence);
}

template <typename T>
struct AdaptationResult {
  TrainerState<T> state;
  HeadPattern pattern;
  ResponsivenessReport report;
  std::string criterion;
  EvalResult val, test;
  bool fell_back = false;
};

template <typename T>
AdaptationResult<T> finish_from_boundary(const TrainerState<T>& boundary, const ModelConfig& cfg,
                                         const TrainPlan& plan, const DatasetSplits& data,
                                         const DivergenceHook<T>& on_divergence = {}) {
  auto d = decide_pattern(boundary, cfg, plan, data);
  AdaptationResult<T> r{boundary.clone(), d.pattern, d.report, d.criterion, {}, {}, false};
  run_continuation(r.state, cfg, plan, data, r.pattern, on_divergence);
  if (data.val.count) r.val = evaluate(cfg, r.state.model, &r.state.adapters, &r.pattern, data.val);
  if (plan.auto_fallback && !r.pattern.all_active() && r.val.accuracy < boundary.boundary_val_accuracy) {
    // Masked training underperformed the warm-up: redo the continuation with ne = 0.
    r.state = boundary.clone();
    r.pattern = HeadPattern::all_ones(cfg.num_layers, cfg.num_heads);
    r.fell_back = true;
    run_continuation(r.state, cfg, plan, data, r.pattern, on_divergence);
    if (data.val.count) r.val = evaluate(cfg, r.state.model, &r.state.adapters, &r.pattern, data.val);
  }
  if (data.test.count) r.test = evaluate(cfg, r.state.model, &r.state.adapters, &r.pattern, data.test);
  return r;
}

// Full schedule from a frozen backbone: warm-up, boundary decision, continuation.
template <typename T>
AdaptationResult<T> run_adaptation(const ModelConfig& cfg, const TrainPlan& plan, const BackboneWeights<T>& backbone,
                                   const DatasetSplits& data, const DivergenceHook<T>& on_divergence = {}) {
  auto st = init_trainer(cfg, plan, backbone);
  run_warmup(st, cfg, plan, data, on_divergence);
  return finish_from_boundary(st, cfg, plan, data, on_divergence);
}

struct SweepRow {
  std::string method;
  std::size_t ne = 0;
  std::string criterion;
  double warmup_loss = 0;
  double val_accuracy = 0;
  double test_accuracy = 0;
  std::size_t deactivated = 0;  // zeros summed over layers
  std::uint64_t pattern_hash = 0;
  std::uint64_t value_path_flops = 0;  // final epoch
};

template <typename T>
SweepRow sweep_row(const std::string& method, std::size_t ne, const AdaptationResult<T>& r) {
  return SweepRow{method,
                  ne,
                  r.criterion,
                  r.state.warmup_loss,
                  r.val.accuracy,
                  r.test.accuracy,
                  r.pattern.total_zeros(),
                  r.pattern.hash(),
                  r.state.record.epochs.back().value_path_flops};
}

// One continuation per ne, all from the same warm-up boundary.
template <typename T>
std::vector<SweepRow> sweep_ne(const ModelConfig& cfg, const TrainPlan& plan, const BackboneWeights<T>& backbone,
                               const DatasetSplits& data, const std::vector<std::size_t>& ne_values,
                               std::vector<AdaptationResult<T>>* results = nullptr) {
  auto boundary = init_trainer(cfg, plan, backbone);
  run_warmup(boundary, cfg, plan, data);
  std::vector<SweepRow> rows;
  for (auto ne : ne_values) {
    auto p = plan;
    p.ne = ne;
    auto r = finish_from_boundary(boundary, cfg, p, data);
    rows.push_back(sweep_row(to_string(p.baseline), ne, r));
    if (results) results->push_back(std::move(r));
  }
  return rows;
}

struct CompareRow {
  std::string method;  // heart, front_k, lora
  std::size_t ne = 0;
  double warmup_loss_int8 = 0, test_accuracy_int8 = 0;
  double warmup_loss_fp32 = 0, test_accuracy_fp32 = 0;
};

// Heart selection vs arbitrary front-k vs plain LoRA, each from a shared
// boundary, for both int8-quantized and FP32 adapters.
template <typename T>
std::vector<CompareRow> compare_methods(const ModelConfig& cfg, const TrainPlan& plan,
                                        const BackboneWeights<T>& backbone, const DatasetSplits& data) {
  std::vector<CompareRow> rows(3);
  rows[0].method = "heart";
  rows[1].method = "front_k";
  rows[2].method = "lora";
  rows[0].ne = rows[1].ne = plan.ne;
  rows[2].ne = 0;
  for (bool quant : {true, false}) {
    auto p = plan;
    p.quantize = quant;
    auto boundary = init_trainer(cfg, p, backbone);
    run_warmup(boundary, cfg, p, data);
    for (std::size_t i = 0; i < 3; ++i) {
      auto q = p;
      q.baseline = i == 0 ? BaselineMode::heart : (i == 1 ? BaselineMode::front_k : BaselineMode::none);
      if (i == 2) q.ne = 0;
      auto r = finish_from_boundary(boundary, cfg, q, data);
      (quant ? rows[i].warmup_loss_int8 : rows[i].warmup_loss_fp32) = r.state.warmup_loss;
      (quant ? rows[i].test_accuracy_int8 : rows[i].test_accuracy_fp32) = r.test.accuracy;
    }
  }
  return rows;
}

struct PretrainPlan {
  std::size_t epochs = 8;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

template <typename T>
struct PretrainResult {
  BackboneWeights<T> weights;
  std::vector<double> train_loss;
  std::vector<double> val_accuracy;
};

// Supervised training of every backbone tensor on the pre-task; the result is
// returned frozen.
template <typename T>
PretrainResult<T> pretrain_backbone(const ModelConfig& cfg, const PretrainPlan& plan, const DatasetSplits& data) {
  cfg.validate();
  if (data.train.count == 0 || plan.epochs == 0 || plan.batch_size == 0) throw ConfigError("empty pretraining setup");
  PretrainResult<T> r;
  r.weights = init_backbone<T>(cfg, detail::split_seed(plan.seed, 0xBAC4));
  set_trainable(r.weights, true);
  const auto params = r.weights.parameters();
  AdamWState<T> st;
  const std::size_t n = data.train.count;
  const auto steps_per_epoch = (n + plan.batch_size - 1) / plan.batch_size;
  const std::uint64_t total = steps_per_epoch * plan.epochs;
  std::uint64_t step = 0;
  for (std::size_t e = 0; e < plan.epochs; ++e) {
    const auto order = epoch_order(plan.seed ^ 0x9E3779B97F4A7C15ULL, e, n);
    double loss_sum = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const auto lo = b * plan.batch_size, hi = std::min(n, lo + plan.batch_size);
      auto [images, labels] = make_batch<T>(data.train, std::span<const std::size_t>(order.data() + lo, hi - lo));
      for (auto& p : params) p->zero_grad();
      Graph<T> g;
      auto loss = g.cross_entropy(model_forward(g, cfg, r.weights, images), labels);
      if (!std::isfinite(static_cast<double>(loss->values[0]))) throw DivergenceError("pretraining diverged");
      loss_sum += static_cast<double>(loss->values[0]) * static_cast<double>(labels.size());
      g.backward(loss);
      adamw_step<T>(params, st, cosine_lr(step++, total, plan.learning_rate), plan.weight_decay);
    }
    r.train_loss.push_back(loss_sum / static_cast<double>(n));
    r.val_accuracy.push_back(data.val.count ? evaluate<T>(cfg, r.weights, nullptr, nullptr, data.val).accuracy : 0.0);
  }
  for (auto& p : params) {
    p->requires_grad = false;
    p->grad.clear();
  }
  return r;
}

struct FidelityResult {
  double taylor = 0;      // first-order score sum(grad * h_i) of the head slice
  double loss_delta = 0;  // L(h_i) - L(h_i = 0)
};

// Scores head `head` of `layer` on one batch, and measures the true loss change
// from zeroing that head's adapter slices (every adapted target of the layer).
template <typename T>
FidelityResult taylor_fidelity_check(const ModelConfig& cfg, const BackboneWeights<T>& model,
                                     const AdapterSet<T>& adapters, const Tensor<T>& images,
                                     std::span<const int> labels, std::size_t layer, std::size_t head) {
  if (layer >= cfg.num_layers || head >= cfg.num_heads) throw IndexError("fidelity check head out of range");
  auto work = adapters.clone();
  for (auto& p : work.pairs) {
    p.a->grad.clear();
    p.b->grad.clear();
  }
  ForwardOptions<T> opt;
  opt.adapters = &work;
  Graph<T> g;
  auto loss = g.cross_entropy(model_forward(g, cfg, model, images, opt), labels);
  g.backward(loss);
  const double full = static_cast<double>(loss->values[0]);

  FidelityResult r;
  auto zeroed = work.clone();
  for (std::size_t i = 0; i < work.pairs.size(); ++i) {
    const auto& p = work.pairs[i];
    if (p.layer != layer) continue;
    const bool rows = heads_on_a_rows(p.target);
    const auto& f = rows ? *p.a : *p.b;
    Tensor<T> w = f;
    if (work.quantized) w.values = fake_quantize_values(f);
    auto slices = head_slices<T>(w, f.grad, cfg.num_heads, rows);
    r.taylor += score_head(slices[head].weight, slices[head].grad, Criterion::taylor_raw);
    auto& z = rows ? *zeroed.pairs[i].a : *zeroed.pairs[i].b;
    const auto width = (rows ? z.rows() : z.cols()) / cfg.num_heads;
    for (std::size_t a = 0; a < z.rows(); ++a)
      for (std::size_t b = 0; b < z.cols(); ++b)
        if ((rows ? a : b) / width == head) z.values[a * z.cols() + b] = T(0);
  }
  ForwardOptions<T> zopt;
  zopt.adapters = &zeroed;
  Graph<T> gz(GradMode::off);
  const double without = static_cast<double>(gz.cross_entropy(model_forward(gz, cfg, model, images, zopt), labels)->values[0]);
  r.loss_delta = full - without;
  return r;
}

}  // namespace heartlora
