// SPDX-License-Identifier: Apache-2.0
#pragma once

// Head-level responsiveness: per-head scores from adapter weights and their
// accumulated gradients, cross-layer accumulation, and selection of the heads
// to deactivate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "heartlora/lora.hpp"
#include "heartlora/tensor.hpp"
#include "heartlora/types.hpp"

namespace heartlora {

enum class Criterion { taylor_raw, taylor_negated, taylor_abs, weight_l2, grad_l2 };
enum class Accumulation { global, per_layer, grouped };
// How the adapted targets of one layer are reduced to one score per head.
enum class TargetReduction { sum, q_only, v_only };

inline constexpr std::array<Criterion, 5> kAllCriteria{Criterion::taylor_raw, Criterion::taylor_negated,
                                                       Criterion::taylor_abs, Criterion::weight_l2,
                                                       Criterion::grad_l2};

inline std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::taylor_raw: return "taylor_raw";
    case Criterion::taylor_negated: return "taylor_negated";
    case Criterion::taylor_abs: return "taylor_abs";
    case Criterion::weight_l2: return "weight_l2";
    default: return "grad_l2";
  }
}

inline Criterion parse_criterion(const std::string& s) {
  for (auto c : kAllCriteria)
    if (to_string(c) == s) return c;
  if (s == "raw") return Criterion::taylor_raw;
  if (s == "neg") return Criterion::taylor_negated;
  if (s == "abs") return Criterion::taylor_abs;
  throw ConfigError("unknown criterion '" + s + "'");
}

inline std::string to_string(Accumulation a) {
  switch (a) {
    case Accumulation::global: return "global";
    case Accumulation::per_layer: return "per_layer";
    default: return "grouped";
  }
}

inline Accumulation parse_accumulation(const std::string& s) {
  if (s == "global") return Accumulation::global;
  if (s == "per_layer") return Accumulation::per_layer;
  if (s == "grouped") return Accumulation::grouped;
  throw ConfigError("unknown accumulation mode '" + s + "'");
}

inline std::string to_string(TargetReduction r) {
  switch (r) {
    case TargetReduction::sum: return "sum";
    case TargetReduction::q_only: return "q_only";
    default: return "v_only";
  }
}

inline TargetReduction parse_reduction(const std::string& s) {
  if (s == "sum") return TargetReduction::sum;
  if (s == "q_only") return TargetReduction::q_only;
  if (s == "v_only") return TargetReduction::v_only;
  throw ConfigError("unknown target reduction '" + s + "'");
}

template <typename T>
struct HeadSlice {
  Tensor<T> weight;
  Tensor<T> grad;
};

// Splits a factor into num_heads contiguous, disjoint slices: columns
// [h*w, (h+1)*w) by default, rows when along_rows is set.
template <typename T>
std::vector<HeadSlice<T>> head_slices(const Tensor<T>& weight, std::span<const T> grad,
                                      std::size_t num_heads, bool along_rows = false) {
  if (weight.ndim() != 2) throw DimensionError("head_slices expects a 2-D factor, got " + shape_str(weight.shape));
  if (grad.empty()) throw ContractError("score requested before any backward pass");
  if (grad.size() != weight.size()) throw DimensionError("head_slices: gradient length differs from weight");
  const auto r = weight.rows(), c = weight.cols();
  const auto axis = along_rows ? r : c;
  if (num_heads == 0 || axis % num_heads != 0)
    throw ConfigError("head_slices: " + std::to_string(axis) + " not divisible by " + std::to_string(num_heads) +
                      " heads");
  const auto w = axis / num_heads;
  std::vector<HeadSlice<T>> out;
  out.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const auto rows = along_rows ? w : r;
    const auto cols = along_rows ? c : w;
    std::vector<T> wv, gv;
    wv.reserve(rows * cols);
    gv.reserve(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const auto src = along_rows ? (h * w + i) * c + j : i * c + h * w + j;
        wv.push_back(weight.values[src]);
        gv.push_back(grad[src]);
      }
    out.push_back(HeadSlice<T>{Tensor<T>({rows, cols}, std::move(wv)), Tensor<T>({rows, cols}, std::move(gv))});
  }
  return out;
}

// First-order Taylor term sum(grad * weight) and its variants, or an L2 norm.
template <typename T>
double score_head(const Tensor<T>& weight, const Tensor<T>& grad, Criterion criterion) {
  if (weight.shape != grad.shape)
    throw DimensionError("score_head: " + shape_str(weight.shape) + " vs " + shape_str(grad.shape));
  double taylor = 0, wsq = 0, gsq = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    const double w = weight.values[i], g = grad.values[i];
    taylor += g * w;
    wsq += w * w;
    gsq += g * g;
  }
  switch (criterion) {
    case Criterion::taylor_raw: return taylor;
    case Criterion::taylor_negated: return -taylor;
    case Criterion::taylor_abs: return std::abs(taylor);
    case Criterion::weight_l2: return std::sqrt(wsq);
    default: return std::sqrt(gsq);
  }
}

// Gradients accumulated for scoring, aligned with AdapterSet::pairs.
template <typename T>
struct ScoringGrads {
  std::vector<std::vector<T>> a, b;

  static ScoringGrads zeros_like(const AdapterSet<T>& set) {
    ScoringGrads s;
    for (const auto& p : set.pairs) {
      s.a.emplace_back(p.a->size(), T(0));
      s.b.emplace_back(p.b->size(), T(0));
    }
    return s;
  }

  void accumulate(const AdapterSet<T>& set) {
    for (std::size_t i = 0; i < set.pairs.size(); ++i) {
      const auto& p = set.pairs[i];
      if (p.a->has_grad())
        for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += p.a->grad[j];
      if (p.b->has_grad())
        for (std::size_t j = 0; j < b[i].size(); ++j) b[i][j] += p.b->grad[j];
    }
  }

  bool empty() const { return a.empty(); }
};

// Scores every head of every layer from the adapters' head-structured factor
// (B columns for q/k/v, A rows for o) as seen by the forward pass, summed over
// the targets selected by `reduction`. Result is [num_layers x num_heads].
template <typename T>
std::vector<std::vector<double>> layer_scores(const AdapterSet<T>& set, const ScoringGrads<T>& grads,
                                              std::size_t num_layers, std::size_t num_heads, Criterion criterion,
                                              TargetReduction reduction = TargetReduction::sum) {
  if (grads.a.size() != set.pairs.size()) throw ContractError("score requested before any backward pass");
  std::vector<std::vector<double>> scores(num_layers, std::vector<double>(num_heads, 0.0));
  std::vector<bool> covered(num_layers, false);
  // Sign variants apply to the layer's summed Taylor term, not per target.
  const bool taylor = criterion == Criterion::taylor_raw || criterion == Criterion::taylor_negated ||
                      criterion == Criterion::taylor_abs;
  const auto per_target = taylor ? Criterion::taylor_raw : criterion;
  for (std::size_t i = 0; i < set.pairs.size(); ++i) {
    const auto& p = set.pairs[i];
    if (reduction == TargetReduction::q_only && p.target != Target::q) continue;
    if (reduction == TargetReduction::v_only && p.target != Target::v) continue;
    if (p.layer >= num_layers) throw ConfigError("adapter layer outside model");
    const bool rows = heads_on_a_rows(p.target);
    const auto& factor = rows ? p.a : p.b;
    const auto& g = rows ? grads.a[i] : grads.b[i];
    Tensor<T> w = *factor;
    if (set.quantized) w.values = fake_quantize_values(*factor);
    auto slices = head_slices<T>(w, g, num_heads, rows);
    for (std::size_t h = 0; h < num_heads; ++h)
      scores[p.layer][h] += score_head(slices[h].weight, slices[h].grad, per_target);
    covered[p.layer] = true;
  }
  for (std::size_t l = 0; l < num_layers; ++l) {
    if (!covered[l])
      throw ConfigError("target reduction '" + to_string(reduction) + "' selects no adapter in layer " +
                        std::to_string(l));
    for (auto& s : scores[l]) {
      if (criterion == Criterion::taylor_negated) s = -s;
      if (criterion == Criterion::taylor_abs) s = std::abs(s);
    }
  }
  return scores;
}

struct ResponsivenessReport {
  // global: one row; per_layer/grouped: one row per layer (rows may differ in
  // length when layers have different head counts).
  std::vector<std::vector<double>> scores;
  Criterion criterion = Criterion::taylor_raw;
  Accumulation mode = Accumulation::global;
  std::vector<std::size_t> layer_heads;  // head count of every layer of the model
  std::vector<std::size_t> group_of_layer;  // grouped mode only
  std::size_t snapshot_step = 0;

  std::size_t num_layers() const { return layer_heads.size(); }
};

// global: column sums over layers; per_layer: unchanged; grouped: unchanged,
// with each layer tagged by its head-count group (groups numbered in order of
// first appearance).
inline ResponsivenessReport accumulate(const std::vector<std::vector<double>>& per_layer, Accumulation mode,
                                       Criterion criterion = Criterion::taylor_raw, std::size_t step = 0) {
  if (per_layer.empty()) throw ConfigError("accumulate: no layers");
  ResponsivenessReport r;
  r.criterion = criterion;
  r.mode = mode;
  r.snapshot_step = step;
  for (const auto& row : per_layer) {
    if (row.empty()) throw ConfigError("accumulate: layer without heads");
    for (auto s : row)
      if (!std::isfinite(s)) throw NonFiniteError("accumulate: non-finite responsiveness score");
    r.layer_heads.push_back(row.size());
  }
  switch (mode) {
    case Accumulation::global: {
      const auto nh = per_layer[0].size();
      std::vector<double> total(nh, 0.0);
      for (const auto& row : per_layer) {
        if (row.size() != nh) throw ConfigError("global accumulation needs equal head counts; use grouped mode");
        for (std::size_t h = 0; h < nh; ++h) total[h] += row[h];
      }
      r.scores = {std::move(total)};
      break;
    }
    case Accumulation::per_layer:
      r.scores = per_layer;
      break;
    case Accumulation::grouped: {
      r.scores = per_layer;
      std::map<std::size_t, std::size_t> group_by_count;
      for (auto n : r.layer_heads) {
        auto it = group_by_count.find(n);
        if (it == group_by_count.end()) it = group_by_count.emplace(n, group_by_count.size()).first;
        r.group_of_layer.push_back(it->second);
      }
      break;
    }
  }
  return r;
}

// Indices of the k smallest scores; ties go to the lower index.
inline std::vector<std::size_t> smallest_k(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

inline std::size_t ratio_count(double ratio, std::size_t heads) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(heads) + 1e-9));
}

struct Selection {
  std::size_t ne = 0;   // global / per_layer
  double ratio = 0.0;   // grouped
};

// Zeros the least responsive heads of every governed scope.
inline HeadPattern select_deactivation_set(const ResponsivenessReport& report, const Selection& sel) {
  const auto nl = report.num_layers();
  HeadPattern p;
  for (auto n : report.layer_heads) p.layers.emplace_back(n, std::uint8_t{1});
  switch (report.mode) {
    case Accumulation::global: {
      const auto& row = report.scores.at(0);
      if (sel.ne > row.size())
        throw ConfigError("ne = " + std::to_string(sel.ne) + " exceeds " + std::to_string(row.size()) + " heads");
      for (auto h : smallest_k(row, sel.ne))
        for (std::size_t l = 0; l < nl; ++l) p.layers[l][h] = 0;
      break;
    }
    case Accumulation::per_layer:
      for (std::size_t l = 0; l < nl; ++l) {
        if (sel.ne > report.scores[l].size())
          throw ConfigError("ne = " + std::to_string(sel.ne) + " exceeds " +
                            std::to_string(report.scores[l].size()) + " heads in layer " + std::to_string(l));
        for (auto h : smallest_k(report.scores[l], sel.ne)) p.layers[l][h] = 0;
      }
      break;
    case Accumulation::grouped: {
      if (!(sel.ratio >= 0.0 && sel.ratio <= 1.0)) throw ConfigError("ratio must lie in [0, 1]");
      std::map<std::size_t, std::vector<double>> group_scores;
      for (std::size_t l = 0; l < nl; ++l) {
        auto& acc = group_scores[report.group_of_layer.at(l)];
        acc.resize(report.scores[l].size(), 0.0);
        for (std::size_t h = 0; h < acc.size(); ++h) acc[h] += report.scores[l][h];
      }
      for (std::size_t l = 0; l < nl; ++l) {
        const auto& acc = group_scores[report.group_of_layer[l]];
        for (auto h : smallest_k(acc, ratio_count(sel.ratio, acc.size()))) p.layers[l][h] = 0;
      }
      break;
    }
  }
  return p;
}

// Arbitrary deactivation baseline: heads 0..ne-1 in every layer.
inline HeadPattern front_k_pattern(std::size_t num_layers, std::size_t num_heads, std::size_t ne) {
  if (ne > num_heads) throw ConfigError("ne exceeds head count");
  auto p = HeadPattern::all_ones(num_layers, num_heads);
  for (auto& row : p.layers)
    for (std::size_t h = 0; h < ne; ++h) row[h] = 0;
  return p;
}

}  // namespace heartlora
