// SPDX-License-Identifier: Apache-2.0
#pragma once

// Low-rank adapters H = H0 + s * A * B on the attention projections, with
// symmetric per-tensor int8 quantization of the factors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "heartlora/tensor.hpp"
#include "heartlora/types.hpp"

namespace heartlora {

enum class Target : std::uint8_t { q = 0, k = 1, v = 2, o = 3 };

inline constexpr std::array<Target, 4> kAllTargets{Target::q, Target::k, Target::v, Target::o};

inline char target_char(Target t) { return "qkvo"[static_cast<int>(t)]; }

inline Target parse_target(char c) {
  switch (c) {
    case 'q': return Target::q;
    case 'k': return Target::k;
    case 'v': return Target::v;
    case 'o': return Target::o;
    default: throw ConfigError(std::string("unknown adapter target '") + c + "'");
  }
}

// "qv" -> {q, v}. Order and duplicates are normalised.
inline std::vector<Target> parse_targets(const std::string& s) {
  std::vector<Target> out;
  for (char c : s) {
    if (c == ',' || c == ' ') continue;
    auto t = parse_target(c);
    if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ConfigError("adapter target set is empty");
  return out;
}

inline std::string targets_string(const std::vector<Target>& ts) {
  std::string s;
  for (auto t : ts) s += target_char(t);
  return s;
}

// The output projection consumes heads on its input side, so its head slices
// are rows of A. For q/k/v they are columns of B.
inline bool heads_on_a_rows(Target t) { return t == Target::o; }

template <typename T>
struct AdapterPair {
  TensorPtr<T> a;  // [C x d]
  TensorPtr<T> b;  // [d x C]
  T scale = T(1);
  std::size_t rank = 0;
  Target target = Target::q;
  std::size_t layer = 0;

  std::string name() const {
    return "L" + std::to_string(layer) + "." + std::string(1, target_char(target));
  }
};

template <typename T>
struct AdapterSet {
  std::vector<AdapterPair<T>> pairs;
  bool quantized = false;

  const AdapterPair<T>* find(std::size_t layer, Target target) const {
    for (const auto& p : pairs)
      if (p.layer == layer && p.target == target) return &p;
    return nullptr;
  }

  std::vector<TensorPtr<T>> parameters() const {
    std::vector<TensorPtr<T>> out;
    for (const auto& p : pairs) {
      out.push_back(p.a);
      out.push_back(p.b);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : pairs) n += p.a->size() + p.b->size();
    return n;
  }

  AdapterSet clone() const {
    AdapterSet out{pairs, quantized};
    for (auto& p : out.pairs) {
      p.a = heartlora::clone(p.a);
      p.b = heartlora::clone(p.b);
    }
    return out;
  }
};

// A ~ N(0, 0.02), B = 0: the adapted model starts exactly at the backbone.
template <typename T>
AdapterSet<T> init_adapters(const ModelConfig& cfg, const std::vector<Target>& targets,
                            std::size_t rank, T scale, std::uint64_t seed) {
  cfg.validate();
  const auto c = cfg.embed_dim;
  if (rank < 1 || rank > c / 2)
    throw ConfigError("adapter rank " + std::to_string(rank) + " must be in [1, C/2 = " +
                      std::to_string(c / 2) + "]");
  if (!(scale >= T(0)) || !std::isfinite(static_cast<double>(scale)))
    throw ConfigError("adapter scale must be finite and non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  AdapterSet<T> set;
  for (std::size_t l = 0; l < cfg.num_layers; ++l)
    for (auto t : targets) {
      std::vector<T> av(c * rank);
      for (auto& x : av) x = static_cast<T>(normal(rng));
      set.pairs.push_back(AdapterPair<T>{make_tensor<T>({c, rank}, std::move(av), true),
                                         zeros<T>({rank, c}, true), scale, rank, t, l});
    }
  return set;
}

struct QuantizedTensor {
  std::vector<std::int8_t> q;
  float scale = 1.0f;
  Shape shape;
};

// Symmetric per-tensor int8: scale = max|x| / 127 (1 for an all-zero tensor),
// q = clamp(round(x / scale), -127, 127).
template <typename T>
QuantizedTensor quantize(std::span<const T> x, Shape shape) {
  if (shape_numel(shape) != x.size()) throw DimensionError("quantize: shape/value count mismatch");
  T amax = 0;
  for (auto v : x) {
    if (!std::isfinite(static_cast<double>(v))) throw NonFiniteError("quantize: non-finite input");
    amax = std::max(amax, static_cast<T>(std::abs(v)));
  }
  QuantizedTensor out;
  out.shape = std::move(shape);
  out.scale = amax > T(0) ? static_cast<float>(amax / T(127)) : 1.0f;
  out.q.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto r = std::nearbyint(static_cast<double>(x[i]) / out.scale);
    out.q[i] = static_cast<std::int8_t>(std::clamp(r, -127.0, 127.0));
  }
  return out;
}

template <typename T>
std::vector<T> dequantize(const QuantizedTensor& q) {
  std::vector<T> out(q.q.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(q.q[i] * q.scale);
  return out;
}

template <typename T>
std::vector<T> fake_quantize_values(const Tensor<T>& t) {
  return dequantize<T>(quantize<T>(t.values, t.shape));
}

// The factor as seen by the forward pass: itself, or its dequantized int8
// image with a straight-through gradient.
template <typename T>
TensorPtr<T> compute_factor(Graph<T>& g, const TensorPtr<T>& f, bool quantized) {
  if (!quantized) return f;
  return g.straight_through(f, fake_quantize_values(*f));
}

// H0 + s * (A B). Gradient reaches only A and B (H0 is frozen).
template <typename T>
TensorPtr<T> effective_weight(Graph<T>& g, const TensorPtr<T>& h0, const AdapterPair<T>& pair,
                              bool quantized = false) {
  if (h0->ndim() != 2 || pair.a->rows() != h0->rows() || pair.b->cols() != h0->cols() ||
      pair.a->cols() != pair.b->rows())
    throw DimensionError("effective_weight: H0 " + shape_str(h0->shape) + ", A " +
                         shape_str(pair.a->shape) + ", B " + shape_str(pair.b->shape));
  auto a = compute_factor(g, pair.a, quantized);
  auto b = compute_factor(g, pair.b, quantized);
  return g.add(h0, g.scale(g.matmul(a, b), pair.scale));
}

// One adapter with deactivated head slices dropped. Elements are either f32 or
// int8 with one per-tensor scale per factor, taken before the drop; kept values
// equal the ones the forward pass used.
struct StoredAdapter {
  std::size_t layer = 0;
  Target target = Target::q;
  std::size_t rank = 0;
  std::size_t width = 0;  // C
  double scale = 1.0;
  std::vector<std::size_t> kept_heads;
  bool int8 = false;
  std::vector<float> a_f32, b_f32;
  std::vector<std::int8_t> a_i8, b_i8;
  float a_qscale = 1.0f, b_qscale = 1.0f;

  std::size_t a_elements() const { return int8 ? a_i8.size() : a_f32.size(); }
  std::size_t b_elements() const { return int8 ? b_i8.size() : b_f32.size(); }
  std::size_t element_bytes() const { return int8 ? 1 : 4; }
  std::size_t a_bytes() const { return a_elements() * element_bytes(); }
  std::size_t b_bytes() const { return b_elements() * element_bytes(); }
};

struct StoredAdapterSet {
  std::size_t num_heads = 0;
  std::vector<StoredAdapter> adapters;

  std::size_t a_bytes() const {
    std::size_t n = 0;
    for (const auto& s : adapters) n += s.a_bytes();
    return n;
  }
  std::size_t b_bytes() const {
    std::size_t n = 0;
    for (const auto& s : adapters) n += s.b_bytes();
    return n;
  }
  std::size_t payload_bytes() const { return a_bytes() + b_bytes(); }
};

template <typename T>
StoredAdapterSet merge_for_storage(const AdapterSet<T>& set, const HeadPattern& pattern,
                                   std::size_t num_heads) {
  StoredAdapterSet out;
  out.num_heads = num_heads;
  for (const auto& p : set.pairs) {
    const auto c = p.b->cols();
    const auto d = p.rank;
    if (num_heads == 0 || c % num_heads != 0) throw ConfigError("merge_for_storage: width/heads mismatch");
    if (p.layer >= pattern.num_layers() || pattern.layers[p.layer].size() != num_heads)
      throw ConfigError("merge_for_storage: pattern does not cover layer " + std::to_string(p.layer));
    const auto dh = c / num_heads;
    const auto& row = pattern.layers[p.layer];
    StoredAdapter s;
    s.layer = p.layer;
    s.target = p.target;
    s.rank = d;
    s.width = c;
    s.scale = static_cast<double>(p.scale);
    s.int8 = set.quantized;
    for (std::size_t h = 0; h < num_heads; ++h)
      if (row[h]) s.kept_heads.push_back(h);

    std::vector<float> a(p.a->values.begin(), p.a->values.end());
    std::vector<float> b(p.b->values.begin(), p.b->values.end());
    std::vector<std::int8_t> aq, bq;
    if (s.int8) {
      auto qa = quantize<T>(p.a->values, p.a->shape);
      auto qb = quantize<T>(p.b->values, p.b->shape);
      s.a_qscale = qa.scale;
      s.b_qscale = qb.scale;
      aq = std::move(qa.q);
      bq = std::move(qb.q);
    }
    // Keep only active head slices along the head axis.
    auto keep = [&](auto& full_a, auto& full_b, auto& dst_a, auto& dst_b) {
      if (heads_on_a_rows(p.target)) {
        for (auto h : s.kept_heads)
          for (std::size_t r = h * dh; r < (h + 1) * dh; ++r)
            for (std::size_t j = 0; j < d; ++j) dst_a.push_back(full_a[r * d + j]);
        dst_b.assign(full_b.begin(), full_b.end());
      } else {
        dst_a.assign(full_a.begin(), full_a.end());
        for (std::size_t r = 0; r < d; ++r)
          for (auto h : s.kept_heads)
            for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) dst_b.push_back(full_b[r * c + j]);
      }
    };
    if (s.int8)
      keep(aq, bq, s.a_i8, s.b_i8);
    else
      keep(a, b, s.a_f32, s.b_f32);
    out.adapters.push_back(std::move(s));
  }
  return out;
}

// Rebuilds full-size factors; dropped slices come back as zeros. The result is
// in compute precision already (quantized = false).
template <typename T>
AdapterSet<T> restore_from_storage(const StoredAdapterSet& stored) {
  AdapterSet<T> out;
  for (const auto& s : stored.adapters) {
    const auto c = s.width, d = s.rank;
    const auto dh = c / stored.num_heads;
    auto value_a = [&](std::size_t i) -> T {
      return s.int8 ? static_cast<T>(s.a_i8[i] * s.a_qscale) : static_cast<T>(s.a_f32[i]);
    };
    auto value_b = [&](std::size_t i) -> T {
      return s.int8 ? static_cast<T>(s.b_i8[i] * s.b_qscale) : static_cast<T>(s.b_f32[i]);
    };
    auto a = zeros<T>({c, d}, true);
    auto b = zeros<T>({d, c}, true);
    std::size_t idx = 0;
    if (heads_on_a_rows(s.target)) {
      for (auto h : s.kept_heads)
        for (std::size_t r = h * dh; r < (h + 1) * dh; ++r)
          for (std::size_t j = 0; j < d; ++j) a->values[r * d + j] = value_a(idx++);
      for (std::size_t i = 0; i < b->size(); ++i) b->values[i] = value_b(i);
    } else {
      for (std::size_t i = 0; i < a->size(); ++i) a->values[i] = value_a(i);
      for (std::size_t r = 0; r < d; ++r)
        for (auto h : s.kept_heads)
          for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) b->values[r * c + j] = value_b(idx++);
    }
    out.pairs.push_back(AdapterPair<T>{a, b, static_cast<T>(s.scale), d, s.target, s.layer});
  }
  return out;
}

}  // namespace heartlora
