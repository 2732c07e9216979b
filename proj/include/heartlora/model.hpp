// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tiny pre-norm Vision Transformer with head-maskable multi-head self-attention
// and optional low-rank adapters on the attention projections.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "heartlora/lora.hpp"
#include "heartlora/tensor.hpp"
#include "heartlora/types.hpp"

namespace heartlora {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct BlockWeights {
  TensorPtr<T> ln1_g, ln1_b;
  TensorPtr<T> wq, wk, wv, wo;  // [C x C], x * W convention; head h owns columns of wq/wk/wv, rows of wo
  TensorPtr<T> bq, bk, bv, bo;  // null unless attn_bias
  TensorPtr<T> ln2_g, ln2_b;
  TensorPtr<T> w1, b1, w2, b2;

  const TensorPtr<T>& projection(Target t) const {
    switch (t) {
      case Target::q: return wq;
      case Target::k: return wk;
      case Target::v: return wv;
      default: return wo;
    }
  }
};

template <typename T>
struct BackboneWeights {
  TensorPtr<T> patch_w, patch_b;  // [P x C], [C]
  TensorPtr<T> cls;               // [1 x C]
  TensorPtr<T> pos;               // [tokens x C]
  std::vector<BlockWeights<T>> blocks;
  TensorPtr<T> lnf_g, lnf_b;
  TensorPtr<T> head_w, head_b;  // classifier [C x K], [K]

  // Stable, unique names in a fixed order. The classifier comes last.
  std::vector<std::pair<std::string, TensorPtr<T>>> named_tensors() const {
    std::vector<std::pair<std::string, TensorPtr<T>>> out{
        {"patch_w", patch_w}, {"patch_b", patch_b}, {"cls", cls}, {"pos", pos}};
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto& b = blocks[l];
      const auto p = "block" + std::to_string(l) + ".";
      std::vector<std::pair<const char*, TensorPtr<T>>> items{
          {"ln1_g", b.ln1_g}, {"ln1_b", b.ln1_b}, {"wq", b.wq}, {"wk", b.wk}, {"wv", b.wv},
          {"wo", b.wo},       {"bq", b.bq},       {"bk", b.bk}, {"bv", b.bv}, {"bo", b.bo},
          {"ln2_g", b.ln2_g}, {"ln2_b", b.ln2_b}, {"w1", b.w1}, {"b1", b.b1}, {"w2", b.w2},
          {"b2", b.b2}};
      for (auto& [n, t] : items)
        if (t) out.emplace_back(p + n, t);
    }
    out.emplace_back("lnf_g", lnf_g);
    out.emplace_back("lnf_b", lnf_b);
    out.emplace_back("head_w", head_w);
    out.emplace_back("head_b", head_b);
    return out;
  }

  std::vector<TensorPtr<T>> classifier() const { return {head_w, head_b}; }

  std::vector<TensorPtr<T>> parameters() const {
    std::vector<TensorPtr<T>> out;
    for (auto& [n, t] : named_tensors()) out.push_back(t);
    return out;
  }

  BackboneWeights clone() const {
    BackboneWeights out = *this;
    auto cp = [](TensorPtr<T>& t) {
      if (t) t = heartlora::clone(t);
    };
    for (auto* t : {&out.patch_w, &out.patch_b, &out.cls, &out.pos, &out.lnf_g, &out.lnf_b,
                    &out.head_w, &out.head_b})
      cp(*t);
    for (auto& b : out.blocks)
      for (auto* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.bq, &b.bk, &b.bv, &b.bo,
                      &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
        cp(*t);
    return out;
  }
};

namespace detail {

template <typename T>
TensorPtr<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(normal(rng));
  return make_tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
TensorPtr<T> filled(Shape shape, T value) {
  auto n = shape_numel(shape);
  return make_tensor<T>(std::move(shape), std::vector<T>(n, value));
}

}  // namespace detail

// Truncation-free N(0, 0.02) weights, zero biases, unit LayerNorm gains.
template <typename T>
BackboneWeights<T> init_backbone(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto c = cfg.embed_dim;
  BackboneWeights<T> w;
  w.patch_w = detail::normal_tensor<T>({cfg.patch_dim(), c}, 0.02, rng);
  w.patch_b = zeros<T>({c});
  w.cls = detail::normal_tensor<T>({1, c}, 0.02, rng);
  w.pos = detail::normal_tensor<T>({cfg.tokens(), c}, 0.02, rng);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    BlockWeights<T> b;
    b.ln1_g = detail::filled<T>({c}, T(1));
    b.ln1_b = zeros<T>({c});
    b.wq = detail::normal_tensor<T>({c, c}, 0.02, rng);
    b.wk = detail::normal_tensor<T>({c, c}, 0.02, rng);
    b.wv = detail::normal_tensor<T>({c, c}, 0.02, rng);
    b.wo = detail::normal_tensor<T>({c, c}, 0.02, rng);
    if (cfg.attn_bias) {
      b.bq = zeros<T>({c});
      b.bk = zeros<T>({c});
      b.bv = zeros<T>({c});
      b.bo = zeros<T>({c});
    }
    b.ln2_g = detail::filled<T>({c}, T(1));
    b.ln2_b = zeros<T>({c});
    b.w1 = detail::normal_tensor<T>({c, cfg.mlp_dim()}, 0.02, rng);
    b.b1 = zeros<T>({cfg.mlp_dim()});
    b.w2 = detail::normal_tensor<T>({cfg.mlp_dim(), c}, 0.02, rng);
    b.b2 = zeros<T>({c});
    w.blocks.push_back(std::move(b));
  }
  w.lnf_g = detail::filled<T>({c}, T(1));
  w.lnf_b = zeros<T>({c});
  w.head_w = detail::normal_tensor<T>({c, cfg.num_classes}, 0.02, rng);
  w.head_b = zeros<T>({cfg.num_classes});
  return w;
}

// Fresh classifier for a new label set.
template <typename T>
void reset_classifier(BackboneWeights<T>& w, std::size_t num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto c = w.head_w->rows();
  w.head_w = detail::normal_tensor<T>({c, num_classes}, 0.02, rng);
  w.head_b = zeros<T>({num_classes});
}

// Backbone frozen, classifier trainable (or everything trainable for pretraining).
template <typename T>
void set_trainable(BackboneWeights<T>& w, bool whole_backbone) {
  for (auto& t : w.parameters()) t->requires_grad = whole_backbone;
  for (auto& t : w.classifier()) t->requires_grad = true;
}

// Head-attributable work in the value/output path: V projection columns,
// attention-weighted sum, and output projection rows of every evaluated head.
struct FlopCounter {
  std::uint64_t value_path = 0;
  std::uint64_t attention_scores = 0;  // QK^T and softmax-weighted sums of evaluated heads
  std::uint64_t heads_evaluated = 0;
};

template <typename T>
struct AttentionCapture {
  // Per layer: [batch][head][tokens][tokens], zero for inactive heads.
  std::vector<std::vector<T>> probs;
};

template <typename T>
struct ForwardOptions {
  const AdapterSet<T>* adapters = nullptr;
  const HeadPattern* pattern = nullptr;  // null: every head active
  FlopCounter* flops = nullptr;
  AttentionCapture<T>* capture = nullptr;
};

template <typename T>
TensorPtr<T> project(Graph<T>& g, const TensorPtr<T>& x, const BlockWeights<T>& blk, Target target,
                     const TensorPtr<T>& bias, const AdapterSet<T>* adapters, std::size_t layer) {
  const auto& h0 = blk.projection(target);
  const AdapterPair<T>* pair = adapters ? adapters->find(layer, target) : nullptr;
  auto w = pair ? effective_weight(g, h0, *pair, adapters->quantized) : h0;
  auto y = g.matmul(x, w);
  return bias ? g.add_bias(y, bias) : y;
}

// Multi-head self-attention on `batch` stacked sequences. x is the (already
// normalised) input [(batch*tokens) x C]. Head h's value output is multiplied by
// pattern[h] before the output projection; a zero entry skips the head.
template <typename T>
TensorPtr<T> mhsa_forward(Graph<T>& g, const ModelConfig& cfg, const TensorPtr<T>& x,
                          const BlockWeights<T>& blk, std::size_t layer, std::size_t batch,
                          std::span<const std::uint8_t> head_pattern,
                          const AdapterSet<T>* adapters = nullptr, FlopCounter* flops = nullptr,
                          AttentionCapture<T>* capture = nullptr) {
  if (head_pattern.size() != cfg.num_heads)
    throw ConfigError("head pattern has " + std::to_string(head_pattern.size()) + " entries, model has " +
                      std::to_string(cfg.num_heads) + " heads");
  for (auto p : head_pattern)
    if (p > 1) throw ConfigError("head pattern entries must be 0 or 1");
  auto q = project(g, x, blk, Target::q, blk.bq, adapters, layer);
  auto k = project(g, x, blk, Target::k, blk.bk, adapters, layer);
  auto v = project(g, x, blk, Target::v, blk.bv, adapters, layer);
  std::vector<T>* probs = nullptr;
  if (capture) {
    capture->probs.emplace_back();
    probs = &capture->probs.back();
  }
  auto heads = g.attention(q, k, v, batch, cfg.num_heads, head_pattern, probs);
  if (flops) {
    const std::uint64_t t = x->rows() / batch, c = cfg.embed_dim, dh = cfg.head_dim();
    for (auto p : head_pattern) {
      if (!p) continue;
      flops->heads_evaluated += batch;
      flops->value_path += batch * (2 * t * c * dh + 2 * t * t * dh + 2 * t * dh * c);
      flops->attention_scores += batch * (2 * t * t * dh);
    }
  }
  return project(g, heads, blk, Target::o, blk.bo, adapters, layer);
}

// images: [batch x channels x H x W] -> patch rows [(batch * patches) x (channels * p * p)].
template <typename T>
TensorPtr<T> patchify(const ModelConfig& cfg, const Tensor<T>& images) {
  if (images.ndim() != 4 || images.shape[1] != cfg.channels || images.shape[2] != cfg.image_size ||
      images.shape[3] != cfg.image_size)
    throw DimensionError("images " + shape_str(images.shape) + " do not match model input [b x " +
                         std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size) + "]");
  const auto b = images.shape[0], ch = cfg.channels, s = cfg.image_size, p = cfg.patch_size;
  const auto grid = cfg.grid();
  auto out = zeros<T>({b * grid * grid, cfg.patch_dim()});
  std::size_t idx = 0;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t py = 0; py < p; ++py)
            for (std::size_t px = 0; px < p; ++px)
              out->values[idx++] =
                  images.values[((n * ch + c) * s + gy * p + py) * s + gx * p + px];
  return out;
}

template <typename T>
TensorPtr<T> model_forward(Graph<T>& g, const ModelConfig& cfg, const BackboneWeights<T>& w,
                           const Tensor<T>& images, const ForwardOptions<T>& opt = {}) {
  cfg.validate();
  if (opt.pattern) opt.pattern->check(cfg.num_layers, cfg.num_heads);
  const auto batch = images.shape.at(0);
  const auto t = cfg.tokens();
  const T eps = static_cast<T>(kLayerNormEps);
  auto patches = patchify(cfg, images);
  auto emb = g.add_bias(g.matmul(patches, w.patch_w), w.patch_b);
  auto x = g.embedding_add(emb, w.cls, w.pos, batch);
  const std::vector<std::uint8_t> all_on(cfg.num_heads, 1);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& blk = w.blocks[l];
    std::span<const std::uint8_t> row = opt.pattern ? std::span<const std::uint8_t>(opt.pattern->layers[l])
                                                    : std::span<const std::uint8_t>(all_on);
    auto h = g.layer_norm(x, blk.ln1_g, blk.ln1_b, eps);
    x = g.add(x, mhsa_forward(g, cfg, h, blk, l, batch, row, opt.adapters, opt.flops, opt.capture));
    auto m = g.layer_norm(x, blk.ln2_g, blk.ln2_b, eps);
    m = g.gelu(g.add_bias(g.matmul(m, blk.w1), blk.b1));
    m = g.add_bias(g.matmul(m, blk.w2), blk.b2);
    x = g.add(x, m);
  }
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t n = 0; n < batch; ++n) cls_rows[n] = n * t;
  auto cls = g.layer_norm(g.gather_rows(x, std::move(cls_rows)), w.lnf_g, w.lnf_b, eps);
  return g.add_bias(g.matmul(cls, w.head_w), w.head_b);
}

}  // namespace heartlora
