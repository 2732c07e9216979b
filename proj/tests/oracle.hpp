// SPDX-License-Identifier: Apache-2.0
#pragma once

// Independent reference computations used by the tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "heartlora/model.hpp"
#include "heartlora/tensor.hpp"

namespace oracle {

using heartlora::Graph;
using heartlora::GradMode;
using heartlora::TensorPtr;

using LossFn = std::function<TensorPtr<double>(Graph<double>&)>;

struct GradCheck {
  double max_rel_err = 0;
  std::size_t checked = 0;
};

enum class Stencil { three_point, five_point };

// Central differences with step h on every element of `params`, compared to
// the analytic gradient from one backward pass. Relative error uses
// max(|analytic|, |numeric|, floor) as denominator. The five-point stencil has
// O(h^4) truncation error instead of O(h^2).
inline GradCheck check_gradients(const LossFn& loss_fn, const std::vector<TensorPtr<double>>& params,
                                 double h = 1e-4, double floor = 1e-5, Stencil stencil = Stencil::three_point) {
  for (auto& p : params) p->zero_grad();
  {
    Graph<double> g;
    auto loss = loss_fn(g);
    g.backward(loss);
  }
  auto eval = [&] {
    Graph<double> g(GradMode::off);
    return loss_fn(g)->values[0];
  };
  GradCheck r;
  for (auto& p : params) {
    const auto analytic = p->has_grad() ? p->grad : std::vector<double>(p->size(), 0.0);
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double x0 = p->values[i];
      auto at = [&](double dx) {
        p->values[i] = x0 + dx;
        const double v = eval();
        p->values[i] = x0;
        return v;
      };
      const double numeric = stencil == Stencil::three_point
                                 ? (at(h) - at(-h)) / (2 * h)
                                 : (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      r.max_rel_err = std::max(r.max_rel_err, std::abs(analytic[i] - numeric) / denom);
      ++r.checked;
    }
  }
  return r;
}

template <typename T>
TensorPtr<T> random_tensor(heartlora::Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                           bool requires_grad = true) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<T> v(heartlora::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(n(rng));
  return heartlora::make_tensor<T>(std::move(shape), std::move(v), requires_grad);
}

// 2 layers, 4 heads, width 16, 8x8 RGB images in 4x4 patches, 4 classes.
inline heartlora::ModelConfig toy_config() {
  heartlora::ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 3;
  c.embed_dim = 16;
  c.num_heads = 4;
  c.num_layers = 2;
  c.mlp_ratio = 2;
  c.num_classes = 4;
  return c;
}

// Overwrites every weight with N(0, stddev) so the model is far from linear.
template <typename T>
void randomize(heartlora::BackboneWeights<T>& w, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& [name, t] : w.named_tensors())
    for (auto& x : t->values) x = static_cast<T>(x + n(rng));
}

template <typename T>
heartlora::Tensor<T> random_images(const heartlora::ModelConfig& c, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<T> v(batch * c.channels * c.image_size * c.image_size);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return heartlora::Tensor<T>({batch, c.channels, c.image_size, c.image_size}, std::move(v));
}

}  // namespace oracle
