// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense row-major tensors with a tape-based reverse-mode engine.
//
// Every op lives on Graph<T>. When a graph records, each op whose inputs need
// gradients appends one tape entry; backward() walks the tape once in reverse
// execution order. Leaf gradients ACCUMULATE across backward calls and it is the
// caller's job (normally the optimizer) to zero them between steps.
//
// T is float for training and double for the gradient-oracle reference path.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "heartlora/error.hpp"

namespace heartlora {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

#ifdef NDEBUG
inline std::atomic<bool> g_finite_checks{false};
#else
inline std::atomic<bool> g_finite_checks{true};
#endif

// NaN/Inf scanning of every op output. On by default in debug builds; tests
// switch it on explicitly.
inline void set_finite_checks(bool on) { g_finite_checks.store(on); }
inline bool finite_checks() { return g_finite_checks.load(std::memory_order_relaxed); }

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until first touched by backward
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> v, bool needs_grad = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(needs_grad) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
  }

  std::size_t size() const { return values.size(); }
  std::size_t ndim() const { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  bool has_grad() const { return !grad.empty(); }

  T& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> make_tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
  return std::make_shared<Tensor<T>>(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
TensorPtr<T> zeros(Shape shape, bool requires_grad = false) {
  auto n = shape_numel(shape);
  return make_tensor<T>(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

// Deep copy, grad included.
template <typename T>
TensorPtr<T> clone(const TensorPtr<T>& t) {
  return std::make_shared<Tensor<T>>(*t);
}

template <typename To, typename From>
TensorPtr<To> cast(const TensorPtr<From>& t) {
  std::vector<To> v(t->values.begin(), t->values.end());
  auto out = make_tensor<To>(t->shape, std::move(v), t->requires_grad);
  if (t->has_grad()) out->grad.assign(t->grad.begin(), t->grad.end());
  return out;
}

namespace kernel {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void transpose(const T* a, T* out, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

// Numerically stable in-place softmax of one row.
template <typename T>
void softmax_row(T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

// grad_in = P * (grad_out - <grad_out, P>) for one row.
template <typename T>
void softmax_row_backward(const T* p, const T* gout, T* gin, std::size_t n) {
  T dot = 0;
  for (std::size_t j = 0; j < n; ++j) dot += gout[j] * p[j];
  for (std::size_t j = 0; j < n; ++j) gin[j] += p[j] * (gout[j] - dot);
}

}  // namespace kernel

// Tanh-approximation GELU: 0.5 x (1 + tanh(k0 (x + k1 x^3))).
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluCubic = 0.044715;

enum class GradMode { record, off };

template <typename T>
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::record) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t num_ops() const { return tape_.size(); }
  bool recording() const { return mode_ == GradMode::record; }
  void clear() { tape_.clear(); }

  TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    require_2d(*a, "matmul");
    require_2d(*b, "matmul");
    const auto m = a->rows(), k = a->cols(), n = b->cols();
    if (b->rows() != k)
      throw DimensionError("matmul inner dimensions differ: " + shape_str(a->shape) + " * " +
                           shape_str(b->shape));
    auto out = zeros<T>({m, n});
    kernel::gemm_nn(a->values.data(), b->values.data(), out->values.data(), m, k, n);
    return record("matmul", out, {a, b}, [a, b, out, m, k, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        kernel::gemm_nt(out->grad.data(), b->values.data(), a->grad.data(), m, n, k);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        kernel::gemm_tn(a->values.data(), out->grad.data(), b->grad.data(), k, m, n);
      }
    });
  }

  TensorPtr<T> transpose(const TensorPtr<T>& a) {
    require_2d(*a, "transpose");
    const auto m = a->rows(), n = a->cols();
    auto out = zeros<T>({n, m});
    kernel::transpose(a->values.data(), out->values.data(), m, n);
    return record("transpose", out, {a}, [a, out, m, n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += out->grad[j * m + i];
    });
  }

  TensorPtr<T> reshape(const TensorPtr<T>& a, Shape shape) {
    if (shape_numel(shape) != a->size())
      throw DimensionError("reshape " + shape_str(a->shape) + " -> " + shape_str(shape));
    auto out = make_tensor<T>(std::move(shape), a->values);
    return record("reshape", out, {a}, [a, out] {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
    });
  }

  TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    require_same(*a, *b, "add");
    auto out = make_tensor<T>(a->shape, a->values);
    for (std::size_t i = 0; i < out->size(); ++i) out->values[i] += b->values[i];
    return record("add", out, {a, b}, [a, b, out] {
      for (auto* t : {a.get(), b.get()}) {
        if (!t->requires_grad) continue;
        t->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) t->grad[i] += out->grad[i];
      }
    });
  }

  TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    require_same(*a, *b, "sub");
    auto out = make_tensor<T>(a->shape, a->values);
    for (std::size_t i = 0; i < out->size(); ++i) out->values[i] -= b->values[i];
    return record("sub", out, {a, b}, [a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] -= out->grad[i];
      }
    });
  }

  TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    require_same(*a, *b, "mul");
    auto out = make_tensor<T>(a->shape, a->values);
    for (std::size_t i = 0; i < out->size(); ++i) out->values[i] *= b->values[i];
    return record("mul", out, {a, b}, [a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * b->values[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i] * a->values[i];
      }
    });
  }

  TensorPtr<T> scale(const TensorPtr<T>& a, T factor) {
    auto out = make_tensor<T>(a->shape, a->values);
    for (auto& v : out->values) v *= factor;
    return record("scale", out, {a}, [a, out, factor] {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * factor;
    });
  }

  // a[m x n] + bias[n] broadcast over rows.
  TensorPtr<T> add_bias(const TensorPtr<T>& a, const TensorPtr<T>& bias) {
    require_2d(*a, "add_bias");
    const auto m = a->rows(), n = a->cols();
    if (bias->size() != n)
      throw DimensionError("add_bias: " + shape_str(a->shape) + " + " + shape_str(bias->shape));
    auto out = make_tensor<T>(a->shape, a->values);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out->values[i * n + j] += bias->values[j];
    return record("add_bias", out, {a, bias}, [a, bias, out, m, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
      }
      if (bias->requires_grad) {
        bias->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) bias->grad[j] += out->grad[i * n + j];
      }
    });
  }

  // Columns [start, end) of a 2-D tensor.
  TensorPtr<T> slice_cols(const TensorPtr<T>& a, std::size_t start, std::size_t end) {
    require_2d(*a, "slice_cols");
    const auto m = a->rows(), n = a->cols();
    if (start >= end || end > n)
      throw IndexError("slice_cols [" + std::to_string(start) + ", " + std::to_string(end) +
                       ") out of range for " + shape_str(a->shape));
    const auto w = end - start;
    auto out = zeros<T>({m, w});
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(a->values.begin() + i * n + start, w, out->values.begin() + i * w);
    return record("slice_cols", out, {a}, [a, out, m, n, w, start] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) a->grad[i * n + start + j] += out->grad[i * w + j];
    });
  }

  TensorPtr<T> concat_cols(const std::vector<TensorPtr<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of nothing");
    const auto m = parts[0]->rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
      require_2d(*p, "concat_cols");
      if (p->rows() != m)
        throw DimensionError("concat_cols row mismatch: " + shape_str(parts[0]->shape) + " vs " +
                             shape_str(p->shape));
      n += p->cols();
    }
    auto out = zeros<T>({m, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
      const auto w = p->cols();
      for (std::size_t i = 0; i < m; ++i)
        std::copy_n(p->values.begin() + i * w, w, out->values.begin() + i * n + off);
      off += w;
    }
    return record("concat_cols", out, parts, [parts, out, m, n] {
      std::size_t off = 0;
      for (const auto& p : parts) {
        const auto w = p->cols();
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) p->grad[i * w + j] += out->grad[i * n + off + j];
        }
        off += w;
      }
    });
  }

  // Rows of a selected by index (duplicates allowed).
  TensorPtr<T> gather_rows(const TensorPtr<T>& a, std::vector<std::size_t> idx) {
    require_2d(*a, "gather_rows");
    const auto n = a->cols();
    for (auto r : idx)
      if (r >= a->rows())
        throw IndexError("gather_rows index " + std::to_string(r) + " for " + shape_str(a->shape));
    auto out = zeros<T>({idx.size(), n});
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(a->values.begin() + idx[i] * n, n, out->values.begin() + i * n);
    return record("gather_rows", out, {a}, [a, out, idx = std::move(idx), n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) a->grad[idx[i] * n + j] += out->grad[i * n + j];
    });
  }

  // Token assembly for a ViT: for each of `batch` images, row 0 is cls + pos[0]
  // and row 1 + j is patches[image * np + j] + pos[1 + j].
  TensorPtr<T> embedding_add(const TensorPtr<T>& patches, const TensorPtr<T>& cls,
                             const TensorPtr<T>& pos, std::size_t batch) {
    require_2d(*patches, "embedding_add");
    require_2d(*pos, "embedding_add");
    const auto c = patches->cols();
    const auto t = pos->rows();
    if (batch == 0 || patches->rows() != batch * (t - 1) || pos->cols() != c || cls->size() != c)
      throw DimensionError("embedding_add: patches " + shape_str(patches->shape) + ", cls " +
                           shape_str(cls->shape) + ", pos " + shape_str(pos->shape));
    const auto np = t - 1;
    auto out = zeros<T>({batch * t, c});
    for (std::size_t s = 0; s < batch; ++s) {
      T* dst = out->values.data() + s * t * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] = cls->values[j] + pos->values[j];
      for (std::size_t r = 0; r < np; ++r)
        for (std::size_t j = 0; j < c; ++j)
          dst[(r + 1) * c + j] = patches->values[(s * np + r) * c + j] + pos->values[(r + 1) * c + j];
    }
    return record("embedding_add", out, {patches, cls, pos}, [patches, cls, pos, out, batch, t, c, np] {
      if (patches->requires_grad) patches->ensure_grad();
      if (cls->requires_grad) cls->ensure_grad();
      if (pos->requires_grad) pos->ensure_grad();
      for (std::size_t s = 0; s < batch; ++s) {
        const T* g = out->grad.data() + s * t * c;
        for (std::size_t r = 0; r < t; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const T v = g[r * c + j];
            if (pos->requires_grad) pos->grad[r * c + j] += v;
            if (r == 0) {
              if (cls->requires_grad) cls->grad[j] += v;
            } else if (patches->requires_grad) {
              patches->grad[(s * np + r - 1) * c + j] += v;
            }
          }
      }
    });
  }

  TensorPtr<T> sum(const TensorPtr<T>& a) {
    T acc = 0;
    for (auto v : a->values) acc += v;
    auto out = make_tensor<T>({1}, {acc});
    return record("sum", out, {a}, [a, out] {
      a->ensure_grad();
      for (auto& g : a->grad) g += out->grad[0];
    });
  }

  TensorPtr<T> mean(const TensorPtr<T>& a) {
    T acc = 0;
    for (auto v : a->values) acc += v;
    const T inv = T(1) / static_cast<T>(a->size());
    auto out = make_tensor<T>({1}, {acc * inv});
    return record("mean", out, {a}, [a, out, inv] {
      a->ensure_grad();
      for (auto& g : a->grad) g += out->grad[0] * inv;
    });
  }

  TensorPtr<T> softmax_rows(const TensorPtr<T>& a) {
    require_2d(*a, "softmax_rows");
    const auto m = a->rows(), n = a->cols();
    auto out = make_tensor<T>(a->shape, a->values);
    for (std::size_t i = 0; i < m; ++i) kernel::softmax_row(out->values.data() + i * n, n);
    return record("softmax_rows", out, {a}, [a, out, m, n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        kernel::softmax_row_backward(out->values.data() + i * n, out->grad.data() + i * n,
                                     a->grad.data() + i * n, n);
    });
  }

  TensorPtr<T> layer_norm(const TensorPtr<T>& a, const TensorPtr<T>& gamma,
                          const TensorPtr<T>& beta, T eps) {
    require_2d(*a, "layer_norm");
    if (!(eps > T(0))) throw ConfigError("layer_norm eps must be positive");
    const auto m = a->rows(), n = a->cols();
    if (gamma->size() != n || beta->size() != n)
      throw DimensionError("layer_norm affine " + shape_str(gamma->shape) + "/" +
                           shape_str(beta->shape) + " for input " + shape_str(a->shape));
    auto out = zeros<T>(a->shape);
    std::vector<T> xhat(a->size());
    std::vector<T> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
      const T* x = a->values.data() + i * n;
      T mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += x[j];
      mu /= static_cast<T>(n);
      T var = 0;
      for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= static_cast<T>(n);
      inv_std[i] = T(1) / std::sqrt(var + eps);
      for (std::size_t j = 0; j < n; ++j) {
        xhat[i * n + j] = (x[j] - mu) * inv_std[i];
        out->values[i * n + j] = xhat[i * n + j] * gamma->values[j] + beta->values[j];
      }
    }
    return record("layer_norm", out, {a, gamma, beta},
                  [a, gamma, beta, out, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                    if (gamma->requires_grad) gamma->ensure_grad();
                    if (beta->requires_grad) beta->ensure_grad();
                    if (a->requires_grad) a->ensure_grad();
                    std::vector<T> dxhat(n);
                    for (std::size_t i = 0; i < m; ++i) {
                      const T* g = out->grad.data() + i * n;
                      const T* xh = xhat.data() + i * n;
                      T s1 = 0, s2 = 0;
                      for (std::size_t j = 0; j < n; ++j) {
                        if (gamma->requires_grad) gamma->grad[j] += g[j] * xh[j];
                        if (beta->requires_grad) beta->grad[j] += g[j];
                        dxhat[j] = g[j] * gamma->values[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xh[j];
                      }
                      if (!a->requires_grad) continue;
                      const T k = inv_std[i] / static_cast<T>(n);
                      for (std::size_t j = 0; j < n; ++j)
                        a->grad[i * n + j] += k * (static_cast<T>(n) * dxhat[j] - s1 - xh[j] * s2);
                    }
                  });
  }

  TensorPtr<T> gelu(const TensorPtr<T>& a) {
    const T k0 = static_cast<T>(kGeluSqrt2OverPi), k1 = static_cast<T>(kGeluCubic);
    auto out = make_tensor<T>(a->shape, a->values);
    for (auto& x : out->values) x = T(0.5) * x * (T(1) + std::tanh(k0 * (x + k1 * x * x * x)));
    return record("gelu", out, {a}, [a, out, k0, k1] {
      a->ensure_grad();
      for (std::size_t i = 0; i < a->size(); ++i) {
        const T x = a->values[i];
        const T th = std::tanh(k0 * (x + k1 * x * x * x));
        const T d = T(0.5) * (T(1) + th) +
                    T(0.5) * x * (T(1) - th * th) * k0 * (T(1) + T(3) * k1 * x * x);
        a->grad[i] += out->grad[i] * d;
      }
    });
  }

  // Mean over the batch of -log softmax(logits)[label].
  TensorPtr<T> cross_entropy(const TensorPtr<T>& logits, std::span<const int> labels) {
    require_2d(*logits, "cross_entropy");
    const auto b = logits->rows(), c = logits->cols();
    if (labels.size() != b)
      throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                           shape_str(logits->shape));
    for (auto l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= c)
        throw IndexError("label " + std::to_string(l) + " outside [0, " + std::to_string(c) + ")");
    std::vector<T> probs(logits->values);
    T loss = 0;
    for (std::size_t i = 0; i < b; ++i) {
      const T* z = logits->values.data() + i * c;
      T mx = z[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
      T s = 0;
      for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
      loss += mx + std::log(s) - z[labels[i]];
      kernel::softmax_row(probs.data() + i * c, c);
    }
    auto out = make_tensor<T>({1}, {loss / static_cast<T>(b)});
    std::vector<int> lab(labels.begin(), labels.end());
    return record("cross_entropy", out, {logits},
                  [logits, out, b, c, probs = std::move(probs), lab = std::move(lab)] {
                    logits->ensure_grad();
                    const T g = out->grad[0] / static_cast<T>(b);
                    for (std::size_t i = 0; i < b; ++i)
                      for (std::size_t j = 0; j < c; ++j) {
                        const T onehot = static_cast<int>(j) == lab[i] ? T(1) : T(0);
                        logits->grad[i * c + j] += g * (probs[i * c + j] - onehot);
                      }
                  });
  }

  // Output carries `forward_values`; the gradient passes to `a` unchanged.
  // Used for quantize-aware adapters (dequantized compute, full-precision master).
  TensorPtr<T> straight_through(const TensorPtr<T>& a, std::vector<T> forward_values) {
    auto out = make_tensor<T>(a->shape, std::move(forward_values));
    return record("straight_through", out, {a}, [a, out] {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
    });
  }

  // Multi-head scaled dot-product attention over `batch` sequences of `tokens`
  // rows each. q, k, v are [(batch*tokens) x C]; head h owns columns
  // [h*C/heads, (h+1)*C/heads). Heads with active[h] == 0 contribute nothing and
  // are never evaluated. If probs_out is given it receives the row-stochastic
  // attention matrices laid out [batch][head][tokens][tokens] (zeros for
  // inactive heads).
  TensorPtr<T> attention(const TensorPtr<T>& q, const TensorPtr<T>& k, const TensorPtr<T>& v,
                         std::size_t batch, std::size_t heads, std::span<const std::uint8_t> active,
                         std::vector<T>* probs_out = nullptr) {
    require_2d(*q, "attention");
    require_same(*q, *k, "attention");
    require_same(*q, *v, "attention");
    const auto c = q->cols();
    if (heads == 0 || c % heads != 0) throw ConfigError("attention: width not divisible by heads");
    if (batch == 0 || q->rows() % batch != 0) throw DimensionError("attention: rows not divisible by batch");
    if (active.size() != heads) throw ConfigError("attention: head pattern length != heads");
    const auto t = q->rows() / batch;
    const auto dh = c / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    auto out = zeros<T>(q->shape);
    std::vector<T> probs(batch * heads * t * t, T(0));
    std::vector<T> qh(t * dh), kh(t * dh), vh(t * dh), oh(t * dh);
    for (std::size_t s = 0; s < batch; ++s)
      for (std::size_t h = 0; h < heads; ++h) {
        if (!active[h]) continue;
        gather_head(*q, s, h, t, dh, qh);
        gather_head(*k, s, h, t, dh, kh);
        gather_head(*v, s, h, t, dh, vh);
        T* p = probs.data() + (s * heads + h) * t * t;
        kernel::gemm_nt(qh.data(), kh.data(), p, t, dh, t);
        for (std::size_t i = 0; i < t * t; ++i) p[i] *= inv_sqrt;
        for (std::size_t i = 0; i < t; ++i) kernel::softmax_row(p + i * t, t);
        std::fill(oh.begin(), oh.end(), T(0));
        kernel::gemm_nn(p, vh.data(), oh.data(), t, t, dh);
        for (std::size_t i = 0; i < t; ++i)
          std::copy_n(oh.begin() + i * dh, dh, out->values.begin() + (s * t + i) * c + h * dh);
      }
    if (probs_out) *probs_out = probs;
    std::vector<std::uint8_t> act(active.begin(), active.end());
    return record("attention", out, {q, k, v},
                  [q, k, v, out, batch, heads, t, dh, c, inv_sqrt, probs = std::move(probs),
                   act = std::move(act)] {
                    for (auto* x : {q.get(), k.get(), v.get()})
                      if (x->requires_grad) x->ensure_grad();
                    std::vector<T> qh(t * dh), kh(t * dh), vh(t * dh), go(t * dh);
                    std::vector<T> gp(t * t), gs(t * t), gq(t * dh), gk(t * dh), gv(t * dh);
                    for (std::size_t s = 0; s < batch; ++s)
                      for (std::size_t h = 0; h < heads; ++h) {
                        if (!act[h]) continue;
                        gather_head(*q, s, h, t, dh, qh);
                        gather_head(*k, s, h, t, dh, kh);
                        gather_head(*v, s, h, t, dh, vh);
                        for (std::size_t i = 0; i < t; ++i)
                          std::copy_n(out->grad.begin() + (s * t + i) * c + h * dh, dh,
                                      go.begin() + i * dh);
                        const T* p = probs.data() + (s * heads + h) * t * t;
                        std::fill(gv.begin(), gv.end(), T(0));
                        kernel::gemm_tn(p, go.data(), gv.data(), t, t, dh);
                        std::fill(gp.begin(), gp.end(), T(0));
                        kernel::gemm_nt(go.data(), vh.data(), gp.data(), t, dh, t);
                        std::fill(gs.begin(), gs.end(), T(0));
                        for (std::size_t i = 0; i < t; ++i)
                          kernel::softmax_row_backward(p + i * t, gp.data() + i * t, gs.data() + i * t, t);
                        for (auto& x : gs) x *= inv_sqrt;
                        std::fill(gq.begin(), gq.end(), T(0));
                        kernel::gemm_nn(gs.data(), kh.data(), gq.data(), t, t, dh);
                        std::fill(gk.begin(), gk.end(), T(0));
                        kernel::gemm_tn(gs.data(), qh.data(), gk.data(), t, t, dh);
                        scatter_head(*q, s, h, t, dh, gq);
                        scatter_head(*k, s, h, t, dh, gk);
                        scatter_head(*v, s, h, t, dh, gv);
                      }
                  });
  }

  // Runs the reverse pass from a scalar loss. Intermediate gradients are reset
  // first; leaf gradients accumulate.
  void backward(const TensorPtr<T>& loss) {
    if (loss->size() != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_str(loss->shape));
    if (!recording() || !loss->requires_grad)
      throw ContractError("backward on a loss that was not recorded on this graph");
    for (auto& e : tape_) e.out->grad.clear();
    loss->ensure_grad();
    loss->grad[0] = T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      it->out->ensure_grad();
      run_entry(*it);
      if (finite_checks())
        for (const auto& in : it->inputs)
          if (in->requires_grad) check_finite(it->name, in->grad, "gradient");
    }
  }

 private:
  struct Entry {
    const char* name;
    TensorPtr<T> out;
    std::vector<TensorPtr<T>> inputs;
    std::function<void()> backward;
  };

  TensorPtr<T> record(const char* name, TensorPtr<T> out, std::vector<TensorPtr<T>> inputs,
                      std::function<void()> fn) {
    if (finite_checks()) check_finite(name, out->values, "output");
    if (!recording()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in->requires_grad;
    if (!needs) return out;
    out->requires_grad = true;
    tape_.push_back(Entry{name, out, std::move(inputs), std::move(fn)});
    return out;
  }

  // Each op's contribution is formed in a fresh buffer and then added to the
  // gradient already held by the input in a single addition.
  static void run_entry(const Entry& e) {
    std::vector<std::pair<Tensor<T>*, std::vector<T>>> held;
    for (const auto& in : e.inputs) {
      if (!in->requires_grad || !in->has_grad()) continue;
      if (std::any_of(held.begin(), held.end(), [&](const auto& h) { return h.first == in.get(); })) continue;
      held.emplace_back(in.get(), std::move(in->grad));
      in->grad.clear();
    }
    e.backward();
    for (auto& [t, prev] : held) {
      if (t->has_grad())
        for (std::size_t i = 0; i < prev.size(); ++i) prev[i] += t->grad[i];
      t->grad = std::move(prev);
    }
  }

  static void check_finite(const char* op, const std::vector<T>& v, const char* what) {
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i]))
        throw NonFiniteError(std::string("non-finite ") + what + " in op '" + op + "' at element " +
                             std::to_string(i));
  }

  static void require_2d(const Tensor<T>& a, const char* op) {
    if (a.ndim() != 2) throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(a.shape));
  }

  static void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape != b.shape)
      throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape) + " vs " +
                           shape_str(b.shape));
  }

  static void gather_head(const Tensor<T>& x, std::size_t s, std::size_t h, std::size_t t,
                          std::size_t dh, std::vector<T>& dst) {
    const auto c = x.cols();
    for (std::size_t i = 0; i < t; ++i)
      std::copy_n(x.values.begin() + (s * t + i) * c + h * dh, dh, dst.begin() + i * dh);
  }

  static void scatter_head(Tensor<T>& x, std::size_t s, std::size_t h, std::size_t t,
                           std::size_t dh, const std::vector<T>& src) {
    if (!x.requires_grad) return;
    const auto c = x.cols();
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < dh; ++j) x.grad[(s * t + i) * c + h * dh + j] += src[i * dh + j];
  }

  std::vector<Entry> tape_;
  GradMode mode_;
};

}  // namespace heartlora
