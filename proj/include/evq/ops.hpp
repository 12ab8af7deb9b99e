#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "evq/tensor.hpp"

namespace evq {

/// Additive logit bias for masked attention keys.
inline constexpr double kMaskedLogit = -1e9;

namespace detail {

inline void require_2d(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(s));
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
Buffer<T> transpose_buf(const T* a, std::size_t m, std::size_t n) {
  Buffer<T> t(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a.shape(), "matmul");
  detail::require_2d(b.shape(), "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Buffer<T> out(m * n, T(0));
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  OpCounters::get().matmul_macs += m * k * n;
  return Tensor<T>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& o) {
    const auto& A = o.parents[0]->value;
    const auto& B = o.parents[1]->value;
    if (auto* ga = grad_of(o, 0)) {  // dA = dC * B^T
      Buffer<T> bt = detail::transpose_buf(B.data(), k, n);
      detail::gemm_acc(o.grad.data(), bt.data(), ga->data(), m, n, k);
    }
    if (auto* gb = grad_of(o, 1)) {  // dB = A^T * dC
      Buffer<T> at = detail::transpose_buf(A.data(), m, k);
      detail::gemm_acc(at.data(), o.grad.data(), gb->data(), k, m, n);
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_2d(a.shape(), "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  return Tensor<T>::make_result({n, m}, detail::transpose_buf(a.data().data(), m, n), {a},
                                [m, n](detail::Node<T>& o) {
                                  if (auto* g = grad_of(o, 0))
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += o.grad[j * m + i];
                                });
}

namespace detail {

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, F f, D dfdx) {
  Buffer<T> out(a.size());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [dfdx](detail::Node<T>& o) {
    if (auto* g = grad_of(o, 0)) {
      const auto& x = o.parents[0]->value;
      for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += o.grad[i] * dfdx(x[i], o.value[i]);
    }
  });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& o) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = grad_of(o, p))
        for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& o) {
    if (auto* g = grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
    if (auto* g = grad_of(o, 1))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] -= o.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& o) {
    const auto& x = o.parents[0]->value;
    const auto& y = o.parents[1]->value;
    if (auto* g = grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * y[i];
    if (auto* g = grad_of(o, 1))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * x[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

/// tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T u = c * (x + k * x * x * x);
        const T th = std::tanh(u);
        const T du = c * (T(1) + T(3) * k * x * x);
        return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
      });
}

/// x[n x m] + bias broadcast over rows; bias has m elements.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_2d(x.shape(), "add_bias");
  const std::size_t n = x.rows(), m = x.cols();
  if (bias.size() != m) throw DimensionError("add_bias: bias size " + std::to_string(bias.size()) + " != " + std::to_string(m));
  Buffer<T> out(x.size());
  auto xd = x.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = xd[i * m + j] + bd[j];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, bias}, [n, m](detail::Node<T>& o) {
    if (auto* g = grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
    if (auto* g = grad_of(o, 1))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*g)[j] += o.grad[i * m + j];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return Tensor<T>::make_result({1}, Buffer<T>{s}, {a}, [](detail::Node<T>& o) {
    if (auto* g = grad_of(o, 0))
      for (auto& gi : *g) gi += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Mean squared difference over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(square(sub(a, b)));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Buffer<T> out(a.data().begin(), a.data().end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), {a}, [](detail::Node<T>& o) {
    if (auto* g = grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
  });
}

/// out.flat[i] = x.flat[index[i]].  Backward scatter-adds, so replicated
/// indices (e.g. nearest-neighbour upsampling) sum their gradients.
template <typename T>
Tensor<T> gather_elements(const Tensor<T>& x, std::vector<std::uint32_t> index, Shape shape) {
  if (shape_size(shape) != index.size()) throw DimensionError("gather_elements: index/shape mismatch");
  Buffer<T> out(index.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xd.size()) throw IndexError("gather_elements: index out of range");
    out[i] = xd[index[i]];
  }
  return Tensor<T>::make_result(std::move(shape), std::move(out), {x},
                                [idx = std::move(index)](detail::Node<T>& o) {
                                  if (auto* g = grad_of(o, 0))
                                    for (std::size_t i = 0; i < idx.size(); ++i) (*g)[idx[i]] += o.grad[i];
                                });
}

/// Rows of a matrix selected by index (embedding lookup, row selection).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  detail::require_2d(x.shape(), "gather_rows");
  const std::size_t m = x.cols();
  Buffer<T> out(rows.size() * m);
  auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows())
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " >= " + std::to_string(x.rows()));
    std::copy_n(xd.begin() + rows[i] * m, m, out.begin() + i * m);
  }
  return Tensor<T>::make_result({rows.size(), m}, std::move(out), {x},
                                [idx = std::vector<std::size_t>(rows.begin(), rows.end()), m](detail::Node<T>& o) {
                                  if (auto* g = grad_of(o, 0))
                                    for (std::size_t i = 0; i < idx.size(); ++i)
                                      for (std::size_t j = 0; j < m; ++j) (*g)[idx[i] * m + j] += o.grad[i * m + j];
                                });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  return gather_rows(x, std::span<const std::size_t>(rows));
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t m = parts[0].cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_2d(p.shape(), "concat_rows");
    if (p.cols() != m) throw DimensionError("concat_rows: column mismatch");
    n += p.rows();
  }
  Buffer<T> out;
  out.reserve(n * m);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor<T>::make_result({n, m}, std::move(out), parts, [offsets](detail::Node<T>& o) {
    for (std::size_t p = 0; p < o.parents.size(); ++p)
      if (auto* g = grad_of(o, p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[offsets[p] + i];
  });
}

/// Row-wise layer normalisation with affine gamma/beta over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_2d(x.shape(), "layer_norm");
  const std::size_t n = x.rows(), m = x.cols();
  if (gamma.size() != m || beta.size() != m) throw DimensionError("layer_norm: affine size mismatch");
  Buffer<T> out(x.size());
  Buffer<T> xhat(x.size());
  Buffer<T> rstd(n);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xi = xd.data() + i * m;
    T mu = T(0);
    for (std::size_t j = 0; j < m; ++j) mu += xi[j];
    mu /= static_cast<T>(m);
    T var = T(0);
    for (std::size_t j = 0; j < m; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<T>(m);
    const T r = T(1) / std::sqrt(var + eps);
    rstd[i] = r;
    for (std::size_t j = 0; j < m; ++j) {
      const T h = (xi[j] - mu) * r;
      xhat[i * m + j] = h;
      out[i * m + j] = h * gd[j] + bd[j];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, m, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& o) {
        const auto& gd = o.parents[1]->value;
        if (auto* gg = grad_of(o, 1))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gg)[j] += o.grad[i * m + j] * xhat[i * m + j];
        if (auto* gb = grad_of(o, 2))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gb)[j] += o.grad[i * m + j];
        if (auto* gx = grad_of(o, 0)) {
          for (std::size_t i = 0; i < n; ++i) {
            T s1 = T(0), s2 = T(0);
            for (std::size_t j = 0; j < m; ++j) {
              const T dh = o.grad[i * m + j] * gd[j];
              s1 += dh;
              s2 += dh * xhat[i * m + j];
            }
            s1 /= static_cast<T>(m);
            s2 /= static_cast<T>(m);
            for (std::size_t j = 0; j < m; ++j) {
              const T dh = o.grad[i * m + j] * gd[j];
              (*gx)[i * m + j] += rstd[i] * (dh - s1 - xhat[i * m + j] * s2);
            }
          }
        }
      });
}

namespace detail {

template <typename T>
void softmax_row(const T* x, T* y, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (std::isnan(x[j])) throw NumericError("softmax: NaN input");
    mx = std::max(mx, x[j]);
  }
  T z = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    z += y[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= z;
}

}  // namespace detail

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Buffer<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) detail::softmax_row(x.data().data() + r * n, out.data() + r * n, n);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [rows, n](detail::Node<T>& o) {
    if (auto* g = grad_of(o, 0))
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = o.value.data() + r * n;
        const T* dy = o.grad.data() + r * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
        for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += y[j] * (dy[j] - dot);
      }
  });
}

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  detail::require_2d(logits.shape(), "cross_entropy");
  const std::size_t n = logits.rows(), k = logits.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy: target count != rows");
  for (std::size_t t : targets)
    if (t >= k) throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(k) + ")");
  Buffer<T> probs(n * k);
  T loss = T(0);
  auto ld = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = ld.data() + i * k;
    detail::softmax_row(row, probs.data() + i * k, k);
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    loss += (mx + std::log(z)) - row[targets[i]];
  }
  loss /= static_cast<T>(n);
  return Tensor<T>::make_result(
      {1}, Buffer<T>{loss}, {logits},
      [n, k, probs = std::move(probs), tg = std::vector<std::size_t>(targets.begin(), targets.end())](
          detail::Node<T>& o) {
        if (auto* g = grad_of(o, 0)) {
          const T s = o.grad[0] / static_cast<T>(n);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) (*g)[i * k + j] += s * probs[i * k + j];
            (*g)[i * k + tg[i]] -= s;
          }
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  return cross_entropy(logits, std::span<const std::size_t>(targets));
}

/// Forward value of `quantized`, gradient routed unchanged to `input`.
template <typename T>
Tensor<T> straight_through(const Tensor<T>& input, const Tensor<T>& quantized) {
  detail::require_same(input.shape(), quantized.shape(), "straight_through");
  Buffer<T> out(quantized.data().begin(), quantized.data().end());
  return Tensor<T>::make_result(input.shape(), std::move(out), {input}, [](detail::Node<T>& o) {
    if (auto* g = grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
  });
}

/// Observer for attention probabilities (tests and diagnostics).
template <typename T>
struct AttentionTap {
  struct Record {
    std::size_t group;
    std::size_t head;
    std::vector<std::size_t> tokens;  // group members, row/col order of `probs`
    std::vector<T> probs;             // n x n, row = query
  };
  static std::function<void(const Record&)>& hook() {
    thread_local std::function<void(const Record&)> h;
    return h;
  }
};

/// Multi-head scaled dot-product self-attention, computed independently
/// inside each token group.
///
/// q, k, v are [tokens x dim] with dim split evenly over heads.  Every token
/// must belong to exactly one group.  Keys whose `key_valid` entry is zero
/// receive the additive kMaskedLogit bias.  Output is [tokens x dim].
template <typename T>
Tensor<T> grouped_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                            const std::vector<std::vector<std::size_t>>& groups,
                            std::span<const std::uint8_t> key_valid = {}) {
  detail::require_2d(q.shape(), "attention");
  detail::require_same(q.shape(), k.shape(), "attention");
  detail::require_same(q.shape(), v.shape(), "attention");
  const std::size_t n = q.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: dim not divisible by heads");
  if (!key_valid.empty() && key_valid.size() != n) throw DimensionError("attention: key mask size");
  {
    std::vector<std::uint8_t> seen(n, 0);
    for (const auto& g : groups)
      for (std::size_t t : g) {
        if (t >= n) throw IndexError("attention: group holds a row index out of range");
        if (seen[t]) throw DimensionError("attention: groups must partition the tokens");
        seen[t] = 1;
      }
    for (auto s : seen)
      if (!s) throw DimensionError("attention: groups must partition the tokens");
  }
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  auto Q = q.data();
  auto K = k.data();
  auto V = v.data();
  Buffer<T> out(n * d, T(0));

  std::size_t prob_total = 0;
  std::vector<std::size_t> prob_off;
  for (const auto& g : groups) {
    prob_off.push_back(prob_total);
    prob_total += heads * g.size() * g.size();
  }
  auto probs = std::make_shared<Buffer<T>>(prob_total);
  auto& hook = AttentionTap<T>::hook();
  auto& cnt = OpCounters::get();

  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const std::size_t m = g.size();
    cnt.attention_scores += heads * m * m;
    cnt.attention_macs += 2 * heads * m * m * dh;
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs->data() + prob_off[gi] + h * m * m;
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < m; ++i) {
        const T* qi = Q.data() + g[i] * d + c0;
        T* row = P + i * m;
        for (std::size_t j = 0; j < m; ++j) {
          const T* kj = K.data() + g[j] * d + c0;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= sc;
          if (!key_valid.empty() && !key_valid[g[j]]) s += static_cast<T>(kMaskedLogit);
          row[j] = s;
        }
        detail::softmax_row(row, row, m);
        T* oi = out.data() + g[i] * d + c0;
        for (std::size_t j = 0; j < m; ++j) {
          const T pij = row[j];
          const T* vj = V.data() + g[j] * d + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
      if (hook) hook({gi, h, g, std::vector<T>(P, P + m * m)});
    }
  }

  return Tensor<T>::make_result(
      q.shape(), std::move(out), {q, k, v},
      [groups, prob_off, probs, heads, d, dh, sc](detail::Node<T>& o) {
        const auto& Qv = o.parents[0]->value;
        const auto& Kv = o.parents[1]->value;
        const auto& Vv = o.parents[2]->value;
        auto* gq = grad_of(o, 0);
        auto* gk = grad_of(o, 1);
        auto* gv = grad_of(o, 2);
        std::vector<T> dP;
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
          const auto& g = groups[gi];
          const std::size_t m = g.size();
          dP.assign(m * m, T(0));
          for (std::size_t h = 0; h < heads; ++h) {
            const T* P = probs->data() + prob_off[gi] + h * m * m;
            const std::size_t c0 = h * dh;
            // dP = dO V^T, dV = P^T dO
            for (std::size_t i = 0; i < m; ++i) {
              const T* doi = o.grad.data() + g[i] * d + c0;
              for (std::size_t j = 0; j < m; ++j) {
                const T* vj = Vv.data() + g[j] * d + c0;
                T s = T(0);
                for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
                dP[i * m + j] = s;
                if (gv) {
                  const T pij = P[i * m + j];
                  T* gvj = gv->data() + g[j] * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += pij * doi[c];
                }
              }
            }
            // dS = P * (dP - rowsum(P * dP)), scaled into dQ / dK
            for (std::size_t i = 0; i < m; ++i) {
              T dot = T(0);
              for (std::size_t j = 0; j < m; ++j) dot += P[i * m + j] * dP[i * m + j];
              const T* qi = Qv.data() + g[i] * d + c0;
              for (std::size_t j = 0; j < m; ++j) {
                const T ds = P[i * m + j] * (dP[i * m + j] - dot) * sc;
                if (ds == T(0)) continue;
                if (gq) {
                  const T* kj = Kv.data() + g[j] * d + c0;
                  T* gqi = gq->data() + g[i] * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* gkj = gk->data() + g[j] * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

/// Ungrouped self-attention over all rows.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                         std::span<const std::uint8_t> key_valid = {}) {
  std::vector<std::size_t> all(q.rows());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return grouped_attention(q, k, v, heads, {all}, key_valid);
}

}  // namespace evq
