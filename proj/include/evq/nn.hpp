#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "evq/ops.hpp"
#include "evq/rng.hpp"

namespace evq {

/// Ordered, named collection of trainable tensors.  Models register their
/// parameters here; optimizers and checkpoints walk it in insertion order.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    for (const auto& [n, _] : items_)
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    items_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }

  Tensor<T> get(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return t;
    throw ConfigError("no parameter named " + name);
  }

  std::size_t count() const {
    std::size_t c = 0;
    for (const auto& [_, t] : items_) c += t.size();
    return c;
  }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
};

namespace init {

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

}  // namespace init

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    weight = ps.add(name + ".weight", init::fan_in_uniform<T>({in, out}, in, rng));
    bias = ps.add(name + ".bias", init::fan_in_uniform<T>({out}, in, rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(matmul(x, weight), bias); }
  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t dim) {
    gamma = ps.add(name + ".gamma", Tensor<T>::full({dim}, T(1), true));
    beta = ps.add(name + ".beta", Tensor<T>::zeros({dim}, true));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng)
      : fc1(ps, name + ".fc1", dim, hidden, rng), fc2(ps, name + ".fc2", hidden, dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
};

/// Pre-norm transformer block whose attention is restricted to token groups.
/// One group spanning every token gives ordinary full self-attention.
template <typename T>
struct AttentionBlock {
  std::size_t heads = 1;
  LayerNorm<T> norm1, norm2;
  Linear<T> qkv, proj;
  Mlp<T> mlp;

  AttentionBlock() = default;
  AttentionBlock(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t heads_,
                 std::size_t mlp_ratio, Rng& rng)
      : heads(heads_),
        norm1(ps, name + ".norm1", dim),
        norm2(ps, name + ".norm2", dim),
        qkv(ps, name + ".qkv", dim, 3 * dim, rng),
        proj(ps, name + ".proj", dim, dim, rng),
        mlp(ps, name + ".mlp", dim, mlp_ratio * dim, rng) {
    if (dim % heads != 0) throw ConfigError(name + ": dim not divisible by heads");
  }

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& groups,
                       std::span<const std::uint8_t> key_valid = {}) const {
    const std::size_t n = x.rows(), d = x.cols();
    Tensor<T> h = qkv(norm1(x));
    Tensor<T> q = gather_elements(h, column_map(n, d, 0), {n, d});
    Tensor<T> k = gather_elements(h, column_map(n, d, 1), {n, d});
    Tensor<T> v = gather_elements(h, column_map(n, d, 2), {n, d});
    Tensor<T> a = proj(grouped_attention(q, k, v, heads, groups, key_valid));
    Tensor<T> y = add(x, a);
    return add(y, mlp(norm2(y)));
  }

 private:
  static std::vector<std::uint32_t> column_map(std::size_t n, std::size_t d, std::size_t part) {
    std::vector<std::uint32_t> idx(n * d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) idx[i * d + j] = static_cast<std::uint32_t>(i * 3 * d + part * d + j);
    return idx;
  }
};

/// Adam with bias correction.
template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(ParamStore<T>& ps, Options opt) : ps_(&ps), opt_(opt) {
    for (const auto& [_, t] : ps.items()) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  /// Applies accumulated gradients, then clears them.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    std::size_t pi = 0;
    for (const auto& [_, cref] : ps_->items()) {
      Tensor<T> p = cref;
      auto& m = m_[pi];
      auto& v = v_[pi];
      ++pi;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        const double upd = opt_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - upd);
      }
      p.zero_grad();
    }
  }

  std::uint64_t steps() const { return t_; }
  const Options& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  void set_steps(std::uint64_t t) { t_ = t; }

  /// First and second moments of parameter i, in ParamStore order.
  std::vector<double>& first_moment(std::size_t i) { return m_.at(i); }
  std::vector<double>& second_moment(std::size_t i) { return v_.at(i); }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  ParamStore<T>* ps_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace evq
