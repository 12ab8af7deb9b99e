#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "evq/grid.hpp"
#include "evq/nn.hpp"

namespace evq {

/// K learnable d-dimensional code vectors.
template <typename T>
struct Codebook {
  Tensor<T> entries;  // [K x d]
  double beta = 0.25;

  Codebook() = default;
  Codebook(ParamStore<T>& ps, const std::string& name, std::size_t k, std::size_t d, Rng& rng, double beta_ = 0.25)
      : beta(beta_) {
    if (k < 2 || d < 1) throw ConfigError("codebook needs K >= 2 and d >= 1");
    // Uniform in +-1/K, the usual VQ-VAE codebook initialisation.
    Tensor<T> e = Tensor<T>::zeros({k, d}, true);
    const double b = 1.0 / static_cast<double>(k);
    for (auto& v : e.mutable_data()) v = static_cast<T>(rng.uniform(-b, b));
    entries = ps.add(name, e);
  }

  /// Wraps an existing [K x d] tensor (tests, hand-built codebooks).
  explicit Codebook(Tensor<T> e, double beta_ = 0.25) : entries(std::move(e)), beta(beta_) {
    if (entries.ndim() != 2 || entries.rows() < 2 || entries.cols() < 1)
      throw ConfigError("codebook needs K >= 2 and d >= 1");
  }

  std::size_t size() const { return entries.rows(); }
  std::size_t dim() const { return entries.cols(); }
};

template <typename T>
struct Quantized {
  std::vector<std::size_t> indices;
  /// Forward value is the selected code rows; backward passes the gradient
  /// straight through to the encoder output.
  Tensor<T> z_q;
};

/// Nearest code row for each row of z ([cells x d]) under squared Euclidean
/// distance; ties go to the lowest index.
template <typename T>
std::vector<std::size_t> nearest_codes(const Tensor<T>& z, const Codebook<T>& cb) {
  if (z.ndim() != 2 || z.cols() != cb.dim())
    throw DimensionError("quantize: latent dim " + std::to_string(z.cols()) + " != codebook dim " +
                         std::to_string(cb.dim()));
  const std::size_t n = z.rows(), d = z.cols(), k = cb.size();
  auto zd = z.data();
  auto ed = cb.entries.data();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = static_cast<double>(zd[i * d + c]) - static_cast<double>(ed[j * d + c]);
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = j;
      }
    }
    idx[i] = arg;
  }
  return idx;
}

template <typename T>
Quantized<T> quantize(const Tensor<T>& z, const Codebook<T>& cb) {
  Quantized<T> q;
  q.indices = nearest_codes(z, cb);
  Tensor<T> rows;
  {
    NoGradGuard ng;
    rows = gather_rows(cb.entries, q.indices);
  }
  q.z_q = straight_through(z, rows);
  return q;
}

/// mean_cells ||sg(z) - e||^2 + beta * ||z - sg(e)||^2.
/// The first term trains the code rows, the second commits the encoder.
template <typename T>
Tensor<T> vq_loss(const Tensor<T>& z, std::span<const std::size_t> indices, const Codebook<T>& cb) {
  if (indices.size() != z.rows()) throw DimensionError("vq_loss: index count != cells");
  const T inv_n = T(1) / static_cast<T>(z.rows());
  Tensor<T> e = gather_rows(cb.entries, indices);
  Tensor<T> codebook_term = scale(sum(square(sub(z.detach(), e))), inv_n);
  Tensor<T> commit_term = scale(sum(square(sub(z, e.detach()))), inv_n * static_cast<T>(cb.beta));
  return add(codebook_term, commit_term);
}

template <typename T>
Tensor<T> vq_loss(const Tensor<T>& z, const std::vector<std::size_t>& indices, const Codebook<T>& cb) {
  return vq_loss(z, std::span<const std::size_t>(indices), cb);
}

/// Re-seeds every code whose count is zero with a randomly chosen row of
/// `pool` ([n x d] encoder outputs). Returns the number of codes replaced.
template <typename T>
std::size_t restart_dead_codes(Codebook<T>& cb, std::span<const std::uint64_t> counts, const Tensor<T>& pool,
                               Rng& rng) {
  if (counts.size() != cb.size()) throw DimensionError("restart_dead_codes: one count per code expected");
  if (pool.ndim() != 2 || pool.cols() != cb.dim() || pool.rows() == 0)
    throw DimensionError("restart_dead_codes: pool must be [n x d] with d = code dim");
  const std::size_t d = cb.dim();
  auto src = pool.data();
  auto dst = cb.entries.mutable_data();
  std::size_t n = 0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    if (counts[j] != 0) continue;
    const std::size_t r = rng.uniform_int(pool.rows());
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(r * d), src.begin() + static_cast<std::ptrdiff_t>((r + 1) * d),
              dst.begin() + static_cast<std::ptrdiff_t>(j * d));
    ++n;
  }
  return n;
}

struct CodebookUsage {
  std::vector<std::uint64_t> counts;
  double perplexity = 0.0;
  std::size_t used = 0;
};

/// Histogram over code ids and exp(entropy) of the empirical distribution.
/// MASK cells are ignored.
inline CodebookUsage codebook_usage(const std::vector<TokenGrid>& grids, std::size_t k) {
  CodebookUsage u;
  u.counts.assign(k, 0);
  std::uint64_t total = 0;
  for (const auto& g : grids)
    for (auto c : g.cells) {
      if (c == TokenGrid::kMask) continue;
      if (c < 0 || static_cast<std::size_t>(c) >= k) throw IndexError("codebook_usage: code id out of range");
      ++u.counts[static_cast<std::size_t>(c)];
      ++total;
    }
  double h = 0.0;
  for (auto c : u.counts) {
    if (c == 0) continue;
    ++u.used;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  u.perplexity = total ? std::exp(h) : 0.0;
  return u;
}

inline CodebookUsage codebook_usage(std::span<const std::size_t> indices, std::size_t k) {
  TokenGrid g(1, indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) g.cells[i] = static_cast<std::int32_t>(indices[i]);
  return codebook_usage(std::vector<TokenGrid>{g}, k);
}

}  // namespace evq
