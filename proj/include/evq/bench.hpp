#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <new>
#include <vector>

#include "evq/memory.hpp"
#include "evq/mga.hpp"
#include "evq/trainer.hpp"

namespace evq::bench {

struct CostConfig {
  std::size_t grid_h = 32, grid_w = 32;
  std::size_t block = 8, extend = 4;
  std::size_t layers = 1, dim = 16, heads = 1;
};

struct CostReport {
  CostConfig cfg;
  std::size_t global_tokens = 0;  ///< N = H W, sequence length of full global attention
  std::size_t mga_seq_len = 0;
  std::size_t num_blocks = 0;
  double global_attention_flops = 0;
  double mga_attention_flops_per_block = 0;
  double mga_attention_flops_full_grid = 0;
  double score_ratio_per_block = 0;  ///< seq^2 / N^2
  double score_ratio_full_grid = 0;  ///< blocks * seq^2 / N^2
  /// Attention probabilities that must be held for backward, in scalars.
  double global_activation_lower_bound = 0;
  double mga_activation_lower_bound = 0;
  // Measurement (0 when not measured)
  std::size_t measured_global_peak_bytes = 0;
  std::size_t measured_mga_peak_bytes = 0;
  bool global_oom = false;
  bool mga_oom = false;
  double global_ms = 0;
  double mga_ms = 0;
};

/// Closed-form token counts and attention cost.  The multi-grained figures
/// are per query block; "full grid" multiplies by the number of blocks.
inline CostReport analytic_cost(const CostConfig& c) {
  const BlockPlan plan(c.grid_h, c.grid_w, c.block, c.extend);
  CostReport r;
  r.cfg = c;
  r.global_tokens = c.grid_h * c.grid_w;
  r.mga_seq_len = plan.sequence_length();
  r.num_blocks = plan.num_blocks();
  const double n = static_cast<double>(r.global_tokens), s = static_cast<double>(r.mga_seq_len);
  const double L = static_cast<double>(c.layers), d = static_cast<double>(c.dim), h = static_cast<double>(c.heads);
  // Q K^T and P V, two flops per multiply-add.
  r.global_attention_flops = L * 4.0 * n * n * d;
  r.mga_attention_flops_per_block = L * 4.0 * s * s * d;
  r.mga_attention_flops_full_grid = static_cast<double>(r.num_blocks) * r.mga_attention_flops_per_block;
  r.score_ratio_per_block = (s * s) / (n * n);
  r.score_ratio_full_grid = static_cast<double>(r.num_blocks) * s * s / (n * n);
  r.global_activation_lower_bound = L * h * (n + 1) * (n + 1);
  r.mga_activation_lower_bound = static_cast<double>(r.num_blocks) * L * h * s * s;
  return r;
}

struct Measurement {
  std::size_t peak_bytes = 0;
  double ms = 0;
  bool oom = false;
};

/// Peak tracked bytes of one full-grid training pass (every block's CE,
/// one backward) on a model with the given plan.
inline Measurement measure_pass(const MgaConfig& mc, std::uint64_t seed) {
  Measurement m;
  try {
    MgaModel<float> model(mc, seed);
    Rng rng(seed ^ 0x5eedULL);
    TokenGrid g(mc.grid_h, mc.grid_w);
    for (auto& c : g.cells) c = static_cast<std::int32_t>(rng.uniform_int(mc.codebook_size));
    MaskState ms = sample_token_mask(mc.grid_h, mc.grid_w, 0.5, rng);
    ms.block_mask.assign(model.plan().num_blocks(), 0);
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t base = MemoryProbe::live_bytes();
    MemoryProbe::reset_peak();
    {
      std::vector<Tensor<float>> terms;
      for (std::size_t b = 0; b < model.plan().num_blocks(); ++b) {
        auto l = masked_block_loss(model, g, ms, b, std::nullopt);
        if (l.masked) terms.push_back(reshape(l.ce_sum, {1, 1}));
      }
      if (!terms.empty()) sum(concat_rows(terms)).backward();
      model.params.zero_grad();
    }
    m.peak_bytes = MemoryProbe::peak_bytes() - base;
    m.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  } catch (const std::bad_alloc&) {
    m.oom = true;
  }
  return m;
}

inline MgaConfig model_config(const CostConfig& c, std::size_t block, std::size_t extend) {
  MgaConfig mc;
  mc.grid_h = c.grid_h;
  mc.grid_w = c.grid_w;
  mc.block = block;
  mc.extend = extend;
  mc.codebook_size = 16;
  mc.dim = c.dim;
  mc.heads = c.heads;
  mc.layers = c.layers;
  mc.mlp_ratio = 2;
  return mc;
}

/// Analytic report plus measured peaks for the multi-grained model and for a
/// global-attention baseline (one block spanning the grid, no halo).
/// The smallest peak over `trials` runs is reported.
inline CostReport measured_cost(const CostConfig& c, std::size_t trials = 1, bool include_global = true) {
  if (c.grid_h != c.grid_w) throw ConfigError("measured_cost: square grids only");
  CostReport r = analytic_cost(c);
  auto run = [&](std::size_t block, std::size_t extend, std::size_t& peak, double& ms, bool& oom) {
    for (std::size_t t = 0; t < std::max<std::size_t>(trials, 1); ++t) {
      const Measurement m = measure_pass(model_config(c, block, extend), 1234 + t);
      if (m.oom) {
        oom = true;
        return;
      }
      peak = t == 0 ? m.peak_bytes : std::min(peak, m.peak_bytes);
      ms = t == 0 ? m.ms : std::min(ms, m.ms);
    }
  };
  run(c.block, c.extend, r.measured_mga_peak_bytes, r.mga_ms, r.mga_oom);
  if (include_global) run(c.grid_h, 0, r.measured_global_peak_bytes, r.global_ms, r.global_oom);
  return r;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double dn = static_cast<double>(n);
  return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

}  // namespace evq::bench
