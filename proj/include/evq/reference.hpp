#pragma once

// Reference decoders used to cross-check the block sampler.  They are written
// directly from the textbook procedures (global iterative parallel decoding
// and raster-order autoregression) and share nothing with sampler.hpp except
// the model interface and the RNG draw conventions.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "evq/sampler.hpp"

namespace evq::reference {

namespace detail {

inline std::int32_t categorical(const std::vector<float>& logits, std::size_t offset, std::size_t k, double temp,
                                Rng& rng, double& prob) {
  std::vector<double> w(k);
  double mx = logits[offset] / temp;
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[offset + j] / temp);
  double total = 0.0;
  for (std::size_t j = 0; j < k; ++j) total += (w[j] = std::exp(logits[offset + j] / temp - mx));
  const double target = rng.uniform() * total;
  double run = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    run += w[j];
    if (target < run) {
      prob = w[j] / total;
      return static_cast<std::int32_t>(j);
    }
  }
  prob = w[k - 1] / total;
  return static_cast<std::int32_t>(k - 1);
}

}  // namespace detail

/// Whole-grid iterative parallel decoding (one block spanning the grid).
template <BlockPrior M>
SampleTrace global_parallel_decode(const M& model, const SampleConfig& cfg, Rng& rng, TokenGrid* out = nullptr) {
  const BlockPlan& plan = model.plan();
  if (plan.num_blocks() != 1) throw ConfigError("global decode needs a single block");
  const std::size_t n = plan.grid_h * plan.grid_w, k = model.codebook_size();
  TokenGrid grid(plan.grid_h, plan.grid_w);
  SampleTrace trace;
  std::size_t remaining = n;
  for (std::size_t t = 1; t <= cfg.steps; ++t) {
    const double frac = static_cast<double>(t) / static_cast<double>(cfg.steps);
    const std::size_t target =
        t == cfg.steps ? 0 : static_cast<std::size_t>(std::ceil(std::cos(std::numbers::pi / 2 * frac) * static_cast<double>(n)));
    const std::size_t next_remaining = std::min(remaining, target);
    const auto logits = model.block_logits(grid, 0, cfg.class_id);
    const double weight = cfg.noise_scale * (1.0 - frac);
    struct Pick {
      double score;
      std::size_t cell;
      std::int32_t token;
    };
    std::vector<Pick> picks;
    for (std::size_t c = 0; c < n; ++c) {
      if (grid.cells[c] != TokenGrid::kMask) continue;
      double p = 0.0;
      const auto tok = detail::categorical(logits, c * k, k, cfg.temperature, rng, p);
      picks.push_back({weight > 0.0 ? p + weight * rng.gumbel() : p, c, tok});
    }
    std::sort(picks.begin(), picks.end(), [](const Pick& a, const Pick& b) {
      return a.score != b.score ? a.score > b.score : a.cell < b.cell;
    });
    SampleCall call{0, t, {}};
    for (std::size_t j = 0; j < remaining - next_remaining; ++j) {
      grid.cells[picks[j].cell] = picks[j].token;
      call.kept.emplace_back(picks[j].cell, picks[j].token);
    }
    trace.calls.push_back(std::move(call));
    remaining = next_remaining;
  }
  if (out) *out = grid;
  return trace;
}

/// One token per model call in raster order (requires W_s = 1).
template <BlockPrior M>
SampleTrace raster_autoregressive(const M& model, const SampleConfig& cfg, Rng& rng, TokenGrid* out = nullptr) {
  const BlockPlan& plan = model.plan();
  if (plan.block != 1) throw ConfigError("raster autoregression needs W_s = 1");
  const std::size_t k = model.codebook_size();
  TokenGrid grid(plan.grid_h, plan.grid_w);
  SampleTrace trace;
  for (std::size_t c = 0; c < grid.size(); ++c) {
    const auto logits = model.block_logits(grid, c, cfg.class_id);
    double p = 0.0;
    grid.cells[c] = detail::categorical(logits, 0, k, cfg.temperature, rng, p);
    trace.calls.push_back({c, 1, {{c, grid.cells[c]}}});
  }
  if (out) *out = grid;
  return trace;
}

}  // namespace evq::reference
