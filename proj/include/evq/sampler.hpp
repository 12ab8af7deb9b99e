#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "evq/grid.hpp"
#include "evq/mga.hpp"
#include "evq/rng.hpp"
#include "evq/trainer.hpp"

namespace evq {

/// Anything that can produce [W_s^2 x K] logits for a query block.
template <typename M>
concept BlockPrior = requires(const M& m, const TokenGrid& g, std::size_t b, std::optional<std::size_t> c) {
  { m.plan() } -> std::convertible_to<const BlockPlan&>;
  { m.codebook_size() } -> std::convertible_to<std::size_t>;
  { m.block_logits(g, b, c) } -> std::convertible_to<std::vector<float>>;
};

/// Anything that turns a complete token grid into an image.
template <typename D>
concept TokenDecoder = requires(const D& d, const TokenGrid& g) {
  { d.decode_tokens(g) } -> std::convertible_to<ImageBuffer>;
};

struct SampleConfig {
  std::size_t steps = 8;      ///< T, in-block iterations
  double temperature = 1.0;
  double noise_scale = 1.0;   ///< Gumbel weight at t = 0, annealed linearly to 0 at t = T
  std::optional<std::size_t> class_id;

  void validate() const {
    if (steps < 1) throw ConfigError("sampling needs T >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  }
};

/// Remaining masked count after each step: n(0) = masked, n(t) = ceil(gamma(t/T) * masked), n(T) = 0.
inline std::vector<std::size_t> in_block_schedule(std::size_t steps, std::size_t masked) {
  if (steps < 1) throw ConfigError("schedule needs T >= 1");
  std::vector<std::size_t> n(steps + 1);
  n[0] = masked;
  for (std::size_t t = 1; t <= steps; ++t)
    n[t] = std::min(n[t - 1], masked_count(static_cast<double>(t) / static_cast<double>(steps), masked));
  return n;
}

/// One model evaluation during sampling and the cells it committed.
struct SampleCall {
  std::size_t block = 0;
  std::size_t step = 0;
  std::vector<std::pair<std::size_t, std::int32_t>> kept;  ///< (cell, token), commit order
  bool operator==(const SampleCall&) const = default;
};

struct SampleTrace {
  std::vector<SampleCall> calls;
  std::size_t model_calls() const { return calls.size(); }
  bool operator==(const SampleTrace&) const = default;
};

namespace detail {

/// Categorical draw from softmax(logits / temperature); consumes one uniform.
inline std::int32_t draw_token(const float* logits, std::size_t k, double temperature, Rng& rng, double* prob) {
  std::vector<double> p(k);
  double mx = -INFINITY;
  for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(logits[j]) / temperature);
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    p[j] = std::exp(static_cast<double>(logits[j]) / temperature - mx);
    z += p[j];
  }
  const double u = rng.uniform() * z;
  double acc = 0.0;
  std::size_t pick = k - 1;
  for (std::size_t j = 0; j < k; ++j) {
    acc += p[j];
    if (u < acc) {
      pick = j;
      break;
    }
  }
  *prob = p[pick] / z;
  return static_cast<std::int32_t>(pick);
}

}  // namespace detail

/// Iterative parallel decoding of one block.
///
/// Each step t = 1..T evaluates the model, draws a token at every still-masked
/// cell (raster order; one uniform each, then one Gumbel draw when the noise
/// weight noise_scale * (1 - t/T) is positive) and scores it by its
/// probability plus weighted noise.  The highest scorers are committed so
/// that exactly n(t) cells stay masked; ties go to the earlier cell.
/// Committed cells are never revisited.
template <BlockPrior M>
void sample_block(const M& model, TokenGrid& grid, std::size_t block, const SampleConfig& cfg, Rng& rng,
                  SampleTrace* trace = nullptr) {
  cfg.validate();
  const auto cells = model.plan().cells(block);
  std::vector<std::size_t> slots;  // positions within the block still masked
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (grid.cells[cells[i]] == TokenGrid::kMask) slots.push_back(i);
  if (slots.empty()) return;
  const auto sched = in_block_schedule(cfg.steps, slots.size());
  const std::size_t k = model.codebook_size();

  for (std::size_t t = 1; t <= cfg.steps; ++t) {
    const std::vector<float> logits = model.block_logits(grid, block, cfg.class_id);
    const double w = cfg.noise_scale * (1.0 - static_cast<double>(t) / static_cast<double>(cfg.steps));
    struct Cand {
      double score;
      std::size_t order;
      std::size_t slot;
      std::int32_t token;
    };
    std::vector<Cand> cand;
    cand.reserve(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
      double p = 0.0;
      const std::int32_t tok = detail::draw_token(logits.data() + slots[i] * k, k, cfg.temperature, rng, &p);
      const double score = w > 0.0 ? p + w * rng.gumbel() : p;
      cand.push_back({score, i, slots[i], tok});
    }
    const std::size_t keep = slots.size() - sched[t];
    std::stable_sort(cand.begin(), cand.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
    SampleCall call{block, t, {}};
    std::vector<std::uint8_t> done(slots.size(), 0);
    for (std::size_t j = 0; j < keep; ++j) {
      const std::size_t cell = cells[cand[j].slot];
      grid.cells[cell] = cand[j].token;
      call.kept.emplace_back(cell, cand[j].token);
      done[cand[j].order] = 1;
    }
    if (trace) trace->calls.push_back(std::move(call));
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < slots.size(); ++i)
      if (!done[i]) rest.push_back(slots[i]);
    slots = std::move(rest);
  }
}

struct SampleResult {
  TokenGrid tokens;
  ImageBuffer image;
  SampleTrace trace;
};

/// Generates blocks in the plan's raster order, each by iterative parallel
/// decoding; the finished grid goes through the stage-1 decoder when given.
template <BlockPrior M, TokenDecoder D>
SampleResult sample_image(const M& model, const D* decoder, const SampleConfig& cfg, Rng& rng) {
  SampleResult r;
  const BlockPlan& plan = model.plan();
  r.tokens = TokenGrid(plan.grid_h, plan.grid_w);
  for (std::size_t b : plan.order()) sample_block(model, r.tokens, b, cfg, rng, &r.trace);
  if (decoder) r.image = decoder->decode_tokens(r.tokens);
  return r;
}

struct InfillSpec {
  TokenGrid tokens;  ///< known cells hold codes, cells to generate hold kMask
  std::optional<std::size_t> class_id;
};

/// Completes the MASK cells of a partially known grid; blocks without MASK
/// cells are skipped and known cells are returned untouched.
template <BlockPrior M, TokenDecoder D>
SampleResult infill(const M& model, const D* decoder, const InfillSpec& spec, const SampleConfig& cfg, Rng& rng) {
  const BlockPlan& plan = model.plan();
  if (spec.tokens.height != plan.grid_h || spec.tokens.width != plan.grid_w)
    throw DimensionError("infill: token grid does not match the model grid");
  SampleConfig c = cfg;
  if (spec.class_id) c.class_id = spec.class_id;
  SampleResult r;
  r.tokens = spec.tokens;
  for (std::size_t b : plan.order()) sample_block(model, r.tokens, b, c, rng, &r.trace);
  if (decoder) r.image = decoder->decode_tokens(r.tokens);
  return r;
}

/// Pixel mask (nonzero = regenerate) to token cells, any overlap counts.
inline std::vector<std::uint8_t> token_mask_from_pixels(const std::vector<std::uint8_t>& pixel_mask, std::size_t h,
                                                        std::size_t w, std::size_t f) {
  if (pixel_mask.size() != h * w || h % f || w % f) throw DimensionError("pixel mask shape");
  std::vector<std::uint8_t> m((h / f) * (w / f), 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (pixel_mask[y * w + x]) m[(y / f) * (w / f) + x / f] = 1;
  return m;
}

/// Model calls sample_image makes on an all-MASK grid: one per step per block.
inline std::size_t sample_call_count(const BlockPlan& plan, std::size_t steps) { return plan.num_blocks() * steps; }

/// Adapter so a null decoder can be passed to sample_image.
struct NoDecoder {
  ImageBuffer decode_tokens(const TokenGrid&) const { return {}; }
};

}  // namespace evq
