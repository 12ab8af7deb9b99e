#pragma once

#include <functional>
#include <numeric>
#include <set>
#include <vector>

#include "evq/dataset.hpp"
#include "evq/local_ae.hpp"
#include "evq/mga.hpp"
#include "evq/trainer.hpp"

namespace evq {

/// Train / held-out split of a generated dataset, by index.
struct DataSplit {
  std::vector<std::size_t> train, heldout;

  static DataSplit tail(std::size_t count, std::size_t heldout) {
    if (heldout >= count) throw ConfigError("held-out split leaves no training images");
    DataSplit s;
    s.train.resize(count - heldout);
    std::iota(s.train.begin(), s.train.end(), std::size_t{0});
    for (std::size_t i = count - heldout; i < count; ++i) s.heldout.push_back(i);
    return s;
  }
};

struct LoopConfig {
  std::size_t steps = 2000;
  std::size_t batch = 16;
  std::uint64_t seed = 3;  ///< batch selection stream
};

/// Indices of the batch for `step`; a function of (seed, step) only, so a
/// resumed run sees the same batches as an uninterrupted one.
inline std::vector<std::size_t> batch_indices(const LoopConfig& lc, const std::vector<std::size_t>& pool,
                                              std::uint64_t step) {
  Rng r = Rng(lc.seed).split(step);
  std::vector<std::size_t> idx(lc.batch);
  for (auto& i : idx) i = pool[r.uniform_int(pool.size())];
  return idx;
}

/// Runs stage-1 steps [first, lc.steps).
inline void train_stage1(Stage1Trainer<float>& tr, const Dataset& ds, const DataSplit& split, const LoopConfig& lc,
                         std::uint64_t first,
                         const std::function<void(std::uint64_t, const Stage1Stats&)>& on_step = {}) {
  for (std::uint64_t s = first; s < lc.steps; ++s) {
    std::vector<ImageBuffer> batch;
    for (auto i : batch_indices(lc, split.train, s)) batch.push_back(ds.images[i]);
    const Stage1Stats st = tr.step(batch);
    if (on_step) on_step(s, st);
  }
}

/// Frozen-encoder token grids for the given images.
inline std::vector<TokenGrid> tokenize_images(const LocalAutoencoder<float>& ae, const Dataset& ds,
                                              const std::vector<std::size_t>& which) {
  std::vector<TokenGrid> out;
  out.reserve(which.size());
  for (auto i : which) out.push_back(ae.tokenize(ds.images[i]));
  return out;
}

inline std::vector<std::size_t> labels_of(const Dataset& ds, const std::vector<std::size_t>& which) {
  std::vector<std::size_t> out;
  for (auto i : which) out.push_back(ds.labels[i]);
  return out;
}

/// Distinct codes appearing in a set of grids.
inline std::size_t codes_used(const std::vector<TokenGrid>& grids) {
  std::set<std::int32_t> s;
  for (const auto& g : grids)
    for (auto c : g.cells)
      if (c >= 0) s.insert(c);
  return s.size();
}

/// Runs stage-2 steps [first, lc.steps) over pre-tokenized grids.
inline void train_stage2(Stage2Trainer<float>& tr, const std::vector<TokenGrid>& grids,
                         const std::vector<std::size_t>& labels, const LoopConfig& lc, std::uint64_t first,
                         const std::function<void(std::uint64_t, const Stage2Stats&)>& on_step = {}) {
  std::vector<std::size_t> pool(grids.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  tr.set_step(first);
  for (std::uint64_t s = first; s < lc.steps; ++s) {
    std::vector<TokenGrid> batch;
    std::vector<std::size_t> lab;
    for (auto i : batch_indices(lc, pool, s)) {
      batch.push_back(grids[i]);
      if (!labels.empty()) lab.push_back(labels[i]);
    }
    const Stage2Stats st = tr.step(batch, lab);
    if (on_step) on_step(s, st);
  }
}

}  // namespace evq
