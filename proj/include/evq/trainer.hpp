#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "evq/local_ae.hpp"
#include "evq/mga.hpp"

namespace evq {

/// Cosine mask schedule cos(pi r / 2) on [0, 1]; gamma(1) is exactly 0.
inline double gamma(double r) {
  if (!(r >= 0.0 && r <= 1.0)) throw std::domain_error("gamma: ratio must lie in [0, 1]");
  if (r == 1.0) return 0.0;
  return std::cos(0.5 * std::numbers::pi * r);
}

/// ceil(gamma(r) * n).
inline std::size_t masked_count(double r, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(gamma(r) * static_cast<double>(n)));
}

/// Two-part corruption of one token grid.
struct MaskState {
  double ratio = 0.0;        ///< r for the token-level mask
  double block_ratio = 0.0;  ///< r' for the block-level mask
  std::vector<std::size_t> token_positions;  ///< draw order
  std::vector<std::uint8_t> token_mask;       ///< per cell
  std::vector<std::uint8_t> block_mask;       ///< per block
};

/// ceil(gamma(r) H W) distinct uniformly chosen cells.
inline MaskState sample_token_mask(std::size_t h, std::size_t w, double r, Rng& rng) {
  MaskState m;
  m.ratio = r;
  m.token_positions = rng.choose(h * w, masked_count(r, h * w));
  m.token_mask.assign(h * w, 0);
  for (auto p : m.token_positions) m.token_mask[p] = 1;
  return m;
}

/// Each block independently masked with probability gamma(r').
inline std::vector<std::uint8_t> sample_block_mask(const BlockPlan& plan, double r_prime, Rng& rng) {
  const double p = gamma(r_prime);
  std::vector<std::uint8_t> m(plan.num_blocks());
  for (auto& v : m) v = rng.bernoulli(p) ? 1 : 0;
  return m;
}

/// Draws r, r' ~ U[0, 1) and both masks (independent draws).
inline MaskState sample_mask_state(const BlockPlan& plan, Rng& rng) {
  const double r = rng.uniform();
  MaskState m = sample_token_mask(plan.grid_h, plan.grid_w, r, rng);
  m.block_ratio = rng.uniform();
  m.block_mask = sample_block_mask(plan, m.block_ratio, rng);
  return m;
}

inline TokenGrid apply_token_mask(const TokenGrid& g, const MaskState& m) {
  TokenGrid c = g;
  for (auto p : m.token_positions) c.cells[p] = TokenGrid::kMask;
  return c;
}

struct TrainConfig {
  double lr = 3e-4;
  std::size_t batch = 16;
  std::size_t steps = 1000;
  std::uint64_t seed = 0;
  std::size_t decay_steps = 0;  ///< cosine decay horizon; 0 keeps lr constant
  double lr_floor = 0.0;        ///< final lr as a fraction of lr
  std::size_t restart_every = 0;  ///< stage 1: re-seed codes unused over this many steps; 0 = never
  Adam<float>::Options adam{};

  /// Learning rate for optimizer step `t` (0-based).
  double lr_at(std::uint64_t t) const {
    if (decay_steps == 0) return lr;
    const double u = std::min(1.0, static_cast<double>(t) / static_cast<double>(decay_steps));
    return lr * (lr_floor + (1.0 - lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * u)));
  }
};

struct Stage2Stats {
  double loss = 0.0;
  std::size_t masked = 0;
  std::size_t correct = 0;
  double accuracy() const { return masked ? static_cast<double>(correct) / static_cast<double>(masked) : 0.0; }
};

/// One corrupted training example and the CE over its masked query cells.
template <typename T>
struct MaskedBlockLoss {
  Tensor<T> ce_sum;  ///< undefined when the block held no masked cell
  Tensor<T> logits;  ///< [W_s^2 x K], all query positions
  std::size_t masked = 0;
  std::size_t correct = 0;
};

template <typename T>
MaskedBlockLoss<T> masked_block_loss(const MgaModel<T>& model, const TokenGrid& target, const MaskState& m,
                                     std::size_t block, std::optional<std::size_t> class_id) {
  const TokenGrid corrupted = apply_token_mask(target, m);
  MgaInput in;
  in.tokens = &corrupted;
  in.block = block;
  in.block_masked = m.block_mask;
  in.class_id = class_id;
  Tensor<T> logits = model.forward(in);
  const auto cells = model.plan().cells(block);
  std::vector<std::size_t> rows, targets;
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (m.token_mask[cells[i]]) {
      rows.push_back(i);
      targets.push_back(static_cast<std::size_t>(target.cells[cells[i]]));
    }
  MaskedBlockLoss<T> out;
  out.logits = logits;
  out.masked = rows.size();
  if (rows.empty()) return out;
  Tensor<T> sel = gather_rows(logits, rows);
  out.ce_sum = scale(cross_entropy(sel, targets), static_cast<T>(rows.size()));
  const std::size_t k = sel.cols();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (sel.at(i, j) > sel.at(i, arg)) arg = j;
    out.correct += arg == targets[i] ? 1 : 0;
  }
  return out;
}

/// Masked token modelling on the multi-grained prior.
template <typename T>
class Stage2Trainer {
 public:
  Stage2Trainer(MgaModel<T>& model, const TrainConfig& tc)
      : model_(&model), tc_(tc), opt_(model.params, adam_opts(tc)), rng_(tc.seed) {}

  /// One optimizer update over a batch; one random query block per image.
  Stage2Stats step(const std::vector<TokenGrid>& batch, const std::vector<std::size_t>& labels = {}) {
    Stage2Stats st;
    std::vector<Tensor<T>> terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Rng r = rng_.split(step_ * 1'000'003ULL + i);
      MaskState m = sample_mask_state(model_->plan(), r);
      const std::size_t block = static_cast<std::size_t>(r.uniform_int(model_->plan().num_blocks()));
      std::optional<std::size_t> cls;
      if (!labels.empty() && model_->cfg.num_classes > 0) cls = labels[i];
      auto l = masked_block_loss(*model_, batch[i], m, block, cls);
      st.masked += l.masked;
      st.correct += l.correct;
      if (l.masked) terms.push_back(l.ce_sum);
    }
    ++step_;
    if (st.masked == 0) {
      std::cerr << "warning: stage-2 batch without masked cells, update skipped\n";
      return st;
    }
    Tensor<T> total = terms.size() == 1 ? terms[0] : sum(concat_rows(reshape_all(terms)));
    Tensor<T> loss = scale(total, T(1) / static_cast<T>(st.masked));
    st.loss = static_cast<double>(loss.item());
    loss.backward();
    opt_.set_lr(tc_.lr_at(opt_.steps()));
    opt_.step();
    return st;
  }

  std::uint64_t steps_done() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }
  Adam<T>& optimizer() { return opt_; }

  /// Masked-token accuracy and CE on held-out grids (no update).
  Stage2Stats evaluate(const std::vector<TokenGrid>& grids, std::uint64_t seed,
                       const std::vector<std::size_t>& labels = {}) const {
    NoGradGuard ng;
    Stage2Stats st;
    double ce = 0.0;
    Rng base(seed);
    for (std::size_t i = 0; i < grids.size(); ++i) {
      Rng r = base.split(i);
      MaskState m = sample_mask_state(model_->plan(), r);
      const std::size_t block = static_cast<std::size_t>(r.uniform_int(model_->plan().num_blocks()));
      std::optional<std::size_t> cls;
      if (!labels.empty() && model_->cfg.num_classes > 0) cls = labels[i];
      auto l = masked_block_loss(*model_, grids[i], m, block, cls);
      st.masked += l.masked;
      st.correct += l.correct;
      if (l.masked) ce += static_cast<double>(l.ce_sum.item());
    }
    st.loss = st.masked ? ce / static_cast<double>(st.masked) : 0.0;
    return st;
  }

 private:
  static typename Adam<T>::Options adam_opts(const TrainConfig& tc) {
    typename Adam<T>::Options o;
    o.lr = tc.lr;
    o.beta1 = tc.adam.beta1;
    o.beta2 = tc.adam.beta2;
    o.eps = tc.adam.eps;
    return o;
  }
  static std::vector<Tensor<T>> reshape_all(const std::vector<Tensor<T>>& v) {
    std::vector<Tensor<T>> r;
    for (const auto& t : v) r.push_back(reshape(t, {1, 1}));
    return r;
  }

  MgaModel<T>* model_;
  TrainConfig tc_;
  Adam<T> opt_;
  Rng rng_;
  std::uint64_t step_ = 0;
};

struct Stage1Stats {
  double loss = 0.0;
  double l2 = 0.0;
  double vq = 0.0;
  double perplexity = 0.0;
  std::size_t restarted = 0;  ///< codes re-seeded after this step
};

template <typename T>
struct Stage1Objective {
  Tensor<T> total, l2, vq;
};

/// Mean squared pixel error plus the VQ loss of one image.
template <typename T>
Stage1Objective<T> stage1_objective(const Tensor<T>& recon, const Tensor<T>& target, const Tensor<T>& z,
                                    std::span<const std::size_t> indices, const Codebook<T>& cb) {
  Stage1Objective<T> o;
  o.l2 = mse(recon, target);
  o.vq = vq_loss(z, indices, cb);
  o.total = add(o.l2, o.vq);
  return o;
}

/// Reconstruction (L2) plus VQ loss, one update over encoder, codebook, decoder.
template <typename T>
class Stage1Trainer {
 public:
  Stage1Trainer(LocalAutoencoder<T>& ae, const TrainConfig& tc)
      : ae_(&ae), tc_(tc), opt_(ae.params, adam_opts(tc)) {}

  Stage1Stats step(const std::vector<ImageBuffer>& batch) {
    Stage1Stats st;
    std::vector<Tensor<T>> terms;
    std::vector<std::size_t> all_idx;
    std::vector<T> z_rows;
    double l2 = 0.0, vq = 0.0;
    for (const auto& img : batch) {
      auto f = ae_->forward(img);
      if (tc_.restart_every) z_rows.insert(z_rows.end(), f.z.features.data().begin(), f.z.features.data().end());
      auto obj = stage1_objective(f.recon, image_tensor<T>(img), f.z.features,
                                  std::span<const std::size_t>(f.q.indices), ae_->codebook());
      l2 += static_cast<double>(obj.l2.item());
      vq += static_cast<double>(obj.vq.item());
      terms.push_back(reshape(obj.total, {1, 1}));
      all_idx.insert(all_idx.end(), f.q.indices.begin(), f.q.indices.end());
    }
    Tensor<T> loss = scale(sum(concat_rows(terms)), T(1) / static_cast<T>(batch.size()));
    loss.backward();
    opt_.set_lr(tc_.lr_at(opt_.steps()));
    opt_.step();
    st.loss = static_cast<double>(loss.item());
    st.l2 = l2 / static_cast<double>(batch.size());
    st.vq = vq / static_cast<double>(batch.size());
    st.perplexity = codebook_usage(all_idx, ae_->codebook().size()).perplexity;
    if (tc_.restart_every) {
      usage_.resize(ae_->codebook().size(), 0);
      for (auto i : all_idx) ++usage_[i];
      if (opt_.steps() % tc_.restart_every == 0) {
        const std::size_t d = ae_->codebook().dim();
        const auto pool = Tensor<T>::from({z_rows.size() / d, d}, z_rows);
        Rng rng = Rng(tc_.seed).split(opt_.steps());
        st.restarted = restart_dead_codes(ae_->codebook(), std::span<const std::uint64_t>(usage_), pool, rng);
        std::fill(usage_.begin(), usage_.end(), 0);
      }
    }
    return st;
  }

  Adam<T>& optimizer() { return opt_; }
  /// Code counts since the last restart window closed; saved with checkpoints.
  std::vector<std::uint64_t>& usage() { return usage_; }

 private:
  static typename Adam<T>::Options adam_opts(const TrainConfig& tc) {
    typename Adam<T>::Options o;
    o.lr = tc.lr;
    o.beta1 = tc.adam.beta1;
    o.beta2 = tc.adam.beta2;
    o.eps = tc.adam.eps;
    return o;
  }

  LocalAutoencoder<T>* ae_;
  TrainConfig tc_;
  Adam<T> opt_;
  std::vector<std::uint64_t> usage_;
};

/// Mean per-pixel squared error of quantized reconstructions.
template <typename T>
double reconstruction_mse(const LocalAutoencoder<T>& ae, const std::vector<ImageBuffer>& images) {
  NoGradGuard ng;
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& img : images) {
    auto f = ae.forward(img);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const double d = static_cast<double>(f.recon[i]) - static_cast<double>(img.pixels[i]);
      s += d * d;
    }
    n += img.pixels.size();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace evq
