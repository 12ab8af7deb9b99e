#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "evq/dataset.hpp"
#include "evq/pipeline.hpp"
#include "evq/trainer.hpp"

using namespace evq;

namespace {

MgaConfig toy_prior(std::size_t k) {
  MgaConfig c;
  c.grid_h = c.grid_w = 4;
  c.block = 2;
  c.extend = 1;
  c.codebook_size = k;
  c.dim = 16;
  c.heads = 2;
  c.layers = 1;
  c.mlp_ratio = 2;
  return c;
}

MaskState full_mask(const BlockPlan& plan) {
  MaskState m;
  m.token_mask.assign(plan.grid_h * plan.grid_w, 1);
  for (std::size_t i = 0; i < m.token_mask.size(); ++i) m.token_positions.push_back(i);
  m.block_mask.assign(plan.num_blocks(), 0);
  return m;
}

// A two-code checkerboard: learnable from position alone.
std::vector<TokenGrid> two_code_batch(std::size_t n) {
  TokenGrid g(4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) g.at(y, x) = static_cast<std::int32_t>((y + x) % 2);
  return std::vector<TokenGrid>(n, g);
}

AeConfig toy_ae() {
  AeConfig c;
  c.downsample = 4;
  c.window = 2;
  c.dim = 16;
  c.heads = 2;
  c.layers_per_stage = 1;
  c.mlp_ratio = 2;
  c.codebook_size = 16;
  c.code_dim = 4;
  return c;
}

double mean_of(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
  return std::accumulate(v.begin() + lo, v.begin() + hi, 0.0) / static_cast<double>(hi - lo);
}

}  // namespace

TEST(Gamma, ClosedFormValues) {
  EXPECT_EQ(evq::gamma(0.0), 1.0);
  EXPECT_EQ(evq::gamma(1.0), 0.0);
  EXPECT_NEAR(evq::gamma(0.5), std::sqrt(2.0) / 2.0, 1e-15);
}

TEST(Gamma, StrictlyDecreasing) {
  double prev = evq::gamma(0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double g = evq::gamma(i / 1000.0);
    EXPECT_LT(g, prev) << "r=" << i / 1000.0;
    prev = g;
  }
}

TEST(Gamma, OutsideDomainThrows) {
  EXPECT_THROW(evq::gamma(-1e-9), std::domain_error);
  EXPECT_THROW(evq::gamma(1.0 + 1e-9), std::domain_error);
  EXPECT_THROW(evq::gamma(std::nan("")), std::domain_error);
}

TEST(TokenMask, CountsMatchCeilOfSchedule) {
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    const double r = i / 10.0;
    const auto want = static_cast<std::size_t>(std::ceil(std::cos(std::numbers::pi * r / 2) * 256.0));
    auto m = sample_token_mask(16, 16, r, rng);
    EXPECT_EQ(m.token_positions.size(), want) << "r=" << r;
    EXPECT_EQ(static_cast<std::size_t>(std::count(m.token_mask.begin(), m.token_mask.end(), 1)), want);
    EXPECT_EQ(std::set<std::size_t>(m.token_positions.begin(), m.token_positions.end()).size(), want);
  }
  EXPECT_EQ(sample_token_mask(16, 16, 0.5, rng).token_positions.size(), 182u);
  EXPECT_EQ(sample_token_mask(16, 16, 0.0, rng).token_positions.size(), 256u);
}

TEST(TokenMask, AtLeastOneCellForEveryDrawnRatio) {
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) EXPECT_GE(sample_token_mask(16, 16, rng.uniform(), rng).token_positions.size(), 1u);
}

TEST(TokenMask, FixedSeedReproduces) {
  Rng a(9), b(9);
  EXPECT_EQ(sample_token_mask(16, 16, 0.3, a).token_positions, sample_token_mask(16, 16, 0.3, b).token_positions);
}

TEST(TokenMask, PositionsAreRoughlyUniform) {
  Rng rng(4);
  std::vector<int> hits(64, 0);
  const int trials = 20000;
  for (int t = 0; t < trials; ++t)
    for (auto p : sample_token_mask(8, 8, 0.5, rng).token_positions) ++hits[p];
  const double expect = trials * std::ceil(evq::gamma(0.5) * 64) / 64.0;
  for (int h : hits) EXPECT_NEAR(h, expect, 5 * std::sqrt(expect));
}

TEST(BlockMask, Extremes) {
  BlockPlan plan(16, 16, 4, 2);
  Rng rng(5);
  auto none = sample_block_mask(plan, std::nextafter(1.0, 0.0), rng);
  EXPECT_EQ(std::count(none.begin(), none.end(), 1), 0);
  auto all = sample_block_mask(plan, 0.0, rng);
  EXPECT_EQ(static_cast<std::size_t>(std::count(all.begin(), all.end(), 1)), plan.num_blocks());
  auto tiny = sample_block_mask(plan, 1e-12, rng);
  EXPECT_EQ(static_cast<std::size_t>(std::count(tiny.begin(), tiny.end(), 1)), plan.num_blocks());
}

TEST(BlockMask, FixedSeedReproduces) {
  BlockPlan plan(16, 16, 4, 2);
  Rng a(6), b(6);
  EXPECT_EQ(sample_block_mask(plan, 0.4, a), sample_block_mask(plan, 0.4, b));
  Rng c(7), d(7);
  auto m1 = sample_mask_state(plan, c), m2 = sample_mask_state(plan, d);
  EXPECT_EQ(m1.token_positions, m2.token_positions);
  EXPECT_EQ(m1.block_mask, m2.block_mask);
}

TEST(BlockMask, FrequencyMatchesGamma) {
  BlockPlan plan(16, 16, 4, 2);
  Rng rng(8);
  int masked = 0, total = 0;
  for (int t = 0; t < 4000; ++t) {
    auto m = sample_block_mask(plan, 0.5, rng);
    masked += static_cast<int>(std::count(m.begin(), m.end(), 1));
    total += static_cast<int>(m.size());
  }
  const double p = evq::gamma(0.5);
  EXPECT_NEAR(static_cast<double>(masked) / total, p, 5 * std::sqrt(p * (1 - p) / total));
}

TEST(Stage2Loss, BlockWithoutMaskedCellsContributesNothing) {
  MgaModel<double> model(toy_prior(4), 1);
  TokenGrid g(4, 4, 2);
  MaskState m;
  m.token_mask.assign(16, 0);
  m.token_mask[0] = 1;  // block 0 only
  m.token_positions = {0};
  m.block_mask.assign(4, 0);
  auto l = masked_block_loss(model, g, m, 3, std::nullopt);
  EXPECT_EQ(l.masked, 0u);
  EXPECT_FALSE(l.ce_sum.defined());
  EXPECT_EQ(masked_block_loss(model, g, m, 0, std::nullopt).masked, 1u);
}

TEST(Stage2Loss, UniformLogitsGiveLogK) {
  auto cfg = toy_prior(1024);
  MgaModel<double> model(cfg, 2);
  for (auto& v : model.params.get("mga.head.weight").mutable_data()) v = 0.0;
  for (auto& v : model.params.get("mga.head.bias").mutable_data()) v = 0.0;
  TokenGrid g(4, 4);
  Rng rng(3);
  for (auto& c : g.cells) c = static_cast<std::int32_t>(rng.uniform_int(1024));
  auto l = masked_block_loss(model, g, full_mask(model.plan()), 1, std::nullopt);
  ASSERT_EQ(l.masked, 4u);
  EXPECT_NEAR(l.ce_sum.item() / 4.0, std::log(1024.0), 1e-12);
  EXPECT_NEAR(std::log(1024.0), 6.931, 1e-3);
}

TEST(Stage2Loss, NoGradientAtUnmaskedPositions) {
  MgaModel<double> model(toy_prior(5), 3);
  TokenGrid g(4, 4);
  Rng rng(4);
  for (auto& c : g.cells) c = static_cast<std::int32_t>(rng.uniform_int(5));
  MaskState m;
  m.token_mask.assign(16, 0);
  // Block 1 covers cells 2, 3, 6, 7; mask two of them.
  m.token_positions = {3, 6};
  for (auto p : m.token_positions) m.token_mask[p] = 1;
  m.block_mask.assign(4, 0);
  auto l = masked_block_loss(model, g, m, 1, std::nullopt);
  ASSERT_EQ(l.masked, 2u);
  l.ce_sum.backward();
  const auto grad = l.logits.grad();
  ASSERT_EQ(grad.size(), 4u * 5u);
  const auto cells = model.plan().cells(1);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    double mag = 0;
    for (std::size_t j = 0; j < 5; ++j) mag += std::abs(grad[i * 5 + j]);
    if (m.token_mask[cells[i]])
      EXPECT_GT(mag, 0.0) << "row " << i;
    else
      EXPECT_EQ(mag, 0.0) << "row " << i;
  }
}

TEST(Stage2Trainer, LossDecreasesOnTwoCodeToy) {
  MgaModel<float> model(toy_prior(2), 5);
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.seed = 10;
  Stage2Trainer<float> tr(model, tc);
  std::vector<double> losses;
  for (int s = 0; s < 500; ++s) {
    auto st = tr.step(two_code_batch(8));
    ASSERT_TRUE(std::isfinite(st.loss));
    losses.push_back(st.loss);
  }
  const double early = mean_of(losses, 0, 20), late = mean_of(losses, 450, 500);
  EXPECT_GT(early, 0.3);
  EXPECT_LT(late, 0.5 * early) << "early " << early << " late " << late;
  auto ev = tr.evaluate(two_code_batch(64), 99);
  EXPECT_GT(ev.accuracy(), 0.9);
}

TEST(Stage2Trainer, FixedSeedGivesIdenticalTrajectory) {
  auto run = [] {
    MgaModel<float> model(toy_prior(3), 5);
    TrainConfig tc;
    tc.seed = 12;
    Stage2Trainer<float> tr(model, tc);
    std::vector<double> out;
    for (int s = 0; s < 6; ++s) out.push_back(tr.step(two_code_batch(4)).loss);
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Stage1Objective, PerfectReconstructionAndAlignedLatentsIsZero) {
  using TD = Tensor<double>;
  Codebook<double> cb(TD::from({3, 2}, {0, 0, 1, -1, 0.5, 2}), 0.25);
  TD img = TD::from({4, 1}, {0.1, 0.2, 0.3, 0.4});
  TD z = TD::from({2, 2}, {1, -1, 0.5, 2});
  const std::vector<std::size_t> idx{1, 2};
  auto o = stage1_objective(img, img, z, std::span<const std::size_t>(idx), cb);
  EXPECT_EQ(o.total.item(), 0.0);
  EXPECT_EQ(o.l2.item(), 0.0);
  EXPECT_EQ(o.vq.item(), 0.0);
}

TEST(Stage1Trainer, ZeroDecoderOnHalfGrayGivesQuarterL2) {
  LocalAutoencoder<float> ae(toy_ae(), 1);
  for (auto& v : ae.params.get("dec.head.fc2.weight").mutable_data()) v = 0.0f;
  for (auto& v : ae.params.get("dec.head.fc2.bias").mutable_data()) v = 0.0f;
  TrainConfig tc;
  tc.lr = 0.0;
  Stage1Trainer<float> tr(ae, tc);
  auto st = tr.step({ImageBuffer(16, 16, 1, 0.5f), ImageBuffer(16, 16, 1, 0.5f)});
  EXPECT_NEAR(st.l2, 0.25, 1e-7);
  EXPECT_NEAR(st.loss, st.l2 + st.vq, 1e-6);
  EXPECT_GE(st.vq, 0.0);
}

TEST(Stage1Trainer, LossFallsOnAverageOverToyRun) {
  DatasetSpec spec;
  spec.count = 64;
  spec.seed = 3;
  auto ds = make_dataset(spec);
  LocalAutoencoder<float> ae(toy_ae(), 2);
  TrainConfig tc;
  tc.lr = 1e-3;
  Stage1Trainer<float> tr(ae, tc);
  std::vector<double> losses;
  for (std::size_t s = 0; s < 80; ++s) {
    std::vector<ImageBuffer> batch;
    for (std::size_t i = 0; i < 4; ++i) batch.push_back(ds.images[(s * 4 + i) % ds.images.size()]);
    auto st = tr.step(batch);
    ASSERT_TRUE(std::isfinite(st.loss));
    EXPECT_GE(st.perplexity, 1.0);
    losses.push_back(st.loss);
  }
  EXPECT_LT(mean_of(losses, 70, 80), mean_of(losses, 0, 10));
}

TEST(ReconstructionMse, MatchesDirectComputation) {
  LocalAutoencoder<float> ae(toy_ae(), 4);
  Rng rng(5);
  std::vector<ImageBuffer> imgs;
  for (int i = 0; i < 2; ++i) imgs.push_back(shapes::render(static_cast<std::size_t>(i), 16, 1, rng));
  double want = 0;
  for (const auto& im : imgs) {
    auto f = ae.forward(im);
    for (std::size_t i = 0; i < im.pixels.size(); ++i) want += std::pow(double(f.recon[i]) - im.pixels[i], 2);
  }
  want /= 2 * 256.0;
  EXPECT_NEAR(reconstruction_mse(ae, imgs), want, 1e-12);
}

TEST(LrSchedule, CosineEndpointsAndMidpoint) {
  TrainConfig tc;
  tc.lr = 2e-3;
  EXPECT_EQ(tc.lr_at(0), 2e-3);
  EXPECT_EQ(tc.lr_at(12345), 2e-3);
  tc.decay_steps = 100;
  tc.lr_floor = 0.1;
  EXPECT_DOUBLE_EQ(tc.lr_at(0), 2e-3);
  EXPECT_NEAR(tc.lr_at(50), 2e-3 * (0.1 + 0.9 * 0.5), 1e-15);
  EXPECT_NEAR(tc.lr_at(100), 2e-4, 1e-15);
  EXPECT_NEAR(tc.lr_at(500), 2e-4, 1e-15);
  for (std::uint64_t t = 1; t <= 100; ++t) EXPECT_LT(tc.lr_at(t), tc.lr_at(t - 1));
}

TEST(Stage1Trainer, DeadCodesAreReseededAtWindowEnd) {
  LocalAutoencoder<float> ae(toy_ae(), 1);
  TrainConfig tc;
  tc.lr = 0.0;
  tc.restart_every = 2;
  Stage1Trainer<float> tr(ae, tc);
  const std::vector<ImageBuffer> batch{ImageBuffer(16, 16, 1, 0.3f)};
  const auto before = std::vector<float>(ae.codebook().entries.data().begin(), ae.codebook().entries.data().end());
  auto s1 = tr.step(batch);
  EXPECT_EQ(s1.restarted, 0u);
  EXPECT_FALSE(tr.usage().empty());
  auto s2 = tr.step(batch);
  // lr is 0, so both steps assign the same codes; every other code is dead.
  const std::size_t live = codes_used({ae.tokenize(batch[0])});
  EXPECT_EQ(s2.restarted, ae.codebook().size() - live);
  for (auto c : tr.usage()) EXPECT_EQ(c, 0u);
  std::size_t changed = 0;
  auto after = ae.codebook().entries.data();
  for (std::size_t j = 0; j < ae.codebook().size(); ++j)
    for (std::size_t c = 0; c < ae.codebook().dim(); ++c)
      if (after[j * ae.codebook().dim() + c] != before[j * ae.codebook().dim() + c]) {
        ++changed;
        break;
      }
  EXPECT_LE(changed, ae.codebook().size() - live);
  EXPECT_GT(changed, 0u);
}
