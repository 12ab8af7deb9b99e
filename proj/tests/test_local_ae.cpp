#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <vector>

#include "evq/local_ae.hpp"
#include "evq/verify.hpp"

using namespace evq;
using TD = Tensor<double>;

namespace {

std::vector<double> randv(std::size_t n, Rng& r) {
  std::vector<double> v(n);
  for (auto& x : v) x = r.uniform(-1, 1);
  return v;
}

AeConfig small_cfg() {
  AeConfig c;
  c.dim = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.codebook_size = 8;
  c.code_dim = 4;
  return c;
}

// Reference for one shifted-window layer as it is usually implemented: roll
// the grid by -s, tile it into w x w windows, and forbid attention between
// cells that came from different regions of the roll.  Two cells interact
// when they share a window and a region label along both axes.
struct SwinAxis {
  std::size_t g, w, s;
  std::size_t window(std::size_t c) const { return ((c + g - s) % g) / w; }
  int region(std::size_t c) const {
    if (s == 0) return 0;
    const std::size_t r = (c + g - s) % g;  // rolled coordinate
    if (r < g - w) return 0;
    if (r < g - s) return 1;
    return 2;
  }
  bool interact(std::size_t a, std::size_t b) const { return window(a) == window(b) && region(a) == region(b); }
};

SwinAxis swin_axis(std::size_t g, std::size_t w, bool shifted, std::size_t other) {
  if (std::min(g, other) <= w) return {g, std::min(g, other), 0};
  return {g, w, shifted ? w / 2 : 0};
}

using CellSet = std::set<std::pair<long, long>>;

// Decoder cells reachable from latent cell (cy, cx), by explicit set propagation.
CellSet swin_decoder_reach(const AeConfig& cfg, std::size_t lh, std::size_t lw, std::size_t cy, std::size_t cx) {
  CellSet s{{static_cast<long>(cy), static_cast<long>(cx)}};
  std::size_t h = lh, w = lw;
  auto stage = [&] {
    for (std::size_t l = 0; l < cfg.layers_per_stage; ++l) {
      const bool sh = cfg.shifted_windows && l % 2 == 1;
      const SwinAxis ay = swin_axis(h, cfg.window, sh, w), ax = swin_axis(w, cfg.window, sh, h);
      CellSet next;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (auto [sy, sx] : s)
            if (ay.interact(y, static_cast<std::size_t>(sy)) && ax.interact(x, static_cast<std::size_t>(sx))) {
              next.insert({static_cast<long>(y), static_cast<long>(x)});
              break;
            }
      s = std::move(next);
    }
  };
  auto double_up = [&] {
    CellSet next;
    for (auto [y, x] : s)
      for (long dy = 0; dy < 2; ++dy)
        for (long dx = 0; dx < 2; ++dx) next.insert({2 * y + dy, 2 * x + dx});
    s = std::move(next);
    h *= 2;
    w *= 2;
  };
  stage();
  for (std::size_t e = 0; e < cfg.expands(); ++e) {
    double_up();
    stage();
  }
  double_up();
  return s;
}

}  // namespace

TEST(AeConfig, StageCounts) {
  AeConfig c;
  c.downsample = 4;
  EXPECT_EQ(c.merges(), 0u);
  EXPECT_EQ(c.expands(), 1u);
  c.downsample = 16;
  EXPECT_EQ(c.merges(), 2u);
  EXPECT_EQ(c.expands(), 3u);
  c.downsample = 6;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AeConfig, ImageMustDivideByFactor) {
  AeConfig c;
  EXPECT_THROW(c.validate_image(18, 16), ConfigError);
  EXPECT_NO_THROW(c.validate_image(16, 16));
}

TEST(PatchEmbed, ShapeArithmetic) {
  ParamStore<double> ps;
  Rng rng(1);
  PatchEmbed<double> pe(ps, "pe", 1, 8, rng);
  auto g = pe(TD::zeros({256, 1}), 16, 16, 1);
  EXPECT_EQ(g.h, 4u);
  EXPECT_EQ(g.w, 4u);
  EXPECT_EQ(g.features.rows(), 16u);
  EXPECT_EQ(g.features.cols(), 8u);
  EXPECT_THROW(pe(TD::zeros({18 * 16, 1}), 18, 16, 1), ConfigError);
}

TEST(PatchEmbed, ConstantImageWithZeroBiasGivesIdenticalTokens) {
  ParamStore<double> ps;
  Rng rng(2);
  PatchEmbed<double> pe(ps, "pe", 1, 6, rng);
  for (auto& b : pe.proj.bias.mutable_data()) b = 0;
  auto g = pe(TD::full({64, 1}, 0.7), 8, 8, 1);
  for (std::size_t t = 1; t < 4; ++t)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(g.features.at(t, c), g.features.at(0, c));
}

TEST(PatchEmbed, MatchesExplicitPatchLoop) {
  ParamStore<double> ps;
  Rng rng(3);
  const std::size_t H = 8, W = 12, C = 3, D = 5;
  PatchEmbed<double> pe(ps, "pe", C, D, rng);
  auto img = randv(H * W * C, rng);
  auto g = pe(TD::from({H * W, C}, img), H, W, C);
  const auto wt = pe.proj.weight.data();
  const auto b = pe.proj.bias.data();
  for (std::size_t py = 0; py < H / 4; ++py)
    for (std::size_t px = 0; px < W / 4; ++px)
      for (std::size_t o = 0; o < D; ++o) {
        double want = b[o];
        for (std::size_t dy = 0; dy < 4; ++dy)
          for (std::size_t dx = 0; dx < 4; ++dx)
            for (std::size_t c = 0; c < C; ++c)
              want += img[((py * 4 + dy) * W + px * 4 + dx) * C + c] * wt[((dy * 4 + dx) * C + c) * D + o];
        EXPECT_NEAR(g.features.at(py * (W / 4) + px, o), want, 1e-12);
      }
}

TEST(WindowPlan, EveryCellInExactlyOneWindow) {
  for (std::size_t g : {4, 8, 12, 16})
    for (bool shifted : {false, true}) {
      auto p = WindowPlan::make(g, g, 4, shifted);
      std::vector<int> seen(g * g, 0);
      for (const auto& win : p.groups())
        for (auto c : win) ++seen[c];
      for (int s : seen) EXPECT_EQ(s, 1);
    }
}

TEST(WindowPlan, SmallGridIsOneUnshiftedWindow) {
  auto p = WindowPlan::make(4, 4, 4, true);
  EXPECT_EQ(p.shift, 0u);
  EXPECT_EQ(p.groups().size(), 1u);
  auto q = WindowPlan::make(2, 2, 4, false);
  EXPECT_EQ(q.window, 2u);
}

TEST(WindowPlan, ShiftedTilingMatchesRollAndMask) {
  for (std::size_t g : {8, 12, 16}) {
    auto p = WindowPlan::make(g, g, 4, true);
    const SwinAxis a = swin_axis(g, 4, true, g);
    for (std::size_t i = 0; i < g; ++i)
      for (std::size_t j = 0; j < g; ++j) EXPECT_EQ(p.window_of(i) == p.window_of(j), a.interact(i, j)) << g << " " << i << " " << j;
  }
}

TEST(WindowAttention, WholeGridWindowEqualsFullAttention) {
  ParamStore<double> ps;
  Rng rng(4);
  AttentionBlock<double> blk(ps, "b", 8, 2, 2, rng);
  TD x = TD::from({16, 8}, randv(128, rng));
  auto p = WindowPlan::make(4, 4, 4, false);
  std::vector<std::size_t> all(16);
  for (std::size_t i = 0; i < 16; ++i) all[i] = i;
  TD a = blk(x, p.groups()), b = blk(x, {all});
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(WindowAttention, PerturbingOneWindowLeavesOthersBitIdentical) {
  ParamStore<double> ps;
  Rng rng(5);
  AttentionBlock<double> blk(ps, "b", 8, 2, 2, rng);
  auto xv = randv(64 * 8, rng);
  auto p = WindowPlan::make(8, 8, 4, false);
  TD base = blk(TD::from({64, 8}, xv), p.groups());
  for (std::size_t c = 0; c < 8; ++c) xv[(1 * 8 + 2) * 8 + c] += 0.5;  // cell (1,2): top-left window
  TD pert = blk(TD::from({64, 8}, xv), p.groups());
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < 8; ++c) {
        const std::size_t i = (y * 8 + x) * 8 + c;
        if (y < 4 && x < 4) continue;
        EXPECT_EQ(base[i], pert[i]);
      }
}

TEST(WindowAttention, SingleTokenWindowsPassValuesThrough) {
  // Softmax over one logit is 1, so attention returns v and the block
  // reduces to x + proj(v) + mlp(...), independent of other tokens.
  TD q = TD::from({3, 2}, {1, 2, 3, 4, 5, 6});
  TD v = TD::from({3, 2}, {7, 8, 9, 10, 11, 12});
  TD out = grouped_attention(q, q, v, 1, {{0}, {1}, {2}});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(out[i], v[i]);
}

TEST(PatchMerge, ShapeConstantAndGatherOracle) {
  ParamStore<double> ps;
  Rng rng(6);
  PatchMerge<double> pm(ps, "pm", 3, 5, rng);
  auto g = pm({TD::zeros({16, 3}), 4, 4});
  EXPECT_EQ(g.h, 2u);
  EXPECT_EQ(g.w, 2u);
  auto c = pm({TD::full({16, 3}, 0.3), 4, 4});
  for (std::size_t t = 1; t < 4; ++t)
    for (std::size_t o = 0; o < 5; ++o) EXPECT_EQ(c.features.at(t, o), c.features.at(0, o));
  auto xv = randv(16 * 3, rng);
  auto r = pm({TD::from({16, 3}, xv), 4, 4});
  const auto wt = pm.proj.weight.data();
  const auto b = pm.proj.bias.data();
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x)
      for (std::size_t o = 0; o < 5; ++o) {
        double want = b[o];
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            for (std::size_t c2 = 0; c2 < 3; ++c2)
              want += xv[((2 * y + dy) * 4 + 2 * x + dx) * 3 + c2] * wt[((dy * 2 + dx) * 3 + c2) * 5 + o];
        EXPECT_NEAR(r.features.at(y * 2 + x, o), want, 1e-12);
      }
  EXPECT_THROW(pm({TD::zeros({9, 3}), 3, 3}), DimensionError);
}

TEST(PatchExpand, ShapeConstantAndRearrangeOracle) {
  ParamStore<double> ps;
  Rng rng(7);
  PatchExpand<double> pe(ps, "pe", 3, 2, rng);
  auto g = pe({TD::zeros({4, 3}), 2, 2});
  EXPECT_EQ(g.h, 4u);
  EXPECT_EQ(g.w, 4u);
  auto xv = randv(4 * 3, rng);
  auto r = pe({TD::from({4, 3}, xv), 2, 2});
  const auto wt = pe.proj.weight.data();
  const auto b = pe.proj.bias.data();
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t o = 0; o < 2; ++o) {
        const std::size_t src = (y / 2) * 2 + x / 2, col = ((y % 2) * 2 + x % 2) * 2 + o;
        double want = b[col];
        for (std::size_t c = 0; c < 3; ++c) want += xv[src * 3 + c] * wt[c * 8 + col];
        EXPECT_NEAR(r.features.at(y * 4 + x, o), want, 1e-12);
      }
  // Constant input: each sub-cell position is constant across the grid.
  auto c = pe({TD::full({4, 3}, 0.4), 2, 2});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t o = 0; o < 2; ++o)
        EXPECT_EQ(c.features.at(y * 4 + x, o), c.features.at((y % 2) * 4 + x % 2, o));
}

TEST(NearestUpsample, DistinctValuesBecomeConstantBlocks) {
  auto g = nearest_upsample<double>({TD::from({4, 1}, {1, 2, 3, 4}), 2, 2});
  const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  EXPECT_EQ(std::vector<double>(g.features.data().begin(), g.features.data().end()), want);
}

TEST(NearestUpsample, ConstantGridStaysConstantAndMatchesReplication) {
  auto c = nearest_upsample<double>({TD::full({9, 2}, 0.25), 3, 3});
  for (double v : c.features.data()) EXPECT_EQ(v, 0.25);
  Rng rng(8);
  auto xv = randv(6 * 3, rng);
  auto r = nearest_upsample<double>({TD::from({6, 3}, xv), 2, 3});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 6; ++x)
      for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(r.features.at(y * 6 + x, d), xv[((y / 2) * 3 + x / 2) * 3 + d]);
}

TEST(Autoencoder, LatentAndReconstructionShapes) {
  AeConfig c = small_cfg();
  c.downsample = 8;
  LocalAutoencoder<float> ae(c, 1);
  ImageBuffer img(32, 32, 1, 0.5f);
  auto f = ae.forward(img);
  EXPECT_EQ(f.z.h, 4u);
  EXPECT_EQ(f.z.w, 4u);
  EXPECT_EQ(f.recon.rows(), 32u * 32u);
  auto out = ae.decode_image({f.q.z_q, f.z.h, f.z.w});
  EXPECT_TRUE(out.same_shape(img));
}

TEST(Autoencoder, SixteenFoldLatentOf256Image) {
  AeConfig c = small_cfg();
  c.downsample = 16;
  c.dim = 4;
  c.heads = 1;
  c.layers_per_stage = 1;
  LocalAutoencoder<float> ae(c, 2);
  ImageBuffer img(256, 256, 1, 0.1f);
  auto z = ae.encode(img);
  EXPECT_EQ(z.h, 16u);
  EXPECT_EQ(z.w, 16u);
}

TEST(Autoencoder, ShapeSymmetryAcrossConfigs) {
  for (std::size_t f : {4, 8}) {
    for (std::size_t ch : {1, 3}) {
      AeConfig c = small_cfg();
      c.downsample = f;
      c.channels = ch;
      LocalAutoencoder<float> ae(c, 3);
      for (std::size_t side : {16, 32}) {
        ImageBuffer img(side, side * 2, ch, 0.2f);
        auto f1 = ae.forward(img);
        auto out = ae.decode_image({f1.q.z_q, f1.z.h, f1.z.w});
        EXPECT_TRUE(out.same_shape(img)) << f << " " << ch << " " << side;
      }
    }
  }
}

TEST(Autoencoder, DecodeIsClampedToUnitInterval) {
  AeConfig c = small_cfg();
  LocalAutoencoder<float> ae(c, 4);
  // Blow up the output bias so the raw decoder leaves [0, 1].
  Tensor<float> b = ae.params.get("dec.head.fc2.bias");
  b.mutable_data()[0] = 5.0f;
  TokenGrid t(4, 4, 1);
  auto img = ae.decode_tokens(t);
  for (float p : img.pixels) {
    EXPECT_GE(p, 0.0f);
    EXPECT_LE(p, 1.0f);
  }
}

TEST(Autoencoder, ChannelOrSizeMismatchThrows) {
  LocalAutoencoder<float> ae(small_cfg(), 5);
  EXPECT_THROW(ae.encode(ImageBuffer(16, 16, 3)), ConfigError);
  EXPECT_THROW(ae.encode(ImageBuffer(18, 16, 1)), ConfigError);
  TokenGrid masked(4, 4);
  EXPECT_THROW(ae.decode_tokens(masked), IndexError);
}

TEST(ReceptiveRadius, PureUpsamplingStaysInsideFootprint) {
  AeConfig c;
  c.layers_per_stage = 0;
  EXPECT_LE(receptive_radius(c, AeSide::Decoder), 4u);
  EXPECT_EQ(receptive_radius(c, AeSide::Decoder, 8, 8), 0u);
}

TEST(ReceptiveRadius, WindowReachThenDoubling) {
  // Bound over the layer list: each window layer adds window-1 cells, each
  // 2x step doubles.
  AeConfig c;
  c.layers_per_stage = 1;
  std::size_t r = 0;
  for (const auto& l : LocalAutoencoder<float>::ae_layer_specs(c, AeSide::Decoder, 64, 64)) {
    if (l.kind == AeLayerSpec::Kind::Window) r += c.window - 1;
    if (l.kind == AeLayerSpec::Kind::Expand2x) r *= 2;
  }
  EXPECT_EQ(r, (3u * 2 + 3) * 2);
  EXPECT_EQ(receptive_radius(c, AeSide::Decoder), r);
}

TEST(ReceptiveRadius, DefaultDecoderIsFiniteAndSmallerThanImage) {
  AeConfig c;
  for (std::size_t side : {4, 8, 16}) {
    const std::size_t r = receptive_radius(c, AeSide::Decoder, side, side);
    EXPECT_LE(r, receptive_radius(c, AeSide::Decoder));
    if (side >= 8) {
      EXPECT_LT(r, side * c.downsample);
    }
  }
}

TEST(ReceptiveRadius, InfluenceBoxMatchesRollAndMaskPropagation) {
  for (std::size_t layers : {1, 2, 3}) {
    AeConfig c;
    c.layers_per_stage = layers;
    for (std::size_t side : {4, 8, 12}) {
      for (std::size_t cy = 0; cy < side; cy += 3)
        for (std::size_t cx = 0; cx < side; cx += 2) {
          const CellSet reach = swin_decoder_reach(c, side, side, cy, cx);
          long y0 = 1 << 30, y1 = -1, x0 = 1 << 30, x1 = -1;
          for (auto [y, x] : reach) {
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
          }
          // The reachable set is itself the full rectangle.
          EXPECT_EQ(reach.size(), static_cast<std::size_t>((y1 - y0 + 1) * (x1 - x0 + 1)));
          const auto box = influence_box(c, AeSide::Decoder, side, side, cy, cx);
          EXPECT_EQ(box.y0, y0);
          EXPECT_EQ(box.y1, y1);
          EXPECT_EQ(box.x0, x0);
          EXPECT_EQ(box.x1, x1);
        }
    }
  }
}

TEST(Locality, TokenSwapChangesNothingOutsideRadius) {
  AeConfig c;
  c.dim = 16;
  c.heads = 2;
  LocalAutoencoder<float> ae(c, 9);
  for (std::size_t side : {4, 8}) {
    auto res = verify::check_locality(ae, side, 17);
    EXPECT_TRUE(res.passed) << res.detail;
  }
}

TEST(Locality, EncoderInfluenceOfOnePixel) {
  AeConfig c = small_cfg();
  LocalAutoencoder<double> ae(c, 10);
  Rng rng(1);
  ImageBuffer img(32, 32, 1);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  NoGradGuard ng;
  auto base = ae.encode(img);
  const std::size_t py = 3, px = 29;
  img.at(py, px) += 0.5f;
  auto pert = ae.encode(img);
  // Latent cells whose encoder influence box covers the pixel may change; no other cell may.
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      const auto box = influence_box(c, AeSide::Encoder, 8, 8, y, x);
      if (box.contains(static_cast<long>(py), static_cast<long>(px))) continue;
      for (std::size_t d = 0; d < c.code_dim; ++d)
        EXPECT_EQ(base.features.at(y * 8 + x, d), pert.features.at(y * 8 + x, d)) << y << "," << x;
    }
}
