#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evq/grid.hpp"
#include "evq/nn.hpp"
#include "evq/vq.hpp"

namespace evq {

/// Stage-1 autoencoder configuration.
struct AeConfig {
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t downsample = 4;  ///< f: image side / latent side, one of 4, 8, 16
  std::size_t window = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t layers_per_stage = 2;
  std::size_t mlp_ratio = 4;
  bool shifted_windows = true;
  std::size_t codebook_size = 512;
  std::size_t code_dim = 16;
  double beta = 0.25;

  /// Number of 2x patch-merging steps after the 4x4 patch embedding.
  std::size_t merges() const { return log2_checked(downsample) - 2; }
  /// Number of 2x patch-expanding steps before the final 2x nearest upsample.
  std::size_t expands() const { return log2_checked(downsample) - 1; }

  void validate() const {
    if (patch_size != 4) throw ConfigError("patch_size is fixed at 4");
    if (downsample != 4 && downsample != 8 && downsample != 16) throw ConfigError("downsample factor must be 4, 8 or 16");
    if (window == 0 || dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("bad window/dim/heads");
    if (codebook_size < 2 || code_dim < 1) throw ConfigError("bad codebook shape");
  }

  /// Checks that an image of this size tiles cleanly through every stage.
  void validate_image(std::size_t h, std::size_t w) const {
    validate();
    if (h == 0 || w == 0 || h % downsample != 0 || w % downsample != 0)
      throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by f=" +
                        std::to_string(downsample));
    for (std::size_t s = 0; s <= merges(); ++s) check_grid(h / (patch_size << s), w / (patch_size << s));
    for (std::size_t s = 0; s <= expands(); ++s) check_grid(h / downsample << s, w / downsample << s);
  }

  void check_grid(std::size_t gh, std::size_t gw) const {
    const std::size_t win = std::min({window, gh, gw});
    if (gh % win != 0 || gw % win != 0)
      throw ConfigError("grid " + std::to_string(gh) + "x" + std::to_string(gw) + " not divisible by window " +
                        std::to_string(win));
  }

 private:
  static std::size_t log2_checked(std::size_t f) {
    std::size_t l = 0;
    while ((std::size_t{1} << l) < f) ++l;
    return l;
  }
};

/// Non-overlapping window tiling of one feature grid for one layer.
///
/// The shifted variant offsets the tiling by half a window.  Cells cut off at
/// the borders form their own smaller windows, which matches the interaction
/// pattern of a cyclic shift with region masking.  When the grid is no larger
/// than the window the whole grid is one window and no shift is applied.
struct WindowPlan {
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t window = 0;
  std::size_t shift = 0;

  static WindowPlan make(std::size_t gh, std::size_t gw, std::size_t window, bool shifted_layer) {
    WindowPlan p{gh, gw, window, 0};
    if (std::min(gh, gw) <= window) {
      p.window = std::min(gh, gw);
    } else if (shifted_layer) {
      p.shift = window / 2;
    }
    if (gh % p.window != 0 || gw % p.window != 0) throw ConfigError("grid not divisible by window size");
    return p;
  }

  std::size_t windows_along(std::size_t g) const { return g / window + (shift ? 1 : 0); }
  std::size_t window_of(std::size_t coord) const {
    return shift ? (coord + window - shift) / window : coord / window;
  }
  /// Inclusive cell range of window `k` along an axis of length g.
  std::pair<std::size_t, std::size_t> span_of(std::size_t k, std::size_t g) const {
    if (!shift) return {k * window, (k + 1) * window - 1};
    const std::size_t lo = k == 0 ? 0 : shift + (k - 1) * window;
    const std::size_t hi = std::min(g, shift + k * window) - 1;
    return {lo, hi};
  }

  std::vector<std::vector<std::size_t>> groups() const {
    const std::size_t wy = windows_along(grid_h), wx = windows_along(grid_w);
    std::vector<std::vector<std::size_t>> g(wy * wx);
    for (std::size_t y = 0; y < grid_h; ++y)
      for (std::size_t x = 0; x < grid_w; ++x) g[window_of(y) * wx + window_of(x)].push_back(y * grid_w + x);
    std::erase_if(g, [](const auto& v) { return v.empty(); });
    return g;
  }
};

namespace layout {

/// [H*W x C] pixels -> [(H/p)(W/p) x p*p*C] flattened patches.
inline std::vector<std::uint32_t> patch_unfold(std::size_t h, std::size_t w, std::size_t c, std::size_t p) {
  const std::size_t ph = h / p, pw = w / p, row = p * p * c;
  std::vector<std::uint32_t> idx(ph * pw * row);
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < c; ++ch)
            idx[(py * pw + px) * row + (dy * p + dx) * c + ch] =
                static_cast<std::uint32_t>(((py * p + dy) * w + px * p + dx) * c + ch);
  return idx;
}

/// [h*w x d] -> [(h/2)(w/2) x 4d], neighbourhood order (0,0) (0,1) (1,0) (1,1).
inline std::vector<std::uint32_t> merge_2x2(std::size_t h, std::size_t w, std::size_t d) {
  return patch_unfold(h, w, d, 2);
}

/// [h*w x 4d] -> [(2h)(2w) x d]; column block (dy*2+dx) becomes sub-cell (dy, dx).
inline std::vector<std::uint32_t> expand_2x2(std::size_t h, std::size_t w, std::size_t d) {
  const std::size_t H = 2 * h, W = 2 * w;
  std::vector<std::uint32_t> idx(H * W * d);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < d; ++c)
        idx[(y * W + x) * d + c] =
            static_cast<std::uint32_t>(((y / 2) * w + x / 2) * 4 * d + ((y % 2) * 2 + x % 2) * d + c);
  return idx;
}

/// [h*w x d] -> [(2h)(2w) x d], each cell copied into a 2x2 block.
inline std::vector<std::uint32_t> nearest_2x(std::size_t h, std::size_t w, std::size_t d) {
  const std::size_t H = 2 * h, W = 2 * w;
  std::vector<std::uint32_t> idx(H * W * d);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < d; ++c)
        idx[(y * W + x) * d + c] = static_cast<std::uint32_t>(((y / 2) * w + x / 2) * d + c);
  return idx;
}

}  // namespace layout

/// Feature map on a grid: features are [h*w x d], row-major cells.
template <typename T>
struct FeatureGrid {
  Tensor<T> features;
  std::size_t h = 0, w = 0;
};

template <typename T>
struct PatchEmbed {
  Linear<T> proj;
  std::size_t patch = 4;

  PatchEmbed() = default;
  PatchEmbed(ParamStore<T>& ps, const std::string& name, std::size_t channels, std::size_t dim, Rng& rng)
      : proj(ps, name, 16 * channels, dim, rng) {}

  FeatureGrid<T> operator()(const Tensor<T>& pixels, std::size_t h, std::size_t w, std::size_t c) const {
    if (h % patch || w % patch)
      throw ConfigError("patch_embed: image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by 4");
    const std::size_t n = (h / patch) * (w / patch);
    Tensor<T> patches = gather_elements(pixels, layout::patch_unfold(h, w, c, patch), {n, patch * patch * c});
    return {proj(patches), h / patch, w / patch};
  }
};

template <typename T>
struct PatchMerge {
  Linear<T> proj;

  PatchMerge() = default;
  PatchMerge(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t out, Rng& rng)
      : proj(ps, name, 4 * dim, out, rng) {}

  FeatureGrid<T> operator()(const FeatureGrid<T>& g) const {
    if (g.h % 2 || g.w % 2) throw DimensionError("patch_merge: odd grid " + std::to_string(g.h) + "x" + std::to_string(g.w));
    const std::size_t d = g.features.cols();
    Tensor<T> cat = gather_elements(g.features, layout::merge_2x2(g.h, g.w, d), {g.h * g.w / 4, 4 * d});
    return {proj(cat), g.h / 2, g.w / 2};
  }
};

template <typename T>
struct PatchExpand {
  Linear<T> proj;
  std::size_t out = 0;

  PatchExpand() = default;
  PatchExpand(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t out_, Rng& rng)
      : proj(ps, name, dim, 4 * out_, rng), out(out_) {}

  FeatureGrid<T> operator()(const FeatureGrid<T>& g) const {
    Tensor<T> wide = proj(g.features);
    return {gather_elements(wide, layout::expand_2x2(g.h, g.w, out), {4 * g.h * g.w, out}), 2 * g.h, 2 * g.w};
  }
};

template <typename T>
FeatureGrid<T> nearest_upsample(const FeatureGrid<T>& g) {
  const std::size_t d = g.features.cols();
  return {gather_elements(g.features, layout::nearest_2x(g.h, g.w, d), {4 * g.h * g.w, d}), 2 * g.h, 2 * g.w};
}

/// Swin-style stage: `layers` windowed attention blocks, shifted on odd layers.
template <typename T>
struct WindowStage {
  std::vector<AttentionBlock<T>> blocks;
  std::size_t window = 4;
  bool shifted = true;

  WindowStage() = default;
  WindowStage(ParamStore<T>& ps, const std::string& name, const AeConfig& cfg, Rng& rng)
      : window(cfg.window), shifted(cfg.shifted_windows) {
    for (std::size_t l = 0; l < cfg.layers_per_stage; ++l)
      blocks.emplace_back(ps, name + ".block" + std::to_string(l), cfg.dim, cfg.heads, cfg.mlp_ratio, rng);
  }

  WindowPlan plan(std::size_t layer, std::size_t h, std::size_t w) const {
    return WindowPlan::make(h, w, window, shifted && layer % 2 == 1);
  }

  FeatureGrid<T> operator()(FeatureGrid<T> g) const {
    for (std::size_t l = 0; l < blocks.size(); ++l) g.features = blocks[l](g.features, plan(l, g.h, g.w).groups());
    return g;
  }
};

enum class AeSide { Encoder, Decoder };

/// One entry of the architecture walk used for locality analysis.
struct AeLayerSpec {
  enum class Kind { Window, Expand2x, Merge2x, Pointwise } kind;
  WindowPlan plan;  // Window only
};

/// Local-window-attention quantizer: encoder, codebook and decoder.
template <typename T>
class LocalAutoencoder {
 public:
  ParamStore<T> params;
  AeConfig cfg;

  LocalAutoencoder(const AeConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(seed);
    embed_ = PatchEmbed<T>(params, "enc.patch_embed", cfg.channels, cfg.dim, rng);
    enc_stages_.emplace_back(params, "enc.stage0", cfg, rng);
    for (std::size_t s = 0; s < cfg.merges(); ++s) {
      merges_.emplace_back(params, "enc.merge" + std::to_string(s), cfg.dim, cfg.dim, rng);
      enc_stages_.emplace_back(params, "enc.stage" + std::to_string(s + 1), cfg, rng);
    }
    enc_norm_ = LayerNorm<T>(params, "enc.norm", cfg.dim);
    quant_proj_ = Linear<T>(params, "enc.quant_proj", cfg.dim, cfg.code_dim, rng);
    codebook_ = Codebook<T>(params, "codebook", cfg.codebook_size, cfg.code_dim, rng, cfg.beta);
    post_quant_ = Linear<T>(params, "dec.post_quant", cfg.code_dim, cfg.dim, rng);
    dec_stages_.emplace_back(params, "dec.stage0", cfg, rng);
    for (std::size_t s = 0; s < cfg.expands(); ++s) {
      expands_.emplace_back(params, "dec.expand" + std::to_string(s), cfg.dim, cfg.dim, rng);
      dec_stages_.emplace_back(params, "dec.stage" + std::to_string(s + 1), cfg, rng);
    }
    dec_norm_ = LayerNorm<T>(params, "dec.norm", cfg.dim);
    subpixel_ = params.add("dec.subpixel", init::normal<T>({4, cfg.dim}, 0.02, rng));
    head_hidden_ = Linear<T>(params, "dec.head.fc1", cfg.dim, cfg.dim, rng);
    head_out_ = Linear<T>(params, "dec.head.fc2", cfg.dim, cfg.channels, rng);
  }

  const Codebook<T>& codebook() const { return codebook_; }
  Codebook<T>& codebook() { return codebook_; }

  /// Continuous latent z as [(H/f)(W/f) x code_dim].
  FeatureGrid<T> encode(const Tensor<T>& pixels, std::size_t h, std::size_t w) const {
    cfg.validate_image(h, w);
    if (pixels.rows() != h * w || pixels.cols() != cfg.channels) throw ConfigError("encode: pixel tensor shape");
    FeatureGrid<T> g = embed_(pixels, h, w, cfg.channels);
    g = enc_stages_[0](g);
    for (std::size_t s = 0; s < merges_.size(); ++s) g = enc_stages_[s + 1](merges_[s](g));
    g.features = quant_proj_(enc_norm_(g.features));
    return g;
  }

  FeatureGrid<T> encode(const ImageBuffer& img) const {
    if (img.channels != cfg.channels) throw ConfigError("encode: channel count mismatch");
    return encode(image_tensor<T>(img), img.height, img.width);
  }

  /// Raw (unclamped) reconstruction [H*W x C] from a quantized latent grid.
  Tensor<T> decode(const FeatureGrid<T>& zq) const {
    if (zq.features.cols() != cfg.code_dim) throw ConfigError("decode: latent dim mismatch");
    cfg.validate_image(zq.h * cfg.downsample, zq.w * cfg.downsample);
    FeatureGrid<T> g{post_quant_(zq.features), zq.h, zq.w};
    g = dec_stages_[0](g);
    for (std::size_t s = 0; s < expands_.size(); ++s) g = dec_stages_[s + 1](expands_[s](g));
    g.features = dec_norm_(g.features);
    g = nearest_upsample(g);
    g.features = add(g.features, gather_rows(subpixel_, subpixel_rows(g.h, g.w)));
    return head_out_(gelu(head_hidden_(g.features)));
  }

  ImageBuffer decode_image(const FeatureGrid<T>& zq) const {
    NoGradGuard ng;
    Tensor<T> px = decode(zq);
    ImageBuffer img(zq.h * cfg.downsample, zq.w * cfg.downsample, cfg.channels);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(px[i]);
    return img.clamped();
  }

  /// Code rows for a token grid (no MASK cells allowed).
  FeatureGrid<T> embed_tokens(const TokenGrid& tokens) const {
    std::vector<std::size_t> idx(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens.cells[i] < 0 || static_cast<std::size_t>(tokens.cells[i]) >= codebook_.size())
        throw IndexError("decode: token grid holds MASK or out-of-range code");
      idx[i] = static_cast<std::size_t>(tokens.cells[i]);
    }
    NoGradGuard ng;
    return {gather_rows(codebook_.entries, idx), tokens.height, tokens.width};
  }

  ImageBuffer decode_tokens(const TokenGrid& tokens) const { return decode_image(embed_tokens(tokens)); }

  TokenGrid tokenize(const ImageBuffer& img) const {
    NoGradGuard ng;
    FeatureGrid<T> z = encode(img);
    auto idx = nearest_codes(z.features, codebook_);
    TokenGrid g(z.h, z.w);
    for (std::size_t i = 0; i < idx.size(); ++i) g.cells[i] = static_cast<std::int32_t>(idx[i]);
    return g;
  }

  struct Forward {
    FeatureGrid<T> z;
    Quantized<T> q;
    Tensor<T> recon;
  };

  Forward forward(const ImageBuffer& img) const {
    Forward f;
    f.z = encode(img);
    f.q = quantize(f.z.features, codebook_);
    f.recon = decode({f.q.z_q, f.z.h, f.z.w});
    return f;
  }

  /// Layer walk of one side, in data-flow order, for the given latent grid.
  std::vector<AeLayerSpec> layer_specs(AeSide side, std::size_t latent_h, std::size_t latent_w) const {
    return ae_layer_specs(cfg, side, latent_h, latent_w);
  }

  static std::vector<AeLayerSpec> ae_layer_specs(const AeConfig& cfg, AeSide side, std::size_t lh, std::size_t lw) {
    std::vector<AeLayerSpec> specs;
    auto stage = [&](std::size_t h, std::size_t w) {
      for (std::size_t l = 0; l < cfg.layers_per_stage; ++l)
        specs.push_back({AeLayerSpec::Kind::Window, WindowPlan::make(h, w, cfg.window, cfg.shifted_windows && l % 2 == 1)});
    };
    if (side == AeSide::Decoder) {
      std::size_t h = lh, w = lw;
      stage(h, w);
      for (std::size_t s = 0; s < cfg.expands(); ++s) {
        specs.push_back({AeLayerSpec::Kind::Expand2x, {}});
        h *= 2;
        w *= 2;
        stage(h, w);
      }
      specs.push_back({AeLayerSpec::Kind::Expand2x, {}});  // nearest upsample
      specs.push_back({AeLayerSpec::Kind::Pointwise, {}});  // per-pixel head
    } else {
      std::size_t h = lh << cfg.merges(), w = lw << cfg.merges();
      specs.push_back({AeLayerSpec::Kind::Pointwise, {}});  // patch embedding
      stage(h, w);
      for (std::size_t s = 0; s < cfg.merges(); ++s) {
        specs.push_back({AeLayerSpec::Kind::Merge2x, {}});
        h /= 2;
        w /= 2;
        stage(h, w);
      }
      specs.push_back({AeLayerSpec::Kind::Pointwise, {}});
    }
    return specs;
  }

 private:
  static std::vector<std::size_t> subpixel_rows(std::size_t h, std::size_t w) {
    std::vector<std::size_t> r(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) r[y * w + x] = (y % 2) * 2 + (x % 2);
    return r;
  }

  PatchEmbed<T> embed_;
  std::vector<WindowStage<T>> enc_stages_;
  std::vector<PatchMerge<T>> merges_;
  LayerNorm<T> enc_norm_;
  Linear<T> quant_proj_;
  Codebook<T> codebook_;
  Linear<T> post_quant_;
  std::vector<WindowStage<T>> dec_stages_;
  std::vector<PatchExpand<T>> expands_;
  LayerNorm<T> dec_norm_;
  Tensor<T> subpixel_;
  Linear<T> head_hidden_, head_out_;
};

// ---------------------------------------------------------------------------
// Locality analysis

/// Inclusive index interval along one axis.
struct Span1D {
  long lo = 0, hi = 0;
};

/// Cells (decoder: output pixels; encoder: input pixels) that can be touched
/// by latent cell `cell`, propagated one axis at a time.  Window layers widen
/// the interval to the union of windows it intersects; 2x resampling doubles
/// it; pointwise layers keep it.
inline Span1D influence_span(const std::vector<AeLayerSpec>& specs, const AeConfig& cfg, AeSide side,
                             std::size_t cell, bool vertical) {
  auto widen = [vertical](Span1D s, const WindowPlan& p) {
    const std::size_t g = vertical ? p.grid_h : p.grid_w;
    const auto lo = p.span_of(p.window_of(static_cast<std::size_t>(s.lo)), g).first;
    const auto hi = p.span_of(p.window_of(static_cast<std::size_t>(s.hi)), g).second;
    return Span1D{static_cast<long>(lo), static_cast<long>(hi)};
  };
  Span1D s{static_cast<long>(cell), static_cast<long>(cell)};
  if (side == AeSide::Decoder) {
    for (const auto& l : specs) {
      if (l.kind == AeLayerSpec::Kind::Window) s = widen(s, l.plan);
      if (l.kind == AeLayerSpec::Kind::Expand2x) s = {2 * s.lo, 2 * s.hi + 1};
    }
    return s;
  }
  // Encoder: walk backwards from the latent cell to the input pixels.
  for (auto it = specs.rbegin(); it != specs.rend(); ++it) {
    if (it->kind == AeLayerSpec::Kind::Window) s = widen(s, it->plan);
    if (it->kind == AeLayerSpec::Kind::Merge2x) s = {2 * s.lo, 2 * s.hi + 1};
  }
  const long p = static_cast<long>(cfg.patch_size);
  return {s.lo * p, s.hi * p + p - 1};
}

/// Pixel rectangle (inclusive) that a single latent cell can influence.
struct InfluenceBox {
  long y0, y1, x0, x1;
  bool contains(long y, long x) const { return y >= y0 && y <= y1 && x >= x0 && x <= x1; }
};

inline InfluenceBox influence_box(const AeConfig& cfg, AeSide side, std::size_t latent_h, std::size_t latent_w,
                                  std::size_t cy, std::size_t cx) {
  auto specs = LocalAutoencoder<float>::ae_layer_specs(cfg, side, latent_h, latent_w);
  const Span1D ys = influence_span(specs, cfg, side, cy, true);
  const Span1D xs = influence_span(specs, cfg, side, cx, false);
  return {ys.lo, ys.hi, xs.lo, xs.hi};
}

/// Largest pixel distance, over every latent cell of a latent_h x latent_w
/// grid, by which the cell's influence extends past its own f x f footprint.
inline std::size_t receptive_radius(const AeConfig& cfg, AeSide side, std::size_t latent_h, std::size_t latent_w) {
  cfg.validate_image(latent_h * cfg.downsample, latent_w * cfg.downsample);
  auto specs = LocalAutoencoder<float>::ae_layer_specs(cfg, side, latent_h, latent_w);
  const long f = static_cast<long>(cfg.downsample);
  long r = 0;
  for (int axis = 0; axis < 2; ++axis) {
    const std::size_t n = axis == 0 ? latent_h : latent_w;
    for (std::size_t c = 0; c < n; ++c) {
      const Span1D s = influence_span(specs, cfg, side, c, axis == 0);
      const long lo = static_cast<long>(c) * f, hi = lo + f - 1;
      r = std::max({r, lo - s.lo, s.hi - hi});
    }
  }
  return static_cast<std::size_t>(r);
}

/// Grid-independent bound: every window layer may reach window-1 cells
/// further, whatever the alignment.
inline std::size_t receptive_radius(const AeConfig& cfg, AeSide side) {
  cfg.validate();
  const std::size_t reach = cfg.window - 1;
  std::size_t r = 0;  // in units of the current grid
  if (side == AeSide::Decoder) {
    r = cfg.layers_per_stage * reach;
    for (std::size_t s = 0; s < cfg.expands(); ++s) r = 2 * r + cfg.layers_per_stage * reach;
    return 2 * r;
  }
  // Encoder, measured at the latent grid then in input-pixel units.
  r = cfg.layers_per_stage * reach;  // finest grid
  std::size_t unit = cfg.patch_size;
  for (std::size_t s = 0; s < cfg.merges(); ++s) {
    // a coarser window reaches `reach` coarse cells, i.e. 2^(s+1) fine cells each
    r += cfg.layers_per_stage * reach * (std::size_t{2} << s);
  }
  return r * unit;
}

}  // namespace evq
