#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evq/grid.hpp"
#include "evq/nn.hpp"

namespace evq {

/// Partition of an H x W token grid into W_s x W_s query blocks, each with a
/// halo of E_s cells, visited in raster order.
struct BlockPlan {
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t block = 1;   ///< W_s
  std::size_t extend = 0;  ///< E_s

  BlockPlan() = default;
  BlockPlan(std::size_t h, std::size_t w, std::size_t ws, std::size_t es) : grid_h(h), grid_w(w), block(ws), extend(es) {
    validate();
  }

  void validate() const {
    if (block == 0 || grid_h == 0 || grid_w == 0 || grid_h % block || grid_w % block)
      throw ConfigError("block plan: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                        " not divisible by block size " + std::to_string(block));
  }

  std::size_t blocks_y() const { return grid_h / block; }
  std::size_t blocks_x() const { return grid_w / block; }
  std::size_t num_blocks() const { return blocks_y() * blocks_x(); }
  std::size_t block_tokens() const { return block * block; }
  std::size_t local_side() const { return block + 2 * extend; }
  std::size_t local_tokens() const { return local_side() * local_side(); }
  std::size_t sequence_length() const { return num_blocks() + local_tokens(); }

  std::size_t block_of(std::size_t y, std::size_t x) const { return (y / block) * blocks_x() + x / block; }

  /// Grid cell indices of block b, raster order.
  std::vector<std::size_t> cells(std::size_t b) const {
    if (b >= num_blocks()) throw IndexError("block id " + std::to_string(b) + " out of range");
    const std::size_t y0 = (b / blocks_x()) * block, x0 = (b % blocks_x()) * block;
    std::vector<std::size_t> c;
    c.reserve(block_tokens());
    for (std::size_t dy = 0; dy < block; ++dy)
      for (std::size_t dx = 0; dx < block; ++dx) c.push_back((y0 + dy) * grid_w + x0 + dx);
    return c;
  }

  /// Raster visitation order.
  std::vector<std::size_t> order() const {
    std::vector<std::size_t> o(num_blocks());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = i;
    return o;
  }
};

/// (H/W_s)(W/W_s) global tokens + (W_s + 2E_s)^2 local tokens.
inline std::size_t seq_len(std::size_t h, std::size_t w, std::size_t ws, std::size_t es) {
  return BlockPlan(h, w, ws, es).sequence_length();
}

/// Halo window around one query block.  Slots outside the grid are PAD.
struct LocalTokens {
  static constexpr std::size_t kOutside = static_cast<std::size_t>(-1);

  std::vector<std::int32_t> ids;   ///< code id, TokenGrid::kMask, or unused for PAD
  std::vector<std::uint8_t> valid;  ///< 0 for PAD
  std::vector<std::size_t> cell;    ///< grid cell index or kOutside
  std::vector<std::size_t> query_slots;  ///< slots of the W_s^2 query positions, raster order

  std::size_t invalid_count() const {
    std::size_t n = 0;
    for (auto v : valid) n += v ? 0 : 1;
    return n;
  }
};

inline LocalTokens gather_local(const TokenGrid& grid, std::size_t b, const BlockPlan& plan) {
  if (grid.height != plan.grid_h || grid.width != plan.grid_w) throw DimensionError("gather_local: grid/plan mismatch");
  if (b >= plan.num_blocks()) throw IndexError("gather_local: block id out of range");
  const long side = static_cast<long>(plan.local_side());
  const long y0 = static_cast<long>((b / plan.blocks_x()) * plan.block) - static_cast<long>(plan.extend);
  const long x0 = static_cast<long>((b % plan.blocks_x()) * plan.block) - static_cast<long>(plan.extend);
  LocalTokens lt;
  lt.ids.reserve(plan.local_tokens());
  for (long dy = 0; dy < side; ++dy)
    for (long dx = 0; dx < side; ++dx) {
      const long y = y0 + dy, x = x0 + dx;
      const bool in = y >= 0 && x >= 0 && y < static_cast<long>(plan.grid_h) && x < static_cast<long>(plan.grid_w);
      const std::size_t c = in ? static_cast<std::size_t>(y) * plan.grid_w + static_cast<std::size_t>(x) : LocalTokens::kOutside;
      lt.ids.push_back(in ? grid.cells[c] : TokenGrid::kMask);
      lt.valid.push_back(in ? 1 : 0);
      lt.cell.push_back(c);
    }
  for (std::size_t dy = 0; dy < plan.block; ++dy)
    for (std::size_t dx = 0; dx < plan.block; ++dx)
      lt.query_slots.push_back((plan.extend + dy) * plan.local_side() + plan.extend + dx);
  return lt;
}

struct MgaConfig {
  std::size_t grid_h = 16, grid_w = 16;
  std::size_t block = 4;
  std::size_t extend = 2;
  std::size_t codebook_size = 512;
  std::size_t num_classes = 0;
  std::size_t dim = 128;
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t mlp_ratio = 4;

  BlockPlan plan() const { return BlockPlan(grid_h, grid_w, block, extend); }
  void validate() const {
    plan().validate();
    if (codebook_size < 2) throw ConfigError("codebook_size must be >= 2");
    if (dim == 0 || heads == 0 || dim % heads) throw ConfigError("dim must be divisible by heads");
  }
};

/// Request for the logits of one query block.
struct MgaInput {
  const TokenGrid* tokens = nullptr;
  std::size_t block = 0;
  /// Blocks whose global token is replaced by the global-mask embedding.
  /// Blocks with every cell MASK are treated as masked regardless.
  std::vector<std::uint8_t> block_masked;
  std::optional<std::size_t> class_id;
  /// Global tokens removed as attention keys (ablation experiments).
  std::vector<std::size_t> ablate_global;
};

/// Multi-grained attention prior: [global tokens ; halo-local tokens] through
/// a stack of full self-attention layers, K-way logits at the query block.
template <typename T>
class MgaModel {
 public:
  ParamStore<T> params;
  MgaConfig cfg;

  MgaModel(const MgaConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    plan_ = cfg.plan();
    Rng rng(seed);
    tok_emb_ = params.add("mga.tok_emb", init::normal<T>({cfg.codebook_size + 2, cfg.dim}, 0.02, rng));
    pos_emb_ = params.add("mga.pos_emb", init::normal<T>({cfg.grid_h * cfg.grid_w, cfg.dim}, 0.02, rng));
    pool_ = Linear<T>(params, "mga.pool", plan_.block_tokens() * cfg.dim, cfg.dim, rng);
    global_mask_emb_ = params.add("mga.global_mask_emb", init::normal<T>({1, cfg.dim}, 0.02, rng));
    block_pos_emb_ = params.add("mga.block_pos_emb", init::normal<T>({plan_.num_blocks(), cfg.dim}, 0.02, rng));
    if (cfg.num_classes > 0)
      class_emb_ = params.add("mga.class_emb", init::normal<T>({cfg.num_classes, cfg.dim}, 0.02, rng));
    for (std::size_t l = 0; l < cfg.layers; ++l)
      layers_.emplace_back(params, "mga.layer" + std::to_string(l), cfg.dim, cfg.heads, cfg.mlp_ratio, rng);
    final_norm_ = LayerNorm<T>(params, "mga.final_norm", cfg.dim);
    head_ = Linear<T>(params, "mga.head", cfg.dim, cfg.codebook_size, rng);
  }

  const BlockPlan& plan() const { return plan_; }
  std::size_t codebook_size() const { return cfg.codebook_size; }
  std::size_t mask_id() const { return cfg.codebook_size; }
  std::size_t pad_id() const { return cfg.codebook_size + 1; }
  Linear<T>& pool_layer() { return pool_; }

  /// Embedding-table row for a grid cell value.
  std::size_t vocab_row(std::int32_t v) const {
    if (v == TokenGrid::kMask) return mask_id();
    if (v < 0 || static_cast<std::size_t>(v) >= cfg.codebook_size) throw IndexError("token id out of range");
    return static_cast<std::size_t>(v);
  }

  /// Effective global mask: explicit block mask or a block that is all MASK.
  std::vector<std::uint8_t> global_mask(const TokenGrid& g, const std::vector<std::uint8_t>& explicit_mask) const {
    std::vector<std::uint8_t> m(plan_.num_blocks(), 0);
    if (!explicit_mask.empty() && explicit_mask.size() != m.size()) throw DimensionError("block mask size");
    for (std::size_t b = 0; b < m.size(); ++b) {
      bool all_masked = true;
      for (std::size_t c : plan_.cells(b)) all_masked = all_masked && g.cells[c] == TokenGrid::kMask;
      m[b] = (all_masked || (!explicit_mask.empty() && explicit_mask[b])) ? 1 : 0;
    }
    return m;
  }

  /// One pooled token per block: a W_s x W_s, stride W_s convolution over the
  /// token embeddings.  Masked blocks take the global-mask embedding.
  Tensor<T> pool_global(const TokenGrid& g, const std::vector<std::uint8_t>& masked) const {
    check_grid(g);
    const std::size_t nb = plan_.num_blocks(), bt = plan_.block_tokens();
    std::vector<std::size_t> rows;
    rows.reserve(nb * bt);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t c : plan_.cells(b)) rows.push_back(vocab_row(g.cells[c]));
    Tensor<T> emb = reshape(gather_rows(tok_emb_, rows), {nb, bt * cfg.dim});
    Tensor<T> pooled = pool_(emb);
    bool any = false;
    for (auto v : masked) any = any || v;
    if (!any) return pooled;
    std::vector<std::size_t> pick(nb);
    for (std::size_t b = 0; b < nb; ++b) pick[b] = masked[b] ? nb : b;
    return gather_rows(concat_rows<T>({pooled, global_mask_emb_}), pick);
  }

  /// Logits [W_s^2 x K] for the query block of `in`.
  Tensor<T> forward(const MgaInput& in) const {
    const TokenGrid& g = *in.tokens;
    check_grid(g);
    const std::size_t nb = plan_.num_blocks();
    const LocalTokens lt = gather_local(g, in.block, plan_);

    Tensor<T> global = add(pool_global(g, global_mask(g, in.block_masked)), block_pos_emb_);

    std::vector<std::size_t> tok_rows(lt.ids.size()), pos_rows(lt.ids.size());
    std::vector<std::size_t> pad_slots;
    for (std::size_t s = 0; s < lt.ids.size(); ++s) {
      if (lt.valid[s]) {
        tok_rows[s] = vocab_row(lt.ids[s]);
        pos_rows[s] = lt.cell[s];
      } else {
        tok_rows[s] = pad_id();
        pos_rows[s] = 0;
      }
    }
    Tensor<T> pos = gather_rows(pos_emb_, pos_rows);
    if (lt.invalid_count() > 0) {
      // PAD slots carry no positional embedding.
      std::vector<T> keep(lt.ids.size() * cfg.dim, T(1));
      for (std::size_t s = 0; s < lt.ids.size(); ++s)
        if (!lt.valid[s]) std::fill_n(keep.begin() + s * cfg.dim, cfg.dim, T(0));
      pos = mul(pos, Tensor<T>::from({lt.ids.size(), cfg.dim}, keep));
    }
    Tensor<T> local = add(gather_rows(tok_emb_, tok_rows), pos);

    Tensor<T> x = concat_rows<T>({global, local});
    if (in.class_id) {
      if (cfg.num_classes == 0 || *in.class_id >= cfg.num_classes) throw IndexError("class id out of range");
      x = add_bias(x, gather_rows(class_emb_, std::vector<std::size_t>{*in.class_id}));
    }

    std::vector<std::uint8_t> key_valid(nb + lt.ids.size(), 1);
    for (std::size_t s = 0; s < lt.ids.size(); ++s) key_valid[nb + s] = lt.valid[s];
    for (std::size_t b : in.ablate_global) {
      if (b >= nb) throw IndexError("ablate_global: block id out of range");
      key_valid[b] = 0;
    }
    std::vector<std::size_t> all(x.rows());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const std::vector<std::vector<std::size_t>> groups{all};
    for (const auto& layer : layers_) x = layer(x, groups, key_valid);

    std::vector<std::size_t> q_rows;
    for (std::size_t s : lt.query_slots) q_rows.push_back(nb + s);
    return head_(final_norm_(gather_rows(x, q_rows)));
  }

  /// Inference-only logits, row-major [W_s^2 x K].
  std::vector<float> block_logits(const TokenGrid& g, std::size_t block, std::optional<std::size_t> class_id) const {
    NoGradGuard ng;
    MgaInput in;
    in.tokens = &g;
    in.block = block;
    in.class_id = class_id;
    Tensor<T> l = forward(in);
    return std::vector<float>(l.data().begin(), l.data().end());
  }

  // Read access for equivalence harnesses.
  const Tensor<T>& token_embedding() const { return tok_emb_; }
  const Tensor<T>& position_embedding() const { return pos_emb_; }
  const Tensor<T>& block_position_embedding() const { return block_pos_emb_; }
  const Tensor<T>& global_mask_embedding() const { return global_mask_emb_; }
  const Linear<T>& pool() const { return pool_; }
  const std::vector<AttentionBlock<T>>& layers() const { return layers_; }
  const LayerNorm<T>& final_norm() const { return final_norm_; }
  const Linear<T>& head() const { return head_; }

 private:
  void check_grid(const TokenGrid& g) const {
    if (g.height != cfg.grid_h || g.width != cfg.grid_w)
      throw DimensionError("token grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                           " does not match model grid " + std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w));
  }

  BlockPlan plan_;
  Tensor<T> tok_emb_, pos_emb_, global_mask_emb_, block_pos_emb_, class_emb_;
  Linear<T> pool_;
  std::vector<AttentionBlock<T>> layers_;
  LayerNorm<T> final_norm_;
  Linear<T> head_;
};

}  // namespace evq
