#pragma once

// Self-checks shared by `evq verify` and the test suites: finite-difference
// gradient checks, mask schedule exactness, decoder locality and the two
// degenerate sampling configurations.

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "evq/grad_check.hpp"
#include "evq/local_ae.hpp"
#include "evq/mga.hpp"
#include "evq/reference.hpp"
#include "evq/sampler.hpp"
#include "evq/trainer.hpp"

namespace evq::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Values in [-hi, -lo] U [lo, hi], for ops with a kink at zero.
inline std::vector<double> away_from_zero(std::size_t n, Rng& rng, double lo = 0.1, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(lo, hi);
  return v;
}

/// Slices a flat input vector into separate operands.
class Pack {
 public:
  explicit Pack(std::vector<Shape> shapes) : shapes_(std::move(shapes)) {
    for (const auto& s : shapes_) {
      offsets_.push_back(total_);
      total_ += shape_size(s);
    }
  }
  std::size_t total() const { return total_; }
  Tensor<double> operand(const Tensor<double>& x, std::size_t i) const {
    std::vector<std::uint32_t> idx(shape_size(shapes_[i]));
    for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = static_cast<std::uint32_t>(offsets_[i] + j);
    return gather_elements(x, std::move(idx), shapes_[i]);
  }

 private:
  std::vector<Shape> shapes_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

/// Scalar readout sum(w * y) with fixed random weights, so every output
/// coordinate contributes with a distinct sensitivity.
inline Tensor<double> readout(const Tensor<double>& y, std::uint64_t seed) {
  Rng r(seed);
  return sum(mul(y, Tensor<double>::from(y.shape(), random_values(y.size(), r))));
}

}  // namespace detail

/// One differentiable operation checked on a fresh random instance per call.
struct GradCase {
  std::string name;
  std::function<GradCheckResult(Rng&)> run;
};

/// Parameter gradients of `loss` against central differences, perturbing
/// up to `per_tensor` randomly chosen coordinates of every parameter.
inline GradCheckResult param_grad_check(ParamStore<double>& ps, const std::function<Tensor<double>()>& loss, Rng& rng,
                                        std::size_t per_tensor = 6, double eps = 1e-5, double floor = 1e-4) {
  GradCheckResult r;
  ps.zero_grad();
  loss().backward();
  for (const auto& [name, cref] : ps.items()) {
    Tensor<double> p = cref;
    const std::size_t n = p.size();
    const auto coords = rng.choose(n, std::min(per_tensor, n));
    for (std::size_t c : coords) {
      const double a = p.has_grad() ? p.grad()[c] : 0.0;
      double num = 0.0;
      {
        NoGradGuard ng;
        const double orig = p.mutable_data()[c];
        p.mutable_data()[c] = orig + eps;
        const double fp = loss().item();
        p.mutable_data()[c] = orig - eps;
        const double fm = loss().item();
        p.mutable_data()[c] = orig;
        num = (fp - fm) / (2 * eps);
      }
      r.analytic.push_back(a);
      r.numeric.push_back(num);
      const double err = std::abs(a - num);
      r.max_abs_error = std::max(r.max_abs_error, err);
      r.max_rel_error = std::max(r.max_rel_error, err / std::max({std::abs(a), std::abs(num), floor}));
    }
  }
  ps.zero_grad();
  return r;
}

/// Every differentiable op of the tensor core, plus the composite layers
/// and both networks.  Stop-gradient constructs (straight-through, the VQ
/// loss) have no finite-difference counterpart and are tested separately.
inline std::vector<GradCase> gradient_cases() {
  using detail::Pack;
  using detail::readout;
  using T = Tensor<double>;
  std::vector<GradCase> cases;
  auto simple = [&](std::string name, std::vector<Shape> shapes, std::function<T(const Pack&, const T&)> f,
                    bool kinked = false) {
    cases.push_back({std::move(name), [shapes, f, kinked](Rng& rng) {
                       Pack pk(shapes);
                       const auto vals =
                           kinked ? detail::away_from_zero(pk.total(), rng) : detail::random_values(pk.total(), rng);
                       const std::uint64_t ro = rng.next_u64();
                       return grad_check<double>([&](const T& x) { return readout(f(pk, x), ro); },
                                                 T::from({pk.total()}, vals));
                     }});
  };

  simple("matmul", {{3, 4}, {4, 2}}, [](const Pack& p, const T& x) { return matmul(p.operand(x, 0), p.operand(x, 1)); });
  simple("transpose", {{3, 5}}, [](const Pack& p, const T& x) { return transpose(p.operand(x, 0)); });
  simple("add", {{2, 3}, {2, 3}}, [](const Pack& p, const T& x) { return add(p.operand(x, 0), p.operand(x, 1)); });
  simple("sub", {{2, 3}, {2, 3}}, [](const Pack& p, const T& x) { return sub(p.operand(x, 0), p.operand(x, 1)); });
  simple("mul", {{2, 3}, {2, 3}}, [](const Pack& p, const T& x) { return mul(p.operand(x, 0), p.operand(x, 1)); });
  simple("scale", {{2, 3}}, [](const Pack& p, const T& x) { return scale(p.operand(x, 0), -1.7); });
  simple("square", {{2, 3}}, [](const Pack& p, const T& x) { return square(p.operand(x, 0)); });
  simple("relu", {{3, 3}}, [](const Pack& p, const T& x) { return relu(p.operand(x, 0)); }, true);
  simple("gelu", {{3, 3}}, [](const Pack& p, const T& x) { return gelu(scale(p.operand(x, 0), 3.0)); });
  simple("add_bias", {{3, 4}, {4}}, [](const Pack& p, const T& x) { return add_bias(p.operand(x, 0), p.operand(x, 1)); });
  simple("sum", {{2, 3}}, [](const Pack& p, const T& x) { return sum(square(p.operand(x, 0))); });
  simple("mean", {{2, 3}}, [](const Pack& p, const T& x) { return mean(square(p.operand(x, 0))); });
  simple("mse", {{2, 3}, {2, 3}}, [](const Pack& p, const T& x) { return mse(p.operand(x, 0), p.operand(x, 1)); });
  simple("reshape", {{2, 6}}, [](const Pack& p, const T& x) { return reshape(p.operand(x, 0), {3, 4}); });
  simple("gather_elements", {{2, 3}}, [](const Pack& p, const T& x) {
    return gather_elements(p.operand(x, 0), {5, 0, 0, 3, 2, 5, 1, 4}, {2, 4});
  });
  simple("gather_rows", {{3, 2}}, [](const Pack& p, const T& x) {
    return gather_rows(p.operand(x, 0), std::vector<std::size_t>{2, 0, 2, 1});
  });
  simple("concat_rows", {{2, 3}, {1, 3}}, [](const Pack& p, const T& x) {
    return concat_rows<double>({p.operand(x, 0), p.operand(x, 1)});
  });
  simple("layer_norm", {{3, 5}, {5}, {5}}, [](const Pack& p, const T& x) {
    return layer_norm(scale(p.operand(x, 0), 2.0), add(p.operand(x, 1), T::full({5}, 1.0)), p.operand(x, 2));
  });
  simple("softmax", {{3, 4}}, [](const Pack& p, const T& x) { return softmax(scale(p.operand(x, 0), 2.0)); });
  simple("cross_entropy", {{4, 5}}, [](const Pack& p, const T& x) {
    return cross_entropy(scale(p.operand(x, 0), 3.0), std::vector<std::size_t>{0, 4, 2, 2});
  });
  simple("softmax_mse_composite", {{2, 4}, {2, 4}}, [](const Pack& p, const T& x) {
    return mse(softmax(p.operand(x, 0)), softmax(p.operand(x, 1)));
  });
  simple("attention_full", {{5, 4}, {5, 4}, {5, 4}}, [](const Pack& p, const T& x) {
    return self_attention(p.operand(x, 0), p.operand(x, 1), p.operand(x, 2), 2);
  });
  simple("attention_grouped_masked", {{6, 4}, {6, 4}, {6, 4}}, [](const Pack& p, const T& x) {
    const std::vector<std::uint8_t> valid{1, 1, 0, 1, 1, 0};
    return grouped_attention(p.operand(x, 0), p.operand(x, 1), p.operand(x, 2), 2, {{0, 2, 4}, {1, 3, 5}}, valid);
  });

  cases.push_back({"linear_layer", [](Rng& rng) {
                     ParamStore<double> ps;
                     Linear<double> lin(ps, "l", 4, 3, rng);
                     const T x = T::from({2, 4}, detail::random_values(8, rng));
                     const std::uint64_t ro = rng.next_u64();
                     return param_grad_check(ps, [&] { return readout(lin(x), ro); }, rng);
                   }});
  cases.push_back({"attention_block", [](Rng& rng) {
                     ParamStore<double> ps;
                     AttentionBlock<double> blk(ps, "b", 4, 2, 2, rng);
                     const std::uint64_t ro = rng.next_u64();
                     auto x = detail::random_values(20, rng);
                     auto a = grad_check<double>(
                         [&](const T& in) { return readout(blk(in, {{0, 1, 2}, {3, 4}}), ro); }, T::from({5, 4}, x));
                     const T xt = T::from({5, 4}, x);
                     auto b = param_grad_check(ps, [&] { return readout(blk(xt, {{0, 1, 2}, {3, 4}}), ro); }, rng);
                     a.max_rel_error = std::max(a.max_rel_error, b.max_rel_error);
                     a.max_abs_error = std::max(a.max_abs_error, b.max_abs_error);
                     return a;
                   }});
  cases.push_back({"mga_masked_ce", [](Rng& rng) {
                     MgaConfig mc;
                     mc.grid_h = mc.grid_w = 4;
                     mc.block = 2;
                     mc.extend = 1;
                     mc.codebook_size = 5;
                     mc.num_classes = 2;
                     mc.dim = 8;
                     mc.heads = 2;
                     mc.layers = 1;
                     mc.mlp_ratio = 2;
                     MgaModel<double> m(mc, rng.next_u64());
                     TokenGrid g(4, 4);
                     for (auto& c : g.cells) c = static_cast<std::int32_t>(rng.uniform_int(5));
                     MaskState ms = sample_token_mask(4, 4, 0.3, rng);
                     ms.block_mask = {0, 1, 0, 0};
                     const std::size_t block = static_cast<std::size_t>(rng.uniform_int(4));
                     for (std::size_t c : m.plan().cells(block))
                       if (!ms.token_mask[c]) {
                         ms.token_mask[c] = 1;
                         ms.token_positions.push_back(c);
                       }
                     return param_grad_check(m.params, [&] { return masked_block_loss(m, g, ms, block, 1).ce_sum; }, rng, 4);
                   }});
  cases.push_back({"local_ae_decoder", [](Rng& rng) {
                     AeConfig ac;
                     ac.dim = 8;
                     ac.heads = 2;
                     ac.codebook_size = 6;
                     ac.code_dim = 3;
                     ac.window = 2;
                     ac.mlp_ratio = 2;
                     LocalAutoencoder<double> ae(ac, rng.next_u64());
                     const FeatureGrid<double> zq{T::from({16, 3}, detail::random_values(48, rng)), 4, 4};
                     const T target = T::from({256, 1}, detail::random_values(256, rng, 0.0, 1.0));
                     return param_grad_check(ae.params, [&] { return mse(ae.decode(zq), target); }, rng, 3);
                   }});
  cases.push_back({"local_ae_encoder", [](Rng& rng) {
                     AeConfig ac;
                     ac.dim = 8;
                     ac.heads = 2;
                     ac.codebook_size = 6;
                     ac.code_dim = 3;
                     ac.window = 2;
                     ac.mlp_ratio = 2;
                     LocalAutoencoder<double> ae(ac, rng.next_u64());
                     const T img = T::from({64, 1}, detail::random_values(64, rng, 0.0, 1.0));
                     const std::uint64_t ro = rng.next_u64();
                     return param_grad_check(ae.params, [&] { return readout(ae.encode(img, 8, 8).features, ro); }, rng, 3);
                   }});
  return cases;
}

struct GradSummary {
  std::string name;
  std::size_t instances = 0;
  double worst_rel_error = 0.0;
};

inline std::vector<GradSummary> run_gradient_checks(std::size_t instances, std::uint64_t seed) {
  std::vector<GradSummary> out;
  const Rng base(seed);
  std::uint64_t stream = 0;
  for (const auto& c : gradient_cases()) {
    GradSummary s{c.name, instances, 0.0};
    for (std::size_t i = 0; i < instances; ++i) {
      Rng r = base.split(stream++);
      s.worst_rel_error = std::max(s.worst_rel_error, c.run(r).max_rel_error);
    }
    out.push_back(s);
  }
  return out;
}

inline CheckResult check_gradients(std::size_t instances = 10, double tol = 1e-4, std::uint64_t seed = 1) {
  CheckResult r{"gradients", true, ""};
  for (const auto& s : run_gradient_checks(instances, seed)) {
    if (!(s.worst_rel_error < tol)) {
      r.passed = false;
      r.detail += s.name + " rel err " + std::to_string(s.worst_rel_error) + "; ";
    }
  }
  if (r.passed) r.detail = "all ops below " + std::to_string(tol);
  return r;
}

/// Masked counts at r = 0, 0.1, ..., 0.9 on a 16 x 16 grid, both from the
/// closed form and from an actual sampled mask.
inline CheckResult check_schedule() {
  CheckResult r{"schedule", true, ""};
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const double ratio = i / 10.0;
    const auto want = static_cast<std::size_t>(std::ceil(std::cos(std::numbers::pi * ratio / 2) * 256.0));
    const MaskState m = sample_token_mask(16, 16, ratio, rng);
    std::size_t got = 0;
    for (auto v : m.token_mask) got += v;
    if (masked_count(ratio, 256) != want || got != want || m.token_positions.size() != want) {
      r.passed = false;
      r.detail += "r=" + std::to_string(ratio) + " count " + std::to_string(got) + " want " + std::to_string(want) + "; ";
    }
  }
  for (std::size_t steps : {1, 2, 5, 8, 16})
    for (std::size_t m : {1, 4, 16, 256}) {
      const auto n = in_block_schedule(steps, m);
      bool ok = n.front() == m && n.back() == 0;
      for (std::size_t t = 1; t < n.size(); ++t) ok = ok && n[t] <= n[t - 1];
      if (!ok) {
        r.passed = false;
        r.detail += "in-block schedule T=" + std::to_string(steps) + " m=" + std::to_string(m) + "; ";
      }
    }
  if (r.passed) r.detail = "counts exact for r in {0,...,0.9}";
  return r;
}

struct LocalityStats {
  std::size_t probes = 0;
  std::size_t changed_pixels = 0;   ///< summed over probes
  std::size_t outside_radius = 0;   ///< changed pixels beyond the receptive radius
  std::size_t outside_box = 0;      ///< changed pixels beyond the exact influence box
  std::size_t radius = 0;
};

/// Swaps single latent codes and re-decodes; counts every changed pixel that
/// lies outside the predicted region.  Comparison is bitwise on the raw
/// decoder output.
template <typename T>
LocalityStats probe_locality(const LocalAutoencoder<T>& ae, const TokenGrid& tokens,
                             const std::vector<std::pair<std::size_t, std::size_t>>& cells, Rng& rng) {
  const AeConfig& cfg = ae.cfg;
  const std::size_t f = cfg.downsample, H = tokens.height * f, W = tokens.width * f;
  LocalityStats st;
  st.radius = receptive_radius(cfg, AeSide::Decoder, tokens.height, tokens.width);
  NoGradGuard ng;
  const Tensor<T> base = ae.decode(ae.embed_tokens(tokens));
  for (auto [cy, cx] : cells) {
    TokenGrid t = tokens;
    auto& cell = t.at(cy, cx);
    cell = static_cast<std::int32_t>((static_cast<std::size_t>(cell) + 1 + rng.uniform_int(cfg.codebook_size - 1)) %
                                     cfg.codebook_size);
    const Tensor<T> out = ae.decode(ae.embed_tokens(t));
    const InfluenceBox box = influence_box(cfg, AeSide::Decoder, tokens.height, tokens.width, cy, cx);
    const long r = static_cast<long>(st.radius);
    const long y0 = static_cast<long>(cy * f) - r, y1 = static_cast<long>(cy * f + f - 1) + r;
    const long x0 = static_cast<long>(cx * f) - r, x1 = static_cast<long>(cx * f + f - 1) + r;
    ++st.probes;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < cfg.channels; ++c) {
          const std::size_t i = (y * W + x) * cfg.channels + c;
          if (out[i] == base[i]) continue;
          ++st.changed_pixels;
          const long ly = static_cast<long>(y), lx = static_cast<long>(x);
          if (ly < y0 || ly > y1 || lx < x0 || lx > x1) ++st.outside_radius;
          if (!box.contains(ly, lx)) ++st.outside_box;
        }
  }
  return st;
}

template <typename T>
CheckResult check_locality(const LocalAutoencoder<T>& ae, std::size_t latent_side, std::uint64_t seed) {
  CheckResult r{"locality", true, ""};
  Rng rng(seed);
  TokenGrid g(latent_side, latent_side);
  for (auto& c : g.cells) c = static_cast<std::int32_t>(rng.uniform_int(ae.cfg.codebook_size));
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  const std::size_t last = latent_side - 1, mid = latent_side / 2;
  cells = {{0, 0}, {0, last}, {last, 0}, {last, last}, {mid, mid}, {1, mid}, {mid, last}};
  const LocalityStats st = probe_locality(ae, g, cells, rng);
  r.passed = st.outside_radius == 0 && st.outside_box == 0 && st.changed_pixels > 0;
  r.detail = std::to_string(st.probes) + " probes, radius " + std::to_string(st.radius) + " px, " +
             std::to_string(st.changed_pixels) + " changed, " + std::to_string(st.outside_radius) + " outside";
  return r;
}

inline MgaConfig tiny_prior(std::size_t side, std::size_t block, std::size_t extend, std::size_t k) {
  MgaConfig mc;
  mc.grid_h = mc.grid_w = side;
  mc.block = block;
  mc.extend = extend;
  mc.codebook_size = k;
  mc.dim = 16;
  mc.heads = 2;
  mc.layers = 2;
  mc.mlp_ratio = 2;
  return mc;
}

/// W_s equal to the grid side: one block, so block sampling is global
/// iterative parallel decoding.
inline CheckResult check_degenerate_global(std::size_t side = 4, std::size_t steps = 5, std::uint64_t seed = 11) {
  CheckResult r{"degenerate_global", true, ""};
  MgaModel<float> m(tiny_prior(side, side, 1, 7), seed);
  SampleConfig sc;
  sc.steps = steps;
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng a(seed + s), b(seed + s);
    const auto res = sample_image<MgaModel<float>, NoDecoder>(m, nullptr, sc, a);
    TokenGrid ref_grid;
    const auto ref = reference::global_parallel_decode(m, sc, b, &ref_grid);
    if (!(res.trace == ref) || !(res.tokens == ref_grid) || a.next_u64() != b.next_u64()) r.passed = false;
  }
  r.detail = r.passed ? "traces identical" : "trace mismatch";
  return r;
}

/// W_s = 1 and T = 1: one token per call in raster order.
inline CheckResult check_degenerate_raster(std::size_t side = 4, std::uint64_t seed = 12) {
  CheckResult r{"degenerate_raster", true, ""};
  MgaModel<float> m(tiny_prior(side, 1, 1, 7), seed);
  SampleConfig sc;
  sc.steps = 1;
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng a(seed + s), b(seed + s);
    const auto res = sample_image<MgaModel<float>, NoDecoder>(m, nullptr, sc, a);
    TokenGrid ref_grid;
    const auto ref = reference::raster_autoregressive(m, sc, b, &ref_grid);
    if (!(res.trace == ref) || !(res.tokens == ref_grid) || a.next_u64() != b.next_u64()) r.passed = false;
  }
  r.detail = r.passed ? "traces identical" : "trace mismatch";
  return r;
}

}  // namespace evq::verify
