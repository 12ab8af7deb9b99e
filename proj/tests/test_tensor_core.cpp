#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "evq/grad_check.hpp"
#include "evq/memory.hpp"
#include "evq/nn.hpp"
#include "evq/ops.hpp"
#include "evq/rng.hpp"
#include "evq/verify.hpp"

using namespace evq;
using TD = Tensor<double>;

namespace {

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

std::vector<double> randv(std::size_t n, Rng& r) {
  std::vector<double> v(n);
  for (auto& x : v) x = r.uniform(-2.0, 2.0);
  return v;
}

}  // namespace

TEST(Tensor, DataLengthMatchesShape) {
  EXPECT_EQ(TD::zeros({3, 4}).size(), 12u);
  EXPECT_EQ(TD::zeros({2, 3, 5}).size(), 30u);
  EXPECT_THROW(TD::from({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
}

TEST(Tensor, GradientShapeMatchesData) {
  TD a = TD::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(square(a)).backward();
  ASSERT_TRUE(a.has_grad());
  EXPECT_EQ(a.grad().size(), a.size());
}

TEST(Matmul, IdentityCase) {
  TD i2 = TD::from({2, 2}, {1, 0, 0, 1});
  TD m = TD::from({2, 2}, {1, 2, 3, 4});
  TD r = matmul(i2, m);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, OrthogonalPick) {
  TD r = matmul(TD::from({1, 2}, {1, 0}), TD::from({2, 1}, {0, 5}));
  EXPECT_EQ(r.item(), 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = randv(9, rng), b = randv(9, rng);
    TD r = matmul(TD::from({3, 3}, a), TD::from({3, 3}, b));
    auto want = naive_matmul(a, b, 3, 3, 3);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(r[i], want[i], 1e-12);
  }
  auto a = randv(15, rng), b = randv(20, rng);
  TD r = matmul(TD::from({3, 5}, a), TD::from({5, 4}, b));
  auto want = naive_matmul(a, b, 3, 5, 4);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(r[i], want[i], 1e-12);
}

TEST(Matmul, BackwardIsTransposedProducts) {
  Rng rng(2);
  auto a = randv(6, rng), b = randv(12, rng), g = randv(8, rng);
  TD ta = TD::from({2, 3}, a, true), tb = TD::from({3, 4}, b, true);
  sum(mul(matmul(ta, tb), TD::from({2, 4}, g))).backward();
  // dA = G B^T, dB = A^T G
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t p = 0; p < 3; ++p) {
      double s = 0;
      for (std::size_t j = 0; j < 4; ++j) s += g[i * 4 + j] * b[p * 4 + j];
      EXPECT_NEAR(ta.grad()[i * 3 + p], s, 1e-12);
    }
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < 2; ++i) s += a[i * 3 + p] * g[i * 4 + j];
      EXPECT_NEAR(tb.grad()[p * 4 + j], s, 1e-12);
    }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), DimensionError);
}

TEST(Softmax, Symmetry) {
  TD s = softmax(TD::from({1, 2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, StableUnderLargeShift) {
  TD s = softmax(TD::from({1, 2}, {1000, 1000}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, ClosedFormLn3) {
  TD s = softmax(TD::from({1, 2}, {0, std::log(3.0)}));
  EXPECT_NEAR(s[0], 0.25, 1e-15);
  EXPECT_NEAR(s[1], 0.75, 1e-15);
}

TEST(Softmax, NaNInputThrows) {
  EXPECT_THROW(softmax(TD::from({1, 2}, {0, std::numeric_limits<double>::quiet_NaN()})), NumericError);
}

TEST(Softmax, RowsSumToOneAndLieInUnitInterval) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> v(4 * 7);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-30, 30));
    Tensor<float> s = softmax(Tensor<float>::from({4, 7}, v));
    for (std::size_t r = 0; r < 4; ++r) {
      double tot = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        const float p = s.at(r, j);
        EXPECT_GE(p, 0.0f);
        EXPECT_LE(p, 1.0f);
        tot += p;
      }
      EXPECT_NEAR(tot, 1.0, 1e-6);
    }
  }
}

TEST(CrossEntropy, UniformTwoWayIsLn2) {
  EXPECT_NEAR(cross_entropy(TD::from({1, 2}, {0, 0}), std::vector<std::size_t>{0}).item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrectNearZero) {
  EXPECT_NEAR(cross_entropy(TD::from({1, 2}, {30, -30}), std::vector<std::size_t>{0}).item(), 0.0, 1e-20);
}

TEST(CrossEntropy, MatchesScalarLoop) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto v = randv(20, rng);
    std::vector<std::size_t> tg(4);
    for (auto& t : tg) t = rng.uniform_int(5);
    double want = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      double z = 0;
      for (std::size_t j = 0; j < 5; ++j) z += std::exp(v[i * 5 + j]);
      want += -std::log(std::exp(v[i * 5 + tg[i]]) / z);
    }
    want /= 4;
    EXPECT_NEAR(cross_entropy(TD::from({4, 5}, v), tg).item(), want, 1e-12);
  }
}

TEST(CrossEntropy, OutOfRangeTargetThrows) {
  EXPECT_THROW(cross_entropy(TD::from({1, 2}, {0, 0}), std::vector<std::size_t>{2}), IndexError);
}

TEST(GradCheck, SumOfSquares) {
  auto r = grad_check<double>([](const TD& x) { return sum(square(x)); }, TD::from({2}, {1, 2}));
  EXPECT_NEAR(r.analytic[0], 2.0, 1e-12);
  EXPECT_NEAR(r.analytic[1], 4.0, 1e-12);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, SoftmaxCrossEntropyComposite) {
  Rng rng(3);
  auto r = grad_check<double>(
      [](const TD& x) { return cross_entropy(x, std::vector<std::size_t>{1, 0, 3}); }, TD::from({3, 4}, randv(12, rng)));
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  auto r = grad_check<double>([](const TD&) { return TD::scalar(3.0); }, TD::from({3}, {1, 2, 3}));
  for (double g : r.analytic) EXPECT_EQ(g, 0.0);
  for (double g : r.numeric) EXPECT_EQ(g, 0.0);
}

TEST(GradCheck, EveryOpOverTenInstances) {
  for (const auto& s : verify::run_gradient_checks(10, 99)) {
    EXPECT_EQ(s.instances, 10u);
    EXPECT_LT(s.worst_rel_error, 1e-4) << s.name;
  }
}

TEST(StraightThrough, ForwardIsQuantizedBackwardIsIdentity) {
  TD in = TD::from({1, 3}, {0.3, -0.2, 0.9}, true);
  TD q = TD::from({1, 3}, {0, 0, 1});
  TD y = straight_through(in, q);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 1}));
  sum(mul(y, TD::from({1, 3}, {2, -1, 5}))).backward();
  EXPECT_EQ(std::vector<double>(in.grad().begin(), in.grad().end()), (std::vector<double>{2, -1, 5}));
}

TEST(Attention, MaskedKeysGetExactlyZeroWeight) {
  Rng rng(4);
  TD q = TD::from({4, 2}, randv(8, rng)), k = TD::from({4, 2}, randv(8, rng)), v = TD::from({4, 2}, randv(8, rng));
  std::vector<std::vector<double>> probs;
  AttentionTap<double>::hook() = [&](const AttentionTap<double>::Record& r) { probs.push_back(r.probs); };
  const std::vector<std::uint8_t> valid{1, 0, 1, 1};
  self_attention(q, k, v, 1, valid);
  AttentionTap<double>::hook() = nullptr;
  ASSERT_EQ(probs.size(), 1u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(probs[0][i * 4 + 1], 0.0);
}

TEST(Attention, MatchesDirectFormula) {
  Rng rng(8);
  const std::size_t n = 5, d = 4, h = 2, dh = 2;
  auto qv = randv(n * d, rng), kv = randv(n * d, rng), vv = randv(n * d, rng);
  TD out = self_attention(TD::from({n, d}, qv), TD::from({n, d}, kv), TD::from({n, d}, vv), h);
  for (std::size_t head = 0; head < h; ++head)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += qv[i * d + head * dh + c] * kv[j * d + head * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double want = 0;
        for (std::size_t j = 0; j < n; ++j) want += s[j] / z * vv[j * d + head * dh + c];
        EXPECT_NEAR(out.at(i, head * dh + c), want, 1e-12);
      }
    }
}

TEST(Attention, GroupsAreIndependent) {
  Rng rng(9);
  auto qv = randv(24, rng);
  TD q = TD::from({6, 4}, qv);
  const std::vector<std::vector<std::size_t>> groups{{0, 1, 2}, {3, 4, 5}};
  TD base = grouped_attention(q, q, q, 2, groups);
  qv[4 * 4 + 1] += 1.0;  // row 4 lives in the second group
  TD q2 = TD::from({6, 4}, qv);
  TD moved = grouped_attention(q2, q2, q2, 2, groups);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(base[i], moved[i]);
}

TEST(Attention, GroupsMustPartitionRows) {
  TD q = TD::zeros({3, 2});
  EXPECT_THROW(grouped_attention(q, q, q, 1, {{0, 1}}), DimensionError);
  EXPECT_THROW(grouped_attention(q, q, q, 1, {{0, 1}, {1, 2}}), DimensionError);
}

TEST(LayerNorm, NormalisesRows) {
  TD x = TD::from({2, 4}, {1, 2, 3, 4, -5, 0, 5, 10});
  TD y = layer_norm(x, TD::full({4}, 1.0), TD::zeros({4}));
  for (std::size_t r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 4; ++j) m += y.at(r, j);
    m /= 4;
    for (std::size_t j = 0; j < 4; ++j) v += (y.at(r, j) - m) * (y.at(r, j) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 4, 1.0, 1e-4);
  }
}

TEST(NoGrad, GuardStopsGraphRecording) {
  TD a = TD::from({2}, {1, 2}, true);
  {
    NoGradGuard ng;
    TD b = square(a);
    EXPECT_FALSE(b.requires_grad());
  }
  EXPECT_TRUE(square(a).requires_grad());
}

TEST(Rng, EngineMatchesStandardSequence) {
  // The standard fixes the 10000th output of a default-seeded mt19937_64.
  Rng r(5489u);
  std::uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = r.next_u64();
  EXPECT_EQ(v, 9981545732273789042ULL);
}

TEST(Rng, SameSeedSameDraws) {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.uniform(), b.uniform());
    EXPECT_EQ(a.normal(), b.normal());
    EXPECT_EQ(a.uniform_int(17), b.uniform_int(17));
    EXPECT_EQ(a.gumbel(), b.gumbel());
  }
}

TEST(Rng, UniformIntIsUnbiased) {
  Rng r(1);
  std::vector<int> c(3, 0);
  for (int i = 0; i < 30000; ++i) ++c[r.uniform_int(3)];
  for (int v : c) EXPECT_NEAR(v, 10000, 400);
}

TEST(Rng, ChooseGivesDistinctIndices) {
  Rng r(2);
  auto s = r.choose(50, 20);
  std::sort(s.begin(), s.end());
  EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
  EXPECT_LT(s.back(), 50u);
  EXPECT_EQ(r.choose(5, 5).size(), 5u);
}

TEST(Rng, SplitStreamsAreReproducibleAndDistinct) {
  Rng base(4);
  Rng a = base.split(1), b = base.split(1), c = base.split(2);
  const auto va = a.next_u64();
  EXPECT_EQ(va, b.next_u64());
  EXPECT_NE(va, c.next_u64());
}

TEST(Init, SameSeedBitIdenticalParameters) {
  ParamStore<float> p1, p2;
  Rng r1(77), r2(77);
  Linear<float> a(p1, "x", 8, 5, r1), b(p2, "x", 8, 5, r2);
  auto e1 = init::normal<float>({4, 3}, 0.02, r1), e2 = init::normal<float>({4, 3}, 0.02, r2);
  EXPECT_TRUE(std::equal(a.weight.data().begin(), a.weight.data().end(), b.weight.data().begin()));
  EXPECT_TRUE(std::equal(e1.data().begin(), e1.data().end(), e2.data().begin()));
}

TEST(Init, FanInUniformBound) {
  Rng r(5);
  auto w = init::fan_in_uniform<double>({64, 8}, 64, r);
  for (double v : w.data()) EXPECT_LE(std::abs(v), 1.0 / 8.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore<double> ps;
  TD w = ps.add("w", TD::from({2}, {1.0, -1.0}, true));
  Adam<double> opt(ps, {0.1, 0.9, 0.999, 1e-8});
  sum(mul(w, TD::from({2}, {3.0, -0.5}))).backward();
  opt.step();
  // Bias-corrected first step is lr * g / (|g| + eps).
  EXPECT_NEAR(w[0], 0.9, 1e-7);
  EXPECT_NEAR(w[1], -0.9, 1e-7);
  EXPECT_FALSE(w.has_grad());
}

TEST(MemoryProbe, TracksLiveAndPeak) {
  MemoryProbe::reset_peak();
  const std::size_t before = MemoryProbe::live_bytes();
  {
    Buffer<double> b(1000);
    EXPECT_EQ(MemoryProbe::live_bytes(), before + 8000);
  }
  EXPECT_EQ(MemoryProbe::live_bytes(), before);
  EXPECT_GE(MemoryProbe::peak_bytes(), before + 8000);
}

TEST(OpCounters, CountMultiplyAdds) {
  OpCounters::reset();
  matmul(TD::zeros({2, 3}), TD::zeros({3, 4}));
  EXPECT_EQ(OpCounters::get().matmul_macs, 24u);
}
