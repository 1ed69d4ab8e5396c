// SPDX-License-Identifier: Apache-2.0

#include "snip/quant.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "gtest/gtest.h"

namespace snip {
namespace {

struct Code {
  double value;
  bool even_mantissa;
};

// Independent decoder: walks raw bit patterns with the textbook formula.
std::vector<Code> decode_all(int e_bits, int m_bits, int bias, bool skip_top_exponent, bool skip_top_code) {
  std::vector<Code> out;
  const int top = (1 << e_bits) - 1;
  for (int bits = 0; bits < (1 << (e_bits + m_bits)); ++bits) {
    const int e = bits >> m_bits, m = bits & ((1 << m_bits) - 1);
    if (skip_top_exponent && e == top) continue;
    if (skip_top_code && bits == (1 << (e_bits + m_bits)) - 1) continue;
    const double v = e == 0 ? std::pow(2.0, 1 - bias) * (m / std::pow(2.0, m_bits))
                            : std::pow(2.0, e - bias) * (1.0 + m / std::pow(2.0, m_bits));
    out.push_back({v, m % 2 == 0});
  }
  return out;
}

// Nearest code by linear scan; exact ties go to the even mantissa.
double oracle_round(const std::vector<Code>& codes, double a) {
  double best = codes.front().value, best_d = std::abs(a - best);
  bool best_even = codes.front().even_mantissa;
  for (const auto& c : codes) {
    const double dist = std::abs(a - c.value);
    if (dist < best_d || (dist == best_d && c.even_mantissa && !best_even)) {
      best = c.value;
      best_d = dist;
      best_even = c.even_mantissa;
    }
  }
  return best;
}

QuantSpec spec(FloatFormat f, Granularity g = Granularity::tensorwise(), Rounding r = Rounding::kNearestEven) {
  return {std::move(f), g, r};
}

TEST(QuantTest, E2M1ValueSet) {
  const auto vals = representable_values(FloatFormat::e2m1());
  ASSERT_EQ(vals.size(), 16u);
  const std::vector<double> mags{0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(vals[8 + i], mags[i]);
    EXPECT_EQ(vals[7 - i], -mags[i]);
  }
  EXPECT_TRUE(std::signbit(vals[7]));
  EXPECT_FALSE(std::signbit(vals[8]));
  EXPECT_EQ(FloatFormat::e2m1().max_value(), 6.0);
}

TEST(QuantTest, E4M3MaxByEnumeration) {
  const auto vals = representable_values(FloatFormat::e4m3());
  EXPECT_EQ(vals.back(), 448.0);
  EXPECT_EQ(vals.front(), -448.0);
  EXPECT_EQ(FloatFormat::e4m3().max_value(), 448.0);
  // 256 codes minus the two NaNs.
  EXPECT_EQ(vals.size(), 254u);
  EXPECT_EQ(FloatFormat::e5m2().max_value(), 57344.0);
}

TEST(QuantTest, TinyFormatIsSymmetricFourValues) {
  const FloatFormat f(1, 0, FloatEncoding::kFiniteOnly);
  const auto vals = representable_values(f);
  ASSERT_EQ(vals.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(vals[i], -vals[3 - i]);
}

TEST(QuantTest, FormatValidation) {
  EXPECT_THROW(FloatFormat(0, 3, FloatEncoding::kIeee), InvalidArgument);
  EXPECT_THROW(FloatFormat(20, 20, FloatEncoding::kIeee), InvalidArgument);
  EXPECT_THROW(FloatFormat::from_name("FP8"), InvalidArgument);
  EXPECT_EQ(FloatFormat::from_name("E2M1"), FloatFormat::e2m1());
  EXPECT_EQ(FloatFormat::from_name("E4M3"), FloatFormat::e4m3());
  EXPECT_THROW(representable_values(FloatFormat(8, 23, FloatEncoding::kIeee)), SizeError);
}

TEST(QuantTest, NearestEvenMatchesEnumerationOracle) {
  struct Case {
    FloatFormat f;
    std::vector<Code> codes;
  };
  const std::vector<Case> cases{
      {FloatFormat::e2m1(), decode_all(2, 1, 1, false, false)},
      {FloatFormat::e4m3(), decode_all(4, 3, 7, false, true)},
      {FloatFormat::e5m2(), decode_all(5, 2, 15, true, false)},
      {FloatFormat::e3m4(), decode_all(3, 4, 3, true, false)},
  };
  RngStream rng(99, 0);
  for (const auto& c : cases) {
    const double fmax = c.f.max_value();
    // Random magnitudes spanning subnormals to max.
    for (int i = 0; i < 3000; ++i) {
      const double a = fmax * std::pow(2.0, -20.0 * rng.uniform());
      EXPECT_EQ(round_nearest_even(c.f, a), oracle_round(c.codes, a)) << c.f.name() << " a=" << a;
      EXPECT_EQ(round_nearest_even(c.f, -a), -oracle_round(c.codes, a));
    }
    // Exact midpoints between neighbours exercise tie-breaking.
    std::vector<double> grid;
    for (const auto& code : c.codes) grid.push_back(code.value);
    std::sort(grid.begin(), grid.end());
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
      const double mid = 0.5 * (grid[i] + grid[i + 1]);
      EXPECT_EQ(round_nearest_even(c.f, mid), oracle_round(c.codes, mid)) << c.f.name() << " mid=" << mid;
    }
  }
}

TEST(QuantTest, ComputeScalesExamples) {
  const FloatFormat f = FloatFormat::e2m1();
  const Tensor x = Tensor::matrix({{1.0, -12.0}, {3.0, 0.5}});
  const Tensor s = compute_scales(x, Granularity::tensorwise(), f);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0], 0.5);

  const Tensor z = compute_scales(Tensor({3, 300}), Granularity::tilewise(128), f);
  for (double v : z.data()) EXPECT_EQ(v, 1.0);

  Tensor bad = x;
  bad[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(compute_scales(bad, Granularity::tensorwise(), f), InvalidArgument);
  EXPECT_THROW(compute_scales(Tensor(), Granularity::tensorwise(), f), InvalidArgument);
}

TEST(QuantTest, TilewiseScalesMatchDirectLoop) {
  RngStream rng(5, 5);
  const Tensor x = sample_gaussian({4, 256}, 1.0, rng);
  const FloatFormat f = FloatFormat::e4m3();
  const Tensor s = compute_scales(x, Granularity::tilewise(128), f);
  ASSERT_EQ(s.size(), 8u);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t t = 0; t < 2; ++t) {
      double amax = 0.0;
      for (std::size_t c = t * 128; c < (t + 1) * 128; ++c) amax = std::max(amax, std::abs(x(r, c)));
      EXPECT_EQ(s[r * 2 + t], f.max_value() / amax);
    }
  }
}

TEST(QuantTest, GroupShapesAndRaggedEdges) {
  const FloatFormat f = FloatFormat::e2m1();
  const Tensor x({130, 200}, 1.0);
  EXPECT_EQ(compute_scales(x, Granularity::rowwise(), f).shape(), (Shape{130}));
  EXPECT_EQ(compute_scales(x, Granularity::columnwise(), f).shape(), (Shape{200}));
  EXPECT_EQ(compute_scales(x, Granularity::blockwise(128), f).shape(), (Shape{2, 2}));
  EXPECT_EQ(compute_scales(x, Granularity::tilewise(128), f).shape(), (Shape{130, 2}));
  EXPECT_THROW(compute_scales(x, Granularity::tilewise(0), f), InvalidArgument);

  // A ragged last block only sees its own entries.
  Tensor y({130, 200}, 1.0);
  y(129, 199) = 3.0;
  const Tensor s = compute_scales(y, Granularity::blockwise(128), f);
  EXPECT_EQ(s[0], 6.0);
  EXPECT_EQ(s[3], 2.0);
}

TEST(QuantTest, GridValuesAreFixedPoints) {
  const FloatFormat f = FloatFormat::e2m1();
  // amax 6 => scale 1, every entry already on the grid.
  const Tensor x = Tensor::matrix({{6.0, -0.5, 1.5, 3.0}, {0.0, -4.0, 2.0, 1.0}});
  const QuantResult r = fake_quantize(x, spec(f), RngStream(1, 1));
  EXPECT_EQ(r.tensor, x);
  EXPECT_EQ(r.abs_err_norm, 0.0);
  EXPECT_EQ(r.rel_err, 0.0);
}

TEST(QuantTest, NearestEvenTieAtTwoPointFive) {
  const Tensor x = Tensor::matrix({{2.5, 6.0}});
  const QuantResult r = fake_quantize(x, spec(FloatFormat::e2m1()), RngStream(1, 1));
  EXPECT_EQ(r.tensor(0, 0), 2.0);
  EXPECT_NEAR(r.abs_err_norm, 0.5, 1e-15);
}

TEST(QuantTest, StochasticRoundingIsUnbiasedAtTwoPointFive) {
  const Tensor x = Tensor::matrix({{2.5, 6.0}});
  const QuantSpec s = spec(FloatFormat::e2m1(), Granularity::tensorwise(), Rounding::kStochastic);
  const int n = 100000;
  int ups = 0;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = fake_quantize(x, s, RngStream(77, static_cast<std::uint64_t>(i))).tensor(0, 0);
    ASSERT_TRUE(v == 2.0 || v == 3.0);
    ups += v == 3.0;
    sum += v;
  }
  EXPECT_NEAR(static_cast<double>(ups) / n, 0.5, 0.01);
  EXPECT_GE(sum / n, 2.49);
  EXPECT_LE(sum / n, 2.51);
}

TEST(QuantTest, StochasticRoundingUnbiasedOnGridInterior) {
  const FloatFormat f = FloatFormat::e2m1();
  RngStream pick(3, 3);
  for (int p = 0; p < 20; ++p) {
    const double v = 0.01 + 5.98 * pick.uniform();
    const double step = grid_step(f, v);
    const double lo = std::floor(v / step) * step;
    const double prob = (v - lo) / step;
    const int n = 100000;
    RngStream rng(123, static_cast<std::uint64_t>(p));
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += round_stochastic(f, v, rng);
    const double sd = step * std::sqrt(prob * (1 - prob) / n);
    EXPECT_LE(std::abs(sum / n - v), 3.0 * sd + 1e-15) << "v=" << v;
  }
}

TEST(QuantTest, NearestEvenIsIdempotent) {
  RngStream rng(21, 0);
  for (int i = 0; i < 100; ++i) {
    const FloatFormat f = i % 2 ? FloatFormat::e2m1() : FloatFormat::e4m3();
    const Granularity g = i % 3 == 0 ? Granularity::tensorwise() : Granularity::tilewise(16);
    const Tensor x = sample_gaussian({5, 40}, 1.0 + i, rng);
    const QuantSpec s = spec(f, g);
    const Tensor once = fake_quantize(x, s, RngStream(1, 1)).tensor;
    const QuantResult twice = fake_quantize(once, s, RngStream(1, 1));
    EXPECT_EQ(twice.tensor, once);
    EXPECT_EQ(twice.abs_err_norm, 0.0);
  }
}

TEST(QuantTest, ErrorIsBoundedByLocalGridStep) {
  RngStream rng(31, 0);
  for (const FloatFormat& f : {FloatFormat::e2m1(), FloatFormat::e4m3()}) {
    for (Rounding mode : {Rounding::kNearestEven, Rounding::kStochastic}) {
      const Tensor x = sample_gaussian({8, 256}, 3.0, rng);
      const QuantSpec s = spec(f, Granularity::tilewise(128), mode);
      const Tensor scales = compute_scales(x, s.granularity, f);
      const Tensor q = fake_quantize(x, s, RngStream(4, 4)).tensor;
      for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t c = 0; c < 256; ++c) {
          const double sc = scales(r, c / 128);
          const double step = grid_step(f, std::abs(x(r, c)) * sc) / sc;
          const double bound = mode == Rounding::kNearestEven ? 0.5 * step : step;
          EXPECT_LE(std::abs(q(r, c) - x(r, c)), bound * (1 + 1e-12));
        }
      }
    }
  }
}

TEST(QuantTest, NearestEvenIsMonotoneWithinGroup) {
  RngStream rng(41, 0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = sample_gaussian({1, 200}, 1.0, rng);
    std::sort(x.data().begin(), x.data().end());
    const Tensor q = fake_quantize(x, spec(FloatFormat::e2m1()), RngStream(0, 0)).tensor;
    for (std::size_t i = 1; i < q.size(); ++i) EXPECT_LE(q[i - 1], q[i]);
  }
}

TEST(QuantTest, TilewiseNeverWorseThanTensorwise) {
  RngStream rng(51, 0);
  double tile_sum = 0.0, whole_sum = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = sample_gaussian({8, 512}, 1.0, rng);
    // Uneven per-row magnitudes, as in real activations.
    for (std::size_t r = 0; r < 8; ++r)
      for (double& v : x.row(r)) v *= std::pow(10.0, 2.0 * rng.uniform() - 1.0);
    for (const FloatFormat& f : {FloatFormat::e2m1(), FloatFormat::e4m3()}) {
      const double tile = fake_quantize(x, spec(f, Granularity::tilewise(128)), RngStream()).abs_err_norm;
      const double whole = fake_quantize(x, spec(f, Granularity::tensorwise()), RngStream()).abs_err_norm;
      if (f.total_bits() == 4) {
        EXPECT_LE(tile, whole) << f.name() << " trial " << trial;
      } else {
        // With 3 mantissa bits the relative grid is nearly scale free, so the
        // two errors differ by grid alignment only; a few percent either way.
        EXPECT_LE(tile, 1.05 * whole) << f.name() << " trial " << trial;
        tile_sum += tile;
        whole_sum += whole;
      }
    }
  }
  EXPECT_LE(tile_sum, whole_sum);
}

TEST(QuantTest, StochasticResultIndependentOfGroupOrder) {
  RngStream rng(61, 0);
  const Tensor x = sample_gaussian({6, 300}, 1.0, rng);
  const QuantSpec s = spec(FloatFormat::e2m1(), Granularity::tilewise(128), Rounding::kStochastic);
  const Tensor a = fake_quantize(x, s, RngStream(9, 9)).tensor;
  // Quantizing a single row alone must reproduce that row: the row's tiles
  // keep their group indices only for row 0, so check row 0.
  Tensor row0({1, 300});
  for (std::size_t c = 0; c < 300; ++c) row0(0, c) = x(0, c);
  const Tensor b = fake_quantize(row0, s, RngStream(9, 9)).tensor;
  for (std::size_t c = 0; c < 300; ++c) EXPECT_EQ(a(0, c), b(0, c));
}

TEST(QuantTest, ErrorNormsAcrossSpecs) {
  RngStream rng(71, 0);
  const Tensor x = sample_gaussian({16, 256}, 1.0, rng);
  const std::vector<QuantSpec> specs{
      spec(FloatFormat(8, 23, FloatEncoding::kIeee), Granularity::tensorwise()),
      spec(FloatFormat::e2m1(), Granularity::tilewise(128)),
      spec(FloatFormat::e4m3(), Granularity::tilewise(128)),
  };
  const Tensor before = x;
  const auto errs = quant_error_norms(x, specs, RngStream(2, 2));
  EXPECT_EQ(x, before);
  ASSERT_EQ(errs.size(), 3u);
  EXPECT_LT(errs[0].first, 1e-6 * frobenius_norm(x));
  EXPECT_GT(errs[1].first, errs[2].first);
  EXPECT_NEAR(errs[1].second, errs[1].first / frobenius_norm(x), 1e-15);

  for (const auto& e : quant_error_norms(Tensor({4, 8}), specs, RngStream())) {
    EXPECT_EQ(e.first, 0.0);
    EXPECT_EQ(e.second, 0.0);
  }
}

TEST(QuantTest, SaturatesAtMaxValue) {
  const FloatFormat f = FloatFormat::e2m1();
  EXPECT_EQ(round_nearest_even(f, 100.0), 6.0);
  EXPECT_EQ(round_nearest_even(f, -7.0), -6.0);
  RngStream rng;
  EXPECT_EQ(round_stochastic(f, 6.0000001, rng), 6.0);
}

}  // namespace
}  // namespace snip
