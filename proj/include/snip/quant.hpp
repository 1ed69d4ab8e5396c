// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "snip/error.hpp"
#include "snip/tensor.hpp"

namespace snip {

/// How the top exponent field is spent.
enum class FloatEncoding {
  /// Every code is finite (MX FP4/FP6 style).
  kFiniteOnly,
  /// Only the all-ones exponent+mantissa code is NaN (OCP E4M3 style).
  kNanOnly,
  /// Top exponent reserved for Inf/NaN (IEEE 754 style).
  kIeee,
};

/// A small binary floating-point format: sign, `exp_bits` exponent bits with
/// bias 2^(exp_bits-1)-1, and `mantissa_bits` stored fraction bits.
class FloatFormat {
 public:
  static constexpr int kMaxTotalBits = 32;
  /// Wider exponents overflow the double range used for emulation.
  static constexpr int kMaxExpBits = 10;
  /// Widest format representable_values() will enumerate.
  static constexpr int kMaxEnumerableBits = 16;

  FloatFormat(int exp_bits, int mantissa_bits, FloatEncoding encoding, std::string name = {})
      : exp_bits_(exp_bits), mantissa_bits_(mantissa_bits), encoding_(encoding), name_(std::move(name)) {
    if (exp_bits < 1 || exp_bits > kMaxExpBits || mantissa_bits < 0 || 1 + exp_bits + mantissa_bits > kMaxTotalBits) {
      throw InvalidArgument("unsupported float format E" + std::to_string(exp_bits) + "M" +
                            std::to_string(mantissa_bits));
    }
    if (encoding == FloatEncoding::kIeee && exp_bits < 2) {
      throw InvalidArgument("IEEE-style encoding needs at least two exponent bits");
    }
    if (encoding == FloatEncoding::kNanOnly && exp_bits + mantissa_bits < 2) {
      throw InvalidArgument("NaN-only encoding leaves no finite codes");
    }
    if (name_.empty()) name_ = "E" + std::to_string(exp_bits) + "M" + std::to_string(mantissa_bits);
  }

  static FloatFormat e2m1() { return {2, 1, FloatEncoding::kFiniteOnly, "E2M1"}; }
  static FloatFormat e4m3() { return {4, 3, FloatEncoding::kNanOnly, "E4M3"}; }
  static FloatFormat e5m2() { return {5, 2, FloatEncoding::kIeee, "E5M2"}; }
  static FloatFormat e3m4() { return {3, 4, FloatEncoding::kIeee, "E3M4"}; }

  /// Parses "E<e>M<m>". Encoding follows the usual convention for the name:
  /// formats of four bits or fewer are finite-only (MX), E4M3 is OCP, the rest IEEE.
  static FloatFormat from_name(const std::string& name) {
    int e = -1, m = -1;
    char tail = 0;
    if (std::sscanf(name.c_str(), "E%dM%d%c", &e, &m, &tail) != 2) {
      throw InvalidArgument("unrecognised float format name '" + name + "'");
    }
    FloatEncoding enc = FloatEncoding::kIeee;
    if (1 + e + m <= 4) {
      enc = FloatEncoding::kFiniteOnly;
    } else if (e == 4 && m == 3) {
      enc = FloatEncoding::kNanOnly;
    }
    return {e, m, enc, name};
  }

  int exp_bits() const noexcept { return exp_bits_; }
  int mantissa_bits() const noexcept { return mantissa_bits_; }
  FloatEncoding encoding() const noexcept { return encoding_; }
  const std::string& name() const noexcept { return name_; }
  int total_bits() const noexcept { return 1 + exp_bits_ + mantissa_bits_; }

  int bias() const noexcept { return (1 << (exp_bits_ - 1)) - 1; }
  int min_normal_exponent() const noexcept { return 1 - bias(); }

  /// Largest finite magnitude.
  double max_value() const noexcept {
    const int top_field = (1 << exp_bits_) - 1;
    const double ulp = std::ldexp(1.0, -mantissa_bits_);
    switch (encoding_) {
      case FloatEncoding::kFiniteOnly:
        return std::ldexp(2.0 - ulp, top_field - bias());
      case FloatEncoding::kNanOnly:
        if (mantissa_bits_ == 0) return std::ldexp(1.0, top_field - 1 - bias());
        return std::ldexp(2.0 - 2.0 * ulp, top_field - bias());
      case FloatEncoding::kIeee:
        break;
    }
    return std::ldexp(2.0 - ulp, top_field - 1 - bias());
  }

  /// Smallest positive (subnormal) magnitude.
  double min_subnormal() const noexcept { return std::ldexp(1.0, min_normal_exponent() - mantissa_bits_); }

  friend bool operator==(const FloatFormat& a, const FloatFormat& b) {
    return a.exp_bits_ == b.exp_bits_ && a.mantissa_bits_ == b.mantissa_bits_ && a.encoding_ == b.encoding_;
  }

 private:
  int exp_bits_;
  int mantissa_bits_;
  FloatEncoding encoding_;
  std::string name_;
};

/// Every finite value the format encodes, ascending, with -0 ordered before +0.
inline std::vector<double> representable_values(const FloatFormat& f) {
  if (f.total_bits() > FloatFormat::kMaxEnumerableBits) {
    throw SizeError("representable_values: " + f.name() + " is too wide to enumerate");
  }
  const int ef = f.exp_bits(), mf = f.mantissa_bits();
  const int top_field = (1 << ef) - 1;
  const int mant_codes = 1 << mf;
  std::vector<double> out;
  for (int sign = 0; sign < 2; ++sign) {
    for (int e = 0; e <= top_field; ++e) {
      for (int m = 0; m < mant_codes; ++m) {
        if (f.encoding() == FloatEncoding::kIeee && e == top_field) continue;
        if (f.encoding() == FloatEncoding::kNanOnly && e == top_field && m == mant_codes - 1) continue;
        const double frac = static_cast<double>(m) / mant_codes;
        const double mag = e == 0 ? std::ldexp(frac, f.min_normal_exponent())
                                  : std::ldexp(1.0 + frac, e - f.bias());
        out.push_back(sign ? -mag : mag);
      }
    }
  }
  std::sort(out.begin(), out.end(), [](double a, double b) {
    if (a != b) return a < b;
    return std::signbit(a) && !std::signbit(b);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Scaling granularity

enum class GranularityKind { kTensorwise, kRowwise, kColumnwise, kBlockwise, kTilewise };

/// Which entries share a scale. Tensors are viewed as rows x cols (last dim
/// is cols). Tilewise(nb) groups 1 x nb row segments, Blockwise(nb) groups
/// nb x nb sub-blocks; ragged edges form smaller final groups.
struct Granularity {
  GranularityKind kind = GranularityKind::kTensorwise;
  std::size_t nb = 128;

  static Granularity tensorwise() { return {GranularityKind::kTensorwise, 128}; }
  static Granularity rowwise() { return {GranularityKind::kRowwise, 128}; }
  static Granularity columnwise() { return {GranularityKind::kColumnwise, 128}; }
  static Granularity blockwise(std::size_t nb = 128) { return {GranularityKind::kBlockwise, nb}; }
  static Granularity tilewise(std::size_t nb = 128) { return {GranularityKind::kTilewise, nb}; }

  friend bool operator==(const Granularity&, const Granularity&) = default;
};

namespace detail {

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Maps (row, col) to a flat group index and knows the scale-tensor shape.
class GroupLayout {
 public:
  GroupLayout(std::size_t rows, std::size_t cols, const Granularity& g) : rows_(rows), cols_(cols), g_(g) {
    if (g.nb == 0) throw InvalidArgument("granularity block edge must be >= 1");
    switch (g.kind) {
      case GranularityKind::kTensorwise: grid_ = {1, 1}; break;
      case GranularityKind::kRowwise: grid_ = {rows, 1}; break;
      case GranularityKind::kColumnwise: grid_ = {1, cols}; break;
      case GranularityKind::kTilewise: grid_ = {rows, ceil_div(cols, g.nb)}; break;
      case GranularityKind::kBlockwise: grid_ = {ceil_div(rows, g.nb), ceil_div(cols, g.nb)}; break;
    }
  }

  std::size_t count() const { return grid_.first * grid_.second; }

  Shape scale_shape() const {
    switch (g_.kind) {
      case GranularityKind::kTensorwise: return {1};
      case GranularityKind::kRowwise: return {rows_};
      case GranularityKind::kColumnwise: return {cols_};
      default: return {grid_.first, grid_.second};
    }
  }

  std::size_t index(std::size_t r, std::size_t c) const {
    switch (g_.kind) {
      case GranularityKind::kTensorwise: return 0;
      case GranularityKind::kRowwise: return r;
      case GranularityKind::kColumnwise: return c;
      case GranularityKind::kTilewise: return r * grid_.second + c / g_.nb;
      case GranularityKind::kBlockwise: return (r / g_.nb) * grid_.second + c / g_.nb;
    }
    return 0;
  }

 private:
  std::size_t rows_, cols_;
  Granularity g_;
  std::pair<std::size_t, std::size_t> grid_{1, 1};
};

}  // namespace detail

/// One scale per group: max_value / amax(group); an all-zero group gets 1.
inline Tensor compute_scales(const Tensor& x, const Granularity& g, const FloatFormat& f) {
  if (x.empty()) throw InvalidArgument("compute_scales: empty tensor");
  if (!x.all_finite()) throw InvalidArgument("compute_scales: non-finite input");
  const std::size_t rows = x.rows(), cols = x.cols();
  const detail::GroupLayout layout(rows, cols, g);
  std::vector<double> amax(layout.count(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double& a = amax[layout.index(r, c)];
      a = std::max(a, std::abs(x(r, c)));
    }
  }
  const double fmax = f.max_value();
  for (double& a : amax) a = a > 0.0 ? fmax / a : 1.0;
  return Tensor(layout.scale_shape(), std::move(amax));
}

// ---------------------------------------------------------------------------
// Rounding

enum class Rounding { kNearestEven, kStochastic };

namespace detail {

/// Format constants hoisted out of the per-element rounding loops.
struct Grid {
  explicit Grid(const FloatFormat& f)
      : fmax(f.max_value()), emin(f.min_normal_exponent()), mbits(f.mantissa_bits()) {}

  /// 2^(max(floor(log2 a), emin) - mbits); exact for every a >= 0.
  double step(double a) const {
    const auto bits = std::bit_cast<std::uint64_t>(a);
    const int ex = static_cast<int>((bits >> 52) & 0x7ff) - 1023;  // subnormal doubles land far below emin
    const int e = std::max(ex, emin) - mbits;
    return std::bit_cast<double>(static_cast<std::uint64_t>(e + 1023) << 52);
  }

  double nearest_even(double v) const {
    const double a = std::min(std::abs(v), fmax);
    const double st = step(a);
    // a / st < 2^(mbits + 1), far below 2^52, so adding and removing 2^52
    // rounds to the nearest integer with ties to even.
    const double k = (a / st + 0x1.0p52) - 0x1.0p52;
    return std::copysign(std::min(k * st, fmax), v);
  }

  double stochastic(double v, RngStream& rng) const {
    const double a = std::min(std::abs(v), fmax);
    const double st = step(a);
    const double k = a / st;
    const double lo = std::floor(k);
    double q = lo * st;
    const double frac = k - lo;
    if (frac > 0.0 && rng.uniform() < frac) q += st;
    return std::copysign(std::min(q, fmax), v);
  }

  double fmax;
  int emin;
  int mbits;
};

}  // namespace detail

/// Grid spacing of `f` in the binade containing magnitude `a` (a >= 0).
inline double grid_step(const FloatFormat& f, double a) { return detail::Grid(f).step(a); }

/// Round-to-nearest, ties to even mantissa, saturating at max_value.
inline double round_nearest_even(const FloatFormat& f, double v) { return detail::Grid(f).nearest_even(v); }

/// Rounds |v| up to the next grid point with probability equal to its
/// fractional distance from the lower neighbour; unbiased inside the range.
inline double round_stochastic(const FloatFormat& f, double v, RngStream& rng) {
  return detail::Grid(f).stochastic(v, rng);
}

struct QuantSpec {
  FloatFormat format = FloatFormat::e4m3();
  Granularity granularity = Granularity::tensorwise();
  Rounding rounding = Rounding::kNearestEven;

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

struct QuantResult {
  Tensor tensor;          // dequantized values
  double abs_err_norm;    // ||q(x) - x||_F
  double rel_err;         // abs_err_norm / max(||x||_F, tiny)
};

inline constexpr double kTinyNorm = 1e-30;

/// Quantize-dequantize: per group multiply by the scale, round onto the
/// format's grid, divide by the scale. Stochastic rounding draws from one
/// sub-stream of `rng` per group, so the result does not depend on the order
/// groups are visited.
inline QuantResult fake_quantize(const Tensor& x, const QuantSpec& spec, const RngStream& rng) {
  const Tensor scales = compute_scales(x, spec.granularity, spec.format);
  const std::size_t rows = x.rows(), cols = x.cols();
  const detail::GroupLayout layout(rows, cols, spec.granularity);
  const bool stochastic = spec.rounding == Rounding::kStochastic;
  std::vector<RngStream> streams;
  if (stochastic) {
    streams.reserve(layout.count());
    for (std::size_t g = 0; g < layout.count(); ++g) streams.push_back(rng.derive(g));
  }
  const detail::Grid grid(spec.format);
  Tensor out(x.shape());
  double err_sq = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t g = layout.index(r, c);
      const double s = scales[g];
      const double v = x(r, c);
      const double q = stochastic ? grid.stochastic(v * s, streams[g]) : grid.nearest_even(v * s);
      const double y = q / s;
      out(r, c) = y;
      err_sq += (y - v) * (y - v);
    }
  }
  const double abs_err = std::sqrt(err_sq);
  const double xn = frobenius_norm(x);
  return {std::move(out), abs_err, abs_err / std::max(xn, kTinyNorm)};
}

/// Error norms of x under each spec; x is untouched. Spec k uses rng.derive(k).
inline std::vector<std::pair<double, double>> quant_error_norms(const Tensor& x, const std::vector<QuantSpec>& specs,
                                                                const RngStream& rng) {
  std::vector<std::pair<double, double>> out;
  out.reserve(specs.size());
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const QuantResult r = fake_quantize(x, specs[k], rng.derive(k));
    out.emplace_back(r.abs_err_norm, r.rel_err);
  }
  return out;
}

}  // namespace snip
