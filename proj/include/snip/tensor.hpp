// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "snip/error.hpp"

namespace snip {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
///
/// Two-dimensional views treat the last dimension as columns and fold all
/// leading dimensions into rows, which is how activations (tokens x features)
/// and weights (out x in) are laid out throughout the library.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  /// Row-major literal: Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Arithmetic

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline double frobenius_norm(const Tensor& t) {
  if (t.empty()) throw InvalidArgument("frobenius_norm of an empty tensor");
  // Scaled accumulation keeps tiny and huge entries from under/overflowing.
  double scale = 0.0;
  for (double v : t.data()) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return 0.0;
  double sum = 0.0;
  for (double v : t.data()) {
    const double s = v / scale;
    sum += s * s;
  }
  return scale * std::sqrt(sum);
}

inline double sum_squares(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

inline void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline double diff_norm(const Tensor& a, const Tensor& b) { return frobenius_norm(sub(a, b)); }

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  return out;
}

/// C = A (MxK) * B (KxN).
///
/// Summation order: for each output row i, k runs 0..K-1 in ascending order and
/// each product a(i,k)*b(k,j) is accumulated into c(i,j) left to right. The
/// result is therefore bit-reproducible and identical to the textbook triple
/// loop with k innermost.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul expects 2-D operands");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      const double* bp = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

/// C = A (MxK) * B^T where B is NxK. Same per-element summation order as matmul.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul_nt expects 2-D operands");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  // Row-by-row axpy over a transposed copy of B vectorizes; each element
  // still accumulates over k in ascending order.
  return matmul(a, transpose(b));
}

/// C = A^T * B where A is KxM and B is KxN. Accumulates over k ascending.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul_tn expects 2-D operands");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul_tn inner dimensions differ: " + shape_str(a.shape()) + "^T x " +
                     shape_str(b.shape()));
  }
  Tensor c({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a.data().data() + p * m;
    const double* bp = b.data().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = ap[i];
      double* ci = c.data().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Random numbers

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b) noexcept {
  std::uint64_t s = a ^ (b * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
  return splitmix64(s);
}

}  // namespace detail

/// Deterministic, splittable random stream.
///
/// The generator is xoshiro256** seeded from (seed, stream_id) through
/// splitmix64; Gaussian draws use Box-Muller. No standard-library
/// distribution is involved, so sequences are identical across platforms.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {
    std::uint64_t s = detail::mix64(seed, stream_id);
    for (auto& w : state_) w = detail::splitmix64(s);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t draws() const noexcept { return draws_; }

  /// Independent child stream labelled by `label`; does not advance this one.
  RngStream derive(std::uint64_t label) const { return {seed_, detail::mix64(stream_id_, label + 1)}; }

  std::uint64_t next_u64() noexcept {
    ++draws_;
    const std::uint64_t result = std::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = std::rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next_u64() % n; }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::array<std::uint64_t, 4> state_{};
  std::uint64_t draws_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// i.i.d. N(0, sigma^2) entries.
inline Tensor sample_gaussian(const Shape& shape, double sigma, RngStream& rng) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw InvalidArgument("sample_gaussian: sigma must be positive and finite");
  }
  Tensor t(shape);
  for (double& v : t.data()) v = sigma * rng.normal();
  return t;
}

// ---------------------------------------------------------------------------
// Binary container: "SNIPT" | u32 version | u32 ndim | u64 dims[] | f64 payload[]
// All integers and floats little-endian.

inline constexpr std::array<char, 5> kTensorMagic{'S', 'N', 'I', 'P', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::istream& is) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("tensor container truncated");
    v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), kTensorMagic.size());
  detail::put_le<std::uint32_t>(os, kTensorVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
  for (auto d : t.shape()) detail::put_le<std::uint64_t>(os, d);
  for (double v : t.data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 5> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kTensorMagic) throw FormatError("not a SNIPT tensor container");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kTensorVersion) throw FormatError("unsupported SNIPT version " + std::to_string(version));
  const auto ndim = detail::get_le<std::uint32_t>(is);
  if (ndim == 0 || ndim > 16) throw FormatError("bad SNIPT rank");
  Shape shape(ndim);
  for (auto& d : shape) d = detail::get_le<std::uint64_t>(is);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_tensor(is);
}

}  // namespace snip
