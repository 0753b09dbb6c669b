#pragma once

// Fixed-point matrices over Z_{2^k}. Addition, subtraction and products wrap
// modulo 2^k, so additive masks distribute over matrix products exactly.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "remo/bytes.hpp"
#include "remo/error.hpp"

namespace remo {

struct QuantParams {
  std::uint32_t k = 64;  // ring bit-width
  std::uint32_t f = 16;  // fraction bits

  bool valid() const { return f >= 1 && f < k && k <= 64; }

  std::uint64_t mask() const { return k == 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << k) - 1); }

  // Magnitude bound of the representable reals, 2^(k-f-1).
  double range() const { return std::ldexp(1.0, static_cast<int>(k - f - 1)); }

  std::int64_t to_signed(std::uint64_t v) const {
    if (k == 64) return static_cast<std::int64_t>(v);
    const std::uint64_t sign = std::uint64_t{1} << (k - 1);
    if (v & sign) return static_cast<std::int64_t>(v | ~mask());
    return static_cast<std::int64_t>(v);
  }

  std::uint64_t from_signed(std::int64_t v) const { return static_cast<std::uint64_t>(v) & mask(); }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline void check_params(const QuantParams& p) {
  if (!p.valid()) {
    fail(ErrorCode::kBadConfig, "quant params require 1 <= f < k <= 64, got k=" +
                                    std::to_string(p.k) + " f=" + std::to_string(p.f));
  }
}

// Plain row-major real matrix used at the dequantized boundary.
struct RealMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  RealMatrix() = default;
  RealMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  RealMatrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) fail(ErrorCode::kShapeMismatch, "real matrix data length");
  }

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

class RingMatrix {
 public:
  RingMatrix() = default;

  RingMatrix(std::size_t rows, std::size_t cols, QuantParams params)
      : rows_(rows), cols_(cols), params_(params), data_(rows * cols, 0) {
    check_shape();
  }

  RingMatrix(std::size_t rows, std::size_t cols, QuantParams params, std::vector<std::uint64_t> data)
      : rows_(rows), cols_(cols), params_(params), data_(std::move(data)) {
    check_shape();
    if (data_.size() != rows_ * cols_) {
      fail(ErrorCode::kShapeMismatch, "data length " + std::to_string(data_.size()) +
                                          " != " + std::to_string(rows_ * cols_));
    }
    const std::uint64_t m = params_.mask();
    for (auto& v : data_) v &= m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const QuantParams& params() const { return params_; }
  std::span<const std::uint64_t> data() const { return data_; }
  std::span<std::uint64_t> mutable_data() { return data_; }

  std::uint64_t at(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  void set(std::size_t i, std::size_t j, std::uint64_t v) { data_[i * cols_ + j] = v & params_.mask(); }
  std::span<const std::uint64_t> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  // Rows [begin, begin + count) as a new matrix.
  RingMatrix slice_rows(std::size_t begin, std::size_t count) const {
    if (begin + count > rows_ || count == 0) fail(ErrorCode::kShapeMismatch, "row slice out of range");
    return RingMatrix(count, cols_, params_,
                      std::vector<std::uint64_t>(data_.begin() + begin * cols_,
                                                 data_.begin() + (begin + count) * cols_));
  }

  bool is_zero() const {
    for (auto v : data_)
      if (v != 0) return false;
    return true;
  }

  friend bool operator==(const RingMatrix&, const RingMatrix&) = default;

 private:
  void check_shape() const {
    check_params(params_);
    if (rows_ == 0 || cols_ == 0) fail(ErrorCode::kShapeMismatch, "matrix dimensions must be positive");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  QuantParams params_{};
  std::vector<std::uint64_t> data_;
};

inline std::string shape_str(const RingMatrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

namespace detail {

inline void require_same_params(const RingMatrix& a, const RingMatrix& b, const char* op) {
  if (a.params() != b.params()) fail(ErrorCode::kShapeMismatch, std::string(op) + ": quant params differ");
}

inline void require_same_shape(const RingMatrix& a, const RingMatrix& b, const char* op) {
  require_same_params(a, b, op);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorCode::kShapeMismatch, std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
  }
}

// round(value / 2^shift) with ties to even, on a signed integer.
inline std::int64_t shift_round_even(std::int64_t value, std::uint32_t shift) {
  if (shift == 0) return value;
  const std::int64_t q = value >> shift;  // floor
  const std::uint64_t r = static_cast<std::uint64_t>(value) & ((std::uint64_t{1} << shift) - 1);
  const std::uint64_t half = std::uint64_t{1} << (shift - 1);
  if (r > half || (r == half && (q & 1))) return q + 1;
  return q;
}

}  // namespace detail

inline RingMatrix quantize(const RealMatrix& x, const QuantParams& params) {
  check_params(params);
  const double scale = std::ldexp(1.0, static_cast<int>(params.f));
  const double top = std::ldexp(1.0, static_cast<int>(params.k - 1));
  std::vector<std::uint64_t> out(x.data.size());
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    // nearbyint honours the default round-to-nearest-even mode.
    const double r = std::nearbyint(x.data[i] * scale);
    if (!(r >= -top && r < top)) {
      fail(ErrorCode::kRangeOverflow, "value " + std::to_string(x.data[i]) + " outside the 2^" +
                                          std::to_string(params.k - params.f - 1) + " fixed-point range");
    }
    out[i] = params.from_signed(static_cast<std::int64_t>(r));
  }
  return RingMatrix(x.rows, x.cols, params, std::move(out));
}

inline RealMatrix dequantize(const RingMatrix& a) {
  RealMatrix out(a.rows(), a.cols());
  const int f = static_cast<int>(a.params().f);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = std::ldexp(static_cast<double>(a.params().to_signed(a.data()[i])), -f);
  }
  return out;
}

inline RingMatrix ring_add(const RingMatrix& a, const RingMatrix& b) {
  detail::require_same_shape(a, b, "ring_add");
  RingMatrix out = a;
  auto o = out.mutable_data();
  auto bd = b.data();
  const std::uint64_t m = a.params().mask();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (o[i] + bd[i]) & m;
  return out;
}

inline RingMatrix ring_sub(const RingMatrix& a, const RingMatrix& b) {
  detail::require_same_shape(a, b, "ring_sub");
  RingMatrix out = a;
  auto o = out.mutable_data();
  auto bd = b.data();
  const std::uint64_t m = a.params().mask();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (o[i] - bd[i]) & m;
  return out;
}

// Exact product mod 2^k. Unsigned 64-bit wraparound is congruent mod 2^k for
// every k <= 64, so reducing once at the end is enough.
inline RingMatrix ring_matmul(const RingMatrix& a, const RingMatrix& b) {
  detail::require_same_params(a, b, "ring_matmul");
  if (a.cols() != b.rows()) {
    fail(ErrorCode::kShapeMismatch, "ring_matmul: " + shape_str(a) + " * " + shape_str(b));
  }
  const std::size_t n = a.rows(), inner = a.cols(), cols = b.cols();
  std::vector<std::uint64_t> out(n * cols, 0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t* orow = out.data() + i * cols;
    for (std::size_t l = 0; l < inner; ++l) {
      const std::uint64_t av = ad[i * inner + l];
      const std::uint64_t* brow = bd.data() + l * cols;
      for (std::size_t j = 0; j < cols; ++j) orow[j] += av * brow[j];
    }
  }
  return RingMatrix(n, cols, a.params(), std::move(out));
}

// Drops a product from scale 2^(2f) back to 2^f.
inline RingMatrix rescale(const RingMatrix& a) {
  RingMatrix out = a;
  const auto& p = a.params();
  for (auto& v : out.mutable_data()) v = p.from_signed(detail::shift_round_even(p.to_signed(v), p.f));
  return out;
}

// ---------------------------------------------------------------------------
// Binary encoding: "RMX1", rows u32, cols u32, k u8, f u8, elements u64 LE.

inline constexpr std::string_view kMatrixMagic = "RMX1";

inline void encode_matrix(ByteWriter& w, const RingMatrix& m) {
  w.raw(kMatrixMagic);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  w.u8(static_cast<std::uint8_t>(m.params().k));
  w.u8(static_cast<std::uint8_t>(m.params().f));
  for (auto v : m.data()) w.u64(v);
}

inline Bytes encode_matrix(const RingMatrix& m) {
  ByteWriter w;
  encode_matrix(w, m);
  return w.take();
}

inline RingMatrix decode_matrix(ByteReader& r) {
  if (r.str(4) != kMatrixMagic) fail(ErrorCode::kDecodeError, "bad matrix magic");
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  QuantParams p{r.u8(), 0};
  p.f = r.u8();
  if (!p.valid()) fail(ErrorCode::kDecodeError, "bad quant params in matrix header");
  if (rows == 0 || cols == 0) fail(ErrorCode::kDecodeError, "empty matrix");
  const std::uint64_t count = std::uint64_t{rows} * cols;
  if (count > r.remaining() / 8) fail(ErrorCode::kLengthMismatch, "matrix payload truncated");
  std::vector<std::uint64_t> data(count);
  for (auto& v : data) {
    v = r.u64();
    if (v & ~p.mask()) fail(ErrorCode::kDecodeError, "ring element out of range");
  }
  return RingMatrix(rows, cols, p, std::move(data));
}

inline RingMatrix decode_matrix(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  RingMatrix m = decode_matrix(r);
  if (!r.done()) fail(ErrorCode::kLengthMismatch, "trailing bytes after matrix");
  return m;
}

}  // namespace remo
