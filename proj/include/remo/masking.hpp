#pragma once

// Hybrid masking: a public base M_pub fixed once per weight matrix, its
// restoration pool R_pub = M_pub * W, and per-step private mixing M_pvt.
// The effective mask M = M_pvt * M_pub only ever exists inside mask_embedding.

#include <compare>
#include <cstdint>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "remo/error.hpp"
#include "remo/prg.hpp"
#include "remo/ring.hpp"

namespace remo {

// Identifies one weight matrix. High bits carry the layer, low byte the slot
// within the layer.
struct OpId {
  std::uint32_t value = 0;

  static constexpr OpId make(std::uint32_t layer, std::uint32_t slot) { return OpId{(layer << 8) | (slot & 0xff)}; }
  constexpr std::uint32_t layer() const { return value >> 8; }
  constexpr std::uint32_t slot() const { return value & 0xff; }

  friend constexpr auto operator<=>(const OpId&, const OpId&) = default;
};

inline std::string to_string(OpId op) {
  return "L" + std::to_string(op.layer()) + "/" + std::to_string(op.slot());
}

inline std::size_t default_sketch_rows(std::size_t d) { return d / 2 > 0 ? d / 2 : 1; }

struct MaskBase {
  OpId op;
  std::size_t m = 0;
  std::size_t d = 0;
  RingMatrix public_base;                 // m x d
  std::optional<RingMatrix> pool;         // m x d_out, set by install_pool
  bool issued = false;

  bool installed() const { return pool.has_value(); }
};

namespace detail {

// Rank over GF(2) of the low bits. Full row rank here means some m x m minor
// is odd: a unit in Z_{2^k} and nonzero over the rationals.
inline std::size_t gf2_rank(const RingMatrix& a) {
  const std::size_t words = (a.cols() + 63) / 64;
  std::vector<std::vector<std::uint64_t>> rows(a.rows(), std::vector<std::uint64_t>(words, 0));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (a.at(i, j) & 1) rows[i][j / 64] |= std::uint64_t{1} << (j % 64);
  std::size_t rank = 0;
  for (std::size_t col = 0; col < a.cols() && rank < rows.size(); ++col) {
    const std::uint64_t bit = std::uint64_t{1} << (col % 64);
    std::size_t pivot = rank;
    while (pivot < rows.size() && !(rows[pivot][col / 64] & bit)) ++pivot;
    if (pivot == rows.size()) continue;
    std::swap(rows[pivot], rows[rank]);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i != rank && (rows[i][col / 64] & bit)) {
        for (std::size_t w = 0; w < words; ++w) rows[i][w] ^= rows[rank][w];
      }
    }
    ++rank;
  }
  return rank;
}

// Samples an m x d base without consulting any issuance record. Only the
// issuer below and rule-violating test harnesses call this directly.
inline RingMatrix sample_public_base(const PrgKey& prg, OpId op, std::size_t m, std::size_t d,
                                     const QuantParams& params, std::uint64_t session = 0) {
  for (std::uint32_t attempt = 0;; ++attempt) {
    StreamLabel label{StreamPurpose::kPublicBase, session, 0, op.layer(), op.value, attempt};
    RingMatrix base(m, d, params, prg.words(label, m * d));
    if (gf2_rank(base) == std::min(m, d)) return base;
  }
}

}  // namespace detail

// Issues public bases and remembers which weight matrices already have one.
class PublicBaseIssuer {
 public:
  PublicBaseIssuer(PrgKey prg, QuantParams params) : prg_(std::move(prg)), params_(params) {}

  MaskBase generate(OpId op, std::size_t m, std::size_t d) {
    if (m == 0 || m >= d) {
      fail(ErrorCode::kBadDims, "sketch rows m=" + std::to_string(m) + " must satisfy 0 < m < d=" +
                                    std::to_string(d));
    }
    std::lock_guard lock(mu_);
    if (issued_.count(op)) fail(ErrorCode::kSketchReissue, "public base already issued for " + to_string(op));
    MaskBase base{op, m, d, detail::sample_public_base(prg_, op, m, d, params_), std::nullopt, true};
    issued_.insert(op);
    return base;
  }

  bool issued(OpId op) const {
    std::lock_guard lock(mu_);
    return issued_.count(op) != 0;
  }

 private:
  PrgKey prg_;
  QuantParams params_;
  mutable std::mutex mu_;
  std::set<OpId> issued_;
};

inline MaskBase install_pool(MaskBase base, RingMatrix pool) {
  if (base.installed()) fail(ErrorCode::kSketchReissue, "pool already installed for " + to_string(base.op));
  if (pool.rows() != base.m || pool.params() != base.public_base.params()) {
    fail(ErrorCode::kShapeMismatch, "pool for " + to_string(base.op) + " has shape " + shape_str(pool) +
                                        ", expected " + std::to_string(base.m) + " rows");
  }
  base.pool = std::move(pool);
  return base;
}

inline StreamLabel step_mask_label(std::uint64_t session, std::uint64_t step, OpId op) {
  return StreamLabel{StreamPurpose::kStepMask, session, step, op.layer(), op.value, 0};
}

// Fresh n x m private mixing matrix for one (session, step, op).
inline RingMatrix derive_step_mask(const PrgKey& prg, std::uint64_t session, std::uint64_t step, OpId op,
                                   std::size_t n, std::size_t m, const QuantParams& params) {
  if (n == 0 || m == 0) fail(ErrorCode::kBadDims, "step mask needs n >= 1 and m >= 1");
  return RingMatrix(n, m, params, prg.words(step_mask_label(session, step, op), n * m));
}

// E + M_pvt * M_pub.
inline RingMatrix mask_embedding(const RingMatrix& input, const RingMatrix& private_mix,
                                 const RingMatrix& public_base) {
  if (private_mix.rows() != input.rows() || private_mix.cols() != public_base.rows() ||
      public_base.cols() != input.cols()) {
    fail(ErrorCode::kShapeMismatch, "mask_embedding: E " + shape_str(input) + ", M_pvt " +
                                        shape_str(private_mix) + ", M_pub " + shape_str(public_base));
  }
  return ring_add(input, ring_matmul(private_mix, public_base));
}

// O = O_hat - M_pvt * R_pub.
inline RingMatrix recover(const RingMatrix& masked_output, const RingMatrix& private_mix,
                          const RingMatrix& pool) {
  if (private_mix.rows() != masked_output.rows() || private_mix.cols() != pool.rows() ||
      pool.cols() != masked_output.cols()) {
    fail(ErrorCode::kShapeMismatch, "recover: O_hat " + shape_str(masked_output) + ", M_pvt " +
                                        shape_str(private_mix) + ", R_pub " + shape_str(pool));
  }
  return ring_sub(masked_output, ring_matmul(private_mix, pool));
}

}  // namespace remo
