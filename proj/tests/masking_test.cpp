#include "remo/masking.hpp"

#include <gmpxx.h>
#include <gtest/gtest.h>

#include <set>

#include "remo/audit.hpp"
#include "remo/random.hpp"

namespace remo {
namespace {

const QuantParams kDefault{64, 16};

RingMatrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, const QuantParams& p = kDefault) {
  std::vector<std::uint64_t> v(rows * cols);
  for (auto& x : v) x = rng();
  return RingMatrix(rows, cols, p, std::move(v));
}

// Plain Gaussian elimination over Q on the dequantized values.
std::size_t rational_rank(const RingMatrix& a) {
  std::vector<std::vector<mpq_class>> m(a.rows(), std::vector<mpq_class>(a.cols()));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      mpq_class v(mpz_class(std::to_string(a.params().to_signed(a.at(i, j)))),
                  mpz_class(1) << a.params().f);
      v.canonicalize();
      m[i][j] = v;
    }
  std::size_t rank = 0;
  for (std::size_t c = 0; c < a.cols() && rank < a.rows(); ++c) {
    std::size_t p = rank;
    while (p < a.rows() && m[p][c] == 0) ++p;
    if (p == a.rows()) continue;
    std::swap(m[p], m[rank]);
    for (std::size_t i = rank + 1; i < a.rows(); ++i) {
      const mpq_class factor = m[i][c] / m[rank][c];
      for (std::size_t j = c; j < a.cols(); ++j) m[i][j] -= factor * m[rank][j];
    }
    ++rank;
  }
  return rank;
}

TEST(PublicBaseTest, DeterministicFullRank) {
  const PrgKey key = PrgKey::from_u64(42);
  const OpId q0 = OpId::make(0, 0);
  PublicBaseIssuer a(key, kDefault), b(key, kDefault);
  MaskBase x = a.generate(q0, 2, 4);
  MaskBase y = b.generate(q0, 2, 4);
  EXPECT_EQ(x.public_base, y.public_base);
  EXPECT_EQ(x.public_base.rows(), 2u);
  EXPECT_EQ(x.public_base.cols(), 4u);
  EXPECT_EQ(rational_rank(x.public_base), 2u);
  EXPECT_TRUE(x.issued);
  EXPECT_FALSE(x.installed());
}

TEST(PublicBaseTest, RankOverManyOps) {
  PublicBaseIssuer issuer(PrgKey::from_u64(3), kDefault);
  for (std::uint32_t l = 0; l < 50; ++l) {
    MaskBase b = issuer.generate(OpId::make(l, 0), 16, 32);
    ASSERT_EQ(rational_rank(b.public_base), 16u);
    ASSERT_EQ(detail::gf2_rank(b.public_base), 16u);
  }
}

TEST(PublicBaseTest, SingleIssue) {
  PublicBaseIssuer issuer(PrgKey::from_u64(1), kDefault);
  const OpId q0 = OpId::make(0, 0);
  issuer.generate(q0, 2, 4);
  EXPECT_TRUE(issuer.issued(q0));
  try {
    issuer.generate(q0, 2, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSketchReissue);
  }
  // A different shape does not get around it either.
  EXPECT_THROW(issuer.generate(q0, 1, 4), Error);
  EXPECT_NO_THROW(issuer.generate(OpId::make(0, 1), 2, 4));
}

TEST(PublicBaseTest, BadDims) {
  PublicBaseIssuer issuer(PrgKey::from_u64(1), kDefault);
  for (std::size_t m : {4u, 5u, 0u}) {
    try {
      issuer.generate(OpId::make(0, 0), m, 4);
      FAIL() << m;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kBadDims);
    }
  }
  EXPECT_FALSE(issuer.issued(OpId::make(0, 0)));
}

TEST(PublicBaseTest, DefaultSketchRows) {
  EXPECT_EQ(default_sketch_rows(32), 16u);
  EXPECT_EQ(default_sketch_rows(7), 3u);
  EXPECT_EQ(default_sketch_rows(2), 1u);
}

TEST(Gf2RankTest, HandCases) {
  const QuantParams p{8, 1};
  EXPECT_EQ(detail::gf2_rank(RingMatrix(2, 3, p, {1, 0, 0, 0, 1, 0})), 2u);
  EXPECT_EQ(detail::gf2_rank(RingMatrix(2, 3, p, {1, 1, 0, 3, 1, 0})), 1u);
  EXPECT_EQ(detail::gf2_rank(RingMatrix(2, 3, p, {2, 4, 6, 8, 10, 12})), 0u);
}

TEST(InstallPoolTest, ShapeContract) {
  PublicBaseIssuer issuer(PrgKey::from_u64(5), kDefault);
  MaskBase b = issuer.generate(OpId::make(0, 0), 2, 4);
  MaskBase ok = install_pool(b, RingMatrix(2, 4, kDefault));
  EXPECT_TRUE(ok.installed());
  try {
    install_pool(b, RingMatrix(3, 4, kDefault));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
  EXPECT_THROW(install_pool(ok, RingMatrix(2, 4, kDefault)), Error);
}

TEST(InstallPoolTest, PoolMatchesLocalProduct) {
  Rng rng(11);
  PublicBaseIssuer issuer(PrgKey::from_u64(5), kDefault);
  MaskBase b = issuer.generate(OpId::make(1, 2), 3, 6);
  RingMatrix w = random_matrix(rng, 6, 5);
  MaskBase done = install_pool(b, ring_matmul(b.public_base, w));
  // Independent recomputation of M_pub * W, one element at a time.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      std::uint64_t acc = 0;
      for (std::size_t l = 0; l < 6; ++l) acc += b.public_base.at(i, l) * w.at(l, j);
      ASSERT_EQ(done.pool->at(i, j), acc);
    }
}

TEST(StepMaskTest, Deterministic) {
  const PrgKey key = PrgKey::from_u64(9);
  const OpId op = OpId::make(0, 3);
  EXPECT_EQ(derive_step_mask(key, 1, 7, op, 3, 4, kDefault), derive_step_mask(key, 1, 7, op, 3, 4, kDefault));
  EXPECT_NE(derive_step_mask(key, 1, 7, op, 3, 4, kDefault),
            derive_step_mask(PrgKey::from_u64(10), 1, 7, op, 3, 4, kDefault));
  EXPECT_THROW(derive_step_mask(key, 1, 7, op, 0, 4, kDefault), Error);
}

TEST(StepMaskTest, FreshAcrossSteps) {
  const PrgKey key = PrgKey::from_u64(9);
  const OpId op = OpId::make(0, 0);
  std::set<std::uint64_t> seen;
  std::size_t collisions = 0;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const RingMatrix a = derive_step_mask(key, 0, s, op, 1, 1, kDefault);
    if (!seen.insert(a.at(0, 0)).second) ++collisions;
    if (s < 1000) {
      ASSERT_NE(a, derive_step_mask(key, 0, s + 1, op, 1, 1, kDefault));
    }
  }
  EXPECT_EQ(collisions, 0u);
}

TEST(StepMaskTest, DistinctLabelsPerOpAndSession) {
  std::set<std::vector<std::uint32_t>> labels;
  for (std::uint32_t l = 0; l < 3; ++l)
    for (std::uint32_t s = 0; s < 7; ++s) {
      const StreamLabel lab = step_mask_label(4, 2, OpId::make(l, s));
      ASSERT_TRUE(labels.insert({lab.layer, lab.op}).second);
    }
  EXPECT_FALSE(step_mask_label(1, 2, OpId::make(0, 0)) == step_mask_label(2, 2, OpId::make(0, 0)));
  EXPECT_FALSE(step_mask_label(1, 2, OpId::make(0, 0)) == step_mask_label(1, 3, OpId::make(0, 0)));

  const PrgKey key = PrgKey::from_u64(1);
  EXPECT_NE(derive_step_mask(key, 0, 0, OpId::make(0, 0), 2, 2, kDefault),
            derive_step_mask(key, 0, 0, OpId::make(0, 1), 2, 2, kDefault));
  EXPECT_NE(derive_step_mask(key, 0, 0, OpId::make(0, 0), 2, 2, kDefault),
            derive_step_mask(key, 1, 0, OpId::make(0, 0), 2, 2, kDefault));
}

TEST(StepMaskTest, LowByteUniformity) {
  const PrgKey key = PrgKey::from_u64(2024);
  std::vector<std::uint64_t> samples;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    RingMatrix m = derive_step_mask(key, 0, s, OpId::make(0, 0), 10, 10, kDefault);
    samples.insert(samples.end(), m.data().begin(), m.data().end());
  }
  ASSERT_EQ(samples.size(), 100000u);
  EXPECT_GE(low_byte_uniformity(samples).p_value, 0.01);
}

TEST(MaskEmbeddingTest, ZeroMixLeavesInput) {
  Rng rng(12);
  RingMatrix e = random_matrix(rng, 3, 6), pub = random_matrix(rng, 2, 6);
  EXPECT_EQ(mask_embedding(e, RingMatrix(3, 2, kDefault), pub), e);
}

TEST(MaskEmbeddingTest, HandExample) {
  // Raw ring integers; the fraction-bit setting does not enter a ring product.
  const QuantParams p{16, 1};
  RingMatrix e(1, 2, p, {1, 2}), mix(1, 1, p, {5}), pub(1, 2, p, {1, 1});
  EXPECT_EQ(mask_embedding(e, mix, pub), RingMatrix(1, 2, p, {6, 7}));
}

TEST(MaskEmbeddingTest, ShapeMismatch) {
  try {
    mask_embedding(RingMatrix(2, 4, kDefault), RingMatrix(2, 2, kDefault), RingMatrix(2, 5, kDefault));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
  EXPECT_THROW(mask_embedding(RingMatrix(2, 4, kDefault), RingMatrix(3, 2, kDefault), RingMatrix(2, 4, kDefault)),
               Error);
}

TEST(RecoverTest, HandExample) {
  const QuantParams p{16, 1};
  RingMatrix e(1, 2, p, {1, 2}), w(2, 1, p, {3, 4}), mix(1, 1, p, {5}), pub(1, 2, p, {1, 1});
  const RingMatrix masked = mask_embedding(e, mix, pub);
  const RingMatrix out_hat = ring_matmul(masked, w);
  const RingMatrix pool = ring_matmul(pub, w);
  EXPECT_EQ(out_hat, RingMatrix(1, 1, p, {46}));
  EXPECT_EQ(pool, RingMatrix(1, 1, p, {7}));
  EXPECT_EQ(recover(out_hat, mix, pool), RingMatrix(1, 1, p, {11}));
  EXPECT_EQ(recover(out_hat, mix, pool), ring_matmul(e, w));
}

TEST(RecoverTest, ZeroMixIsIdentity) {
  Rng rng(13);
  RingMatrix o = random_matrix(rng, 2, 3), pool = random_matrix(rng, 4, 3);
  EXPECT_EQ(recover(o, RingMatrix(2, 4, kDefault), pool), o);
  EXPECT_THROW(recover(o, RingMatrix(2, 4, kDefault), RingMatrix(4, 2, kDefault)), Error);
}

TEST(RecoverTest, LosslessProperty) {
  Rng rng(14);
  const PrgKey key = PrgKey::from_u64(14);
  for (int t = 0; t < 10000; ++t) {
    const QuantParams p = (t % 4 == 0) ? QuantParams{32, 8} : kDefault;
    const std::size_t n = 1 + uniform_below(rng, 8), d = 2 + uniform_below(rng, 7), o = 1 + uniform_below(rng, 8);
    const std::size_t m = 1 + uniform_below(rng, d - 1);
    RingMatrix e = random_matrix(rng, n, d, p), w = random_matrix(rng, d, o, p);
    RingMatrix pub = detail::sample_public_base(key, OpId{static_cast<std::uint32_t>(t)}, m, d, p);
    RingMatrix mix = derive_step_mask(key, 0, static_cast<std::uint64_t>(t), OpId{0}, n, m, p);
    const RingMatrix out_hat = ring_matmul(mask_embedding(e, mix, pub), w);
    ASSERT_EQ(recover(out_hat, mix, ring_matmul(pub, w)), ring_matmul(e, w)) << "trial " << t;
  }
}

}  // namespace
}  // namespace remo
