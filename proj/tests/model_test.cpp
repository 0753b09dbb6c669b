#include "remo/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace remo {
namespace {

const QuantParams kDefault{64, 16};
const double kUlp = std::ldexp(1.0, -16);

RingMatrix q(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return quantize(RealMatrix(rows, cols, std::move(v)), kDefault);
}

TEST(ModelConfigTest, DefaultsAndValidation) {
  ModelConfig c;
  EXPECT_EQ(c.vocab, 64u);
  EXPECT_EQ(c.d, 32u);
  EXPECT_EQ(c.layers, 2u);
  EXPECT_EQ(c.heads, 4u);
  EXPECT_EQ(c.d_ff, 64u);
  EXPECT_EQ(c.max_seq, 128u);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.op_ids().size(), 2u * 6 + 1);

  ModelConfig bad = c;
  bad.heads = 5;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.vocab = 1;
  bad.eos = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.eos = 64;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(ModelConfigTest, EveryWeightHasItsOwnOp) {
  ModelConfig c;
  auto ops = c.op_ids();
  std::set<OpId> unique(ops.begin(), ops.end());
  EXPECT_EQ(unique.size(), ops.size());
  EXPECT_EQ(c.input_dim(layer_op(0, Slot::kDown)), c.d_ff);
  EXPECT_EQ(c.output_dim(layer_op(1, Slot::kUp)), c.d_ff);
  EXPECT_EQ(c.output_dim(c.head_op()), c.vocab);
}

TEST(EmbedTest, LookupAndErrors) {
  ModelWeights w = ModelWeights::generate(ModelConfig{}, 1);
  const RingMatrix& table = w.structural->embedding;
  const TokenId zero[1] = {0};
  RingMatrix e = embed(zero, table);
  EXPECT_EQ(e, table.slice_rows(0, 1));

  const TokenId seq[3] = {5, 0, 5};
  RingMatrix e3 = embed(seq, table);
  const RealMatrix real_table = dequantize(table);
  const RealMatrix real_e = dequantize(e3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < table.cols(); ++j)
      ASSERT_LE(std::abs(real_e.at(i, j) - real_table.at(seq[i], j)), kUlp);

  try {
    embed(std::span<const TokenId>{}, table);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::kEmptyInput);
  }
  const TokenId oob[1] = {64};
  try {
    embed(oob, table);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::kTokenOutOfRange);
  }
}

TEST(RmsNormTest, ZeroRow) {
  RingMatrix g = q(1, 4, {1, 1, 1, 1});
  EXPECT_TRUE(rms_norm(RingMatrix(2, 4, kDefault), g).is_zero());
}

TEST(RmsNormTest, ConstantRowGoesToSign) {
  RingMatrix g = q(1, 4, {1, 1, 1, 1});
  for (double v : {0.25, 3.0, -2.5, -0.01}) {
    const RealMatrix out = dequantize(rms_norm(q(1, 4, {v, v, v, v}), g));
    // v / sqrt(v^2 + eps); the eps term only shows for tiny |v|.
    const double vq = dequantize(q(1, 1, {v})).data[0];
    for (double o : out.data) EXPECT_NEAR(o, vq / std::sqrt(vq * vq + kRmsEpsilon), kUlp) << v;
    if (std::abs(v) >= 0.25) {
      for (double o : out.data) EXPECT_NEAR(o, v > 0 ? 1.0 : -1.0, kUlp) << v;
    }
  }
}

TEST(RmsNormTest, MatchesRealReference) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    RealMatrix x(3, 8), g(1, 8);
    for (auto& v : x.data) v = uniform_real(rng, -4, 4);
    for (auto& v : g.data) v = uniform_real(rng, 0.5, 1.5);
    const RingMatrix xq = quantize(x, kDefault), gq = quantize(g, kDefault);
    const RealMatrix xr = dequantize(xq), gr = dequantize(gq);
    const RealMatrix out = dequantize(rms_norm(xq, gq));
    for (std::size_t i = 0; i < 3; ++i) {
      double ms = 0;
      for (std::size_t j = 0; j < 8; ++j) ms += xr.at(i, j) * xr.at(i, j) / 8.0;
      for (std::size_t j = 0; j < 8; ++j) {
        const double expect = xr.at(i, j) / std::sqrt(ms + 1e-6) * gr.data[j];
        ASSERT_LE(std::abs(out.at(i, j) - expect), 2 * kUlp);
      }
    }
  }
}

TEST(SiluTest, Values) {
  const RealMatrix out = dequantize(silu(q(1, 3, {0.0, 1.0, -1.0})));
  EXPECT_EQ(out.data[0], 0.0);
  EXPECT_NEAR(out.data[1], 1.0 / (1.0 + std::exp(-1.0)), kUlp);
  EXPECT_NEAR(out.data[2], -1.0 / (1.0 + std::exp(1.0)), kUlp);
}

TEST(AttentionTest, SinglePositionReturnsValue) {
  LayerCache cache{4, 0, {}, {}};
  RingMatrix qm = q(1, 4, {0.3, -1, 2, 0.5}), k = q(1, 4, {1, 2, 3, 4}), v = q(1, 4, {0.125, -7, 3.5, 0});
  EXPECT_EQ(attention_structural(qm, k, v, cache, 1, 0), v);
  EXPECT_EQ(cache.length, 1u);
}

TEST(AttentionTest, IdenticalKeysAverageValues) {
  LayerCache cache{2, 0, {}, {}};
  RingMatrix k = q(1, 2, {0.5, -0.5});
  attention_structural(q(1, 2, {1, 1}), k, q(1, 2, {1.0, 4.0}), cache, 1, 0);
  const RealMatrix out = dequantize(attention_structural(q(1, 2, {2, -3}), k, q(1, 2, {3.0, -2.0}), cache, 1, 1));
  EXPECT_NEAR(out.data[0], 2.0, kUlp);
  EXPECT_NEAR(out.data[1], 1.0, kUlp);
}

TEST(AttentionTest, CacheInconsistent) {
  LayerCache cache{2, 0, {}, {}};
  RingMatrix x = q(1, 2, {1, 1});
  try {
    attention_structural(x, x, x, cache, 1, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCacheInconsistent);
  }
}

TEST(AttentionTest, CausalUnderLaterAppends) {
  Rng rng(8);
  auto rnd = [&](std::size_t rows) {
    RealMatrix m(rows, 8);
    for (auto& v : m.data) v = uniform_real(rng, -2, 2);
    return quantize(m, kDefault);
  };
  RingMatrix qm = rnd(5), k = rnd(5), v = rnd(5);
  // All five rows at once.
  LayerCache full{8, 0, {}, {}};
  RingMatrix all = attention_structural(qm, k, v, full, 2, 0);
  // Prefix of three, then the rest appended later.
  LayerCache part{8, 0, {}, {}};
  RingMatrix first = attention_structural(qm.slice_rows(0, 3), k.slice_rows(0, 3), v.slice_rows(0, 3), part, 2, 0);
  RingMatrix rest = attention_structural(qm.slice_rows(3, 2), k.slice_rows(3, 2), v.slice_rows(3, 2), part, 2, 3);
  EXPECT_EQ(all.slice_rows(0, 3), first);
  EXPECT_EQ(all.slice_rows(3, 2), rest);
}

TEST(GreedySampleTest, SignedArgmaxLowestTie) {
  EXPECT_EQ(greedy_sample(q(1, 4, {-1, -0.5, -3, -0.5})), 1u);
  EXPECT_EQ(greedy_sample(q(1, 3, {2, 2, 2})), 0u);
  // Only the last row counts.
  EXPECT_EQ(greedy_sample(q(2, 3, {9, 0, 0, 0, 0, 1})), 2u);
}

TEST(WeightsTest, GenerateDeterministicAndInRange) {
  ModelConfig c;
  ModelWeights a = ModelWeights::generate(c, 77), b = ModelWeights::generate(c, 77);
  EXPECT_EQ(encode_weights(a), encode_weights(b));
  EXPECT_NE(encode_weights(a), encode_weights(ModelWeights::generate(c, 78)));
  const RealMatrix w = dequantize(a.projections->at(layer_op(0, Slot::kDown)));
  const double bound = 1.0 / std::sqrt(64.0);
  for (double v : w.data) ASSERT_LE(std::abs(v), bound + kUlp);
}

TEST(WeightsTest, FileRoundTrip) {
  ModelConfig c;
  c.layers = 1;
  c.vocab = 10;
  c.eos = 9;
  ModelWeights w = ModelWeights::generate(c, 3);
  const Bytes b = encode_weights(w);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "RMW1");
  ModelWeights back = decode_weights(b);
  EXPECT_EQ(back.config, c);
  EXPECT_EQ(encode_weights(back), b);
  for (OpId op : c.op_ids()) EXPECT_EQ(back.projections->at(op), w.projections->at(op));

  Bytes truncated(b.begin(), b.end() - 3);
  EXPECT_THROW(decode_weights(truncated), Error);
  Bytes trailing = b;
  trailing.push_back(0);
  EXPECT_THROW(decode_weights(trailing), Error);

  const std::string path = ::testing::TempDir() + "/w.rmw";
  save_weights(path, w);
  EXPECT_EQ(encode_weights(load_weights(path)), b);
}

TEST(DecoderTest, DeterministicStep) {
  ModelWeights w = ModelWeights::generate(ModelConfig{}, 4);
  const TokenSeq prompt = {3, 1, 4, 1, 5};
  TokenId first = 0;
  for (int r = 0; r < 100; ++r) {
    ReferenceProjector proj(w.projections);
    Decoder<ReferenceProjector> dec(w.config, w.structural, proj);
    const TokenId t = dec.decode_step(prompt);
    if (r == 0) first = t;
    ASSERT_EQ(t, first);
    ASSERT_EQ(dec.length(), prompt.size());
  }
}

TEST(DecoderTest, SessionExhausted) {
  ModelConfig c;
  c.max_seq = 8;
  ModelWeights w = ModelWeights::generate(c, 4);
  ReferenceProjector proj(w.projections);
  Decoder<ReferenceProjector> dec(c, w.structural, proj);
  const TokenSeq full(8, 1);
  try {
    dec.decode_step(full);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSessionExhausted);
  }
  EXPECT_THROW(dec.decode_step(std::span<const TokenId>{}), Error);
}

TEST(DecoderTest, GenerateStopsBeforeCacheOverflow) {
  ModelConfig c;
  c.max_seq = 8;
  ModelWeights w = ModelWeights::generate(c, 4);
  const TokenSeq out = reference_generate(w, {1, 2, 3}, GenerateOptions{100, false});
  // Prompt 3 + fed tokens must stay below max_seq.
  EXPECT_EQ(out.size(), 5u);
}

TEST(GenerateTest, MaxNewZeroAndEmptyPrompt) {
  ModelWeights w = ModelWeights::generate(ModelConfig{}, 4);
  EXPECT_TRUE(reference_generate(w, {1, 2}, GenerateOptions{0, true}).empty());
  EXPECT_THROW(reference_generate(w, {}, GenerateOptions{4, true}), Error);
  EXPECT_EQ(reference_generate(w, {1, 2}, GenerateOptions{7, false}).size(), 7u);
}

TEST(GenerateTest, ImmediateEos) {
  // Zero final gain makes every logit zero, so argmax is token 0; declare it EOS.
  ModelConfig c;
  c.eos = 0;
  ModelWeights w = ModelWeights::generate(c, 4);
  auto s = std::make_shared<StructuralParams>(*w.structural);
  s->final_norm = RingMatrix(1, c.d, c.params);
  w.structural = s;
  EXPECT_EQ(reference_generate(w, {5, 6, 7}, GenerateOptions{16, true}), TokenSeq{0});
  EXPECT_EQ(reference_generate(w, {5, 6, 7}, GenerateOptions{4, false}), (TokenSeq{0, 0, 0, 0}));
}

TEST(GenerateTest, SwappingWeightsChangesOutput) {
  ModelWeights w = ModelWeights::generate(ModelConfig{}, 21);
  auto swapped = std::make_shared<ProjectionWeights>(*w.projections);
  swapped->insert(layer_op(0, Slot::kQuery), w.projections->at(layer_op(0, Slot::kValue)));
  swapped->insert(layer_op(0, Slot::kValue), w.projections->at(layer_op(0, Slot::kQuery)));
  ModelWeights w2{w.config, w.structural, swapped};
  std::size_t differing = 0;
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    TokenSeq prompt(6);
    for (auto& tok : prompt) tok = static_cast<TokenId>(uniform_below(rng, 64));
    const GenerateOptions opts{8, false};
    if (reference_generate(w, prompt, opts) != reference_generate(w2, prompt, opts)) ++differing;
  }
  EXPECT_GT(differing, 0u);
}

}  // namespace
}  // namespace remo
