#pragma once

// Toy decoder-only transformer split into weighted decoding (every product
// with a weight matrix, delegated to a projector) and structural decoding
// (embedding lookup, RMSNorm, attention softmax, SiLU, residuals, sampling).
// The projector decides whether products run locally or masked on a remote
// provider; the structural code path is shared so both produce identical bits.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "remo/error.hpp"
#include "remo/masking.hpp"
#include "remo/random.hpp"
#include "remo/ring.hpp"

namespace remo {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

enum class Slot : std::uint32_t { kQuery = 0, kKey, kValue, kOut, kUp, kDown, kHead };

inline OpId layer_op(std::size_t layer, Slot slot) {
  return OpId::make(static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(slot));
}

struct ModelConfig {
  std::size_t vocab = 64;
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_ff = 64;
  std::size_t max_seq = 128;
  TokenId eos = 63;
  QuantParams params{};

  void validate() const {
    check_params(params);
    if (vocab < 2 || d == 0 || layers == 0 || heads == 0 || d_ff == 0 || max_seq == 0) {
      fail(ErrorCode::kBadConfig, "model dims must be >= 1 and vocab >= 2");
    }
    if (d % heads != 0) fail(ErrorCode::kBadConfig, "d must be divisible by heads");
    if (eos >= vocab) fail(ErrorCode::kBadConfig, "eos id outside vocabulary");
  }

  OpId head_op() const { return layer_op(layers, Slot::kHead); }

  // Every weight matrix in canonical order.
  std::vector<OpId> op_ids() const {
    std::vector<OpId> ops;
    for (std::size_t l = 0; l < layers; ++l)
      for (Slot s : {Slot::kQuery, Slot::kKey, Slot::kValue, Slot::kOut, Slot::kUp, Slot::kDown})
        ops.push_back(layer_op(l, s));
    ops.push_back(head_op());
    return ops;
  }

  std::size_t input_dim(OpId op) const { return op.slot() == static_cast<std::uint32_t>(Slot::kDown) ? d_ff : d; }

  std::size_t output_dim(OpId op) const {
    switch (static_cast<Slot>(op.slot())) {
      case Slot::kUp: return d_ff;
      case Slot::kHead: return vocab;
      default: return d;
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Weight-free (in the W sense) parameters the enclave needs: the embedding
// table and the RMSNorm gains.
struct StructuralParams {
  RingMatrix embedding;                // vocab x d
  std::vector<RingMatrix> attn_norm;   // per layer, 1 x d
  std::vector<RingMatrix> mlp_norm;    // per layer, 1 x d
  RingMatrix final_norm;               // 1 x d
};

// The provider's secret: one matrix per OpId.
class ProjectionWeights {
 public:
  void insert(OpId op, RingMatrix w) { matrices_.insert_or_assign(op, std::move(w)); }

  const RingMatrix& at(OpId op) const {
    auto it = matrices_.find(op);
    if (it == matrices_.end()) fail(ErrorCode::kUnknownOp, "no weight matrix for op " + to_string(op));
    return it->second;
  }
  bool contains(OpId op) const { return matrices_.count(op) != 0; }
  const std::map<OpId, RingMatrix>& all() const { return matrices_; }

 private:
  std::map<OpId, RingMatrix> matrices_;
};

struct ModelWeights {
  ModelConfig config;
  std::shared_ptr<const StructuralParams> structural;
  std::shared_ptr<const ProjectionWeights> projections;

  // Seeded uniform init in [-1/sqrt(d_in), 1/sqrt(d_in)]; gains start at 1.
  static ModelWeights generate(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto draw = [&](std::size_t rows, std::size_t cols) {
      const double a = 1.0 / std::sqrt(static_cast<double>(rows));
      RealMatrix m(rows, cols);
      for (auto& v : m.data) v = uniform_real(rng, -a, a);
      return quantize(m, cfg.params);
    };
    auto ones = [&] {
      RealMatrix g(1, cfg.d);
      std::fill(g.data.begin(), g.data.end(), 1.0);
      return quantize(g, cfg.params);
    };

    auto structural = std::make_shared<StructuralParams>();
    auto proj = std::make_shared<ProjectionWeights>();
    {
      const double a = 1.0 / std::sqrt(static_cast<double>(cfg.d));
      RealMatrix table(cfg.vocab, cfg.d);
      for (auto& v : table.data) v = uniform_real(rng, -a, a);
      structural->embedding = quantize(table, cfg.params);
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      structural->attn_norm.push_back(ones());
      structural->mlp_norm.push_back(ones());
      for (Slot s : {Slot::kQuery, Slot::kKey, Slot::kValue, Slot::kOut, Slot::kUp, Slot::kDown}) {
        const OpId op = layer_op(l, s);
        proj->insert(op, draw(cfg.input_dim(op), cfg.output_dim(op)));
      }
    }
    structural->final_norm = ones();
    proj->insert(cfg.head_op(), draw(cfg.d, cfg.vocab));
    return ModelWeights{cfg, std::move(structural), std::move(proj)};
  }
};

// ---------------------------------------------------------------------------
// Weight file: "RMW1", then vocab, d, layers, heads, d_ff, max_seq, eos, k, f
// as u32 LE, then matrices in RMX1 encoding in this order:
//   embedding; per layer: attn_norm, W_Q, W_K, W_V, W_O, mlp_norm, W_up,
//   W_down; final_norm; W_head.

inline constexpr std::string_view kWeightsMagic = "RMW1";

inline Bytes encode_weights(const ModelWeights& w) {
  const auto& c = w.config;
  ByteWriter out;
  out.raw(kWeightsMagic);
  for (std::size_t v : {c.vocab, c.d, c.layers, c.heads, c.d_ff, c.max_seq, std::size_t{c.eos},
                        std::size_t{c.params.k}, std::size_t{c.params.f}}) {
    out.u32(static_cast<std::uint32_t>(v));
  }
  encode_matrix(out, w.structural->embedding);
  for (std::size_t l = 0; l < c.layers; ++l) {
    encode_matrix(out, w.structural->attn_norm[l]);
    for (Slot s : {Slot::kQuery, Slot::kKey, Slot::kValue, Slot::kOut}) encode_matrix(out, w.projections->at(layer_op(l, s)));
    encode_matrix(out, w.structural->mlp_norm[l]);
    for (Slot s : {Slot::kUp, Slot::kDown}) encode_matrix(out, w.projections->at(layer_op(l, s)));
  }
  encode_matrix(out, w.structural->final_norm);
  encode_matrix(out, w.projections->at(c.head_op()));
  return out.take();
}

inline ModelWeights decode_weights(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (in.str(4) != kWeightsMagic) fail(ErrorCode::kDecodeError, "bad weights magic");
  ModelConfig c;
  c.vocab = in.u32();
  c.d = in.u32();
  c.layers = in.u32();
  c.heads = in.u32();
  c.d_ff = in.u32();
  c.max_seq = in.u32();
  c.eos = in.u32();
  c.params.k = in.u32();
  c.params.f = in.u32();
  c.validate();

  auto expect = [&](std::size_t rows, std::size_t cols) {
    RingMatrix m = decode_matrix(in);
    if (m.rows() != rows || m.cols() != cols || m.params() != c.params) {
      fail(ErrorCode::kDecodeError, "weights file matrix has shape " + shape_str(m) + ", expected " +
                                        std::to_string(rows) + "x" + std::to_string(cols));
    }
    return m;
  };
  auto structural = std::make_shared<StructuralParams>();
  auto proj = std::make_shared<ProjectionWeights>();
  structural->embedding = expect(c.vocab, c.d);
  for (std::size_t l = 0; l < c.layers; ++l) {
    structural->attn_norm.push_back(expect(1, c.d));
    for (Slot s : {Slot::kQuery, Slot::kKey, Slot::kValue, Slot::kOut}) proj->insert(layer_op(l, s), expect(c.d, c.d));
    structural->mlp_norm.push_back(expect(1, c.d));
    proj->insert(layer_op(l, Slot::kUp), expect(c.d, c.d_ff));
    proj->insert(layer_op(l, Slot::kDown), expect(c.d_ff, c.d));
  }
  structural->final_norm = expect(1, c.d);
  proj->insert(c.head_op(), expect(c.d, c.vocab));
  if (!in.done()) fail(ErrorCode::kLengthMismatch, "trailing bytes in weights file");
  return ModelWeights{c, std::move(structural), std::move(proj)};
}

inline void save_weights(const std::string& path, const ModelWeights& w) {
  const Bytes b = encode_weights(w);
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::kBadConfig, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

inline ModelWeights load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::kBadConfig, "cannot read " + path);
  Bytes b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_weights(b);
}

// ---------------------------------------------------------------------------
// Structural decoding.

inline RingMatrix embed(std::span<const TokenId> tokens, const RingMatrix& table) {
  if (tokens.empty()) fail(ErrorCode::kEmptyInput, "cannot embed an empty token sequence");
  RingMatrix out(tokens.size(), table.cols(), table.params());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= table.rows()) {
      fail(ErrorCode::kTokenOutOfRange, "token " + std::to_string(tokens[i]) + " >= vocab " +
                                            std::to_string(table.rows()));
    }
    auto src = table.row(tokens[i]);
    for (std::size_t j = 0; j < src.size(); ++j) out.set(i, j, src[j]);
  }
  return out;
}

inline constexpr double kRmsEpsilon = 1e-6;

inline RingMatrix rms_norm(const RingMatrix& x, const RingMatrix& gain) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) fail(ErrorCode::kShapeMismatch, "rms_norm gain width");
  const RealMatrix v = dequantize(x);
  const RealMatrix g = dequantize(gain);
  RealMatrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < v.rows; ++i) {
    double ss = 0.0;
    for (double e : v.row(i)) ss += e * e;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(v.cols) + kRmsEpsilon);
    for (std::size_t j = 0; j < v.cols; ++j) out.at(i, j) = v.at(i, j) * inv * g.data[j];
  }
  return quantize(out, x.params());
}

inline RingMatrix silu(const RingMatrix& x) {
  RealMatrix v = dequantize(x);
  for (auto& e : v.data) e = e / (1.0 + std::exp(-e));
  return quantize(v, x.params());
}

// Append-only key/value rows for one layer. Lives only on the enclave side.
struct LayerCache {
  std::size_t width = 0;
  std::size_t length = 0;
  std::vector<double> keys;    // length x width, dequantized
  std::vector<double> values;  // length x width, dequantized

  void append(const RingMatrix& k, const RingMatrix& v) {
    if (k.cols() != width || v.cols() != width || k.rows() != v.rows()) {
      fail(ErrorCode::kShapeMismatch, "kv append shape");
    }
    const RealMatrix kd = dequantize(k), vd = dequantize(v);
    keys.insert(keys.end(), kd.data.begin(), kd.data.end());
    values.insert(values.end(), vd.data.begin(), vd.data.end());
    length += k.rows();
  }
};

struct KVCache {
  std::vector<LayerCache> layers;

  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t width) : layers(n_layers, LayerCache{width, 0, {}, {}}) {}
  std::size_t length() const { return layers.empty() ? 0 : layers.front().length; }
};

// Appends k, v at `position`, then runs causal scaled dot-product attention
// for the rows of q (row i sits at position + i).
inline RingMatrix attention_structural(const RingMatrix& q, const RingMatrix& k, const RingMatrix& v,
                                       LayerCache& cache, std::size_t heads, std::size_t position) {
  if (cache.length != position) {
    fail(ErrorCode::kCacheInconsistent, "cache holds " + std::to_string(cache.length) +
                                            " rows at position " + std::to_string(position));
  }
  if (q.rows() != k.rows() || q.cols() != cache.width || heads == 0 || cache.width % heads != 0) {
    fail(ErrorCode::kShapeMismatch, "attention shapes");
  }
  cache.append(k, v);

  const std::size_t width = cache.width;
  const std::size_t dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const RealMatrix qd = dequantize(q);
  RealMatrix out(q.rows(), width);
  std::vector<double> scores;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const std::size_t visible = position + i + 1;
    scores.resize(visible);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* qh = qd.data.data() + i * width + h * dh;
      double best = -INFINITY;
      for (std::size_t p = 0; p < visible; ++p) {
        const double* kh = cache.keys.data() + p * width + h * dh;
        double s = 0.0;
        for (std::size_t t = 0; t < dh; ++t) s += qh[t] * kh[t];
        scores[p] = s * scale;
        best = std::max(best, scores[p]);
      }
      double total = 0.0;
      for (auto& s : scores) {
        s = std::exp(s - best);
        total += s;
      }
      for (std::size_t p = 0; p < visible; ++p) {
        const double w = scores[p] / total;
        const double* vh = cache.values.data() + p * width + h * dh;
        for (std::size_t t = 0; t < dh; ++t) out.at(i, h * dh + t) += w * vh[t];
      }
    }
  }
  return quantize(out, q.params());
}

// Argmax of the last row read as signed fixed point; ties go to the lowest id.
inline TokenId greedy_sample(const RingMatrix& logits) {
  auto row = logits.row(logits.rows() - 1);
  std::size_t best = 0;
  std::int64_t best_v = logits.params().to_signed(row[0]);
  for (std::size_t j = 1; j < row.size(); ++j) {
    const std::int64_t v = logits.params().to_signed(row[j]);
    if (v > best_v) {
      best_v = v;
      best = j;
    }
  }
  return static_cast<TokenId>(best);
}

// ---------------------------------------------------------------------------
// Weighted decoding is delegated. project() returns the exact ring product
// x * W at scale 2^(2f); the decoder rescales.

template <class P>
concept LinearProjector = requires(P& p, OpId op, const RingMatrix& x, std::uint64_t step) {
  { p.project(op, x) } -> std::same_as<RingMatrix>;
  p.begin_step(step);
};

// Single-party baseline: multiplies by the weights directly.
class ReferenceProjector {
 public:
  explicit ReferenceProjector(std::shared_ptr<const ProjectionWeights> weights) : weights_(std::move(weights)) {}
  void begin_step(std::uint64_t) {}
  RingMatrix project(OpId op, const RingMatrix& x) { return ring_matmul(x, weights_->at(op)); }

 private:
  std::shared_ptr<const ProjectionWeights> weights_;
};

struct GenerateOptions {
  GenerateOptions() = default;
  GenerateOptions(std::size_t max_new_tokens, bool stop, std::function<void(TokenId)> callback = {})
      : max_new(max_new_tokens), stop_at_eos(stop), on_token(std::move(callback)) {}

  std::size_t max_new = 16;
  bool stop_at_eos = true;
  std::function<void(TokenId)> on_token;  // called as each token is produced
};

template <LinearProjector P>
class Decoder {
 public:
  Decoder(ModelConfig config, std::shared_ptr<const StructuralParams> params, P& projector)
      : config_(std::move(config)), params_(std::move(params)), projector_(projector),
        cache_(config_.layers, config_.d) {
    config_.validate();
  }

  std::size_t length() const { return cache_.length(); }
  std::uint64_t steps() const { return step_; }

  // Feeds `tokens` (the whole prompt on the first step, then one token) and
  // returns the greedy next token.
  TokenId decode_step(std::span<const TokenId> tokens) {
    if (tokens.empty()) fail(ErrorCode::kEmptyInput, "decode_step needs at least one token");
    const std::size_t pos = cache_.length();
    if (pos + tokens.size() >= config_.max_seq) {
      fail(ErrorCode::kSessionExhausted, "sequence of " + std::to_string(pos + tokens.size()) +
                                             " leaves no room below max_seq " + std::to_string(config_.max_seq));
    }
    projector_.begin_step(step_);
    RingMatrix x = embed(tokens, params_->embedding);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const RingMatrix h = rms_norm(x, params_->attn_norm[l]);
      const RingMatrix q = project(layer_op(l, Slot::kQuery), h);
      const RingMatrix k = project(layer_op(l, Slot::kKey), h);
      const RingMatrix v = project(layer_op(l, Slot::kValue), h);
      const RingMatrix a = attention_structural(q, k, v, cache_.layers[l], config_.heads, pos);
      x = ring_add(x, project(layer_op(l, Slot::kOut), a));

      const RingMatrix h2 = rms_norm(x, params_->mlp_norm[l]);
      const RingMatrix up = silu(project(layer_op(l, Slot::kUp), h2));
      x = ring_add(x, project(layer_op(l, Slot::kDown), up));
    }
    const RingMatrix last = rms_norm(x.slice_rows(x.rows() - 1, 1), params_->final_norm);
    const TokenId next = greedy_sample(project(config_.head_op(), last));
    ++step_;
    return next;
  }

  // Response only; the prompt is not echoed.
  TokenSeq generate(const TokenSeq& prompt, const GenerateOptions& opts) {
    if (prompt.empty()) fail(ErrorCode::kEmptyInput, "empty prompt");
    TokenSeq out;
    if (opts.max_new == 0) return out;
    TokenId next = decode_step(prompt);
    out.push_back(next);
    if (opts.on_token) opts.on_token(next);
    while (out.size() < opts.max_new && !(opts.stop_at_eos && next == config_.eos)) {
      if (cache_.length() + 1 >= config_.max_seq) break;
      const TokenId feed[1] = {next};
      next = decode_step(feed);
      out.push_back(next);
      if (opts.on_token) opts.on_token(next);
    }
    return out;
  }

 private:
  RingMatrix project(OpId op, const RingMatrix& x) { return rescale(projector_.project(op, x)); }

  ModelConfig config_;
  std::shared_ptr<const StructuralParams> params_;
  P& projector_;
  KVCache cache_;
  std::uint64_t step_ = 0;
};

// The unprotected baseline: same arithmetic, same sampler, one party.
inline TokenSeq reference_generate(const ModelWeights& weights, const TokenSeq& prompt,
                                   const GenerateOptions& opts) {
  ReferenceProjector proj(weights.projections);
  Decoder<ReferenceProjector> dec(weights.config, weights.structural, proj);
  return dec.generate(prompt, opts);
}

}  // namespace remo
