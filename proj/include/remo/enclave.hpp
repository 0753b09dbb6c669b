#pragma once

// The client-trusted party. It holds prompts, masks, restoration pools and
// the KV cache, never a weight matrix. Every matrix it sends out is either a
// public base (setup) or a masked activation.

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <utility>

#include "remo/masking.hpp"
#include "remo/model.hpp"
#include "remo/provider.hpp"
#include "remo/wire.hpp"

namespace remo {

class Transport {
 public:
  virtual ~Transport() = default;
  // One request, one reply.
  virtual Message exchange(const Message& request) = 0;
};

// Calls the provider directly, still going through the byte encoding so the
// provider sees exactly what it would see over TCP.
class InProcessTransport final : public Transport {
 public:
  explicit InProcessTransport(Provider& provider) : provider_(provider) {}
  Message exchange(const Message& request) override {
    return decode_message(provider_.handle_frame(encode_message(request)));
  }

 private:
  Provider& provider_;
};

// Observation point for the attack harness: the plaintext projection input
// and the masked payload actually put on the wire.
struct TapEvent {
  OpId op;
  std::uint64_t step;
  const RingMatrix& plain;
  const RingMatrix& masked;
};

// Test-only knobs. Defaults are the honest protocol.
struct EnclaveHooks {
  bool disable_masking = false;
  std::optional<std::pair<std::uint64_t, OpId>> corrupt_reply;  // (step, op): perturb that masked reply
  std::function<void(const TapEvent&)> tap;
};

namespace detail {

template <class T>
T expect_reply(Message reply, const char* what) {
  if (auto* err = std::get_if<ErrorReply>(&reply)) throw Error(err->code, err->detail);
  if (auto* m = std::get_if<T>(&reply)) return std::move(*m);
  fail(ErrorCode::kProtocol, std::string("expected ") + what + ", got " + std::string(tag_name(tag_of(reply))));
}

}  // namespace detail

// Outsources each product under a fresh mask and recovers it exactly.
class MaskedProjector {
 public:
  MaskedProjector(Transport& transport, const std::map<OpId, MaskBase>& pools, const ModelConfig& config,
                  PrgKey key, std::uint64_t session, const EnclaveHooks& hooks)
      : transport_(transport), pools_(pools), config_(config), key_(std::move(key)), session_(session),
        hooks_(hooks) {}

  void begin_step(std::uint64_t step) { step_ = step; }

  RingMatrix project(OpId op, const RingMatrix& x) {
    auto it = pools_.find(op);
    if (it == pools_.end() || !it->second.installed()) fail(ErrorCode::kUnknownOp, "no pool for " + to_string(op));
    const MaskBase& base = it->second;

    const RingMatrix private_mix = derive_step_mask(key_, session_, step_, op, x.rows(), base.m, x.params());
    const RingMatrix masked = hooks_.disable_masking ? x : mask_embedding(x, private_mix, base.public_base);
    if (hooks_.tap) hooks_.tap(TapEvent{op, step_, x, masked});

    MatMulReply reply = detail::expect_reply<MatMulReply>(
        transport_.exchange(MatMulRequest{session_, step_, op, masked}), "MatMulReply");
    if (reply.session != session_ || reply.step != step_ || reply.op != op) {
      fail(ErrorCode::kProtocol, "reply does not echo its request");
    }
    RingMatrix out = std::move(reply.masked_output);
    if (out.rows() != x.rows() || out.cols() != config_.output_dim(op) || out.params() != x.params()) {
      fail(ErrorCode::kShapeMismatch, "reply for " + to_string(op) + " has shape " + shape_str(out));
    }
    if (hooks_.corrupt_reply && hooks_.corrupt_reply->first == step_ && hooks_.corrupt_reply->second == op) {
      // Push element 0 up by 2^10 in real units (clamped for small rings). On
      // the head op that makes token 0 win the argmax.
      const unsigned shift = std::min(2 * x.params().f + 10, x.params().k - 2);
      out.mutable_data()[0] += std::uint64_t{1} << shift;
    }
    return hooks_.disable_masking ? out : recover(out, private_mix, *base.pool);
  }

 private:
  Transport& transport_;
  const std::map<OpId, MaskBase>& pools_;
  const ModelConfig& config_;
  PrgKey key_;
  std::uint64_t session_;
  const EnclaveHooks& hooks_;
  std::uint64_t step_ = 0;
};

class Enclave {
 public:
  // sketch_rows = 0 picks d_in / 2 per weight matrix.
  Enclave(ModelConfig config, std::shared_ptr<const StructuralParams> params, PrgKey key,
          std::size_t sketch_rows = 0)
      : config_(std::move(config)), params_(std::move(params)), key_(std::move(key)), sketch_rows_(sketch_rows),
        issuer_(key_, config_.params) {
    config_.validate();
  }

  // One-time setup: a public base per weight matrix, exchanged for its pool.
  // Idempotent; later callers reuse the installed pools.
  void setup(Transport& transport) {
    std::lock_guard lock(setup_mu_);
    if (ready_) return;
    for (OpId op : config_.op_ids()) {
      const std::size_t d = config_.input_dim(op);
      MaskBase base = issuer_.generate(op, sketch_rows_ ? sketch_rows_ : default_sketch_rows(d), d);
      PoolReply reply = detail::expect_reply<PoolReply>(transport.exchange(SetupBase{op, base.public_base}), "PoolReply");
      if (reply.op != op) fail(ErrorCode::kProtocol, "pool reply for wrong op");
      if (reply.pool.cols() != config_.output_dim(op)) {
        fail(ErrorCode::kShapeMismatch, "pool for " + to_string(op) + " has shape " + shape_str(reply.pool));
      }
      pools_.emplace(op, install_pool(std::move(base), std::move(reply.pool)));
    }
    ready_ = true;
  }

  bool ready() const {
    std::lock_guard lock(setup_mu_);
    return ready_;
  }

  // Optional pool probe. Sends x = a * M_pub for a random row a and checks the
  // reply against a * R_pub. x lies in the row span of the public base, so the
  // provider learns nothing it could not compute from its own setup replies.
  // Returns the ops whose pool disagrees. A mismatch is reported, not treated
  // as an attack.
  std::vector<OpId> check_pools(Transport& transport, std::uint64_t session, std::uint64_t seed) {
    setup(transport);
    Rng rng(seed);
    std::vector<OpId> bad;
    detail::expect_reply<OpenSession>(transport.exchange(OpenSession{session}), "OpenSession");
    for (const auto& [op, base] : pools_) {
      RingMatrix a(1, base.m, config_.params);
      for (auto& v : a.mutable_data()) v = rng() & config_.params.mask();
      const RingMatrix x = ring_matmul(a, base.public_base);
      MatMulReply reply =
          detail::expect_reply<MatMulReply>(transport.exchange(MatMulRequest{session, 0, op, x}), "MatMulReply");
      if (reply.masked_output != ring_matmul(a, *base.pool)) bad.push_back(op);
    }
    detail::expect_reply<CloseSession>(transport.exchange(CloseSession{session}), "CloseSession");
    return bad;
  }

  const std::map<OpId, MaskBase>& pools() const { return pools_; }
  const ModelConfig& config() const { return config_; }

  // Runs one client request end to end. Nothing partial is returned on error.
  TokenSeq run_session(Transport& transport, std::uint64_t session, const TokenSeq& prompt,
                       const GenerateOptions& opts, const EnclaveHooks& hooks = {}) {
    setup(transport);
    detail::expect_reply<OpenSession>(transport.exchange(OpenSession{session}), "OpenSession");
    MaskedProjector projector(transport, pools_, config_, key_, session, hooks);
    Decoder<MaskedProjector> decoder(config_, params_, projector);
    TokenSeq out = decoder.generate(prompt, opts);
    detail::expect_reply<CloseSession>(transport.exchange(CloseSession{session}), "CloseSession");
    return out;
  }

 private:
  ModelConfig config_;
  std::shared_ptr<const StructuralParams> params_;
  PrgKey key_;
  std::size_t sketch_rows_;
  PublicBaseIssuer issuer_;
  mutable std::mutex setup_mu_;
  bool ready_ = false;
  std::map<OpId, MaskBase> pools_;
};

}  // namespace remo
