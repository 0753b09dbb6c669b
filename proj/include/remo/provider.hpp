#pragma once

// The weight-holding party. It answers setup with R_pub = M_pub * W and
// masked products with O_hat = E_hat * W, both exact at scale 2^(2f); the
// enclave subtracts first and rescales second. It never sees a token id, an
// unmasked activation, or the KV cache.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <vector>

#include "remo/model.hpp"
#include "remo/wire.hpp"

namespace remo {

enum class Direction : std::uint8_t { kToProvider = 0, kFromProvider = 1 };

struct TranscriptEntry {
  Direction direction;
  std::uint64_t timestamp_ns;
  Message message;
};

// Everything the provider observed, in order.
class Transcript {
 public:
  void append(Direction dir, Message msg) {
    std::lock_guard lock(mu_);
    entries_.push_back({dir, now_ns(), std::move(msg)});
  }

  std::vector<TranscriptEntry> entries() const {
    std::lock_guard lock(mu_);
    return entries_;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

 private:
  static std::uint64_t now_ns() {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
            .count());
  }

  mutable std::mutex mu_;
  std::vector<TranscriptEntry> entries_;
};

// Dump format: per entry, direction byte, u64 LE timestamp, then the frame.
inline Bytes encode_transcript(const std::vector<TranscriptEntry>& entries) {
  ByteWriter w;
  for (const auto& e : entries) {
    w.u8(static_cast<std::uint8_t>(e.direction));
    w.u64(e.timestamp_ns);
    w.raw(encode_message(e.message));
  }
  return w.take();
}

inline std::vector<TranscriptEntry> decode_transcript(std::span<const std::uint8_t> bytes) {
  std::vector<TranscriptEntry> out;
  ByteReader r(bytes);
  while (!r.done()) {
    const std::uint8_t dir = r.u8();
    if (dir > 1) fail(ErrorCode::kDecodeError, "bad transcript direction byte");
    const std::uint64_t ts = r.u64();
    const std::uint32_t len = r.u32();
    out.push_back({static_cast<Direction>(dir), ts, decode_body(r.raw(len))});
  }
  return out;
}

inline void write_transcript(const std::string& path, const std::vector<TranscriptEntry>& entries) {
  const Bytes b = encode_transcript(entries);
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::kBadConfig, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

class Provider {
 public:
  // record = false skips the transcript, for long experiment runs.
  Provider(ModelConfig config, std::shared_ptr<const ProjectionWeights> weights, bool record = true)
      : config_(std::move(config)), weights_(std::move(weights)), record_(record) {}

  Message handle(const Message& request) {
    if (record_) transcript_.append(Direction::kToProvider, request);
    Message reply;
    try {
      reply = dispatch(request);
    } catch (const Error& e) {
      reply = error_reply(e);
    }
    if (record_) transcript_.append(Direction::kFromProvider, reply);
    return reply;
  }

  // Frame in, frame out. Undecodable input yields an Error frame.
  Bytes handle_frame(std::span<const std::uint8_t> frame) {
    Message request;
    try {
      request = decode_message(frame);
    } catch (const Error& e) {
      return encode_message(error_reply(e));
    }
    return encode_message(handle(request));
  }

  const Transcript& transcript() const { return transcript_; }
  const ModelConfig& config() const { return config_; }

  std::size_t pools_issued() const {
    std::lock_guard lock(mu_);
    return issued_.size();
  }

 private:
  Message dispatch(const Message& request) {
    return std::visit(
        [&](const auto& m) -> Message {
          using T = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<T, SetupBase>) {
            return on_setup(m);
          } else if constexpr (std::is_same_v<T, MatMulRequest>) {
            return on_matmul(m);
          } else if constexpr (std::is_same_v<T, OpenSession>) {
            std::lock_guard lock(mu_);
            if (!sessions_.emplace(m.session, 0).second) {
              fail(ErrorCode::kProtocol, "session " + std::to_string(m.session) + " already open");
            }
            return m;
          } else if constexpr (std::is_same_v<T, CloseSession>) {
            std::lock_guard lock(mu_);
            if (sessions_.erase(m.session) == 0) fail(ErrorCode::kProtocol, "closing unknown session");
            return m;
          } else {
            fail(ErrorCode::kProtocol, std::string("provider does not accept ") + std::string(tag_name(tag_of(request))));
          }
        },
        request);
  }

  Message on_setup(const SetupBase& m) {
    const RingMatrix& w = weights_->at(m.op);
    const RingMatrix& base = m.public_base;
    if (base.cols() != w.rows() || base.params() != w.params()) {
      fail(ErrorCode::kShapeMismatch, "public base " + shape_str(base) + " does not fit W " + shape_str(w));
    }
    // A full-height base would let the client solve for W.
    if (base.rows() >= base.cols()) fail(ErrorCode::kBadDims, "public base must have fewer rows than columns");
    {
      std::lock_guard lock(mu_);
      if (!issued_.insert(m.op).second) {
        fail(ErrorCode::kSketchReissue, "restoration pool already issued for " + to_string(m.op));
      }
    }
    return PoolReply{m.op, ring_matmul(base, w)};
  }

  Message on_matmul(const MatMulRequest& m) {
    {
      std::lock_guard lock(mu_);
      auto it = sessions_.find(m.session);
      if (it == sessions_.end()) fail(ErrorCode::kProtocol, "session " + std::to_string(m.session) + " not open");
      if (m.step < it->second) fail(ErrorCode::kProtocol, "step went backwards");
      it->second = m.step;
    }
    const RingMatrix& w = weights_->at(m.op);
    if (m.masked_input.cols() != w.rows() || m.masked_input.params() != w.params()) {
      fail(ErrorCode::kShapeMismatch, "input " + shape_str(m.masked_input) + " does not fit W " + shape_str(w));
    }
    return MatMulReply{m.session, m.step, m.op, ring_matmul(m.masked_input, w)};
  }

  ModelConfig config_;
  std::shared_ptr<const ProjectionWeights> weights_;
  bool record_;
  mutable std::mutex mu_;
  std::set<OpId> issued_;
  std::map<std::uint64_t, std::uint64_t> sessions_;  // session -> last step
  Transcript transcript_;
};

}  // namespace remo
