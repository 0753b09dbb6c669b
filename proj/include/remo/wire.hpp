#pragma once

// Enclave <-> provider messages and their framing:
//   frame = length (u32 LE, bytes that follow) | tag (u8) | payload
// Matrices inside payloads use the RMX1 encoding.

#include <cstdint>
#include <string>
#include <variant>

#include "remo/bytes.hpp"
#include "remo/error.hpp"
#include "remo/masking.hpp"
#include "remo/ring.hpp"

namespace remo {

inline constexpr std::uint16_t kDefaultPort = 7431;
inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;

struct SetupBase {
  OpId op;
  RingMatrix public_base;
  friend bool operator==(const SetupBase&, const SetupBase&) = default;
};

struct PoolReply {
  OpId op;
  RingMatrix pool;
  friend bool operator==(const PoolReply&, const PoolReply&) = default;
};

struct MatMulRequest {
  std::uint64_t session = 0;
  std::uint64_t step = 0;
  OpId op;
  RingMatrix masked_input;
  friend bool operator==(const MatMulRequest&, const MatMulRequest&) = default;
};

struct MatMulReply {
  std::uint64_t session = 0;
  std::uint64_t step = 0;
  OpId op;
  RingMatrix masked_output;
  friend bool operator==(const MatMulReply&, const MatMulReply&) = default;
};

struct OpenSession {
  std::uint64_t session = 0;
  friend bool operator==(const OpenSession&, const OpenSession&) = default;
};

struct CloseSession {
  std::uint64_t session = 0;
  friend bool operator==(const CloseSession&, const CloseSession&) = default;
};

struct ErrorReply {
  ErrorCode code = ErrorCode::kProtocol;
  std::string detail;
  friend bool operator==(const ErrorReply&, const ErrorReply&) = default;
};

using Message = std::variant<SetupBase, PoolReply, MatMulRequest, MatMulReply, OpenSession, CloseSession, ErrorReply>;

enum class Tag : std::uint8_t {
  kSetupBase = 1,
  kPoolReply = 2,
  kMatMulRequest = 3,
  kMatMulReply = 4,
  kOpenSession = 5,
  kCloseSession = 6,
  kError = 7,
};

inline Tag tag_of(const Message& m) { return static_cast<Tag>(m.index() + 1); }

inline std::string_view tag_name(Tag t) {
  switch (t) {
    case Tag::kSetupBase: return "SetupBase";
    case Tag::kPoolReply: return "PoolReply";
    case Tag::kMatMulRequest: return "MatMulRequest";
    case Tag::kMatMulReply: return "MatMulReply";
    case Tag::kOpenSession: return "OpenSession";
    case Tag::kCloseSession: return "CloseSession";
    case Tag::kError: return "Error";
  }
  return "?";
}

inline ErrorReply error_reply(const Error& e) { return ErrorReply{e.code(), e.detail()}; }

inline Bytes encode_message(const Message& msg) {
  ByteWriter body;
  body.u8(static_cast<std::uint8_t>(tag_of(msg)));
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, SetupBase>) {
          body.u32(m.op.value);
          encode_matrix(body, m.public_base);
        } else if constexpr (std::is_same_v<T, PoolReply>) {
          body.u32(m.op.value);
          encode_matrix(body, m.pool);
        } else if constexpr (std::is_same_v<T, MatMulRequest>) {
          body.u64(m.session);
          body.u64(m.step);
          body.u32(m.op.value);
          encode_matrix(body, m.masked_input);
        } else if constexpr (std::is_same_v<T, MatMulReply>) {
          body.u64(m.session);
          body.u64(m.step);
          body.u32(m.op.value);
          encode_matrix(body, m.masked_output);
        } else if constexpr (std::is_same_v<T, OpenSession> || std::is_same_v<T, CloseSession>) {
          body.u64(m.session);
        } else {
          body.u32(static_cast<std::uint32_t>(m.code));
          body.u32(static_cast<std::uint32_t>(m.detail.size()));
          body.raw(m.detail);
        }
      },
      msg);
  Bytes out = body.take();
  const auto len = static_cast<std::uint32_t>(out.size());
  const std::uint8_t prefix[4] = {static_cast<std::uint8_t>(len), static_cast<std::uint8_t>(len >> 8),
                                  static_cast<std::uint8_t>(len >> 16), static_cast<std::uint8_t>(len >> 24)};
  out.insert(out.begin(), prefix, prefix + 4);
  return out;
}

// Decodes the tag and payload that follow a frame's length prefix.
inline Message decode_body(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  const std::uint8_t tag = r.u8();
  Message out;
  switch (static_cast<Tag>(tag)) {
    case Tag::kSetupBase: {
      OpId op{r.u32()};
      out = SetupBase{op, decode_matrix(r)};
      break;
    }
    case Tag::kPoolReply: {
      OpId op{r.u32()};
      out = PoolReply{op, decode_matrix(r)};
      break;
    }
    case Tag::kMatMulRequest: {
      MatMulRequest m;
      m.session = r.u64();
      m.step = r.u64();
      m.op = OpId{r.u32()};
      m.masked_input = decode_matrix(r);
      out = std::move(m);
      break;
    }
    case Tag::kMatMulReply: {
      MatMulReply m;
      m.session = r.u64();
      m.step = r.u64();
      m.op = OpId{r.u32()};
      m.masked_output = decode_matrix(r);
      out = std::move(m);
      break;
    }
    case Tag::kOpenSession: out = OpenSession{r.u64()}; break;
    case Tag::kCloseSession: out = CloseSession{r.u64()}; break;
    case Tag::kError: {
      ErrorReply e;
      e.code = static_cast<ErrorCode>(r.u32());
      e.detail = r.str(r.u32());
      out = std::move(e);
      break;
    }
    default: fail(ErrorCode::kDecodeError, "unknown message tag " + std::to_string(tag));
  }
  if (!r.done()) fail(ErrorCode::kLengthMismatch, "trailing bytes in frame payload");
  return out;
}

inline Message decode_message(std::span<const std::uint8_t> frame) {
  ByteReader r(frame);
  const std::uint32_t len = r.u32();
  if (len != r.remaining()) {
    fail(ErrorCode::kLengthMismatch, "frame declares " + std::to_string(len) + " bytes, carries " +
                                         std::to_string(r.remaining()));
  }
  if (len == 0) fail(ErrorCode::kDecodeError, "empty frame");
  return decode_body(frame.subspan(4));
}

}  // namespace remo
