#pragma once

// Keyed pseudorandom streams with explicit domain separation. Each label
// tuple is hashed under the 256-bit seed (keyed BLAKE2b) into a ChaCha20 key,
// so identical (seed, label) pairs reproduce a stream and distinct labels give
// independent ones.

#include <sodium.h>

#include <array>
#include <cstdint>
#include <mutex>
#include <vector>

#include "remo/bytes.hpp"
#include "remo/error.hpp"

namespace remo {

enum class StreamPurpose : std::uint8_t {
  kPublicBase = 1,
  kStepMask = 2,
};

struct StreamLabel {
  StreamPurpose purpose = StreamPurpose::kStepMask;
  std::uint64_t session = 0;
  std::uint64_t step = 0;
  std::uint32_t layer = 0;
  std::uint32_t op = 0;
  std::uint32_t attempt = 0;

  friend bool operator==(const StreamLabel&, const StreamLabel&) = default;
};

namespace detail {
inline void ensure_sodium() {
  static std::once_flag once;
  std::call_once(once, [] {
    if (sodium_init() < 0) fail(ErrorCode::kProtocol, "libsodium initialisation failed");
  });
}
}  // namespace detail

class PrgKey {
 public:
  static constexpr std::size_t kSeedBytes = 32;  // kappa = 256

  PrgKey() { seed_.fill(0); }
  explicit PrgKey(const std::array<std::uint8_t, kSeedBytes>& seed) : seed_(seed) {}

  // Expands a 64-bit seed into a full key; convenient for reproducible runs.
  static PrgKey from_u64(std::uint64_t seed) {
    detail::ensure_sodium();
    std::array<std::uint8_t, 8> in{};
    for (int i = 0; i < 8; ++i) in[i] = static_cast<std::uint8_t>(seed >> (8 * i));
    std::array<std::uint8_t, kSeedBytes> out{};
    crypto_generichash(out.data(), out.size(), in.data(), in.size(),
                       reinterpret_cast<const unsigned char*>("remo-seed"), 9);
    return PrgKey(out);
  }

  static PrgKey random() {
    detail::ensure_sodium();
    std::array<std::uint8_t, kSeedBytes> s{};
    randombytes_buf(s.data(), s.size());
    return PrgKey(s);
  }

  // count uniform 64-bit words from the stream named by label.
  std::vector<std::uint64_t> words(const StreamLabel& label, std::size_t count) const {
    detail::ensure_sodium();
    ByteWriter w;
    w.u8(static_cast<std::uint8_t>(label.purpose));
    w.u64(label.session);
    w.u64(label.step);
    w.u32(label.layer);
    w.u32(label.op);
    w.u32(label.attempt);
    const Bytes& msg = w.bytes();

    std::array<std::uint8_t, crypto_stream_chacha20_KEYBYTES> subkey{};
    crypto_generichash(subkey.data(), subkey.size(), msg.data(), msg.size(), seed_.data(), seed_.size());
    std::array<std::uint8_t, crypto_stream_chacha20_NONCEBYTES> nonce{};

    std::vector<std::uint8_t> raw(count * 8);
    if (!raw.empty()) crypto_stream_chacha20(raw.data(), raw.size(), nonce.data(), subkey.data());
    sodium_memzero(subkey.data(), subkey.size());

    std::vector<std::uint64_t> out(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t v = 0;
      for (int b = 0; b < 8; ++b) v |= std::uint64_t{raw[i * 8 + b]} << (8 * b);
      out[i] = v;
    }
    return out;
  }

  const std::array<std::uint8_t, kSeedBytes>& seed() const { return seed_; }

 private:
  std::array<std::uint8_t, kSeedBytes> seed_;
};

}  // namespace remo
