#pragma once

// TCP transport and provider server. One session per connection, frames as
// in wire.hpp, a thread per connection.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <list>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "remo/enclave.hpp"
#include "remo/provider.hpp"
#include "remo/wire.hpp"

namespace remo {

inline constexpr int kDefaultTimeoutMs = 30000;

namespace detail {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { reset(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void set_timeout(int fd, int timeout_ms) {
  timeval tv{timeout_ms / 1000, (timeout_ms % 1000) * 1000};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

inline void send_all(int fd, std::span<const std::uint8_t> data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) fail(ErrorCode::kTransportClosed, std::string("send failed: ") + std::strerror(errno));
    sent += static_cast<std::size_t>(n);
  }
}

// false on clean EOF before the first byte.
inline bool recv_all(int fd, std::uint8_t* out, std::size_t len) {
  std::size_t got = 0;
  while (got < len) {
    const ssize_t n = ::recv(fd, out + got, len - got, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n == 0 && got == 0) return false;
    if (n == 0) fail(ErrorCode::kTransportClosed, "peer closed mid-frame");
    if (n < 0) {
      fail(ErrorCode::kTransportClosed, (errno == EAGAIN || errno == EWOULDBLOCK)
                                            ? std::string("request timed out")
                                            : std::string("recv failed: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(n);
  }
  return true;
}

// Whole frame including its length prefix; nullopt on clean EOF.
inline std::optional<Bytes> read_frame(int fd) {
  std::uint8_t head[4];
  if (!recv_all(fd, head, 4)) return std::nullopt;
  const std::uint32_t len = std::uint32_t{head[0]} | std::uint32_t{head[1]} << 8 | std::uint32_t{head[2]} << 16 |
                            std::uint32_t{head[3]} << 24;
  if (len == 0 || len > kMaxFrameBytes) fail(ErrorCode::kDecodeError, "frame length " + std::to_string(len));
  Bytes frame(4 + std::size_t{len});
  std::memcpy(frame.data(), head, 4);
  if (!recv_all(fd, frame.data() + 4, len)) fail(ErrorCode::kTransportClosed, "peer closed mid-frame");
  return frame;
}

}  // namespace detail

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = kDefaultPort;
};

class TcpTransport final : public Transport {
 public:
  TcpTransport(const Endpoint& ep, int timeout_ms = kDefaultTimeoutMs) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(ep.port);
    if (::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res) != 0 || res == nullptr) {
      fail(ErrorCode::kTransportClosed, "cannot resolve " + ep.host);
    }
    for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
      detail::Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
      if (!s.valid()) continue;
      if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
        sock_ = std::move(s);
        break;
      }
    }
    ::freeaddrinfo(res);
    if (!sock_.valid()) fail(ErrorCode::kTransportClosed, "cannot connect to " + ep.host + ":" + port);
    detail::set_timeout(sock_.fd(), timeout_ms);
  }

  Message exchange(const Message& request) override {
    detail::send_all(sock_.fd(), encode_message(request));
    auto frame = detail::read_frame(sock_.fd());
    if (!frame) fail(ErrorCode::kTransportClosed, "provider closed the connection");
    return decode_message(*frame);
  }

 private:
  detail::Socket sock_;
};

class TcpServer {
 public:
  TcpServer(Provider& provider, Endpoint ep, int timeout_ms = kDefaultTimeoutMs)
      : provider_(provider), timeout_ms_(timeout_ms) {
    listener_ = detail::Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listener_.valid()) fail(ErrorCode::kBindFailure, "socket() failed");
    int one = 1;
    ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(ep.port);
    if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
      fail(ErrorCode::kBindFailure, "bad IPv4 address " + ep.host);
    }
    if (::bind(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listener_.fd(), 64) != 0) {
      fail(ErrorCode::kBindFailure, ep.host + ":" + std::to_string(ep.port) + ": " + std::strerror(errno));
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    endpoint_ = Endpoint{ep.host, ntohs(addr.sin_port)};
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;
  ~TcpServer() { stop(); }

  const Endpoint& endpoint() const { return endpoint_; }

  void stop() {
    if (stopping_.exchange(true)) return;
    if (acceptor_.joinable()) acceptor_.join();
    listener_.reset();
    std::list<Connection> conns;
    {
      std::lock_guard lock(mu_);
      for (auto& c : connections_) ::shutdown(c.sock.fd(), SHUT_RDWR);
      conns.splice(conns.end(), connections_);
    }
    for (auto& c : conns)
      if (c.worker.joinable()) c.worker.join();
  }

  std::size_t connections_served() const { return served_.load(); }

 private:
  struct Connection {
    detail::Socket sock;
    std::thread worker;
    std::atomic<bool> done{false};
  };

  // Joins and closes connections whose worker has finished.
  void reap() {
    std::lock_guard lock(mu_);
    for (auto it = connections_.begin(); it != connections_.end();) {
      if (it->done.load()) {
        it->worker.join();
        it = connections_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void accept_loop() {
    while (!stopping_.load()) {
      reap();
      pollfd pfd{listener_.fd(), POLLIN, 0};
      if (::poll(&pfd, 1, 50) <= 0) continue;
      detail::Socket client(::accept(listener_.fd(), nullptr, nullptr));
      if (!client.valid()) continue;
      detail::set_timeout(client.fd(), timeout_ms_);
      std::lock_guard lock(mu_);
      auto& conn = connections_.emplace_back();
      conn.sock = std::move(client);
      conn.worker = std::thread([this, &conn] {
        serve_connection(conn.sock.fd());
        conn.done.store(true);
      });
      ++served_;
    }
  }

  void serve_connection(int fd) {
    std::optional<std::uint64_t> session;
    bool closed = false;
    try {
      while (!stopping_.load()) {
        std::optional<Bytes> frame;
        try {
          frame = detail::read_frame(fd);
        } catch (const Error& e) {
          if (e.code() == ErrorCode::kDecodeError) detail::send_all(fd, encode_message(error_reply(e)));
          break;
        }
        if (!frame) break;

        Message request;
        try {
          request = decode_message(*frame);
        } catch (const Error& e) {
          detail::send_all(fd, encode_message(error_reply(e)));
          break;
        }
        if (auto violation = session_violation(request, session, closed)) {
          detail::send_all(fd, encode_message(ErrorReply{ErrorCode::kProtocol, *violation}));
          break;
        }
        const Message reply = provider_.handle(request);
        if (auto* open = std::get_if<OpenSession>(&reply)) session = open->session;
        if (std::holds_alternative<CloseSession>(reply)) closed = true;
        detail::send_all(fd, encode_message(reply));
      }
    } catch (const Error&) {
      // peer vanished or timed out; drop the connection
    }
    if (session && !closed) provider_.handle(CloseSession{*session});
    ::shutdown(fd, SHUT_RDWR);
  }

  static std::optional<std::string> session_violation(const Message& m, const std::optional<std::uint64_t>& session,
                                                      bool closed) {
    if (auto* open = std::get_if<OpenSession>(&m)) {
      if (session) return "one session per connection";
      (void)open;
    } else if (auto* req = std::get_if<MatMulRequest>(&m)) {
      if (!session || closed || req->session != *session) return "request outside this connection's session";
    } else if (auto* close = std::get_if<CloseSession>(&m)) {
      if (!session || closed || close->session != *session) return "closing a session this connection does not own";
    }
    return std::nullopt;
  }

  Provider& provider_;
  int timeout_ms_;
  detail::Socket listener_;
  Endpoint endpoint_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::size_t> served_{0};
  std::thread acceptor_;
  std::mutex mu_;
  std::list<Connection> connections_;
};

}  // namespace remo
