// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Length-prefixed frame codec and a small POSIX TCP wrapper. Every hop that
// crosses a component boundary speaks frames: [u32 header_len][header JSON]
// [u32 payload_len][payload bytes], little-endian lengths. In-process links
// pass the same encoded bytes through memory; sockets carry them across
// processes and nodes.

#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "fissim/common.hpp"

namespace fissim {

struct Frame {
  json header;
  std::vector<uint8_t> payload;
};

inline void append_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 24));
}

inline uint32_t read_u32(const uint8_t* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

inline std::vector<uint8_t> encode_frame(const Frame& f) {
  std::string header = f.header.dump();
  std::vector<uint8_t> out;
  out.reserve(8 + header.size() + f.payload.size());
  append_u32(out, static_cast<uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  append_u32(out, static_cast<uint32_t>(f.payload.size()));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

// Incremental decoder; feed() bytes as they arrive, next() pops whole frames.
class FrameDecoder {
 public:
  void feed(const uint8_t* data, size_t len) { buf_.insert(buf_.end(), data, data + len); }

  bool next(Frame& out) {
    if (buf_.size() < 4) return false;
    uint32_t hlen = read_u32(buf_.data());
    if (hlen > kMaxHeader) fail(ErrorCode::Protocol, "frame header too large");
    if (buf_.size() < 4 + hlen + 4) return false;
    uint32_t plen = read_u32(buf_.data() + 4 + hlen);
    size_t total = 4 + size_t(hlen) + 4 + size_t(plen);
    if (buf_.size() < total) return false;
    try {
      out.header = json::parse(buf_.begin() + 4, buf_.begin() + 4 + hlen);
    } catch (const std::exception& e) {
      fail(ErrorCode::Protocol, std::string("bad frame header: ") + e.what());
    }
    out.payload.assign(buf_.begin() + 4 + hlen + 4, buf_.begin() + total);
    buf_.erase(buf_.begin(), buf_.begin() + total);
    return true;
  }

 private:
  static constexpr uint32_t kMaxHeader = 16 * 1024 * 1024;
  std::vector<uint8_t> buf_;
};

// Decode a single frame from a complete buffer (in-process links).
inline Frame decode_frame(const std::vector<uint8_t>& bytes) {
  FrameDecoder d;
  d.feed(bytes.data(), bytes.size());
  Frame f;
  if (!d.next(f)) fail(ErrorCode::Protocol, "truncated frame");
  return f;
}

// ---------------------------------------------------------------------------
// POSIX TCP

class TcpSocket {
 public:
  TcpSocket() = default;
  explicit TcpSocket(int fd) : fd_(fd) {}
  TcpSocket(TcpSocket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  TcpSocket& operator=(TcpSocket&& o) noexcept {
    close_fd();
    fd_ = o.fd_;
    o.fd_ = -1;
    return *this;
  }
  TcpSocket(const TcpSocket&) = delete;
  TcpSocket& operator=(const TcpSocket&) = delete;
  ~TcpSocket() { close_fd(); }

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }

  void send_all(const uint8_t* data, size_t len) {
    size_t sent = 0;
    while (sent < len) {
      ssize_t n = ::send(fd_, data + sent, len - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        fail(ErrorCode::Connection, std::string("send failed: ") + std::strerror(errno));
      }
      sent += static_cast<size_t>(n);
    }
  }

  void send_frame(const Frame& f) {
    auto bytes = encode_frame(f);
    send_all(bytes.data(), bytes.size());
  }

  // Returns bytes read, 0 on orderly shutdown.
  size_t recv_some(uint8_t* out, size_t cap) {
    for (;;) {
      ssize_t n = ::recv(fd_, out, cap, 0);
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == ECONNRESET) return 0;
        fail(ErrorCode::Connection, std::string("recv failed: ") + std::strerror(errno));
      }
      return static_cast<size_t>(n);
    }
  }

  void shutdown_both() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void close_fd() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
};

inline TcpSocket tcp_connect(const std::string& host, int port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) fail(ErrorCode::Connection, "socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    fail(ErrorCode::Connection, "bad host address: " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    int e = errno;
    ::close(fd);
    fail(ErrorCode::Connection, "connect to " + host + ":" + std::to_string(port) +
                                    " failed: " + std::strerror(e));
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return TcpSocket(fd);
}

class TcpListener {
 public:
  // port 0 picks an ephemeral port; bound_port() reports it.
  explicit TcpListener(int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) fail(ErrorCode::Connection, "socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      int e = errno;
      ::close(fd_);
      fd_ = -1;
      fail(ErrorCode::Connection, "bind to port " + std::to_string(port) + " failed: " + std::strerror(e));
    }
    if (::listen(fd_, 64) != 0) {
      ::close(fd_);
      fd_ = -1;
      fail(ErrorCode::Connection, "listen failed");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  ~TcpListener() { close_fd(); }

  int bound_port() const { return port_; }

  TcpSocket accept() {
    int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) fail(ErrorCode::Connection, std::string("accept failed: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpSocket(fd);
  }

  void close_fd() {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
  int port_ = 0;
};

// Reads frames off a socket on a dedicated thread and hands them to a
// callback; the callback typically posts into a SimKernel.
class FrameReader {
 public:
  FrameReader(TcpSocket& sock, std::function<void(Frame)> on_frame,
              std::function<void()> on_close = {})
      : sock_(sock), on_frame_(std::move(on_frame)), on_close_(std::move(on_close)) {
    thread_ = std::thread([this] { run(); });
  }

  ~FrameReader() { join(); }

  void join() {
    if (thread_.joinable()) thread_.join();
  }

 private:
  void run() {
    std::vector<uint8_t> buf(64 * 1024);
    FrameDecoder dec;
    try {
      for (;;) {
        size_t n = sock_.recv_some(buf.data(), buf.size());
        if (n == 0) break;
        dec.feed(buf.data(), n);
        Frame f;
        while (dec.next(f)) on_frame_(std::move(f));
      }
    } catch (...) {
      // Falls through to on_close; the owner decides how to surface it.
    }
    if (on_close_) on_close_();
  }

  TcpSocket& sock_;
  std::function<void(Frame)> on_frame_;
  std::function<void()> on_close_;
  std::thread thread_;
};

}  // namespace fissim
