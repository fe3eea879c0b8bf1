// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-GPU sidecar daemons forwarding intermediate tensors from producer to
// consumer. Intra-node transfers place payloads in a node-local shared-memory
// arena and notify the receiver of the address; inter-node transfers stream
// the same envelope protocol over a byte stream. Segments are reclaimed when
// the receiver acknowledges the read, so leaks are observable.

#pragma once

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fissim/invocation_graph.hpp"
#include "fissim/net.hpp"
#include "fissim/sim_kernel.hpp"

namespace fissim {

enum class Transport { LocalBuffer, NetworkStream };

inline const char* to_string(Transport t) {
  return t == Transport::LocalBuffer ? "local_buffer" : "network_stream";
}

struct SidecarConfig {
  int64_t arena_bytes = int64_t{1} << 30;
  // Modeled device<->host copy plus notification cost; defaults put an 8 MB
  // intra-node transfer at ~7 ms end to end.
  double local_base_ms = 0.5;
  double local_per_mb_ms = 0.8125;
  double net_base_ms = 1.0;
  double net_per_mb_ms = 0.8125;
  double send_timeout_ms = 10000;
  // Parked deliveries with no registered receiver are reclaimed after this
  // long, with a diagnostic count (receiver crashed or never came up).
  double orphan_timeout_ms = 30000;
  int64_t stream_chunk_bytes = 256 * 1024;

  double latency_ms(Transport t, int64_t bytes) const {
    double mb = static_cast<double>(bytes) / (1024.0 * 1024.0);
    if (t == Transport::LocalBuffer) return local_base_ms + local_per_mb_ms * mb;
    return net_base_ms + net_per_mb_ms * mb;
  }
};

struct ForwardEnvelope {
  std::string request_id;
  std::string ref_id;
  int64_t seq = 0;  // chunk sequence for streaming refs, 0 for single-shot
  int64_t chunk_bytes = 0;
  int64_t total_bytes = 0;  // authoritative size known by the producer
  uint64_t checksum = 0;
  Transport transport = Transport::LocalBuffer;
  std::string location;  // "node<N>:off<K>" for arena payloads
  bool final = false;
  TimeMs send_time = 0;
  int src_gpu = 0;
  int dst_gpu = 0;

  json to_json() const {
    return json{{"request_id", request_id}, {"ref_id", ref_id},   {"seq", seq},
                {"chunk_bytes", chunk_bytes}, {"total_bytes", total_bytes},
                {"checksum", checksum},      {"transport", to_string(transport)},
                {"location", location},      {"final", final},
                {"send_time", send_time},    {"src_gpu", src_gpu},
                {"dst_gpu", dst_gpu}};
  }

  static ForwardEnvelope from_json(const json& j) {
    ForwardEnvelope e;
    e.request_id = j.at("request_id").get<std::string>();
    e.ref_id = j.at("ref_id").get<std::string>();
    e.seq = j.value("seq", int64_t{0});
    e.chunk_bytes = j.value("chunk_bytes", int64_t{0});
    e.total_bytes = j.value("total_bytes", int64_t{0});
    e.checksum = j.value("checksum", uint64_t{0});
    e.transport = j.value("transport", "local_buffer") == std::string("network_stream")
                      ? Transport::NetworkStream
                      : Transport::LocalBuffer;
    e.location = j.value("location", "");
    e.final = j.value("final", false);
    e.send_time = j.value("send_time", 0.0);
    e.src_gpu = j.value("src_gpu", 0);
    e.dst_gpu = j.value("dst_gpu", 0);
    return e;
  }
};

// ---------------------------------------------------------------------------
// Node-local shared buffer arena, shm-backed so out-of-process executors can
// map the same bytes. Freed only on receiver acknowledgment.

class NodeArena {
 public:
  NodeArena(int node_id, int64_t capacity) : node_id_(node_id), capacity_(capacity) {
    char name[64];
    std::snprintf(name, sizeof(name), "/fissim-%d-n%d", static_cast<int>(::getpid()), node_id);
    shm_name_ = name;
    int fd = ::shm_open(shm_name_.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
    if (fd >= 0) {
      if (::ftruncate(fd, capacity) != 0) {
        ::close(fd);
        ::shm_unlink(shm_name_.c_str());
        fail(ErrorCode::Config, "cannot size arena shm segment");
      }
      base_ = static_cast<uint8_t*>(
          ::mmap(nullptr, capacity, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0));
      ::close(fd);
      if (base_ == MAP_FAILED) {
        base_ = nullptr;
        ::shm_unlink(shm_name_.c_str());
      }
    }
    if (!base_) {
      // No shm available; anonymous mapping keeps single-process mode working.
      shm_name_.clear();
      base_ = static_cast<uint8_t*>(
          ::mmap(nullptr, capacity, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0));
      if (base_ == MAP_FAILED) fail(ErrorCode::Config, "cannot map arena memory");
    }
    free_.emplace(0, capacity);
  }

  NodeArena(const NodeArena&) = delete;
  NodeArena& operator=(const NodeArena&) = delete;

  ~NodeArena() {
    if (base_) ::munmap(base_, capacity_);
    if (!shm_name_.empty()) ::shm_unlink(shm_name_.c_str());
  }

  int node_id() const { return node_id_; }
  const std::string& shm_name() const { return shm_name_; }
  int64_t capacity() const { return capacity_; }

  std::optional<int64_t> alloc(int64_t len) {
    int64_t need = align(std::max<int64_t>(len, 1));
    for (auto it = free_.begin(); it != free_.end(); ++it) {
      if (it->second < need) continue;
      int64_t off = it->first;
      int64_t remaining = it->second - need;
      free_.erase(it);
      if (remaining > 0) free_.emplace(off + need, remaining);
      used_.emplace(off, need);
      in_use_bytes_ += need;
      peak_bytes_ = std::max(peak_bytes_, in_use_bytes_);
      return off;
    }
    return std::nullopt;
  }

  void free_seg(int64_t offset) {
    auto it = used_.find(offset);
    if (it == used_.end()) fail(ErrorCode::Internal, "double free in arena");
    int64_t len = it->second;
    used_.erase(it);
    in_use_bytes_ -= len;
    // Coalesce with neighbors.
    auto next = free_.upper_bound(offset);
    if (next != free_.end() && offset + len == next->first) {
      len += next->second;
      next = free_.erase(next);
    }
    if (next != free_.begin()) {
      auto prev = std::prev(next);
      if (prev->first + prev->second == offset) {
        offset = prev->first;
        len += prev->second;
        free_.erase(prev);
      }
    }
    free_.emplace(offset, len);
  }

  uint8_t* data(int64_t offset) { return base_ + offset; }

  size_t segments_in_use() const { return used_.size(); }
  int64_t bytes_in_use() const { return in_use_bytes_; }
  int64_t peak_bytes() const { return peak_bytes_; }

 private:
  static int64_t align(int64_t n) { return (n + 63) & ~int64_t{63}; }

  int node_id_;
  int64_t capacity_;
  std::string shm_name_;
  uint8_t* base_ = nullptr;
  std::map<int64_t, int64_t> free_;  // offset -> len
  std::map<int64_t, int64_t> used_;
  int64_t in_use_bytes_ = 0;
  int64_t peak_bytes_ = 0;
};

// ---------------------------------------------------------------------------

struct SidecarStats {
  int64_t transfers = 0;
  int64_t bytes_forwarded = 0;
  int64_t integrity_errors = 0;
  int64_t orphan_reclaims = 0;
  double added_latency_ms = 0;  // modeled transfer latency, summed
  size_t segments_in_use = 0;
  int64_t bytes_in_use = 0;
};

// Chunk delivery callback: runs on the kernel thread, chunks arrive in seq
// order, checksum already verified, segment acknowledged after return.
using ChunkCallback =
    std::function<void(const ForwardEnvelope& env, std::vector<uint8_t> bytes)>;
using RefErrorCallback = std::function<void(const Error& err)>;
// Raw delivery: consumer reads the arena segment itself (notify-then-read)
// and must acknowledge with ack_raw() to release it.
using RawChunkCallback = std::function<void(const ForwardEnvelope& env, int64_t offset)>;

// Surface executors program against; implemented by the in-process fabric and
// by the worker-side relay in multi-process mode.
class SidecarPort {
 public:
  virtual ~SidecarPort() = default;
  virtual void register_interest(int gpu, const std::string& ref_id, ChunkCallback on_chunk,
                                 RefErrorCallback on_error = {}) = 0;
  virtual void send(const std::string& request_id, const DataRef& ref, int src_gpu, int dst_gpu,
                    std::span<const uint8_t> payload, int64_t seq, bool final_chunk) = 0;
  virtual void fail_ref(const std::string& ref_id, const Error& err) = 0;
};

class SidecarFabric : public SidecarPort {
 public:
  SidecarFabric(SimKernel& kernel, std::map<int, int> gpu_to_node, SidecarConfig config = {})
      : kernel_(kernel), gpu_to_node_(std::move(gpu_to_node)), config_(config) {
    for (const auto& [gpu, node] : gpu_to_node_) {
      if (!arenas_.count(node))
        arenas_.emplace(node, std::make_unique<NodeArena>(node, config_.arena_bytes));
    }
  }

  Transport route(int src_gpu, int dst_gpu) const {
    return node_of(src_gpu) == node_of(dst_gpu) ? Transport::LocalBuffer
                                                : Transport::NetworkStream;
  }

  int node_of(int gpu) const {
    auto it = gpu_to_node_.find(gpu);
    if (it == gpu_to_node_.end())
      fail(ErrorCode::NotFound, "gpu " + std::to_string(gpu) + " not in topology map");
    return it->second;
  }

  // Receiver side: executors register the refs they expect at dispatch time.
  void register_interest(int gpu, const std::string& ref_id, ChunkCallback on_chunk,
                         RefErrorCallback on_error = {}) override {
    node_of(gpu);  // validates
    RefState& st = refs_[ref_key(ref_id, gpu)];
    st.dst_gpu = gpu;
    st.on_chunk = std::move(on_chunk);
    st.on_error = std::move(on_error);
    st.has_interest = true;
    drain_parked(st);
  }

  // Notify-then-read interest: the consumer is handed (envelope, offset) and
  // reads the node arena itself; the segment is freed on ack_raw().
  void register_interest_raw(int gpu, const std::string& ref_id, RawChunkCallback on_chunk,
                             RefErrorCallback on_error = {}) {
    node_of(gpu);
    RefState& st = refs_[ref_key(ref_id, gpu)];
    st.dst_gpu = gpu;
    st.raw_cb = std::move(on_chunk);
    st.on_error = std::move(on_error);
    st.has_interest = true;
    drain_parked(st);
  }

  void ack_raw(int node, int64_t offset) {
    arenas_.at(node)->free_seg(offset);
    drain_backlog(node);
  }

  void cancel_interest(const std::string& ref_id, int gpu) {
    auto it = refs_.find(ref_key(ref_id, gpu));
    if (it == refs_.end()) return;
    release_parked(it->second);
    refs_.erase(it);
  }

  // Producer side; must run on the kernel thread. Payload bytes are placed in
  // the destination node's arena immediately ("write to shared memory"), the
  // notification envelope is delivered after the modeled transfer latency.
  void send(const std::string& request_id, const DataRef& ref, int src_gpu, int dst_gpu,
            std::span<const uint8_t> payload, int64_t seq, bool final_chunk) override {
    if (!ref.streaming && static_cast<int64_t>(payload.size()) != ref.desc.total_bytes())
      fail(ErrorCode::Protocol, "payload length " + std::to_string(payload.size()) +
                                    " does not match descriptor total_bytes " +
                                    std::to_string(ref.desc.total_bytes()) + " for ref " + ref.ref_id);
    Transport t = route(src_gpu, dst_gpu);
    ForwardEnvelope env;
    env.request_id = request_id;
    env.ref_id = ref.ref_id;
    env.seq = seq;
    env.chunk_bytes = static_cast<int64_t>(payload.size());
    env.total_bytes = ref.desc.total_bytes();
    env.checksum = checksum64(payload.data(), payload.size());
    env.transport = t;
    env.final = final_chunk;
    env.send_time = kernel_.now();
    env.src_gpu = src_gpu;
    env.dst_gpu = dst_gpu;

    if (t == Transport::LocalBuffer) {
      // Write the payload into the node arena now, notify the receiver of its
      // address after the modeled copy latency.
      PendingSend ps;
      ps.env = std::move(env);
      ps.bytes.assign(payload.begin(), payload.end());
      ps.deadline = kernel_.now() + config_.send_timeout_ms;
      if (!try_place_local(ps)) {
        // Arena full: sender blocks (bounded). Queued sends drain on free.
        int node = node_of(dst_gpu);
        backlog_[node].push_back(std::move(ps));
        schedule_timeout_check(node);
      }
      return;
    }
    // Network stream: envelope and payload travel together through the frame
    // codec; the receiving node stages the bytes in its own arena on arrival.
    Frame frame = envelope_frame(env);
    frame.payload.assign(payload.begin(), payload.end());
    auto encoded = encode_frame(frame);
    double latency = config_.latency_ms(t, env.chunk_bytes);
    added_latency_ms_ += latency;
    kernel_.schedule(kernel_.now() + latency, "sidecar.net_deliver", [this, encoded] {
      handle_network_frame(decode_frame(encoded));
    });
  }

  // Entry point for envelopes arriving over a real byte stream (loopback or
  // cross-process); identical handling to the in-memory network path.
  void handle_network_frame(const Frame& frame) {
    ForwardEnvelope env = ForwardEnvelope::from_json(frame.header.at("envelope"));
    PendingSend ps;
    ps.env = std::move(env);
    ps.bytes = frame.payload;
    ps.deadline = kernel_.now() + config_.send_timeout_ms;
    if (ps.env.chunk_bytes != static_cast<int64_t>(ps.bytes.size()))
      fail(ErrorCode::Protocol, "network envelope chunk_bytes mismatch for ref " + ps.env.ref_id);
    if (!stage_network(ps)) {
      int node = node_of(ps.env.dst_gpu);
      backlog_[node].push_back(std::move(ps));
      schedule_timeout_check(node);
    }
  }

  // Whole single-shot payload as one envelope.
  void send_payload(const std::string& request_id, const DataRef& ref, int src_gpu, int dst_gpu,
                    std::span<const uint8_t> payload) {
    send(request_id, ref, src_gpu, dst_gpu, payload, 0, true);
  }

  // Producer failed mid-stream: notify every registered consumer.
  void fail_ref(const std::string& ref_id, const Error& err) override {
    std::string prefix = ref_id + "@";
    for (auto& [key, st] : refs_) {
      if (key.compare(0, prefix.size(), prefix) != 0) continue;
      st.failed = std::make_shared<Error>(err);
      if (st.on_error) st.on_error(err);
    }
  }

  // Frees everything still owned by a request (terminal cleanup and the
  // orphan path when a receiver disappears mid-transfer).
  void purge_request(const std::string& request_id) {
    for (auto it = refs_.begin(); it != refs_.end();) {
      if (it->second.request_id == request_id || prefix_of(request_id, it->first)) {
        release_parked(it->second);
        it = refs_.erase(it);
      } else {
        ++it;
      }
    }
    for (auto& [node, q] : backlog_) {
      for (auto it = q.begin(); it != q.end();) {
        if (it->env.request_id == request_id)
          it = q.erase(it);
        else
          ++it;
      }
    }
  }

  SidecarStats stats() const {
    SidecarStats s;
    s.transfers = transfers_;
    s.bytes_forwarded = bytes_forwarded_;
    s.integrity_errors = integrity_errors_;
    s.orphan_reclaims = orphan_reclaims_;
    s.added_latency_ms = added_latency_ms_;
    for (const auto& [node, arena] : arenas_) {
      s.segments_in_use += arena->segments_in_use();
      s.bytes_in_use += arena->bytes_in_use();
    }
    return s;
  }

  const SidecarConfig& config() const { return config_; }

  NodeArena& arena(int node) { return *arenas_.at(node); }

  void set_failure_handler(std::function<void(const std::string& request_id,
                                              const std::string& ref_id, const Error&)> fn) {
    failure_handler_ = std::move(fn);
  }

  // Encode/decode helpers shared with the cross-process path: every envelope
  // round-trips the real frame codec even when delivered in-memory.
  static Frame envelope_frame(const ForwardEnvelope& env) {
    return Frame{json{{"type", "sidecar_envelope"}, {"envelope", env.to_json()}}, {}};
  }

 private:
  struct RefState {
    std::string request_id;
    int dst_gpu = -1;
    bool has_interest = false;
    ChunkCallback on_chunk;
    RawChunkCallback raw_cb;
    RefErrorCallback on_error;
    int64_t next_seq = 0;
    // seq -> (envelope, arena offset) parked until in-order delivery or
    // interest registration.
    std::map<int64_t, std::pair<ForwardEnvelope, int64_t>> parked;
    std::shared_ptr<Error> failed;
  };

  struct PendingSend {
    ForwardEnvelope env;
    std::vector<uint8_t> bytes;
    TimeMs deadline = 0;
  };

  static std::string ref_key(const std::string& ref_id, int gpu) {
    return ref_id + "@" + std::to_string(gpu);
  }

  static bool prefix_of(const std::string& req, const std::string& ref_id) {
    return ref_id.size() > req.size() && ref_id.compare(0, req.size(), req) == 0 &&
           ref_id[req.size()] == '/';
  }

  // Local transfer: payload into the destination arena now, notification
  // envelope after the modeled latency. The envelope round-trips the real
  // frame codec even on this in-memory hop.
  bool try_place_local(PendingSend& ps) {
    int node = node_of(ps.env.dst_gpu);
    NodeArena& arena = *arenas_.at(node);
    auto off = arena.alloc(std::max<int64_t>(ps.env.chunk_bytes, 1));
    if (!off) return false;
    if (!ps.bytes.empty()) std::memcpy(arena.data(*off), ps.bytes.data(), ps.bytes.size());
    ps.env.location = "node" + std::to_string(node) + ":off" + std::to_string(*off);
    double latency = config_.latency_ms(ps.env.transport, ps.env.chunk_bytes);
    added_latency_ms_ += latency;
    Frame frame = envelope_frame(ps.env);
    auto encoded = encode_frame(frame);
    int64_t offset = *off;
    kernel_.schedule(kernel_.now() + latency, "sidecar.deliver", [this, encoded, offset] {
      Frame f = decode_frame(encoded);
      ForwardEnvelope env = ForwardEnvelope::from_json(f.header.at("envelope"));
      deliver(env, offset);
    });
    return true;
  }

  // Network arrival: stage bytes in the receiving node's arena, deliver
  // immediately once staged.
  bool stage_network(PendingSend& ps) {
    int node = node_of(ps.env.dst_gpu);
    NodeArena& arena = *arenas_.at(node);
    auto off = arena.alloc(std::max<int64_t>(ps.env.chunk_bytes, 1));
    if (!off) return false;
    if (!ps.bytes.empty()) std::memcpy(arena.data(*off), ps.bytes.data(), ps.bytes.size());
    ps.env.location = "node" + std::to_string(node) + ":off" + std::to_string(*off);
    deliver(ps.env, *off);
    return true;
  }

  void deliver(const ForwardEnvelope& env, int64_t offset) {
    std::string key = ref_key(env.ref_id, env.dst_gpu);
    RefState& st = refs_[key];
    if (st.request_id.empty()) st.request_id = env.request_id;
    if (st.failed) {
      arenas_.at(node_of(env.dst_gpu))->free_seg(offset);
      return;
    }
    st.parked.emplace(env.seq, std::make_pair(env, offset));
    if (st.has_interest) {
      drain_parked(st);
      return;
    }
    // No receiver yet: reclaim after the orphan timeout if nobody shows up.
    int64_t seq = env.seq;
    kernel_.schedule(kernel_.now() + config_.orphan_timeout_ms, "sidecar.orphan",
                     [this, key, seq] {
                       auto it = refs_.find(key);
                       if (it == refs_.end() || it->second.has_interest) return;
                       auto pit = it->second.parked.find(seq);
                       if (pit == it->second.parked.end()) return;
                       int node = node_of(pit->second.first.dst_gpu);
                       arenas_.at(node)->free_seg(pit->second.second);
                       it->second.parked.erase(pit);
                       ++orphan_reclaims_;
                       drain_backlog(node);
                     });
  }

  void drain_parked(RefState& st) {
    while (true) {
      auto it = st.parked.find(st.next_seq);
      if (it == st.parked.end()) break;
      ForwardEnvelope env = it->second.first;
      int64_t offset = it->second.second;
      st.parked.erase(it);
      if (st.raw_cb) {
        // Raw consumer verifies and acknowledges on its own.
        ++transfers_;
        bytes_forwarded_ += env.chunk_bytes;
        ++st.next_seq;
        st.raw_cb(env, offset);
        continue;
      }
      NodeArena& arena = *arenas_.at(node_of(env.dst_gpu));
      std::vector<uint8_t> bytes(static_cast<size_t>(env.chunk_bytes));
      if (env.chunk_bytes > 0) std::memcpy(bytes.data(), arena.data(offset), bytes.size());
      uint64_t sum = checksum64(bytes.data(), bytes.size());
      // Receiver acknowledges the read; segment is reclaimed either way.
      arena.free_seg(offset);
      drain_backlog(arena.node_id());
      if (sum != env.checksum) {
        ++integrity_errors_;
        Error err(ErrorCode::Integrity, "checksum mismatch on ref " + env.ref_id + " seq " +
                                            std::to_string(env.seq));
        st.failed = std::make_shared<Error>(err);
        if (st.on_error) st.on_error(err);
        if (failure_handler_) failure_handler_(env.request_id, env.ref_id, err);
        return;
      }
      ++transfers_;
      bytes_forwarded_ += env.chunk_bytes;
      ++st.next_seq;
      if (st.on_chunk) st.on_chunk(env, std::move(bytes));
    }
  }

  void release_parked(RefState& st) {
    for (auto& [seq, pair] : st.parked)
      arenas_.at(node_of(pair.first.dst_gpu))->free_seg(pair.second);
    st.parked.clear();
  }

  void drain_backlog(int node) {
    auto it = backlog_.find(node);
    if (it == backlog_.end()) return;
    auto& q = it->second;
    while (!q.empty()) {
      auto& front = q.front();
      bool placed = front.env.transport == Transport::LocalBuffer ? try_place_local(front)
                                                                  : stage_network(front);
      if (!placed) break;
      q.pop_front();
    }
  }

  void schedule_timeout_check(int node) {
    kernel_.schedule(kernel_.now() + config_.send_timeout_ms, "sidecar.timeout", [this, node] {
      auto it = backlog_.find(node);
      if (it == backlog_.end()) return;
      TimeMs now = kernel_.now();
      auto& q = it->second;
      for (auto qit = q.begin(); qit != q.end();) {
        if (qit->deadline <= now) {
          Error err(ErrorCode::Timeout, "sidecar send timed out under backpressure for ref " +
                                            qit->env.ref_id);
          if (failure_handler_) failure_handler_(qit->env.request_id, qit->env.ref_id, err);
          fail_ref(qit->env.ref_id, err);
          qit = q.erase(qit);
        } else {
          ++qit;
        }
      }
    });
  }

  SimKernel& kernel_;
  std::map<int, int> gpu_to_node_;
  SidecarConfig config_;
  std::map<int, std::unique_ptr<NodeArena>> arenas_;
  std::map<std::string, RefState> refs_;
  std::map<int, std::deque<PendingSend>> backlog_;
  std::function<void(const std::string&, const std::string&, const Error&)> failure_handler_;
  int64_t transfers_ = 0;
  int64_t bytes_forwarded_ = 0;
  int64_t integrity_errors_ = 0;
  int64_t orphan_reclaims_ = 0;
  double added_latency_ms_ = 0;
};

}  // namespace fissim
