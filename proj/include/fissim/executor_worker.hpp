// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-process executor mode: replicas run as child processes speaking the
// same frame protocols over TCP. Dispatcher frames cross the socket verbatim;
// intra-node tensor payloads stay in the parent's shared-memory arenas and the
// child reads them directly from the mapped segment after the envelope
// notification (notify-then-read), acknowledging to release.

#pragma once

#include <sys/wait.h>

#include "fissim/control_plane.hpp"

namespace fissim {

namespace worker_detail {

inline json replica_spec_to_json(const ReplicaSpec& spec) {
  json stages = json::object();
  for (const auto& [name, p] : spec.stage_profiles) stages[name] = p.to_json();
  return json{{"replica_id", spec.replica_id},
              {"task_digest", spec.task_digest},
              {"unit", spec.unit.to_json()},
              {"profile", spec.profile.to_json()},
              {"profile_name", spec.profile.name},
              {"stage_profiles", stages},
              {"shapes", spec.shapes.to_json()},
              {"gpus", spec.gpus},
              {"tp", spec.tp},
              {"activation_budget_per_gpu", spec.activation_budget_per_gpu}};
}

inline ReplicaSpec replica_spec_from_json(const json& j) {
  ReplicaSpec spec;
  spec.replica_id = j.at("replica_id").get<std::string>();
  spec.task_digest = j.at("task_digest").get<std::string>();
  spec.unit = UnitTaskSpec::from_json(j.at("unit"));
  spec.profile = ComponentProfile::from_json(j.value("profile_name", "worker"), j.at("profile"));
  for (const auto& [name, p] : j.value("stage_profiles", json::object()).items())
    spec.stage_profiles[name] = ComponentProfile::from_json(name, p);
  spec.shapes = ShapeRules::from_json(j.at("shapes"));
  spec.gpus = j.at("gpus").get<std::vector<int>>();
  spec.tp = j.value("tp", 1);
  spec.activation_budget_per_gpu = j.value("activation_budget_per_gpu", int64_t{1} << 62);
  return spec;
}

}  // namespace worker_detail

// -----------------------------------------------------------------------------
// Parent side

class MultiProcessHost : public ExecutorHost {
 public:
  MultiProcessHost(const ExecutorEnv& env, const ReplicaSpec& spec, const std::string& worker_exe)
      : env_(env), spec_(spec) {
    TcpListener listener(0);
    spawn_child(worker_exe, listener.bound_port());
    sock_ = listener.accept();

    // Handshake: replica spec plus the shared arena map and topology.
    SidecarFabric* fabric = dynamic_cast<SidecarFabric*>(env_.sidecar);
    if (!fabric) fail(ErrorCode::Config, "multi-process executors require the in-process fabric");
    fabric_ = fabric;
    json arenas = json::object();
    json topology = json::object();
    std::set<int> nodes;
    for (const auto& [gpu, node] : topology_map()) {
      topology[std::to_string(gpu)] = node;
      nodes.insert(node);
    }
    for (int node : nodes) {
      const NodeArena& arena = fabric_->arena(node);
      arenas[std::to_string(node)] =
          json{{"shm_name", arena.shm_name()}, {"capacity", arena.capacity()}};
    }
    Frame hello{json{{"type", "spawn"},
                     {"spec", worker_detail::replica_spec_to_json(spec_)},
                     {"arenas", arenas},
                     {"topology", topology}},
                {}};
    {
      std::lock_guard lk(send_m_);
      sock_.send_frame(hello);
    }
    reader_ = std::make_unique<FrameReader>(
        sock_, [this](Frame f) { on_child_frame(std::move(f)); }, [this] { child_gone_ = true; });
  }

  ~MultiProcessHost() override {
    try {
      std::lock_guard lk(send_m_);
      if (sock_.valid()) sock_.send_frame(Frame{json{{"type", "shutdown"}}, {}});
    } catch (...) {
    }
    sock_.shutdown_both();
    if (reader_) reader_->join();
    sock_.close_fd();
    if (child_pid_ > 0) {
      int status = 0;
      ::waitpid(child_pid_, &status, 0);
    }
  }

  void deliver(const Frame& f) override {
    std::lock_guard lk(send_m_);
    if (sock_.valid() && !child_gone_) sock_.send_frame(f);
  }

 private:
  std::map<int, int> topology_map() const {
    std::map<int, int> topo;
    for (int g : spec_.gpus) topo[g] = fabric_ ? fabric_->node_of(g) : 0;
    // The child may also receive inputs staged on its home node arena from
    // other nodes; the home node mapping is what it needs.
    return topo;
  }

  void spawn_child(const std::string& worker_exe, int port) {
    child_pid_ = ::fork();
    if (child_pid_ < 0) fail(ErrorCode::Internal, "fork failed");
    if (child_pid_ == 0) {
      std::string port_s = std::to_string(port);
      ::execl(worker_exe.c_str(), worker_exe.c_str(), "executor-worker", "--host", "127.0.0.1",
              "--port", port_s.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
  }

  void on_child_frame(Frame f) {
    const std::string type = f.header.value("type", "");
    if (type == "status" || type == "chunk") {
      env_.kernel->post("worker.result", [this, f = std::move(f)] { env_.to_dispatcher(f); });
      return;
    }
    if (type == "sidecar_send") {
      env_.kernel->post("worker.sidecar_send", [this, f = std::move(f)] {
        DataRef ref = DataRef::from_json(f.header.at("ref"));
        fabric_->send(f.header.value("request_id", ""), ref, f.header.value("src_gpu", 0),
                      f.header.value("dst_gpu", 0),
                      std::span<const uint8_t>(f.payload.data(), f.payload.size()),
                      f.header.value("seq", int64_t{0}), f.header.value("final", false));
      });
      return;
    }
    if (type == "sidecar_interest") {
      std::string ref_id = f.header.value("ref_id", "");
      int gpu = f.header.value("gpu", 0);
      env_.kernel->post("worker.interest", [this, ref_id, gpu] {
        fabric_->register_interest_raw(
            gpu, ref_id,
            [this, ref_id](const ForwardEnvelope& env, int64_t offset) {
              // Notify the child of the address; it reads the mapped arena.
              Frame note{json{{"type", "sidecar_envelope"},
                              {"envelope", env.to_json()},
                              {"offset", offset},
                              {"node", fabric_->node_of(env.dst_gpu)}},
                         {}};
              deliver(note);
            },
            [this, ref_id](const Error& e) {
              deliver(Frame{json{{"type", "sidecar_error"},
                                 {"ref_id", ref_id},
                                 {"code", to_string(e.code())},
                                 {"message", e.what()}},
                            {}});
            });
      });
      return;
    }
    if (type == "sidecar_ack") {
      int node = f.header.value("node", 0);
      int64_t offset = f.header.value("offset", int64_t{0});
      env_.kernel->post("worker.ack", [this, node, offset] { fabric_->ack_raw(node, offset); });
      return;
    }
    if (type == "sidecar_fail") {
      std::string ref_id = f.header.value("ref_id", "");
      std::string msg = f.header.value("message", "worker failure");
      env_.kernel->post("worker.fail",
                        [this, ref_id, msg] { fabric_->fail_ref(ref_id, Error(ErrorCode::Internal, msg)); });
      return;
    }
  }

  ExecutorEnv env_;
  ReplicaSpec spec_;
  SidecarFabric* fabric_ = nullptr;
  pid_t child_pid_ = -1;
  TcpSocket sock_;
  std::mutex send_m_;
  std::unique_ptr<FrameReader> reader_;
  std::atomic<bool> child_gone_{false};
};

inline ExecutorHostFactory multiprocess_host_factory(std::string worker_exe) {
  return [worker_exe](const ExecutorEnv& env, const ReplicaSpec& spec) {
    return std::unique_ptr<ExecutorHost>(new MultiProcessHost(env, spec, worker_exe));
  };
}

// -----------------------------------------------------------------------------
// Child side

namespace worker_detail {

// Maps the parent's shm arenas read/write.
class MappedArena {
 public:
  MappedArena(const std::string& shm_name, int64_t capacity) : capacity_(capacity) {
    int fd = ::shm_open(shm_name.c_str(), O_RDWR, 0600);
    if (fd < 0) fail(ErrorCode::Config, "worker cannot open arena shm " + shm_name);
    base_ = static_cast<uint8_t*>(::mmap(nullptr, capacity, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0));
    ::close(fd);
    if (base_ == MAP_FAILED) fail(ErrorCode::Config, "worker cannot map arena shm " + shm_name);
  }
  ~MappedArena() {
    if (base_) ::munmap(base_, capacity_);
  }
  const uint8_t* data(int64_t offset) const { return base_ + offset; }

 private:
  uint8_t* base_ = nullptr;
  int64_t capacity_;
};

// SidecarPort relay inside the worker: interests and sends become frames to
// the parent; envelope notifications read the mapped arena directly.
class WorkerSidecar : public SidecarPort {
 public:
  WorkerSidecar(TcpSocket& sock, std::mutex& send_m) : sock_(sock), send_m_(send_m) {}

  void add_arena(int node, std::unique_ptr<MappedArena> arena) {
    arenas_[node] = std::move(arena);
  }

  void register_interest(int gpu, const std::string& ref_id, ChunkCallback on_chunk,
                         RefErrorCallback on_error = {}) override {
    interests_[ref_id] = {std::move(on_chunk), std::move(on_error)};
    send_frame(Frame{json{{"type", "sidecar_interest"}, {"ref_id", ref_id}, {"gpu", gpu}}, {}});
  }

  void send(const std::string& request_id, const DataRef& ref, int src_gpu, int dst_gpu,
            std::span<const uint8_t> payload, int64_t seq, bool final_chunk) override {
    Frame f{json{{"type", "sidecar_send"},
                 {"request_id", request_id},
                 {"ref", ref.to_json()},
                 {"src_gpu", src_gpu},
                 {"dst_gpu", dst_gpu},
                 {"seq", seq},
                 {"final", final_chunk}},
            std::vector<uint8_t>(payload.begin(), payload.end())};
    send_frame(f);
  }

  void fail_ref(const std::string& ref_id, const Error& err) override {
    send_frame(Frame{json{{"type", "sidecar_fail"}, {"ref_id", ref_id}, {"message", err.what()}}, {}});
  }

  // Parent envelope notification: read the shared segment, verify, deliver,
  // acknowledge.
  void on_envelope(const Frame& f) {
    ForwardEnvelope env = ForwardEnvelope::from_json(f.header.at("envelope"));
    int node = f.header.value("node", 0);
    int64_t offset = f.header.value("offset", int64_t{0});
    auto it = interests_.find(env.ref_id);
    std::vector<uint8_t> bytes(static_cast<size_t>(env.chunk_bytes));
    auto ait = arenas_.find(node);
    if (ait == arenas_.end()) fail(ErrorCode::Internal, "worker has no arena mapping for node");
    if (env.chunk_bytes > 0) std::memcpy(bytes.data(), ait->second->data(offset), bytes.size());
    send_frame(Frame{json{{"type", "sidecar_ack"}, {"node", node}, {"offset", offset}}, {}});
    if (it == interests_.end()) return;
    uint64_t sum = checksum64(bytes.data(), bytes.size());
    if (sum != env.checksum) {
      if (it->second.on_error)
        it->second.on_error(Error(ErrorCode::Integrity, "checksum mismatch on " + env.ref_id));
      return;
    }
    it->second.on_chunk(env, std::move(bytes));
  }

  void on_error_frame(const Frame& f) {
    auto it = interests_.find(f.header.value("ref_id", ""));
    if (it != interests_.end() && it->second.on_error)
      it->second.on_error(Error(ErrorCode::Internal, f.header.value("message", "sidecar error")));
  }

 private:
  void send_frame(const Frame& f) {
    std::lock_guard lk(send_m_);
    sock_.send_frame(f);
  }

  struct Interest {
    ChunkCallback on_chunk;
    RefErrorCallback on_error;
  };
  TcpSocket& sock_;
  std::mutex& send_m_;
  std::map<std::string, Interest> interests_;
  std::map<int, std::unique_ptr<MappedArena>> arenas_;
};

}  // namespace worker_detail

// Executor host factory for a cluster config: in-process by default,
// worker processes when the config says so.
inline ExecutorHostFactory host_factory_for(const ClusterConfig& config) {
  if (config.executor_mode != ClusterConfig::ExecutorMode::MultiProcess) return {};
  std::string exe = config.worker_exe;
  if (exe.empty()) exe = "/proc/self/exe";
  return multiprocess_host_factory(exe);
}

// Entry point for the `executor-worker` subcommand. Blocks until the parent
// sends shutdown or the connection drops.
inline int run_executor_worker(const std::string& host, int port) {
  TcpSocket sock = tcp_connect(host, port);
  std::mutex send_m;
  SimKernel kernel(ClockMode::RealTime);
  kernel.start();
  worker_detail::WorkerSidecar sidecar(sock, send_m);
  std::unique_ptr<ExecutorBase> executor;
  std::atomic<bool> done{false};

  ExecutorEnv env;
  env.kernel = &kernel;
  env.sidecar = &sidecar;
  env.to_dispatcher = [&sock, &send_m](Frame f) {
    std::lock_guard lk(send_m);
    sock.send_frame(f);
  };

  FrameReader reader(
      sock,
      [&](Frame f) {
        const std::string type = f.header.value("type", "");
        if (type == "spawn") {
          // All worker state lives on the kernel thread.
          kernel.post("worker.spawn", [&, f = std::move(f)] {
            ReplicaSpec spec = worker_detail::replica_spec_from_json(f.header.at("spec"));
            json arenas = f.header.value("arenas", json::object());
            for (const auto& [node, info] : arenas.items()) {
              if (info.value("shm_name", "").empty()) continue;
              sidecar.add_arena(std::stoi(node),
                                std::make_unique<worker_detail::MappedArena>(
                                    info.at("shm_name").get<std::string>(),
                                    info.at("capacity").get<int64_t>()));
            }
            executor = make_executor(env, spec);
          });
          return;
        }
        if (type == "shutdown") {
          done = true;
          sock.shutdown_both();
          return;
        }
        if (type == "sidecar_envelope") {
          kernel.post("worker.envelope", [&, f = std::move(f)] { sidecar.on_envelope(f); });
          return;
        }
        if (type == "sidecar_error") {
          kernel.post("worker.sidecar_error", [&, f = std::move(f)] { sidecar.on_error_frame(f); });
          return;
        }
        // invocation / cancel
        kernel.post("worker.frame", [&, f = std::move(f)] {
          if (executor) executor->handle_frame(f);
        });
      },
      [&] { done = true; });

  while (!done) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  reader.join();
  kernel.stop();
  return 0;
}

}  // namespace fissim
