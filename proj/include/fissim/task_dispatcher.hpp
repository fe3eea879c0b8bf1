// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Routes recorded invocation graphs to executor replicas. Every node of a
// request is dispatched in one batch before any node can complete; executors
// then block on their sidecars for inputs. Replica choice is least-outstanding
// with round-robin tie-break. Failure of a node cancels only its transitive
// downstream.

#pragma once

#include <future>

#include "fissim/executor_sim.hpp"

namespace fissim {

class DispatchHandle;

struct DispatchOptions {
  double timeout_ms = 0;  // 0 disables
  std::function<void(DispatchHandle&)> on_complete;
};

struct ReplicaEndpoint {
  std::string replica_id;
  std::string task_digest;
  int home_gpu = 0;
  std::vector<int> gpus;
  // Delivers an encoded frame to the executor (in-process decode or socket).
  std::function<void(const Frame&)> deliver;
};

struct DispatchRecord {
  std::string request_id;
  std::map<std::string, std::string> assignments;  // invocation -> replica id
  std::map<std::string, InvocationState> statuses;
  struct Times {
    TimeMs dispatched = 0;
    TimeMs queue_enter = 0;
    TimeMs compute_start = 0;
    TimeMs compute_end = 0;
    double transfer_ms = 0;
  };
  std::map<std::string, Times> times;
  std::map<std::string, std::string> errors;  // invocation -> message (failed/cancelled)
};

// Per-request handle the replay phase consumes.
class DispatchHandle {
 public:
  const std::string& request_id() const { return record_.request_id; }
  const DispatchRecord& record() const { return record_; }
  const ResultsMap& results() const { return results_; }
  const InvocationGraph& graph() const { return graph_; }

  // Blocks until every node is terminal (RealTime callers). Virtual-clock
  // callers rely on on_complete instead.
  void wait() { done_future_.wait(); }

  bool failed() const { return failed_; }
  const std::optional<Error>& first_error() const { return first_error_; }

  // Result handles for one invocation; upstream failures propagate with the
  // causal chain.
  const std::vector<OutputHandle>& collect(const std::string& invocation_id) const {
    auto st = record_.statuses.find(invocation_id);
    if (st == record_.statuses.end())
      fail(ErrorCode::NotFound, "unknown invocation '" + invocation_id + "'");
    if (st->second == InvocationState::Failed) {
      auto err = record_.errors.find(invocation_id);
      fail(ErrorCode::Dispatch, "invocation " + invocation_id + " failed: " +
                                    (err == record_.errors.end() ? "unknown" : err->second));
    }
    return results_.at(invocation_id);
  }

 private:
  friend class TaskDispatcher;
  InvocationGraph graph_;
  DispatchRecord record_;
  ResultsMap results_;
  json request_meta_;
  std::map<std::string, std::set<std::string>> downstream_;  // adjacency
  size_t terminal_ = 0;
  bool failed_ = false;
  bool finalized_ = false;
  std::optional<Error> first_error_;
  std::function<void(DispatchHandle&)> on_complete_;
  std::promise<void> done_promise_;
  std::shared_future<void> done_future_;
  uint64_t timeout_event_ = 0;
  bool has_timeout_ = false;
};

class TaskDispatcher {
 public:
  TaskDispatcher(SimKernel& kernel, SidecarFabric& sidecar) : kernel_(kernel), sidecar_(sidecar) {}

  // Replica table management (single writer: the resource manager).
  void add_replica(ReplicaEndpoint ep) {
    replicas_[ep.task_digest].push_back(std::move(ep));
  }

  void remove_replicas(const std::string& digest) {
    replicas_.erase(digest);
    rr_.erase(digest);
    outstanding_.erase(digest);
  }

  bool has_replicas(const std::string& digest) const {
    auto it = replicas_.find(digest);
    return it != replicas_.end() && !it->second.empty();
  }

  size_t replica_count(const std::string& digest) const {
    auto it = replicas_.find(digest);
    return it == replicas_.end() ? 0 : it->second.size();
  }

  std::vector<int> outstanding_of(const std::string& digest) const {
    std::vector<int> out;
    auto it = replicas_.find(digest);
    if (it == replicas_.end()) return out;
    for (const auto& ep : it->second) {
      auto o = outstanding_.find(digest);
      out.push_back(o != outstanding_.end() && o->second.count(ep.replica_id)
                        ? o->second.at(ep.replica_id)
                        : 0);
    }
    return out;
  }

  int64_t dispatched_invocations() const { return dispatched_invocations_; }

  // Optional routing refinement: among least-outstanding replicas, prefer
  // ones co-located with the request's upstream producers. Off by default.
  void set_locality_preference(bool on) { prefer_locality_ = on; }

  // Least-outstanding selection with round-robin tie-break. When locality
  // preference is enabled, producer-co-located replicas win ties.
  const ReplicaEndpoint& select_replica(const std::string& digest,
                                        const std::set<int>& preferred_gpus = {}) {
    auto it = replicas_.find(digest);
    if (it == replicas_.end() || it->second.empty())
      fail(ErrorCode::Dispatch, "no live replica for task " + short_digest(digest));
    auto& eps = it->second;
    auto& counts = outstanding_[digest];
    int best = std::numeric_limits<int>::max();
    for (const auto& ep : eps) best = std::min(best, counts[ep.replica_id]);
    size_t n = eps.size();
    uint64_t& rr = rr_[digest];
    if (prefer_locality_ && !preferred_gpus.empty()) {
      for (size_t probe = 0; probe < n; ++probe) {
        const ReplicaEndpoint& ep = eps[(rr + probe) % n];
        if (counts[ep.replica_id] != best) continue;
        for (int g : ep.gpus) {
          if (preferred_gpus.count(g)) {
            rr = (rr + probe + 1) % n;
            return ep;
          }
        }
      }
    }
    for (size_t probe = 0; probe < n; ++probe) {
      const ReplicaEndpoint& ep = eps[(rr + probe) % n];
      if (counts[ep.replica_id] == best) {
        rr = (rr + probe + 1) % n;
        return ep;
      }
    }
    return eps[0];  // unreachable
  }

  // Must run on the kernel thread. Sends every node of the graph in one batch
  // (all deliveries precede any completion), with output destinations resolved
  // against the same batch's replica assignments.
  std::shared_ptr<DispatchHandle> dispatch(const InvocationGraph& graph, const json& request_meta,
                                           DispatchOptions options = {}) {
    // Atomicity: verify replica coverage before any send.
    for (const auto& [id, inv] : graph.nodes) {
      if (!has_replicas(inv.task_digest))
        fail(ErrorCode::Dispatch, "no deployed replica for task " + short_digest(inv.task_digest) +
                                      " required by " + id);
    }

    auto handle = std::make_shared<DispatchHandle>();
    handle->graph_ = graph;
    handle->record_.request_id = graph.request_id;
    handle->request_meta_ = request_meta;
    handle->on_complete_ = options.on_complete;
    handle->done_future_ = handle->done_promise_.get_future().share();
    for (const auto& e : graph.edges) handle->downstream_[e.producer].insert(e.consumer);

    // Assign replicas (record order, which is topological for recorded
    // graphs, so producers are assigned before their consumers).
    std::map<std::string, std::set<int>> upstream_gpus;
    for (const auto& e : graph.edges) upstream_gpus[e.consumer];  // prebuild keys
    std::map<std::string, const ReplicaEndpoint*> assignment;
    for (const auto& [id, inv] : graph.nodes) {
      std::set<int> preferred;
      if (prefer_locality_) {
        for (const auto& e : graph.edges) {
          if (e.consumer != id) continue;
          auto ait = assignment.find(e.producer);
          if (ait == assignment.end()) continue;
          for (int g : ait->second->gpus) preferred.insert(g);
        }
      }
      const ReplicaEndpoint& ep = select_replica(inv.task_digest, preferred);
      assignment[id] = &ep;
      outstanding_[inv.task_digest][ep.replica_id]++;
      handle->record_.assignments[id] = ep.replica_id;
      handle->record_.statuses[id] = InvocationState::Dispatched;
      handle->record_.times[id].dispatched = kernel_.now();
    }

    // Consumers of each output, resolved within this batch.
    std::map<std::string, std::map<int, std::vector<int>>> dest_gpus;  // node -> out idx -> gpus
    for (const auto& e : graph.edges)
      dest_gpus[e.producer][e.output_index].push_back(assignment.at(e.consumer)->home_gpu);
    std::set<std::string> sink_ids;
    for (const auto& [channel, ref] : graph.sink_refs) sink_ids.insert(ref.ref_id);

    // Result handles: streams for sink outputs, bare refs for data-plane ones.
    for (const auto& [id, inv] : graph.nodes) {
      std::vector<OutputHandle> handles;
      for (const auto& out : inv.outputs) {
        OutputHandle h;
        h.ref = out;
        h.ref.state = RefState::Materialized;
        if (sink_ids.count(out.ref_id)) h.stream = std::make_shared<ChunkStream>();
        handles.push_back(std::move(h));
      }
      handle->results_[id] = std::move(handles);
    }

    active_[graph.request_id] = handle;

    // One batch of deliveries at the current instant: every send precedes any
    // executor compute event.
    for (const auto& [id, inv] : graph.nodes) {
      InvocationMessage msg;
      msg.request_id = graph.request_id;
      msg.invocation_id = id;
      msg.task_digest = inv.task_digest;
      msg.inputs = inv.inputs;
      msg.request_meta = request_meta;
      msg.streaming = inv.streaming;
      for (const auto& out : inv.outputs) {
        OutputRoute route;
        route.ref = out;
        auto dit = dest_gpus.find(id);
        if (dit != dest_gpus.end()) {
          auto oit = dit->second.find(out.output_index);
          if (oit != dit->second.end()) route.dest_gpus = oit->second;
        }
        route.to_dispatcher = sink_ids.count(out.ref_id) > 0;
        msg.outputs.push_back(std::move(route));
      }
      auto deliver = assignment.at(id)->deliver;
      Frame frame = msg.to_frame();
      dispatched_invocations_++;
      kernel_.schedule(kernel_.now(), "dispatch.deliver",
                       [deliver, frame] { deliver(frame); });
    }

    if (options.timeout_ms > 0) {
      handle->has_timeout_ = true;
      std::weak_ptr<DispatchHandle> weak = handle;
      handle->timeout_event_ = kernel_.schedule(
          kernel_.now() + options.timeout_ms, "dispatch.timeout", [this, weak] {
            auto h = weak.lock();
            if (!h || h->finalized_) return;
            Error err(ErrorCode::Timeout, "dispatch timed out for request " + h->record_.request_id);
            for (auto& [id, st] : h->record_.statuses) {
              if (st == InvocationState::Complete || st == InvocationState::Failed) continue;
              mark_failed(*h, id, err, /*cancelled=*/false);
            }
            finalize_if_done(h);
          });
    }
    return handle;
  }

  // Frames from executors (status / chunk). Runs on the kernel thread.
  void on_executor_frame(const Frame& f) {
    const std::string type = f.header.value("type", "");
    const std::string request_id = f.header.value("request_id", "");
    auto it = active_.find(request_id);
    if (it == active_.end()) return;  // late frame after finalize
    auto handle = it->second;
    const std::string inv = f.header.value("invocation_id", "");

    if (type == "chunk") {
      int output_index = f.header.value("output_index", 0);
      auto rit = handle->results_.find(inv);
      if (rit == handle->results_.end()) return;
      if (output_index < 0 || output_index >= static_cast<int>(rit->second.size())) return;
      auto& oh = rit->second[output_index];
      if (oh.stream) {
        ChunkStream::Chunk c;
        c.meta = f.header.value("meta", json::object());
        c.bytes = f.payload;
        oh.stream->push(std::move(c));
        if (f.header.value("final", false)) oh.stream->close();
      }
      return;
    }

    if (type != "status") return;
    auto& st = handle->record_.statuses[inv];
    if (st == InvocationState::Complete || st == InvocationState::Failed) return;
    const std::string state = f.header.value("state", "");
    auto& times = handle->record_.times[inv];
    if (state == "running") {
      st = InvocationState::Running;
      times.compute_start = f.header.value("compute_start", 0.0);
      return;
    }
    times.queue_enter = f.header.value("queue_enter", 0.0);
    times.compute_start = f.header.value("compute_start", 0.0);
    times.compute_end = f.header.value("compute_end", 0.0);
    times.transfer_ms = f.header.value("transfer_ms", 0.0);
    if (state == "complete") {
      st = InvocationState::Complete;
      settle(*handle, inv);
      finalize_if_done(handle);
    } else if (state == "failed") {
      Error err(ErrorCode::Dispatch,
                "node " + inv + " failed on " + f.header.value("replica_id", "?") + ": " +
                    f.header.value("message", "unknown error"));
      mark_failed(*handle, inv, err, /*cancelled=*/false);
      cancel_downstream(*handle, inv, err);
      finalize_if_done(handle);
    }
  }

  // Total currently outstanding across all replicas (observability).
  json state_snapshot() const {
    json out = json::object();
    for (const auto& [digest, eps] : replicas_) {
      json replicas = json::array();
      for (const auto& ep : eps) {
        int o = 0;
        auto oit = outstanding_.find(digest);
        if (oit != outstanding_.end()) {
          auto c = oit->second.find(ep.replica_id);
          if (c != oit->second.end()) o = c->second;
        }
        replicas.push_back(json{{"replica_id", ep.replica_id},
                                {"gpus", ep.gpus},
                                {"outstanding", o}});
      }
      out[digest] = replicas;
    }
    return out;
  }

 private:
  void settle(DispatchHandle& h, const std::string& inv) {
    h.terminal_++;
    const std::string& replica = h.record_.assignments.at(inv);
    const std::string& digest = h.graph_.nodes.at(inv).task_digest;
    auto oit = outstanding_.find(digest);
    if (oit != outstanding_.end() && oit->second.count(replica) && oit->second[replica] > 0)
      oit->second[replica]--;
  }

  void mark_failed(DispatchHandle& h, const std::string& inv, const Error& err, bool cancelled) {
    auto& st = h.record_.statuses[inv];
    if (st == InvocationState::Complete || st == InvocationState::Failed) return;
    st = InvocationState::Failed;
    h.record_.errors[inv] = err.what();
    h.failed_ = true;
    if (!h.first_error_) h.first_error_ = err;
    settle(h, inv);
    // Close result streams with the failure so blocked consumers wake.
    auto rit = h.results_.find(inv);
    if (rit != h.results_.end()) {
      for (auto& oh : rit->second)
        if (oh.stream) oh.stream->fail(err);
    }
    if (cancelled) {
      // Best-effort cancel to the executor.
      const ReplicaEndpoint* ep = find_endpoint(h.graph_.nodes.at(inv).task_digest,
                                                h.record_.assignments.at(inv));
      if (ep)
        ep->deliver(Frame{json{{"type", "cancel"},
                               {"request_id", h.record_.request_id},
                               {"invocation_id", inv}},
                          {}});
    }
  }

  void cancel_downstream(DispatchHandle& h, const std::string& failed_inv, const Error& cause) {
    // Transitive downstream of the failed node only; independent branches
    // keep running.
    std::vector<std::string> frontier{failed_inv};
    std::set<std::string> seen{failed_inv};
    while (!frontier.empty()) {
      std::string cur = frontier.back();
      frontier.pop_back();
      auto it = h.downstream_.find(cur);
      if (it == h.downstream_.end()) continue;
      for (const auto& next : it->second) {
        if (!seen.insert(next).second) continue;
        Error err(ErrorCode::Cancelled, "invocation " + next + " cancelled: upstream failure of " +
                                            failed_inv + " (" + cause.what() + ")");
        mark_failed(h, next, err, /*cancelled=*/true);
        frontier.push_back(next);
      }
    }
  }

  const ReplicaEndpoint* find_endpoint(const std::string& digest, const std::string& replica_id) {
    auto it = replicas_.find(digest);
    if (it == replicas_.end()) return nullptr;
    for (const auto& ep : it->second)
      if (ep.replica_id == replica_id) return &ep;
    return nullptr;
  }

  void finalize_if_done(const std::shared_ptr<DispatchHandle>& h) {
    if (h->finalized_ || h->terminal_ < h->graph_.nodes.size()) return;
    h->finalized_ = true;
    if (h->has_timeout_) kernel_.cancel(h->timeout_event_);
    sidecar_.purge_request(h->record_.request_id);
    active_.erase(h->record_.request_id);
    if (h->on_complete_) h->on_complete_(*h);
    h->done_promise_.set_value();
  }

  SimKernel& kernel_;
  SidecarFabric& sidecar_;
  std::map<std::string, std::vector<ReplicaEndpoint>> replicas_;
  std::map<std::string, std::map<std::string, int>> outstanding_;
  std::map<std::string, uint64_t> rr_;
  std::map<std::string, std::shared_ptr<DispatchHandle>> active_;
  int64_t dispatched_invocations_ = 0;
  bool prefer_locality_ = false;
};

}  // namespace fissim
