// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Control plane: gateway (app registration + inference entry point), resource
// manager (GPU pool + task manager orchestration), and the app registry.
// Equivalent unit tasks across apps share one task manager; deployments are
// reference-counted and GPUs are conserved on every path, including failed
// registrations.

#pragma once

#include <atomic>
#include <deque>

#include "fissim/planner.hpp"
#include "fissim/record_replay.hpp"
#include "fissim/task_dispatcher.hpp"

namespace fissim {

// ---------------------------------------------------------------------------
// Cluster configuration

struct ClusterConfig {
  struct Node {
    int node_id = 0;
    int gpus = 0;
    int64_t gpu_capacity_bytes = int64_t{80} * 1000 * 1000 * 1000;
  };
  std::vector<Node> nodes;
  enum class ExecutorMode { InProcess, MultiProcess };
  ExecutorMode executor_mode = ExecutorMode::InProcess;
  ClockMode clock = ClockMode::RealTime;
  int64_t arena_bytes = int64_t{1} << 30;
  double orphan_timeout_ms = 30000;
  int http_port = 8780;
  std::vector<std::string> profile_files;
  double dispatch_timeout_ms = 0;  // 0 disables
  std::string worker_exe;          // multi-process mode: executor worker binary

  void validate() const {
    if (nodes.empty()) fail(ErrorCode::Config, "cluster requires at least one node");
    std::set<int> ids;
    for (const auto& n : nodes) {
      if (n.gpus <= 0) fail(ErrorCode::Config, "node gpu count must be > 0");
      if (n.gpu_capacity_bytes <= 0) fail(ErrorCode::Config, "gpu capacity must be > 0");
      if (!ids.insert(n.node_id).second)
        fail(ErrorCode::Config, "duplicate node id " + std::to_string(n.node_id));
    }
    if (executor_mode == ExecutorMode::MultiProcess && clock == ClockMode::Virtual)
      fail(ErrorCode::Config, "multi-process executors require the realtime clock");
  }

  std::map<int, int> gpu_to_node() const {
    std::map<int, int> topo;
    int next = 0;
    for (const auto& n : nodes)
      for (int i = 0; i < n.gpus; ++i) topo[next++] = n.node_id;
    return topo;
  }

  int total_gpus() const {
    int n = 0;
    for (const auto& node : nodes) n += node.gpus;
    return n;
  }

  json to_json() const {
    json ns = json::array();
    for (const auto& n : nodes)
      ns.push_back(json{{"node_id", n.node_id},
                        {"gpus", n.gpus},
                        {"gpu_capacity_bytes", n.gpu_capacity_bytes}});
    return json{{"nodes", ns},
                {"executor_mode",
                 executor_mode == ExecutorMode::InProcess ? "in_process" : "multi_process"},
                {"clock", clock == ClockMode::Virtual ? "virtual" : "realtime"},
                {"arena_bytes", arena_bytes},
                {"orphan_timeout_ms", orphan_timeout_ms},
                {"http_port", http_port},
                {"profile_files", profile_files},
                {"dispatch_timeout_ms", dispatch_timeout_ms},
                {"worker_exe", worker_exe}};
  }

  static ClusterConfig from_json(const json& j) {
    ClusterConfig c;
    for (const auto& n : j.value("nodes", json::array())) {
      Node node;
      node.node_id = n.value("node_id", static_cast<int>(c.nodes.size()));
      node.gpus = n.value("gpus", 0);
      node.gpu_capacity_bytes = n.value("gpu_capacity_bytes", node.gpu_capacity_bytes);
      c.nodes.push_back(node);
    }
    std::string mode = j.value("executor_mode", "in_process");
    c.executor_mode = mode == "multi_process" ? ExecutorMode::MultiProcess : ExecutorMode::InProcess;
    c.clock = clock_mode_from_string(j.value("clock", "realtime"));
    c.arena_bytes = j.value("arena_bytes", c.arena_bytes);
    c.orphan_timeout_ms = j.value("orphan_timeout_ms", c.orphan_timeout_ms);
    c.http_port = j.value("http_port", c.http_port);
    c.profile_files = j.value("profile_files", std::vector<std::string>{});
    c.dispatch_timeout_ms = j.value("dispatch_timeout_ms", 0.0);
    c.worker_exe = j.value("worker_exe", "");
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// GPU pool: one allocation owner per GPU; co-located replicas (talker paired
// with its generator) share an owner group and stack weights.

class GpuPool {
 public:
  explicit GpuPool(std::vector<GpuInfo> gpus) : gpus_(std::move(gpus)) {
    for (const auto& g : gpus_) {
      if (g.capacity_bytes <= 0) fail(ErrorCode::Config, "gpu capacity must be > 0");
      by_id_[g.gpu_id] = g;
    }
  }

  static GpuPool from_config(const ClusterConfig& config) {
    std::vector<GpuInfo> gpus;
    int next = 0;
    for (const auto& n : config.nodes)
      for (int i = 0; i < n.gpus; ++i)
        gpus.push_back(GpuInfo{next++, n.node_id, n.gpu_capacity_bytes});
    return GpuPool(std::move(gpus));
  }

  const std::vector<GpuInfo>& gpus() const { return gpus_; }
  size_t size() const { return gpus_.size(); }

  const GpuInfo& info(int gpu_id) const {
    auto it = by_id_.find(gpu_id);
    if (it == by_id_.end()) fail(ErrorCode::NotFound, "unknown gpu " + std::to_string(gpu_id));
    return it->second;
  }

  bool is_free(int gpu_id) const { return !allocations_.count(gpu_id); }

  size_t free_count() const { return gpus_.size() - allocations_.size(); }
  size_t allocated_count() const { return allocations_.size(); }

  int64_t used_bytes(int gpu_id) const {
    auto it = allocations_.find(gpu_id);
    if (it == allocations_.end()) return 0;
    int64_t total = 0;
    for (const auto& [label, w] : it->second.tenants) total += w;
    return total;
  }

  int64_t free_bytes(int gpu_id) const { return info(gpu_id).capacity_bytes - used_bytes(gpu_id); }

  // Allocates gpus to an owner group. A GPU must be free or already owned by
  // the same group (co-located tenants); the added weight must fit.
  void allocate(const std::vector<int>& gpu_ids, const std::string& owner,
                const std::string& tenant_label, int64_t weight_per_gpu) {
    for (int g : gpu_ids) {
      const GpuInfo& gi = info(g);
      auto it = allocations_.find(g);
      if (it != allocations_.end() && it->second.owner != owner)
        fail(ErrorCode::Placement, "gpu " + std::to_string(g) + " already allocated to '" +
                                       it->second.owner + "'");
      int64_t used = used_bytes(g);
      if (used + weight_per_gpu > gi.capacity_bytes)
        fail(ErrorCode::Oom, "gpu " + std::to_string(g) + " capacity exceeded: " +
                                 std::to_string(used + weight_per_gpu) + " > " +
                                 std::to_string(gi.capacity_bytes));
    }
    for (int g : gpu_ids) {
      auto& alloc = allocations_[g];
      alloc.owner = owner;
      alloc.tenants.emplace_back(tenant_label, weight_per_gpu);
    }
  }

  void release_owner(const std::string& owner) {
    for (auto it = allocations_.begin(); it != allocations_.end();) {
      if (it->second.owner == owner)
        it = allocations_.erase(it);
      else
        ++it;
    }
  }

  json snapshot() const {
    json out = json::array();
    for (const auto& g : gpus_) {
      json j{{"gpu_id", g.gpu_id},
             {"node_id", g.node_id},
             {"capacity_bytes", g.capacity_bytes},
             {"free", is_free(g.gpu_id)},
             {"used_bytes", used_bytes(g.gpu_id)}};
      auto it = allocations_.find(g.gpu_id);
      if (it != allocations_.end()) {
        j["owner"] = it->second.owner;
        json tenants = json::array();
        for (const auto& [label, w] : it->second.tenants)
          tenants.push_back(json{{"tenant", label}, {"weight_bytes", w}});
        j["tenants"] = tenants;
      }
      out.push_back(j);
    }
    return out;
  }

 private:
  struct Allocation {
    std::string owner;
    std::vector<std::pair<std::string, int64_t>> tenants;
  };

  std::vector<GpuInfo> gpus_;
  std::map<int, GpuInfo> by_id_;
  std::map<int, Allocation> allocations_;
};

// ---------------------------------------------------------------------------
// Task managers and the resource manager

struct TaskManagerState {
  std::string task_digest;
  TaskDescriptor descriptor;
  ComponentProfile profile;
  struct Replica {
    std::string replica_id;
    std::vector<int> gpu_ids;
    int tp_degree = 1;
    std::string endpoint;
    std::string owner_group;
  };
  std::vector<Replica> replicas;
  int ref_count = 0;

  json to_json() const {
    json rs = json::array();
    for (const auto& r : replicas)
      rs.push_back(json{{"replica_id", r.replica_id},
                        {"gpu_ids", r.gpu_ids},
                        {"tp_degree", r.tp_degree},
                        {"endpoint", r.endpoint}});
    return json{{"task_digest", task_digest},
                {"model_id", descriptor.unit_task.model_id},
                {"class", to_string(descriptor.unit_task.task_class)},
                {"role", descriptor.unit_task.role()},
                {"weight_bytes", descriptor.weight_bytes},
                {"ref_count", ref_count},
                {"replicas", rs}};
  }
};

// Hosts one executor replica: in-process today, worker process behind the
// same frame protocol in MultiProcess mode (see executor_worker.hpp).
class ExecutorHost {
 public:
  virtual ~ExecutorHost() = default;
  virtual void deliver(const Frame& f) = 0;
  virtual const ExecutorBase* executor() const { return nullptr; }
};

class InProcessHost : public ExecutorHost {
 public:
  InProcessHost(std::unique_ptr<ExecutorBase> exec) : exec_(std::move(exec)) {}
  void deliver(const Frame& f) override { exec_->handle_frame(f); }
  const ExecutorBase* executor() const override { return exec_.get(); }
  ExecutorBase* mutable_executor() { return exec_.get(); }

 private:
  std::unique_ptr<ExecutorBase> exec_;
};

using ExecutorHostFactory =
    std::function<std::unique_ptr<ExecutorHost>(const ExecutorEnv&, const ReplicaSpec&)>;

class ResourceManager {
 public:
  ResourceManager(SimKernel& kernel, SidecarFabric& fabric, TaskDispatcher& dispatcher,
                  GpuPool pool, ExecutorHostFactory factory = {})
      : kernel_(kernel), fabric_(fabric), dispatcher_(dispatcher), pool_(std::move(pool)) {
    factory_ = factory ? std::move(factory)
                       : [](const ExecutorEnv& env, const ReplicaSpec& spec) {
                           return std::unique_ptr<ExecutorHost>(
                               new InProcessHost(make_executor(env, spec)));
                         };
  }

  GpuPool& pool() { return pool_; }
  const GpuPool& pool() const { return pool_; }

  bool has_manager(const std::string& digest) const { return managers_.count(digest) > 0; }

  TaskManagerState& manager(const std::string& digest) {
    auto it = managers_.find(digest);
    if (it == managers_.end()) fail(ErrorCode::NotFound, "no task manager for " + short_digest(digest));
    return it->second;
  }

  const std::map<std::string, TaskManagerState>& managers() const { return managers_; }

  void add_ref(const std::string& digest) { manager(digest).ref_count++; }

  struct ReplicaPlacement {
    std::vector<int> gpu_ids;
    std::string owner_group;  // co-location group; defaults to the replica id
  };

  // Spawns a task manager with executor replicas on the given placement.
  // Placement GPUs must be free or co-owned by the same group, and the
  // per-GPU weight share must fit.
  TaskManagerState& spawn_task_manager(const ProfileCatalog::Resolved& resolved,
                                       const std::vector<ReplicaPlacement>& placements) {
    const std::string digest = canonical_hash(resolved.descriptor.unit_task);
    if (managers_.count(digest))
      fail(ErrorCode::Internal, "task manager already exists for " + short_digest(digest));
    if (placements.empty()) fail(ErrorCode::Placement, "at least one replica placement required");

    TaskManagerState tm;
    tm.task_digest = digest;
    tm.descriptor = resolved.descriptor;
    tm.profile = resolved.profile;
    tm.ref_count = 1;

    // Phase 1: allocate every replica; unwind on failure so no GPUs leak.
    std::vector<std::string> allocated_owners;
    try {
      for (size_t i = 0; i < placements.size(); ++i) {
        const auto& pl = placements[i];
        int tp = static_cast<int>(pl.gpu_ids.size());
        if (tp == 0) fail(ErrorCode::Placement, "replica placement needs at least one gpu");
        if (!resolved.descriptor.allowed_tp_degrees.count(tp))
          fail(ErrorCode::Placement, "tp degree " + std::to_string(tp) + " not allowed for " +
                                         short_digest(digest));
        int node = -1;
        for (int g : pl.gpu_ids) {
          int n = pool_.info(g).node_id;
          if (node < 0) node = n;
          if (n != node) fail(ErrorCode::Placement, "tensor-parallel replica spans nodes");
        }
        std::string replica_id = short_digest(digest) + "/r" + std::to_string(i);
        std::string owner = pl.owner_group.empty() ? replica_id : pl.owner_group;
        int64_t weight_per_gpu = resolved.descriptor.weight_bytes / tp;
        pool_.allocate(pl.gpu_ids, owner, replica_id, weight_per_gpu);
        allocated_owners.push_back(owner);

        TaskManagerState::Replica r;
        r.replica_id = replica_id;
        r.gpu_ids = pl.gpu_ids;
        r.tp_degree = tp;
        r.owner_group = owner;
        r.endpoint = "exec://node" + std::to_string(node) + "/" + replica_id;
        tm.replicas.push_back(std::move(r));
      }
    } catch (...) {
      for (const auto& owner : allocated_owners) pool_.release_owner(owner);
      throw;
    }

    auto& slot = managers_[digest] = std::move(tm);
    spawn_executors(slot, resolved);
    return slot;
  }

  // Called once all co-tenants are allocated: spawn executors with activation
  // budgets derived from what is actually left on their GPUs.
  void spawn_executors(TaskManagerState& tm, const ProfileCatalog::Resolved& resolved) {
    for (const auto& r : tm.replicas) {
      ReplicaSpec spec;
      spec.replica_id = r.replica_id;
      spec.task_digest = tm.task_digest;
      spec.unit = resolved.descriptor.unit_task;
      spec.profile = resolved.profile;
      spec.shapes = resolved.shapes;
      spec.gpus = r.gpu_ids;
      spec.tp = r.tp_degree;
      if (resolved.profile.kind == ProfileKind::Monolith && resolved.file) {
        for (const auto& stage : resolved.profile.components) {
          auto it = resolved.file->profiles.find(stage);
          if (it == resolved.file->profiles.end())
            fail(ErrorCode::Config, "monolith stage profile '" + stage + "' missing");
          spec.stage_profiles[stage] = it->second;
        }
      }
      int64_t budget = std::numeric_limits<int64_t>::max();
      for (int g : r.gpu_ids) budget = std::min(budget, pool_.free_bytes(g));
      spec.activation_budget_per_gpu = budget;

      ExecutorEnv env;
      env.kernel = &kernel_;
      env.sidecar = &fabric_;
      env.to_dispatcher = [this](Frame f) { dispatcher_.on_executor_frame(f); };
      auto host = factory_(env, spec);

      ReplicaEndpoint ep;
      ep.replica_id = r.replica_id;
      ep.task_digest = tm.task_digest;
      ep.home_gpu = r.gpu_ids.front();
      ep.gpus = r.gpu_ids;
      ExecutorHost* raw = host.get();
      ep.deliver = [raw](const Frame& f) { raw->deliver(f); };
      dispatcher_.add_replica(std::move(ep));
      hosts_[r.replica_id] = std::move(host);
    }
  }

  // Decrements and tears down at zero: executors stopped, endpoints removed,
  // GPUs freed.
  void release(const std::string& digest) {
    auto it = managers_.find(digest);
    if (it == managers_.end()) return;
    if (--it->second.ref_count > 0) return;
    dispatcher_.remove_replicas(digest);
    for (const auto& r : it->second.replicas) {
      hosts_.erase(r.replica_id);
      pool_.release_owner(r.owner_group);
    }
    managers_.erase(it);
  }

  const ExecutorBase* executor(const std::string& replica_id) const {
    auto it = hosts_.find(replica_id);
    return it == hosts_.end() ? nullptr : it->second->executor();
  }

  json snapshot() const {
    json tms = json::array();
    for (const auto& [digest, tm] : managers_) tms.push_back(tm.to_json());
    return json{{"gpus", pool_.snapshot()},
                {"free_gpus", pool_.free_count()},
                {"task_managers", tms}};
  }

 private:
  SimKernel& kernel_;
  SidecarFabric& fabric_;
  TaskDispatcher& dispatcher_;
  GpuPool pool_;
  ExecutorHostFactory factory_;
  std::map<std::string, TaskManagerState> managers_;
  std::map<std::string, std::unique_ptr<ExecutorHost>> hosts_;
};

// ---------------------------------------------------------------------------
// Request traces (request lifecycle timestamps)

struct RequestTrace {
  std::string request_id;
  std::string class_name;
  TimeMs arrival = 0;
  TimeMs dispatch = 0;
  struct InvocationSpan {
    std::string invocation_id;
    std::string task_digest;
    TimeMs queue_enter = 0;
    TimeMs compute_start = 0;
    TimeMs compute_end = 0;
    double transfer_ms = 0;
  };
  std::vector<InvocationSpan> invocations;
  TimeMs completion = 0;
  bool failed = false;
  std::string error;

  json to_json() const {
    json spans = json::array();
    for (const auto& s : invocations)
      spans.push_back(json{{"invocation_id", s.invocation_id},
                           {"task_digest", s.task_digest},
                           {"queue_enter", s.queue_enter},
                           {"compute_start", s.compute_start},
                           {"compute_end", s.compute_end},
                           {"transfer_ms", s.transfer_ms}});
    return json{{"request_id", request_id}, {"class", class_name},
                {"arrival", arrival},       {"dispatch", dispatch},
                {"invocations", spans},     {"completion", completion},
                {"failed", failed},         {"error", error}};
  }
};

// ---------------------------------------------------------------------------
// Gateway

class Gateway {
 public:
  Gateway(SimKernel& kernel, SidecarFabric& fabric, TaskDispatcher& dispatcher,
          ResourceManager& rm, const ProfileCatalog& catalog, double dispatch_timeout_ms = 0)
      : kernel_(kernel),
        fabric_(fabric),
        dispatcher_(dispatcher),
        rm_(rm),
        catalog_(catalog),
        dispatch_timeout_ms_(dispatch_timeout_ms) {}

  // Registers an app: validates the manifest, deploys new unit tasks (or
  // bumps ref counts on equivalent existing ones), returns the app id.
  std::string register_app(const AppManifest& manifest,
                           const std::optional<DeploymentPlan>& plan_hint = std::nullopt) {
    std::lock_guard lk(m_);
    ValidatedManifest vm = validate_manifest(manifest);
    if (apps_.count(vm.manifest.app_id))
      fail(ErrorCode::DuplicateApp, "duplicate app '" + vm.manifest.app_id + "'");

    // Resolve descriptors for all units; identify the not-yet-deployed ones.
    std::map<std::string, ProfileCatalog::Resolved> resolved;
    std::vector<std::string> new_digests;
    for (const auto& [digest, unit] : vm.unique_units) {
      resolved.emplace(digest, catalog_.resolve(unit));
      if (!rm_.has_manager(digest)) new_digests.push_back(digest);
    }

    // Placement for the new digests: explicit plan hint, or the planner over
    // the currently free GPUs with a neutral mix.
    if (!new_digests.empty()) {
      DeploymentPlan plan =
          plan_hint ? *plan_hint : default_plan(new_digests, resolved);
      apply_plan(plan, new_digests, resolved);
    }
    for (const auto& [digest, unit] : vm.unique_units) {
      bool is_new = std::find(new_digests.begin(), new_digests.end(), digest) != new_digests.end();
      if (!is_new) rm_.add_ref(digest);
    }

    AppState app;
    app.vm = std::move(vm);
    const std::string app_id = app.vm.manifest.app_id;
    apps_.emplace(app_id, std::move(app));
    return app_id;
  }

  void deregister_app(const std::string& app_id, bool force = false) {
    std::lock_guard lk(m_);
    auto it = apps_.find(app_id);
    if (it == apps_.end()) fail(ErrorCode::NotFound, "unknown app '" + app_id + "'");
    if (it->second.inflight.load() > 0 && !force)
      fail(ErrorCode::Validation, "app '" + app_id + "' has in-flight requests (use force)");
    std::set<std::string> digests;
    for (const auto& [name, ds] : it->second.vm.task_units)
      for (const auto& d : ds) digests.insert(d);
    for (const auto& d : digests) rm_.release(d);
    apps_.erase(it);
  }

  bool has_app(const std::string& app_id) const {
    std::lock_guard lk(m_);
    return apps_.count(app_id) > 0;
  }

  // --- Inference -----------------------------------------------------------

  // Live response handle: channel streams plus the trace future.
  struct LiveResponse {
    // (task name, channel) -> stream; task name is empty for single-task apps.
    std::vector<std::tuple<std::string, std::string, std::shared_ptr<ChunkStream>>> channels;
    std::shared_future<RequestTrace> trace;
  };

  using TraceCallback = std::function<void(const RequestTrace&)>;

  // Asynchronous invoke, safe to call from kernel events (Virtual mode) or
  // external threads. on_done fires on the kernel thread at completion.
  void invoke_async(const std::string& app_id, json request, TraceCallback on_done) {
    auto work = [this, app_id, request = std::move(request), on_done = std::move(on_done)]() mutable {
      start_request(app_id, std::move(request), std::move(on_done), nullptr);
    };
    // record+dispatch must run on the kernel thread.
    kernel_.post("gateway.invoke", std::move(work));
  }

  // Blocking invoke for RealTime clients: returns live channel streams.
  LiveResponse invoke(const std::string& app_id, json request) {
    auto ready = std::make_shared<std::promise<LiveResponse>>();
    auto fut = ready->get_future();
    auto trace_promise = std::make_shared<std::promise<RequestTrace>>();
    std::shared_future<RequestTrace> trace_future = trace_promise->get_future().share();
    kernel_.post("gateway.invoke", [this, app_id, request = std::move(request), ready,
                                    trace_promise, trace_future]() mutable {
      try {
        start_request(app_id, std::move(request),
                      [trace_promise](const RequestTrace& t) { trace_promise->set_value(t); },
                      [ready, trace_future](LiveResponse lr) {
                        lr.trace = trace_future;
                        ready->set_value(std::move(lr));
                      });
      } catch (...) {
        ready->set_exception(std::current_exception());
      }
    });
    return fut.get();
  }

  json state_snapshot() const {
    std::lock_guard lk(m_);
    json apps = json::array();
    for (const auto& [id, app] : apps_)
      apps.push_back(json{{"app_id", id},
                          {"serve_entry", app.vm.manifest.serve_entry},
                          {"inflight", app.inflight.load()}});
    json s = rm_.snapshot();
    s["apps"] = apps;
    s["dispatch"] = dispatcher_.state_snapshot();
    return s;
  }

  json metrics_snapshot() const {
    auto sc = fabric_.stats();
    return json{{"requests_total", requests_total_.load()},
                {"requests_completed", requests_completed_.load()},
                {"requests_failed", requests_failed_.load()},
                {"invocations_dispatched", dispatcher_.dispatched_invocations()},
                {"sidecar",
                 {{"transfers", sc.transfers},
                  {"bytes_forwarded", sc.bytes_forwarded},
                  {"integrity_errors", sc.integrity_errors},
                  {"added_latency_ms", sc.added_latency_ms},
                  {"segments_in_use", sc.segments_in_use}}}};
  }

  // Bench hook: steady stream of completed traces.
  void set_trace_sink(TraceCallback sink) { trace_sink_ = std::move(sink); }

  uint64_t next_request_seq() { return request_seq_.fetch_add(1); }

 private:
  struct AppState {
    ValidatedManifest vm;
    std::atomic<int64_t> inflight{0};

    AppState() = default;
    AppState(AppState&& o) noexcept : vm(std::move(o.vm)), inflight(o.inflight.load()) {}
  };

  // In-flight request: one record/dispatch/replay cycle per serve fan-out leg.
  struct PendingRequest {
    std::string request_id;
    std::string app_id;
    json request;
    TimeMs arrival = 0;
    struct Leg {
      std::string task_name;
      RecordOutcome outcome;
      std::shared_ptr<DispatchHandle> handle;
      const CompositeTaskSpec* composite = nullptr;
    };
    std::vector<Leg> legs;
    size_t legs_done = 0;
    TraceCallback on_done;
  };

  DeploymentPlan default_plan(const std::vector<std::string>& new_digests,
                              const std::map<std::string, ProfileCatalog::Resolved>& resolved) {
    PlannerInputs in;
    std::string monolith_digest;
    for (const auto& d : new_digests) {
      const auto& r = resolved.at(d);
      PlannerComponent c;
      c.name = d;
      c.profile = r.profile;
      c.weight_bytes = r.descriptor.weight_bytes;
      c.allowed_tp = r.descriptor.allowed_tp_degrees;
      c.demand = 1.0;  // neutral demand when no workload mix is known
      if (r.profile.kind == ProfileKind::Monolith) {
        MonolithCandidate mono;
        mono.weight_bytes = r.descriptor.weight_bytes;
        mono.exclusive_ms_per_request = 1.0;  // shape only matters for feasibility here
        in.monolith = mono;
        in.monolith_only = true;
        monolith_digest = d;
      }
      in.components.push_back(std::move(c));
    }
    for (const auto& g : rm_.pool().gpus())
      if (rm_.pool().is_free(g.gpu_id)) in.free_gpus.push_back(g);
    in.pair_talker_generator = true;
    DeploymentPlan plan = plan_deployment(in);
    if (!monolith_digest.empty()) {
      // The planner names the monolithic placement "monolith"; rekey to the
      // unit task digest the resource manager deploys.
      auto it = plan.placements.find("monolith");
      if (it != plan.placements.end()) {
        auto reps = std::move(it->second);
        plan.placements.erase(it);
        plan.placements[monolith_digest] = std::move(reps);
        plan.tp_degree[monolith_digest] = 1;
      }
    }
    return plan;
  }

  void apply_plan(const DeploymentPlan& plan, const std::vector<std::string>& new_digests,
                  const std::map<std::string, ProfileCatalog::Resolved>& resolved) {
    // The plan speaks in component names == digests here.
    std::vector<std::string> spawned;
    try {
      for (const auto& d : new_digests) {
        auto it = plan.placements.find(d);
        if (it == plan.placements.end())
          fail(ErrorCode::Placement, "plan does not place task " + short_digest(d));
        std::vector<ResourceManager::ReplicaPlacement> placements;
        for (const auto& rp : it->second) {
          ResourceManager::ReplicaPlacement p;
          p.gpu_ids = rp.gpu_ids;
          p.owner_group = rp.owner_group;
          placements.push_back(std::move(p));
        }
        rm_.spawn_task_manager(resolved.at(d), placements);
        spawned.push_back(d);
      }
    } catch (...) {
      for (const auto& d : spawned) rm_.release(d);
      throw;
    }
  }

  // Runs record+dispatch for every serve leg; on completion of all legs runs
  // replay and emits the trace. Must run on the kernel thread.
  void start_request(const std::string& app_id, json request, TraceCallback on_done,
                     std::function<void(LiveResponse)> on_live) {
    requests_total_.fetch_add(1);
    AppState* app = nullptr;
    {
      std::lock_guard lk(m_);
      auto it = apps_.find(app_id);
      if (it == apps_.end()) {
        requests_failed_.fetch_add(1);
        fail(ErrorCode::NotFound, "unknown app '" + app_id + "'");
      }
      app = &it->second;
    }
    app->inflight.fetch_add(1);

    char reqbuf[32];
    std::snprintf(reqbuf, sizeof(reqbuf), "req-%06llu",
                  static_cast<unsigned long long>(next_request_seq()));
    auto pending = std::make_shared<PendingRequest>();
    pending->request_id = reqbuf;
    pending->app_id = app_id;
    pending->request = std::move(request);
    pending->arrival = kernel_.now();
    pending->on_done = std::move(on_done);

    try {
      // Serve routine fan-out: which tasks run for this request.
      std::vector<std::string> task_names;
      const std::string& entry = app->vm.manifest.serve_entry;
      if (entry == "arena_fanout") {
        for (const auto& [name, _] : app->vm.composites) task_names.push_back(name);
      } else {
        task_names.push_back(app->vm.composites.begin()->first);
      }

      // Record phase for every leg (no executor work).
      for (const auto& name : task_names) {
        PendingRequest::Leg leg;
        leg.task_name = name;
        leg.composite = &app->vm.composites.at(name);
        std::string model = model_of(*leg.composite);
        ShapeRules shapes = catalog_.shapes_for_model(model);
        std::string leg_id =
            task_names.size() == 1 ? pending->request_id : pending->request_id + "-" + name;
        leg.outcome = record(*leg.composite, pending->request, shapes, leg_id);
        pending->legs.push_back(std::move(leg));
      }

      // Dispatch all legs.
      for (auto& leg : pending->legs) {
        DispatchOptions opts;
        opts.timeout_ms = dispatch_timeout_ms_;
        opts.on_complete = [this, pending, app](DispatchHandle&) {
          if (++pending->legs_done < pending->legs.size()) return;
          finish_request(pending, app);
        };
        // The gateway->dispatcher hop carries the documented JSON graph form.
        InvocationGraph wire_graph = InvocationGraph::from_json(leg.outcome.graph.to_json());
        leg.handle = dispatcher_.dispatch(wire_graph, pending->request, opts);
      }
    } catch (...) {
      app->inflight.fetch_sub(1);
      requests_failed_.fetch_add(1);
      throw;
    }

    if (on_live) {
      LiveResponse lr;
      bool multi = pending->legs.size() > 1;
      for (auto& leg : pending->legs) {
        for (const auto& [channel, binding] : leg.outcome.channel_bindings) {
          auto& handles = leg.handle->results().at(binding.first);
          auto stream = handles.at(binding.second).stream;
          if (stream) lr.channels.emplace_back(multi ? leg.task_name : "", channel, stream);
        }
      }
      on_live(std::move(lr));
    }
  }

  static std::string model_of(const CompositeTaskSpec& comp) {
    if (comp.config.contains("model_id")) return comp.config.at("model_id").get<std::string>();
    for (const auto& [name, child] : comp.children) {
      if (const auto* unit = std::get_if<UnitTaskSpec>(&child)) {
        if (!unit->model_id.empty()) return unit->model_id;
        if (!unit->encoder_ids.empty()) return *unit->encoder_ids.begin();
      }
    }
    return "";
  }

  void finish_request(const std::shared_ptr<PendingRequest>& pending, AppState* app) {
    RequestTrace trace;
    trace.request_id = pending->request_id;
    trace.class_name = pending->request.value("class", "");
    trace.arrival = pending->arrival;
    trace.completion = kernel_.now();
    bool failed = false;
    std::string error;

    for (auto& leg : pending->legs) {
      const auto& rec = leg.handle->record();
      for (const auto& [inv, times] : rec.times) {
        RequestTrace::InvocationSpan span;
        span.invocation_id = inv;
        span.task_digest = leg.outcome.graph.nodes.at(inv).task_digest;
        span.queue_enter = times.queue_enter;
        span.compute_start = times.compute_start;
        span.compute_end = times.compute_end;
        span.transfer_ms = times.transfer_ms;
        trace.dispatch = std::max(trace.dispatch, times.dispatched);
        trace.invocations.push_back(std::move(span));
      }
      if (leg.handle->failed()) {
        failed = true;
        if (leg.handle->first_error()) error = leg.handle->first_error()->what();
        continue;
      }
      // Replay: same composite body, now with real results. Streams are fully
      // buffered at this point in Virtual mode and live in RealTime mode.
      try {
        replay(*leg.composite, pending->request, leg.outcome.graph, leg.handle->results());
      } catch (const Error& e) {
        failed = true;
        error = e.what();
      }
    }
    trace.failed = failed;
    trace.error = error;
    app->inflight.fetch_sub(1);
    (failed ? requests_failed_ : requests_completed_).fetch_add(1);
    if (trace_sink_) trace_sink_(trace);
    if (pending->on_done) pending->on_done(trace);
  }

  SimKernel& kernel_;
  SidecarFabric& fabric_;
  TaskDispatcher& dispatcher_;
  ResourceManager& rm_;
  const ProfileCatalog& catalog_;
  double dispatch_timeout_ms_ = 0;
  mutable std::mutex m_;
  std::map<std::string, AppState> apps_;
  std::atomic<uint64_t> request_seq_{0};
  std::atomic<int64_t> requests_total_{0};
  std::atomic<int64_t> requests_completed_{0};
  std::atomic<int64_t> requests_failed_{0};
  TraceCallback trace_sink_;
};

// ---------------------------------------------------------------------------
// A whole in-process cluster: kernel + fabric + dispatcher + rm + gateway.

class Cluster {
 public:
  explicit Cluster(ClusterConfig config, ExecutorHostFactory factory = {})
      : config_(std::move(config)),
        kernel_(config_.clock),
        fabric_(kernel_, config_.gpu_to_node(), make_sidecar_config(config_)),
        dispatcher_(kernel_, fabric_),
        rm_(kernel_, fabric_, dispatcher_, GpuPool::from_config(config_), std::move(factory)),
        gateway_(kernel_, fabric_, dispatcher_, rm_, catalog_, config_.dispatch_timeout_ms) {
    config_.validate();
    for (const auto& f : config_.profile_files) catalog_.load_file(f);
  }

  static SidecarConfig make_sidecar_config(const ClusterConfig& c) {
    SidecarConfig sc;
    sc.arena_bytes = c.arena_bytes;
    sc.orphan_timeout_ms = c.orphan_timeout_ms;
    return sc;
  }

  ClusterConfig& config() { return config_; }
  SimKernel& kernel() { return kernel_; }
  SidecarFabric& fabric() { return fabric_; }
  TaskDispatcher& dispatcher() { return dispatcher_; }
  ResourceManager& rm() { return rm_; }
  Gateway& gateway() { return gateway_; }
  ProfileCatalog& catalog() { return catalog_; }

  // RealTime operation (live serving); Virtual callers drive the kernel
  // directly instead.
  void start() { kernel_.start(); }
  void stop() { kernel_.stop(); }

 private:
  ClusterConfig config_;
  SimKernel kernel_;
  SidecarFabric fabric_;
  TaskDispatcher dispatcher_;
  ResourceManager rm_;
  Gateway gateway_;
  ProfileCatalog catalog_;
};

}  // namespace fissim
