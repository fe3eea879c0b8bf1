// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment orchestration: drives a generated arrival schedule
// against an in-process control plane, collects request traces, and reduces
// them to throughput and latency percentiles. Virtual-clock runs are
// bit-reproducible per seed; the steady-state window excludes the first and
// last 10% of the run.

#pragma once

#include "fissim/control_plane.hpp"

namespace fissim {

// Nearest-rank percentile over request latency (completion - arrival).
inline std::map<std::string, double> compute_percentiles(std::vector<double> latencies) {
  if (latencies.empty()) fail(ErrorCode::Validation, "no completed traces to summarize");
  std::sort(latencies.begin(), latencies.end());
  auto nearest_rank = [&](double p) {
    size_t rank = static_cast<size_t>(std::ceil(p / 100.0 * double(latencies.size())));
    rank = std::max<size_t>(1, std::min(rank, latencies.size()));
    return latencies[rank - 1];
  };
  return {{"p50", nearest_rank(50)}, {"p95", nearest_rank(95)}, {"p99", nearest_rank(99)}};
}

struct BenchReport {
  double offered_rate = 0;         // req/s
  double achieved_throughput = 0;  // req/s, steady-state window
  double p50_ms = 0, p95_ms = 0, p99_ms = 0;
  int64_t arrivals = 0;
  int64_t completed = 0;            // all completions
  int64_t completed_in_window = 0;  // completions inside the window
  int64_t failed = 0;
  int64_t oom_failures = 0;
  bool oom = false;  // deployment failed to spawn
  std::string oom_error;
  double duration_s = 0;
  uint64_t seed = 0;
  std::string clock;
  double objective_req_s = 0;  // planner objective of the deployed plan
  json per_component = json::object();

  json to_json() const {
    return json{{"offered_rate", offered_rate},
                {"achieved_throughput", achieved_throughput},
                {"latency_ms", {{"p50", p50_ms}, {"p95", p95_ms}, {"p99", p99_ms}}},
                {"arrivals", arrivals},
                {"completed", completed},
                {"completed_in_window", completed_in_window},
                {"failed", failed},
                {"oom_failures", oom_failures},
                {"oom", oom},
                {"oom_error", oom_error},
                {"duration_s", duration_s},
                {"seed", seed},
                {"clock", clock},
                {"objective_req_s", objective_req_s},
                {"per_component", per_component}};
  }
};

struct ExperimentConfig {
  ClusterConfig cluster;
  AppManifest app;
  WorkloadMix mix;
  bool monolith = false;  // deploy the monolithic configuration
  std::optional<DeploymentPlan> plan;  // explicit plan; otherwise the planner runs
  double rate_per_s = 1.0;
  double duration_s = 60.0;
  uint64_t seed = 1;
  std::vector<RequestTrace>* trace_out = nullptr;  // optional full trace log
};

// Demand key for a unit task, matching component_demand()'s vocabulary.
inline std::string demand_key(const UnitTaskSpec& unit) {
  std::string role = unit.role();
  if (role == "thinker" || role == "talker") return role;
  if (role == "omni_monolith") return "monolith";
  switch (unit.task_class) {
    case TaskClass::Encoder: return std::string("encoder.") + to_string(*unit.modality);
    case TaskClass::Generator: return "generator";
    case TaskClass::LLM: return "llm";
  }
  return "llm";
}

// Builds planner inputs for an app's unit tasks against a catalog and mix.
inline PlannerInputs planner_inputs_for_app(const ValidatedManifest& vm,
                                            const ProfileCatalog& catalog, const WorkloadMix& mix,
                                            const std::vector<GpuInfo>& free_gpus,
                                            bool monolith_only = false) {
  auto demand = component_demand(mix);
  PlannerInputs in;
  in.free_gpus = free_gpus;
  in.pair_talker_generator = true;
  in.monolith_only = monolith_only;
  for (const auto& [digest, unit] : vm.unique_units) {
    auto resolved = catalog.resolve(unit);
    if (resolved.profile.kind == ProfileKind::Monolith) {
      // Monolithic unit task: the whole model in one executor.
      MonolithCandidate mono;
      mono.weight_bytes = resolved.descriptor.weight_bytes;
      std::map<std::string, ComponentProfile> stages;
      std::map<std::string, double> stage_demand;
      for (const auto& stage : resolved.profile.components) {
        auto it = resolved.file->profiles.find(stage);
        if (it == resolved.file->profiles.end())
          fail(ErrorCode::Config, "monolith stage profile '" + stage + "' missing");
        stages[stage] = it->second;
        auto dit = demand.find(stage);
        stage_demand[stage] = dit == demand.end() ? 0.0 : dit->second;
      }
      mono.exclusive_ms_per_request = monolith_exclusive_ms(stages, stage_demand);
      in.monolith = mono;
      in.monolith_only = true;
      PlannerComponent c;
      c.name = digest;
      c.profile = resolved.profile;
      c.weight_bytes = resolved.descriptor.weight_bytes;
      c.allowed_tp = resolved.descriptor.allowed_tp_degrees;
      c.demand = 1.0;
      in.components.push_back(std::move(c));
      continue;
    }
    PlannerComponent c;
    c.name = digest;
    c.profile = resolved.profile;
    c.weight_bytes = resolved.descriptor.weight_bytes;
    c.allowed_tp = resolved.descriptor.allowed_tp_degrees;
    auto dit = demand.find(demand_key(unit));
    c.demand = dit == demand.end() ? 0.0 : dit->second;
    in.components.push_back(std::move(c));
  }
  return in;
}

// The planner speaks digests here; rewrite the monolith placement key.
inline DeploymentPlan rekey_monolith_plan(DeploymentPlan plan, const ValidatedManifest& vm) {
  if (!plan.monolith) return plan;
  auto it = plan.placements.find("monolith");
  if (it == plan.placements.end()) return plan;
  for (const auto& [digest, unit] : vm.unique_units) {
    if (unit.role() == "omni_monolith" || vm.unique_units.size() == 1) {
      auto reps = std::move(it->second);
      plan.placements.erase(it);
      plan.placements[digest] = std::move(reps);
      plan.tp_degree[digest] = 1;
      break;
    }
  }
  return plan;
}

inline BenchReport run_experiment(const ExperimentConfig& cfg) {
  BenchReport report;
  report.offered_rate = cfg.rate_per_s;
  report.duration_s = cfg.duration_s;
  report.seed = cfg.seed;
  report.clock = cfg.cluster.clock == ClockMode::Virtual ? "virtual" : "realtime";

  Cluster cluster(cfg.cluster);
  auto& kernel = cluster.kernel();
  auto& gateway = cluster.gateway();

  // Plan the deployment for this app + mix.
  ValidatedManifest vm = validate_manifest(cfg.app);
  DeploymentPlan plan;
  try {
    if (cfg.plan) {
      plan = *cfg.plan;
    } else {
      auto inputs = planner_inputs_for_app(vm, cluster.catalog(), cfg.mix,
                                           cluster.rm().pool().gpus(), cfg.monolith);
      plan = rekey_monolith_plan(plan_deployment(inputs), vm);
    }
    report.objective_req_s = plan.objective_value * 1000.0;
    gateway.register_app(cfg.app, plan);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Oom || e.code() == ErrorCode::Placement ||
        e.code() == ErrorCode::Infeasible) {
      // Deployment cannot spawn: recorded as an OOM report with zero throughput.
      report.oom = true;
      report.oom_error = e.what();
      return report;
    }
    throw;
  }

  auto schedule = generate_workload(cfg.mix, cfg.rate_per_s, cfg.duration_s, cfg.seed);
  report.arrivals = static_cast<int64_t>(schedule.size());

  std::vector<RequestTrace> traces;
  traces.reserve(schedule.size());
  for (const auto& s : schedule) {
    kernel.schedule(s.arrival_ms, "bench.arrival", [&gateway, &traces, req = s.request,
                                                    app_id = cfg.app.app_id]() mutable {
      gateway.invoke_async(app_id, std::move(req),
                           [&traces](const RequestTrace& t) { traces.push_back(t); });
    });
  }

  if (cfg.cluster.clock == ClockMode::Virtual) {
    kernel.run_until_idle();
  } else {
    cluster.start();
    while (!kernel.idle() || traces.size() < schedule.size())
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    cluster.stop();
  }

  // Steady-state window: completions within [0.1, 0.9] of the duration.
  const double w0 = 0.1 * cfg.duration_s * 1000.0;
  const double w1 = 0.9 * cfg.duration_s * 1000.0;
  std::vector<double> window_latencies;
  for (const auto& t : traces) {
    if (t.failed) {
      report.failed++;
      if (t.error.find("oom") != std::string::npos) report.oom_failures++;
      continue;
    }
    report.completed++;
    if (t.completion >= w0 && t.completion <= w1) {
      report.completed_in_window++;
      window_latencies.push_back(t.completion - t.arrival);
    }
  }
  if (!window_latencies.empty()) {
    auto pct = compute_percentiles(window_latencies);
    report.p50_ms = pct.at("p50");
    report.p95_ms = pct.at("p95");
    report.p99_ms = pct.at("p99");
  }
  report.achieved_throughput = double(report.completed_in_window) / ((w1 - w0) / 1000.0);

  // Per-component utilization over the run.
  json per_comp = json::object();
  for (const auto& [digest, tm] : cluster.rm().managers()) {
    double busy = 0;
    int64_t units = 0, completed = 0;
    for (const auto& r : tm.replicas) {
      const ExecutorBase* e = cluster.rm().executor(r.replica_id);
      if (!e) continue;
      busy += e->stats().busy_ms;
      units += e->stats().units_done;
      completed += e->stats().completed;
    }
    double denom = cfg.duration_s * 1000.0 * double(tm.replicas.size());
    per_comp[short_digest(digest)] =
        json{{"role", tm.descriptor.unit_task.role().empty()
                          ? to_string(tm.descriptor.unit_task.task_class)
                          : tm.descriptor.unit_task.role()},
             {"replicas", tm.replicas.size()},
             {"busy_ms", busy},
             {"units_done", units},
             {"invocations_completed", completed},
             {"utilization", denom > 0 ? busy / denom : 0.0}};
  }
  report.per_component = per_comp;

  if (cfg.trace_out) *cfg.trace_out = std::move(traces);
  return report;
}

}  // namespace fissim
