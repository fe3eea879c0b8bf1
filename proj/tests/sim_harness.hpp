// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Test-only mini cluster: kernel + sidecar fabric + dispatcher + hand-spawned
// executors, without the control plane.

#pragma once

#include <memory>
#include <vector>

#include "fissim/task_dispatcher.hpp"

namespace fissim::testing {

struct MiniCluster {
  explicit MiniCluster(ClockMode mode = ClockMode::Virtual,
                       std::map<int, int> topology = {{0, 0}, {1, 0}, {2, 0}, {3, 0}},
                       SidecarConfig sidecar_cfg = {})
      : kernel(mode), fabric(kernel, std::move(topology), sidecar_cfg), dispatcher(kernel, fabric) {}

  ExecutorEnv env() {
    ExecutorEnv e;
    e.kernel = &kernel;
    e.sidecar = &fabric;
    e.to_dispatcher = [this](Frame f) { dispatcher.on_executor_frame(f); };
    return e;
  }

  // Spawns an executor replica and registers it with the dispatcher.
  ExecutorBase* spawn(const UnitTaskSpec& unit, const ComponentProfile& profile,
                      std::vector<int> gpus, ShapeRules shapes = {},
                      std::map<std::string, ComponentProfile> stages = {}) {
    ReplicaSpec spec;
    spec.task_digest = canonical_hash(unit);
    spec.replica_id = short_digest(spec.task_digest) + "/r" +
                      std::to_string(replica_counts[spec.task_digest]++);
    spec.unit = unit;
    spec.profile = profile;
    spec.stage_profiles = std::move(stages);
    spec.shapes = shapes;
    spec.gpus = gpus;
    spec.tp = static_cast<int>(gpus.size());
    executors.push_back(make_executor(env(), spec));
    ExecutorBase* exec = executors.back().get();
    ReplicaEndpoint ep;
    ep.replica_id = spec.replica_id;
    ep.task_digest = spec.task_digest;
    ep.home_gpu = spec.home_gpu();
    ep.gpus = gpus;
    ep.deliver = [exec](const Frame& f) { exec->handle_frame(f); };
    dispatcher.add_replica(std::move(ep));
    return exec;
  }

  // Spawns one executor per child of a composite using a role->profile map.
  std::map<std::string, ExecutorBase*> spawn_for_composite(
      const CompositeTaskSpec& comp, const std::map<std::string, ComponentProfile>& by_role,
      ShapeRules shapes = {}) {
    std::map<std::string, ExecutorBase*> out;
    for (const auto& [name, child] : comp.children) {
      const auto* unit = std::get_if<UnitTaskSpec>(&child);
      if (!unit) continue;
      auto it = by_role.find(name);
      if (it == by_role.end()) fail(ErrorCode::Internal, "no test profile for role " + name);
      out[name] = spawn(*unit, it->second, {next_gpu++ % 4}, shapes);
    }
    return out;
  }

  SimKernel kernel;
  SidecarFabric fabric;
  TaskDispatcher dispatcher;
  std::vector<std::unique_ptr<ExecutorBase>> executors;
  std::map<std::string, int> replica_counts;
  int next_gpu = 0;
};

inline ComponentProfile encoder_profile(double base, double per_item, int max_batch = 8) {
  ComponentProfile p;
  p.name = "test-encoder";
  p.kind = ProfileKind::Encoder;
  p.base_ms = base;
  p.per_item_ms = per_item;
  p.max_batch = max_batch;
  return p;
}

inline ComponentProfile llm_profile(double a, double b, int max_batch, double prefill = 0) {
  ComponentProfile p;
  p.name = "test-llm";
  p.kind = ProfileKind::LLMPrefillDecode;
  p.decode_a_ms = a;
  p.decode_b_ms = b;
  p.max_batch = max_batch;
  p.prefill_ms_per_token = prefill;
  return p;
}

inline ComponentProfile talker_profile(double a, double b, int max_batch) {
  ComponentProfile p = llm_profile(a, b, max_batch);
  p.name = "test-talker";
  p.kind = ProfileKind::AutoregressiveTalker;
  return p;
}

inline ComponentProfile generator_profile(double per_chunk) {
  ComponentProfile p;
  p.name = "test-generator";
  p.kind = ProfileKind::Generator;
  p.per_chunk_ms = per_chunk;
  return p;
}

inline ComponentProfile monolith_profile(std::vector<std::string> components, int admit_cap = 32) {
  ComponentProfile p;
  p.name = "test-monolith";
  p.kind = ProfileKind::Monolith;
  p.components = std::move(components);
  p.admit_cap = admit_cap;
  return p;
}

}  // namespace fissim::testing
