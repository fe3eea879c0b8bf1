// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deployment planner: chooses tensor-parallel degrees, replica counts, and
// GPU placement maximizing the minimum component throughput-to-demand ratio.
// The search enumerates TP assignments, water-fills replicas onto the
// bottleneck component under an exact node-packing check, and also evaluates
// the monolithic configuration as a candidate. oracle_plan() is the
// independent exhaustive validator used by the test suite.

#pragma once

#include <algorithm>
#include <optional>

#include "fissim/profiles.hpp"
#include "fissim/workload.hpp"

namespace fissim {

// Shared with the control plane's GPU pool.
struct GpuInfo {
  int gpu_id = 0;
  int node_id = 0;
  int64_t capacity_bytes = 0;
};

struct PlannerComponent {
  std::string name;
  ComponentProfile profile;
  int64_t weight_bytes = 0;
  std::set<int> allowed_tp{1};
  double demand = 0;  // work units per request; 0 keeps a minimal deployment
};

// Monolithic alternative: every free GPU runs one replica serving whole
// requests under an exclusive component lock.
struct MonolithCandidate {
  int64_t weight_bytes = 0;
  double exclusive_ms_per_request = 0;
};

struct PlannerInputs {
  std::vector<PlannerComponent> components;
  std::vector<GpuInfo> free_gpus;
  bool pair_talker_generator = true;
  std::optional<MonolithCandidate> monolith;
  bool monolith_only = false;  // force the monolithic configuration
};

struct ReplicaPlacementPlan {
  std::vector<int> gpu_ids;
  std::string owner_group;
};

struct DeploymentPlan {
  std::map<std::string, int> tp_degree;  // component -> TP
  std::map<std::string, std::vector<ReplicaPlacementPlan>> placements;
  double objective_value = 0;  // min over components of capacity/demand, req/ms
  bool monolith = false;

  int total_gpus() const {
    std::set<std::pair<int, std::string>> counted;
    int n = 0;
    std::set<int> gpus;
    for (const auto& [comp, reps] : placements)
      for (const auto& r : reps)
        for (int g : r.gpu_ids) gpus.insert(g);
    n = static_cast<int>(gpus.size());
    (void)counted;
    return n;
  }

  json to_json() const {
    json comps = json::object();
    for (const auto& [name, reps] : placements) {
      json rs = json::array();
      for (const auto& r : reps)
        rs.push_back(json{{"gpu_ids", r.gpu_ids}, {"owner_group", r.owner_group}});
      comps[name] = json{{"tp_degree", tp_degree.count(name) ? tp_degree.at(name) : 1},
                         {"replicas", rs}};
    }
    return json{{"components", comps},
                {"objective_value", objective_value},
                {"monolith", monolith}};
  }

  static DeploymentPlan from_json(const json& j) {
    DeploymentPlan p;
    json components = j.value("components", json::object());
    for (const auto& [name, c] : components.items()) {
      p.tp_degree[name] = c.value("tp_degree", 1);
      for (const auto& r : c.value("replicas", json::array())) {
        ReplicaPlacementPlan rp;
        rp.gpu_ids = r.value("gpu_ids", std::vector<int>{});
        rp.owner_group = r.value("owner_group", "");
        p.placements[name].push_back(std::move(rp));
      }
    }
    p.objective_value = j.value("objective_value", 0.0);
    p.monolith = j.value("monolith", false);
    return p;
  }
};

// Feasibility invariants every emitted plan satisfies: disjoint placements
// (same owner group may co-locate), TP replicas on one node, weights fit.
inline void validate_plan(const DeploymentPlan& plan, const std::vector<GpuInfo>& gpus,
                          const std::vector<PlannerComponent>& components) {
  std::map<int, GpuInfo> by_id;
  for (const auto& g : gpus) by_id[g.gpu_id] = g;
  std::map<int, std::string> owner_of;
  std::map<int, int64_t> used;
  std::map<std::string, const PlannerComponent*> comp_of;
  for (const auto& c : components) comp_of[c.name] = &c;
  for (const auto& [name, reps] : plan.placements) {
    auto cit = comp_of.find(name);
    for (const auto& r : reps) {
      if (r.gpu_ids.empty()) fail(ErrorCode::Validation, "empty replica placement for " + name);
      int node = -1;
      for (int g : r.gpu_ids) {
        auto git = by_id.find(g);
        if (git == by_id.end()) fail(ErrorCode::Validation, "plan references unknown gpu");
        if (node < 0) node = git->second.node_id;
        if (git->second.node_id != node)
          fail(ErrorCode::Validation, "TP replica of " + name + " spans nodes");
        std::string owner = r.owner_group.empty() ? name + "#" + std::to_string(g) : r.owner_group;
        auto oit = owner_of.find(g);
        if (oit != owner_of.end() && oit->second != owner)
          fail(ErrorCode::Validation, "overlapping placements on gpu " + std::to_string(g));
        owner_of[g] = owner;
        if (cit != comp_of.end()) {
          used[g] += cit->second->weight_bytes / static_cast<int64_t>(r.gpu_ids.size());
          if (used[g] > git->second.capacity_bytes)
            fail(ErrorCode::Validation, "weight exceeds capacity on gpu " + std::to_string(g));
        }
      }
    }
  }
}

namespace planner_detail {

// Effective component after talker-generator pairing.
struct EffComp {
  std::string name;
  std::vector<std::string> members;  // original component names
  double demand = 0;
  int64_t weight_bytes = 0;
  std::set<int> allowed_tp;
  std::map<int, double> rate;  // tp -> work units per ms
  bool is_pair = false;
};

inline std::vector<EffComp> effective_components(const PlannerInputs& in) {
  const PlannerComponent* talker = nullptr;
  const PlannerComponent* generator = nullptr;
  int talkers = 0, generators = 0;
  for (const auto& c : in.components) {
    if (c.profile.kind == ProfileKind::AutoregressiveTalker) {
      talker = &c;
      ++talkers;
    }
    if (c.profile.kind == ProfileKind::Generator) {
      generator = &c;
      ++generators;
    }
  }
  bool pair = in.pair_talker_generator && talkers == 1 && generators == 1;

  std::vector<EffComp> out;
  for (const auto& c : in.components) {
    if (pair && (&c == talker || &c == generator)) continue;
    EffComp e;
    e.name = c.name;
    e.members = {c.name};
    e.demand = c.demand;
    e.weight_bytes = c.weight_bytes;
    for (int tp : c.allowed_tp) {
      if (!c.profile.tp_scaling.count(tp)) continue;  // no scaling data: unusable degree
      e.allowed_tp.insert(tp);
      e.rate[tp] = c.profile.saturated_rate(tp);
    }
    if (e.allowed_tp.empty()) e.allowed_tp = {};  // caught as infeasible later
    out.push_back(std::move(e));
  }
  if (pair) {
    EffComp e;
    e.name = talker->name + "+" + generator->name;
    e.members = {talker->name, generator->name};
    e.demand = std::max(talker->demand, generator->demand);
    e.weight_bytes = talker->weight_bytes + generator->weight_bytes;
    e.is_pair = true;
    std::set_intersection(talker->allowed_tp.begin(), talker->allowed_tp.end(),
                          generator->allowed_tp.begin(), generator->allowed_tp.end(),
                          std::inserter(e.allowed_tp, e.allowed_tp.begin()));
    if (e.allowed_tp.empty()) e.allowed_tp = {1};
    std::set<int> usable;
    for (int tp : e.allowed_tp) {
      if (!talker->profile.tp_scaling.count(tp) || !generator->profile.tp_scaling.count(tp))
        continue;
      usable.insert(tp);
      e.rate[tp] =
          std::min(talker->profile.saturated_rate(tp), generator->profile.saturated_rate(tp));
    }
    e.allowed_tp = std::move(usable);
    out.push_back(std::move(e));
  }
  std::sort(out.begin(), out.end(), [](const EffComp& a, const EffComp& b) { return a.name < b.name; });
  return out;
}

// Exact packing of replica sizes into per-node free-gpu bins. Returns the
// node index per replica, or nullopt.
inline std::optional<std::vector<int>> pack(const std::vector<int>& sizes,
                                            std::vector<int> node_free) {
  std::vector<size_t> order(sizes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return sizes[a] > sizes[b]; });
  std::vector<int> assign(sizes.size(), -1);
  std::function<bool(size_t)> dfs = [&](size_t k) {
    if (k == order.size()) return true;
    int size = sizes[order[k]];
    std::set<int> tried;  // symmetry: skip nodes with identical remaining space
    for (size_t n = 0; n < node_free.size(); ++n) {
      if (node_free[n] < size || tried.count(node_free[n])) continue;
      tried.insert(node_free[n]);
      node_free[n] -= size;
      assign[order[k]] = static_cast<int>(n);
      if (dfs(k + 1)) return true;
      node_free[n] += size;
      assign[order[k]] = -1;
    }
    return false;
  };
  if (!dfs(0)) return std::nullopt;
  return assign;
}

struct Candidate {
  double objective = 0;
  int gpus_used = 0;
  std::vector<int> tps;     // per effective component
  std::vector<int> counts;  // replicas per effective component
  std::vector<double> leximin;  // demanded ratios, ascending
  bool valid = false;
};

inline bool better(const Candidate& a, const Candidate& b) {
  if (!b.valid) return a.valid;
  if (!a.valid) return false;
  if (a.objective != b.objective) return a.objective > b.objective;
  for (size_t i = 0; i < std::min(a.leximin.size(), b.leximin.size()); ++i)
    if (a.leximin[i] != b.leximin[i]) return a.leximin[i] > b.leximin[i];
  if (a.gpus_used != b.gpus_used) return a.gpus_used < b.gpus_used;
  if (a.tps != b.tps) return a.tps < b.tps;
  return a.counts < b.counts;
}

inline std::vector<double> leximin_of(const std::vector<EffComp>& comps,
                                      const std::vector<int>& tps, const std::vector<int>& counts) {
  std::vector<double> v;
  for (size_t i = 0; i < comps.size(); ++i)
    if (comps[i].demand > 0)
      v.push_back(double(counts[i]) * comps[i].rate.at(tps[i]) / comps[i].demand);
  std::sort(v.begin(), v.end());
  return v;
}

struct PoolShape {
  std::vector<int> node_ids;
  std::vector<int> node_free;
  int total = 0;
  int64_t min_capacity = 0;
};

inline PoolShape pool_shape(const std::vector<GpuInfo>& gpus) {
  PoolShape ps;
  std::map<int, int> per_node;
  ps.min_capacity = std::numeric_limits<int64_t>::max();
  for (const auto& g : gpus) {
    per_node[g.node_id]++;
    ps.min_capacity = std::min(ps.min_capacity, g.capacity_bytes);
    ps.total++;
  }
  for (const auto& [node, n] : per_node) {
    ps.node_ids.push_back(node);
    ps.node_free.push_back(n);
  }
  return ps;
}

inline std::vector<int> feasible_tps(const EffComp& c, const PoolShape& ps) {
  std::vector<int> tps;
  int max_node = ps.node_free.empty() ? 0 : *std::max_element(ps.node_free.begin(), ps.node_free.end());
  for (int tp : c.allowed_tp) {
    if (!c.rate.count(tp)) continue;
    if (tp > max_node) continue;
    if (c.weight_bytes / tp > ps.min_capacity) continue;
    tps.push_back(tp);
  }
  return tps;
}

inline double objective_of(const std::vector<EffComp>& comps, const std::vector<int>& tps,
                           const std::vector<int>& counts) {
  double obj = std::numeric_limits<double>::infinity();
  bool any = false;
  for (size_t i = 0; i < comps.size(); ++i) {
    if (comps[i].demand <= 0) continue;
    any = true;
    obj = std::min(obj, double(counts[i]) * comps[i].rate.at(tps[i]) / comps[i].demand);
  }
  return any ? obj : 0.0;
}

inline std::vector<int> replica_sizes(const std::vector<int>& tps, const std::vector<int>& counts) {
  std::vector<int> sizes;
  for (size_t i = 0; i < tps.size(); ++i)
    for (int k = 0; k < counts[i]; ++k) sizes.push_back(tps[i]);
  return sizes;
}

// Materializes gpu ids from a packing assignment, in canonical order.
inline DeploymentPlan materialize(const std::vector<EffComp>& comps, const Candidate& cand,
                                  const std::vector<GpuInfo>& gpus) {
  PoolShape ps = pool_shape(gpus);
  auto sizes = replica_sizes(cand.tps, cand.counts);
  auto assign = pack(sizes, ps.node_free);
  if (!assign) fail(ErrorCode::Internal, "planner packing disappeared at materialization");

  // Free gpu ids per node, ascending.
  std::map<int, std::vector<int>> node_gpus;
  for (const auto& g : gpus) node_gpus[g.node_id].push_back(g.gpu_id);
  for (auto& [node, ids] : node_gpus) std::sort(ids.begin(), ids.end());
  std::map<int, size_t> node_cursor;

  DeploymentPlan plan;
  plan.objective_value = cand.objective;
  size_t flat = 0;
  for (size_t i = 0; i < comps.size(); ++i) {
    const EffComp& c = comps[i];
    for (int k = 0; k < cand.counts[i]; ++k, ++flat) {
      int node = ps.node_ids[assign->at(flat)];
      auto& ids = node_gpus[node];
      size_t& cur = node_cursor[node];
      std::vector<int> taken;
      for (int t = 0; t < cand.tps[i]; ++t) taken.push_back(ids.at(cur++));
      std::string group = c.is_pair ? "pair:" + c.name + ":" + std::to_string(k) : "";
      for (const auto& member : c.members) {
        ReplicaPlacementPlan rp;
        rp.gpu_ids = taken;
        rp.owner_group = group;
        plan.placements[member].push_back(std::move(rp));
      }
      for (const auto& member : c.members) plan.tp_degree[member] = cand.tps[i];
    }
  }
  return plan;
}

inline DeploymentPlan monolith_plan(const PlannerInputs& in) {
  if (!in.monolith) fail(ErrorCode::Infeasible, "no monolith candidate provided");
  PoolShape ps = pool_shape(in.free_gpus);
  if (in.free_gpus.empty()) fail(ErrorCode::Infeasible, "no free gpus");
  if (in.monolith->weight_bytes > ps.min_capacity)
    fail(ErrorCode::Oom, "monolith weights " + std::to_string(in.monolith->weight_bytes) +
                             " exceed single-gpu capacity " + std::to_string(ps.min_capacity));
  DeploymentPlan plan;
  plan.monolith = true;
  plan.objective_value =
      double(in.free_gpus.size()) * (1.0 / in.monolith->exclusive_ms_per_request);
  for (const auto& g : in.free_gpus) {
    ReplicaPlacementPlan rp;
    rp.gpu_ids = {g.gpu_id};
    plan.placements["monolith"].push_back(std::move(rp));
  }
  plan.tp_degree["monolith"] = 1;
  return plan;
}

template <typename PerTpVector>
void enumerate_tp_vectors(const std::vector<EffComp>& comps, const PoolShape& ps,
                          PerTpVector&& fn) {
  std::vector<std::vector<int>> options;
  for (const auto& c : comps) {
    auto tps = feasible_tps(c, ps);
    if (tps.empty())
      fail(ErrorCode::Infeasible,
           "component '" + c.name + "' fits at no allowed TP degree on this pool");
    options.push_back(std::move(tps));
  }
  std::vector<int> tps(comps.size());
  std::function<void(size_t)> rec = [&](size_t i) {
    if (i == comps.size()) {
      fn(tps);
      return;
    }
    for (int tp : options[i]) {
      tps[i] = tp;
      rec(i + 1);
    }
  };
  rec(0);
}

}  // namespace planner_detail

// Fission planner: maximizes min over components of capacity/demand. Also
// evaluates the monolithic candidate when provided, and picks fission only
// when it wins.
inline DeploymentPlan plan_deployment(const PlannerInputs& in) {
  using namespace planner_detail;
  if (in.free_gpus.empty()) fail(ErrorCode::Infeasible, "no free gpus");
  if (in.monolith_only) return monolith_plan(in);
  if (in.components.empty()) fail(ErrorCode::Infeasible, "no components to place");

  auto comps = effective_components(in);
  PoolShape ps = pool_shape(in.free_gpus);

  Candidate best;
  enumerate_tp_vectors(comps, ps, [&](const std::vector<int>& tps) {
    std::vector<int> counts(comps.size(), 1);
    if (!pack(replica_sizes(tps, counts), ps.node_free)) return;
    // Leximin water-fill: always grow the most-bottlenecked component that
    // can still grow; a stuck bottleneck pins the objective but remaining
    // GPUs keep strengthening the other components.
    std::set<size_t> stuck;
    for (;;) {
      std::vector<std::pair<double, size_t>> order;
      for (size_t i = 0; i < comps.size(); ++i) {
        if (comps[i].demand <= 0 || stuck.count(i)) continue;
        order.emplace_back(double(counts[i]) * comps[i].rate.at(tps[i]) / comps[i].demand, i);
      }
      if (order.empty()) break;
      std::sort(order.begin(), order.end());
      bool grew = false;
      for (const auto& [ratio, i] : order) {
        counts[i]++;
        if (pack(replica_sizes(tps, counts), ps.node_free)) {
          grew = true;
          break;
        }
        counts[i]--;
        stuck.insert(i);
      }
      if (!grew) break;
    }
    Candidate cand;
    cand.valid = true;
    cand.tps = tps;
    cand.counts = counts;
    cand.objective = objective_of(comps, tps, counts);
    cand.leximin = leximin_of(comps, tps, counts);
    cand.gpus_used = 0;
    for (size_t i = 0; i < comps.size(); ++i) cand.gpus_used += tps[i] * counts[i];
    if (better(cand, best)) best = cand;
  });

  if (!best.valid) {
    // Even one replica of everything does not fit.
    fail(ErrorCode::Infeasible, "components do not fit on the pool at any TP assignment");
  }

  DeploymentPlan fission = materialize(comps, best, in.free_gpus);
  if (in.monolith && in.monolith->weight_bytes <= ps.min_capacity) {
    DeploymentPlan mono = monolith_plan(in);
    if (mono.objective_value > fission.objective_value) return mono;
  }
  return fission;
}

// Exhaustive validation oracle: enumerates TP assignments and every
// undominated replica-count vector (objective thresholds), with an exact
// packing check. Bounded to small instances.
inline DeploymentPlan oracle_plan(const PlannerInputs& in) {
  using namespace planner_detail;
  if (in.free_gpus.size() > 16)
    fail(ErrorCode::Validation, "oracle tractability bound: at most 16 gpus");
  if (in.components.size() > 5)
    fail(ErrorCode::Validation, "oracle tractability bound: at most 5 components");
  if (in.free_gpus.empty()) fail(ErrorCode::Infeasible, "no free gpus");
  if (in.monolith_only) return monolith_plan(in);

  auto comps = effective_components(in);
  PoolShape ps = pool_shape(in.free_gpus);

  Candidate best;
  enumerate_tp_vectors(comps, ps, [&](const std::vector<int>& tps) {
    // Candidate objective levels: every k * rate / demand.
    std::vector<double> levels{0.0};
    for (size_t i = 0; i < comps.size(); ++i) {
      if (comps[i].demand <= 0) continue;
      int max_k = ps.total / tps[i];
      for (int k = 1; k <= max_k; ++k)
        levels.push_back(double(k) * comps[i].rate.at(tps[i]) / comps[i].demand);
    }
    std::sort(levels.begin(), levels.end(), std::greater<>());
    for (double tau : levels) {
      std::vector<int> counts(comps.size(), 1);
      bool ok = true;
      for (size_t i = 0; i < comps.size(); ++i) {
        if (comps[i].demand <= 0) continue;
        double rate = comps[i].rate.at(tps[i]);
        int need = std::max<int>(1, static_cast<int>(std::ceil(tau * comps[i].demand / rate - 1e-9)));
        counts[i] = need;
        if (need * tps[i] > ps.total) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      if (!pack(replica_sizes(tps, counts), ps.node_free)) continue;
      Candidate cand;
      cand.valid = true;
      cand.tps = tps;
      cand.counts = counts;
      cand.objective = objective_of(comps, tps, counts);
      cand.gpus_used = 0;
      for (size_t i = 0; i < comps.size(); ++i) cand.gpus_used += tps[i] * counts[i];
      if (better(cand, best)) best = cand;
      break;  // levels are sorted: the first feasible is the max for this vector
    }
  });

  if (!best.valid) fail(ErrorCode::Infeasible, "components do not fit on the pool at any TP assignment");
  DeploymentPlan fission = materialize(comps, best, in.free_gpus);
  if (in.monolith && in.monolith->weight_bytes <= ps.min_capacity) {
    DeploymentPlan mono = monolith_plan(in);
    if (mono.objective_value > fission.objective_value) return mono;
  }
  return fission;
}

// Full-request exclusive compute time of a monolithic replica, per component
// demands (work units per request). Thinker decode amortizes across its max
// batch; the talker runs batch-1; the generator is sequential.
inline double monolith_exclusive_ms(const std::map<std::string, ComponentProfile>& stages,
                                    const std::map<std::string, double>& demand) {
  double total = 0;
  for (const auto& [name, p] : stages) {
    auto dit = demand.find(name);
    double d = dit == demand.end() ? 0.0 : dit->second;
    if (d <= 0) continue;
    switch (p.kind) {
      case ProfileKind::Encoder:
        total += d * (p.base_ms / p.max_batch + p.per_item_ms);
        break;
      case ProfileKind::LLMPrefillDecode:
        total += d * (p.decode_a_ms + p.decode_b_ms * p.max_batch) / p.max_batch;
        break;
      case ProfileKind::AutoregressiveTalker:
        total += d * (p.decode_a_ms + p.decode_b_ms);  // batch-1
        break;
      case ProfileKind::Generator:
        total += d * p.per_chunk_ms;
        break;
      case ProfileKind::Monolith:
        break;
    }
  }
  return total;
}

// Text rendering of a plan: one box per GPU, grouped by node.
inline std::string render_plan_table(const DeploymentPlan& plan,
                                     const std::vector<GpuInfo>& gpus) {
  std::map<int, std::string> label_of;
  for (const auto& [comp, reps] : plan.placements) {
    for (size_t k = 0; k < reps.size(); ++k) {
      for (int g : reps[k].gpu_ids) {
        std::string label = comp + " r" + std::to_string(k);
        if (reps[k].gpu_ids.size() > 1)
          label += " (TP-" + std::to_string(reps[k].gpu_ids.size()) + ")";
        if (!label_of[g].empty()) label_of[g] += " + ";
        label_of[g] += label;
      }
    }
  }
  std::map<int, std::vector<const GpuInfo*>> by_node;
  for (const auto& g : gpus) by_node[g.node_id].push_back(&g);
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "objective %.6f req/s%s\n", plan.objective_value * 1000.0,
                plan.monolith ? " (monolith)" : "");
  out += line;
  for (const auto& [node, list] : by_node) {
    out += "node" + std::to_string(node) + ":\n";
    for (const auto* g : list) {
      std::string label = label_of.count(g->gpu_id) ? label_of[g->gpu_id] : "(free)";
      std::snprintf(line, sizeof(line), "  gpu%-3d [%s]\n", g->gpu_id, label.c_str());
      out += line;
    }
  }
  return out;
}

}  // namespace fissim
