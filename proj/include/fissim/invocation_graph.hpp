// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-request DAG of unit-task invocations with DataRef edges. Graphs are
// immutable after construction; readiness is tracked separately by whoever
// owns the request.

#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "fissim/common.hpp"

namespace fissim {

struct PayloadDesc {
  std::vector<int64_t> shape;
  int64_t elem_bytes = 1;

  int64_t total_bytes() const {
    int64_t n = elem_bytes;
    for (int64_t d : shape) n *= d;
    return n;
  }

  json to_json() const { return json{{"shape", shape}, {"elem_bytes", elem_bytes}}; }

  static PayloadDesc from_json(const json& j) {
    PayloadDesc d;
    d.shape = j.value("shape", std::vector<int64_t>{});
    d.elem_bytes = j.value("elem_bytes", int64_t{1});
    return d;
  }
};

enum class RefState { Placeholder, Materialized };

inline constexpr const char* kClientInput = "client-input";

// Handle to an intermediate tensor. During record it is a placeholder that
// carries only identity plus an estimated payload descriptor; sizes become
// authoritative once the sidecar protocol delivers the real bytes.
struct DataRef {
  std::string ref_id;
  std::string producer;  // invocation id, or kClientInput
  int output_index = 0;
  PayloadDesc desc;
  bool streaming = false;
  RefState state = RefState::Placeholder;
  std::optional<std::string> location;  // "node:gpu:offset" once materialized

  json to_json() const {
    json j{{"ref_id", ref_id},
           {"producer", producer},
           {"output_index", output_index},
           {"desc", desc.to_json()},
           {"streaming", streaming},
           {"state", state == RefState::Placeholder ? "placeholder" : "materialized"}};
    if (location) j["location"] = *location;
    return j;
  }

  static DataRef from_json(const json& j) {
    DataRef r;
    r.ref_id = j.at("ref_id").get<std::string>();
    r.producer = j.value("producer", std::string(kClientInput));
    r.output_index = j.value("output_index", 0);
    if (j.contains("desc")) r.desc = PayloadDesc::from_json(j.at("desc"));
    r.streaming = j.value("streaming", false);
    r.state = j.value("state", "placeholder") == "materialized" ? RefState::Materialized
                                                                : RefState::Placeholder;
    if (j.contains("location")) r.location = j.at("location").get<std::string>();
    return r;
  }
};

// One input slot of an invocation: an inline literal or a DataRef.
using InputSlot = std::variant<json, DataRef>;

inline json input_slot_to_json(const InputSlot& s) {
  if (const auto* lit = std::get_if<json>(&s)) return json{{"kind", "literal"}, {"value", *lit}};
  return json{{"kind", "ref"}, {"ref", std::get<DataRef>(s).to_json()}};
}

inline InputSlot input_slot_from_json(const json& j) {
  if (j.at("kind") == "literal") return j.at("value");
  return DataRef::from_json(j.at("ref"));
}

struct RecordedInvocation {
  std::string invocation_id;
  std::string task_digest;
  std::vector<InputSlot> inputs;
  std::vector<DataRef> outputs;
  bool streaming = false;

  json to_json() const {
    json in = json::array();
    for (const auto& s : inputs) in.push_back(input_slot_to_json(s));
    json out = json::array();
    for (const auto& r : outputs) out.push_back(r.to_json());
    return json{{"invocation_id", invocation_id},
                {"task_digest", task_digest},
                {"inputs", in},
                {"outputs", out},
                {"streaming", streaming}};
  }

  static RecordedInvocation from_json(const json& j) {
    RecordedInvocation inv;
    inv.invocation_id = j.at("invocation_id").get<std::string>();
    inv.task_digest = j.at("task_digest").get<std::string>();
    for (const auto& s : j.value("inputs", json::array())) inv.inputs.push_back(input_slot_from_json(s));
    for (const auto& r : j.value("outputs", json::array())) inv.outputs.push_back(DataRef::from_json(r));
    inv.streaming = j.value("streaming", false);
    return inv;
  }
};

// Edge: producer output feeds a consumer input slot.
struct GraphEdge {
  std::string producer;
  int output_index = 0;
  std::string consumer;
  int input_position = 0;

  bool operator==(const GraphEdge& o) const {
    return producer == o.producer && output_index == o.output_index && consumer == o.consumer &&
           input_position == o.input_position;
  }
};

struct InvocationGraph {
  std::string request_id;
  std::map<std::string, RecordedInvocation> nodes;  // invocation id -> node
  std::vector<GraphEdge> edges;
  // Final output refs, keyed by response channel ("text", "audio", ...).
  std::map<std::string, DataRef> sink_refs;

  json to_json() const {
    json n = json::array();
    for (const auto& [id, inv] : nodes) n.push_back(inv.to_json());
    json e = json::array();
    for (const auto& edge : edges)
      e.push_back(json::array({edge.producer, edge.output_index, edge.consumer, edge.input_position}));
    json sinks = json::object();
    for (const auto& [channel, ref] : sink_refs) sinks[channel] = ref.to_json();
    return json{{"request_id", request_id}, {"nodes", n}, {"edges", e}, {"sink_refs", sinks}};
  }

  static InvocationGraph from_json(const json& j) {
    InvocationGraph g;
    g.request_id = j.value("request_id", "");
    for (const auto& n : j.value("nodes", json::array())) {
      auto inv = RecordedInvocation::from_json(n);
      std::string id = inv.invocation_id;
      g.nodes.emplace(std::move(id), std::move(inv));
    }
    for (const auto& e : j.value("edges", json::array())) {
      GraphEdge edge;
      edge.producer = e.at(0).get<std::string>();
      edge.output_index = e.at(1).get<int>();
      edge.consumer = e.at(2).get<std::string>();
      edge.input_position = e.at(3).get<int>();
      g.edges.push_back(edge);
    }
    if (j.contains("sink_refs")) {
      for (const auto& [channel, r] : j.at("sink_refs").items())
        g.sink_refs.emplace(channel, DataRef::from_json(r));
    }
    return g;
  }
};

namespace detail {

inline std::map<std::string, std::vector<std::string>> downstream_adjacency(
    const InvocationGraph& g) {
  std::map<std::string, std::vector<std::string>> adj;
  for (const auto& [id, _] : g.nodes) adj[id];
  for (const auto& e : g.edges) adj[e.producer].push_back(e.consumer);
  return adj;
}

// One cycle for the error message, found by DFS.
inline std::vector<std::string> find_cycle(const InvocationGraph& g) {
  auto adj = downstream_adjacency(g);
  std::map<std::string, int> color;  // 0 white, 1 gray, 2 black
  std::vector<std::string> stack;
  std::vector<std::string> cycle;
  std::function<bool(const std::string&)> dfs = [&](const std::string& u) {
    color[u] = 1;
    stack.push_back(u);
    for (const auto& v : adj[u]) {
      if (color[v] == 1) {
        auto it = std::find(stack.begin(), stack.end(), v);
        cycle.assign(it, stack.end());
        cycle.push_back(v);
        return true;
      }
      if (color[v] == 0 && dfs(v)) return true;
    }
    stack.pop_back();
    color[u] = 2;
    return false;
  };
  for (const auto& [id, _] : g.nodes) {
    if (color[id] == 0 && dfs(id)) return cycle;
  }
  return {};
}

}  // namespace detail

// Structural validation: referential integrity of edges and sinks, acyclicity.
inline void validate(const InvocationGraph& g) {
  for (const auto& e : g.edges) {
    if (!g.nodes.count(e.producer))
      fail(ErrorCode::Validation, "edge references unknown producer '" + e.producer + "'");
    if (!g.nodes.count(e.consumer))
      fail(ErrorCode::Validation, "edge references unknown consumer '" + e.consumer + "'");
    const auto& prod = g.nodes.at(e.producer);
    if (e.output_index < 0 || e.output_index >= static_cast<int>(prod.outputs.size()))
      fail(ErrorCode::Validation, "edge output index out of range on '" + e.producer + "'");
    const auto& cons = g.nodes.at(e.consumer);
    if (e.input_position < 0 || e.input_position >= static_cast<int>(cons.inputs.size()))
      fail(ErrorCode::Validation, "edge input position out of range on '" + e.consumer + "'");
  }
  for (const auto& [channel, ref] : g.sink_refs) {
    auto it = g.nodes.find(ref.producer);
    if (it == g.nodes.end())
      fail(ErrorCode::Validation, "sink ref for channel '" + channel + "' has no producing node");
    if (ref.output_index < 0 || ref.output_index >= static_cast<int>(it->second.outputs.size()))
      fail(ErrorCode::Validation, "sink ref output index out of range for channel '" + channel + "'");
  }
  auto cycle = detail::find_cycle(g);
  if (!cycle.empty()) {
    std::string msg = "graph contains a cycle: ";
    for (size_t i = 0; i < cycle.size(); ++i) {
      if (i) msg += " -> ";
      msg += cycle[i];
    }
    fail(ErrorCode::Validation, msg);
  }
}

// Deterministic topological order; ties broken by invocation id.
inline std::vector<std::string> topo_order(const InvocationGraph& g) {
  std::map<std::string, int> indegree;
  for (const auto& [id, _] : g.nodes) indegree[id] = 0;
  auto adj = detail::downstream_adjacency(g);
  for (const auto& e : g.edges) indegree[e.consumer]++;
  std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
  for (const auto& [id, deg] : indegree)
    if (deg == 0) ready.push(id);
  std::vector<std::string> order;
  while (!ready.empty()) {
    std::string id = ready.top();
    ready.pop();
    order.push_back(id);
    for (const auto& v : adj[id]) {
      if (--indegree[v] == 0) ready.push(v);
    }
  }
  if (order.size() != g.nodes.size()) fail(ErrorCode::Validation, "graph contains a cycle");
  return order;
}

// Nodes whose producers are all completed and which are not themselves done.
// Informational: dispatch is simultaneous; executors block on data arrival.
inline std::set<std::string> ready_set(const InvocationGraph& g,
                                       const std::set<std::string>& completed) {
  for (const auto& id : completed) {
    if (!g.nodes.count(id)) fail(ErrorCode::Validation, "unknown invocation id '" + id + "' in completed set");
  }
  std::map<std::string, std::vector<std::string>> producers_of;
  for (const auto& e : g.edges) producers_of[e.consumer].push_back(e.producer);
  std::set<std::string> out;
  for (const auto& [id, _] : g.nodes) {
    if (completed.count(id)) continue;
    bool ok = true;
    for (const auto& p : producers_of[id]) {
      if (!completed.count(p)) {
        ok = false;
        break;
      }
    }
    if (ok) out.insert(id);
  }
  return out;
}

}  // namespace fissim
