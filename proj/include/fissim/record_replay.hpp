// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-phase execution of composite-task logic. Record runs the composite's
// invoke body with placeholder results and reconstructs the invocation
// subgraph from placeholder identity; replay runs the identical body with
// real results and must follow the same path. Placeholders are opaque:
// touching content during record raises a determinism-hazard error instead of
// silently corrupting the capture.

#pragma once

#include <condition_variable>
#include <cstdio>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fissim/invocation_graph.hpp"
#include "fissim/profiles.hpp"
#include "fissim/task_model.hpp"

namespace fissim {

// Sampled generation sizes carried on the request; the workload generator
// fills these in, the executors consume them.
struct GenSizes {
  int64_t input_tokens = 32;
  int64_t output_tokens = 64;
  int64_t chunks = 128;

  static GenSizes from_request(const json& request) {
    GenSizes g;
    if (request.contains("gen")) {
      const json& j = request.at("gen");
      g.input_tokens = j.value("input_tokens", g.input_tokens);
      g.output_tokens = j.value("output_tokens", g.output_tokens);
      g.chunks = j.value("chunks", g.chunks);
    } else if (request.contains("text")) {
      g.input_tokens = std::max<int64_t>(1, static_cast<int64_t>(request.at("text").get<std::string>().size() / 4));
    }
    if (g.input_tokens < 0 || g.output_tokens < 1 || g.chunks < 0)
      fail(ErrorCode::Validation, "request gen sizes out of range");
    return g;
  }
};

// ---------------------------------------------------------------------------
// Streaming results

class ChunkStream {
 public:
  struct Chunk {
    json meta;
    std::vector<uint8_t> bytes;
  };

  void push(Chunk c) {
    {
      std::lock_guard lk(m_);
      if (closed_) return;
      q_.push_back(std::move(c));
      ++pushed_;
    }
    cv_.notify_all();
  }

  void close() {
    {
      std::lock_guard lk(m_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  void fail(Error e) {
    {
      std::lock_guard lk(m_);
      if (!error_) error_ = std::move(e);
      closed_ = true;
    }
    cv_.notify_all();
  }

  // Blocking pop; nullopt at end of stream. A stored failure is thrown once
  // the queue drains so earlier chunks are still observable.
  std::optional<Chunk> pop() {
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return !q_.empty() || closed_; });
    if (!q_.empty()) {
      Chunk c = std::move(q_.front());
      q_.pop_front();
      return c;
    }
    if (error_) throw *error_;
    return std::nullopt;
  }

  bool try_pop(Chunk& out) {
    std::lock_guard lk(m_);
    if (q_.empty()) {
      if (closed_ && error_) throw *error_;
      return false;
    }
    out = std::move(q_.front());
    q_.pop_front();
    return true;
  }

  bool finished() const {
    std::lock_guard lk(m_);
    return closed_ && q_.empty() && !error_;
  }

  bool closed() const {
    std::lock_guard lk(m_);
    return closed_;
  }

  size_t pushed() const {
    std::lock_guard lk(m_);
    return pushed_;
  }

 private:
  mutable std::mutex m_;
  std::condition_variable cv_;
  std::deque<Chunk> q_;
  bool closed_ = false;
  size_t pushed_ = 0;
  std::optional<Error> error_;
};

// Per-output real result delivered by the dispatcher at replay time. Sink
// outputs carry a stream; data-plane intermediates carry only the
// materialized ref (their bytes moved producer->consumer via sidecars and
// never touched the control plane).
struct OutputHandle {
  DataRef ref;
  std::shared_ptr<ChunkStream> stream;
};

using ResultsMap = std::map<std::string, std::vector<OutputHandle>>;

// ---------------------------------------------------------------------------
// Task results as seen by composite logic

class TaskResult {
 public:
  TaskResult() = default;

  const std::string& invocation_id() const { return invocation_id_; }
  size_t num_outputs() const { return refs_.size(); }

  const DataRef& ref(size_t i = 0) const {
    if (i >= refs_.size())
      fail(ErrorCode::Validation, "output index " + std::to_string(i) + " out of range for " + invocation_id_);
    return refs_[i];
  }

  // State probe; metadata access is always allowed.
  bool materialized() const {
    return !refs_.empty() && refs_[0].state == RefState::Materialized;
  }

  std::shared_ptr<ChunkStream> stream(size_t i = 0) const {
    guard_content("stream");
    if (i >= handles_.size() || !handles_[i].stream)
      fail(ErrorCode::Internal, "no stream available for output " + std::to_string(i) + " of " + invocation_id_);
    return handles_[i].stream;
  }

 private:
  friend class RecordContext;
  friend class ReplayContext;

  void guard_content(const char* what) const {
    if (record_mode_)
      fail(ErrorCode::DeterminismHazard,
           std::string("placeholder ") + what + " inspected during record (invocation " +
               invocation_id_ + "); composite control flow must not depend on task results");
  }

  std::string invocation_id_;
  std::vector<DataRef> refs_;
  std::vector<OutputHandle> handles_;
  bool record_mode_ = true;
};

// Input builder; keeps composite bodies tidy and makes forged refs impossible
// through the public API.
class Inputs {
 public:
  Inputs& literal(json v) {
    slots_.emplace_back(std::move(v));
    return *this;
  }

  Inputs& result(const TaskResult& r, size_t output_index = 0) {
    slots_.emplace_back(r.ref(output_index));
    return *this;
  }

  std::vector<InputSlot> take() { return std::move(slots_); }

 private:
  std::vector<InputSlot> slots_;
};

class InvokeContext {
 public:
  virtual ~InvokeContext() = default;
  virtual TaskResult invoke(const std::string& child_name, Inputs inputs) = 0;
  virtual const json& request() const = 0;
  virtual bool recording() const = 0;
};

// Composite output: response channel -> (result, output index).
struct ResponseChannels {
  struct Binding {
    TaskResult result;
    int output_index = 0;
  };
  std::map<std::string, Binding> channels;
};

using InvokeFn =
    std::function<ResponseChannels(InvokeContext&, const CompositeTaskSpec&, const json& request)>;

// ---------------------------------------------------------------------------
// Per-request output planning: how many outputs a unit invocation produces
// and their estimated payload descriptors.

struct PlannedOutput {
  PayloadDesc desc;
  bool streaming = false;
};

inline std::vector<PlannedOutput> plan_outputs(const UnitTaskSpec& unit,
                                               const std::vector<InputSlot>& inputs,
                                               const json& request, const ShapeRules& shapes) {
  GenSizes gen = GenSizes::from_request(request);
  std::vector<PlannedOutput> outs;
  switch (unit.task_class) {
    case TaskClass::Encoder: {
      const json* item = nullptr;
      for (const auto& s : inputs) {
        if (const auto* lit = std::get_if<json>(&s)) {
          item = lit;
          break;
        }
      }
      if (!item) fail(ErrorCode::Validation, "encoder invocation requires an item literal input");
      outs.push_back({shapes.embed_desc(*item), false});
      break;
    }
    case TaskClass::LLM: {
      std::string role = unit.role();
      if (role == "talker") {
        outs.push_back({shapes.audio_token_stream_desc(gen.chunks), true});
      } else if (role == "omni_monolith") {
        outs.push_back({shapes.text_stream_desc(gen.output_tokens), true});
        bool capability = false;
        auto it = unit.extra_config.find("audio_output");
        if (it != unit.extra_config.end()) {
          if (const bool* b = std::get_if<bool>(&it->second)) capability = *b;
        }
        if (capability && request.value("audio_output", false))
          outs.push_back({shapes.audio_stream_desc(gen.chunks), true});
      } else {
        outs.push_back({shapes.text_stream_desc(gen.output_tokens), true});
        if (unit.emit_hidden_states && request.value("audio_output", false))
          outs.push_back({shapes.hidden_chunk_desc(gen.output_tokens), true});
      }
      break;
    }
    case TaskClass::Generator:
      outs.push_back({shapes.audio_stream_desc(gen.chunks), true});
      break;
  }
  return outs;
}

// ---------------------------------------------------------------------------
// Placeholder matching

inline std::vector<GraphEdge> match_placeholders(const std::vector<RecordedInvocation>& session) {
  if (session.empty()) fail(ErrorCode::Validation, "empty record session");
  // ref_id -> (producer id, output index, position in session)
  std::map<std::string, std::tuple<std::string, int, size_t>> producers;
  std::vector<GraphEdge> edges;
  for (size_t i = 0; i < session.size(); ++i) {
    const auto& inv = session[i];
    for (size_t pos = 0; pos < inv.inputs.size(); ++pos) {
      const auto* ref = std::get_if<DataRef>(&inv.inputs[pos]);
      if (!ref) continue;
      if (ref->producer == kClientInput) continue;
      auto it = producers.find(ref->ref_id);
      if (it == producers.end())
        fail(ErrorCode::DanglingRef, "input ref '" + ref->ref_id + "' of invocation '" +
                                         inv.invocation_id + "' has no producer in this session");
      edges.push_back(GraphEdge{std::get<0>(it->second), std::get<1>(it->second),
                                inv.invocation_id, static_cast<int>(pos)});
    }
    for (size_t oi = 0; oi < inv.outputs.size(); ++oi) {
      producers[inv.outputs[oi].ref_id] = {inv.invocation_id, static_cast<int>(oi), i};
    }
  }
  return edges;
}

// ---------------------------------------------------------------------------
// Record

class RecordContext : public InvokeContext {
 public:
  RecordContext(const CompositeTaskSpec& composite, const json& request, ShapeRules shapes,
                std::string request_id)
      : composite_(composite), request_(request), shapes_(shapes), request_id_(std::move(request_id)) {}

  TaskResult invoke(const std::string& child_name, Inputs inputs) override {
    const UnitTaskSpec& unit = resolve_child(child_name);
    std::vector<InputSlot> slots = inputs.take();
    RecordedInvocation inv;
    inv.invocation_id = make_invocation_id();
    inv.task_digest = digest_for(child_name, unit);
    inv.inputs = std::move(slots);
    auto planned = plan_outputs(unit, inv.inputs, request_, shapes_);
    for (const auto& p : planned) {
      DataRef r;
      r.ref_id = make_ref_id();
      r.producer = inv.invocation_id;
      r.output_index = static_cast<int>(inv.outputs.size());
      r.desc = p.desc;
      r.streaming = p.streaming;
      r.state = RefState::Placeholder;
      inv.outputs.push_back(std::move(r));
    }
    inv.streaming = false;
    for (const auto& o : inv.outputs) inv.streaming = inv.streaming || o.streaming;
    session_.push_back(inv);

    TaskResult res;
    res.invocation_id_ = inv.invocation_id;
    res.refs_ = inv.outputs;
    res.record_mode_ = true;
    return res;
  }

  const json& request() const override { return request_; }
  bool recording() const override { return true; }

  const std::vector<RecordedInvocation>& session() const { return session_; }

 private:
  const UnitTaskSpec& resolve_child(const std::string& child_name) {
    auto it = composite_.children.find(child_name);
    if (it == composite_.children.end())
      fail(ErrorCode::Validation, "composite '" + composite_.kind + "' has no child task '" + child_name + "'");
    const auto* unit = std::get_if<UnitTaskSpec>(&it->second);
    if (!unit)
      fail(ErrorCode::Validation, "child '" + child_name + "' is a nested composite; built-in invoke bodies call unit tasks only");
    return *unit;
  }

  const std::string& digest_for(const std::string& child_name, const UnitTaskSpec& unit) {
    auto it = digest_cache_.find(child_name);
    if (it == digest_cache_.end()) it = digest_cache_.emplace(child_name, canonical_hash(unit)).first;
    return it->second;
  }

  std::string make_invocation_id() {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "/i%04zu", next_invocation_++);
    return request_id_ + buf;
  }

  std::string make_ref_id() {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "/r%04zu", next_ref_++);
    return request_id_ + buf;
  }

  const CompositeTaskSpec& composite_;
  const json& request_;
  ShapeRules shapes_;
  std::string request_id_;
  std::vector<RecordedInvocation> session_;
  std::map<std::string, std::string> digest_cache_;
  size_t next_invocation_ = 0;
  size_t next_ref_ = 0;
};

// ---------------------------------------------------------------------------
// Composite invoke bodies (shared verbatim by record and replay)

namespace detail {

inline ResponseChannels invoke_mllm(InvokeContext& ctx, const CompositeTaskSpec& comp,
                                    const json& request) {
  bool fission = comp.config.value("encoder_fission", true);
  Inputs llm_in;
  llm_in.literal(request);
  if (fission) {
    for (const auto& item : request.value("items", json::array())) {
      std::string child = "encoder." + item.value("modality", std::string("image"));
      TaskResult emb = ctx.invoke(child, Inputs().literal(item));
      llm_in.result(emb, 0);
    }
  }
  TaskResult llm = ctx.invoke("llm", std::move(llm_in));
  ResponseChannels out;
  out.channels["text"] = {llm, 0};
  return out;
}

inline ResponseChannels invoke_omni(InvokeContext& ctx, const CompositeTaskSpec& comp,
                                    const json& request) {
  bool fission = comp.config.value("encoder_fission", true);
  bool want_audio = request.value("audio_output", false);
  ResponseChannels out;
  if (!fission) {
    TaskResult mono = ctx.invoke("monolith", Inputs().literal(request));
    out.channels["text"] = {mono, 0};
    if (want_audio) {
      if (mono.num_outputs() < 2)
        fail(ErrorCode::Validation, "app does not support audio output");
      out.channels["audio"] = {mono, 1};
    }
    return out;
  }
  Inputs thinker_in;
  thinker_in.literal(request);
  for (const auto& item : request.value("items", json::array())) {
    std::string child = "encoder." + item.value("modality", std::string("image"));
    TaskResult emb = ctx.invoke(child, Inputs().literal(item));
    thinker_in.result(emb, 0);
  }
  TaskResult thinker = ctx.invoke("thinker", std::move(thinker_in));
  out.channels["text"] = {thinker, 0};
  if (want_audio) {
    if (!comp.children.count("talker"))
      fail(ErrorCode::Validation, "app does not support audio output");
    TaskResult talker = ctx.invoke("talker", Inputs().result(thinker, 1));
    TaskResult gen = ctx.invoke("generator", Inputs().result(talker, 0));
    out.channels["audio"] = {gen, 0};
  }
  return out;
}

inline ResponseChannels invoke_unit(InvokeContext& ctx, const CompositeTaskSpec& comp,
                                    const json& request) {
  TaskResult r = ctx.invoke("unit", Inputs().literal(request));
  const auto& unit = std::get<UnitTaskSpec>(comp.children.at("unit"));
  ResponseChannels out;
  switch (unit.task_class) {
    case TaskClass::LLM:
      out.channels["text"] = {r, 0};
      if (r.num_outputs() > 1 && unit.role() == "omni_monolith") out.channels["audio"] = {r, 1};
      break;
    case TaskClass::Generator:
      out.channels["audio"] = {r, 0};
      break;
    case TaskClass::Encoder:
      out.channels["embed"] = {r, 0};
      break;
  }
  return out;
}

}  // namespace detail

class InvokeLibrary {
 public:
  static InvokeLibrary& instance() {
    static InvokeLibrary lib;
    return lib;
  }

  void register_kind(const std::string& kind, InvokeFn fn) { fns_[kind] = std::move(fn); }

  const InvokeFn& get(const std::string& kind) const {
    auto it = fns_.find(kind);
    if (it == fns_.end()) fail(ErrorCode::Validation, "no invoke body for composite kind '" + kind + "'");
    return it->second;
  }

 private:
  InvokeLibrary() {
    fns_["mllm"] = detail::invoke_mllm;
    fns_["omni"] = detail::invoke_omni;
    fns_["unit"] = detail::invoke_unit;
  }
  std::map<std::string, InvokeFn> fns_;
};

struct RecordOutcome {
  InvocationGraph graph;
  // Channel -> (invocation id, output index), for binding replay results.
  std::map<std::string, std::pair<std::string, int>> channel_bindings;
};

// Record phase: runs the composite body with placeholder results; no model
// computation is performed and no executor is touched.
inline RecordOutcome record(const CompositeTaskSpec& composite, const json& request,
                            const ShapeRules& shapes, const std::string& request_id) {
  RecordContext ctx(composite, request, shapes, request_id);
  const InvokeFn& fn = InvokeLibrary::instance().get(composite.kind);
  ResponseChannels channels = fn(ctx, composite, request);

  RecordOutcome out;
  out.graph.request_id = request_id;
  for (const auto& inv : ctx.session()) out.graph.nodes.emplace(inv.invocation_id, inv);
  if (!ctx.session().empty()) out.graph.edges = match_placeholders(ctx.session());
  for (const auto& [channel, binding] : channels.channels) {
    DataRef ref = binding.result.ref(binding.output_index);
    out.graph.sink_refs.emplace(channel, ref);
    out.channel_bindings[channel] = {binding.result.invocation_id(),
                                     binding.output_index};
  }
  validate(out.graph);
  return out;
}

// ---------------------------------------------------------------------------
// Replay

class ReplayContext : public InvokeContext {
 public:
  ReplayContext(const CompositeTaskSpec& composite, const json& request,
                const InvocationGraph& graph, const ResultsMap& results)
      : composite_(composite), request_(request), results_(results) {
    for (const auto& [id, inv] : graph.nodes) expected_.push_back(&inv);  // map order == record order
  }

  TaskResult invoke(const std::string& child_name, Inputs inputs) override {
    std::vector<InputSlot> slots = inputs.take();
    if (step_ >= expected_.size()) {
      const UnitTaskSpec* unit = find_child(child_name);
      std::string digest = unit ? canonical_hash(*unit) : "?";
      fail(ErrorCode::DeterminismViolation,
           "replay diverged at step " + std::to_string(step_ + 1) + ": unrecorded invocation of task " +
               short_digest(digest) + " (child '" + child_name + "') after " +
               (expected_.empty() ? std::string("an empty session") : expected_.back()->invocation_id));
    }
    const RecordedInvocation& exp = *expected_[step_];
    const UnitTaskSpec* unit = find_child(child_name);
    if (!unit)
      fail(ErrorCode::Validation, "composite '" + composite_.kind + "' has no child task '" + child_name + "'");
    std::string digest = canonical_hash(*unit);
    if (digest != exp.task_digest)
      fail(ErrorCode::DeterminismViolation,
           "replay diverged at step " + std::to_string(step_ + 1) + " (invocation " + exp.invocation_id +
               "): recorded task " + short_digest(exp.task_digest) + " but replay invoked " +
               short_digest(digest));
    if (slots.size() != exp.inputs.size())
      fail(ErrorCode::DeterminismViolation,
           "replay diverged at step " + std::to_string(step_ + 1) + " (invocation " + exp.invocation_id +
               "): input arity changed");
    for (size_t i = 0; i < slots.size(); ++i) {
      if (!inputs_equivalent(exp.inputs[i], slots[i]))
        fail(ErrorCode::DeterminismViolation,
             "replay diverged at step " + std::to_string(step_ + 1) + " (invocation " + exp.invocation_id +
                 "): input " + std::to_string(i) + " changed");
    }

    TaskResult res;
    res.invocation_id_ = exp.invocation_id;
    res.refs_ = exp.outputs;
    for (auto& r : res.refs_) r.state = RefState::Materialized;
    auto it = results_.find(exp.invocation_id);
    if (it != results_.end()) {
      res.handles_ = it->second;
      for (size_t i = 0; i < res.handles_.size() && i < res.refs_.size(); ++i) {
        if (res.handles_[i].ref.location) res.refs_[i].location = res.handles_[i].ref.location;
        res.refs_[i].desc = res.handles_[i].ref.desc;
      }
    }
    res.record_mode_ = false;
    ++step_;
    return res;
  }

  const json& request() const override { return request_; }
  bool recording() const override { return false; }

  void finish() const {
    if (step_ != expected_.size())
      fail(ErrorCode::DeterminismViolation,
           "replay diverged: recorded " + std::to_string(expected_.size()) + " invocations but replay made " +
               std::to_string(step_) + "; first missing is " + expected_[step_]->invocation_id);
  }

 private:
  const UnitTaskSpec* find_child(const std::string& name) const {
    auto it = composite_.children.find(name);
    if (it == composite_.children.end()) return nullptr;
    return std::get_if<UnitTaskSpec>(&it->second);
  }

  static bool inputs_equivalent(const InputSlot& recorded, const InputSlot& replayed) {
    if (recorded.index() != replayed.index()) return false;
    if (const auto* lit = std::get_if<json>(&recorded))
      return *lit == std::get<json>(replayed);
    const auto& a = std::get<DataRef>(recorded);
    const auto& b = std::get<DataRef>(replayed);
    return a.producer == b.producer && a.output_index == b.output_index;
  }

  const CompositeTaskSpec& composite_;
  const json& request_;
  const ResultsMap& results_;
  std::vector<const RecordedInvocation*> expected_;
  size_t step_ = 0;
};

struct ReplayOutcome {
  ResponseChannels channels;
};

// Replay phase: re-executes the composite body against real results. The
// invocation sequence must match the recorded one exactly; the first
// divergent step is named in the error.
inline ReplayOutcome replay(const CompositeTaskSpec& composite, const json& request,
                            const InvocationGraph& graph, const ResultsMap& results) {
  ReplayContext ctx(composite, request, graph, results);
  const InvokeFn& fn = InvokeLibrary::instance().get(composite.kind);
  ReplayOutcome out;
  out.channels = fn(ctx, composite, request);
  ctx.finish();
  return out;
}

}  // namespace fissim
