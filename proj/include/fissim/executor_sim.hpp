// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Simulated Task Executors. Compute is driven by calibrated performance
// models on the event kernel: encoders are batch servers over items, LLMs run
// a continuous-batching decode loop, generators are sequential chunk servers,
// and the monolith executes all stages under one exclusive compute lock with
// a batch-1 talker. Payload bytes are deterministic per ref so sidecar
// transfers stay byte-verifiable end to end.

#pragma once

#include <deque>
#include <memory>
#include <set>
#include <unordered_map>

#include "fissim/record_replay.hpp"
#include "fissim/sidecar.hpp"

namespace fissim {

// ---------------------------------------------------------------------------
// Dispatcher <-> executor wire format

struct OutputRoute {
  DataRef ref;
  std::vector<int> dest_gpus;  // consumer sidecar addresses
  bool to_dispatcher = false;  // sink outputs stream back on the control path

  json to_json() const {
    return json{{"ref", ref.to_json()}, {"dest_gpus", dest_gpus}, {"to_dispatcher", to_dispatcher}};
  }

  static OutputRoute from_json(const json& j) {
    OutputRoute r;
    r.ref = DataRef::from_json(j.at("ref"));
    r.dest_gpus = j.value("dest_gpus", std::vector<int>{});
    r.to_dispatcher = j.value("to_dispatcher", false);
    return r;
  }
};

struct InvocationMessage {
  std::string request_id;
  std::string invocation_id;
  std::string task_digest;
  std::vector<InputSlot> inputs;
  std::vector<OutputRoute> outputs;
  json request_meta;  // gen sizes, audio flag, fault hooks
  bool streaming = false;

  Frame to_frame() const {
    json in = json::array();
    for (const auto& s : inputs) in.push_back(input_slot_to_json(s));
    json out = json::array();
    for (const auto& o : outputs) out.push_back(o.to_json());
    return Frame{json{{"type", "invocation"},
                      {"request_id", request_id},
                      {"invocation_id", invocation_id},
                      {"task_digest", task_digest},
                      {"inputs", in},
                      {"outputs", out},
                      {"request_meta", request_meta},
                      {"streaming", streaming}},
                 {}};
  }

  static InvocationMessage from_frame(const Frame& f) {
    InvocationMessage m;
    const json& h = f.header;
    m.request_id = h.at("request_id").get<std::string>();
    m.invocation_id = h.at("invocation_id").get<std::string>();
    m.task_digest = h.at("task_digest").get<std::string>();
    for (const auto& s : h.value("inputs", json::array())) m.inputs.push_back(input_slot_from_json(s));
    for (const auto& o : h.value("outputs", json::array())) m.outputs.push_back(OutputRoute::from_json(o));
    m.request_meta = h.value("request_meta", json::object());
    m.streaming = h.value("streaming", false);
    return m;
  }
};

enum class InvocationState { Dispatched, Running, Complete, Failed };

inline const char* to_string(InvocationState s) {
  switch (s) {
    case InvocationState::Dispatched: return "dispatched";
    case InvocationState::Running: return "running";
    case InvocationState::Complete: return "complete";
    case InvocationState::Failed: return "failed";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Executor environment

struct ExecutorEnv {
  SimKernel* kernel = nullptr;
  SidecarPort* sidecar = nullptr;
  // Backchannel to the dispatcher: status and chunk frames.
  std::function<void(Frame)> to_dispatcher;
};

struct ReplicaSpec {
  std::string replica_id;
  std::string task_digest;
  UnitTaskSpec unit;
  ComponentProfile profile;
  // Monolith stages resolved from profile.components.
  std::map<std::string, ComponentProfile> stage_profiles;
  ShapeRules shapes;
  std::vector<int> gpus;
  int tp = 1;
  int64_t activation_budget_per_gpu = int64_t{1} << 62;

  int home_gpu() const { return gpus.empty() ? 0 : gpus.front(); }
};

struct ExecutorStats {
  int64_t received = 0;
  int64_t completed = 0;
  int64_t failed = 0;
  int64_t units_done = 0;  // items / tokens / chunks
  double busy_ms = 0;
  // Monolith per-stage accounting.
  std::map<std::string, double> stage_busy_ms;
  std::map<std::string, int64_t> stage_units;
};

class ExecutorBase {
 public:
  ExecutorBase(ExecutorEnv env, ReplicaSpec spec) : env_(env), spec_(std::move(spec)) {}
  virtual ~ExecutorBase() = default;

  const ReplicaSpec& spec() const { return spec_; }
  const ExecutorStats& stats() const { return stats_; }

  void handle_frame(const Frame& f) {
    const std::string type = f.header.value("type", "");
    if (type == "invocation") {
      InvocationMessage msg = InvocationMessage::from_frame(f);
      ++stats_.received;
      receive_times_.push_back(env_.kernel->now());
      // Test hook: a request can direct a named role or digest to fail.
      const json& fault = msg.request_meta.value("fault", json::object());
      if ((fault.value("fail_role", "") == spec_.unit.role() && !spec_.unit.role().empty()) ||
          fault.value("fail_digest", "") == spec_.task_digest) {
        fail_invocation(msg, Error(ErrorCode::Internal, "injected fault"));
        return;
      }
      on_invocation(std::move(msg));
    } else if (type == "cancel") {
      on_cancel(f.header.value("request_id", ""), f.header.value("invocation_id", ""));
    } else {
      fail(ErrorCode::Protocol, "unknown frame type '" + type + "'");
    }
  }

  virtual void on_cancel(const std::string&, const std::string&) {}

  const std::vector<TimeMs>& receive_times() const { return receive_times_; }

 protected:
  virtual void on_invocation(InvocationMessage msg) = 0;

  TimeMs now() const { return env_.kernel->now(); }

  double scaled(double ms) const { return ms / spec_.profile.speedup(spec_.tp); }

  bool activation_fits(int64_t concurrent, const ComponentProfile& p) const {
    return concurrent * (p.activation_bytes / std::max(1, spec_.tp)) <=
           spec_.activation_budget_per_gpu;
  }

  void send_status(const InvocationMessage& msg, InvocationState state, TimeMs queue_enter,
                   TimeMs compute_start, double transfer_ms, const Error* err = nullptr) {
    json h{{"type", "status"},
           {"request_id", msg.request_id},
           {"invocation_id", msg.invocation_id},
           {"replica_id", spec_.replica_id},
           {"state", to_string(state)},
           {"queue_enter", queue_enter},
           {"compute_start", compute_start},
           {"compute_end", now()},
           {"transfer_ms", transfer_ms}};
    if (err) {
      h["error_code"] = to_string(err->code());
      h["message"] = err->what();
    }
    env_.to_dispatcher(Frame{std::move(h), {}});
  }

  void send_chunk(const InvocationMessage& msg, int output_index, int64_t seq, json meta,
                  std::vector<uint8_t> bytes, bool final_chunk) {
    env_.to_dispatcher(Frame{json{{"type", "chunk"},
                                  {"request_id", msg.request_id},
                                  {"invocation_id", msg.invocation_id},
                                  {"output_index", output_index},
                                  {"seq", seq},
                                  {"meta", std::move(meta)},
                                  {"final", final_chunk}},
                             std::move(bytes)});
  }

  void send_running(const InvocationMessage& msg, TimeMs queue_enter) {
    send_status(msg, InvocationState::Running, queue_enter, now(), 0);
  }

  void fail_invocation(const InvocationMessage& msg, const Error& err, TimeMs queue_enter = -1,
                       TimeMs compute_start = -1) {
    ++stats_.failed;
    // Downstream consumers waiting on our outputs learn about the failure.
    for (const auto& out : msg.outputs) env_.sidecar->fail_ref(out.ref.ref_id, err);
    send_status(msg, InvocationState::Failed, queue_enter < 0 ? now() : queue_enter,
                compute_start < 0 ? now() : compute_start, 0, &err);
  }

  // Forward one output chunk to every data-plane destination and/or the
  // dispatcher sink path.
  void emit_output(const InvocationMessage& msg, const OutputRoute& route, int64_t seq, json meta,
                   const std::vector<uint8_t>& bytes, bool final_chunk) {
    for (int dst : route.dest_gpus) {
      env_.sidecar->send(msg.request_id, route.ref, spec_.home_gpu(), dst,
                         std::span<const uint8_t>(bytes.data(), bytes.size()), seq, final_chunk);
    }
    if (route.to_dispatcher)
      send_chunk(msg, route.ref.output_index, seq, std::move(meta), bytes, final_chunk);
  }

  uint64_t payload_seed(const std::string& ref_id, int64_t seq) const {
    return fnv1a64(ref_id) ^ (0x9e3779b97f4a7c15ull * static_cast<uint64_t>(seq + 1));
  }

  ExecutorEnv env_;
  ReplicaSpec spec_;
  ExecutorStats stats_;
  std::vector<TimeMs> receive_times_;
};

// ---------------------------------------------------------------------------
// Encoder: batch server over multimodal items queued across invocations.

class EncoderExecutor : public ExecutorBase {
 public:
  using ExecutorBase::ExecutorBase;

 protected:
  void on_invocation(InvocationMessage msg) override {
    Pending p;
    p.queue_enter = now();
    for (const auto& slot : msg.inputs) {
      if (const auto* lit = std::get_if<json>(&slot)) {
        p.item = *lit;
        break;
      }
    }
    if (p.item.is_null()) {
      fail_invocation(msg, Error(ErrorCode::Protocol, "encoder invocation carries no item"));
      return;
    }
    p.msg = std::move(msg);
    queue_.push_back(std::move(p));
    schedule_run();
  }

 private:
  struct Pending {
    InvocationMessage msg;
    json item;
    TimeMs queue_enter = 0;
  };

  // Batch formation happens one event later so every arrival at the same sim
  // instant joins the same run.
  void schedule_run() {
    if (run_scheduled_) return;
    run_scheduled_ = true;
    env_.kernel->schedule(now(), "encoder.flush", [this] {
      run_scheduled_ = false;
      maybe_run();
    });
  }

  void maybe_run() {
    if (running_ || queue_.empty()) return;
    // Take whole invocations up to max_batch items.
    std::vector<Pending> batch;
    int64_t items = 0;
    while (!queue_.empty() && items < spec_.profile.max_batch) {
      if (!activation_fits(items + 1, spec_.profile)) {
        if (batch.empty()) {
          fail_invocation(queue_.front().msg,
                          Error(ErrorCode::Oom, "encoder activation memory exhausted"));
          queue_.pop_front();
          continue;
        }
        break;
      }
      batch.push_back(std::move(queue_.front()));
      queue_.pop_front();
      ++items;
    }
    if (batch.empty()) return;
    running_ = true;
    double duration = scaled(spec_.profile.base_ms + spec_.profile.per_item_ms * double(items));
    TimeMs start = now();
    stats_.busy_ms += duration;
    for (const auto& p : batch) send_running(p.msg, p.queue_enter);
    auto shared = std::make_shared<std::vector<Pending>>(std::move(batch));
    env_.kernel->schedule(now() + duration, "encoder.batch_done", [this, shared, start, items] {
      stats_.units_done += items;
      for (auto& p : *shared) complete_one(p, start);
      running_ = false;
      maybe_run();
    });
  }

  bool run_scheduled_ = false;

  void complete_one(Pending& p, TimeMs compute_start) {
    double transfer_ms = 0;
    for (const auto& route : p.msg.outputs) {
      // Actual embedding size from the shape rules; authoritative over the
      // record-phase estimate.
      PayloadDesc desc = spec_.shapes.embed_desc(p.item);
      OutputRoute actual = route;
      actual.ref.desc = desc;
      actual.ref.state = RefState::Materialized;
      auto bytes = synth_payload(payload_seed(route.ref.ref_id, 0),
                                 static_cast<size_t>(desc.total_bytes()));
      emit_output(p.msg, actual, 0, json{{"desc", desc.to_json()}}, bytes, true);
    }
    ++stats_.completed;
    send_status(p.msg, InvocationState::Complete, p.queue_enter, compute_start, transfer_ms);
  }

  std::deque<Pending> queue_;
  bool running_ = false;
};

// ---------------------------------------------------------------------------
// LLM engine: continuous batching decode loop. Also serves the talker role,
// whose stepping is paced by upstream hidden-state arrival.

class LlmEngineExecutor : public ExecutorBase {
 public:
  using ExecutorBase::ExecutorBase;

  // Steady-state observables used by calibration checks.
  int64_t tokens_emitted() const { return stats_.units_done; }

 protected:
  void on_invocation(InvocationMessage msg) override {
    auto req = std::make_shared<EngineReq>();
    req->queue_enter = now();
    req->gen = GenSizes::from_request(msg.request_meta);
    req->is_talker = spec_.unit.role() == "talker";
    req->target_tokens = req->is_talker ? req->gen.chunks : req->gen.output_tokens;
    req->msg = std::move(msg);
    for (const auto& route : req->msg.outputs) {
      if (route.ref.output_index == 0) req->primary = route;
      if (route.ref.output_index == 1) req->hidden = route;
    }

    // Count ref inputs we must await (embeddings) or pace on (hidden states).
    for (const auto& slot : req->msg.inputs) {
      const auto* ref = std::get_if<DataRef>(&slot);
      if (!ref) continue;
      if (ref->streaming) {
        req->paced = true;
        env_.sidecar->register_interest(
            spec_.home_gpu(), ref->ref_id,
            [this, req](const ForwardEnvelope& env, std::vector<uint8_t>) {
              if (env.chunk_bytes > 0) req->upstream_received++;
              req->transfer_ms += env.send_time >= 0 ? (now() - env.send_time) : 0;
              if (env.final) req->upstream_final = true;
              if (!req->admitted && !req->enqueued) enqueue(req);
              schedule_step_flush();
            },
            [this, req](const Error& e) { fail_engine_req(req, e); });
      } else {
        req->awaiting++;
        env_.sidecar->register_interest(
            spec_.home_gpu(), ref->ref_id,
            [this, req](const ForwardEnvelope& env, std::vector<uint8_t>) {
              if (!env.final) return;
              req->transfer_ms += now() - env.send_time;
              if (--req->awaiting == 0 && !req->enqueued) enqueue(req);
            },
            [this, req](const Error& e) { fail_engine_req(req, e); });
      }
    }
    if (req->awaiting == 0 && !req->paced) enqueue(req);
    // Paced requests with no upstream chunk yet wait for the first arrival;
    // a request whose upstream never produces anything (chunks == 0) still
    // needs admission to emit its empty final marker.
    if (req->paced && req->target_tokens == 0) enqueue(req);
  }

  void on_cancel(const std::string&, const std::string& invocation_id) override {
    auto drop = [&](auto& container) {
      for (auto it = container.begin(); it != container.end();) {
        if ((*it)->msg.invocation_id == invocation_id) {
          (*it)->cancelled = true;
          it = container.erase(it);
        } else {
          ++it;
        }
      }
    };
    drop(admit_queue_);
    drop(active_);
  }

 private:
  struct EngineReq {
    InvocationMessage msg;
    GenSizes gen;
    OutputRoute primary;
    std::optional<OutputRoute> hidden;
    TimeMs queue_enter = 0;
    TimeMs compute_start = -1;
    int64_t target_tokens = 0;
    int64_t tokens_done = 0;
    int awaiting = 0;
    bool paced = false;  // talker: stepping gated on upstream chunks
    int64_t upstream_received = 0;
    bool upstream_final = false;
    bool prefill_pending = true;
    bool enqueued = false;
    bool admitted = false;
    bool cancelled = false;
    double transfer_ms = 0;
    bool is_talker = false;
  };

  using ReqPtr = std::shared_ptr<EngineReq>;

  void enqueue(const ReqPtr& req) {
    if (req->enqueued || req->cancelled) return;
    req->enqueued = true;
    admit_queue_.push_back(req);
    schedule_step_flush();
  }

  void fail_engine_req(const ReqPtr& req, const Error& e) {
    if (req->cancelled) return;
    req->cancelled = true;
    auto remove = [&](auto& c) {
      c.erase(std::remove(c.begin(), c.end(), req), c.end());
    };
    remove(admit_queue_);
    remove(active_);
    fail_invocation(req->msg, e, req->queue_enter, req->compute_start);
  }

  void admit_from_queue() {
    while (!admit_queue_.empty() &&
           static_cast<int>(active_.size()) < spec_.profile.max_batch) {
      ReqPtr req = admit_queue_.front();
      if (!activation_fits(static_cast<int64_t>(active_.size()) + 1, spec_.profile)) {
        admit_queue_.pop_front();
        fail_engine_req(req, Error(ErrorCode::Oom, "llm activation memory exhausted"));
        continue;
      }
      admit_queue_.pop_front();
      req->admitted = true;
      active_.push_back(req);
    }
  }

  bool steppable(const ReqPtr& r) const {
    if (r->tokens_done >= r->target_tokens) return false;
    if (!r->paced) return true;
    // Chunk n needs upstream token n+1, or the whole upstream stream.
    return r->upstream_received > r->tokens_done || r->upstream_final;
  }

  // Step formation is deferred one event so same-instant arrivals share a
  // step ("requests join at the next step boundary").
  void schedule_step_flush() {
    if (flush_scheduled_ || step_scheduled_) return;
    flush_scheduled_ = true;
    env_.kernel->schedule(now(), "llm.step_flush", [this] {
      flush_scheduled_ = false;
      maybe_schedule_step();
    });
  }

  void maybe_schedule_step() {
    if (step_scheduled_) return;
    admit_from_queue();
    // Zero-length requests complete without a step (as their own event, so
    // batched dispatch deliveries always precede completions).
    for (auto it = active_.begin(); it != active_.end();) {
      if ((*it)->target_tokens == 0) {
        ReqPtr r = *it;
        it = active_.erase(it);
        env_.kernel->schedule(now(), "llm.flush", [this, r] { complete_req(r); });
      } else {
        ++it;
      }
    }
    std::vector<ReqPtr> stepping;
    for (const auto& r : active_)
      if (steppable(r)) stepping.push_back(r);
    if (stepping.empty()) return;

    double prefill_ms = 0;
    for (const auto& r : stepping)
      if (r->prefill_pending) prefill_ms += spec_.profile.prefill_ms_per_token * double(r->gen.input_tokens);
    double duration = scaled(spec_.profile.decode_a_ms +
                             spec_.profile.decode_b_ms * double(stepping.size()) + prefill_ms);
    step_scheduled_ = true;
    stats_.busy_ms += duration;
    TimeMs start = now();
    env_.kernel->schedule(now() + duration, "llm.step", [this, stepping, start] {
      step_scheduled_ = false;
      for (const auto& r : stepping) {
        if (r->cancelled) continue;
        if (r->compute_start < 0) {
          r->compute_start = start;
          send_running(r->msg, r->queue_enter);
        }
        r->prefill_pending = false;
        emit_token(r);
        ++stats_.units_done;
        if (r->tokens_done >= r->target_tokens) {
          active_.erase(std::remove(active_.begin(), active_.end(), r), active_.end());
          complete_req(r);
        }
      }
      maybe_schedule_step();
    });
  }

  bool flush_scheduled_ = false;

  void emit_token(const ReqPtr& r) {
    int64_t seq = r->tokens_done++;
    bool last = r->tokens_done >= r->target_tokens;
    if (r->is_talker) {
      // Audio-token chunk forwarded to the generator.
      std::vector<uint8_t> bytes = synth_payload(payload_seed(r->primary.ref.ref_id, seq), 4);
      OutputRoute route = r->primary;
      route.ref.streaming = true;
      emit_output(r->msg, route, seq, json{{"c", seq}}, bytes, last);
      return;
    }
    // Text token on the primary output.
    json meta{{"t", r->msg.invocation_id + "-t" + std::to_string(seq)}};
    OutputRoute route = r->primary;
    route.ref.streaming = true;
    emit_output(r->msg, route, seq, std::move(meta), {}, last);
    if (r->hidden) {
      auto bytes = synth_payload(payload_seed(r->hidden->ref.ref_id, seq),
                                 static_cast<size_t>(spec_.shapes.hidden_dim *
                                                     spec_.shapes.embed_elem_bytes));
      OutputRoute hroute = *r->hidden;
      hroute.ref.streaming = true;
      emit_output(r->msg, hroute, seq, json{{"h", seq}}, bytes, last);
    }
  }

  void complete_req(const ReqPtr& r) {
    if (r->cancelled) return;
    if (r->target_tokens == 0) {
      // Emit empty final markers so consumers observe end-of-stream.
      OutputRoute route = r->primary;
      route.ref.streaming = true;
      emit_output(r->msg, route, 0, json{{"empty", true}}, {}, true);
      if (r->compute_start < 0) r->compute_start = now();
    }
    ++stats_.completed;
    send_status(r->msg, InvocationState::Complete, r->queue_enter, r->compute_start,
                r->transfer_ms);
  }

  std::deque<ReqPtr> admit_queue_;
  std::vector<ReqPtr> active_;
  bool step_scheduled_ = false;
};

// ---------------------------------------------------------------------------
// Generator: sequential chunk server consuming a streamed token input.

class GeneratorExecutor : public ExecutorBase {
 public:
  using ExecutorBase::ExecutorBase;

 protected:
  void on_invocation(InvocationMessage msg) override {
    auto req = std::make_shared<GenReq>();
    req->queue_enter = now();
    req->gen = GenSizes::from_request(msg.request_meta);
    req->msg = std::move(msg);
    if (!req->msg.outputs.empty()) req->out = req->msg.outputs.front();
    bool has_stream_input = false;
    for (const auto& slot : req->msg.inputs) {
      const auto* ref = std::get_if<DataRef>(&slot);
      if (!ref) continue;
      has_stream_input = true;
      env_.sidecar->register_interest(
          spec_.home_gpu(), ref->ref_id,
          [this, req](const ForwardEnvelope& env, std::vector<uint8_t>) {
            req->transfer_ms += now() - env.send_time;
            if (env.final) req->input_final = true;
            if (env.chunk_bytes > 0) {
              work_.push_back({req, env.seq});
              maybe_run();
            } else if (req->input_final && req->chunks_done == 0 && work_done_for(req)) {
              // Zero-chunk stream: only the end-of-stream marker arrived.
              finish(req);
            }
          },
          [this, req](const Error& e) {
            if (!req->failed) {
              req->failed = true;
              fail_invocation(req->msg, e, req->queue_enter, req->compute_start);
            }
          });
    }
    if (!has_stream_input) {
      // No upstream stream at all: empty completion as its own event.
      req->input_final = true;
      env_.kernel->schedule(now(), "generator.flush", [this, req] { finish(req); });
    } else if (!activation_fits(static_cast<int64_t>(inflight_ + 1), spec_.profile)) {
      fail_invocation(req->msg, Error(ErrorCode::Oom, "generator activation memory exhausted"),
                      req->queue_enter, -1);
      req->failed = true;
    } else {
      ++inflight_;
    }
  }

 private:
  struct GenReq {
    InvocationMessage msg;
    GenSizes gen;
    OutputRoute out;
    TimeMs queue_enter = 0;
    TimeMs compute_start = -1;
    int64_t chunks_done = 0;
    int64_t input_chunks = 0;
    bool input_final = false;
    bool finished = false;
    bool failed = false;
    double transfer_ms = 0;
  };

  using ReqPtr = std::shared_ptr<GenReq>;

  struct WorkItem {
    ReqPtr req;
    int64_t seq;
  };

  void maybe_run() {
    if (running_ || work_.empty()) return;
    WorkItem item = work_.front();
    work_.pop_front();
    if (item.req->failed) {
      maybe_run();
      return;
    }
    running_ = true;
    double duration = scaled(spec_.profile.per_chunk_ms);
    stats_.busy_ms += duration;
    if (item.req->compute_start < 0) {
      item.req->compute_start = now();
      send_running(item.req->msg, item.req->queue_enter);
    }
    env_.kernel->schedule(now() + duration, "generator.chunk", [this, item] {
      running_ = false;
      ReqPtr req = item.req;
      if (!req->failed) {
        ++stats_.units_done;
        req->input_chunks++;
        int64_t seq = req->chunks_done++;
        bool last = req->input_final && work_done_for(req);
        auto bytes = synth_payload(
            payload_seed(req->out.ref.ref_id, seq),
            static_cast<size_t>(spec_.shapes.audio_samples_per_chunk * 2));
        OutputRoute route = req->out;
        route.ref.streaming = true;
        emit_output(req->msg, route, seq, json{{"a", seq}}, bytes, last);
        if (last) finish(req);
      }
      maybe_run();
    });
  }

  bool work_done_for(const ReqPtr& req) const {
    for (const auto& w : work_)
      if (w.req == req) return false;
    return true;
  }

  void finish(const ReqPtr& req) {
    if (req->finished || req->failed) return;
    req->finished = true;
    if (req->compute_start < 0) req->compute_start = now();
    if (req->chunks_done == 0) {
      // Zero chunks: empty payload, immediate completion.
      OutputRoute route = req->out;
      route.ref.streaming = true;
      emit_output(req->msg, route, 0, json{{"empty", true}}, {}, true);
    }
    ++stats_.completed;
    if (inflight_ > 0) --inflight_;
    send_status(req->msg, InvocationState::Complete, req->queue_enter, req->compute_start,
                req->transfer_ms);
  }

  std::deque<WorkItem> work_;
  bool running_ = false;
  int64_t inflight_ = 0;
};

// ---------------------------------------------------------------------------
// Monolith: all stages inside one executor, serialized by an exclusive
// compute lock; the talker runs batch-1 (no continuous batching).

class MonolithExecutor : public ExecutorBase {
 public:
  ExecutorEnv env() const { return env_; }

  MonolithExecutor(ExecutorEnv env, ReplicaSpec spec) : ExecutorBase(env, std::move(spec)) {
    for (const auto& [name, p] : spec_.stage_profiles) {
      if (p.kind == ProfileKind::Encoder) encoder_ = &spec_.stage_profiles.at(name);
      if (p.kind == ProfileKind::LLMPrefillDecode) thinker_ = &spec_.stage_profiles.at(name);
      if (p.kind == ProfileKind::AutoregressiveTalker) talker_ = &spec_.stage_profiles.at(name);
      if (p.kind == ProfileKind::Generator) generator_ = &spec_.stage_profiles.at(name);
    }
    if (!thinker_) fail(ErrorCode::Config, "monolith profile requires an LLM stage");
  }

 protected:
  void on_invocation(InvocationMessage msg) override {
    auto req = std::make_shared<MonoReq>();
    req->queue_enter = now();
    req->gen = GenSizes::from_request(msg.request_meta);
    req->want_audio = msg.request_meta.value("audio_output", false);
    req->msg = std::move(msg);
    for (const auto& route : req->msg.outputs) {
      if (route.ref.output_index == 0) req->text_out = route;
      if (route.ref.output_index == 1) req->audio_out = route;
    }
    req->items = static_cast<int64_t>(req->msg.request_meta.value("items", json::array()).size());
    admit_queue_.push_back(req);
    admit();
  }

 private:
  struct MonoReq {
    InvocationMessage msg;
    GenSizes gen;
    OutputRoute text_out;
    std::optional<OutputRoute> audio_out;
    TimeMs queue_enter = 0;
    TimeMs compute_start = -1;
    int64_t items = 0;
    int64_t tokens_done = 0;
    bool prefill_pending = true;
    bool want_audio = false;
    int64_t talker_chunks_done = 0;
    int64_t gen_chunks_done = 0;
    double transfer_ms = 0;
  };

  using ReqPtr = std::shared_ptr<MonoReq>;

  // Exclusive compute lock: one quantum runs at a time, FIFO grants.
  void lock_acquire(std::function<void()> on_granted) {
    lock_waiters_.push_back(std::move(on_granted));
    grant();
  }

  void grant() {
    if (lock_held_ || lock_waiters_.empty()) return;
    lock_held_ = true;
    auto fn = std::move(lock_waiters_.front());
    lock_waiters_.pop_front();
    fn();
  }

  void lock_release() {
    lock_held_ = false;
    grant();
  }

  void run_quantum(const std::string& stage, double duration, std::function<void()> done) {
    lock_acquire([this, stage, duration, done = std::move(done)] {
      stats_.busy_ms += duration;
      stats_.stage_busy_ms[stage] += duration;
      env_.kernel->schedule(now() + duration, "monolith." + stage, [this, done] {
        done();
        lock_release();
      });
    });
  }

  void admit() {
    while (!admit_queue_.empty() && static_cast<int64_t>(inflight_.size()) < spec_.profile.admit_cap) {
      if (!activation_fits(static_cast<int64_t>(inflight_.size()) + 1, spec_.profile)) {
        ReqPtr req = admit_queue_.front();
        admit_queue_.pop_front();
        fail_invocation(req->msg, Error(ErrorCode::Oom, "monolith activation memory exhausted"),
                        req->queue_enter, -1);
        continue;
      }
      ReqPtr req = admit_queue_.front();
      admit_queue_.pop_front();
      inflight_.insert(req);
      start_request(req);
    }
  }

  void schedule_thinker_pump() {
    if (thinker_pump_scheduled_) return;
    thinker_pump_scheduled_ = true;
    env_.kernel->schedule(now(), "monolith.thinker_flush", [this] {
      thinker_pump_scheduled_ = false;
      pump_thinker();
    });
  }

  void start_request(const ReqPtr& req) {
    if (req->items > 0 && encoder_) {
      double d = (encoder_->base_ms + encoder_->per_item_ms * double(req->items));
      run_quantum("encoder", d, [this, req] {
        if (req->compute_start < 0) {
          req->compute_start = now();
          send_running(req->msg, req->queue_enter);
        }
        stats_.stage_units["encoder"] += req->items;
        thinker_ready_.push_back(req);
        schedule_thinker_pump();
      });
      return;
    }
    thinker_ready_.push_back(req);
    schedule_thinker_pump();
  }

  // Thinker: continuous batching across in-flight requests, one token per
  // active request per step.
  void pump_thinker() {
    if (thinker_step_pending_) return;
    if (thinker_ready_.empty()) return;
    std::vector<ReqPtr> stepping;
    for (const auto& r : thinker_ready_) {
      if (static_cast<int>(stepping.size()) >= thinker_->max_batch) break;
      stepping.push_back(r);
    }
    double prefill = 0;
    for (const auto& r : stepping)
      if (r->prefill_pending) prefill += thinker_->prefill_ms_per_token * double(r->gen.input_tokens);
    double duration =
        thinker_->decode_a_ms + thinker_->decode_b_ms * double(stepping.size()) + prefill;
    thinker_step_pending_ = true;
    run_quantum("thinker", duration, [this, stepping] {
      thinker_step_pending_ = false;
      for (const auto& r : stepping) {
        if (r->compute_start < 0) {
          r->compute_start = now();
          send_running(r->msg, r->queue_enter);
        }
        r->prefill_pending = false;
        int64_t seq = r->tokens_done++;
        stats_.stage_units["thinker"]++;
        bool last = r->tokens_done >= r->gen.output_tokens;
        OutputRoute route = r->text_out;
        route.ref.streaming = true;
        emit_output(r->msg, route, seq,
                    json{{"t", r->msg.invocation_id + "-t" + std::to_string(seq)}}, {}, last);
        if (last) {
          thinker_ready_.erase(std::remove(thinker_ready_.begin(), thinker_ready_.end(), r),
                               thinker_ready_.end());
          if (r->want_audio && talker_ && generator_) {
            talker_queue_.push_back(r);
            pump_talker();
          } else {
            complete_request(r);
          }
        }
      }
      pump_thinker();
    });
  }

  // Talker: strictly one request at a time, chunk by chunk (batch-1).
  void pump_talker() {
    if (talker_busy_ || talker_queue_.empty()) return;
    ReqPtr req = talker_queue_.front();
    if (req->talker_chunks_done >= req->gen.chunks) {
      talker_queue_.pop_front();
      generator_queue_.push_back(req);
      pump_generator();
      pump_talker();
      return;
    }
    talker_busy_ = true;
    double duration = talker_->decode_a_ms + talker_->decode_b_ms;  // batch of one
    run_quantum("talker", duration, [this, req] {
      talker_busy_ = false;
      req->talker_chunks_done++;
      stats_.stage_units["talker"]++;
      pump_talker();
    });
  }

  void pump_generator() {
    if (generator_busy_ || generator_queue_.empty()) return;
    ReqPtr req = generator_queue_.front();
    if (req->gen_chunks_done >= req->gen.chunks) {
      generator_queue_.pop_front();
      complete_request(req);
      pump_generator();
      return;
    }
    generator_busy_ = true;
    run_quantum("generator", generator_->per_chunk_ms, [this, req] {
      generator_busy_ = false;
      int64_t seq = req->gen_chunks_done++;
      stats_.stage_units["generator"]++;
      if (req->audio_out) {
        bool last = req->gen_chunks_done >= req->gen.chunks;
        auto bytes = synth_payload(payload_seed(req->audio_out->ref.ref_id, seq),
                                   static_cast<size_t>(spec_.shapes.audio_samples_per_chunk * 2));
        OutputRoute route = *req->audio_out;
        route.ref.streaming = true;
        emit_output(req->msg, route, seq, json{{"a", seq}}, bytes, last);
      }
      pump_generator();
    });
  }

  void complete_request(const ReqPtr& req) {
    if (req->want_audio && req->audio_out && req->gen.chunks == 0) {
      OutputRoute route = *req->audio_out;
      route.ref.streaming = true;
      emit_output(req->msg, route, 0, json{{"empty", true}}, {}, true);
    }
    ++stats_.completed;
    stats_.units_done++;
    inflight_.erase(req);
    send_status(req->msg, InvocationState::Complete, req->queue_enter, req->compute_start,
                req->transfer_ms);
    admit();
  }

  const ComponentProfile* encoder_ = nullptr;
  const ComponentProfile* thinker_ = nullptr;
  const ComponentProfile* talker_ = nullptr;
  const ComponentProfile* generator_ = nullptr;

  std::deque<ReqPtr> admit_queue_;
  std::set<ReqPtr> inflight_;
  std::deque<ReqPtr> thinker_ready_;
  std::deque<ReqPtr> talker_queue_;
  std::deque<ReqPtr> generator_queue_;
  bool thinker_step_pending_ = false;
  bool thinker_pump_scheduled_ = false;
  bool talker_busy_ = false;
  bool generator_busy_ = false;
  bool lock_held_ = false;
  std::deque<std::function<void()>> lock_waiters_;
};

// ---------------------------------------------------------------------------

inline std::unique_ptr<ExecutorBase> make_executor(const ExecutorEnv& env, ReplicaSpec spec) {
  switch (spec.profile.kind) {
    case ProfileKind::Encoder:
      return std::make_unique<EncoderExecutor>(env, std::move(spec));
    case ProfileKind::LLMPrefillDecode:
    case ProfileKind::AutoregressiveTalker:
      return std::make_unique<LlmEngineExecutor>(env, std::move(spec));
    case ProfileKind::Generator:
      return std::make_unique<GeneratorExecutor>(env, std::move(spec));
    case ProfileKind::Monolith:
      return std::make_unique<MonolithExecutor>(env, std::move(spec));
  }
  fail(ErrorCode::Internal, "unhandled profile kind");
}

}  // namespace fissim
