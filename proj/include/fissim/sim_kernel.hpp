// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Event kernel shared by all simulated components. One logical event queue
// ordered by (time, seq): Virtual mode drains it as fast as possible, RealTime
// mode paces each event against the wall clock. The event sequence and the
// simulated timestamps are identical in both modes; wall jitter never leaks
// into recorded times.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <queue>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fissim/common.hpp"

namespace fissim {

enum class ClockMode { Virtual, RealTime };

inline ClockMode clock_mode_from_string(const std::string& s) {
  if (s == "virtual") return ClockMode::Virtual;
  if (s == "realtime") return ClockMode::RealTime;
  fail(ErrorCode::Config, "unknown clock mode '" + s + "' (want 'virtual' or 'realtime')");
}

class SimKernel {
 public:
  explicit SimKernel(ClockMode mode) : mode_(mode) {}

  ~SimKernel() { stop(); }

  ClockMode mode() const { return mode_; }

  TimeMs now() const {
    std::lock_guard lk(m_);
    return now_;
  }

  // Schedules fn at simulated time `at` (clamped to now). Thread-safe.
  uint64_t schedule(TimeMs at, std::string label, std::function<void()> fn) {
    std::unique_lock lk(m_);
    Event ev;
    ev.at = std::max(at, now_);
    ev.seq = next_seq_++;
    ev.label = std::move(label);
    ev.fn = std::move(fn);
    uint64_t id = ev.seq;
    queue_.push(std::move(ev));
    lk.unlock();
    cv_.notify_all();
    return id;
  }

  // Schedules fn "immediately": at current sim time in Virtual mode, at the
  // current wall offset in RealTime mode. Used by external threads (clients,
  // socket readers) to inject work into the simulation.
  uint64_t post(std::string label, std::function<void()> fn) {
    TimeMs at;
    {
      std::lock_guard lk(m_);
      at = mode_ == ClockMode::RealTime && started_ ? wall_elapsed_locked() : now_;
    }
    return schedule(at, std::move(label), std::move(fn));
  }

  void cancel(uint64_t id) {
    std::lock_guard lk(m_);
    cancelled_.insert(id);
  }

  // Virtual mode: drain every runnable event on the calling thread.
  void run_until_idle() {
    if (mode_ != ClockMode::Virtual)
      fail(ErrorCode::Internal, "run_until_idle is a Virtual-clock entry point");
    while (run_one(/*wait=*/false)) {
    }
  }

  // Starts the kernel loop on a background thread. Virtual mode drains events
  // as they appear; RealTime mode sleeps until each event's wall deadline.
  void start() {
    std::lock_guard lk(m_);
    if (started_) return;
    started_ = true;
    stopping_ = false;
    wall_start_ = std::chrono::steady_clock::now();
    loop_ = std::thread([this] { loop(); });
  }

  void stop() {
    {
      std::lock_guard lk(m_);
      if (!started_) return;
      stopping_ = true;
    }
    cv_.notify_all();
    if (loop_.joinable()) loop_.join();
    std::lock_guard lk(m_);
    started_ = false;
  }

  bool idle() const {
    std::lock_guard lk(m_);
    return queue_.empty() && !executing_;
  }

  size_t events_processed() const { return events_processed_.load(); }

  // Test hook: record (time, label) of every processed event.
  void enable_trace() { trace_enabled_ = true; }

  std::vector<std::pair<TimeMs, std::string>> take_trace() {
    std::lock_guard lk(m_);
    return std::move(trace_);
  }

 private:
  struct Event {
    TimeMs at = 0;
    uint64_t seq = 0;
    std::string label;
    std::function<void()> fn;
  };

  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.at != b.at) return a.at > b.at;
      return a.seq > b.seq;
    }
  };

  TimeMs wall_elapsed_locked() const {
    auto d = std::chrono::steady_clock::now() - wall_start_;
    return std::chrono::duration<double, std::milli>(d).count();
  }

  bool run_one(bool wait) {
    std::unique_lock lk(m_);
    for (;;) {
      if (stopping_) return false;
      if (queue_.empty()) {
        if (!wait) return false;
        cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
        continue;
      }
      if (mode_ == ClockMode::RealTime && started_) {
        auto deadline = wall_start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                          std::chrono::duration<double, std::milli>(queue_.top().at));
        if (std::chrono::steady_clock::now() < deadline) {
          // An earlier event may arrive while we sleep; recheck on wake.
          TimeMs top_at = queue_.top().at;
          cv_.wait_until(lk, deadline, [&] {
            return stopping_ || (!queue_.empty() && queue_.top().at < top_at);
          });
          continue;
        }
      }
      Event ev = std::move(const_cast<Event&>(queue_.top()));
      queue_.pop();
      if (cancelled_.erase(ev.seq) > 0) continue;
      now_ = std::max(now_, ev.at);
      if (trace_enabled_) trace_.emplace_back(ev.at, ev.label);
      executing_ = true;
      lk.unlock();
      ev.fn();
      {
        std::lock_guard lk2(m_);
        executing_ = false;
      }
      events_processed_.fetch_add(1);
      return true;
    }
  }

  void loop() {
    for (;;) {
      try {
        if (!run_one(/*wait=*/true)) return;
      } catch (const std::exception& e) {
        // A throwing event must not take down the kernel loop; the error has
        // already been surfaced to the caller owning the request.
        std::fprintf(stderr, "fissim kernel event error: %s\n", e.what());
        std::lock_guard lk(m_);
        executing_ = false;
      }
    }
  }

  ClockMode mode_;
  mutable std::mutex m_;
  std::condition_variable cv_;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::set<uint64_t> cancelled_;
  TimeMs now_ = 0;
  uint64_t next_seq_ = 0;
  bool started_ = false;
  bool stopping_ = false;
  bool executing_ = false;
  std::thread loop_;
  std::chrono::steady_clock::time_point wall_start_{};
  std::atomic<size_t> events_processed_{0};
  bool trace_enabled_ = false;
  std::vector<std::pair<TimeMs, std::string>> trace_;
};

}  // namespace fissim
