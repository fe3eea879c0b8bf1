// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// HTTP+JSON control surface over a cluster: app registration, invocation with
// chunked streaming responses, and state/metrics snapshots. One JSON object
// per line on the invoke stream.

#pragma once

#include <httplib.h>

#include "fissim/control_plane.hpp"

namespace fissim {

namespace detail {

inline int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return 404;
    case ErrorCode::DuplicateApp:
    case ErrorCode::Validation:
    case ErrorCode::Config:
    case ErrorCode::Protocol: return 400;
    case ErrorCode::Oom:
    case ErrorCode::Placement:
    case ErrorCode::Infeasible: return 409;
    case ErrorCode::Timeout: return 504;
    default: return 500;
  }
}

inline const char* kB64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::vector<uint8_t>& data) {
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  size_t i = 0;
  while (i + 3 <= data.size()) {
    uint32_t v = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back(kB64[v & 63]);
    i += 3;
  }
  size_t rest = data.size() - i;
  if (rest == 1) {
    uint32_t v = data[i] << 16;
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out += "==";
  } else if (rest == 2) {
    uint32_t v = (data[i] << 16) | (data[i + 1] << 8);
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

}  // namespace detail

class HttpApi {
 public:
  explicit HttpApi(Cluster& cluster) : cluster_(cluster) { wire_routes(); }

  ~HttpApi() { stop(); }

  // Binds and serves on a background thread. port 0 picks an ephemeral port.
  void start(int port) {
    if (port == 0) {
      port_ = server_.bind_to_any_port("127.0.0.1");
    } else {
      if (!server_.bind_to_port("127.0.0.1", port))
        fail(ErrorCode::Connection, "port " + std::to_string(port) + " is in use");
      port_ = port;
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  int port() const { return port_; }

  bool shutdown_requested() const { return shutdown_requested_.load(); }

 private:
  void wire_routes() {
    server_.Post("/apps", [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        json body = json::parse(req.body);
        json manifest_json = body.contains("manifest") ? body.at("manifest") : body;
        std::optional<DeploymentPlan> plan;
        if (body.contains("plan")) plan = DeploymentPlan::from_json(body.at("plan"));
        auto manifest = AppManifest::from_json(manifest_json);
        std::string app_id = cluster_.gateway().register_app(manifest, plan);
        res.set_content(json{{"app_id", app_id}}.dump(), "application/json");
      });
    });

    server_.Delete(R"(/apps/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        bool force = req.get_param_value("force") == "1";
        cluster_.gateway().deregister_app(req.matches[1], force);
        res.set_content(json{{"ok", true}}.dump(), "application/json");
      });
    });

    server_.Post(R"(/apps/([^/]+)/invoke)",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   handle_invoke(req, res);
                 });

    server_.Get("/state", [this](const httplib::Request&, httplib::Response& res) {
      guard(res, [&] {
        res.set_content(cluster_.gateway().state_snapshot().dump(2), "application/json");
      });
    });

    server_.Get("/metrics", [this](const httplib::Request&, httplib::Response& res) {
      guard(res, [&] {
        res.set_content(cluster_.gateway().metrics_snapshot().dump(2), "application/json");
      });
    });

    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("ok", "text/plain");
    });

    server_.Post("/admin/shutdown", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(json{{"ok", true}}.dump(), "application/json");
      shutdown_requested_.store(true);
    });
  }

  template <typename Fn>
  static void guard(httplib::Response& res, Fn&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      res.status = detail::http_status_for(e.code());
      res.set_content(e.to_json().dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump(),
                      "application/json");
    }
  }

  void handle_invoke(const httplib::Request& req, httplib::Response& res) {
    std::string app_id = req.matches[1];
    json request;
    try {
      request = req.body.empty() ? json::object() : json::parse(req.body);
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", {{"code", "validation"}, {"message", e.what()}}}}.dump(),
                      "application/json");
      return;
    }
    std::shared_ptr<Gateway::LiveResponse> live;
    try {
      live = std::make_shared<Gateway::LiveResponse>(
          cluster_.gateway().invoke(app_id, std::move(request)));
    } catch (const Error& e) {
      res.status = detail::http_status_for(e.code());
      res.set_content(e.to_json().dump(), "application/json");
      return;
    }

    // Chunked stream: one JSON object per line, drained across channels as
    // chunks arrive; a final summary line carries the trace verdict.
    res.set_chunked_content_provider(
        "application/x-ndjson", [this, live](size_t, httplib::DataSink& sink) {
          std::vector<bool> done(live->channels.size(), false);
          size_t remaining = live->channels.size();
          while (remaining > 0) {
            bool progressed = false;
            for (size_t i = 0; i < live->channels.size(); ++i) {
              if (done[i]) continue;
              auto& [task, channel, stream] = live->channels[i];
              ChunkStream::Chunk c;
              try {
                while (stream->try_pop(c)) {
                  json line{{"channel", channel}, {"meta", c.meta}};
                  if (!task.empty()) line["task"] = task;
                  if (!c.bytes.empty()) line["data_b64"] = detail::base64_encode(c.bytes);
                  std::string s = line.dump() + "\n";
                  if (!sink.write(s.data(), s.size())) return false;
                  progressed = true;
                }
                if (stream->finished()) {
                  done[i] = true;
                  --remaining;
                }
              } catch (const Error& e) {
                json line{{"channel", channel}, {"error", {{"code", to_string(e.code())},
                                                            {"message", e.what()}}}};
                std::string s = line.dump() + "\n";
                sink.write(s.data(), s.size());
                done[i] = true;
                --remaining;
              }
            }
            if (!progressed && remaining > 0)
              std::this_thread::sleep_for(std::chrono::milliseconds(1));
          }
          RequestTrace trace = live->trace.get();
          json tail{{"done", true},
                    {"request_id", trace.request_id},
                    {"failed", trace.failed},
                    {"latency_ms", trace.completion - trace.arrival}};
          if (trace.failed) tail["error"] = trace.error;
          std::string s = tail.dump() + "\n";
          sink.write(s.data(), s.size());
          sink.done();
          return true;
        });
  }

  Cluster& cluster_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<bool> shutdown_requested_{false};
};

}  // namespace fissim
