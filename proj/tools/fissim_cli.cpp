// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single entry point: cluster bootstrap (up/down), app registration and
// invocation against a running gateway, offline planning, and benchmark runs.

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include "fissim/fissim.hpp"

namespace {

using namespace fissim;

volatile std::sig_atomic_t g_interrupted = 0;

void on_signal(int) { g_interrupted = 1; }

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Config, "cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail(ErrorCode::Config, "bad JSON in " + path + ": " + e.what());
  }
  return j;
}

struct ServerOpt {
  std::string url = "http://127.0.0.1:8780";
};

std::pair<std::string, int> split_host_port(const std::string& url) {
  std::string rest = url;
  auto scheme = rest.find("://");
  if (scheme != std::string::npos) rest = rest.substr(scheme + 3);
  auto colon = rest.rfind(':');
  if (colon == std::string::npos) return {rest, 80};
  return {rest.substr(0, colon), std::stoi(rest.substr(colon + 1))};
}

httplib::Client make_client(const std::string& url) {
  auto [host, port] = split_host_port(url);
  httplib::Client cli(host, port);
  cli.set_read_timeout(3600, 0);
  cli.set_connection_timeout(5, 0);
  return cli;
}

void require_http_ok(const httplib::Result& res, const std::string& what) {
  if (!res)
    fail(ErrorCode::Connection, what + ": cannot reach the cluster (is `fissim up` running?)");
  if (res->status >= 400) {
    try {
      json err = json::parse(res->body);
      fail(ErrorCode::Validation, what + " failed: " + err.dump());
    } catch (const Error&) {
      throw;
    } catch (...) {
      fail(ErrorCode::Validation, what + " failed with HTTP " + std::to_string(res->status));
    }
  }
}

int cmd_up(const std::string& config_path, int port_override) {
  ClusterConfig config = ClusterConfig::from_json(read_json_file(config_path));
  if (port_override > 0) config.http_port = port_override;
  Cluster cluster(config, host_factory_for(config));
  cluster.start();
  HttpApi api(cluster);
  api.start(config.http_port);
  std::cerr << "fissim: gateway listening on http://127.0.0.1:" << api.port() << "\n";
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_interrupted && !api.shutdown_requested())
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  std::cerr << "fissim: shutting down\n";
  api.stop();
  cluster.stop();
  return 0;
}

int cmd_down(const ServerOpt& server) {
  auto cli = make_client(server.url);
  auto res = cli.Post("/admin/shutdown", "", "application/json");
  require_http_ok(res, "down");
  std::cout << "ok\n";
  return 0;
}

int cmd_register(const std::string& manifest_path, const std::string& plan_path,
                 const ServerOpt& server) {
  json body = read_json_file(manifest_path);
  if (!plan_path.empty()) body = json{{"manifest", body}, {"plan", read_json_file(plan_path)}};
  auto cli = make_client(server.url);
  auto res = cli.Post("/apps", body.dump(), "application/json");
  require_http_ok(res, "register");
  std::cout << res->body << "\n";
  return 0;
}

int cmd_deregister(const std::string& app_id, bool force, const ServerOpt& server) {
  auto cli = make_client(server.url);
  auto res = cli.Delete(("/apps/" + app_id + (force ? "?force=1" : "")).c_str());
  require_http_ok(res, "deregister");
  std::cout << res->body << "\n";
  return 0;
}

int cmd_invoke(const std::string& app_id, const std::string& request_path,
               const ServerOpt& server) {
  json request = request_path.empty() ? json::object() : read_json_file(request_path);
  auto cli = make_client(server.url);
  httplib::Request req;
  req.method = "POST";
  req.path = "/apps/" + app_id + "/invoke";
  req.body = request.dump();
  req.set_header("Content-Type", "application/json");
  req.content_receiver = [](const char* data, size_t len, uint64_t, uint64_t) {
    std::cout.write(data, static_cast<std::streamsize>(len));
    std::cout.flush();
    return true;
  };
  auto res = cli.send(req);
  require_http_ok(res, "invoke");
  return 0;
}

int cmd_state(const ServerOpt& server, const std::string& path) {
  auto cli = make_client(server.url);
  auto res = cli.Get(path.c_str());
  require_http_ok(res, "state");
  std::cout << res->body << "\n";
  return 0;
}

struct PlanArgs {
  std::string profiles_path;
  std::string mix_path;
  int gpus = 8;
  int nodes = 1;
  int64_t gpu_mem = int64_t{80} * 1000 * 1000 * 1000;
  bool oracle = false;
  bool no_pair = false;
  bool monolith = false;
  bool json_only = false;
};

PlannerInputs build_scenario(const PlanArgs& args, const ProfileFile& profiles,
                             const WorkloadMix& mix) {
  if (args.gpus <= 0 || args.nodes <= 0 || args.gpus % args.nodes != 0)
    fail(ErrorCode::Config, "gpus must be a positive multiple of nodes");
  PlannerInputs in;
  int per_node = args.gpus / args.nodes;
  int id = 0;
  for (int n = 0; n < args.nodes; ++n)
    for (int g = 0; g < per_node; ++g) in.free_gpus.push_back({id++, n, args.gpu_mem});
  in.pair_talker_generator = !args.no_pair;

  auto demand = component_demand(mix);
  for (const auto& [role, d] : profiles.descriptors) {
    auto pit = profiles.profiles.find(d.profile);
    if (pit == profiles.profiles.end()) continue;
    if (pit->second.kind == ProfileKind::Monolith) {
      MonolithCandidate mono;
      mono.weight_bytes = d.weight_bytes;
      std::map<std::string, ComponentProfile> stages;
      std::map<std::string, double> stage_demand;
      for (const auto& stage : pit->second.components) {
        stages[stage] = profiles.profiles.at(stage);
        auto dd = demand.find(stage);
        stage_demand[stage] = dd == demand.end() ? 0.0 : dd->second;
      }
      mono.exclusive_ms_per_request = monolith_exclusive_ms(stages, stage_demand);
      in.monolith = mono;
      continue;
    }
    auto dit = demand.find(role);
    if (dit == demand.end() || dit->second <= 0) continue;  // not on any request path
    PlannerComponent c;
    c.name = role;
    c.profile = pit->second;
    c.weight_bytes = d.weight_bytes;
    c.allowed_tp = d.allowed_tp;
    c.demand = dit->second;
    in.components.push_back(std::move(c));
  }
  if (in.components.empty() && !in.monolith)
    fail(ErrorCode::Config, "mix demands no component in this profile file");
  in.monolith_only = args.monolith;
  return in;
}

int cmd_plan(const PlanArgs& args) {
  ProfileFile profiles = ProfileFile::load(args.profiles_path);
  WorkloadMix mix = WorkloadMix::load(args.mix_path);
  PlannerInputs in = build_scenario(args, profiles, mix);
  DeploymentPlan plan = args.oracle ? oracle_plan(in) : plan_deployment(in);
  std::cout << plan.to_json().dump(2) << "\n";
  if (!args.json_only) std::cerr << render_plan_table(plan, in.free_gpus);
  return 0;
}

struct BenchArgs {
  std::string app_path;
  std::string profiles_path;
  std::string mix_path;
  std::string plan_path;
  bool monolith = false;
  double rate = 0;
  double rate_factor = 0;
  double duration = 60;
  uint64_t seed = 1;
  std::string clock = "virtual";
  int gpus = 8;
  int nodes = 1;
  int64_t gpu_mem = int64_t{80} * 1000 * 1000 * 1000;
  std::string out_path;
  std::string csv_path;
  std::string trace_path;
};

int cmd_bench(const BenchArgs& args) {
  ExperimentConfig cfg;
  if (args.gpus <= 0 || args.nodes <= 0 || args.gpus % args.nodes != 0)
    fail(ErrorCode::Config, "gpus must be a positive multiple of nodes");
  int per_node = args.gpus / args.nodes;
  for (int n = 0; n < args.nodes; ++n) cfg.cluster.nodes.push_back({n, per_node, args.gpu_mem});
  cfg.cluster.clock = clock_mode_from_string(args.clock);
  cfg.cluster.profile_files = {args.profiles_path};
  cfg.app = AppManifest::from_json(read_json_file(args.app_path));
  cfg.mix = WorkloadMix::load(args.mix_path);
  cfg.monolith = args.monolith;
  if (!args.plan_path.empty()) cfg.plan = DeploymentPlan::from_json(read_json_file(args.plan_path));
  cfg.duration_s = args.duration;
  cfg.seed = args.seed;

  if (args.rate > 0) {
    cfg.rate_per_s = args.rate;
  } else {
    // Rate as a multiple of the planner objective (the knee).
    double factor = args.rate_factor > 0 ? args.rate_factor : 1.0;
    ProfileCatalog catalog;
    catalog.load_file(args.profiles_path);
    ValidatedManifest vm = validate_manifest(cfg.app);
    std::vector<GpuInfo> gpus;
    int id = 0;
    for (int n = 0; n < args.nodes; ++n)
      for (int g = 0; g < per_node; ++g) gpus.push_back({id++, n, args.gpu_mem});
    auto inputs = planner_inputs_for_app(vm, catalog, cfg.mix, gpus, args.monolith);
    auto plan = plan_deployment(inputs);
    cfg.rate_per_s = factor * plan.objective_value * 1000.0;
    if (cfg.rate_per_s <= 0) fail(ErrorCode::Config, "cannot derive a rate from the plan objective");
  }

  std::vector<RequestTrace> traces;
  if (!args.csv_path.empty() || !args.trace_path.empty()) cfg.trace_out = &traces;
  BenchReport report = run_experiment(cfg);
  std::string out = report.to_json().dump(2);
  if (args.out_path.empty()) {
    std::cout << out << "\n";
  } else {
    std::ofstream f(args.out_path);
    f << out << "\n";
    std::cout << "report written to " << args.out_path << "\n";
  }
  if (!args.csv_path.empty()) {
    // Latency CDF, gnuplot-friendly: latency_ms,cdf
    std::vector<double> lats;
    for (const auto& t : traces)
      if (!t.failed) lats.push_back(t.completion - t.arrival);
    std::sort(lats.begin(), lats.end());
    std::ofstream f(args.csv_path);
    f << "latency_ms,cdf\n";
    for (size_t i = 0; i < lats.size(); ++i)
      f << lats[i] << "," << double(i + 1) / double(lats.size()) << "\n";
  }
  if (!args.trace_path.empty()) {
    json arr = json::array();
    for (const auto& t : traces) arr.push_back(t.to_json());
    std::ofstream f(args.trace_path);
    f << arr.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fissim: desk-scale serving simulator for any-to-any multimodal models"};
  app.require_subcommand(1);

  // up
  auto* up = app.add_subcommand("up", "start a simulated cluster and gateway");
  std::string up_config;
  int up_port = 0;
  up->add_option("--config", up_config, "cluster config JSON")->required();
  up->add_option("--port", up_port, "override the HTTP port");

  // down
  auto* down = app.add_subcommand("down", "stop a running cluster");
  ServerOpt down_server;
  down->add_option("--server", down_server.url, "gateway URL");

  // register
  auto* reg = app.add_subcommand("register", "register an app manifest");
  std::string reg_manifest, reg_plan;
  ServerOpt reg_server;
  reg->add_option("manifest", reg_manifest, "app manifest JSON")->required();
  reg->add_option("--plan", reg_plan, "deployment plan hint JSON");
  reg->add_option("--server", reg_server.url, "gateway URL");

  // deregister
  auto* dereg = app.add_subcommand("deregister", "remove an app");
  std::string dereg_app;
  bool dereg_force = false;
  ServerOpt dereg_server;
  dereg->add_option("app_id", dereg_app)->required();
  dereg->add_flag("--force", dereg_force, "drop in-flight requests");
  dereg->add_option("--server", dereg_server.url, "gateway URL");

  // invoke
  auto* inv = app.add_subcommand("invoke", "send a request; chunks stream to stdout");
  std::string inv_app, inv_request;
  ServerOpt inv_server;
  inv->add_option("app_id", inv_app)->required();
  inv->add_option("request", inv_request, "request JSON file");
  inv->add_option("--server", inv_server.url, "gateway URL");

  // state / metrics
  auto* state = app.add_subcommand("state", "pool and task manager snapshot");
  ServerOpt state_server;
  state->add_option("--server", state_server.url, "gateway URL");
  auto* metrics = app.add_subcommand("metrics", "benchmark counters");
  ServerOpt metrics_server;
  metrics->add_option("--server", metrics_server.url, "gateway URL");

  // plan
  auto* plan = app.add_subcommand("plan", "compute a deployment plan");
  PlanArgs plan_args;
  plan->add_option("--profiles", plan_args.profiles_path)->required();
  plan->add_option("--mix", plan_args.mix_path)->required();
  plan->add_option("--gpus", plan_args.gpus);
  plan->add_option("--nodes", plan_args.nodes);
  plan->add_option("--gpu-mem", plan_args.gpu_mem, "per-gpu capacity bytes");
  plan->add_flag("--oracle", plan_args.oracle, "use the exhaustive oracle");
  plan->add_flag("--no-pair", plan_args.no_pair, "do not fuse talker+generator");
  plan->add_flag("--monolith", plan_args.monolith, "force the monolithic configuration");
  plan->add_flag("--json", plan_args.json_only, "suppress the table rendering");

  // bench
  auto* bench = app.add_subcommand("bench", "run a virtual or realtime benchmark");
  BenchArgs bench_args;
  bench->add_option("--app", bench_args.app_path)->required();
  bench->add_option("--profiles", bench_args.profiles_path)->required();
  bench->add_option("--mix", bench_args.mix_path)->required();
  bench->add_option("--plan", bench_args.plan_path, "deployment plan JSON");
  bench->add_flag("--monolith", bench_args.monolith, "deploy the monolithic configuration");
  bench->add_option("--rate", bench_args.rate, "offered req/s");
  bench->add_option("--rate-factor", bench_args.rate_factor,
                    "offered rate as a multiple of the plan objective");
  bench->add_option("--duration", bench_args.duration, "seconds");
  bench->add_option("--seed", bench_args.seed);
  bench->add_option("--clock", bench_args.clock)->check(CLI::IsMember({"virtual", "realtime"}));
  bench->add_option("--gpus", bench_args.gpus);
  bench->add_option("--nodes", bench_args.nodes);
  bench->add_option("--gpu-mem", bench_args.gpu_mem);
  bench->add_option("--out", bench_args.out_path, "report JSON path");
  bench->add_option("--csv", bench_args.csv_path, "latency CDF CSV path");
  bench->add_option("--trace-out", bench_args.trace_path, "full trace log JSON path");

  // executor-worker (spawned by the control plane in multi-process mode)
  auto* worker = app.add_subcommand("executor-worker", "internal: executor worker process");
  std::string worker_host = "127.0.0.1";
  int worker_port = 0;
  worker->add_option("--host", worker_host);
  worker->add_option("--port", worker_port)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (up->parsed()) return cmd_up(up_config, up_port);
    if (down->parsed()) return cmd_down(down_server);
    if (reg->parsed()) return cmd_register(reg_manifest, reg_plan, reg_server);
    if (dereg->parsed()) return cmd_deregister(dereg_app, dereg_force, dereg_server);
    if (inv->parsed()) return cmd_invoke(inv_app, inv_request, inv_server);
    if (state->parsed()) return cmd_state(state_server, "/state");
    if (metrics->parsed()) return cmd_state(metrics_server, "/metrics");
    if (plan->parsed()) return cmd_plan(plan_args);
    if (bench->parsed()) return cmd_bench(bench_args);
    if (worker->parsed()) return fissim::run_executor_worker(worker_host, worker_port);
  } catch (const fissim::Error& e) {
    std::cerr << e.to_json().dump() << "\n";
    switch (e.code()) {
      case fissim::ErrorCode::Internal:
        return 2;
      default:
        return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << R"({"error":{"code":"internal","message":")" << e.what() << R"("}})" << "\n";
    return 2;
  }
  return 0;
}
