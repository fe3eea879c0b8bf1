// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Workload mixes: request classes with modality fractions and size
// distributions. The planner consumes analytic means (per-component demand);
// the bench harness samples concrete requests from the same file.

#pragma once

#include <cmath>
#include <fstream>
#include <random>

#include "fissim/common.hpp"

namespace fissim {

// Scalar distribution with an analytic mean. Lognormal is parameterized by
// (mean, cv) so demand computation never needs sampling.
struct Dist {
  enum class Kind { Fixed, UniformInt, LogNormal } kind = Kind::Fixed;
  double value = 0;  // fixed
  int64_t lo = 0, hi = 0;
  double mean_param = 0, cv = 0.5;

  double mean() const {
    switch (kind) {
      case Kind::Fixed: return value;
      case Kind::UniformInt: return 0.5 * double(lo + hi);
      case Kind::LogNormal: return mean_param;
    }
    return 0;
  }

  double sample(std::mt19937_64& rng) const {
    switch (kind) {
      case Kind::Fixed:
        return value;
      case Kind::UniformInt: {
        std::uniform_int_distribution<int64_t> d(lo, hi);
        return double(d(rng));
      }
      case Kind::LogNormal: {
        // mean = exp(mu + sigma^2/2), cv^2 = exp(sigma^2) - 1
        double sigma2 = std::log(1.0 + cv * cv);
        double mu = std::log(std::max(1e-9, mean_param)) - 0.5 * sigma2;
        std::lognormal_distribution<double> d(mu, std::sqrt(sigma2));
        return d(rng);
      }
    }
    return 0;
  }

  int64_t sample_count(std::mt19937_64& rng, int64_t min_value = 0) const {
    return std::max<int64_t>(min_value, llround(sample(rng)));
  }

  static Dist from_json(const json& j) {
    Dist d;
    if (j.is_number()) {
      d.kind = Kind::Fixed;
      d.value = j.get<double>();
      return d;
    }
    std::string kind = j.value("dist", "fixed");
    if (kind == "fixed") {
      d.kind = Kind::Fixed;
      d.value = j.value("value", 0.0);
    } else if (kind == "uniform_int") {
      d.kind = Kind::UniformInt;
      d.lo = j.value("lo", int64_t{0});
      d.hi = j.value("hi", int64_t{0});
      if (d.hi < d.lo) fail(ErrorCode::Config, "uniform_int requires lo <= hi");
    } else if (kind == "lognormal") {
      d.kind = Kind::LogNormal;
      d.mean_param = j.value("mean", 0.0);
      d.cv = j.value("cv", 0.5);
    } else {
      fail(ErrorCode::Config, "unknown distribution kind '" + kind + "'");
    }
    return d;
  }

  json to_json() const {
    switch (kind) {
      case Kind::Fixed: return json{{"dist", "fixed"}, {"value", value}};
      case Kind::UniformInt: return json{{"dist", "uniform_int"}, {"lo", lo}, {"hi", hi}};
      case Kind::LogNormal:
        return json{{"dist", "lognormal"}, {"mean", mean_param}, {"cv", cv}};
    }
    return {};
  }
};

struct RequestClass {
  std::string name;
  double probability = 0;
  std::map<std::string, Dist> items;  // modality -> count per request
  Dist input_tokens;
  Dist output_tokens;
  double audio_output_probability = 0;
  Dist chunks;
};

struct WorkloadMix {
  std::string name;
  std::vector<RequestClass> classes;

  void validate() const {
    if (classes.empty()) fail(ErrorCode::Config, "workload mix requires at least one class");
    double total = 0;
    for (const auto& c : classes) {
      if (c.probability < 0) fail(ErrorCode::Config, "class probability must be >= 0");
      total += c.probability;
    }
    if (std::abs(total - 1.0) > 1e-9)
      fail(ErrorCode::Config, "class probabilities must sum to 1 (got " + std::to_string(total) + ")");
  }

  static WorkloadMix from_json(const json& j) {
    WorkloadMix m;
    m.name = j.value("name", "");
    for (const auto& c : j.value("classes", json::array())) {
      RequestClass rc;
      rc.name = c.value("name", "");
      rc.probability = c.value("probability", 0.0);
      json items = c.value("items", json::object());
      for (const auto& [mod, d] : items.items()) rc.items[mod] = Dist::from_json(d);
      if (c.contains("input_tokens")) rc.input_tokens = Dist::from_json(c.at("input_tokens"));
      if (c.contains("output_tokens")) rc.output_tokens = Dist::from_json(c.at("output_tokens"));
      rc.audio_output_probability = c.value("audio_output_probability", 0.0);
      if (c.contains("chunks")) rc.chunks = Dist::from_json(c.at("chunks"));
      m.classes.push_back(std::move(rc));
    }
    m.validate();
    return m;
  }

  static WorkloadMix load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Config, "cannot open mix file: " + path);
    json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      fail(ErrorCode::Config, "bad JSON in " + path + ": " + e.what());
    }
    return from_json(j);
  }

  json to_json() const {
    json cs = json::array();
    for (const auto& c : classes) {
      json items = json::object();
      for (const auto& [mod, d] : c.items) items[mod] = d.to_json();
      cs.push_back(json{{"name", c.name},
                        {"probability", c.probability},
                        {"items", items},
                        {"input_tokens", c.input_tokens.to_json()},
                        {"output_tokens", c.output_tokens.to_json()},
                        {"audio_output_probability", c.audio_output_probability},
                        {"chunks", c.chunks.to_json()}});
    }
    return json{{"name", name}, {"classes", cs}};
  }
};

// Expected work units per request for each component role. Components on no
// path get zero demand.
inline std::map<std::string, double> component_demand(const WorkloadMix& mix) {
  mix.validate();
  std::map<std::string, double> demand{{"llm", 0},    {"thinker", 0},  {"talker", 0},
                                       {"generator", 0}, {"encoder.image", 0},
                                       {"encoder.video", 0}, {"encoder.audio", 0}};
  for (const auto& c : mix.classes) {
    double out_tokens = c.output_tokens.mean();
    demand["llm"] += c.probability * out_tokens;
    demand["thinker"] += c.probability * out_tokens;
    double audio_work = c.probability * c.audio_output_probability * c.chunks.mean();
    demand["talker"] += audio_work;
    demand["generator"] += audio_work;
    for (const auto& [mod, d] : c.items) demand["encoder." + mod] += c.probability * d.mean();
  }
  return demand;
}

// One sampled request, ready for the gateway.
struct SampledRequest {
  TimeMs arrival_ms = 0;
  std::string class_name;
  json request;
};

// Open-loop Poisson arrivals with per-request sizes drawn from the mix.
// Deterministic per seed.
inline std::vector<SampledRequest> generate_workload(const WorkloadMix& mix, double rate_per_s,
                                                     double duration_s, uint64_t seed) {
  if (rate_per_s <= 0) fail(ErrorCode::Config, "arrival rate must be > 0");
  mix.validate();
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> gap(rate_per_s / 1000.0);  // per ms
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  std::vector<SampledRequest> out;
  double t = gap(rng);
  const double horizon_ms = duration_s * 1000.0;
  while (t < horizon_ms) {
    double pick = uni(rng);
    const RequestClass* cls = &mix.classes.back();
    double acc = 0;
    for (const auto& c : mix.classes) {
      acc += c.probability;
      if (pick <= acc) {
        cls = &c;
        break;
      }
    }
    SampledRequest req;
    req.arrival_ms = t;
    req.class_name = cls->name;
    json items = json::array();
    for (const auto& [mod, d] : cls->items) {
      int64_t count = d.sample_count(rng);
      for (int64_t i = 0; i < count; ++i) items.push_back(json{{"modality", mod}});
    }
    bool audio = uni(rng) < cls->audio_output_probability;
    int64_t in_tokens = cls->input_tokens.sample_count(rng, 1);
    int64_t out_tokens = cls->output_tokens.sample_count(rng, 1);
    int64_t chunks = audio ? cls->chunks.sample_count(rng, 1) : 0;
    req.request = json{{"class", cls->name},
                       {"text", "q"},
                       {"items", items},
                       {"audio_output", audio},
                       {"gen",
                        {{"input_tokens", in_tokens},
                         {"output_tokens", out_tokens},
                         {"chunks", chunks}}}};
    out.push_back(std::move(req));
    t += gap(rng);
  }
  return out;
}

}  // namespace fissim
