// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <fstream>
#include <random>

#include "fissim/record_replay.hpp"

using namespace fissim;

namespace {

ShapeRules default_shapes() { return ShapeRules{}; }

json load_fixture(const char* rel) {
  std::ifstream in(std::string(FISSIM_REPO_ROOT) + "/" + rel);
  REQUIRE(in.good());
  json j;
  in >> j;
  return j;
}

CompositeTaskSpec make_composite(const std::string& kind, const json& config) {
  return CompositeLibrary::instance().make(kind, config);
}

// Maps digests back to composite child names so fixtures can speak in roles.
std::map<std::string, std::string> role_by_digest(const CompositeTaskSpec& comp) {
  std::map<std::string, std::string> roles;
  for (const auto& [name, child] : comp.children) {
    if (const auto* unit = std::get_if<UnitTaskSpec>(&child)) roles[canonical_hash(*unit)] = name;
  }
  return roles;
}

// Builds a fake results map with one closed stream per output so replay can
// run without any executor.
ResultsMap fake_results(const InvocationGraph& g) {
  ResultsMap results;
  for (const auto& [id, inv] : g.nodes) {
    std::vector<OutputHandle> handles;
    for (const auto& out : inv.outputs) {
      OutputHandle h;
      h.ref = out;
      h.ref.state = RefState::Materialized;
      h.ref.location = "node0:gpu0:0";
      h.stream = std::make_shared<ChunkStream>();
      h.stream->push({json{{"t", id + "-chunk0"}}, {}});
      h.stream->push({json{{"t", id + "-chunk1"}}, {}});
      h.stream->close();
      handles.push_back(std::move(h));
    }
    results[id] = std::move(handles);
  }
  return results;
}

}  // namespace

TEST_CASE("recorded graphs match committed topology fixtures") {
  auto fixture = load_fixture("tests/fixtures/graph_topologies.json");
  for (const auto& scenario : fixture.at("scenarios")) {
    INFO("scenario " << scenario.at("name").get<std::string>());
    auto comp = make_composite(scenario.at("kind"), scenario.at("config"));
    auto roles = role_by_digest(comp);
    auto outcome = record(comp, scenario.at("request"), default_shapes(), "req-fix");
    const auto& g = outcome.graph;

    std::map<std::string, int> node_counts;
    for (const auto& [id, inv] : g.nodes) {
      REQUIRE(roles.count(inv.task_digest));
      node_counts[roles.at(inv.task_digest)]++;
    }
    std::map<std::string, int> expected_nodes;
    for (const auto& [role, count] : scenario.at("nodes").items())
      expected_nodes[role] = count.get<int>();
    CHECK(node_counts == expected_nodes);

    std::multiset<std::pair<std::string, std::string>> edge_roles;
    for (const auto& e : g.edges)
      edge_roles.insert({roles.at(g.nodes.at(e.producer).task_digest),
                         roles.at(g.nodes.at(e.consumer).task_digest)});
    std::multiset<std::pair<std::string, std::string>> expected_edges;
    for (const auto& e : scenario.at("edges"))
      expected_edges.insert({e.at(0).get<std::string>(), e.at(1).get<std::string>()});
    CHECK(edge_roles == expected_edges);
    CHECK_NOTHROW(validate(g));
  }
}

TEST_CASE("record of mllm with two images wires two data edges into the llm") {
  json config{{"model_id", "M"}, {"modalities", {"image"}}, {"encoder_fission", true}};
  auto comp = make_composite("mllm", config);
  json request{{"text", "compare"},
               {"items", {{{"modality", "image"}}, {{"modality", "image"}}}},
               {"gen", {{"input_tokens", 16}, {"output_tokens", 8}, {"chunks", 0}}}};
  auto outcome = record(comp, request, default_shapes(), "req-0");
  CHECK(outcome.graph.nodes.size() == 3);
  CHECK(outcome.graph.edges.size() == 2);
  // Both edges terminate at the llm invocation.
  for (const auto& e : outcome.graph.edges)
    CHECK(outcome.graph.nodes.at(e.consumer).task_digest ==
          canonical_hash(std::get<UnitTaskSpec>(comp.children.at("llm"))));
  CHECK(outcome.graph.sink_refs.count("text") == 1);
}

TEST_CASE("text-only mllm request bypasses the encoder") {
  json config{{"model_id", "M"}, {"modalities", {"image"}}, {"encoder_fission", true}};
  auto comp = make_composite("mllm", config);
  json request{{"text", "just text"}, {"items", json::array()}};
  auto outcome = record(comp, request, default_shapes(), "req-1");
  CHECK(outcome.graph.nodes.size() == 1);
  CHECK(outcome.graph.edges.empty());
}

TEST_CASE("omni audio request records the four-stage chain") {
  json config{{"model_id", "Q"}, {"modalities", {"image"}}, {"audio_output", true}};
  auto comp = make_composite("omni", config);
  json request{{"text", "describe"},
               {"items", {{{"modality", "image"}}}},
               {"audio_output", true},
               {"gen", {{"input_tokens", 16}, {"output_tokens", 10}, {"chunks", 6}}}};
  auto outcome = record(comp, request, default_shapes(), "req-2");
  REQUIRE(outcome.graph.nodes.size() == 4);
  REQUIRE(outcome.graph.edges.size() == 3);
  auto order = topo_order(outcome.graph);
  auto roles = role_by_digest(comp);
  std::vector<std::string> role_order;
  for (const auto& id : order) role_order.push_back(roles.at(outcome.graph.nodes.at(id).task_digest));
  CHECK(role_order == std::vector<std::string>{"encoder.image", "thinker", "talker", "generator"});
  // The thinker->talker edge carries hidden states: output index 1.
  bool hidden_edge = false;
  for (const auto& e : outcome.graph.edges) {
    if (roles.at(outcome.graph.nodes.at(e.producer).task_digest) == "thinker") {
      CHECK(e.output_index == 1);
      hidden_edge = true;
    }
  }
  CHECK(hidden_edge);
  CHECK(outcome.graph.sink_refs.count("text") == 1);
  CHECK(outcome.graph.sink_refs.count("audio") == 1);
}

TEST_CASE("recording twice yields identical graphs") {
  json config{{"model_id", "Q"}, {"modalities", {"image", "audio"}}, {"audio_output", true}};
  auto comp = make_composite("omni", config);
  json request{{"text", "x"},
               {"items", {{{"modality", "image"}}, {{"modality", "audio"}}}},
               {"audio_output", true}};
  auto a = record(comp, request, default_shapes(), "req-3");
  auto b = record(comp, request, default_shapes(), "req-3");
  CHECK(a.graph.to_json() == b.graph.to_json());
}

TEST_CASE("graph completeness: every placeholder is consumed or a sink") {
  auto fixture = load_fixture("tests/fixtures/graph_topologies.json");
  for (const auto& scenario : fixture.at("scenarios")) {
    INFO("scenario " << scenario.at("name").get<std::string>());
    auto comp = make_composite(scenario.at("kind"), scenario.at("config"));
    auto outcome = record(comp, scenario.at("request"), default_shapes(), "req-c");
    std::set<std::string> consumed;
    for (const auto& e : outcome.graph.edges)
      consumed.insert(outcome.graph.nodes.at(e.producer).outputs.at(e.output_index).ref_id);
    for (const auto& [channel, ref] : outcome.graph.sink_refs) consumed.insert(ref.ref_id);
    for (const auto& [id, inv] : outcome.graph.nodes)
      for (const auto& out : inv.outputs) CHECK(consumed.count(out.ref_id) == 1);
  }
}

TEST_CASE("placeholder content access during record raises a hazard") {
  struct Registrar {
    Registrar() {
      CompositeLibrary::instance().register_kind("adversarial_content", [](const json& config) {
        std::map<std::string, TaskChild> children;
        UnitTaskSpec llm;
        llm.task_class = TaskClass::LLM;
        llm.model_id = config.value("model_id", "M");
        children["llm"] = llm;
        return children;
      });
      InvokeLibrary::instance().register_kind(
          "adversarial_content",
          [](InvokeContext& ctx, const CompositeTaskSpec&, const json& request) {
            TaskResult r = ctx.invoke("llm", Inputs().literal(request));
            r.stream(0);  // content peek: must raise during record
            ResponseChannels out;
            out.channels["text"] = {r, 0};
            return out;
          });
    }
  };
  static Registrar registrar;

  auto comp = CompositeLibrary::instance().make("adversarial_content", json{{"model_id", "M"}});
  json request{{"text", "x"}};
  try {
    record(comp, request, default_shapes(), "req-h");
    FAIL("expected determinism hazard");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DeterminismHazard);
    CHECK(std::string(e.what()).find("/i0000") != std::string::npos);
  }
}

namespace {

// Composite whose control flow branches on result state: records one path,
// replays another. Replay must diagnose the divergence at the llm step.
struct BranchRegistrar {
  BranchRegistrar() {
    CompositeLibrary::instance().register_kind("adversarial_branch", [](const json& config) {
      std::map<std::string, TaskChild> children;
      UnitTaskSpec llm;
      llm.task_class = TaskClass::LLM;
      llm.model_id = config.value("model_id", "M");
      children["llm"] = llm;
      UnitTaskSpec alt;
      alt.task_class = TaskClass::LLM;
      alt.model_id = config.value("model_id", "M") + "-alt";
      children["llm_alt"] = alt;
      return children;
    });
    InvokeLibrary::instance().register_kind(
        "adversarial_branch", [](InvokeContext& ctx, const CompositeTaskSpec&, const json& request) {
          TaskResult first = ctx.invoke("llm", Inputs().literal(request));
          // Placeholders are not materialized during record; real results are.
          const char* next = first.materialized() ? "llm_alt" : "llm";
          TaskResult second = ctx.invoke(next, Inputs().literal(request));
          ResponseChannels out;
          out.channels["text"] = {second, 0};
          return out;
        });
  }
};

}  // namespace

TEST_CASE("replay divergence is caught and names the first divergent step") {
  static BranchRegistrar registrar;
  auto comp = CompositeLibrary::instance().make("adversarial_branch", json{{"model_id", "M"}});
  json request{{"text", "x"}};
  auto outcome = record(comp, request, default_shapes(), "req-b");
  CHECK(outcome.graph.nodes.size() == 2);
  auto results = fake_results(outcome.graph);
  try {
    replay(comp, request, outcome.graph, results);
    FAIL("expected determinism violation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DeterminismViolation);
    CHECK(std::string(e.what()).find("req-b/i0001") != std::string::npos);
    CHECK(std::string(e.what()).find("step 2") != std::string::npos);
  }
}

TEST_CASE("replay follows the recorded sequence and returns live channels") {
  json config{{"model_id", "Q"}, {"modalities", {"image"}}, {"audio_output", true}};
  auto comp = make_composite("omni", config);
  json request{{"text", "x"},
               {"items", {{{"modality", "image"}}}},
               {"audio_output", true},
               {"gen", {{"input_tokens", 8}, {"output_tokens", 4}, {"chunks", 3}}}};
  auto outcome = record(comp, request, default_shapes(), "req-r");
  auto results = fake_results(outcome.graph);
  auto replayed = replay(comp, request, outcome.graph, results);
  REQUIRE(replayed.channels.channels.count("text") == 1);
  REQUIRE(replayed.channels.channels.count("audio") == 1);
  auto text = replayed.channels.channels.at("text");
  auto stream = text.result.stream(text.output_index);
  auto c0 = stream->pop();
  REQUIRE(c0.has_value());
  CHECK(c0->meta.at("t").get<std::string>().find("-chunk0") != std::string::npos);
}

TEST_CASE("replay over the corpus matches record for many seeded requests") {
  // Property: for random requests against the built-in composites, replay's
  // invocation sequence equals record's (replay throws otherwise).
  std::mt19937_64 rng(321);
  json omni_config{{"model_id", "Q"}, {"modalities", {"image", "video", "audio"}}, {"audio_output", true}};
  auto omni = make_composite("omni", omni_config);
  json mllm_config{{"model_id", "M"}, {"modalities", {"image"}}, {"encoder_fission", true}};
  auto mllm = make_composite("mllm", mllm_config);
  for (int i = 0; i < 300; ++i) {
    bool use_omni = rng() % 2;
    json request{{"text", "t" + std::to_string(i)}, {"audio_output", use_omni && rng() % 2}};
    json items = json::array();
    const char* mods[] = {"image", "video", "audio"};
    size_t n_items = rng() % 4;
    for (size_t k = 0; k < n_items; ++k)
      items.push_back(json{{"modality", mods[rng() % (use_omni ? 3 : 1)]}});
    request["items"] = items;
    request["gen"] = json{{"input_tokens", 1 + int(rng() % 64)},
                          {"output_tokens", 1 + int(rng() % 32)},
                          {"chunks", int(rng() % 16)}};
    const auto& comp = use_omni ? omni : mllm;
    auto outcome = record(comp, request, default_shapes(), "req-p" + std::to_string(i));
    auto results = fake_results(outcome.graph);
    CHECK_NOTHROW(replay(comp, request, outcome.graph, results));
  }
}

TEST_CASE("match_placeholders links refs and rejects forged ids") {
  json config{{"model_id", "M"}, {"modalities", {"image"}}, {"encoder_fission", true}};
  auto comp = make_composite("mllm", config);
  json request{{"text", "c"}, {"items", {{{"modality", "image"}}, {{"modality", "image"}}}}};
  auto outcome = record(comp, request, default_shapes(), "req-m");

  // Rebuild a session from the graph in node order and re-match.
  std::vector<RecordedInvocation> session;
  for (const auto& [id, inv] : outcome.graph.nodes) session.push_back(inv);
  auto edges = match_placeholders(session);
  CHECK(edges.size() == 2);

  // Forge an input ref id on the consumer.
  auto forged = session;
  for (auto& inv : forged) {
    for (auto& slot : inv.inputs) {
      if (auto* ref = std::get_if<DataRef>(&slot)) ref->ref_id = "forged/r9999";
    }
  }
  bool threw = false;
  try {
    match_placeholders(forged);
  } catch (const Error& e) {
    threw = true;
    CHECK(e.code() == ErrorCode::DanglingRef);
  }
  CHECK(threw);

  CHECK_THROWS_AS(match_placeholders({}), Error);
}

TEST_CASE("requesting audio from a text-only app fails validation") {
  json config{{"model_id", "Q"}, {"modalities", json::array()}, {"audio_output", false}};
  auto comp = make_composite("omni", config);
  json request{{"text", "x"}, {"audio_output", true}};
  CHECK_THROWS_AS(record(comp, request, default_shapes(), "req-a"), Error);
}

TEST_CASE("shape rules estimate payload descriptors from request metadata") {
  ShapeRules shapes;
  json img{{"modality", "image"}, {"width", 896}, {"height", 896}};
  auto desc = shapes.embed_desc(img);
  CHECK(desc.shape[0] == (896 * 896 + shapes.pixels_per_token - 1) / shapes.pixels_per_token);
  CHECK(desc.shape[1] == shapes.hidden_dim);
  CHECK(desc.total_bytes() == desc.shape[0] * desc.shape[1] * shapes.embed_elem_bytes);

  json vid{{"modality", "video"}, {"frames", 8}};
  CHECK(shapes.embed_desc(vid).shape[0] == 8 * shapes.tokens_per_frame);

  json aud{{"modality", "audio"}, {"seconds", 4}};
  CHECK(shapes.embed_desc(aud).shape[0] == 4 * shapes.tokens_per_audio_second);
}

TEST_CASE("record-phase payload estimates match executor output sizes across dims") {
  ShapeRules shapes;
  json config{{"model_id", "M"}, {"modalities", {"image", "video", "audio"}},
              {"encoder_fission", true}};
  auto comp = make_composite("mllm", config);
  std::vector<json> items = {
      json{{"modality", "image"}, {"width", 336}, {"height", 336}},
      json{{"modality", "image"}, {"width", 1344}, {"height", 896}},
      json{{"modality", "video"}, {"frames", 24}},
      json{{"modality", "audio"}, {"seconds", 12.5}},
  };
  for (const auto& item : items) {
    json request{{"text", "x"}, {"items", {item}},
                 {"gen", {{"input_tokens", 8}, {"output_tokens", 4}, {"chunks", 0}}}};
    auto outcome = record(comp, request, shapes, "req-dims");
    // The encoder node's planned output descriptor equals the shape rule,
    // which is also what the executor materializes (same rule table).
    for (const auto& [id, inv] : outcome.graph.nodes) {
      if (inv.outputs.size() != 1 || inv.outputs[0].streaming) continue;
      CHECK(inv.outputs[0].desc.total_bytes() == shapes.embed_desc(item).total_bytes());
      CHECK(inv.outputs[0].desc.shape == shapes.embed_desc(item).shape);
    }
  }
}
