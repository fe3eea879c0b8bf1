// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <random>

#include "fissim/task_model.hpp"

using namespace fissim;

namespace {

UnitTaskSpec encoder_spec(std::set<std::string> ids, Modality m = Modality::Image) {
  UnitTaskSpec s;
  s.task_class = TaskClass::Encoder;
  s.modality = m;
  s.encoder_ids = std::move(ids);
  return s;
}

UnitTaskSpec llm_spec(const std::string& model, bool recv_embeds) {
  UnitTaskSpec s;
  s.task_class = TaskClass::LLM;
  s.model_id = model;
  s.recv_embeds = recv_embeds;
  return s;
}

// Random valid spec generator for the congruence property.
UnitTaskSpec random_spec(std::mt19937_64& rng) {
  UnitTaskSpec s;
  switch (rng() % 3) {
    case 0: {
      s.task_class = TaskClass::Encoder;
      s.modality = static_cast<Modality>(1 + rng() % 3);
      size_t n = 1 + rng() % 3;
      for (size_t i = 0; i < n; ++i) s.encoder_ids.insert("model-" + std::to_string(rng() % 6));
      break;
    }
    case 1:
      s.task_class = TaskClass::LLM;
      s.model_id = "model-" + std::to_string(rng() % 6);
      s.recv_embeds = rng() % 2;
      s.emit_hidden_states = rng() % 2;
      break;
    default:
      s.task_class = TaskClass::Generator;
      s.model_id = "model-" + std::to_string(rng() % 6);
      s.modality = Modality::Audio;
      break;
  }
  if (rng() % 2) s.extra_config["role"] = std::string(rng() % 2 ? "thinker" : "talker");
  if (rng() % 3 == 0) s.extra_config["k"] = static_cast<int64_t>(rng() % 4);
  return s;
}

}  // namespace

TEST_CASE("canonical_hash ignores set insertion order") {
  // Same encoder set given in different orders shares one digest, which is
  // what lets multiple apps share one encoder deployment.
  auto a = encoder_spec({"gemma-3-4b", "gemma-3-12b"});
  auto b = encoder_spec({"gemma-3-12b", "gemma-3-4b"});
  CHECK(canonical_hash(a) == canonical_hash(b));
}

TEST_CASE("canonical_hash is deterministic") {
  auto s = llm_spec("m", true);
  s.extra_config["role"] = std::string("thinker");
  CHECK(canonical_hash(s) == canonical_hash(s));
}

TEST_CASE("canonical_hash differs on any single field mutation") {
  UnitTaskSpec base = llm_spec("model-a", true);
  base.emit_hidden_states = false;
  base.extra_config["role"] = std::string("thinker");
  std::string d0 = canonical_hash(base);

  auto mutated = base;
  mutated.recv_embeds = false;
  CHECK(canonical_hash(mutated) != d0);

  mutated = base;
  mutated.emit_hidden_states = true;
  CHECK(canonical_hash(mutated) != d0);

  mutated = base;
  mutated.model_id = "model-b";
  CHECK(canonical_hash(mutated) != d0);

  mutated = base;
  mutated.extra_config["role"] = std::string("talker");
  CHECK(canonical_hash(mutated) != d0);

  mutated = base;
  mutated.extra_config.erase("role");
  CHECK(canonical_hash(mutated) != d0);

  UnitTaskSpec enc = encoder_spec({"a", "b"}, Modality::Image);
  UnitTaskSpec enc2 = enc;
  enc2.modality = Modality::Video;
  CHECK(canonical_hash(enc) != canonical_hash(enc2));
  UnitTaskSpec enc3 = enc;
  enc3.encoder_ids.insert("c");
  CHECK(canonical_hash(enc) != canonical_hash(enc3));
}

TEST_CASE("canonical_hash rejects malformed specs") {
  UnitTaskSpec enc;
  enc.task_class = TaskClass::Encoder;
  enc.encoder_ids = {"m"};
  // Encoder without a modality.
  CHECK_THROWS_AS(canonical_hash(enc), Error);

  UnitTaskSpec llm;
  llm.task_class = TaskClass::LLM;  // no model_id
  CHECK_THROWS_AS(canonical_hash(llm), Error);
}

TEST_CASE("digest equality is a congruence on random specs") {
  std::mt19937_64 rng(2024);
  std::vector<UnitTaskSpec> specs;
  for (int i = 0; i < 60; ++i) specs.push_back(random_spec(rng));
  for (const auto& a : specs) {
    CHECK(canonical_hash(a) == canonical_hash(a));  // reflexive
    for (const auto& b : specs) {
      bool ab = canonical_hash(a) == canonical_hash(b);
      bool ba = canonical_hash(b) == canonical_hash(a);
      CHECK(ab == ba);  // symmetric
      if (!ab) continue;
      for (const auto& c : specs) {
        if (canonical_hash(b) == canonical_hash(c)) CHECK(canonical_hash(a) == canonical_hash(c));
      }
      // Digest equality must coincide with canonical byte equality.
      CHECK(a.canonical_bytes() == b.canonical_bytes());
    }
  }
}

TEST_CASE("unit spec round-trips through JSON") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 40; ++i) {
    UnitTaskSpec s = random_spec(rng);
    UnitTaskSpec back = UnitTaskSpec::from_json(s.to_json());
    CHECK(back.canonical_bytes() == s.canonical_bytes());
  }
}

TEST_CASE("mllm expansion with fission enabled") {
  json config{{"model_id", "M"}, {"modalities", {"image"}}, {"encoder_fission", true}};
  auto comp = CompositeLibrary::instance().make("mllm", config);
  auto units = expand_composite(comp);
  REQUIRE(units.size() == 2);
  CHECK(units[0].task_class == TaskClass::Encoder);
  CHECK(units[0].modality == Modality::Image);
  CHECK(units[0].encoder_ids == std::set<std::string>{"M"});
  CHECK(units[1].task_class == TaskClass::LLM);
  CHECK(units[1].model_id == "M");
  CHECK(units[1].recv_embeds);
}

TEST_CASE("mllm expansion with fission disabled") {
  json config{{"model_id", "M"}, {"modalities", {"image"}}, {"encoder_fission", false}};
  auto units = expand_composite(CompositeLibrary::instance().make("mllm", config));
  REQUIRE(units.size() == 1);
  CHECK(units[0].task_class == TaskClass::LLM);
  CHECK_FALSE(units[0].recv_embeds);
}

TEST_CASE("omni expansion covers encoders, thinker, talker, generator") {
  json config{{"model_id", "Q"},
              {"modalities", {"image", "video", "audio"}},
              {"audio_output", true}};
  auto units = expand_composite(CompositeLibrary::instance().make("omni", config));
  REQUIRE(units.size() == 6);
  int encoders = 0, llms = 0, generators = 0;
  bool saw_thinker = false, saw_talker = false;
  for (const auto& u : units) {
    switch (u.task_class) {
      case TaskClass::Encoder: ++encoders; break;
      case TaskClass::LLM:
        ++llms;
        if (u.role() == "thinker") {
          saw_thinker = true;
          CHECK(u.emit_hidden_states);
          CHECK(u.recv_embeds);
        }
        if (u.role() == "talker") saw_talker = true;
        break;
      case TaskClass::Generator: ++generators; break;
    }
  }
  CHECK(encoders == 3);
  CHECK(llms == 2);
  CHECK(generators == 1);
  CHECK(saw_thinker);
  CHECK(saw_talker);
}

TEST_CASE("expansion is pure and order-stable") {
  json config{{"model_id", "Q"}, {"modalities", {"image", "audio"}}, {"audio_output", true}};
  auto c1 = CompositeLibrary::instance().make("omni", config);
  auto c2 = CompositeLibrary::instance().make("omni", config);
  auto u1 = expand_composite(c1);
  auto u2 = expand_composite(c2);
  REQUIRE(u1.size() == u2.size());
  for (size_t i = 0; i < u1.size(); ++i) CHECK(u1[i].canonical_bytes() == u2[i].canonical_bytes());
}

TEST_CASE("unknown composite kind errors") {
  CHECK_THROWS_AS(CompositeLibrary::instance().make("mystery", json::object()), Error);
}

TEST_CASE("cyclic composite nesting errors") {
  auto a = std::make_shared<CompositeTaskSpec>();
  a->kind = "manual";
  auto b = std::make_shared<CompositeTaskSpec>();
  b->kind = "manual2";
  a->children["b"] = b;
  b->children["a"] = a;
  CHECK_THROWS_AS(expand_composite(*a), Error);
}

namespace {

AppManifest gemma_arena_manifest() {
  json gemmas = {"google/gemma-3-4b-it", "google/gemma-3-12b-it"};
  AppManifest m;
  m.app_id = "gemma-arena";
  m.serve_entry = "arena_fanout";
  for (const auto& g : gemmas) {
    AppManifest::TaskEntry e;
    e.kind = "mllm";
    e.config = json{{"model_id", g},
                    {"modalities", {"image"}},
                    {"encoder_ids", gemmas},
                    {"encoder_fission", true}};
    m.tasks[g.get<std::string>()] = e;
  }
  return m;
}

}  // namespace

TEST_CASE("manifest validation dedups shared encoders") {
  // Two MLLM tasks sharing encoder_ids expand to one encoder digest plus one
  // LLM digest each.
  auto vm = validate_manifest(gemma_arena_manifest());
  CHECK(vm.unique_units.size() == 3);
  int llms = 0, encoders = 0;
  for (const auto& [digest, unit] : vm.unique_units) {
    if (unit.task_class == TaskClass::LLM) ++llms;
    if (unit.task_class == TaskClass::Encoder) ++encoders;
  }
  CHECK(llms == 2);
  CHECK(encoders == 1);

  // Dedup correctness: distinct digests equal unit count after dedup.
  std::set<std::string> digests;
  for (const auto& [name, ds] : vm.task_units)
    for (const auto& d : ds) digests.insert(d);
  CHECK(digests.size() == vm.unique_units.size());
}

TEST_CASE("manifest with no tasks errors") {
  AppManifest m;
  m.app_id = "x";
  m.serve_entry = "mllm_chat";
  CHECK_THROWS_WITH(validate_manifest(m), Catch::Matchers::ContainsSubstring("no tasks"));
}

TEST_CASE("manifest with unknown serve entry errors") {
  AppManifest m = gemma_arena_manifest();
  m.serve_entry = "mystery_serve";
  CHECK_THROWS_WITH(validate_manifest(m), Catch::Matchers::ContainsSubstring("unknown serve_entry"));
}

TEST_CASE("manifest serve arity is checked") {
  AppManifest m = gemma_arena_manifest();
  m.serve_entry = "mllm_chat";  // requires exactly one task, manifest has two
  CHECK_THROWS_AS(validate_manifest(m), Error);
}

TEST_CASE("manifest round-trips through JSON") {
  auto m = gemma_arena_manifest();
  auto back = AppManifest::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());
  auto vm = validate_manifest(back);
  CHECK(vm.unique_units.size() == 3);
}

TEST_CASE("task descriptor invariants") {
  TaskDescriptor d;
  d.unit_task = llm_spec("m", false);
  d.weight_bytes = 0;
  d.allowed_tp_degrees = {1};
  CHECK_THROWS_AS(d.validate(), Error);
  d.weight_bytes = 1024;
  d.allowed_tp_degrees = {};
  CHECK_THROWS_AS(d.validate(), Error);
  d.allowed_tp_degrees = {1, 2};
  CHECK_NOTHROW(d.validate());
}
