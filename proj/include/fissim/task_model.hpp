// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Task model: unit tasks, composite tasks, app manifests, and the canonical
// digest that drives component sharing. Two unit tasks are equivalent exactly
// when their canonical serializations are byte-identical; everything that
// dedupes deployments keys on canonical_hash().

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "fissim/common.hpp"

namespace fissim {

enum class TaskClass { Encoder, LLM, Generator };
enum class Modality { Text, Image, Video, Audio };

inline const char* to_string(TaskClass c) {
  switch (c) {
    case TaskClass::Encoder: return "Encoder";
    case TaskClass::LLM: return "LLM";
    case TaskClass::Generator: return "Generator";
  }
  return "?";
}

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::Text: return "text";
    case Modality::Image: return "image";
    case Modality::Video: return "video";
    case Modality::Audio: return "audio";
  }
  return "?";
}

inline TaskClass task_class_from_string(const std::string& s) {
  if (s == "Encoder") return TaskClass::Encoder;
  if (s == "LLM") return TaskClass::LLM;
  if (s == "Generator") return TaskClass::Generator;
  fail(ErrorCode::Validation, "unknown task class '" + s + "'");
}

inline Modality modality_from_string(const std::string& s) {
  if (s == "text") return Modality::Text;
  if (s == "image") return Modality::Image;
  if (s == "video") return Modality::Video;
  if (s == "audio") return Modality::Audio;
  fail(ErrorCode::Validation, "unknown modality '" + s + "'");
}

// Flat scalar for extra_config; keeps canonicalization unambiguous.
using Scalar = std::variant<bool, int64_t, double, std::string>;

inline json scalar_to_json(const Scalar& s) {
  return std::visit([](const auto& v) { return json(v); }, s);
}

inline Scalar scalar_from_json(const json& j) {
  if (j.is_boolean()) return j.get<bool>();
  if (j.is_number_integer()) return j.get<int64_t>();
  if (j.is_number_float()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  fail(ErrorCode::Validation, "extra_config values must be flat scalars, got: " + j.dump());
}

struct UnitTaskSpec {
  TaskClass task_class = TaskClass::LLM;
  std::string model_id;
  std::optional<Modality> modality;  // Encoder/Generator only
  bool recv_embeds = false;          // LLM only
  bool emit_hidden_states = false;   // LLM only
  std::set<std::string> encoder_ids; // Encoder only
  std::map<std::string, Scalar> extra_config;

  std::string role() const {
    auto it = extra_config.find("role");
    if (it == extra_config.end()) return "";
    if (const auto* s = std::get_if<std::string>(&it->second)) return *s;
    return "";
  }

  void validate() const {
    switch (task_class) {
      case TaskClass::Encoder:
        if (!modality) fail(ErrorCode::Validation, "Encoder spec requires a modality");
        if (encoder_ids.empty())
          fail(ErrorCode::Validation, "Encoder spec requires nonempty encoder_ids");
        if (recv_embeds || emit_hidden_states)
          fail(ErrorCode::Validation, "recv_embeds/emit_hidden_states are LLM-only fields");
        break;
      case TaskClass::LLM:
        if (model_id.empty()) fail(ErrorCode::Validation, "LLM spec requires model_id");
        if (modality) fail(ErrorCode::Validation, "modality is Encoder/Generator-only");
        if (!encoder_ids.empty())
          fail(ErrorCode::Validation, "encoder_ids is an Encoder-only field");
        break;
      case TaskClass::Generator:
        if (model_id.empty()) fail(ErrorCode::Validation, "Generator spec requires model_id");
        if (!modality) fail(ErrorCode::Validation, "Generator spec requires a modality");
        if (recv_embeds || emit_hidden_states || !encoder_ids.empty())
          fail(ErrorCode::Validation, "Generator spec carries only model_id/modality");
        break;
    }
  }

  // Deterministic byte serialization: fields emitted in a fixed order, set
  // values sorted, scalars JSON-encoded. Serializing twice yields identical
  // bytes; insertion order of encoder_ids and extra_config never matters.
  std::string canonical_bytes() const {
    std::string out = "fissim.unit_task.v1\n";
    out += "class=";
    out += to_string(task_class);
    out += '\n';
    out += "model_id=" + json(model_id).dump() + "\n";
    if (modality) {
      out += "modality=";
      out += to_string(*modality);
      out += '\n';
    }
    if (task_class == TaskClass::LLM) {
      out += std::string("recv_embeds=") + (recv_embeds ? "true" : "false") + "\n";
      out += std::string("emit_hidden_states=") + (emit_hidden_states ? "true" : "false") + "\n";
    }
    if (!encoder_ids.empty()) {
      out += "encoder_ids=[";
      bool first = true;
      for (const auto& id : encoder_ids) {  // std::set: sorted
        if (!first) out += ',';
        out += json(id).dump();
        first = false;
      }
      out += "]\n";
    }
    for (const auto& [k, v] : extra_config) {  // std::map: sorted
      out += "x." + k + "=" + scalar_to_json(v).dump() + "\n";
    }
    return out;
  }

  json to_json() const {
    json j{{"class", to_string(task_class)}, {"model_id", model_id}};
    if (modality) j["modality"] = to_string(*modality);
    if (task_class == TaskClass::LLM) {
      j["recv_embeds"] = recv_embeds;
      j["emit_hidden_states"] = emit_hidden_states;
    }
    if (!encoder_ids.empty()) j["encoder_ids"] = encoder_ids;
    if (!extra_config.empty()) {
      json x = json::object();
      for (const auto& [k, v] : extra_config) x[k] = scalar_to_json(v);
      j["extra_config"] = x;
    }
    return j;
  }

  static UnitTaskSpec from_json(const json& j) {
    UnitTaskSpec s;
    s.task_class = task_class_from_string(j.at("class").get<std::string>());
    s.model_id = j.value("model_id", "");
    if (j.contains("modality")) s.modality = modality_from_string(j.at("modality").get<std::string>());
    s.recv_embeds = j.value("recv_embeds", false);
    s.emit_hidden_states = j.value("emit_hidden_states", false);
    if (j.contains("encoder_ids"))
      s.encoder_ids = j.at("encoder_ids").get<std::set<std::string>>();
    if (j.contains("extra_config")) {
      for (const auto& [k, v] : j.at("extra_config").items()) s.extra_config[k] = scalar_from_json(v);
    }
    return s;
  }

  bool operator==(const UnitTaskSpec& other) const {
    return canonical_bytes() == other.canonical_bytes();
  }
};

// Equivalence digest over the canonical serialization. Equal specs yield equal
// digests regardless of field insertion order; any field difference changes it.
inline std::string canonical_hash(const UnitTaskSpec& spec) {
  spec.validate();
  return sha256_hex(spec.canonical_bytes());
}

inline std::string short_digest(const std::string& digest) { return digest.substr(0, 10); }

// ---------------------------------------------------------------------------
// Composite tasks

struct CompositeTaskSpec;

using TaskChild = std::variant<UnitTaskSpec, std::shared_ptr<CompositeTaskSpec>>;

struct CompositeTaskSpec {
  std::string kind;   // composite type in the built-in library, e.g. "mllm"
  json config;        // flat config object; children derive from it
  std::map<std::string, TaskChild> children;
};

// Builds children from config. Reconstructing from the same config yields
// equivalent children (post_init semantics).
using CompositeBuilder = std::function<std::map<std::string, TaskChild>(const json& config)>;

class CompositeLibrary {
 public:
  static CompositeLibrary& instance() {
    static CompositeLibrary lib;
    return lib;
  }

  void register_kind(const std::string& kind, CompositeBuilder builder) {
    builders_[kind] = std::move(builder);
  }

  bool has(const std::string& kind) const { return builders_.count(kind) > 0; }

  CompositeTaskSpec make(const std::string& kind, const json& config) const {
    auto it = builders_.find(kind);
    if (it == builders_.end()) fail(ErrorCode::Validation, "unknown composite task kind '" + kind + "'");
    CompositeTaskSpec spec;
    spec.kind = kind;
    spec.config = config;
    spec.children = it->second(config);
    return spec;
  }

 private:
  CompositeLibrary();  // registers built-ins; defined below
  std::map<std::string, CompositeBuilder> builders_;
};

namespace detail {

inline std::vector<Modality> modalities_from_config(const json& config) {
  std::vector<Modality> mods;
  for (const auto& m : config.value("modalities", json::array()))
    mods.push_back(modality_from_string(m.get<std::string>()));
  return mods;
}

inline std::set<std::string> encoder_ids_from_config(const json& config) {
  std::set<std::string> ids;
  if (config.contains("encoder_ids"))
    ids = config.at("encoder_ids").get<std::set<std::string>>();
  if (ids.empty() && config.contains("model_id")) ids.insert(config.at("model_id").get<std::string>());
  return ids;
}

// Multimodal LLM: optional per-modality encoders feeding one LLM. With
// encoder_fission the LLM receives embeddings from the sidecar; without it a
// single LLM unit handles encoding internally.
inline std::map<std::string, TaskChild> build_mllm(const json& config) {
  if (!config.contains("model_id")) fail(ErrorCode::Validation, "mllm config requires model_id");
  std::string model_id = config.at("model_id").get<std::string>();
  bool fission = config.value("encoder_fission", true);
  std::map<std::string, TaskChild> children;
  if (fission) {
    for (Modality m : modalities_from_config(config)) {
      if (m == Modality::Text) continue;
      UnitTaskSpec enc;
      enc.task_class = TaskClass::Encoder;
      enc.modality = m;
      enc.encoder_ids = encoder_ids_from_config(config);
      children[std::string("encoder.") + to_string(m)] = enc;
    }
  }
  UnitTaskSpec llm;
  llm.task_class = TaskClass::LLM;
  llm.model_id = model_id;
  llm.recv_embeds = fission;
  children["llm"] = llm;
  return children;
}

// Omni-style model: encoders -> thinker LLM -> (talker LLM -> audio generator)
// when the model supports audio output. encoder_fission=false collapses the
// whole model into one monolithic LLM unit.
inline std::map<std::string, TaskChild> build_omni(const json& config) {
  if (!config.contains("model_id")) fail(ErrorCode::Validation, "omni config requires model_id");
  std::string model_id = config.at("model_id").get<std::string>();
  bool fission = config.value("encoder_fission", true);
  bool audio_output = config.value("audio_output", true);
  std::map<std::string, TaskChild> children;
  if (!fission) {
    UnitTaskSpec mono;
    mono.task_class = TaskClass::LLM;
    mono.model_id = model_id;
    mono.recv_embeds = false;
    mono.extra_config["role"] = std::string("omni_monolith");
    mono.extra_config["audio_output"] = audio_output;
    std::string mods;
    for (Modality m : modalities_from_config(config)) {
      if (!mods.empty()) mods += ',';
      mods += to_string(m);
    }
    mono.extra_config["modalities"] = mods;
    children["monolith"] = mono;
    return children;
  }
  for (Modality m : modalities_from_config(config)) {
    if (m == Modality::Text) continue;
    UnitTaskSpec enc;
    enc.task_class = TaskClass::Encoder;
    enc.modality = m;
    enc.encoder_ids = encoder_ids_from_config(config);
    children[std::string("encoder.") + to_string(m)] = enc;
  }
  UnitTaskSpec thinker;
  thinker.task_class = TaskClass::LLM;
  thinker.model_id = model_id;
  thinker.recv_embeds = true;
  thinker.emit_hidden_states = audio_output;
  thinker.extra_config["role"] = std::string("thinker");
  children["thinker"] = thinker;
  if (audio_output) {
    UnitTaskSpec talker;
    talker.task_class = TaskClass::LLM;
    talker.model_id = model_id;
    talker.recv_embeds = false;
    talker.extra_config["role"] = std::string("talker");
    children["talker"] = talker;
    UnitTaskSpec gen;
    gen.task_class = TaskClass::Generator;
    gen.model_id = model_id;
    gen.modality = Modality::Audio;
    children["generator"] = gen;
  }
  return children;
}

}  // namespace detail

inline CompositeLibrary::CompositeLibrary() {
  builders_["mllm"] = detail::build_mllm;
  builders_["omni"] = detail::build_omni;
}

// All transitively reachable unit tasks, in child-name order at each level.
// Pure: same spec yields the same list in the same order.
inline void expand_composite_into(const CompositeTaskSpec& spec, std::vector<UnitTaskSpec>& out,
                                  std::vector<const CompositeTaskSpec*>& path) {
  for (const auto* p : path) {
    if (p == &spec)
      fail(ErrorCode::Validation, "cyclic composite nesting under kind '" + spec.kind + "'");
  }
  path.push_back(&spec);
  for (const auto& [name, child] : spec.children) {
    if (const auto* unit = std::get_if<UnitTaskSpec>(&child)) {
      unit->validate();
      out.push_back(*unit);
    } else {
      const auto& sub = std::get<std::shared_ptr<CompositeTaskSpec>>(child);
      if (!sub) fail(ErrorCode::Validation, "null composite child '" + name + "'");
      expand_composite_into(*sub, out, path);
    }
  }
  path.pop_back();
}

inline std::vector<UnitTaskSpec> expand_composite(const CompositeTaskSpec& spec) {
  std::vector<UnitTaskSpec> out;
  std::vector<const CompositeTaskSpec*> path;
  expand_composite_into(spec, out, path);
  return out;
}

// ---------------------------------------------------------------------------
// App manifests

// Serve routines are a fixed built-in library selected by name; the manifest
// never carries code. Arity limits are validated up front.
struct ServeEntryInfo {
  size_t min_tasks;
  size_t max_tasks;  // SIZE_MAX for unbounded
};

inline const std::map<std::string, ServeEntryInfo>& builtin_serve_entries() {
  static const std::map<std::string, ServeEntryInfo> entries = {
      {"mllm_chat", {1, 1}},
      {"omni_chat", {1, 1}},
      {"arena_fanout", {2, SIZE_MAX}},
  };
  return entries;
}

struct AppManifest {
  std::string app_id;
  std::string serve_entry;
  // Task entries preserve their manifest form; composites are built on demand.
  struct TaskEntry {
    std::string kind;  // "unit" or a composite kind
    json config;       // composite config, or {"spec": ...} for units
  };
  std::map<std::string, TaskEntry> tasks;

  json to_json() const {
    json t = json::object();
    for (const auto& [name, e] : tasks) {
      if (e.kind == "unit")
        t[name] = json{{"kind", "unit"}, {"spec", e.config}};
      else
        t[name] = json{{"kind", e.kind}, {"config", e.config}};
    }
    return json{{"app_id", app_id}, {"serve_entry", serve_entry}, {"tasks", t}};
  }

  static AppManifest from_json(const json& j) {
    AppManifest m;
    if (!j.is_object()) fail(ErrorCode::Validation, "manifest must be a JSON object");
    m.app_id = j.value("app_id", "");
    m.serve_entry = j.value("serve_entry", "");
    if (!j.contains("tasks") || !j.at("tasks").is_object())
      fail(ErrorCode::Validation, "manifest requires a 'tasks' object");
    for (const auto& [name, entry] : j.at("tasks").items()) {
      TaskEntry e;
      e.kind = entry.value("kind", "");
      if (e.kind == "unit") {
        if (!entry.contains("spec")) fail(ErrorCode::Validation, "unit task entry requires 'spec'");
        e.config = entry.at("spec");
      } else {
        e.config = entry.value("config", json::object());
      }
      m.tasks[name] = e;
    }
    return m;
  }
};

// Manifest after validation: composites built, unit tasks expanded and
// deduplicated by canonical digest.
struct ValidatedManifest {
  AppManifest manifest;
  std::map<std::string, CompositeTaskSpec> composites;       // task name -> composite
  std::map<std::string, std::vector<std::string>> task_units;  // task name -> digests
  std::map<std::string, UnitTaskSpec> unique_units;          // digest -> spec
};

inline ValidatedManifest validate_manifest(const AppManifest& manifest) {
  std::vector<std::string> errors;
  if (manifest.app_id.empty()) errors.push_back("app_id must be nonempty");
  if (manifest.tasks.empty()) errors.push_back("no tasks");
  auto serve_it = builtin_serve_entries().find(manifest.serve_entry);
  if (serve_it == builtin_serve_entries().end())
    errors.push_back("unknown serve_entry '" + manifest.serve_entry + "'");
  else {
    size_t n = manifest.tasks.size();
    if (n < serve_it->second.min_tasks || n > serve_it->second.max_tasks)
      errors.push_back("serve_entry '" + manifest.serve_entry + "' does not accept " +
                       std::to_string(n) + " task(s)");
  }

  ValidatedManifest out;
  out.manifest = manifest;
  for (const auto& [name, entry] : manifest.tasks) {
    try {
      std::vector<UnitTaskSpec> units;
      if (entry.kind == "unit") {
        UnitTaskSpec u = UnitTaskSpec::from_json(entry.config);
        u.validate();
        units.push_back(u);
        CompositeTaskSpec wrapper;  // single-unit pseudo composite for uniform handling
        wrapper.kind = "unit";
        wrapper.config = entry.config;
        wrapper.children["unit"] = u;
        out.composites[name] = wrapper;
      } else {
        CompositeTaskSpec c = CompositeLibrary::instance().make(entry.kind, entry.config);
        units = expand_composite(c);
        out.composites[name] = std::move(c);
      }
      for (const auto& u : units) {
        std::string digest = canonical_hash(u);
        out.task_units[name].push_back(digest);
        out.unique_units.emplace(digest, u);
      }
    } catch (const Error& e) {
      errors.push_back("task '" + name + "': " + e.what());
    }
  }

  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) {
      if (!joined.empty()) joined += "; ";
      joined += e;
    }
    fail(ErrorCode::Validation, joined);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Deployment descriptor for a unit task

struct TaskDescriptor {
  UnitTaskSpec unit_task;
  int64_t weight_bytes = 0;
  std::string profile_ref;
  std::set<int> allowed_tp_degrees;

  void validate() const {
    if (weight_bytes <= 0) fail(ErrorCode::Validation, "descriptor weight_bytes must be > 0");
    if (allowed_tp_degrees.empty())
      fail(ErrorCode::Validation, "descriptor allowed_tp_degrees must be nonempty");
  }
};

}  // namespace fissim
