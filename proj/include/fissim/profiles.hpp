// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Calibrated performance models for simulated executors, plus the per-model
// catalog that binds unit tasks to deployment descriptors and payload shape
// rules. Shipped profile files live under profiles/; the README there says
// which numbers are anchored ratios and which are stand-ins.

#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fissim/invocation_graph.hpp"
#include "fissim/task_model.hpp"

namespace fissim {

enum class ProfileKind { Encoder, LLMPrefillDecode, AutoregressiveTalker, Generator, Monolith };

inline const char* to_string(ProfileKind k) {
  switch (k) {
    case ProfileKind::Encoder: return "encoder";
    case ProfileKind::LLMPrefillDecode: return "llm_prefill_decode";
    case ProfileKind::AutoregressiveTalker: return "autoregressive_talker";
    case ProfileKind::Generator: return "generator";
    case ProfileKind::Monolith: return "monolith";
  }
  return "?";
}

inline ProfileKind profile_kind_from_string(const std::string& s) {
  if (s == "encoder") return ProfileKind::Encoder;
  if (s == "llm_prefill_decode") return ProfileKind::LLMPrefillDecode;
  if (s == "autoregressive_talker") return ProfileKind::AutoregressiveTalker;
  if (s == "generator") return ProfileKind::Generator;
  if (s == "monolith") return ProfileKind::Monolith;
  fail(ErrorCode::Config, "unknown profile kind '" + s + "'");
}

struct ComponentProfile {
  std::string name;
  ProfileKind kind = ProfileKind::LLMPrefillDecode;

  // encoder: run time = base_ms + per_item_ms * items, batching items across
  // queued invocations up to max_batch.
  double base_ms = 0;
  double per_item_ms = 0;

  // llm/talker: decode step = decode_a_ms + decode_b_ms * batch; prefill cost
  // charged on the admission step.
  double prefill_ms_per_token = 0;
  double decode_a_ms = 0;
  double decode_b_ms = 0;
  int max_batch = 1;

  // generator: sequential chunk server.
  double per_chunk_ms = 0;

  // Internal encode cost for non-fissioned LLMs handling multimodal inputs.
  double internal_encode_per_item_ms = 0;

  std::map<int, double> tp_scaling = {{1, 1.0}};
  int64_t activation_bytes = 0;

  // monolith only: ordered stage profile names and admission cap.
  std::vector<std::string> components;
  int admit_cap = 32;

  double speedup(int tp) const {
    auto it = tp_scaling.find(tp);
    if (it == tp_scaling.end())
      fail(ErrorCode::Config, "profile '" + name + "' has no tp_scaling entry for TP-" + std::to_string(tp));
    return it->second;
  }

  // Saturated throughput in work units per ms (items, decode tokens, chunks).
  double saturated_rate(int tp) const {
    double s = speedup(tp);
    switch (kind) {
      case ProfileKind::Encoder:
        return max_batch / ((base_ms + per_item_ms * max_batch) / s);
      case ProfileKind::LLMPrefillDecode:
      case ProfileKind::AutoregressiveTalker:
        return max_batch / ((decode_a_ms + decode_b_ms * max_batch) / s);
      case ProfileKind::Generator:
        return s / per_chunk_ms;
      case ProfileKind::Monolith:
        fail(ErrorCode::Config, "monolith rate is derived from its stages");
    }
    return 0;
  }

  double batch1_rate(int tp) const {
    double s = speedup(tp);
    switch (kind) {
      case ProfileKind::Encoder:
        return 1.0 / ((base_ms + per_item_ms) / s);
      case ProfileKind::LLMPrefillDecode:
      case ProfileKind::AutoregressiveTalker:
        return 1.0 / ((decode_a_ms + decode_b_ms) / s);
      case ProfileKind::Generator:
        return s / per_chunk_ms;
      case ProfileKind::Monolith:
        fail(ErrorCode::Config, "monolith rate is derived from its stages");
    }
    return 0;
  }

  void validate() const {
    auto positive = [&](double v, const char* field) {
      if (!(v > 0)) fail(ErrorCode::Config, "profile '" + name + "': " + field + " must be > 0");
    };
    switch (kind) {
      case ProfileKind::Encoder:
        positive(base_ms, "base_ms");
        positive(per_item_ms, "per_item_ms");
        if (max_batch < 1) fail(ErrorCode::Config, "profile '" + name + "': max_batch must be >= 1");
        break;
      case ProfileKind::LLMPrefillDecode:
      case ProfileKind::AutoregressiveTalker:
        positive(decode_a_ms, "decode_a_ms");
        positive(decode_b_ms, "decode_b_ms");
        if (prefill_ms_per_token < 0)
          fail(ErrorCode::Config, "profile '" + name + "': prefill_ms_per_token must be >= 0");
        if (max_batch < 1) fail(ErrorCode::Config, "profile '" + name + "': max_batch must be >= 1");
        break;
      case ProfileKind::Generator:
        positive(per_chunk_ms, "per_chunk_ms");
        break;
      case ProfileKind::Monolith:
        if (components.empty())
          fail(ErrorCode::Config, "profile '" + name + "': monolith requires stage components");
        break;
    }
    auto one = tp_scaling.find(1);
    if (one == tp_scaling.end() || one->second != 1.0)
      fail(ErrorCode::Config, "profile '" + name + "': tp_scaling[1] must be 1.0");
    double prev = 0;
    for (const auto& [tp, s] : tp_scaling) {
      if (s < prev) fail(ErrorCode::Config, "profile '" + name + "': tp_scaling must be nondecreasing");
      if (s > tp + 1e-9)
        fail(ErrorCode::Config, "profile '" + name + "': speedup cannot exceed TP degree");
      prev = s;
    }
  }

  json to_json() const {
    json j{{"kind", to_string(kind)}};
    switch (kind) {
      case ProfileKind::Encoder:
        j["base_ms"] = base_ms;
        j["per_item_ms"] = per_item_ms;
        j["max_batch"] = max_batch;
        break;
      case ProfileKind::LLMPrefillDecode:
      case ProfileKind::AutoregressiveTalker:
        j["prefill_ms_per_token"] = prefill_ms_per_token;
        j["decode_a_ms"] = decode_a_ms;
        j["decode_b_ms"] = decode_b_ms;
        j["max_batch"] = max_batch;
        break;
      case ProfileKind::Generator:
        j["per_chunk_ms"] = per_chunk_ms;
        break;
      case ProfileKind::Monolith:
        j["components"] = components;
        j["admit_cap"] = admit_cap;
        break;
    }
    if (internal_encode_per_item_ms > 0) j["internal_encode_per_item_ms"] = internal_encode_per_item_ms;
    json tp = json::object();
    for (const auto& [k, v] : tp_scaling) tp[std::to_string(k)] = v;
    j["tp_scaling"] = tp;
    j["activation_bytes"] = activation_bytes;
    return j;
  }

  static ComponentProfile from_json(const std::string& name, const json& j) {
    ComponentProfile p;
    p.name = name;
    p.kind = profile_kind_from_string(j.at("kind").get<std::string>());
    p.base_ms = j.value("base_ms", 0.0);
    p.per_item_ms = j.value("per_item_ms", 0.0);
    p.prefill_ms_per_token = j.value("prefill_ms_per_token", 0.0);
    p.decode_a_ms = j.value("decode_a_ms", 0.0);
    p.decode_b_ms = j.value("decode_b_ms", 0.0);
    p.max_batch = j.value("max_batch", 1);
    p.per_chunk_ms = j.value("per_chunk_ms", 0.0);
    p.internal_encode_per_item_ms = j.value("internal_encode_per_item_ms", 0.0);
    if (j.contains("tp_scaling")) {
      p.tp_scaling.clear();
      for (const auto& [k, v] : j.at("tp_scaling").items()) p.tp_scaling[std::stoi(k)] = v.get<double>();
    }
    p.activation_bytes = j.value("activation_bytes", int64_t{0});
    if (j.contains("components")) p.components = j.at("components").get<std::vector<std::string>>();
    p.admit_cap = j.value("admit_cap", 32);
    p.validate();
    return p;
  }
};

// ---------------------------------------------------------------------------
// Payload shape rules: estimate intermediate tensor descriptors from request
// metadata at record time. Replay sizes are authoritative via the sidecar.

struct ShapeRules {
  // image: tokens = ceil(width*height / pixels_per_token)
  int64_t pixels_per_token = 1024;
  int64_t default_image_width = 896;
  int64_t default_image_height = 896;
  // video: tokens = frames * tokens_per_frame
  int64_t tokens_per_frame = 196;
  int64_t default_video_frames = 16;
  // audio input: tokens = seconds * tokens_per_second
  int64_t tokens_per_audio_second = 25;
  double default_audio_seconds = 8;
  int64_t hidden_dim = 1024;
  int64_t embed_elem_bytes = 2;
  int64_t audio_samples_per_chunk = 960;

  static ShapeRules from_json(const json& j) {
    ShapeRules r;
    r.pixels_per_token = j.value("pixels_per_token", r.pixels_per_token);
    r.default_image_width = j.value("default_image_width", r.default_image_width);
    r.default_image_height = j.value("default_image_height", r.default_image_height);
    r.tokens_per_frame = j.value("tokens_per_frame", r.tokens_per_frame);
    r.default_video_frames = j.value("default_video_frames", r.default_video_frames);
    r.tokens_per_audio_second = j.value("tokens_per_audio_second", r.tokens_per_audio_second);
    r.default_audio_seconds = j.value("default_audio_seconds", r.default_audio_seconds);
    r.hidden_dim = j.value("hidden_dim", r.hidden_dim);
    r.embed_elem_bytes = j.value("embed_elem_bytes", r.embed_elem_bytes);
    r.audio_samples_per_chunk = j.value("audio_samples_per_chunk", r.audio_samples_per_chunk);
    return r;
  }

  json to_json() const {
    return json{{"pixels_per_token", pixels_per_token},
                {"default_image_width", default_image_width},
                {"default_image_height", default_image_height},
                {"tokens_per_frame", tokens_per_frame},
                {"default_video_frames", default_video_frames},
                {"tokens_per_audio_second", tokens_per_audio_second},
                {"default_audio_seconds", default_audio_seconds},
                {"hidden_dim", hidden_dim},
                {"embed_elem_bytes", embed_elem_bytes},
                {"audio_samples_per_chunk", audio_samples_per_chunk}};
  }

  int64_t item_tokens(const json& item) const {
    Modality m = modality_from_string(item.value("modality", "image"));
    switch (m) {
      case Modality::Image: {
        int64_t w = item.value("width", default_image_width);
        int64_t h = item.value("height", default_image_height);
        return (w * h + pixels_per_token - 1) / pixels_per_token;
      }
      case Modality::Video: {
        int64_t frames = item.value("frames", default_video_frames);
        return frames * tokens_per_frame;
      }
      case Modality::Audio: {
        double seconds = item.value("seconds", default_audio_seconds);
        return static_cast<int64_t>(std::ceil(seconds * tokens_per_audio_second));
      }
      case Modality::Text:
        return 0;
    }
    return 0;
  }

  PayloadDesc embed_desc(const json& item) const {
    PayloadDesc d;
    d.shape = {item_tokens(item), hidden_dim};
    d.elem_bytes = embed_elem_bytes;
    return d;
  }

  // One hidden-state chunk per decoded token.
  PayloadDesc hidden_chunk_desc(int64_t tokens) const {
    return PayloadDesc{{tokens, hidden_dim}, embed_elem_bytes};
  }

  PayloadDesc text_stream_desc(int64_t tokens) const { return PayloadDesc{{tokens}, 4}; }

  PayloadDesc audio_token_stream_desc(int64_t chunks) const { return PayloadDesc{{chunks}, 4}; }

  PayloadDesc audio_stream_desc(int64_t chunks) const {
    return PayloadDesc{{chunks, audio_samples_per_chunk}, 2};
  }
};

// ---------------------------------------------------------------------------
// Profile file: profiles + descriptors + shape rules for one model family.

struct ProfileFile {
  std::string name;
  std::vector<std::string> models;  // model ids this file covers
  std::map<std::string, ComponentProfile> profiles;
  struct DescriptorEntry {
    int64_t weight_bytes = 0;
    std::set<int> allowed_tp;
    std::string profile;
  };
  std::map<std::string, DescriptorEntry> descriptors;
  ShapeRules shape_rules;

  static ProfileFile from_json(const json& j) {
    ProfileFile f;
    f.name = j.value("name", "");
    f.models = j.value("models", std::vector<std::string>{});
    if (!j.contains("profiles") || !j.at("profiles").is_object())
      fail(ErrorCode::Config, "profile file requires a 'profiles' object");
    for (const auto& [name, p] : j.at("profiles").items())
      f.profiles.emplace(name, ComponentProfile::from_json(name, p));
    json descriptors = j.value("descriptors", json::object());
    for (const auto& [name, d] : descriptors.items()) {
      DescriptorEntry e;
      e.weight_bytes = d.at("weight_bytes").get<int64_t>();
      e.allowed_tp = d.value("allowed_tp", std::set<int>{1});
      e.profile = d.value("profile", name);
      if (!f.profiles.count(e.profile))
        fail(ErrorCode::Config, "descriptor '" + name + "' references unknown profile '" + e.profile + "'");
      f.descriptors.emplace(name, e);
    }
    if (j.contains("shape_rules")) f.shape_rules = ShapeRules::from_json(j.at("shape_rules"));
    return f;
  }

  static ProfileFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Config, "cannot open profile file: " + path);
    json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      fail(ErrorCode::Config, "bad JSON in " + path + ": " + e.what());
    }
    auto f = from_json(j);
    if (f.name.empty()) f.name = path;
    return f;
  }
};

// Descriptor binding key preference for a unit task, most specific first.
inline std::vector<std::string> descriptor_keys(const UnitTaskSpec& unit) {
  std::vector<std::string> keys;
  std::string role = unit.role();
  if (!role.empty()) {
    if (!unit.model_id.empty()) keys.push_back(role + "@" + unit.model_id);
    keys.push_back(role);
  }
  switch (unit.task_class) {
    case TaskClass::Encoder:
      keys.push_back(std::string("encoder.") + to_string(*unit.modality));
      keys.push_back("encoder");
      break;
    case TaskClass::LLM:
      if (!unit.model_id.empty()) keys.push_back("llm@" + unit.model_id);
      keys.push_back("llm");
      break;
    case TaskClass::Generator:
      keys.push_back(std::string("generator.") + to_string(*unit.modality));
      keys.push_back("generator");
      break;
  }
  return keys;
}

// Loaded profile files, indexed by the model ids they cover.
class ProfileCatalog {
 public:
  void add(ProfileFile file) {
    auto f = std::make_shared<ProfileFile>(std::move(file));
    for (const auto& m : f->models) by_model_[m] = f;
    files_.push_back(f);
  }

  void load_file(const std::string& path) { add(ProfileFile::load(path)); }

  bool empty() const { return files_.empty(); }

  const ProfileFile& file_for_model(const std::string& model_id) const {
    auto it = by_model_.find(model_id);
    if (it != by_model_.end()) return *it->second;
    if (files_.size() == 1) return *files_[0];
    fail(ErrorCode::NotFound, "no profile file covers model '" + model_id + "'");
  }

  const ProfileFile& file_for_unit(const UnitTaskSpec& unit) const {
    std::string model = unit.model_id;
    if (model.empty() && !unit.encoder_ids.empty()) model = *unit.encoder_ids.begin();
    return file_for_model(model);
  }

  struct Resolved {
    TaskDescriptor descriptor;
    ComponentProfile profile;
    ShapeRules shapes;
    const ProfileFile* file = nullptr;
  };

  Resolved resolve(const UnitTaskSpec& unit) const {
    const ProfileFile& f = file_for_unit(unit);
    for (const auto& key : descriptor_keys(unit)) {
      auto it = f.descriptors.find(key);
      if (it == f.descriptors.end()) continue;
      Resolved r;
      r.descriptor.unit_task = unit;
      r.descriptor.weight_bytes = it->second.weight_bytes;
      r.descriptor.allowed_tp_degrees = it->second.allowed_tp;
      r.descriptor.profile_ref = it->second.profile;
      r.descriptor.validate();
      r.profile = f.profiles.at(it->second.profile);
      r.shapes = f.shape_rules;
      r.file = &f;
      return r;
    }
    fail(ErrorCode::NotFound, "no descriptor matches unit task (model '" + unit.model_id +
                                  "', class " + to_string(unit.task_class) + ")");
  }

  ShapeRules shapes_for_model(const std::string& model_id) const {
    return file_for_model(model_id).shape_rules;
  }

 private:
  std::map<std::string, std::shared_ptr<ProfileFile>> by_model_;
  std::vector<std::shared_ptr<ProfileFile>> files_;
};

}  // namespace fissim
