/* Copyright 2026 The Earkit Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// One configuration document for a whole run: frontend, model, trainer, and
// evaluation settings plus the master seed and paths. The canonical JSON dump
// (sorted keys, compact) is hashed and embedded in output artifacts, so two
// outputs with equal hashes came from identical configurations.
//
// Serializers live in each struct's own namespace so argument-dependent
// lookup finds them; unknown keys are rejected, absent keys keep defaults.

#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "earkit/audio.hpp"
#include "earkit/common.hpp"
#include "earkit/evalkit.hpp"
#include "earkit/model.hpp"
#include "earkit/trainer.hpp"

namespace earkit::config::detail {

using nlohmann::json;

/// Unknown keys are typos until proven otherwise.
inline void check_keys(const json& j, std::initializer_list<const char*> known,
                       const std::string& section) {
  if (!j.is_object())
    throw Error(ErrorCode::kContract, "config section is not an object: " + section);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok)
      throw Error(ErrorCode::kContract, "unknown config key: " + section + "." + it.key());
  }
}

template <typename T>
void get_if(const json& j, const char* key, T* out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(*out);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kContract,
                std::string("bad config value for ") + key + ": " + e.what());
  }
}

}  // namespace earkit::config::detail

// ------------------------------------------------------- section serializers

namespace earkit::audio {

inline void to_json(nlohmann::json& j, const FrontendConfig& c) {
  j = {{"sample_rate", c.sample_rate}, {"frame_length", c.frame_length},
       {"hop", c.hop},                 {"n_fft", c.n_fft},
       {"n_mels", c.n_mels},           {"fmin_hz", c.fmin_hz},
       {"fmax_hz", c.fmax_hz},         {"log_floor", c.log_floor},
       {"mean_normalize", c.mean_normalize}};
}

inline void from_json(const nlohmann::json& j, FrontendConfig& c) {
  namespace cd = earkit::config::detail;
  cd::check_keys(j,
                 {"sample_rate", "frame_length", "hop", "n_fft", "n_mels", "fmin_hz",
                  "fmax_hz", "log_floor", "mean_normalize"},
                 "frontend");
  cd::get_if(j, "sample_rate", &c.sample_rate);
  cd::get_if(j, "frame_length", &c.frame_length);
  cd::get_if(j, "hop", &c.hop);
  cd::get_if(j, "n_fft", &c.n_fft);
  cd::get_if(j, "n_mels", &c.n_mels);
  cd::get_if(j, "fmin_hz", &c.fmin_hz);
  cd::get_if(j, "fmax_hz", &c.fmax_hz);
  cd::get_if(j, "log_floor", &c.log_floor);
  cd::get_if(j, "mean_normalize", &c.mean_normalize);
}

}  // namespace earkit::audio

namespace earkit::model {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_mels", c.n_mels},
       {"d_w", c.d_w},
       {"d_q", c.d_q},
       {"enc_layers", c.enc_layers},
       {"enc_heads", c.enc_heads},
       {"dec_layers", c.dec_layers},
       {"dec_heads", c.dec_heads},
       {"ffn_mult", c.ffn_mult},
       {"adapter_hidden", c.adapter_hidden},
       {"vocab_size", c.vocab_size},
       {"max_audio_frames", c.max_audio_frames},
       {"max_text_len", c.max_text_len}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  namespace cd = earkit::config::detail;
  cd::check_keys(j,
                 {"n_mels", "d_w", "d_q", "enc_layers", "enc_heads", "dec_layers",
                  "dec_heads", "ffn_mult", "adapter_hidden", "vocab_size",
                  "max_audio_frames", "max_text_len"},
                 "model");
  cd::get_if(j, "n_mels", &c.n_mels);
  cd::get_if(j, "d_w", &c.d_w);
  cd::get_if(j, "d_q", &c.d_q);
  cd::get_if(j, "enc_layers", &c.enc_layers);
  cd::get_if(j, "enc_heads", &c.enc_heads);
  cd::get_if(j, "dec_layers", &c.dec_layers);
  cd::get_if(j, "dec_heads", &c.dec_heads);
  cd::get_if(j, "ffn_mult", &c.ffn_mult);
  cd::get_if(j, "adapter_hidden", &c.adapter_hidden);
  cd::get_if(j, "vocab_size", &c.vocab_size);
  cd::get_if(j, "max_audio_frames", &c.max_audio_frames);
  cd::get_if(j, "max_text_len", &c.max_text_len);
}

}  // namespace earkit::model

namespace earkit::trainer {

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"peak_lr", c.peak_lr},
       {"weight_decay", c.weight_decay},
       {"warmup_steps", c.warmup_steps},
       {"total_steps", c.total_steps},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"freeze_decoder", c.freeze_decoder},
       {"decoder_warmstart_steps", c.decoder_warmstart_steps},
       {"clip_norm", c.clip_norm},
       {"checkpoint_every", c.checkpoint_every},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"task_repeat", c.task_repeat}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  namespace cd = earkit::config::detail;
  cd::check_keys(j,
                 {"peak_lr", "weight_decay", "warmup_steps", "total_steps", "batch_size",
                  "seed", "freeze_decoder", "decoder_warmstart_steps", "clip_norm",
                  "checkpoint_every", "beta1", "beta2", "adam_eps", "task_repeat"},
                 "train");
  cd::get_if(j, "peak_lr", &c.peak_lr);
  cd::get_if(j, "weight_decay", &c.weight_decay);
  cd::get_if(j, "warmup_steps", &c.warmup_steps);
  cd::get_if(j, "total_steps", &c.total_steps);
  cd::get_if(j, "batch_size", &c.batch_size);
  cd::get_if(j, "seed", &c.seed);
  cd::get_if(j, "freeze_decoder", &c.freeze_decoder);
  cd::get_if(j, "decoder_warmstart_steps", &c.decoder_warmstart_steps);
  cd::get_if(j, "clip_norm", &c.clip_norm);
  cd::get_if(j, "checkpoint_every", &c.checkpoint_every);
  cd::get_if(j, "beta1", &c.beta1);
  cd::get_if(j, "beta2", &c.beta2);
  cd::get_if(j, "adam_eps", &c.adam_eps);
  cd::get_if(j, "task_repeat", &c.task_repeat);
}

}  // namespace earkit::trainer

// -------------------------------------------------------------- run document

namespace earkit::config {

struct EvalConfig {
  std::vector<uint64_t> seeds = {1, 2, 3};
  int knn_k = 5;
  int frames_per_segment = 25;  // encoder frames per one-second segment
  int64_t bootstrap_B = 0;
  double bootstrap_level = 0.95;
  int probe_hidden = 512;
  int probe_max_epochs = 120;
  int probe_patience = 8;
  int probe_batch_size = 32;
  double probe_lr = 1e-3;
  double probe_val_fraction = 0.1;
  int decode_max_new = 24;  // token budget for greedy transcription
};

struct PathsConfig {
  std::string manifest;         // training or evaluation manifest
  std::string out_dir = "run";  // relative paths resolve under the output root
};

struct RunConfig {
  uint64_t seed = 0;  // model initialization seed
  audio::FrontendConfig frontend;
  model::ModelConfig model;
  trainer::TrainConfig train;
  EvalConfig eval;
  PathsConfig paths;
};

inline void to_json(detail::json& j, const EvalConfig& c) {
  j = {{"seeds", c.seeds},
       {"knn_k", c.knn_k},
       {"frames_per_segment", c.frames_per_segment},
       {"bootstrap_B", c.bootstrap_B},
       {"bootstrap_level", c.bootstrap_level},
       {"probe_hidden", c.probe_hidden},
       {"probe_max_epochs", c.probe_max_epochs},
       {"probe_patience", c.probe_patience},
       {"probe_batch_size", c.probe_batch_size},
       {"probe_lr", c.probe_lr},
       {"probe_val_fraction", c.probe_val_fraction},
       {"decode_max_new", c.decode_max_new}};
}

inline void from_json(const detail::json& j, EvalConfig& c) {
  detail::check_keys(j,
                     {"seeds", "knn_k", "frames_per_segment", "bootstrap_B",
                      "bootstrap_level", "probe_hidden", "probe_max_epochs",
                      "probe_patience", "probe_batch_size", "probe_lr",
                      "probe_val_fraction", "decode_max_new"},
                     "eval");
  detail::get_if(j, "seeds", &c.seeds);
  detail::get_if(j, "knn_k", &c.knn_k);
  detail::get_if(j, "frames_per_segment", &c.frames_per_segment);
  detail::get_if(j, "bootstrap_B", &c.bootstrap_B);
  detail::get_if(j, "bootstrap_level", &c.bootstrap_level);
  detail::get_if(j, "probe_hidden", &c.probe_hidden);
  detail::get_if(j, "probe_max_epochs", &c.probe_max_epochs);
  detail::get_if(j, "probe_patience", &c.probe_patience);
  detail::get_if(j, "probe_batch_size", &c.probe_batch_size);
  detail::get_if(j, "probe_lr", &c.probe_lr);
  detail::get_if(j, "probe_val_fraction", &c.probe_val_fraction);
  detail::get_if(j, "decode_max_new", &c.decode_max_new);
}

inline void to_json(detail::json& j, const PathsConfig& c) {
  j = {{"manifest", c.manifest}, {"out_dir", c.out_dir}};
}

inline void from_json(const detail::json& j, PathsConfig& c) {
  detail::check_keys(j, {"manifest", "out_dir"}, "paths");
  detail::get_if(j, "manifest", &c.manifest);
  detail::get_if(j, "out_dir", &c.out_dir);
}

inline void to_json(detail::json& j, const RunConfig& c) {
  j = {{"seed", c.seed},   {"frontend", c.frontend}, {"model", c.model},
       {"train", c.train}, {"eval", c.eval},         {"paths", c.paths}};
}

inline void from_json(const detail::json& j, RunConfig& c) {
  detail::check_keys(j, {"seed", "frontend", "model", "train", "eval", "paths"}, "run");
  detail::get_if(j, "seed", &c.seed);
  detail::get_if(j, "frontend", &c.frontend);
  detail::get_if(j, "model", &c.model);
  detail::get_if(j, "train", &c.train);
  detail::get_if(j, "eval", &c.eval);
  detail::get_if(j, "paths", &c.paths);
}

// ---------------------------------------------------------------- canonical

/// Compact dump with lexicographically sorted keys: the provenance string.
inline std::string canonical_json(const RunConfig& cfg) {
  return detail::json(cfg).dump();
}

inline uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(canonical_json(cfg)); }

// ---------------------------------------------------------------- loading

inline RunConfig parse_config(const std::string& text) {
  detail::json j;
  try {
    j = detail::json::parse(text);
  } catch (const detail::json::exception& e) {
    throw Error(ErrorCode::kContract, std::string("config does not parse: ") + e.what());
  }
  return j.get<RunConfig>();
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kIo, "cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

/// Applies one `section.key=value` override on top of a config. The value is
/// parsed as JSON when it is one (numbers, booleans, arrays), otherwise it is
/// taken as a string. Only keys the document already has can be overridden.
inline void apply_override(RunConfig* cfg, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(ErrorCode::kContract, "override must look like key=value: " + assignment);
  std::string key = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);
  std::string pointer = "/" + key;
  for (auto& ch : pointer)
    if (ch == '.') ch = '/';

  detail::json j(*cfg);
  detail::json parsed;
  try {
    parsed = detail::json::parse(value);
  } catch (const detail::json::exception&) {
    parsed = value;
  }
  try {
    detail::json::json_pointer ptr(pointer);
    if (!j.contains(ptr)) throw Error(ErrorCode::kContract, "unknown config key: " + key);
    j[ptr] = parsed;
  } catch (const detail::json::exception& e) {
    throw Error(ErrorCode::kContract, "bad override " + assignment + ": " + e.what());
  }
  *cfg = j.get<RunConfig>();
}

// ---------------------------------------------------------------- bridging

/// Evaluation settings in the shape run_protocol consumes. The config hash
/// rides along so reports carry provenance.
inline evalkit::ProtocolConfig protocol_config(const RunConfig& cfg,
                                               evalkit::Protocol protocol) {
  evalkit::ProtocolConfig pc;
  pc.protocol = protocol;
  pc.seeds = cfg.eval.seeds;
  pc.knn_k = cfg.eval.knn_k;
  pc.frames_per_segment = cfg.eval.frames_per_segment;
  pc.bootstrap_B = cfg.eval.bootstrap_B;
  pc.bootstrap_level = cfg.eval.bootstrap_level;
  pc.probe.hidden = cfg.eval.probe_hidden;
  pc.probe.max_epochs = cfg.eval.probe_max_epochs;
  pc.probe.patience = cfg.eval.probe_patience;
  pc.probe.batch_size = cfg.eval.probe_batch_size;
  pc.probe.lr = cfg.eval.probe_lr;
  pc.probe.val_fraction = cfg.eval.probe_val_fraction;
  pc.config_hash = config_hash(cfg);
  return pc;
}

}  // namespace earkit::config
