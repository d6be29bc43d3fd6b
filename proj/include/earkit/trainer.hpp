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

// Optimization loop: answer-masked loss, AdamW with decoupled weight decay,
// linear warm-up into cosine decay, optional global-norm clipping, decoder
// freezing (after an optional decoder-only warm start on text-only batches so
// the frozen decoder has a language prior), periodic checkpoints, and a CSV
// step log. Single-threaded and fully determined by (seed, records, config).

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "earkit/audio.hpp"
#include "earkit/common.hpp"
#include "earkit/datahub.hpp"
#include "earkit/instruct.hpp"
#include "earkit/model.hpp"
#include "earkit/rng.hpp"
#include "earkit/tensor.hpp"

namespace earkit::trainer {

struct TrainConfig {
  double peak_lr = 3e-4;
  double weight_decay = 0.01;
  int warmup_steps = 150;
  int total_steps = 3000;
  int batch_size = 8;
  uint64_t seed = 0;
  bool freeze_decoder = true;
  // Decoder-only steps on text-only batches at constant peak_lr before the
  // main phase; gives the randomly initialized decoder a language prior so
  // freezing it afterwards is meaningful.
  int decoder_warmstart_steps = 300;
  double clip_norm = 1.0;                  // <= 0 disables clipping
  int checkpoint_every = 0;                // 0: final checkpoint only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Records of a task type enter each epoch this many times (default 1);
  // 0 excludes the task. Integer repeats keep epoch accounting exact.
  std::map<std::string, int> task_repeat;

  void validate() const {
    if (peak_lr <= 0.0) throw Error(ErrorCode::kContract, "peak_lr must be positive");
    if (weight_decay < 0.0) throw Error(ErrorCode::kContract, "weight_decay must be >= 0");
    if (warmup_steps <= 0) throw Error(ErrorCode::kContract, "warmup_steps must be positive");
    if (total_steps <= warmup_steps)
      throw Error(ErrorCode::kContract, "total_steps must exceed warmup_steps");
    if (batch_size <= 0) throw Error(ErrorCode::kContract, "batch_size must be positive");
    if (decoder_warmstart_steps < 0)
      throw Error(ErrorCode::kContract, "decoder_warmstart_steps must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw Error(ErrorCode::kContract, "betas must lie in [0, 1)");
    if (adam_eps <= 0.0) throw Error(ErrorCode::kContract, "adam_eps must be positive");
    for (const auto& [task, repeat] : task_repeat)
      if (repeat < 0)
        throw Error(ErrorCode::kContract, "task_repeat[" + task + "] must be >= 0");
  }
};

/// Linear ramp 0 -> peak over warmup_steps, then cosine peak -> 0 over the
/// remaining steps. Defined on 0..total_steps inclusive.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw Error(ErrorCode::kContract, "lr_at step " + std::to_string(step) +
                                          " outside 0.." + std::to_string(cfg.total_steps));
  if (step < cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
  double progress = static_cast<double>(step - cfg.warmup_steps) /
                    static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct OptimizerState {
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::map<std::string, Moments> slots;
  int64_t step = 0;

  /// Allocates moment slots for exactly the trainable parameters; slots for
  /// parameters that are no longer trainable are dropped.
  void ensure(const grad::ParamSet& params) {
    std::map<std::string, Moments> live;
    params.for_each([&](const std::string& path, const grad::TensorPtr& t, bool trainable) {
      if (!trainable) return;
      auto it = slots.find(path);
      if (it != slots.end()) {
        if (it->second.m.size() != t->v.size())
          throw Error(ErrorCode::kShapeMismatch, "optimizer slot size changed: " + path);
        live[path] = std::move(it->second);
      } else {
        live[path] = {std::vector<double>(t->v.size(), 0.0),
                      std::vector<double>(t->v.size(), 0.0)};
      }
    });
    slots = std::move(live);
  }
};

namespace detail {

inline double trainable_grad_norm(const grad::ParamSet& params) {
  double acc = 0.0;
  params.for_each([&](const std::string&, const grad::TensorPtr& t, bool trainable) {
    if (!trainable) return;
    for (double g : t->g) acc += g * g;
  });
  return std::sqrt(acc);
}

/// One AdamW update over the trainable parameters. grad_scale folds in
/// gradient clipping; weight decay is decoupled, so a zero-gradient batch
/// still shrinks parameters by lr * weight_decay * p.
inline void apply_adamw(grad::ParamSet* params, OptimizerState* state, double lr,
                        const TrainConfig& cfg, double grad_scale) {
  state->step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state->step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state->step));
  params->for_each([&](const std::string& path, const grad::TensorPtr& t, bool trainable) {
    if (!trainable) return;
    auto& slot = state->slots.at(path);
    for (size_t i = 0; i < t->v.size(); ++i) {
      double g = t->g[i] * grad_scale;
      slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
      slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
      double mhat = slot.m[i] / bc1;
      double vhat = slot.v[i] / bc2;
      t->v[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * t->v[i]);
    }
  });
}

/// Endless deterministic pass over an epoch list, reshuffling at each epoch
/// boundary with the shared run RNG.
class RecordSampler {
 public:
  RecordSampler(std::vector<size_t> epoch, Rng* rng)
      : epoch_(std::move(epoch)), pos_(epoch_.size()), rng_(rng) {
    if (epoch_.empty())
      throw Error(ErrorCode::kEmptyInput, "no records to sample after task weighting");
  }

  size_t next() {
    if (pos_ == epoch_.size()) {
      rng_->shuffle(epoch_);
      pos_ = 0;
    }
    return epoch_[pos_++];
  }

 private:
  std::vector<size_t> epoch_;
  size_t pos_;
  Rng* rng_;
};

}  // namespace detail

struct StepResult {
  double loss_sum = 0.0;
  int answer_tokens = 0;
  double grad_norm = 0.0;
};

/// Forward, backward, clip, AdamW. feats == nullptr trains on text only.
/// Non-finite loss or gradient norm raises a divergence error naming the
/// step about to be applied.
inline StepResult train_step(model::Model* m,
                             const std::vector<audio::FeatureTensor>* feats,
                             const instruct::TokenBatch& batch, OptimizerState* state,
                             double lr, const TrainConfig& cfg) {
  auto& params = m->params();
  params.zero_grad();
  grad::Tape tape;
  auto loss = m->forward_loss(feats, batch, &tape);
  double loss_value = loss.loss_sum->v[0];
  std::string at = "step " + std::to_string(state->step + 1);
  if (!std::isfinite(loss_value))
    throw Error(ErrorCode::kDivergence, at + ": non-finite loss");
  grad::backward(tape, loss.loss_sum);
  double norm = detail::trainable_grad_norm(params);
  if (!std::isfinite(norm))
    throw Error(ErrorCode::kDivergence, at + ": non-finite gradient norm");
  double scale = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
  detail::apply_adamw(&params, state, lr, cfg, scale);
  return {loss_value, loss.answer_tokens, norm};
}

struct TrainInputs {
  const std::vector<datahub::ManifestRecord>* records = nullptr;
  std::string audio_root;
  audio::FrontendConfig frontend;
  // Provenance block embedded in every checkpoint this run writes.
  std::string config_json = "{}";
  uint64_t config_hash = 0;
};

struct TrainPaths {
  std::string checkpoint;       // final checkpoint ("" skips)
  std::string log_csv;          // per-step CSV log ("" skips)
  std::string checkpoint_dir;   // periodic checkpoints ("" skips)
};

struct TrainSummary {
  int64_t steps = 0;
  int64_t warmstart_steps = 0;
  double final_loss_per_token = 0.0;
  // Answer tokens in one weighted epoch, and the number actually consumed by
  // main-phase updates; equal when the step budget covers whole epochs.
  int64_t epoch_answer_tokens = 0;
  int64_t consumed_answer_tokens = 0;
  uint64_t decoder_hash_after_warmstart = 0;
  uint64_t decoder_hash_final = 0;
};

namespace detail {

struct PreparedRecord {
  size_t feature;               // index into the feature cache
  instruct::RawTask task;
};

struct PreparedData {
  std::vector<audio::FeatureTensor> features;
  std::vector<PreparedRecord> records;
};

inline PreparedData prepare(const TrainInputs& in) {
  PreparedData data;
  std::map<std::string, size_t> cache;
  for (const auto& rec : *in.records) {
    std::string path = datahub::resolve_clip(in.audio_root, rec.clip);
    auto it = cache.find(path);
    if (it == cache.end()) {
      audio::Waveform wave = audio::wav_read(path);
      if (wave.sample_rate != in.frontend.sample_rate)
        wave = audio::resample(wave, in.frontend.sample_rate);
      data.features.push_back(audio::log_mel(wave, in.frontend));
      it = cache.emplace(path, data.features.size() - 1).first;
    }
    data.records.push_back({it->second, rec.task});
  }
  return data;
}

struct RenderedBatch {
  std::vector<audio::FeatureTensor> feats;
  instruct::TokenBatch tokens;
};

inline RenderedBatch render_batch(const PreparedData& data,
                                  const std::vector<size_t>& picks,
                                  const instruct::Tokenizer& vocab, Rng* rng,
                                  bool with_audio) {
  RenderedBatch out;
  std::vector<instruct::TokenSequence> seqs;
  for (size_t idx : picks) {
    const auto& rec = data.records[idx];
    auto rendered = instruct::render_template(rec.task, rng->next_u64());
    seqs.push_back(instruct::tokenize(rendered, vocab));
    if (with_audio) out.feats.push_back(data.features[rec.feature]);
  }
  out.tokens = instruct::collate(seqs);
  return out;
}

}  // namespace detail

/// Mean per-token answer loss of the model over a record set, without
/// gradient bookkeeping. Template paraphrases are drawn from `seed`.
inline double eval_loss(model::Model* m, const TrainInputs& in, int batch_size,
                        uint64_t seed) {
  if (in.records->empty()) throw Error(ErrorCode::kEmptyInput, "no records to evaluate");
  auto data = detail::prepare(in);
  instruct::Tokenizer vocab;
  Rng rng(seed);
  double loss_sum = 0.0;
  int64_t tokens = 0;
  for (size_t begin = 0; begin < data.records.size(); begin += batch_size) {
    std::vector<size_t> picks;
    for (size_t i = begin; i < std::min(begin + batch_size, data.records.size()); ++i)
      picks.push_back(i);
    auto batch = detail::render_batch(data, picks, vocab, &rng, true);
    auto loss = m->forward_loss(&batch.feats, batch.tokens, nullptr);
    loss_sum += loss.loss_sum->v[0];
    tokens += loss.answer_tokens;
  }
  return loss_sum / static_cast<double>(std::max<int64_t>(1, tokens));
}

inline TrainSummary run_training(model::Model* m, const TrainInputs& in,
                                 const TrainConfig& cfg, const TrainPaths& paths) {
  cfg.validate();
  if (in.records == nullptr || in.records->empty())
    throw Error(ErrorCode::kEmptyInput, "training manifest is empty");

  auto data = detail::prepare(in);
  instruct::Tokenizer vocab;
  Rng rng(cfg.seed);
  TrainSummary summary;

  std::vector<size_t> epoch;
  for (size_t i = 0; i < data.records.size(); ++i) {
    auto it = cfg.task_repeat.find(data.records[i].task.task_type);
    int repeat = it == cfg.task_repeat.end() ? 1 : it->second;
    for (int r = 0; r < repeat; ++r) epoch.push_back(i);
    // Paraphrase choice never changes the answer, so seed 0 gives the exact
    // normalized answer byte count; +1 is the end-of-answer token.
    int answer_len = static_cast<int>(
        instruct::render_template(data.records[i].task, 0).answer_text.size()) + 1;
    summary.epoch_answer_tokens += static_cast<int64_t>(repeat) * answer_len;
  }

  std::ofstream log;
  if (!paths.log_csv.empty()) {
    log.open(paths.log_csv, std::ios::binary | std::ios::trunc);
    if (!log) throw Error(ErrorCode::kIo, "cannot write training log " + paths.log_csv);
    log << "step,lr,loss_sum,answer_tokens,wallclock_ms\n";
  }
  auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&]() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - t0)
        .count();
  };

  auto& params = m->params();
  if (cfg.decoder_warmstart_steps > 0) {
    params.set_trainable("encoder/", false);
    params.set_trainable("adapter/", false);
    params.set_trainable("decoder/", true);
    OptimizerState warm;
    warm.ensure(params);
    detail::RecordSampler sampler(epoch, &rng);
    for (int step = 1; step <= cfg.decoder_warmstart_steps; ++step) {
      std::vector<size_t> picks;
      for (int b = 0; b < cfg.batch_size; ++b) picks.push_back(sampler.next());
      auto batch = detail::render_batch(data, picks, vocab, &rng, false);
      train_step(m, nullptr, batch.tokens, &warm, cfg.peak_lr, cfg);
    }
    params.set_trainable("encoder/", true);
    params.set_trainable("adapter/", true);
    summary.warmstart_steps = cfg.decoder_warmstart_steps;
  }
  m->freeze_decoder(cfg.freeze_decoder);
  summary.decoder_hash_after_warmstart = m->decoder_hash();

  OptimizerState state;
  state.ensure(params);
  detail::RecordSampler sampler(epoch, &rng);
  double last_loss = 0.0;
  int last_tokens = 1;
  for (int step = 1; step <= cfg.total_steps; ++step) {
    std::vector<size_t> picks;
    for (int b = 0; b < cfg.batch_size; ++b) picks.push_back(sampler.next());
    auto batch = detail::render_batch(data, picks, vocab, &rng, true);
    double lr = lr_at(step, cfg);
    auto result = train_step(m, &batch.feats, batch.tokens, &state, lr, cfg);
    summary.consumed_answer_tokens += result.answer_tokens;
    last_loss = result.loss_sum;
    last_tokens = std::max(1, result.answer_tokens);
    if (log)
      log << step << "," << lr << "," << result.loss_sum << "," << result.answer_tokens
          << "," << elapsed_ms() << "\n";
    if (cfg.checkpoint_every > 0 && !paths.checkpoint_dir.empty() &&
        step % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "step-%06d.ckpt", step);
      auto file = std::filesystem::path(paths.checkpoint_dir) / name;
      std::filesystem::create_directories(paths.checkpoint_dir);
      model::save_checkpoint(file.string(), params, in.config_json, in.config_hash);
    }
  }
  summary.steps = cfg.total_steps;
  summary.final_loss_per_token = last_loss / last_tokens;
  summary.decoder_hash_final = m->decoder_hash();
  if (!paths.checkpoint.empty())
    model::save_checkpoint(paths.checkpoint, params, in.config_json, in.config_hash);
  return summary;
}

}  // namespace earkit::trainer
