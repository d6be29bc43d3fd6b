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

// Bridge from a model plus manifest records to a scoreable task suite:
// extracts clip embeddings, decodes transcription hypotheses, and binds both
// to task specifications whose weights are the eval-example counts. The CLI
// and the end-to-end checks share this path so they measure the same thing.

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "earkit/audio.hpp"
#include "earkit/common.hpp"
#include "earkit/datahub.hpp"
#include "earkit/evalkit.hpp"
#include "earkit/instruct.hpp"
#include "earkit/model.hpp"

namespace earkit::suite {

// ---------------------------------------------------------------- task shape

/// How each synthetic kind is scored. The transcription task is judged on
/// decoded text; the speaker task rides the retrieval metric, which confines
/// it to the nearest-neighbor protocol; the rest are clip classification.
inline metrics::Kind metric_for(const std::string& kind) {
  if (kind == "tone-tag") return metrics::Kind::kAcc;
  if (kind == "pitch-speaker-id") return metrics::Kind::kRecallAt1;
  if (kind == "scene-noise-class") return metrics::Kind::kAcc;
  if (kind == "tone-seq-transcribe") return metrics::Kind::kWER;
  throw Error(ErrorCode::kUnknownTask, "no metric for kind " + kind);
}

/// Full class-name table per kind. Records index into these by name, so the
/// label space is stable regardless of which classes a split happens to hold.
inline const std::vector<std::string>& classes_for(const std::string& kind) {
  if (kind == "tone-tag") return datahub::detail::tag_class_names();
  if (kind == "pitch-speaker-id") return datahub::detail::speaker_names();
  if (kind == "scene-noise-class") return datahub::detail::scene_class_names();
  throw Error(ErrorCode::kUnknownTask, "no class table for kind " + kind);
}

inline int label_index(const std::string& kind, const datahub::ManifestRecord& rec) {
  if (rec.task.labels.empty())
    throw Error(ErrorCode::kContract, "record " + rec.id + " carries no label");
  const auto& names = classes_for(kind);
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == rec.task.labels[0]) return static_cast<int>(i);
  throw Error(ErrorCode::kContract,
              "label " + rec.task.labels[0] + " not in the " + kind + " class table");
}

// ---------------------------------------------------------------- extraction

namespace detail {

inline audio::FeatureTensor features_for(const datahub::ManifestRecord& rec,
                                         const std::string& audio_root,
                                         const audio::FrontendConfig& frontend) {
  auto wave = audio::wav_read(datahub::resolve_clip(audio_root, rec.clip));
  if (wave.sample_rate != frontend.sample_rate)
    wave = audio::resample(wave, frontend.sample_rate);
  return audio::log_mel(wave, frontend);
}

}  // namespace detail

/// Clip embeddings for every record, keeping manifest split tags. label_space
/// spans the kind's full class table.
inline evalkit::EmbeddingSet extract_clip_embeddings(
    const model::Model& net, const std::vector<datahub::ManifestRecord>& records,
    const std::string& audio_root, const audio::FrontendConfig& frontend,
    const std::string& kind, uint64_t config_hash) {
  evalkit::EmbeddingSet set;
  set.granularity = evalkit::Granularity::kClip;
  set.label_space = static_cast<int32_t>(classes_for(kind).size());
  set.config_hash = config_hash;
  for (const auto& rec : records) {
    auto emb = net.clip_embedding(detail::features_for(rec, audio_root, frontend));
    if (set.dim == 0) set.dim = static_cast<int32_t>(emb.size());
    evalkit::EmbeddingRecord r;
    r.id = rec.id;
    r.split = rec.task.split;
    r.labels = {label_index(kind, rec)};
    r.frames = 1;
    r.data.assign(emb.begin(), emb.end());
    set.records.push_back(std::move(r));
  }
  return set;
}

/// Greedy transcription of each record against its template-normalized
/// reference, as (hypothesis, reference) pairs.
inline std::vector<std::pair<std::string, std::string>> decode_pairs(
    const model::Model& net, const std::vector<datahub::ManifestRecord>& records,
    const std::string& audio_root, const audio::FrontendConfig& frontend,
    const instruct::Tokenizer& vocab, uint64_t template_seed, int max_new) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& rec : records) {
    auto rendered = instruct::render_template(rec.task, template_seed);
    auto seq = instruct::tokenize(rendered, vocab);
    std::vector<int> prompt(seq.token_ids.begin(), seq.token_ids.begin() + seq.prompt_len);
    auto feat = detail::features_for(rec, audio_root, frontend);
    std::string hyp = vocab.decode(net.greedy_decode(feat, prompt, max_new));
    pairs.emplace_back(std::move(hyp), rendered.answer_text);
  }
  return pairs;
}

// ---------------------------------------------------------------- assembly

/// Owns the evidence run_protocol points into. One bundle per task kind.
struct TaskBundle {
  evalkit::TaskSpec spec;
  evalkit::EmbeddingSet embeddings;                         // classification kinds
  std::vector<std::pair<std::string, std::string>> pairs;   // transcription kind
};

struct SuiteBundle {
  std::vector<TaskBundle> tasks;

  /// Entries pointing into this bundle; keep the bundle alive while scoring.
  std::vector<evalkit::TaskEntry> entries() const {
    std::vector<evalkit::TaskEntry> out;
    for (const auto& t : tasks) {
      evalkit::TaskEntry e;
      e.spec = t.spec;
      if (t.spec.metric == metrics::Kind::kWER)
        e.wer_pairs = &t.pairs;
      else
        e.embeddings = &t.embeddings;
      out.push_back(e);
    }
    return out;
  }
};

/// Groups records by kind (source_dataset), extracts the evidence each task
/// needs, and weights every task by its eval-example count. Records must
/// already carry train/eval split tags.
inline SuiteBundle build_suite(const model::Model& net,
                               const std::vector<datahub::ManifestRecord>& records,
                               const std::string& audio_root,
                               const audio::FrontendConfig& frontend,
                               const instruct::Tokenizer& vocab, uint64_t template_seed,
                               int decode_max_new, uint64_t config_hash) {
  if (records.empty()) throw Error(ErrorCode::kEmptyInput, "no records to evaluate");
  std::map<std::string, std::vector<datahub::ManifestRecord>> by_kind;
  for (const auto& rec : records) by_kind[rec.task.source_dataset].push_back(rec);

  SuiteBundle bundle;
  for (auto& [kind, recs] : by_kind) {
    TaskBundle task;
    task.spec.name = kind;
    task.spec.granularity = evalkit::Granularity::kClip;
    task.spec.metric = metric_for(kind);
    double evals = 0.0;
    for (const auto& r : recs) evals += r.task.split == "eval" ? 1.0 : 0.0;
    task.spec.weight = evals;
    if (task.spec.metric == metrics::Kind::kWER) {
      std::vector<datahub::ManifestRecord> eval_recs;
      for (const auto& r : recs)
        if (r.task.split == "eval") eval_recs.push_back(r);
      task.pairs = decode_pairs(net, eval_recs, audio_root, frontend, vocab,
                                template_seed, decode_max_new);
    } else {
      task.spec.classes = classes_for(kind);
      task.embeddings = extract_clip_embeddings(net, recs, audio_root, frontend, kind,
                                                config_hash);
    }
    bundle.tasks.push_back(std::move(task));
  }
  return bundle;
}

}  // namespace earkit::suite
