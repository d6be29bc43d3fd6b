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

// Unified instruction-and-answer formatting. Every task becomes a control-tag
// prefix plus one natural-language instruction sentence (the prompt) and a
// text answer closed by an end-of-answer token. Tokenization is byte-level
// with dedicated single tokens for the control tags, so no external
// vocabulary is needed and round-trips are lossless.

#pragma once

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "earkit/common.hpp"

namespace earkit::instruct {

inline const std::set<std::string>& supported_tasks() {
  static const std::set<std::string> kTasks{"transcribe", "translate", "caption",
                                            "tag",        "qa",        "match"};
  return kTasks;
}

struct InstructionRecord {
  std::string task_type;
  std::map<std::string, std::string> control_tags;  // audio_language, text_language, ...
  std::string instruction_text;
  std::string answer_text;
  std::string source_dataset;
  std::string clip_ref;
  std::string split;  // "train" or "eval"
};

struct TokenSequence {
  std::vector<int> token_ids;  // prompt then answer
  int prompt_len = 0;
  int answer_len = 0;
  int vocab_size = 0;
};

struct TokenBatch {
  int batch = 0;
  int width = 0;
  std::vector<int> ids;            // [batch x width], PAD on the right
  std::vector<int> prompt_len;     // per row
  std::vector<int> answer_len;     // per row
  std::vector<bool> loss_mask;     // true exactly on answer positions
  std::vector<bool> pad_mask;      // true on real (non-pad) positions
  std::vector<int> audio_prefix;   // per-row audio prefix length bookkeeping
};

inline std::string normalize_whitespace(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool in_space = true;  // leading whitespace is dropped
  for (char c : text) {
    bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r';
    if (ws) {
      if (!in_space) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(c);
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary: 0=PAD, 1=BOS, 2=EOA, control tags, then all 256 byte values.

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEoa = 2;

  Tokenizer() {
    static const char* kTags[] = {
        "<task=transcribe>", "<task=translate>", "<task=caption>", "<task=tag>",
        "<task=qa>",         "<task=match>",     "<al=en>",        "<al=xx>",
        "<tl=en>",           "<tl=xx>",          "<ts>",           "<oc=short>"};
    int next = 3;
    for (const char* t : kTags) tag_ids_[t] = next++;
    byte_base_ = next;
  }

  int vocab_size() const { return byte_base_ + 256; }
  int byte_base() const { return byte_base_; }

  int tag_id(const std::string& tag) const {
    auto it = tag_ids_.find(tag);
    if (it == tag_ids_.end())
      throw Error(ErrorCode::kUnknownTask, "unknown control tag " + tag);
    return it->second;
  }
  bool has_tag(const std::string& tag) const { return tag_ids_.count(tag) > 0; }

  std::vector<int> encode_text(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(byte_base_ + c);
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id >= byte_base_ && id < byte_base_ + 256) {
        out.push_back(static_cast<char>(id - byte_base_));
      } else if (id == kPad || id == kBos || id == kEoa) {
        // Structural tokens carry no text.
      } else {
        for (const auto& [tag, tid] : tag_ids_) {
          if (tid == id) {
            out += tag;
            break;
          }
        }
      }
    }
    return out;
  }

 private:
  std::map<std::string, int> tag_ids_;
  int byte_base_ = 0;
};

// ---------------------------------------------------------------------------
// Instruction templates. The fixture is an inline versioned resource; every
// task has several paraphrases and the pair (task_type, template_seed) picks
// one deterministically. "{question}" is substituted from the raw fields.

inline constexpr const char* kTemplateFixtureVersion = "templates-v1";

inline const std::map<std::string, std::vector<std::string>>& template_fixture() {
  static const std::map<std::string, std::vector<std::string>> kTemplates{
      {"transcribe",
       {"Write down the exact words or symbols spoken in the audio.",
        "Transcribe this recording.",
        "Listen and produce a verbatim transcript."}},
      {"translate",
       {"Translate the speech in this clip into the target language.",
        "Give a translation of what is said."}},
      {"caption",
       {"Describe the acoustic scene in this clip.",
        "What kind of sound environment is this?",
        "Provide a short caption for the audio scene."}},
      {"tag",
       {"List the sound events present in the clip.",
        "Which sound classes occur in this audio?",
        "Name every audio event you hear, separated by commas."}},
      {"qa",
       {"Answer the question about the audio: {question}",
        "Based on the clip, {question}",
        "Listen to the recording and answer: {question}"}},
      {"match",
       {"Does the following text match the audio? Answer yes or no.",
        "Say yes if the text describes this clip, otherwise say no."}},
  };
  return kTemplates;
}

struct RawTask {
  std::string task_type;
  std::string audio_language = "en";
  std::string text_language = "en";
  bool timestamps = false;
  std::string output_constraint;     // "" or "short"
  std::vector<std::string> labels;   // tag task: joined into the answer
  std::string answer_text;           // non-tag tasks: answer as written
  std::string question;              // qa task only
  std::string source_dataset;
  std::string clip_ref;
  std::string split = "train";
};

inline InstructionRecord render_template(const RawTask& raw, uint64_t template_seed) {
  if (!supported_tasks().count(raw.task_type))
    throw Error(ErrorCode::kUnknownTask, "unsupported task type " + raw.task_type);
  const auto& paraphrases = template_fixture().at(raw.task_type);
  const std::string& tpl =
      paraphrases[template_seed % paraphrases.size()];

  std::string instruction = tpl;
  auto slot = instruction.find("{question}");
  if (slot != std::string::npos) {
    if (raw.question.empty())
      throw Error(ErrorCode::kTemplateField,
                  "task " + raw.task_type + " requires field 'question'");
    instruction.replace(slot, std::string("{question}").size(), raw.question);
  }

  std::string answer;
  if (raw.task_type == "tag") {
    if (raw.labels.empty())
      throw Error(ErrorCode::kTemplateField, "task tag requires field 'labels'");
    for (size_t i = 0; i < raw.labels.size(); ++i) {
      if (i) answer += ", ";
      answer += raw.labels[i];
    }
  } else {
    if (raw.answer_text.empty())
      throw Error(ErrorCode::kTemplateField,
                  "task " + raw.task_type + " requires field 'answer_text'");
    answer = raw.answer_text;
  }

  InstructionRecord rec;
  rec.task_type = raw.task_type;
  rec.control_tags["audio_language"] = raw.audio_language;
  rec.control_tags["text_language"] = raw.text_language;
  if (raw.timestamps) rec.control_tags["timestamps"] = "1";
  if (!raw.output_constraint.empty())
    rec.control_tags["output_constraint"] = raw.output_constraint;
  rec.instruction_text = normalize_whitespace(instruction);
  rec.answer_text = normalize_whitespace(answer);
  rec.source_dataset = raw.source_dataset;
  rec.clip_ref = raw.clip_ref;
  rec.split = raw.split;
  return rec;
}

/// Control-tag token ids for a record, in canonical prefix order.
inline std::vector<int> control_token_ids(const InstructionRecord& rec,
                                          const Tokenizer& vocab) {
  std::vector<int> ids;
  ids.push_back(vocab.tag_id("<task=" + rec.task_type + ">"));
  auto lang = [&](const char* key, const char* prefix) {
    auto it = rec.control_tags.find(key);
    std::string value = it == rec.control_tags.end() ? "en" : it->second;
    std::string tag = std::string(prefix) + value + ">";
    ids.push_back(vocab.has_tag(tag) ? vocab.tag_id(tag)
                                     : vocab.tag_id(std::string(prefix) + "xx>"));
  };
  lang("audio_language", "<al=");
  lang("text_language", "<tl=");
  if (rec.control_tags.count("timestamps")) ids.push_back(vocab.tag_id("<ts>"));
  if (rec.control_tags.count("output_constraint"))
    ids.push_back(vocab.tag_id("<oc=short>"));
  return ids;
}

inline TokenSequence tokenize(const InstructionRecord& rec, const Tokenizer& vocab) {
  TokenSequence seq;
  auto prompt = control_token_ids(rec, vocab);
  auto instr = vocab.encode_text(rec.instruction_text);
  prompt.insert(prompt.end(), instr.begin(), instr.end());
  auto answer = vocab.encode_text(rec.answer_text);
  answer.push_back(Tokenizer::kEoa);
  seq.prompt_len = static_cast<int>(prompt.size());
  seq.answer_len = static_cast<int>(answer.size());
  seq.token_ids = std::move(prompt);
  seq.token_ids.insert(seq.token_ids.end(), answer.begin(), answer.end());
  seq.vocab_size = vocab.vocab_size();
  return seq;
}

inline TokenBatch collate(const std::vector<TokenSequence>& seqs,
                          const std::vector<int>& audio_prefix_lens = {}) {
  if (seqs.empty()) throw Error(ErrorCode::kEmptyInput, "collate of empty batch");
  if (!audio_prefix_lens.empty() && audio_prefix_lens.size() != seqs.size())
    throw Error(ErrorCode::kShapeMismatch, "audio prefix count != batch size");
  TokenBatch batch;
  batch.batch = static_cast<int>(seqs.size());
  batch.width = 0;
  for (const auto& s : seqs) {
    if (s.answer_len < 1)
      throw Error(ErrorCode::kEmptyAnswer, "sequence with empty answer in batch");
    if (s.prompt_len + s.answer_len != static_cast<int>(s.token_ids.size()))
      throw Error(ErrorCode::kContract, "token count != prompt_len + answer_len");
    batch.width = std::max(batch.width, static_cast<int>(s.token_ids.size()));
  }
  batch.ids.assign(static_cast<size_t>(batch.batch) * batch.width, Tokenizer::kPad);
  batch.loss_mask.assign(batch.ids.size(), false);
  batch.pad_mask.assign(batch.ids.size(), false);
  for (int r = 0; r < batch.batch; ++r) {
    const auto& s = seqs[r];
    batch.prompt_len.push_back(s.prompt_len);
    batch.answer_len.push_back(s.answer_len);
    batch.audio_prefix.push_back(audio_prefix_lens.empty() ? 0 : audio_prefix_lens[r]);
    size_t base = static_cast<size_t>(r) * batch.width;
    for (size_t p = 0; p < s.token_ids.size(); ++p) {
      batch.ids[base + p] = s.token_ids[p];
      batch.pad_mask[base + p] = true;
      batch.loss_mask[base + p] = static_cast<int>(p) >= s.prompt_len;
    }
  }
  return batch;
}

}  // namespace earkit::instruct
