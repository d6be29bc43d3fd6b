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

#include <catch2/catch_amalgamated.hpp>
#include <string>
#include <vector>

#include "earkit/instruct.hpp"
#include "earkit/rng.hpp"

using namespace earkit;
using namespace earkit::instruct;

TEST_CASE("tag answers join labels with commas") {
  RawTask raw;
  raw.task_type = "tag";
  raw.labels = {"dog", "rain"};
  auto rec = render_template(raw, 0);
  CHECK(rec.answer_text == "dog, rain");
  Tokenizer vocab;
  auto ids = control_token_ids(rec, vocab);
  CHECK(ids[0] == vocab.tag_id("<task=tag>"));
}

TEST_CASE("transcripts pass through with the right control prefix") {
  RawTask raw;
  raw.task_type = "transcribe";
  raw.answer_text = "hello world";
  auto rec = render_template(raw, 2);
  CHECK(rec.answer_text == "hello world");
  Tokenizer vocab;
  auto ids = control_token_ids(rec, vocab);
  CHECK(ids[0] == vocab.tag_id("<task=transcribe>"));
  CHECK(ids[1] == vocab.tag_id("<al=en>"));
  CHECK(ids[2] == vocab.tag_id("<tl=en>"));
}

TEST_CASE("rendering is deterministic in the template seed") {
  RawTask raw;
  raw.task_type = "caption";
  raw.answer_text = "street noise";
  auto a = render_template(raw, 7);
  auto b = render_template(raw, 7);
  CHECK(a.instruction_text == b.instruction_text);
  CHECK(a.answer_text == b.answer_text);
  auto c = render_template(raw, 8);
  CHECK(c.instruction_text != a.instruction_text);
}

TEST_CASE("unknown tasks and missing fields are rejected") {
  RawTask raw;
  raw.task_type = "juggle";
  raw.answer_text = "x";
  REQUIRE_THROWS_AS(render_template(raw, 0), Error);

  RawTask qa;
  qa.task_type = "qa";
  qa.answer_text = "blue";
  try {
    render_template(qa, 0);
    FAIL("expected missing-field error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kTemplateField);
    CHECK(std::string(e.what()).find("question") != std::string::npos);
  }

  RawTask tag;
  tag.task_type = "tag";
  REQUIRE_THROWS_AS(render_template(tag, 0), Error);
}

TEST_CASE("whitespace is collapsed and trimmed") {
  CHECK(normalize_whitespace("  a   b\t c \n") == "a b c");
  CHECK(normalize_whitespace("") == "");
  CHECK(normalize_whitespace("   ") == "");
  RawTask raw;
  raw.task_type = "transcribe";
  raw.answer_text = "  two   words ";
  CHECK(render_template(raw, 0).answer_text == "two words");
}

TEST_CASE("prompts with no instruction text are exactly the control tags") {
  InstructionRecord rec;
  rec.task_type = "qa";
  rec.control_tags["audio_language"] = "en";
  rec.control_tags["text_language"] = "en";
  rec.instruction_text = "";
  rec.answer_text = "yes";
  Tokenizer vocab;
  auto seq = tokenize(rec, vocab);
  CHECK(seq.prompt_len == 3);
  CHECK(seq.answer_len == 4);  // 'y' 'e' 's' EOA
}

TEST_CASE("two-character answers take three tokens") {
  InstructionRecord rec;
  rec.task_type = "transcribe";
  rec.instruction_text = "x";
  rec.answer_text = "ab";
  Tokenizer vocab;
  auto seq = tokenize(rec, vocab);
  CHECK(seq.answer_len == 3);
  CHECK(seq.token_ids.back() == Tokenizer::kEoa);
}

TEST_CASE("unlisted languages fall back to the generic tag") {
  InstructionRecord rec;
  rec.task_type = "translate";
  rec.control_tags["audio_language"] = "de";
  rec.control_tags["text_language"] = "en";
  rec.instruction_text = "t";
  rec.answer_text = "a";
  Tokenizer vocab;
  auto ids = control_token_ids(rec, vocab);
  CHECK(ids[1] == vocab.tag_id("<al=xx>"));
  CHECK(ids[2] == vocab.tag_id("<tl=en>"));
}

TEST_CASE("tokenize and detokenize round-trip over random records") {
  Rng rng(51);
  Tokenizer vocab;
  const std::string tasks[] = {"transcribe", "caption", "tag", "qa", "match",
                               "translate"};
  for (int it = 0; it < 100; ++it) {
    RawTask raw;
    raw.task_type = tasks[rng.uniform_int(6)];
    raw.question = "what is the pitch class";
    auto rand_text = [&](int max_len) {
      int n = 1 + static_cast<int>(rng.uniform_int(max_len));
      std::string s;
      for (int i = 0; i < n; ++i) {
        // Printable ASCII plus some high bytes to exercise byte fallback.
        int pick = static_cast<int>(rng.uniform_int(100));
        if (pick < 90)
          s.push_back(static_cast<char>(32 + rng.uniform_int(95)));
        else
          s.push_back(static_cast<char>(161 + rng.uniform_int(90)));
      }
      return s;
    };
    if (raw.task_type == "tag") {
      int k = 1 + static_cast<int>(rng.uniform_int(3));
      for (int i = 0; i < k; ++i) raw.labels.push_back(rand_text(8));
      bool empty_join = true;
      for (auto& l : raw.labels) empty_join &= normalize_whitespace(l).empty();
      if (empty_join) raw.labels[0] = "z";
    } else {
      raw.answer_text = rand_text(24);
      if (normalize_whitespace(raw.answer_text).empty()) raw.answer_text = "z";
    }
    auto rec = render_template(raw, rng.next_u64());
    auto seq = tokenize(rec, vocab);
    std::vector<int> prompt(seq.token_ids.begin(),
                            seq.token_ids.begin() + seq.prompt_len);
    std::vector<int> answer(seq.token_ids.begin() + seq.prompt_len,
                            seq.token_ids.end());
    auto prompt_text = vocab.decode(prompt);
    auto answer_text = vocab.decode(answer);
    // Control tags decode to their literal names in front of the instruction.
    CHECK(prompt_text.find(rec.instruction_text) != std::string::npos);
    CHECK(prompt_text.find("<task=" + rec.task_type + ">") == 0);
    CHECK(answer_text == rec.answer_text);
  }
}

TEST_CASE("collation pads right and masks exactly the answer span") {
  Tokenizer vocab;
  InstructionRecord a;
  a.task_type = "qa";
  a.instruction_text = "q";
  a.answer_text = "x";
  InstructionRecord b;
  b.task_type = "caption";
  b.instruction_text = "some";
  b.answer_text = "busy";
  auto sa = tokenize(a, vocab);  // 3 + 1 + (1 + 1) = 6 tokens
  auto sb = tokenize(b, vocab);  // 3 + 4 + (4 + 1) = 12 tokens
  REQUIRE(sa.token_ids.size() == 6);
  REQUIRE(sb.token_ids.size() == 12);
  auto batch = collate({sa, sb});
  CHECK(batch.batch == 2);
  CHECK(batch.width == 12);
  int row0_loss = 0, row0_pad = 0;
  for (int p = 0; p < batch.width; ++p) {
    row0_loss += batch.loss_mask[p] ? 1 : 0;
    row0_pad += batch.pad_mask[p] ? 1 : 0;
  }
  CHECK(row0_loss == sa.answer_len);
  CHECK(row0_pad == 6);
  for (int p = 6; p < 12; ++p) {
    CHECK_FALSE(batch.pad_mask[p]);
    CHECK_FALSE(batch.loss_mask[p]);
    CHECK(batch.ids[p] == Tokenizer::kPad);
  }
}

TEST_CASE("every batch row carries one contiguous answer span") {
  Rng rng(52);
  Tokenizer vocab;
  for (int it = 0; it < 25; ++it) {
    std::vector<TokenSequence> seqs;
    int n = 1 + static_cast<int>(rng.uniform_int(6));
    for (int i = 0; i < n; ++i) {
      InstructionRecord rec;
      rec.task_type = "caption";
      rec.instruction_text = std::string(1 + rng.uniform_int(10), 'i');
      rec.answer_text = std::string(1 + rng.uniform_int(10), 'a');
      seqs.push_back(tokenize(rec, vocab));
    }
    auto batch = collate(seqs);
    for (int r = 0; r < batch.batch; ++r) {
      int transitions = 0;
      bool prev = false;
      for (int p = 0; p < batch.width; ++p) {
        bool cur = batch.loss_mask[static_cast<size_t>(r) * batch.width + p];
        if (cur != prev) ++transitions;
        prev = cur;
      }
      CHECK(transitions <= 2);  // rises once, falls at most once
      // Loss positions must be real tokens.
      for (int p = 0; p < batch.width; ++p) {
        size_t idx = static_cast<size_t>(r) * batch.width + p;
        if (batch.loss_mask[idx]) CHECK(batch.pad_mask[idx]);
      }
    }
  }
}

TEST_CASE("collate rejects empty batches and empty answers") {
  REQUIRE_THROWS_AS(collate({}), Error);
  Tokenizer vocab;
  InstructionRecord rec;
  rec.task_type = "qa";
  rec.instruction_text = "q";
  rec.answer_text = "x";
  auto seq = tokenize(rec, vocab);
  seq.answer_len = 0;
  seq.prompt_len = static_cast<int>(seq.token_ids.size());
  try {
    collate({seq});
    FAIL("expected empty-answer error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptyAnswer);
  }
}
