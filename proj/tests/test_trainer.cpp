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
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "earkit/trainer.hpp"

using namespace earkit;
using namespace earkit::trainer;
namespace fs = std::filesystem;

namespace {

template <typename F>
void check_error(F&& f, ErrorCode code) {
  try {
    f();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == code);
  }
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("earkit-trainer-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

model::ModelConfig tiny_model_config() {
  model::ModelConfig cfg;
  cfg.n_mels = 128;
  cfg.d_w = 16;
  cfg.d_q = 16;
  cfg.enc_layers = 1;
  cfg.enc_heads = 2;
  cfg.dec_layers = 1;
  cfg.dec_heads = 2;
  cfg.ffn_mult = 2;
  cfg.vocab_size = 271;
  cfg.max_audio_frames = 32;
  cfg.max_text_len = 72;
  return cfg;
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.peak_lr = 1e-3;
  cfg.warmup_steps = 2;
  cfg.total_steps = 8;
  cfg.batch_size = 2;
  cfg.decoder_warmstart_steps = 0;
  return cfg;
}

// Short synthetic clips shared by the run_training tests.
std::vector<datahub::ManifestRecord> tiny_corpus(const fs::path& dir, int count) {
  datahub::SyntheticSpec spec;
  spec.kind = "tone-tag";
  spec.classes = 2;
  spec.count = count;
  spec.clip_seconds = 0.3;
  spec.seed = 5;
  return datahub::synthesize(spec, dir.string());
}

TrainInputs inputs_for(const std::vector<datahub::ManifestRecord>& records,
                       const fs::path& dir) {
  TrainInputs in;
  in.records = &records;
  in.audio_root = dir.string();
  return in;
}

}  // namespace

TEST_CASE("learning rate schedule hits its landmarks") {
  TrainConfig cfg;
  cfg.peak_lr = 3e-4;
  cfg.warmup_steps = 150;
  cfg.total_steps = 3000;
  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(150, cfg) == cfg.peak_lr);
  CHECK(lr_at(75, cfg) == Catch::Approx(cfg.peak_lr / 2).epsilon(1e-12));
  // Cosine midpoint: warmup + half the remaining steps gives peak/2.
  CHECK(lr_at(150 + 1425, cfg) == Catch::Approx(cfg.peak_lr / 2).epsilon(1e-12));
  CHECK(lr_at(3000, cfg) == 0.0);
  for (int s = 1; s <= 150; ++s) CHECK(lr_at(s, cfg) > lr_at(s - 1, cfg));
  for (int s = 151; s <= 3000; ++s) CHECK(lr_at(s, cfg) < lr_at(s - 1, cfg));
  check_error([&] { lr_at(-1, cfg); }, ErrorCode::kContract);
  check_error([&] { lr_at(3001, cfg); }, ErrorCode::kContract);
}

TEST_CASE("train config invariants are enforced") {
  TrainConfig cfg = tiny_train_config();
  cfg.warmup_steps = 8;
  cfg.total_steps = 8;
  check_error([&] { cfg.validate(); }, ErrorCode::kContract);
  cfg = tiny_train_config();
  cfg.peak_lr = 0.0;
  check_error([&] { cfg.validate(); }, ErrorCode::kContract);
  cfg = tiny_train_config();
  cfg.task_repeat["tag"] = -1;
  check_error([&] { cfg.validate(); }, ErrorCode::kContract);
  tiny_train_config().validate();
}

TEST_CASE("optimizer state covers exactly the trainable parameters") {
  model::Model m(tiny_model_config(), 1);
  m.freeze_decoder(true);
  OptimizerState state;
  state.ensure(m.params());
  std::set<std::string> trainable;
  m.params().for_each([&](const std::string& path, const grad::TensorPtr& t, bool tr) {
    if (!tr) return;
    trainable.insert(path);
    REQUIRE(state.slots.count(path) == 1);
    CHECK(state.slots.at(path).m.size() == t->v.size());
    CHECK(state.slots.at(path).v.size() == t->v.size());
  });
  CHECK(state.slots.size() == trainable.size());
  for (const auto& [path, slot] : state.slots) CHECK(path.rfind("decoder/", 0) != 0);

  m.freeze_decoder(false);
  state.ensure(m.params());
  bool has_decoder = false;
  for (const auto& [path, slot] : state.slots)
    has_decoder = has_decoder || path.rfind("decoder/", 0) == 0;
  CHECK(has_decoder);

  m.freeze_decoder(true);
  state.ensure(m.params());
  for (const auto& [path, slot] : state.slots) CHECK(path.rfind("decoder/", 0) != 0);
}

TEST_CASE("zero gradients leave only weight-decay shrinkage") {
  model::Model m(tiny_model_config(), 2);
  m.freeze_decoder(true);
  OptimizerState state;
  state.ensure(m.params());
  std::map<std::string, std::vector<double>> before;
  m.params().for_each([&](const std::string& path, const grad::TensorPtr& t, bool) {
    before[path] = t->v;
  });
  m.params().zero_grad();
  TrainConfig cfg = tiny_train_config();
  double lr = 1e-3;
  trainer::detail::apply_adamw(&m.params(), &state, lr, cfg, 1.0);
  m.params().for_each([&](const std::string& path, const grad::TensorPtr& t, bool tr) {
    const auto& old = before.at(path);
    for (size_t i = 0; i < t->v.size(); ++i) {
      if (tr) {
        // Zero moments make the adaptive term exactly zero, so the update is
        // the decoupled decay alone.
        double expected = old[i] - lr * cfg.weight_decay * old[i];
        CHECK(t->v[i] == expected);
      } else {
        CHECK(t->v[i] == old[i]);
      }
    }
  });
  CHECK(state.step == 1);
}

TEST_CASE("fifty steps on one batch strictly reduce the loss") {
  auto dir = fresh_dir("overfit");
  auto records = tiny_corpus(dir, 2);
  records.resize(1);
  model::Model m(tiny_model_config(), 3);
  m.freeze_decoder(false);

  TrainInputs in = inputs_for(records, dir);
  auto data = trainer::detail::prepare(in);
  instruct::Tokenizer vocab;
  Rng rng(7);
  auto batch = trainer::detail::render_batch(data, {0}, vocab, &rng, true);

  TrainConfig cfg;
  cfg.peak_lr = 3e-3;
  cfg.warmup_steps = 5;
  cfg.total_steps = 250;
  cfg.batch_size = 1;
  OptimizerState state;
  state.ensure(m.params());
  std::vector<double> losses;
  for (int step = 1; step <= cfg.total_steps; ++step) {
    auto result = train_step(&m, &batch.feats, batch.tokens, &state, lr_at(step, cfg), cfg);
    losses.push_back(result.loss_sum);
  }
  for (size_t i = 1; i < 50; ++i) {
    INFO("step " << i + 1);
    CHECK(losses[i] < losses[i - 1]);
  }
  CHECK(losses.back() < 0.1 * losses.front());
}

TEST_CASE("frozen decoder hash is constant across one hundred steps") {
  auto dir = fresh_dir("freeze");
  auto records = tiny_corpus(dir, 4);
  model::Model m(tiny_model_config(), 4);
  uint64_t encoder_before =
      m.params().value_hash([](const std::string& p) { return p.rfind("encoder/", 0) == 0; });
  uint64_t decoder_before =
      m.params().value_hash([](const std::string& p) { return p.rfind("decoder/", 0) == 0; });

  TrainConfig cfg = tiny_train_config();
  cfg.warmup_steps = 10;
  cfg.total_steps = 100;
  cfg.freeze_decoder = true;
  cfg.decoder_warmstart_steps = 0;
  auto summary = run_training(&m, inputs_for(records, dir), cfg, {});
  CHECK(summary.steps == 100);
  CHECK(m.decoder_hash() == decoder_before);
  CHECK(summary.decoder_hash_final == decoder_before);
  uint64_t encoder_after =
      m.params().value_hash([](const std::string& p) { return p.rfind("encoder/", 0) == 0; });
  CHECK(encoder_after != encoder_before);
}

TEST_CASE("warm start moves the decoder once and freezing pins it") {
  auto dir = fresh_dir("warmstart");
  auto records = tiny_corpus(dir, 4);
  TrainConfig cfg = tiny_train_config();
  cfg.decoder_warmstart_steps = 6;
  cfg.freeze_decoder = true;

  model::Model a(tiny_model_config(), 5);
  uint64_t initial = a.decoder_hash();
  cfg.total_steps = 4;
  auto sum_a = run_training(&a, inputs_for(records, dir), cfg, {});

  model::Model b(tiny_model_config(), 5);
  cfg.total_steps = 12;
  auto sum_b = run_training(&b, inputs_for(records, dir), cfg, {});

  CHECK(sum_a.decoder_hash_after_warmstart != initial);
  CHECK(sum_a.decoder_hash_after_warmstart == sum_b.decoder_hash_after_warmstart);
  // The main phase never touches the frozen decoder, so runs of different
  // lengths agree on the final decoder bytes.
  CHECK(sum_a.decoder_hash_final == sum_b.decoder_hash_final);
  CHECK(sum_a.decoder_hash_final == sum_a.decoder_hash_after_warmstart);
}

TEST_CASE("same seed gives byte-identical checkpoints") {
  auto dir = fresh_dir("determinism");
  auto records = tiny_corpus(dir, 4);
  TrainConfig cfg = tiny_train_config();
  cfg.decoder_warmstart_steps = 3;

  auto run_once = [&](const std::string& name, uint64_t model_seed, uint64_t train_seed) {
    model::Model m(tiny_model_config(), model_seed);
    TrainConfig local = cfg;
    local.seed = train_seed;
    TrainPaths paths;
    paths.checkpoint = (dir / name).string();
    run_training(&m, inputs_for(records, dir), local, paths);
    return read_bytes(dir / name);
  };
  auto first = run_once("a.ckpt", 11, 21);
  auto second = run_once("b.ckpt", 11, 21);
  CHECK(first == second);
  auto third = run_once("c.ckpt", 11, 22);
  CHECK(first != third);
}

TEST_CASE("answer token consumption matches the weighted epoch total") {
  auto dir = fresh_dir("conserve");
  auto records = tiny_corpus(dir, 8);
  model::Model m(tiny_model_config(), 6);
  TrainConfig cfg = tiny_train_config();
  cfg.batch_size = 4;
  cfg.warmup_steps = 1;
  cfg.total_steps = 6;  // three exact epochs of 8 records at batch 4
  auto summary = run_training(&m, inputs_for(records, dir), cfg, {});
  CHECK(summary.epoch_answer_tokens > 0);
  CHECK(summary.consumed_answer_tokens == 3 * summary.epoch_answer_tokens);

  // Doubling the task repeat doubles both the epoch and the consumption.
  model::Model m2(tiny_model_config(), 6);
  TrainConfig weighted = cfg;
  weighted.task_repeat["tag"] = 2;
  weighted.total_steps = 4;  // one exact epoch of 16 draws at batch 4
  auto sum2 = run_training(&m2, inputs_for(records, dir), weighted, {});
  CHECK(sum2.epoch_answer_tokens == 2 * summary.epoch_answer_tokens);
  CHECK(sum2.consumed_answer_tokens == sum2.epoch_answer_tokens);
}

TEST_CASE("empty inputs and zeroed task weights are rejected") {
  auto dir = fresh_dir("rejects");
  std::vector<datahub::ManifestRecord> none;
  model::Model m(tiny_model_config(), 7);
  check_error([&] { run_training(&m, inputs_for(none, dir), tiny_train_config(), {}); },
              ErrorCode::kEmptyInput);

  auto records = tiny_corpus(dir, 2);
  TrainConfig cfg = tiny_train_config();
  cfg.task_repeat["tag"] = 0;
  check_error([&] { run_training(&m, inputs_for(records, dir), cfg, {}); },
              ErrorCode::kEmptyInput);
}

TEST_CASE("divergence is reported with step context") {
  auto dir = fresh_dir("diverge");
  auto records = tiny_corpus(dir, 2);
  model::Model m(tiny_model_config(), 8);
  auto w = m.params().get("encoder/conv1/w");
  w->v[0] = std::numeric_limits<double>::quiet_NaN();

  TrainInputs in = inputs_for(records, dir);
  auto data = trainer::detail::prepare(in);
  instruct::Tokenizer vocab;
  Rng rng(9);
  auto batch = trainer::detail::render_batch(data, {0, 1}, vocab, &rng, true);
  OptimizerState state;
  state.ensure(m.params());
  try {
    train_step(&m, &batch.feats, batch.tokens, &state, 1e-3, tiny_train_config());
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDivergence);
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("unfrozen decoder runs complete with schema-identical logs") {
  auto dir = fresh_dir("logs");
  auto records = tiny_corpus(dir, 4);
  auto run_with = [&](bool freeze, const std::string& name) {
    model::Model m(tiny_model_config(), 10);
    TrainConfig cfg = tiny_train_config();
    cfg.total_steps = 4;
    cfg.freeze_decoder = freeze;
    TrainPaths paths;
    paths.log_csv = (dir / name).string();
    run_training(&m, inputs_for(records, dir), cfg, paths);
    std::ifstream in(dir / name);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
  };
  auto frozen = run_with(true, "frozen.csv");
  auto open = run_with(false, "open.csv");
  REQUIRE(frozen.size() == 5);
  REQUIRE(open.size() == 5);
  CHECK(frozen[0] == "step,lr,loss_sum,answer_tokens,wallclock_ms");
  CHECK(open[0] == frozen[0]);
  for (size_t i = 0; i < frozen.size(); ++i) {
    CHECK(std::count(frozen[i].begin(), frozen[i].end(), ',') == 4);
    CHECK(std::count(open[i].begin(), open[i].end(), ',') == 4);
  }
}

TEST_CASE("checkpoints are written periodically and at the end") {
  auto dir = fresh_dir("ckpts");
  auto records = tiny_corpus(dir, 4);
  model::Model m(tiny_model_config(), 12);
  TrainConfig cfg = tiny_train_config();
  cfg.total_steps = 4;
  cfg.warmup_steps = 1;
  cfg.checkpoint_every = 2;
  TrainInputs in = inputs_for(records, dir);
  in.config_json = "{\"run\":\"test\"}";
  in.config_hash = 0x1234;
  TrainPaths paths;
  paths.checkpoint = (dir / "final.ckpt").string();
  paths.checkpoint_dir = (dir / "periodic").string();
  run_training(&m, in, cfg, paths);
  CHECK(fs::exists(dir / "periodic/step-000002.ckpt"));
  CHECK(fs::exists(dir / "periodic/step-000004.ckpt"));
  REQUIRE(fs::exists(dir / "final.ckpt"));
  auto ck = model::read_checkpoint((dir / "final.ckpt").string());
  CHECK(ck.config_json == in.config_json);
  CHECK(ck.config_hash == in.config_hash);
}
