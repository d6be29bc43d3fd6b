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

// Drives the installed executable through std::system. Each case works in a
// throwaway directory that doubles as the output root, so relative output
// paths and the EARKIT_OUT contract are exercised on every invocation.

#include <sys/wait.h>

#include <catch2/catch_amalgamated.hpp>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "earkit/config.hpp"
#include "earkit/evalkit.hpp"
#include "earkit/model.hpp"
#include "earkit/suite.hpp"

using namespace earkit;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr, merged
};

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("earkit-cli-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out << text;
}

CliResult run_cli(const fs::path& dir, const std::string& args) {
  fs::path capture = dir / "cli_out.txt";
  std::string cmd = "cd \"" + dir.string() + "\" && EARKIT_OUT=\"" + dir.string() +
                    "\" \"" EARKIT_CLI_PATH "\" " + args + " > \"" + capture.string() +
                    "\" 2>&1";
  int rc = std::system(cmd.c_str());
  CliResult result;
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  result.exit_code = WEXITSTATUS(rc);
  result.output = read_text(capture);
  return result;
}

// Small model and short schedule so every invocation stays subsecond.
config::RunConfig tiny_run_config() {
  config::RunConfig cfg;
  cfg.seed = 11;
  cfg.frontend.n_mels = 32;
  cfg.model.n_mels = 32;
  cfg.model.d_w = 16;
  cfg.model.d_q = 16;
  cfg.model.enc_layers = 1;
  cfg.model.enc_heads = 2;
  cfg.model.dec_layers = 1;
  cfg.model.dec_heads = 2;
  cfg.model.ffn_mult = 2;
  cfg.model.max_audio_frames = 32;
  cfg.model.max_text_len = 72;
  cfg.train.peak_lr = 1e-3;
  cfg.train.warmup_steps = 2;
  cfg.train.total_steps = 10;
  cfg.train.batch_size = 2;
  cfg.train.decoder_warmstart_steps = 0;
  cfg.train.seed = 3;
  cfg.eval.seeds = {1};
  cfg.eval.probe_max_epochs = 30;
  cfg.paths.manifest = "data/manifest.jsonl";
  cfg.paths.out_dir = "run";
  return cfg;
}

void write_config(const fs::path& dir, const config::RunConfig& cfg) {
  write_text(dir / "config.json", config::canonical_json(cfg));
}

std::string synth_args(const std::string& kind, int classes, int n) {
  return "synth --kind " + kind + " --classes " + std::to_string(classes) + " --n " +
         std::to_string(n) + " --seed 7 --clip-seconds 0.3 --out data";
}

uint64_t tree_hash(const fs::path& root) {
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file()) files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& f : files) {
    h = fnv1a64(f.data(), f.size(), h);
    auto bytes = read_bytes(f);
    if (!bytes.empty()) h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return h;
}

}  // namespace

TEST_CASE("synthesis is deterministic and ingestible") {
  auto dir = fresh_dir("synth");
  auto first = run_cli(dir, synth_args("tone-tag", 2, 16));
  REQUIRE(first.exit_code == 0);
  CHECK(first.output.find("clips,16") != std::string::npos);
  REQUIRE(fs::exists(dir / "data" / "manifest.jsonl"));
  uint64_t h1 = tree_hash(dir / "data");

  auto second = run_cli(dir, synth_args("tone-tag", 2, 16));
  REQUIRE(second.exit_code == 0);
  CHECK(tree_hash(dir / "data") == h1);

  auto ingested = run_cli(dir, "ingest --manifest data/manifest.jsonl");
  REQUIRE(ingested.exit_code == 0);
  CHECK(ingested.output.find("records,16") != std::string::npos);
  CHECK(ingested.output.find("rejects,0") != std::string::npos);
}

TEST_CASE("unknown kind exits with the supported list") {
  auto dir = fresh_dir("badkind");
  auto r = run_cli(dir, "synth --kind flute --n 8");
  CHECK(r.exit_code == 2);
  for (const auto& kind : datahub::synthetic_kinds())
    CHECK(r.output.find(kind) != std::string::npos);
}

TEST_CASE("missing manifest exits with code 4 naming the path") {
  auto dir = fresh_dir("nomanifest");
  write_config(dir, tiny_run_config());
  auto r = run_cli(dir, "train --config config.json --manifest does/not/exist.jsonl");
  CHECK(r.exit_code == 4);
  CHECK(r.output.find("does/not/exist.jsonl") != std::string::npos);
}

TEST_CASE("smoke training run finishes within the time budget") {
  auto dir = fresh_dir("smoke");
  REQUIRE(run_cli(dir, synth_args("tone-tag", 2, 16)).exit_code == 0);
  auto cfg = tiny_run_config();
  cfg.train.total_steps = 50;
  cfg.train.warmup_steps = 5;
  write_config(dir, cfg);

  auto begin = std::chrono::steady_clock::now();
  auto r = run_cli(dir, "train --config config.json");
  auto seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - begin);
  REQUIRE(r.exit_code == 0);
  CHECK(seconds.count() < 60.0);
  CHECK(r.output.find("steps,50") != std::string::npos);
  CHECK(r.output.find("final_loss_per_token,") != std::string::npos);
  REQUIRE(fs::exists(dir / "run" / "checkpoint.ckpt"));

  // Per-step log: one header line plus one line per main-phase step.
  auto log = read_text(dir / "run" / "train_log.csv");
  size_t lines = 0;
  for (char c : log) lines += c == '\n' ? 1 : 0;
  CHECK(lines == 51);
}

TEST_CASE("freeze flag flips decoder training") {
  auto dir = fresh_dir("freeze");
  REQUIRE(run_cli(dir, synth_args("tone-tag", 2, 16)).exit_code == 0);
  auto cfg = tiny_run_config();
  cfg.train.total_steps = 6;
  write_config(dir, cfg);

  auto frozen = run_cli(dir, "train --config config.json --freeze-decoder=true --out runf");
  auto open = run_cli(dir, "train --config config.json --freeze-decoder=false --out runo");
  REQUIRE(frozen.exit_code == 0);
  REQUIRE(open.exit_code == 0);

  model::Model probe(cfg.model, cfg.seed);
  uint64_t init_hash = probe.decoder_hash();
  model::load_values(probe, model::read_checkpoint((dir / "runf" / "checkpoint.ckpt").string()));
  CHECK(probe.decoder_hash() == init_hash);
  model::load_values(probe, model::read_checkpoint((dir / "runo" / "checkpoint.ckpt").string()));
  CHECK(probe.decoder_hash() != init_hash);
}

TEST_CASE("identical configurations produce byte-identical artifacts") {
  auto root_a = fresh_dir("detA");
  auto root_b = fresh_dir("detB");
  auto cfg = tiny_run_config();
  for (const auto& dir : {root_a, root_b}) {
    REQUIRE(run_cli(dir, synth_args("tone-tag", 2, 16)).exit_code == 0);
    write_config(dir, cfg);
    REQUIRE(run_cli(dir, "train --config config.json").exit_code == 0);
    REQUIRE(run_cli(dir, "eval --config config.json --checkpoint run/checkpoint.ckpt "
                         "--protocol knn --out evalout")
                .exit_code == 0);
  }
  CHECK(read_bytes(root_a / "run" / "checkpoint.ckpt") ==
        read_bytes(root_b / "run" / "checkpoint.ckpt"));
  CHECK(read_bytes(root_a / "run" / "run_config.json") ==
        read_bytes(root_b / "run" / "run_config.json"));
  CHECK(read_bytes(root_a / "evalout" / "report_knn.csv") ==
        read_bytes(root_b / "evalout" / "report_knn.csv"));
}

TEST_CASE("evaluation from a checkpoint writes reports for both protocols") {
  auto dir = fresh_dir("evalck");
  REQUIRE(run_cli(dir, synth_args("tone-tag", 2, 16)).exit_code == 0);
  auto cfg = tiny_run_config();
  write_config(dir, cfg);
  REQUIRE(run_cli(dir, "train --config config.json").exit_code == 0);

  auto r = run_cli(dir, "eval --config config.json --checkpoint run/checkpoint.ckpt "
                        "--protocol both --out evalout");
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("protocol mlp") != std::string::npos);
  CHECK(r.output.find("protocol knn") != std::string::npos);

  auto knn_csv = read_text(dir / "evalout" / "report_knn.csv");
  CHECK(knn_csv.find("# k,5") != std::string::npos);
  CHECK(knn_csv.find("\nS,,,") != std::string::npos);
  CHECK(fs::exists(dir / "evalout" / "report_mlp.csv"));
  CHECK(fs::exists(dir / "evalout" / "report_mlp.txt"));

  // The sidecar pins the configuration and its 16-hex-digit hash.
  auto sidecar = read_text(dir / "evalout" / "run_config.json");
  auto doc = nlohmann::json::parse(sidecar);
  CHECK(doc["config_hash"].get<std::string>().size() == 16);
  CHECK(doc["config"]["seed"].get<uint64_t>() == cfg.seed);
}

TEST_CASE("embedding files round trip through file-mode evaluation") {
  auto dir = fresh_dir("embfile");
  REQUIRE(run_cli(dir, synth_args("tone-tag", 2, 16)).exit_code == 0);
  write_config(dir, tiny_run_config());
  REQUIRE(run_cli(dir, "train --config config.json").exit_code == 0);

  auto emb = run_cli(dir, "embed --config config.json --checkpoint run/checkpoint.ckpt "
                          "--out embout");
  REQUIRE(emb.exit_code == 0);
  REQUIRE(fs::exists(dir / "embout" / "tone-tag.emb"));

  auto r = run_cli(dir, "eval --config config.json --embeddings embout/tone-tag.emb "
                        "--protocol knn --out evalout");
  REQUIRE(r.exit_code == 0);
  auto csv = read_text(dir / "evalout" / "report_knn.csv");
  CHECK(csv.find("tone-tag,Acc,") != std::string::npos);

  // A file with no eval-split records has no task data to score.
  auto set = evalkit::read_embeddings((dir / "embout" / "tone-tag.emb").string());
  set.records.erase(std::remove_if(set.records.begin(), set.records.end(),
                                   [](const auto& rec) { return rec.split == "eval"; }),
                    set.records.end());
  evalkit::write_embeddings((dir / "trainonly.emb").string(), set);
  auto starved = run_cli(dir, "eval --embeddings trainonly.emb --protocol knn");
  CHECK(starved.exit_code == 5);
  CHECK(starved.output.find("trainonly.emb") != std::string::npos);
}

TEST_CASE("aggregate scoring reproduces a hand example") {
  auto dir = fresh_dir("score");
  write_text(dir / "scores.csv", "task,normalized,weight\na,1.0,30\nb,0.5,10\n");
  auto r = run_cli(dir, "score --table scores.csv");
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("S,0.875000") != std::string::npos);
  CHECK(r.output.find("total_weight,40.000000") != std::string::npos);

  write_text(dir / "percent.csv", "task,normalized,weight\na,100,30\nb,50,10\n");
  auto p = run_cli(dir, "score --table percent.csv --percent");
  REQUIRE(p.exit_code == 0);
  CHECK(p.output.find("S,0.875000") != std::string::npos);

  write_text(dir / "bad.csv", "task,normalized,weight\na,1.5,30\n");
  CHECK(run_cli(dir, "score --table bad.csv").exit_code == 2);
}

TEST_CASE("bootstrap command reports the two-seed constants") {
  auto dir = fresh_dir("boot");
  write_text(dir / "boot.csv", "seed,value\n1,0.6\n1,0.6\n2,0.8\n2,0.8\n");
  auto r = run_cli(dir, "bootstrap --scores boot.csv --B 2000");
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("mean,0.700000") != std::string::npos);
  CHECK(r.output.find("deviation,0.100000") != std::string::npos);
  CHECK(r.output.find("lo,0.600000") != std::string::npos);
  CHECK(r.output.find("hi,0.800000") != std::string::npos);
}

TEST_CASE("transcription scores under the probe protocol and is excluded from knn") {
  auto dir = fresh_dir("mixed");
  REQUIRE(run_cli(dir, "synth --kind tone-tag --classes 2 --n 12 --seed 7 "
                       "--clip-seconds 0.3 --out dsA")
              .exit_code == 0);
  REQUIRE(run_cli(dir, "synth --kind tone-seq-transcribe --classes 2 --n 12 --seed 9 "
                       "--clip-seconds 0.3 --out dsB")
              .exit_code == 0);

  // Merge the two datasets under one manifest, prefixing clip paths with
  // their dataset directories.
  std::vector<datahub::ManifestRecord> merged;
  for (const std::string sub : {"dsA", "dsB"}) {
    auto m = datahub::ingest((dir / sub / "manifest.jsonl").string());
    for (auto rec : m.records) {
      rec.clip = sub + "/" + rec.clip;
      merged.push_back(std::move(rec));
    }
  }
  datahub::write_manifest(merged, (dir / "merged.jsonl").string());

  auto cfg = tiny_run_config();
  cfg.paths.manifest = "merged.jsonl";
  write_config(dir, cfg);
  REQUIRE(run_cli(dir, "train --config config.json").exit_code == 0);

  auto r = run_cli(dir, "eval --config config.json --checkpoint run/checkpoint.ckpt "
                        "--protocol both --out evalout");
  REQUIRE(r.exit_code == 0);

  auto mlp_csv = read_text(dir / "evalout" / "report_mlp.csv");
  CHECK(mlp_csv.find("tone-seq-transcribe,WER,") != std::string::npos);
  CHECK(mlp_csv.find("tone-tag,Acc,") != std::string::npos);

  auto knn_csv = read_text(dir / "evalout" / "report_knn.csv");
  auto seq_row = knn_csv.find("tone-seq-transcribe,");
  REQUIRE(seq_row != std::string::npos);
  CHECK(knn_csv.find("excluded", seq_row) != std::string::npos);
}

TEST_CASE("eval attaches bootstrap deviations when asked") {
  auto dir = fresh_dir("evalboot");
  REQUIRE(run_cli(dir, synth_args("tone-tag", 2, 16)).exit_code == 0);
  write_config(dir, tiny_run_config());
  REQUIRE(run_cli(dir, "train --config config.json").exit_code == 0);

  auto r = run_cli(dir, "eval --config config.json --checkpoint run/checkpoint.ckpt "
                        "--protocol knn --bootstrap 1000 --out evalout");
  REQUIRE(r.exit_code == 0);
  auto csv = read_text(dir / "evalout" / "report_knn.csv");
  CHECK(csv.find("# bootstrap_B,1000") != std::string::npos);

  // The task row carries populated bootstrap columns.
  auto row_pos = csv.find("\ntone-tag,");
  REQUIRE(row_pos != std::string::npos);
  auto row_end = csv.find('\n', row_pos + 1);
  std::string row = csv.substr(row_pos + 1, row_end - row_pos - 1);
  std::vector<std::string> fields;
  size_t pos = 0;
  while (true) {
    auto comma = row.find(',', pos);
    fields.push_back(row.substr(pos, comma - pos));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  REQUIRE(fields.size() == 8);
  CHECK(!fields[5].empty());
  CHECK(!fields[6].empty());
}
