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

// earkit: one executable tying the pipeline together,
//   synth -> ingest/dedup -> train -> embed -> eval -> score/bootstrap.
//
// Exit codes: 0 success, 2 validation or contract failure, 3 divergence,
// 4 I/O failure, 5 missing task data. Relative output paths resolve under
// $EARKIT_OUT (default "."); input paths are used as given. Every artifact
// directory gets a run_config.json sidecar carrying the full configuration
// and its hash; binary artifacts embed the same hash internally.

#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "earkit/common.hpp"
#include "earkit/config.hpp"
#include "earkit/datahub.hpp"
#include "earkit/evalkit.hpp"
#include "earkit/instruct.hpp"
#include "earkit/metrics.hpp"
#include "earkit/model.hpp"
#include "earkit/suite.hpp"
#include "earkit/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using earkit::Error;
using earkit::ErrorCode;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDivergence: return 3;
    case ErrorCode::kIo: return 4;
    case ErrorCode::kMissingTaskData: return 5;
    default: return 2;
  }
}

std::string out_root() {
  const char* v = std::getenv("EARKIT_OUT");
  return v && *v ? v : ".";
}

std::string resolve_out(const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return path;
  return (fs::path(out_root()) / p).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::kIo, "cannot write " + path);
  f << text;
  if (!f) throw Error(ErrorCode::kIo, "short write on " + path);
}

std::string hex16(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

bool parse_bool(const std::string& s, const std::string& flag) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw Error(ErrorCode::kContract, flag + " wants true or false, got " + s);
}

// Shared config plumbing: file, then --set overrides, then dedicated flags.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::string manifest;
  std::string out;
};

void add_config_flags(CLI::App* cmd, ConfigFlags* fl, bool with_paths = true) {
  cmd->add_option("--config", fl->config_path, "run configuration JSON");
  cmd->add_option("--set", fl->sets, "override, section.key=value (repeatable)");
  if (with_paths) {
    cmd->add_option("--manifest", fl->manifest, "manifest path (overrides paths.manifest)");
    cmd->add_option("--out", fl->out, "output directory (overrides paths.out_dir)");
  }
}

earkit::config::RunConfig load_run_config(const ConfigFlags& fl) {
  earkit::config::RunConfig cfg;
  if (!fl.config_path.empty()) cfg = earkit::config::load_config(fl.config_path);
  for (const auto& s : fl.sets) earkit::config::apply_override(&cfg, s);
  if (!fl.manifest.empty()) cfg.paths.manifest = fl.manifest;
  if (!fl.out.empty()) cfg.paths.out_dir = fl.out;
  return cfg;
}

std::string prepare_out_dir(const earkit::config::RunConfig& cfg) {
  std::string dir = resolve_out(cfg.paths.out_dir);
  fs::create_directories(dir);
  nlohmann::json doc;
  doc["config"] = cfg;
  doc["config_hash"] = hex16(earkit::config::config_hash(cfg));
  write_text(dir + "/run_config.json", doc.dump() + "\n");
  return dir;
}

// Simple comma-separated rows; '#' lines and a non-numeric header are skipped.
std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kIo, "cannot read " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    size_t pos = 0;
    while (true) {
      size_t comma = line.find(',', pos);
      fields.push_back(line.substr(pos, comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    rows.push_back(std::move(fields));
  }
  return rows;
}

bool to_double(const std::string& s, double* out) {
  try {
    size_t used = 0;
    *out = std::stod(s, &used);
    return used == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

// ------------------------------------------------------------------- loading

earkit::model::Model load_model(const std::string& checkpoint_path,
                                earkit::config::RunConfig* ck_cfg) {
  auto ck = earkit::model::read_checkpoint(checkpoint_path);
  *ck_cfg = earkit::config::parse_config(ck.config_json);
  earkit::model::Model net(ck_cfg->model, 0);
  earkit::model::load_values(net, ck);
  return net;
}

std::vector<earkit::evalkit::Protocol> protocols_from(const std::string& name) {
  using earkit::evalkit::Protocol;
  if (name == "mlp") return {Protocol::kMlp};
  if (name == "knn") return {Protocol::kKnn};
  if (name == "both") return {Protocol::kMlp, Protocol::kKnn};
  throw Error(ErrorCode::kContract, "protocol must be mlp, knn, or both: " + name);
}

// ------------------------------------------------------------------ commands

struct SynthFlags {
  std::string kind;
  int classes = 4;
  int count = 200;
  uint64_t seed = 0;
  double clip_seconds = 1.0;
  double snr_db = 25.0;
  int sample_rate = 16000;
  double eval_fraction = 0.25;
  uint64_t split_seed = 77;
  std::string out;
};

int cmd_synth(const SynthFlags& fl) {
  bool known = false;
  for (const auto& k : earkit::datahub::synthetic_kinds()) known = known || k == fl.kind;
  if (!known) {
    std::string kinds;
    for (const auto& k : earkit::datahub::synthetic_kinds())
      kinds += (kinds.empty() ? "" : ", ") + k;
    throw Error(ErrorCode::kContract, "unknown kind " + fl.kind + "; supported: " + kinds);
  }

  earkit::datahub::SyntheticSpec spec;
  spec.kind = fl.kind;
  spec.classes = fl.classes;
  spec.count = fl.count;
  spec.clip_seconds = fl.clip_seconds;
  spec.seed = fl.seed;
  spec.sample_rate = fl.sample_rate;
  spec.snr_db = fl.snr_db;

  std::string dir = resolve_out(fl.out.empty() ? "data/" + fl.kind : fl.out);
  fs::create_directories(dir);
  auto records = earkit::datahub::synthesize(spec, dir);
  if (fl.eval_fraction > 0.0) {
    auto parts = earkit::datahub::split(records, fl.eval_fraction, fl.split_seed);
    records.clear();
    for (auto& r : parts.train) records.push_back(std::move(r));
    for (auto& r : parts.eval) records.push_back(std::move(r));
    // Ids embed the clip index, so sorting restores generation order.
    std::sort(records.begin(), records.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
  }
  earkit::datahub::write_manifest(records, dir + "/manifest.jsonl");

  nlohmann::json doc = {{"kind", spec.kind},
                        {"classes", spec.classes},
                        {"count", spec.count},
                        {"clip_seconds", spec.clip_seconds},
                        {"seed", spec.seed},
                        {"sample_rate", spec.sample_rate},
                        {"snr_db", spec.snr_db},
                        {"eval_fraction", fl.eval_fraction},
                        {"split_seed", fl.split_seed}};
  doc["config_hash"] = hex16(earkit::fnv1a64(doc.dump()));
  write_text(dir + "/synth_config.json", doc.dump() + "\n");

  std::cout << "clips," << records.size() << "\n";
  std::cout << "manifest," << dir << "/manifest.jsonl\n";
  std::cout << "config_hash," << doc["config_hash"].get<std::string>() << "\n";
  return 0;
}

int cmd_ingest(const std::string& manifest, const std::string& rejects_out) {
  auto m = earkit::datahub::ingest(manifest);
  if (!rejects_out.empty())
    earkit::datahub::write_rejects_report(m.rejects, resolve_out(rejects_out));
  std::cout << "records," << m.records.size() << "\n";
  std::cout << "rejects," << m.rejects.size() << "\n";
  return 0;
}

int cmd_dedup(const std::string& manifest, const std::string& out,
              const std::string& report) {
  auto m = earkit::datahub::ingest(manifest);
  auto result = earkit::datahub::dedup(m.records, m.root);
  if (!out.empty())
    earkit::datahub::write_manifest(result.kept, resolve_out(out));
  if (!report.empty())
    earkit::datahub::write_dedup_report(result, resolve_out(report));
  std::cout << "kept," << result.kept.size() << "\n";
  std::cout << "removed," << result.removed.size() << "\n";
  std::cout << "quarantined," << result.quarantined.size() << "\n";
  return 0;
}

int cmd_train(const ConfigFlags& cf, const std::string& freeze_flag) {
  auto cfg = load_run_config(cf);
  if (!freeze_flag.empty())
    cfg.train.freeze_decoder = parse_bool(freeze_flag, "--freeze-decoder");
  if (cfg.paths.manifest.empty())
    throw Error(ErrorCode::kContract, "no manifest; pass --manifest or set paths.manifest");

  auto m = earkit::datahub::ingest(cfg.paths.manifest);
  std::vector<earkit::datahub::ManifestRecord> train_records;
  for (const auto& r : m.records)
    if (r.task.split == "train") train_records.push_back(r);
  if (train_records.empty())
    throw Error(ErrorCode::kEmptyInput, "manifest has no train-split records");

  std::string dir = prepare_out_dir(cfg);
  earkit::trainer::TrainInputs in;
  in.records = &train_records;
  in.audio_root = m.root;
  in.frontend = cfg.frontend;
  in.config_json = earkit::config::canonical_json(cfg);
  in.config_hash = earkit::config::config_hash(cfg);

  earkit::trainer::TrainPaths paths;
  paths.checkpoint = dir + "/checkpoint.ckpt";
  paths.log_csv = dir + "/train_log.csv";
  if (cfg.train.checkpoint_every > 0) {
    paths.checkpoint_dir = dir + "/checkpoints";
    fs::create_directories(paths.checkpoint_dir);
  }

  earkit::model::Model net(cfg.model, cfg.seed);
  auto summary = earkit::trainer::run_training(&net, in, cfg.train, paths);

  std::cout << "steps," << summary.steps << "\n";
  std::cout << "warmstart_steps," << summary.warmstart_steps << "\n";
  std::cout << "final_loss_per_token," << fixed6(summary.final_loss_per_token) << "\n";
  std::cout << "checkpoint," << paths.checkpoint << "\n";
  std::cout << "config_hash," << hex16(in.config_hash) << "\n";
  return 0;
}

int cmd_embed(const ConfigFlags& cf, const std::string& checkpoint) {
  auto cfg = load_run_config(cf);
  earkit::config::RunConfig ck_cfg;
  auto net = load_model(checkpoint, &ck_cfg);
  if (cfg.paths.manifest.empty())
    throw Error(ErrorCode::kContract, "no manifest; pass --manifest or set paths.manifest");
  auto m = earkit::datahub::ingest(cfg.paths.manifest);
  std::string dir = prepare_out_dir(cfg);
  uint64_t hash = earkit::config::config_hash(cfg);

  std::map<std::string, std::vector<earkit::datahub::ManifestRecord>> by_kind;
  for (const auto& r : m.records) by_kind[r.task.source_dataset].push_back(r);
  for (const auto& [kind, recs] : by_kind) {
    if (earkit::suite::metric_for(kind) == earkit::metrics::Kind::kWER) {
      std::cout << "skipped," << kind << ",transcription tasks have no embedding form\n";
      continue;
    }
    auto set = earkit::suite::extract_clip_embeddings(net, recs, m.root, ck_cfg.frontend,
                                                      kind, hash);
    std::string path = dir + "/" + kind + ".emb";
    earkit::evalkit::write_embeddings(path, set);
    std::cout << "written," << path << "," << set.records.size() << "\n";
  }
  std::cout << "config_hash," << hex16(hash) << "\n";
  return 0;
}

struct EvalFlags {
  std::string checkpoint;
  std::vector<std::string> embeddings;
  std::string protocol = "both";
  std::vector<uint64_t> seeds;
  int knn_k = 0;
  int64_t bootstrap_B = -1;
  std::string metric = "Acc";
};

int cmd_eval(const ConfigFlags& cf, const EvalFlags& fl) {
  auto cfg = load_run_config(cf);
  if (!fl.seeds.empty()) cfg.eval.seeds = fl.seeds;
  if (fl.knn_k > 0) cfg.eval.knn_k = fl.knn_k;
  if (fl.bootstrap_B >= 0) cfg.eval.bootstrap_B = fl.bootstrap_B;
  if (fl.checkpoint.empty() == fl.embeddings.empty())
    throw Error(ErrorCode::kContract, "pass exactly one of --checkpoint or --embeddings");

  earkit::suite::SuiteBundle bundle;
  std::deque<earkit::evalkit::EmbeddingSet> loaded;
  std::vector<earkit::evalkit::TaskEntry> entries;

  if (!fl.checkpoint.empty()) {
    earkit::config::RunConfig ck_cfg;
    auto net = load_model(fl.checkpoint, &ck_cfg);
    if (cfg.paths.manifest.empty())
      throw Error(ErrorCode::kContract,
                  "no manifest; pass --manifest or set paths.manifest");
    auto m = earkit::datahub::ingest(cfg.paths.manifest);
    earkit::instruct::Tokenizer vocab;
    bundle = earkit::suite::build_suite(net, m.records, m.root, ck_cfg.frontend, vocab,
                                        0, cfg.eval.decode_max_new,
                                        earkit::config::config_hash(cfg));
    entries = bundle.entries();
  } else {
    auto metric = earkit::metrics::parse_kind(fl.metric);
    if (metric == earkit::metrics::Kind::kWER)
      throw Error(ErrorCode::kContract,
                  "embedding files carry no transcriptions; evaluate WER from a checkpoint");
    for (const auto& path : fl.embeddings) {
      loaded.push_back(earkit::evalkit::read_embeddings(path));
      const auto& set = loaded.back();
      double evals = 0.0;
      for (const auto& r : set.records) evals += r.split == "eval" ? 1.0 : 0.0;
      if (evals == 0.0)
        throw Error(ErrorCode::kMissingTaskData, "no eval records in " + path);
      earkit::evalkit::TaskEntry e;
      e.spec.name = fs::path(path).stem().string();
      e.spec.granularity = set.granularity;
      e.spec.metric = metric;
      e.spec.weight = evals;
      for (int32_t c = 0; c < set.label_space; ++c)
        e.spec.classes.push_back("c" + std::to_string(c));
      e.embeddings = &set;
      entries.push_back(std::move(e));
    }
  }

  std::string dir = prepare_out_dir(cfg);
  for (auto protocol : protocols_from(fl.protocol)) {
    auto pc = earkit::config::protocol_config(cfg, protocol);
    auto report = earkit::evalkit::run_protocol(entries, pc);
    bool any_included = false;
    for (const auto& row : report.rows) any_included = any_included || row.included;
    if (!any_included)
      throw Error(ErrorCode::kMissingTaskData, "no task produced a score");
    std::string tag = earkit::evalkit::protocol_name(protocol);
    write_text(dir + "/report_" + tag + ".csv", earkit::evalkit::report_csv(report));
    write_text(dir + "/report_" + tag + ".txt", earkit::evalkit::report_table(report));
    std::cout << earkit::evalkit::report_table(report);
  }
  return 0;
}

int cmd_score(const std::string& table, bool percent) {
  std::vector<earkit::metrics::WeightedScore> scores;
  for (const auto& row : read_csv_rows(table)) {
    if (row.size() < 3) throw Error(ErrorCode::kContract, "score rows need task,normalized,weight");
    double value = 0.0, weight = 0.0;
    if (!to_double(row[1], &value) || !to_double(row[2], &weight)) continue;  // header
    if (percent) value /= 100.0;
    if (value < 0.0 || value > 1.0)
      throw Error(ErrorCode::kContract, "normalized score outside [0,1]: " + row[1]);
    scores.push_back({value, weight});
  }
  if (scores.empty()) throw Error(ErrorCode::kEmptyInput, "no score rows in " + table);
  double total = 0.0;
  for (const auto& s : scores) total += s.weight;
  std::cout << "S," << fixed6(earkit::metrics::weighted_average(scores)) << "\n";
  std::cout << "tasks," << scores.size() << "\n";
  std::cout << "total_weight," << fixed6(total) << "\n";
  return 0;
}

int cmd_bootstrap(const std::string& scores_path, int64_t B, double level, uint64_t seed) {
  std::map<std::string, std::vector<double>> by_seed;
  for (const auto& row : read_csv_rows(scores_path)) {
    if (row.size() < 2) throw Error(ErrorCode::kContract, "bootstrap rows need seed,value");
    double value = 0.0;
    if (!to_double(row[1], &value)) continue;  // header
    by_seed[row[0]].push_back(value);
  }
  if (by_seed.empty()) throw Error(ErrorCode::kEmptyInput, "no rows in " + scores_path);
  std::vector<std::vector<double>> per_seed;
  for (const auto& [name, values] : by_seed) per_seed.push_back(values);
  auto r = earkit::metrics::bootstrap_ci(per_seed, B, level, seed);
  std::cout << "mean," << fixed6(r.mean) << "\n";
  std::cout << "deviation," << fixed6(r.deviation) << "\n";
  std::cout << "lo," << fixed6(r.lo) << "\n";
  std::cout << "hi," << fixed6(r.hi) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic audio instruction training and representation evaluation"};
  app.require_subcommand(1);

  SynthFlags synth_fl;
  auto* synth = app.add_subcommand("synth", "generate a synthetic task dataset");
  synth->add_option("--kind", synth_fl.kind, "task kind")->required();
  synth->add_option("--classes", synth_fl.classes, "number of classes");
  synth->add_option("--n", synth_fl.count, "number of clips");
  synth->add_option("--seed", synth_fl.seed, "generation seed");
  synth->add_option("--clip-seconds", synth_fl.clip_seconds, "clip length in seconds");
  synth->add_option("--snr-db", synth_fl.snr_db, "signal-to-noise ratio in dB");
  synth->add_option("--sample-rate", synth_fl.sample_rate, "sample rate in Hz");
  synth->add_option("--eval-fraction", synth_fl.eval_fraction,
                    "stratified eval share (0 keeps everything in train)");
  synth->add_option("--split-seed", synth_fl.split_seed, "split seed");
  synth->add_option("--out", synth_fl.out, "output directory (default data/<kind>)");

  std::string ingest_manifest, ingest_rejects;
  auto* ingest = app.add_subcommand("ingest", "validate a manifest, report rejects");
  ingest->add_option("--manifest", ingest_manifest, "manifest path")->required();
  ingest->add_option("--rejects", ingest_rejects, "write a rejects CSV here");

  std::string dedup_manifest, dedup_out, dedup_report;
  auto* dedup = app.add_subcommand("dedup", "drop duplicate clips from a manifest");
  dedup->add_option("--manifest", dedup_manifest, "manifest path")->required();
  dedup->add_option("--out", dedup_out, "write the kept manifest here");
  dedup->add_option("--report", dedup_report, "write a removal report CSV here");

  ConfigFlags train_cf;
  std::string train_freeze;
  auto* train = app.add_subcommand("train", "train encoder and adapter on a manifest");
  add_config_flags(train, &train_cf);
  train->add_option("--freeze-decoder", train_freeze,
                    "true/false, overrides train.freeze_decoder");

  ConfigFlags embed_cf;
  std::string embed_checkpoint;
  auto* embed = app.add_subcommand("embed", "write clip embedding files per task");
  add_config_flags(embed, &embed_cf);
  embed->add_option("--checkpoint", embed_checkpoint, "model checkpoint")->required();

  ConfigFlags eval_cf;
  EvalFlags eval_fl;
  auto* eval = app.add_subcommand("eval", "score representations over the task suite");
  add_config_flags(eval, &eval_cf);
  eval->add_option("--checkpoint", eval_fl.checkpoint, "model checkpoint to embed with");
  eval->add_option("--embeddings", eval_fl.embeddings,
                   "embedding files to score directly (bypasses the model)")
      ->delimiter(',');
  eval->add_option("--protocol", eval_fl.protocol, "mlp, knn, or both");
  eval->add_option("--seeds", eval_fl.seeds, "evaluation seeds")->delimiter(',');
  eval->add_option("--k", eval_fl.knn_k, "neighbor count for the knn protocol");
  eval->add_option("--bootstrap", eval_fl.bootstrap_B,
                   "bootstrap replicate count (0 disables)");
  eval->add_option("--metric", eval_fl.metric,
                   "metric for --embeddings mode: Acc, mAP, SegF1, Recall@1");

  std::string score_table;
  bool score_percent = false;
  auto* score = app.add_subcommand("score", "aggregate per-task scores into S");
  score->add_option("--table", score_table, "CSV of task,normalized,weight")->required();
  score->add_flag("--percent", score_percent, "scores are percentages, divide by 100");

  std::string boot_scores;
  int64_t boot_B = 1000;
  double boot_level = 0.95;
  uint64_t boot_seed = 0x626f6f74;
  auto* boot = app.add_subcommand("bootstrap", "hierarchical CI from seed,value rows");
  boot->add_option("--scores", boot_scores, "CSV of seed,value rows")->required();
  boot->add_option("--B", boot_B, "replicate count");
  boot->add_option("--level", boot_level, "confidence level");
  boot->add_option("--seed", boot_seed, "resampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_fl);
    if (ingest->parsed()) return cmd_ingest(ingest_manifest, ingest_rejects);
    if (dedup->parsed()) return cmd_dedup(dedup_manifest, dedup_out, dedup_report);
    if (train->parsed()) return cmd_train(train_cf, train_freeze);
    if (embed->parsed()) return cmd_embed(embed_cf, embed_checkpoint);
    if (eval->parsed()) return cmd_eval(eval_cf, eval_fl);
    if (score->parsed()) return cmd_score(score_table, score_percent);
    if (boot->parsed()) return cmd_bootstrap(boot_scores, boot_B, boot_level, boot_seed);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return exit_code_for(err.code());
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 2;
}
