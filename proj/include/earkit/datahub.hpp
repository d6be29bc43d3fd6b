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

// Dataset plumbing: line-delimited manifest ingestion with schema validation,
// two-stage de-duplication (exact byte hash, then a gain-invariant per-second
// dominant-Mel-bin fingerprint), stratified train/eval splitting, and four
// synthetic desk-scale task generators whose labels a signal-processing
// oracle can recover directly from the audio.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "earkit/audio.hpp"
#include "earkit/common.hpp"
#include "earkit/instruct.hpp"
#include "earkit/rng.hpp"

namespace earkit::datahub {

// ---------------------------------------------------------------------------
// Manifest records.
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string id;              // unique within its dataset
  std::string clip;            // WAV path, relative to the manifest directory
  instruct::RawTask task;      // task fields; task.source_dataset names the set
};

struct Reject {
  size_t line = 0;             // 1-based manifest line number
  std::string reason;
  std::string id;              // present when the line parsed far enough
};

struct Manifest {
  std::vector<ManifestRecord> records;
  std::vector<Reject> rejects;
  std::string root;            // directory clip paths are resolved against
};

inline std::string resolve_clip(const std::string& root, const std::string& clip) {
  std::filesystem::path p(clip);
  if (p.is_absolute() || root.empty()) return clip;
  return (std::filesystem::path(root) / p).string();
}

inline nlohmann::json record_to_json(const ManifestRecord& rec) {
  nlohmann::json j;
  j["id"] = rec.id;
  j["dataset"] = rec.task.source_dataset;
  j["clip"] = rec.clip;
  j["task_type"] = rec.task.task_type;
  j["audio_language"] = rec.task.audio_language;
  j["text_language"] = rec.task.text_language;
  j["timestamps"] = rec.task.timestamps;
  j["output_constraint"] = rec.task.output_constraint;
  j["labels"] = rec.task.labels;
  j["answer"] = rec.task.answer_text;
  j["question"] = rec.task.question;
  j["split"] = rec.task.split;
  return j;
}

inline void write_manifest(const std::vector<ManifestRecord>& records,
                           const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write manifest " + path);
  for (const auto& rec : records) out << record_to_json(rec).dump() << "\n";
  if (!out) throw Error(ErrorCode::kIo, "short write on manifest " + path);
}

namespace detail {

// Parses and schema-checks one manifest line. Returns false with a reason
// instead of throwing so the caller can keep a rejects report.
inline bool parse_record(const std::string& line, ManifestRecord* rec,
                         std::string* reason, std::string* id_out) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    *reason = "parse-error";
    return false;
  }
  auto str = [&](const char* key, const std::string& dflt) {
    return j.contains(key) && j[key].is_string() ? j[key].get<std::string>() : dflt;
  };
  rec->id = str("id", "");
  *id_out = rec->id;
  rec->task.source_dataset = str("dataset", "");
  rec->clip = str("clip", "");
  rec->task.clip_ref = rec->clip;
  rec->task.task_type = str("task_type", "");
  rec->task.audio_language = str("audio_language", "en");
  rec->task.text_language = str("text_language", "en");
  rec->task.timestamps =
      j.contains("timestamps") && j["timestamps"].is_boolean() && j["timestamps"].get<bool>();
  rec->task.output_constraint = str("output_constraint", "");
  rec->task.answer_text = str("answer", "");
  rec->task.question = str("question", "");
  rec->task.split = str("split", "train");
  rec->task.labels.clear();
  if (j.contains("labels")) {
    if (!j["labels"].is_array()) {
      *reason = "bad-field:labels";
      return false;
    }
    for (const auto& l : j["labels"]) {
      if (!l.is_string()) {
        *reason = "bad-field:labels";
        return false;
      }
      rec->task.labels.push_back(l.get<std::string>());
    }
  }

  if (rec->id.empty()) { *reason = "missing-field:id"; return false; }
  if (rec->task.source_dataset.empty()) { *reason = "missing-field:dataset"; return false; }
  if (rec->clip.empty()) { *reason = "missing-field:clip"; return false; }
  if (!instruct::supported_tasks().count(rec->task.task_type)) {
    *reason = "unknown-task";
    return false;
  }
  if (rec->task.split != "train" && rec->task.split != "eval") {
    *reason = "bad-split";
    return false;
  }
  if (rec->task.task_type == "tag") {
    if (rec->task.labels.empty()) { *reason = "missing-field:labels"; return false; }
  } else if (rec->task.answer_text.empty()) {
    *reason = "missing-field:answer";
    return false;
  }
  if (rec->task.task_type == "qa" && rec->task.question.empty()) {
    *reason = "missing-field:question";
    return false;
  }
  return true;
}

}  // namespace detail

// Reads a line-delimited manifest. Malformed lines land in the rejects list
// with a reason; more than 10% malformed aborts the ingestion. Duplicate
// (dataset, id) pairs are rejected but do not count toward the malformed
// fraction, which tracks parse and schema failures only.
inline Manifest ingest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read manifest " + path);
  Manifest out;
  out.root = std::filesystem::path(path).parent_path().string();

  std::string line;
  size_t line_no = 0;
  size_t total = 0;
  size_t malformed = 0;
  std::set<std::pair<std::string, std::string>> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++total;
    ManifestRecord rec;
    std::string reason, id;
    if (!detail::parse_record(line, &rec, &reason, &id)) {
      ++malformed;
      out.rejects.push_back({line_no, reason, id});
      continue;
    }
    auto key = std::make_pair(rec.task.source_dataset, rec.id);
    if (!seen.insert(key).second) {
      out.rejects.push_back({line_no, "duplicate-id", rec.id});
      continue;
    }
    out.records.push_back(std::move(rec));
  }
  if (total == 0) throw Error(ErrorCode::kEmptyInput, "manifest " + path + " has no records");
  if (static_cast<double>(malformed) > 0.10 * static_cast<double>(total)) {
    std::ostringstream msg;
    msg << "ingestion aborted: " << malformed << " of " << total
        << " lines malformed (limit 10%)";
    size_t shown = 0;
    for (const auto& r : out.rejects) {
      if (r.reason == "duplicate-id") continue;
      if (++shown > 10) { msg << "; ..."; break; }
      msg << "; line " << r.line << ": " << r.reason;
    }
    throw Error(ErrorCode::kIngestAbort, msg.str());
  }
  return out;
}

inline void write_rejects_report(const std::vector<Reject>& rejects,
                                 const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write rejects report " + path);
  out << "line,reason,id\n";
  for (const auto& r : rejects) out << r.line << "," << r.reason << "," << r.id << "\n";
}

// ---------------------------------------------------------------------------
// De-duplication.
// ---------------------------------------------------------------------------

struct RemovedPair {
  std::string kept_id;
  std::string removed_id;
  std::string stage;           // "bytes" or "fingerprint"
};

struct DedupResult {
  std::vector<ManifestRecord> kept;
  std::vector<RemovedPair> removed;
  std::vector<std::string> quarantined;  // ids whose audio could not be read
};

// Per-second dominant Mel bin, computed on linear Mel energies so a uniform
// gain change cannot move the argmax.
inline std::vector<int> spectral_fingerprint(const audio::Waveform& wave,
                                             const audio::FrontendConfig& cfg = {}) {
  audio::FeatureTensor feat = audio::mel_energies(wave, cfg);
  int seconds = static_cast<int>(wave.samples.size() / static_cast<size_t>(wave.sample_rate));
  if (seconds < 1) seconds = 1;
  int frames_per_second = wave.sample_rate / cfg.hop;
  std::vector<int> fp(seconds, 0);
  for (int s = 0; s < seconds; ++s) {
    int begin = s * frames_per_second;
    int end = std::min(feat.frames, (s + 1) * frames_per_second);
    if (begin >= feat.frames) { fp[s] = fp[s - 1]; continue; }
    int best = 0;
    double best_e = -1.0;
    for (int m = 0; m < feat.bins; ++m) {
      double e = 0.0;
      for (int f = begin; f < end; ++f) e += feat.at(f, m);
      if (e > best_e) { best_e = e; best = m; }
    }
    fp[s] = best;
  }
  return fp;
}

// Stage 1 removes exact byte duplicates (hash plus byte confirmation).
// Stage 2 removes survivors whose fingerprints match exactly. Each duplicate
// group keeps its first member in input order, so no group ever loses all of
// its members. Unreadable or undecodable clips are quarantined, not deleted.
inline DedupResult dedup(const std::vector<ManifestRecord>& records,
                         const std::string& root) {
  DedupResult out;
  struct Loaded {
    const ManifestRecord* rec;
    uint64_t byte_hash;
    std::vector<uint8_t> bytes;
  };
  std::vector<Loaded> loaded;
  for (const auto& rec : records) {
    std::ifstream in(resolve_clip(root, rec.clip), std::ios::binary);
    if (!in) { out.quarantined.push_back(rec.id); continue; }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    if (bytes.empty()) { out.quarantined.push_back(rec.id); continue; }
    uint64_t h = fnv1a64(bytes.data(), bytes.size());
    loaded.push_back({&rec, h, std::move(bytes)});
  }

  // Stage 1: first record with a given byte content survives.
  std::map<uint64_t, std::vector<size_t>> by_hash;
  for (size_t i = 0; i < loaded.size(); ++i) by_hash[loaded[i].byte_hash].push_back(i);
  std::vector<bool> removed(loaded.size(), false);
  for (auto& [h, group] : by_hash) {
    for (size_t a = 0; a < group.size(); ++a) {
      if (removed[group[a]]) continue;
      for (size_t b = a + 1; b < group.size(); ++b) {
        if (removed[group[b]]) continue;
        if (loaded[group[a]].bytes == loaded[group[b]].bytes) {
          removed[group[b]] = true;
          out.removed.push_back({loaded[group[a]].rec->id, loaded[group[b]].rec->id, "bytes"});
        }
      }
    }
  }

  // Stage 2: fingerprint match among byte-distinct survivors.
  std::map<std::vector<int>, size_t> by_fp;
  for (size_t i = 0; i < loaded.size(); ++i) {
    if (removed[i]) continue;
    audio::Waveform wave;
    try {
      wave = audio::wav_decode(loaded[i].bytes);
      auto fp = spectral_fingerprint(wave);
      auto [it, fresh] = by_fp.emplace(std::move(fp), i);
      if (!fresh) {
        removed[i] = true;
        out.removed.push_back(
            {loaded[it->second].rec->id, loaded[i].rec->id, "fingerprint"});
      }
    } catch (const Error&) {
      removed[i] = true;  // not kept, but reported as quarantined below
      out.quarantined.push_back(loaded[i].rec->id);
    }
  }
  for (size_t i = 0; i < loaded.size(); ++i)
    if (!removed[i]) out.kept.push_back(*loaded[i].rec);
  return out;
}

inline void write_dedup_report(const DedupResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write dedup report " + path);
  out << "kept_id,removed_id,stage\n";
  for (const auto& p : result.removed)
    out << p.kept_id << "," << p.removed_id << "," << p.stage << "\n";
  for (const auto& q : result.quarantined) out << "," << q << ",quarantined\n";
}

// ---------------------------------------------------------------------------
// Synthetic task generation.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::string kind;            // tone-tag | tone-seq-transcribe |
                               // pitch-speaker-id | scene-noise-class
  int classes = 4;
  int count = 200;
  double clip_seconds = 1.0;
  uint64_t seed = 0;
  int sample_rate = 16000;
  double snr_db = 25.0;
};

namespace detail {

inline const std::vector<std::string>& tag_class_names() {
  static const std::vector<std::string> kNames = {
      "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"};
  return kNames;
}

inline const std::vector<std::string>& speaker_names() {
  static const std::vector<std::string> kNames = {
      "nova", "orion", "lyra", "vega", "iris", "rhea", "atlas", "juno"};
  return kNames;
}

inline const std::vector<std::string>& scene_class_names() {
  static const std::vector<std::string> kNames = {"rumble", "hum", "hiss", "static"};
  return kNames;
}

inline const std::vector<std::string>& scene_captions() {
  static const std::vector<std::string> kCaptions = {
      "a low steady rumble", "a midrange mechanical hum", "a bright airy hiss",
      "harsh wideband static"};
  return kCaptions;
}

// Tag classes are temporal patterns over six duration-jittered slots, each
// slot holding one of two tones. Every pattern uses each tone exactly three
// times and changes tone exactly three times, so the time-averaged spectrum,
// the clip energy, and the transition count are identical across classes;
// only slot order separates them, and classes come in time-reversed pairs so
// order cannot be summarized away by pooling. No run exceeds two slots, which
// keeps run lengths decodable under the duration jitter.
inline const std::array<std::array<int, 6>, 6>& tag_patterns() {
  static const std::array<std::array<int, 6>, 6> kPatterns = {{
      {1, 1, 0, 1, 0, 0}, {0, 0, 1, 0, 1, 1}, {1, 0, 1, 1, 0, 0},
      {0, 0, 1, 1, 0, 1}, {1, 0, 0, 1, 1, 0}, {0, 1, 1, 0, 0, 1}}};
  return kPatterns;
}
inline double tag_tone_hz(int bit) { return bit ? 1150.0 : 450.0; }
inline double seq_symbol_hz(int sym) { return 500.0 * std::pow(2.0, 0.5 * sym); }

// Speakers are amplitude-modulation rates on a log grid from 2.5 to 10 Hz;
// the carrier pitch is re-rolled per clip, so the average spectrum carries
// no identity and only the modulation rate names the speaker.
inline double speaker_rate_hz(int spk) { return 2.5 * std::pow(4.0, spk / 7.0); }

// Scene band edges in Hz: three narrow timbres plus one wideband class.
inline std::pair<double, double> scene_band(int cls) {
  switch (cls) {
    case 0: return {60.0, 400.0};
    case 1: return {600.0, 1800.0};
    case 2: return {2500.0, 6000.0};
    default: return {200.0, 7600.0};
  }
}

inline double rms(const std::vector<double>& x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc / std::max<size_t>(1, x.size()));
}

// Adds a tone with raised-cosine edges; ramp_s of fade at both ends of the
// [begin, end) sample range avoids clicks that would smear the spectrum.
inline void add_tone(std::vector<double>* x, int sample_rate, double hz, double amp,
                     double phase, size_t begin, size_t end, double ramp_s = 0.01) {
  size_t ramp = static_cast<size_t>(ramp_s * sample_rate);
  size_t n = end - begin;
  if (2 * ramp > n) ramp = n / 2;
  for (size_t i = begin; i < end; ++i) {
    double t = static_cast<double>(i) / sample_rate;
    double env = 1.0;
    size_t off = i - begin;
    if (off < ramp) env = 0.5 - 0.5 * std::cos(M_PI * off / ramp);
    size_t tail = end - 1 - i;
    if (tail < ramp) env = std::min(env, 0.5 - 0.5 * std::cos(M_PI * tail / ramp));
    (*x)[i] += amp * env * std::sin(2.0 * M_PI * hz * t + phase);
  }
}

inline void add_white_noise(std::vector<double>* x, double noise_rms, Rng* rng) {
  for (auto& v : *x) v += noise_rms * rng->normal();
}

inline void fft_inplace(std::vector<std::complex<double>>& a, bool invert) {
  if (invert) {
    for (auto& v : a) v = std::conj(v);
    audio::detail::fft(a);
    double inv = 1.0 / static_cast<double>(a.size());
    for (auto& v : a) v = std::conj(v) * inv;
  } else {
    audio::detail::fft(a);
  }
}

// Band-limited Gaussian noise built in the frequency domain: bins inside
// [lo_hz, hi_hz) get unit-variance complex coefficients, everything else is
// zero, so the band edges are exact.
inline std::vector<double> band_noise(int n, int sample_rate, double lo_hz,
                                      double hi_hz, Rng* rng) {
  size_t m = 1;
  while (m < static_cast<size_t>(n)) m <<= 1;
  std::vector<std::complex<double>> spec(m, {0.0, 0.0});
  double hz_per_bin = static_cast<double>(sample_rate) / static_cast<double>(m);
  for (size_t k = 1; k < m / 2; ++k) {
    double hz = k * hz_per_bin;
    if (hz < lo_hz || hz >= hi_hz) continue;
    std::complex<double> c(rng->normal(), rng->normal());
    spec[k] = c;
    spec[m - k] = std::conj(c);
  }
  fft_inplace(spec, true);
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = spec[i].real();
  double r = rms(out);
  if (r > 0) for (auto& v : out) v /= r;
  return out;
}

inline void check_spec(const SyntheticSpec& spec, int max_classes) {
  if (spec.classes < 2 || spec.classes > max_classes)
    throw Error(ErrorCode::kContract,
                spec.kind + " supports 2.." + std::to_string(max_classes) + " classes");
  if (spec.count <= 0 || spec.count % spec.classes != 0)
    throw Error(ErrorCode::kContract,
                "count must be a positive multiple of classes for exact balance");
  if (spec.clip_seconds < 0.2 || spec.clip_seconds > 10.0)
    throw Error(ErrorCode::kContract, "clip_seconds outside [0.2, 10]");
}

}  // namespace detail

inline std::vector<std::string> synthetic_kinds() {
  return {"tone-tag", "tone-seq-transcribe", "pitch-speaker-id", "scene-noise-class"};
}

// Generates `spec.count` clips under out_dir/wav and returns their manifest
// records (clip paths relative to out_dir). Generation is a pure function of
// the spec: every clip derives its randomness from (seed, kind, index) alone,
// and class i gets exactly count/classes clips via round-robin assignment.
inline std::vector<ManifestRecord> synthesize(const SyntheticSpec& spec,
                                              const std::string& out_dir) {
  bool known = false;
  for (const auto& k : synthetic_kinds()) known = known || k == spec.kind;
  if (!known) throw Error(ErrorCode::kContract, "unknown synthetic kind " + spec.kind);
  int max_classes = spec.kind == "scene-noise-class" ? 4
                    : spec.kind == "tone-tag"        ? 6
                                                     : 8;
  detail::check_spec(spec, max_classes);

  std::filesystem::create_directories(std::filesystem::path(out_dir) / "wav");
  int n = static_cast<int>(std::lround(spec.clip_seconds * spec.sample_rate));
  double noise_rms = 0.1 / std::pow(10.0, spec.snr_db / 20.0);

  std::vector<ManifestRecord> records;
  records.reserve(spec.count);
  for (int i = 0; i < spec.count; ++i) {
    int cls = i % spec.classes;
    Rng rng(fnv1a64(spec.kind + ":" + std::to_string(i)) ^ spec.seed);
    std::vector<double> x(n, 0.0);

    ManifestRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "%s-%04d", spec.kind.c_str(), i);
    rec.id = idbuf;
    rec.clip = std::string("wav/") + idbuf + ".wav";
    rec.task.source_dataset = spec.kind;
    rec.task.clip_ref = rec.clip;

    if (spec.kind == "tone-tag") {
      // Six slots tracing the class pattern, each slot's duration jittered by
      // up to a quarter so absolute position is uninformative. Consecutive
      // same-tone slots render as one continuous tone, so a boundary is
      // audible only where the tone actually changes. Final RMS normalization
      // removes any residual level cue before noise is added.
      const auto& pat = detail::tag_patterns()[cls];
      size_t slots = pat.size();
      std::vector<double> edges(slots + 1, 0.0);
      for (size_t s = 0; s < slots; ++s)
        edges[s + 1] = edges[s] + 1.0 + rng.uniform(-0.25, 0.25);
      size_t s = 0;
      while (s < slots) {
        size_t e = s + 1;
        while (e < slots && pat[e] == pat[s]) ++e;
        auto begin = static_cast<size_t>(edges[s] / edges[slots] * x.size());
        size_t end = e == slots ? x.size()
                                : static_cast<size_t>(edges[e] / edges[slots] * x.size());
        double hz = detail::tag_tone_hz(pat[s]) * (1.0 + rng.uniform(-0.02, 0.02));
        detail::add_tone(&x, spec.sample_rate, hz, 0.1 * std::sqrt(2.0),
                         rng.uniform(0.0, 2.0 * M_PI), begin, end);
        s = e;
      }
      double r = detail::rms(x);
      if (r > 0) for (auto& v : x) v *= 0.1 / r;
      detail::add_white_noise(&x, noise_rms, &rng);
      rec.task.task_type = "tag";
      rec.task.labels = {detail::tag_class_names()[cls]};
    } else if (spec.kind == "tone-seq-transcribe") {
      // Ordered segments, one symbol tone each; the transcript is the
      // space-separated symbol string. The first symbol carries the balance.
      int len = 2 + rng.uniform_int(3);
      std::vector<int> symbols(len);
      symbols[0] = cls;
      for (int s = 1; s < len; ++s) symbols[s] = rng.uniform_int(spec.classes);
      std::string transcript;
      size_t seg = x.size() / len;
      for (int s = 0; s < len; ++s) {
        size_t begin = s * seg;
        size_t end = s + 1 == len ? x.size() : (s + 1) * seg;
        detail::add_tone(&x, spec.sample_rate, detail::seq_symbol_hz(symbols[s]),
                         0.1 * std::sqrt(2.0), rng.uniform(0.0, 2.0 * M_PI), begin, end);
        if (s) transcript += ' ';
        transcript += static_cast<char>('a' + symbols[s]);
      }
      detail::add_white_noise(&x, noise_rms, &rng);
      rec.task.task_type = "transcribe";
      rec.task.answer_text = transcript;
    } else if (spec.kind == "pitch-speaker-id") {
      // Six-harmonic stack with 1/k partials at a per-clip random pitch, then
      // amplitude modulation at the speaker's rate. RMS normalization removes
      // the level cue the modulation phase would otherwise leave.
      double f0 = 140.0 * std::pow(3.0, rng.uniform(0.0, 1.0));
      double rate = detail::speaker_rate_hz(cls) * (1.0 + rng.uniform(-0.02, 0.02));
      double norm = 0.0;
      for (int k = 1; k <= 6; ++k) norm += 1.0 / (k * k);
      for (int k = 1; k <= 6; ++k)
        detail::add_tone(&x, spec.sample_rate, f0 * k,
                         0.1 * std::sqrt(2.0 / norm) / k,
                         rng.uniform(0.0, 2.0 * M_PI), 0, x.size());
      double tremolo_phase = rng.uniform(0.0, 2.0 * M_PI);
      for (size_t j = 0; j < x.size(); ++j) {
        double t = static_cast<double>(j) / spec.sample_rate;
        x[j] *= 1.0 + 0.85 * std::sin(2.0 * M_PI * rate * t + tremolo_phase);
      }
      double r = detail::rms(x);
      if (r > 0) for (auto& v : x) v *= 0.1 / r;
      detail::add_white_noise(&x, noise_rms, &rng);
      rec.task.task_type = "qa";
      rec.task.question = "who is speaking?";
      rec.task.answer_text = detail::speaker_names()[cls];
      rec.task.labels = {detail::speaker_names()[cls]};
    } else {
      // scene-noise-class: exact band-limited noise timbre per class, plus a
      // quiet wideband floor.
      auto [lo, hi] = detail::scene_band(cls);
      auto body = detail::band_noise(n, spec.sample_rate, lo, hi, &rng);
      for (int j = 0; j < n; ++j) x[j] = 0.1 * body[j];
      detail::add_white_noise(&x, noise_rms, &rng);
      rec.task.task_type = "caption";
      rec.task.answer_text = detail::scene_captions()[cls];
      rec.task.labels = {detail::scene_class_names()[cls]};
    }

    audio::Waveform wave;
    wave.sample_rate = spec.sample_rate;
    wave.samples = std::move(x);
    audio::wav_write(resolve_clip(out_dir, rec.clip), wave);
    records.push_back(std::move(rec));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Train/eval splitting.
// ---------------------------------------------------------------------------

struct SplitResult {
  std::vector<ManifestRecord> train;
  std::vector<ManifestRecord> eval;
  std::vector<std::string> warnings;
};

// Stratifies by (dataset, first label) where labels exist; unlabeled records
// form one stratum per dataset. Deterministic in the seed and independent of
// input order within a stratum only up to record identity, so callers get the
// same partition for the same manifest. A single-example stratum cannot give
// both sides a member and goes to train with a warning.
inline SplitResult split(const std::vector<ManifestRecord>& records,
                         double eval_fraction, uint64_t seed) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0))
    throw Error(ErrorCode::kContract, "eval_fraction must lie in (0, 1)");
  std::map<std::string, std::vector<size_t>> strata;
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& t = records[i].task;
    std::string key = t.source_dataset + "\x1f" + (t.labels.empty() ? "" : t.labels[0]);
    strata[key].push_back(i);
  }
  SplitResult out;
  std::vector<char> to_eval(records.size(), 0);
  for (auto& [key, members] : strata) {
    if (members.size() == 1) {
      out.warnings.push_back("stratum '" + key + "' has a single example; kept in train");
      continue;
    }
    Rng rng(seed ^ fnv1a64(key));
    rng.shuffle(members);
    size_t m = members.size();
    auto n_eval = static_cast<size_t>(std::lround(eval_fraction * static_cast<double>(m)));
    n_eval = std::min(n_eval, m - 1);
    n_eval = std::max<size_t>(n_eval, 1);
    for (size_t j = 0; j < n_eval; ++j) to_eval[members[j]] = 1;
  }
  for (size_t i = 0; i < records.size(); ++i) {
    ManifestRecord rec = records[i];
    rec.task.split = to_eval[i] ? "eval" : "train";
    (to_eval[i] ? out.eval : out.train).push_back(std::move(rec));
  }
  return out;
}

}  // namespace earkit::datahub
