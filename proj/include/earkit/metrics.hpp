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

// Task metrics, score normalization, weighted aggregation, and the
// hierarchical bootstrap. Everything here is pure arithmetic over plain
// vectors; no model or file state is involved.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "earkit/common.hpp"
#include "earkit/rng.hpp"

namespace earkit::metrics {

// ---------------------------------------------------------------- metric kinds

enum class Kind { kAcc, kMAP, kSegF1, kRecallAt1, kWER };

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::kAcc: return "Acc";
    case Kind::kMAP: return "mAP";
    case Kind::kSegF1: return "SegF1";
    case Kind::kRecallAt1: return "Recall@1";
    case Kind::kWER: return "WER";
  }
  throw Error(ErrorCode::kContract, "unhandled metric kind");
}

inline Kind parse_kind(const std::string& s) {
  if (s == "Acc") return Kind::kAcc;
  if (s == "mAP") return Kind::kMAP;
  if (s == "SegF1") return Kind::kSegF1;
  if (s == "Recall@1") return Kind::kRecallAt1;
  if (s == "WER") return Kind::kWER;
  throw Error(ErrorCode::kContract, "unknown metric kind: " + s);
}

// ---------------------------------------------------------------- accuracy

/// Exact-match rate over aligned predictions and references.
inline double accuracy(const std::vector<int>& pred, const std::vector<int>& ref) {
  if (pred.size() != ref.size())
    throw Error(ErrorCode::kShapeMismatch, "prediction/reference length mismatch");
  if (pred.empty()) throw Error(ErrorCode::kEmptyInput, "no examples to score");
  size_t hits = 0;
  for (size_t i = 0; i < pred.size(); ++i) hits += pred[i] == ref[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------- average precision

/// Average precision for one class: instances ranked by descending score
/// (ties broken by ascending index, which keeps the value deterministic),
/// precision recorded at each positive's rank, averaged over positives.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<uint8_t>& relevant) {
  if (scores.size() != relevant.size())
    throw Error(ErrorCode::kShapeMismatch, "score/relevance length mismatch");
  if (scores.empty()) throw Error(ErrorCode::kEmptyInput, "no instances to rank");
  size_t positives = 0;
  for (uint8_t r : relevant) positives += r ? 1 : 0;
  if (positives == 0)
    throw Error(ErrorCode::kDegenerateTask, "no positive instances for this class");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  double sum = 0.0;
  size_t seen = 0;
  for (size_t rank = 0; rank < order.size(); ++rank) {
    if (!relevant[order[rank]]) continue;
    ++seen;
    sum += static_cast<double>(seen) / static_cast<double>(rank + 1);
  }
  return sum / static_cast<double>(positives);
}

/// Macro mAP: mean AP over classes that have at least one positive. scores
/// and labels are row-major [n x classes]; labels are 0/1 indicators.
inline double mean_average_precision(const std::vector<double>& scores,
                                     const std::vector<uint8_t>& labels, int n,
                                     int classes) {
  if (n < 1 || classes < 1) throw Error(ErrorCode::kEmptyInput, "no instances to rank");
  if (scores.size() != static_cast<size_t>(n) * classes ||
      labels.size() != static_cast<size_t>(n) * classes)
    throw Error(ErrorCode::kShapeMismatch, "score/label matrix shape");
  double sum = 0.0;
  int scored = 0;
  for (int c = 0; c < classes; ++c) {
    std::vector<double> s(n);
    std::vector<uint8_t> r(n);
    bool any = false;
    for (int i = 0; i < n; ++i) {
      s[i] = scores[static_cast<size_t>(i) * classes + c];
      r[i] = labels[static_cast<size_t>(i) * classes + c];
      any = any || r[i];
    }
    if (!any) continue;  // AP is undefined without positives; skip the class
    sum += average_precision(s, r);
    ++scored;
  }
  if (scored == 0)
    throw Error(ErrorCode::kDegenerateTask, "no class has a positive instance");
  return sum / scored;
}

// ---------------------------------------------------------------- word error rate

namespace detail {

inline std::vector<std::string> words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

/// Levenshtein distance over word sequences, two-row dynamic program.
inline int64_t word_edit_distance(const std::vector<std::string>& a,
                                  const std::vector<std::string>& b) {
  std::vector<int64_t> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= b.size(); ++j) {
      int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

/// Word-level edit distance divided by reference word count.
inline double word_error_rate(const std::string& hypothesis, const std::string& reference) {
  auto ref = detail::words(reference);
  if (ref.empty()) throw Error(ErrorCode::kEmptyInput, "empty reference for WER");
  auto hyp = detail::words(hypothesis);
  return static_cast<double>(detail::word_edit_distance(hyp, ref)) /
         static_cast<double>(ref.size());
}

/// Corpus WER: total edit distance over total reference words, so long
/// references weigh more than short ones.
inline double corpus_wer(const std::vector<std::pair<std::string, std::string>>& hyp_ref) {
  if (hyp_ref.empty()) throw Error(ErrorCode::kEmptyInput, "no pairs to score");
  int64_t dist = 0, words = 0;
  for (const auto& [hyp, ref] : hyp_ref) {
    auto r = detail::words(ref);
    if (r.empty()) throw Error(ErrorCode::kEmptyInput, "empty reference for WER");
    dist += detail::word_edit_distance(detail::words(hyp), r);
    words += static_cast<int64_t>(r.size());
  }
  return static_cast<double>(dist) / static_cast<double>(words);
}

// ---------------------------------------------------------------- segment F1

/// Micro-averaged F1 over fixed-length segments and classes. pred and label
/// are row-major [frames x classes] 0/1 indicators; a segment is positive
/// for a class iff any of its frames is. An all-negative task with an
/// all-negative prediction counts as perfect.
inline double segment_f1(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& label,
                         int frames, int classes, int frames_per_segment) {
  if (frames < 1 || classes < 1) throw Error(ErrorCode::kEmptyInput, "no frames to score");
  if (frames_per_segment < 1)
    throw Error(ErrorCode::kContract, "segment length must be positive");
  if (pred.size() != static_cast<size_t>(frames) * classes ||
      label.size() != static_cast<size_t>(frames) * classes)
    throw Error(ErrorCode::kShapeMismatch, "prediction/label matrix shape");
  int64_t tp = 0, fp = 0, fn = 0;
  for (int begin = 0; begin < frames; begin += frames_per_segment) {
    int end = std::min(begin + frames_per_segment, frames);
    for (int c = 0; c < classes; ++c) {
      bool p = false, l = false;
      for (int t = begin; t < end; ++t) {
        p = p || pred[static_cast<size_t>(t) * classes + c];
        l = l || label[static_cast<size_t>(t) * classes + c];
      }
      tp += p && l ? 1 : 0;
      fp += p && !l ? 1 : 0;
      fn += !p && l ? 1 : 0;
    }
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

// ---------------------------------------------------------------- normalization

/// Maps a raw metric to [0, 1] where larger is better. Ratio metrics pass
/// through; WER inverts and clamps at zero.
inline double normalize(double raw, Kind kind) {
  if (!std::isfinite(raw)) throw Error(ErrorCode::kContract, "non-finite raw metric");
  switch (kind) {
    case Kind::kAcc:
    case Kind::kMAP:
    case Kind::kSegF1:
    case Kind::kRecallAt1:
      if (raw < 0.0 || raw > 1.0)
        throw Error(ErrorCode::kContract, "ratio metric outside [0, 1]");
      return raw;
    case Kind::kWER:
      if (raw < 0.0) throw Error(ErrorCode::kContract, "negative WER");
      return std::max(1.0 - raw, 0.0);
  }
  throw Error(ErrorCode::kContract, "unhandled metric kind");
}

// ---------------------------------------------------------------- aggregation

struct WeightedScore {
  double value = 0.0;
  double weight = 0.0;
};

/// Exact weighted mean. Weights are test-example counts, so they must be
/// positive and sum to something nonzero.
inline double weighted_average(const std::vector<WeightedScore>& scores) {
  if (scores.empty()) throw Error(ErrorCode::kContract, "no scores to aggregate");
  double num = 0.0, den = 0.0;
  for (const auto& s : scores) {
    if (!(s.weight > 0.0)) throw Error(ErrorCode::kContract, "non-positive task weight");
    num += s.value * s.weight;
    den += s.weight;
  }
  return num / den;
}

// ---------------------------------------------------------------- bootstrap

struct BootstrapResult {
  double mean = 0.0;       // mean of per-seed means
  double deviation = 0.0;  // max |mean - CI endpoint|
  double lo = 0.0;
  double hi = 0.0;
};

namespace detail {

/// One hierarchical replicate: seeds drawn with replacement, then examples
/// drawn with replacement within each drawn seed; the replicate is the mean
/// of the drawn seeds' resampled means.
inline double resample_mean(const std::vector<std::vector<double>>& per_seed, Rng* rng) {
  size_t seeds = per_seed.size();
  double sum = 0.0;
  for (size_t s = 0; s < seeds; ++s) {
    const auto& arr = per_seed[static_cast<size_t>(rng->uniform_int(
        static_cast<int64_t>(seeds)))];
    double inner = 0.0;
    for (size_t i = 0; i < arr.size(); ++i)
      inner += arr[static_cast<size_t>(rng->uniform_int(static_cast<int64_t>(arr.size())))];
    sum += inner / static_cast<double>(arr.size());
  }
  return sum / static_cast<double>(seeds);
}

/// Percentile interval of sorted replicates by the nearest-rank rule.
inline std::pair<double, double> percentile_interval(std::vector<double>* replicates,
                                                     double level) {
  std::sort(replicates->begin(), replicates->end());
  auto rank = [&](double q) {
    auto n = static_cast<double>(replicates->size());
    auto r = static_cast<int64_t>(std::ceil(q * n));
    r = std::clamp<int64_t>(r, 1, static_cast<int64_t>(replicates->size()));
    return (*replicates)[static_cast<size_t>(r - 1)];
  };
  double alpha = 1.0 - level;
  return {rank(alpha / 2.0), rank(1.0 - alpha / 2.0)};
}

}  // namespace detail

/// Hierarchical bootstrap over (seed, example) score arrays. Returns the
/// point mean together with the largest absolute deviation of the percentile
/// interval's endpoints from it.
inline BootstrapResult bootstrap_ci(const std::vector<std::vector<double>>& per_seed,
                                    int64_t B, double level, uint64_t seed) {
  if (per_seed.empty()) throw Error(ErrorCode::kEmptyInput, "no seed arrays");
  for (const auto& arr : per_seed)
    if (arr.size() < 2)
      throw Error(ErrorCode::kDegenerateTask,
                  "bootstrap needs at least two examples per seed");
  if (B < 1000) throw Error(ErrorCode::kContract, "bootstrap needs B >= 1000");
  if (!(level > 0.0 && level < 1.0))
    throw Error(ErrorCode::kContract, "confidence level outside (0, 1)");

  BootstrapResult out;
  for (const auto& arr : per_seed) {
    double m = 0.0;
    for (double x : arr) m += x;
    out.mean += m / static_cast<double>(arr.size());
  }
  out.mean /= static_cast<double>(per_seed.size());

  Rng rng(seed);
  std::vector<double> replicates(static_cast<size_t>(B));
  for (auto& r : replicates) r = detail::resample_mean(per_seed, &rng);
  auto [lo, hi] = detail::percentile_interval(&replicates, level);
  out.lo = lo;
  out.hi = hi;
  out.deviation = std::max(std::abs(out.mean - lo), std::abs(hi - out.mean));
  return out;
}

}  // namespace earkit::metrics
