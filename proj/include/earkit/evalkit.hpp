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

// Representation evaluation: embedding files, kNN classification in the
// embedding space, shallow MLP probes, and the protocol runner that turns a
// task suite into a weighted score report with bootstrap deviations. This
// header depends only on the tensor core and the metric functions, so it
// works on externally produced embedding files as well as this model's.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "earkit/common.hpp"
#include "earkit/metrics.hpp"
#include "earkit/rng.hpp"
#include "earkit/tensor.hpp"

namespace earkit::evalkit {

// ---------------------------------------------------------------- task suite

enum class Granularity : uint8_t { kClip = 0, kFrame = 1 };

/// One evaluation task: what the embeddings mean and how to score them.
/// weight is the task's test-example count.
struct TaskSpec {
  std::string name;
  Granularity granularity = Granularity::kClip;
  metrics::Kind metric = metrics::Kind::kAcc;
  double weight = 0.0;
  std::vector<std::string> classes;
};

// ---------------------------------------------------------------- embeddings

/// One example's embeddings. Clip records hold one vector (frames == 1);
/// frame records hold a row-major [frames x dim] sequence. labels are class
/// indices (one for single-label tasks, a set for multilabel); frame_labels,
/// when present, is a row-major [frames x label_space] 0/1 matrix; text
/// carries the reference transcript for WER tasks.
struct EmbeddingRecord {
  std::string id;
  std::string split;  // "train" | "eval"
  std::vector<int32_t> labels;
  std::string text;
  int32_t frames = 1;
  std::vector<float> data;
  std::vector<uint8_t> frame_labels;
};

struct EmbeddingSet {
  int32_t dim = 0;
  Granularity granularity = Granularity::kClip;
  int32_t label_space = 0;
  uint64_t config_hash = 0;
  std::vector<EmbeddingRecord> records;
};

inline constexpr char kEmbeddingMagic[8] = {'E', 'A', 'R', 'K', 'E', 'M', 'B', 'D'};
inline constexpr uint32_t kEmbeddingVersion = 1;

namespace detail {

inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline uint32_t take_u32(const std::string& s, size_t& pos) {
  if (pos + 4 > s.size()) throw Error(ErrorCode::kIo, "truncated embedding file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<uint32_t>(static_cast<uint8_t>(s[pos++])) << (8 * i);
  return v;
}
inline uint64_t take_u64(const std::string& s, size_t& pos) {
  if (pos + 8 > s.size()) throw Error(ErrorCode::kIo, "truncated embedding file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<uint64_t>(static_cast<uint8_t>(s[pos++])) << (8 * i);
  return v;
}
inline std::string take_str(const std::string& s, size_t& pos, size_t len) {
  if (pos + len > s.size()) throw Error(ErrorCode::kIo, "truncated embedding file");
  std::string out = s.substr(pos, len);
  pos += len;
  return out;
}

inline uint8_t split_code(const std::string& split) {
  if (split == "train") return 0;
  if (split == "eval") return 1;
  throw Error(ErrorCode::kContract, "split must be train or eval: " + split);
}

}  // namespace detail

inline std::string encode_embeddings(const EmbeddingSet& set) {
  if (set.dim < 1) throw Error(ErrorCode::kContract, "embedding dim must be positive");
  std::string s(kEmbeddingMagic, sizeof kEmbeddingMagic);
  detail::put_u32(s, kEmbeddingVersion);
  detail::put_u64(s, set.config_hash);
  detail::put_u32(s, static_cast<uint32_t>(set.dim));
  s.push_back(static_cast<char>(set.granularity));
  detail::put_u32(s, static_cast<uint32_t>(set.label_space));
  detail::put_u64(s, set.records.size());
  for (const auto& r : set.records) {
    if (r.frames < 1) throw Error(ErrorCode::kContract, "record frames must be positive");
    if (r.data.size() != static_cast<size_t>(r.frames) * set.dim)
      throw Error(ErrorCode::kShapeMismatch, "record data size != frames x dim: " + r.id);
    if (!r.frame_labels.empty() &&
        r.frame_labels.size() != static_cast<size_t>(r.frames) * set.label_space)
      throw Error(ErrorCode::kShapeMismatch, "frame label matrix shape: " + r.id);
    detail::put_u32(s, static_cast<uint32_t>(r.id.size()));
    s += r.id;
    s.push_back(static_cast<char>(detail::split_code(r.split)));
    detail::put_u32(s, static_cast<uint32_t>(r.labels.size()));
    for (int32_t lab : r.labels) detail::put_u32(s, static_cast<uint32_t>(lab));
    detail::put_u32(s, static_cast<uint32_t>(r.text.size()));
    s += r.text;
    detail::put_u32(s, static_cast<uint32_t>(r.frames));
    static_assert(sizeof(float) == 4);
    for (float x : r.data) {
      uint32_t bits;
      std::memcpy(&bits, &x, 4);
      detail::put_u32(s, bits);
    }
    detail::put_u32(s, static_cast<uint32_t>(r.frame_labels.size()));
    for (uint8_t b : r.frame_labels) s.push_back(static_cast<char>(b));
  }
  detail::put_u32(s, crc32(s.data(), s.size()));
  return s;
}

inline EmbeddingSet decode_embeddings(const std::string& s) {
  if (s.size() < sizeof kEmbeddingMagic + 16 ||
      std::memcmp(s.data(), kEmbeddingMagic, sizeof kEmbeddingMagic) != 0)
    throw Error(ErrorCode::kIo, "not an embedding file");
  {
    size_t tail = s.size() - 4;
    uint32_t stored = detail::take_u32(s, tail);
    if (crc32(s.data(), s.size() - 4) != stored)
      throw Error(ErrorCode::kIo, "embedding file checksum mismatch");
  }
  size_t pos = sizeof kEmbeddingMagic;
  uint32_t version = detail::take_u32(s, pos);
  if (version != kEmbeddingVersion)
    throw Error(ErrorCode::kIo, "unsupported embedding file version");
  EmbeddingSet set;
  set.config_hash = detail::take_u64(s, pos);
  set.dim = static_cast<int32_t>(detail::take_u32(s, pos));
  if (pos >= s.size()) throw Error(ErrorCode::kIo, "truncated embedding file");
  set.granularity = static_cast<Granularity>(static_cast<uint8_t>(s[pos++]));
  set.label_space = static_cast<int32_t>(detail::take_u32(s, pos));
  uint64_t count = detail::take_u64(s, pos);
  set.records.resize(count);
  for (auto& r : set.records) {
    r.id = detail::take_str(s, pos, detail::take_u32(s, pos));
    if (pos >= s.size()) throw Error(ErrorCode::kIo, "truncated embedding file");
    r.split = s[pos++] == 0 ? "train" : "eval";
    uint32_t labs = detail::take_u32(s, pos);
    r.labels.resize(labs);
    for (auto& lab : r.labels) lab = static_cast<int32_t>(detail::take_u32(s, pos));
    r.text = detail::take_str(s, pos, detail::take_u32(s, pos));
    r.frames = static_cast<int32_t>(detail::take_u32(s, pos));
    if (r.frames < 1) throw Error(ErrorCode::kIo, "corrupt record frame count");
    r.data.resize(static_cast<size_t>(r.frames) * set.dim);
    for (auto& x : r.data) {
      uint32_t bits = detail::take_u32(s, pos);
      std::memcpy(&x, &bits, 4);
    }
    uint32_t fl = detail::take_u32(s, pos);
    if (fl != 0 && fl != static_cast<uint32_t>(r.frames) * set.label_space)
      throw Error(ErrorCode::kIo, "corrupt frame label block");
    r.frame_labels.resize(fl);
    for (auto& b : r.frame_labels) {
      if (pos >= s.size()) throw Error(ErrorCode::kIo, "truncated embedding file");
      b = static_cast<uint8_t>(s[pos++]);
    }
  }
  return set;
}

inline void write_embeddings(const std::string& path, const EmbeddingSet& set) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::kIo, "cannot open for write: " + tmp);
    auto s = encode_embeddings(set);
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!f) {
      f.close();
      std::remove(tmp.c_str());
      throw Error(ErrorCode::kIo, "short write: " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw Error(ErrorCode::kIo, "cannot move embedding file into place: " + path);
  }
}

inline EmbeddingSet read_embeddings(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::kIo, "cannot open for read: " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_embeddings(s);
}

/// Copy of the records carrying the given split tag, with the set header
/// preserved.
inline EmbeddingSet split_view(const EmbeddingSet& set, const std::string& split) {
  EmbeddingSet out;
  out.dim = set.dim;
  out.granularity = set.granularity;
  out.label_space = set.label_space;
  out.config_hash = set.config_hash;
  for (const auto& r : set.records)
    if (r.split == split) out.records.push_back(r);
  return out;
}

// ---------------------------------------------------------------- kNN

struct KnnResult {
  double raw = 0.0;
  std::vector<int> predictions;  // per test example
  std::vector<double> hits;      // per test example 0/1, for the bootstrap
};

namespace detail {

inline double cosine_distance(const float* a, const float* b, int dim) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < dim; ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  double denom = std::sqrt(na) * std::sqrt(nb);
  if (denom < 1e-30) return 1.0;  // a zero vector is equally far from everything
  return 1.0 - dot / denom;
}

inline int32_t single_label(const EmbeddingRecord& r) {
  if (r.labels.size() != 1)
    throw Error(ErrorCode::kContract, "record is not single-label: " + r.id);
  return r.labels[0];
}

}  // namespace detail

/// Cosine k-nearest-neighbor classification of the test records against the
/// train records. mode kAcc takes the majority label of the k nearest (ties
/// broken toward the smallest class index); mode kRecallAt1 scores whether
/// the single nearest neighbor shares the query's label. Clip granularity
/// only; distance ties break toward the earlier train record, which keeps
/// the result deterministic.
inline KnnResult knn_eval(const EmbeddingSet& train, const EmbeddingSet& test, int k,
                          metrics::Kind mode) {
  if (mode != metrics::Kind::kAcc && mode != metrics::Kind::kRecallAt1)
    throw Error(ErrorCode::kContract, "knn scores Acc or Recall@1 only");
  if (k <= 0) throw Error(ErrorCode::kContract, "k must be positive");
  if (train.granularity != Granularity::kClip || test.granularity != Granularity::kClip)
    throw Error(ErrorCode::kContract, "knn runs on clip embeddings only");
  if (train.records.empty() || test.records.empty())
    throw Error(ErrorCode::kEmptyInput, "empty embedding set");
  if (k > static_cast<int>(train.records.size()))
    throw Error(ErrorCode::kContract, "k exceeds the train set size");
  if (train.dim != test.dim)
    throw Error(ErrorCode::kShapeMismatch, "train/test embedding dims differ");

  int effective_k = mode == metrics::Kind::kRecallAt1 ? 1 : k;
  KnnResult out;
  for (const auto& query : test.records) {
    std::vector<std::pair<double, size_t>> dist;
    dist.reserve(train.records.size());
    for (size_t i = 0; i < train.records.size(); ++i)
      dist.emplace_back(
          detail::cosine_distance(query.data.data(), train.records[i].data.data(),
                                  train.dim),
          i);
    std::partial_sort(dist.begin(), dist.begin() + effective_k, dist.end());
    std::map<int32_t, int> votes;
    for (int n = 0; n < effective_k; ++n)
      votes[detail::single_label(train.records[dist[n].second])] += 1;
    int best_count = 0;
    int32_t winner = 0;
    for (const auto& [label, count] : votes) {
      if (count > best_count) {  // map order makes ties resolve to the smallest label
        best_count = count;
        winner = label;
      }
    }
    out.predictions.push_back(winner);
    out.hits.push_back(winner == detail::single_label(query) ? 1.0 : 0.0);
  }
  double sum = 0.0;
  for (double h : out.hits) sum += h;
  out.raw = sum / static_cast<double>(out.hits.size());
  return out;
}

// ---------------------------------------------------------------- MLP probe

struct ProbeConfig {
  int hidden = 512;
  int max_epochs = 120;
  int patience = 8;         // epochs without held-out improvement before stopping
  int batch_size = 32;
  double lr = 1e-3;
  double val_fraction = 0.1;
  uint64_t seed = 0;
};

/// One-hidden-layer GELU network. multilabel picks per-class sigmoid binary
/// cross-entropy instead of softmax cross-entropy. Inputs are standardized
/// with per-dimension statistics frozen from the probe's own training fold,
/// so the probe is invariant to the scale and offset of the representation.
struct Probe {
  int in_dim = 0;
  int hidden = 0;
  int out_dim = 0;
  bool multilabel = false;
  std::vector<double> mu, sigma;
  std::vector<double> w1, b1, w2, b2;
};

namespace detail {

/// A training instance: one clip, or one frame of a frame-level task.
struct ProbeInstance {
  const float* x = nullptr;
  int32_t label = 0;                  // single-label target
  std::vector<double> targets;        // multilabel 0/1 targets
};

struct ProbeTensors {
  grad::TensorPtr w1, b1, w2, b2;
};

inline ProbeTensors make_probe_tensors(const Probe& p) {
  ProbeTensors t;
  t.w1 = grad::make_tensor({p.in_dim, p.hidden}, p.w1, true);
  t.b1 = grad::make_tensor({p.hidden}, p.b1, true);
  t.w2 = grad::make_tensor({p.hidden, p.out_dim}, p.w2, true);
  t.b2 = grad::make_tensor({p.out_dim}, p.b2, true);
  return t;
}

inline grad::TensorPtr probe_forward(const ProbeTensors& t, const grad::TensorPtr& x,
                                     grad::Tape* tape) {
  auto h = grad::gelu(grad::linear(x, t.w1, t.b1, tape), tape);
  return grad::linear(h, t.w2, t.b2, tape);
}

inline grad::TensorPtr batch_input(const std::vector<ProbeInstance>& inst,
                                   const std::vector<size_t>& picks, const Probe& p) {
  auto x = grad::make_tensor({static_cast<int>(picks.size()), p.in_dim});
  for (size_t r = 0; r < picks.size(); ++r)
    for (int c = 0; c < p.in_dim; ++c)
      x->v[r * p.in_dim + c] = (inst[picks[r]].x[c] - p.mu[c]) / p.sigma[c];
  return x;
}

inline double batch_loss(const ProbeTensors& t, const std::vector<ProbeInstance>& inst,
                         const std::vector<size_t>& picks, const Probe& p, bool multilabel,
                         grad::Tape* tape, grad::TensorPtr* out_loss) {
  auto logits = probe_forward(t, batch_input(inst, picks, p), tape);
  grad::MaskedLoss loss;
  if (multilabel) {
    std::vector<double> targets;
    for (size_t pick : picks)
      targets.insert(targets.end(), inst[pick].targets.begin(), inst[pick].targets.end());
    loss = grad::sigmoid_bce(logits, targets, tape);
  } else {
    std::vector<int> ids;
    for (size_t pick : picks) ids.push_back(inst[pick].label);
    loss = grad::masked_cross_entropy(logits, ids,
                                      std::vector<bool>(picks.size(), true), tape);
  }
  if (out_loss) *out_loss = loss.loss_sum;
  return loss.loss_sum->v[0] / static_cast<double>(loss.count);
}

/// Plain Adam over the four probe tensors; gradients are divided by the
/// batch row count so the step size does not depend on a partial last batch.
struct ProbeAdam {
  std::vector<std::vector<double>> m, v;
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void apply(const ProbeTensors& t, double lr, double grad_scale) {
    std::vector<grad::TensorPtr> params = {t.w1, t.b1, t.w2, t.b2};
    if (m.empty()) {
      for (const auto& p : params) {
        m.emplace_back(p->v.size(), 0.0);
        v.emplace_back(p->v.size(), 0.0);
      }
    }
    ++step;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = *params[pi];
      p.ensure_grad();
      for (size_t i = 0; i < p.v.size(); ++i) {
        double g = p.g[i] * grad_scale;
        m[pi][i] = beta1 * m[pi][i] + (1.0 - beta1) * g;
        v[pi][i] = beta2 * v[pi][i] + (1.0 - beta2) * g * g;
        p.v[i] -= lr * (m[pi][i] / c1) / (std::sqrt(v[pi][i] / c2) + eps);
      }
    }
  }
};

inline std::vector<ProbeInstance> probe_instances(const EmbeddingSet& train,
                                                  const TaskSpec& spec) {
  int classes = static_cast<int>(spec.classes.size());
  if (classes < 2) throw Error(ErrorCode::kDegenerateTask, "task needs >= 2 classes");
  bool multilabel =
      spec.metric == metrics::Kind::kMAP || spec.metric == metrics::Kind::kSegF1;
  std::vector<ProbeInstance> inst;
  for (const auto& r : train.records) {
    if (r.split != "train")
      throw Error(ErrorCode::kContract, "probe training saw a non-train record: " + r.id);
    if (spec.granularity == Granularity::kFrame) {
      if (r.frame_labels.size() != static_cast<size_t>(r.frames) * classes)
        throw Error(ErrorCode::kShapeMismatch, "frame labels missing: " + r.id);
      for (int f = 0; f < r.frames; ++f) {
        ProbeInstance pi;
        pi.x = r.data.data() + static_cast<size_t>(f) * train.dim;
        pi.targets.assign(r.frame_labels.begin() + static_cast<size_t>(f) * classes,
                          r.frame_labels.begin() + static_cast<size_t>(f + 1) * classes);
        inst.push_back(std::move(pi));
      }
    } else if (multilabel) {
      ProbeInstance pi;
      pi.x = r.data.data();
      pi.targets.assign(classes, 0.0);
      for (int32_t lab : r.labels) {
        if (lab < 0 || lab >= classes)
          throw Error(ErrorCode::kContract, "label outside the class space: " + r.id);
        pi.targets[lab] = 1.0;
      }
      inst.push_back(std::move(pi));
    } else {
      ProbeInstance pi;
      pi.x = r.data.data();
      pi.label = single_label(r);
      if (pi.label < 0 || pi.label >= classes)
        throw Error(ErrorCode::kContract, "label outside the class space: " + r.id);
      inst.push_back(std::move(pi));
    }
  }
  return inst;
}

/// Distinct single-label classes, or distinct positive classes for
/// multilabel targets.
inline size_t distinct_classes(const std::vector<ProbeInstance>& inst, bool multilabel) {
  std::set<int32_t> seen;
  for (const auto& i : inst) {
    if (!multilabel) {
      seen.insert(i.label);
    } else {
      for (size_t c = 0; c < i.targets.size(); ++c)
        if (i.targets[c] > 0.5) seen.insert(static_cast<int32_t>(c));
    }
  }
  return seen.size();
}

}  // namespace detail

/// Trains the probe on the train-tagged records, early-stopping on a seeded
/// 10% holdout of them. Test records never enter this function. The same
/// seed reproduces the same parameters bit for bit.
inline Probe train_probe(const EmbeddingSet& train, const TaskSpec& spec,
                         const ProbeConfig& cfg) {
  if (spec.metric == metrics::Kind::kWER)
    throw Error(ErrorCode::kContract, "WER tasks are scored by decoding, not a probe");
  if (cfg.hidden < 1 || cfg.max_epochs < 1 || cfg.batch_size < 1 ||
      !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0))
    throw Error(ErrorCode::kContract, "invalid probe configuration");
  if (train.records.empty()) throw Error(ErrorCode::kEmptyInput, "no training records");

  bool multilabel =
      spec.metric == metrics::Kind::kMAP || spec.metric == metrics::Kind::kSegF1;
  auto inst = detail::probe_instances(train, spec);
  if (detail::distinct_classes(inst, multilabel) < 2)
    throw Error(ErrorCode::kDegenerateTask, "training labels cover a single class");

  Probe p;
  p.in_dim = train.dim;
  p.hidden = cfg.hidden;
  p.out_dim = static_cast<int>(spec.classes.size());
  p.multilabel = multilabel;
  Rng rng(cfg.seed);
  p.w1.resize(static_cast<size_t>(p.in_dim) * p.hidden);
  for (auto& x : p.w1) x = rng.normal() / std::sqrt(static_cast<double>(p.in_dim));
  p.b1.assign(p.hidden, 0.0);
  p.w2.resize(static_cast<size_t>(p.hidden) * p.out_dim);
  for (auto& x : p.w2) x = rng.normal() / std::sqrt(static_cast<double>(p.hidden));
  p.b2.assign(p.out_dim, 0.0);

  std::vector<size_t> order(inst.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  size_t val_n = std::max<size_t>(1, std::llround(cfg.val_fraction * inst.size()));
  if (val_n >= inst.size())
    throw Error(ErrorCode::kEmptyInput, "too few instances for a holdout");
  std::vector<size_t> val(order.begin(), order.begin() + val_n);
  std::vector<size_t> fit(order.begin() + val_n, order.end());

  // Standardization statistics come from the fit fold alone; the floor keeps
  // constant dimensions harmless.
  p.mu.assign(p.in_dim, 0.0);
  p.sigma.assign(p.in_dim, 0.0);
  for (size_t i : fit)
    for (int c = 0; c < p.in_dim; ++c) p.mu[c] += inst[i].x[c];
  for (auto& m : p.mu) m /= static_cast<double>(fit.size());
  for (size_t i : fit)
    for (int c = 0; c < p.in_dim; ++c) {
      double d = inst[i].x[c] - p.mu[c];
      p.sigma[c] += d * d;
    }
  for (auto& s : p.sigma)
    s = std::max(std::sqrt(s / static_cast<double>(fit.size())), 1e-8);

  auto t = detail::make_probe_tensors(p);
  detail::ProbeAdam adam;
  auto copy_out = [&](Probe* dst) {
    dst->w1 = t.w1->v;
    dst->b1 = t.b1->v;
    dst->w2 = t.w2->v;
    dst->b2 = t.b2->v;
  };
  Probe best = p;
  double best_val =
      detail::batch_loss(t, inst, val, p, multilabel, nullptr, nullptr);
  int bad_epochs = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(fit);
    for (size_t begin = 0; begin < fit.size();
         begin += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(begin + static_cast<size_t>(cfg.batch_size), fit.size());
      std::vector<size_t> picks(fit.begin() + begin, fit.begin() + end);
      grad::Tape tape;
      t.w1->zero_grad();
      t.b1->zero_grad();
      t.w2->zero_grad();
      t.b2->zero_grad();
      grad::TensorPtr loss;
      detail::batch_loss(t, inst, picks, p, multilabel, &tape, &loss);
      grad::backward(tape, loss);
      adam.apply(t, cfg.lr, 1.0 / static_cast<double>(picks.size()));
    }
    double val_loss =
        detail::batch_loss(t, inst, val, p, multilabel, nullptr, nullptr);
    if (val_loss < best_val - 1e-9) {
      best_val = val_loss;
      copy_out(&best);
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.patience) {
      break;
    }
  }
  return best;
}

/// Row-major [frames x out_dim] logits for one record.
inline std::vector<double> probe_logits(const Probe& p, const EmbeddingRecord& r,
                                        int dim) {
  if (dim != p.in_dim) throw Error(ErrorCode::kShapeMismatch, "probe input dim");
  auto t = detail::make_probe_tensors(p);
  auto x = grad::make_tensor({r.frames, dim});
  for (size_t i = 0; i < r.data.size(); ++i) {
    size_t c = i % static_cast<size_t>(dim);
    x->v[i] = (r.data[i] - p.mu[c]) / p.sigma[c];
  }
  auto logits = detail::probe_forward(t, x, nullptr);
  return logits->v;
}

// ---------------------------------------------------------------- protocol

enum class Protocol { kMlp, kKnn };

inline const char* protocol_name(Protocol p) {
  return p == Protocol::kMlp ? "mlp" : "knn";
}

/// One task's inputs: the embedding file content, plus decoded (hypothesis,
/// reference) text pairs for WER tasks, which are produced by the decoder
/// rather than by a probe.
struct TaskEntry {
  TaskSpec spec;
  const EmbeddingSet* embeddings = nullptr;
  const std::vector<std::pair<std::string, std::string>>* wer_pairs = nullptr;
};

struct TaskResult {
  std::string task;
  metrics::Kind metric = metrics::Kind::kAcc;
  bool included = false;
  std::string status = "ok";  // "ok", "excluded: ...", or "error: ..."
  double raw = 0.0;
  double normalized = 0.0;
  double weight = 0.0;
  bool has_bootstrap = false;
  double boot_mean = 0.0;
  double boot_dev = 0.0;
};

struct ScoreReport {
  Protocol protocol = Protocol::kMlp;
  std::vector<TaskResult> rows;
  bool has_aggregate = false;
  double aggregate = 0.0;
  double total_weight = 0.0;
  bool has_agg_bootstrap = false;
  double agg_boot_mean = 0.0;
  double agg_boot_dev = 0.0;
  std::vector<uint64_t> seeds;
  int knn_k = 5;
  int64_t bootstrap_B = 0;
  double bootstrap_level = 0.95;
  uint64_t config_hash = 0;
};

struct ProtocolConfig {
  Protocol protocol = Protocol::kMlp;
  std::vector<uint64_t> seeds = {1};
  int knn_k = 5;
  ProbeConfig probe;
  int frames_per_segment = 25;  // encoder frames per one-second segment
  int64_t bootstrap_B = 0;      // 0 disables the bootstrap
  double bootstrap_level = 0.95;
  uint64_t bootstrap_seed = 0x626f6f74;
  uint64_t config_hash = 0;
};

namespace detail {

/// Per-task evidence kept for the bootstrap: per-seed per-example normalized
/// scores where the metric decomposes into a mean, otherwise one metric
/// value per seed.
struct TaskEvidence {
  std::vector<std::vector<double>> per_seed_examples;
  std::vector<double> per_seed_values;
};

/// Seed-level-only bootstrap for metrics that do not decompose over
/// examples: replicates resample whole seeds with replacement.
inline metrics::BootstrapResult seed_bootstrap(const std::vector<double>& values,
                                               int64_t B, double level, uint64_t seed) {
  metrics::BootstrapResult out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  Rng rng(seed);
  std::vector<double> replicates(static_cast<size_t>(B));
  for (auto& r : replicates) {
    double sum = 0.0;
    for (size_t s = 0; s < values.size(); ++s)
      sum += values[static_cast<size_t>(rng.uniform_int(
          static_cast<int64_t>(values.size())))];
    r = sum / static_cast<double>(values.size());
  }
  auto [lo, hi] = metrics::detail::percentile_interval(&replicates, level);
  out.lo = lo;
  out.hi = hi;
  out.deviation = std::max(std::abs(out.mean - lo), std::abs(hi - out.mean));
  return out;
}

/// One resampled value of a task inside an aggregate replicate.
inline double task_replicate(const TaskEvidence& ev, double normalized, Rng* rng) {
  bool decomposable = !ev.per_seed_examples.empty();
  if (decomposable) {
    for (const auto& arr : ev.per_seed_examples) decomposable = decomposable && arr.size() >= 2;
  }
  if (decomposable) return metrics::detail::resample_mean(ev.per_seed_examples, rng);
  if (ev.per_seed_values.size() >= 2) {
    double sum = 0.0;
    for (size_t s = 0; s < ev.per_seed_values.size(); ++s)
      sum += ev.per_seed_values[static_cast<size_t>(rng->uniform_int(
          static_cast<int64_t>(ev.per_seed_values.size())))];
    return sum / static_cast<double>(ev.per_seed_values.size());
  }
  return normalized;
}

/// Argmax with ties resolved to the smallest index.
inline int argmax(const double* row, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

struct MlpOutcome {
  double raw = 0.0;
  std::vector<double> example_scores;  // empty when the metric does not decompose
};

inline MlpOutcome run_probe_seed(const EmbeddingSet& train, const EmbeddingSet& test,
                                 const TaskSpec& spec, const ProtocolConfig& cfg,
                                 uint64_t seed) {
  ProbeConfig pc = cfg.probe;
  pc.seed = seed;
  Probe probe = train_probe(train, spec, pc);
  int classes = static_cast<int>(spec.classes.size());
  MlpOutcome out;
  if (spec.metric == metrics::Kind::kAcc) {
    for (const auto& r : test.records) {
      auto logits = probe_logits(probe, r, test.dim);
      int pred = argmax(logits.data(), classes);
      out.example_scores.push_back(pred == single_label(r) ? 1.0 : 0.0);
    }
    double sum = 0.0;
    for (double h : out.example_scores) sum += h;
    out.raw = sum / static_cast<double>(out.example_scores.size());
  } else if (spec.metric == metrics::Kind::kMAP) {
    int n = static_cast<int>(test.records.size());
    std::vector<double> scores(static_cast<size_t>(n) * classes);
    std::vector<uint8_t> labels(static_cast<size_t>(n) * classes, 0);
    for (int i = 0; i < n; ++i) {
      const auto& r = test.records[static_cast<size_t>(i)];
      auto logits = probe_logits(probe, r, test.dim);
      for (int c = 0; c < classes; ++c)
        scores[static_cast<size_t>(i) * classes + c] = logits[static_cast<size_t>(c)];
      for (int32_t lab : r.labels) labels[static_cast<size_t>(i) * classes + lab] = 1;
    }
    out.raw = metrics::mean_average_precision(scores, labels, n, classes);
  } else if (spec.metric == metrics::Kind::kSegF1) {
    std::vector<uint8_t> pred, label;
    int frames = 0;
    for (const auto& r : test.records) {
      if (r.frame_labels.size() != static_cast<size_t>(r.frames) * classes)
        throw Error(ErrorCode::kShapeMismatch, "frame labels missing: " + r.id);
      auto logits = probe_logits(probe, r, test.dim);
      for (int f = 0; f < r.frames; ++f)
        for (int c = 0; c < classes; ++c) {
          pred.push_back(logits[static_cast<size_t>(f) * classes + c] > 0.0 ? 1 : 0);
          label.push_back(r.frame_labels[static_cast<size_t>(f) * classes + c]);
        }
      frames += r.frames;
    }
    out.raw = metrics::segment_f1(pred, label, frames, classes, cfg.frames_per_segment);
  } else {
    throw Error(ErrorCode::kContract, "metric has no probe path");
  }
  return out;
}

}  // namespace detail

/// Runs one protocol over the suite. A task that cannot be evaluated gets a
/// failure or exclusion row and the suite continues; the aggregate covers
/// the included rows only.
inline ScoreReport run_protocol(const std::vector<TaskEntry>& suite,
                                const ProtocolConfig& cfg) {
  if (suite.empty()) throw Error(ErrorCode::kEmptyInput, "empty task suite");
  if (cfg.seeds.empty()) throw Error(ErrorCode::kContract, "no evaluation seeds");
  ScoreReport report;
  report.protocol = cfg.protocol;
  report.seeds = cfg.seeds;
  report.knn_k = cfg.knn_k;
  report.bootstrap_B = cfg.bootstrap_B;
  report.bootstrap_level = cfg.bootstrap_level;
  report.config_hash = cfg.config_hash;

  std::vector<detail::TaskEvidence> evidence(suite.size());
  for (size_t ti = 0; ti < suite.size(); ++ti) {
    const auto& entry = suite[ti];
    TaskResult row;
    row.task = entry.spec.name;
    row.metric = entry.spec.metric;
    row.weight = entry.spec.weight;
    try {
      if (cfg.protocol == Protocol::kKnn) {
        bool applicable = entry.spec.granularity == Granularity::kClip &&
                          (entry.spec.metric == metrics::Kind::kAcc ||
                           entry.spec.metric == metrics::Kind::kRecallAt1);
        if (!applicable) {
          row.status = "excluded: metric not defined under knn";
        } else {
          if (!entry.embeddings)
            throw Error(ErrorCode::kMissingTaskData, "no embeddings for " + row.task);
          auto train = split_view(*entry.embeddings, "train");
          auto test = split_view(*entry.embeddings, "eval");
          if (train.records.empty() || test.records.empty())
            throw Error(ErrorCode::kMissingTaskData, "missing split for " + row.task);
          auto result = knn_eval(train, test, cfg.knn_k, entry.spec.metric);
          row.raw = result.raw;
          row.normalized = metrics::normalize(result.raw, entry.spec.metric);
          row.included = true;
          evidence[ti].per_seed_examples.push_back(result.hits);
          evidence[ti].per_seed_values.push_back(row.normalized);
        }
      } else {
        if (entry.spec.metric == metrics::Kind::kRecallAt1) {
          row.status = "excluded: retrieval is scored under knn";
        } else if (entry.spec.metric == metrics::Kind::kWER) {
          if (!entry.wer_pairs || entry.wer_pairs->empty())
            throw Error(ErrorCode::kMissingTaskData, "no decoded pairs for " + row.task);
          row.raw = metrics::corpus_wer(*entry.wer_pairs);
          row.normalized = metrics::normalize(row.raw, metrics::Kind::kWER);
          row.included = true;
          std::vector<double> per_pair;
          for (const auto& [hyp, ref] : *entry.wer_pairs)
            per_pair.push_back(
                metrics::normalize(metrics::word_error_rate(hyp, ref), metrics::Kind::kWER));
          evidence[ti].per_seed_examples.push_back(per_pair);
          evidence[ti].per_seed_values.push_back(row.normalized);
        } else {
          if (!entry.embeddings)
            throw Error(ErrorCode::kMissingTaskData, "no embeddings for " + row.task);
          auto train = split_view(*entry.embeddings, "train");
          auto test = split_view(*entry.embeddings, "eval");
          if (train.records.empty() || test.records.empty())
            throw Error(ErrorCode::kMissingTaskData, "missing split for " + row.task);
          double raw_sum = 0.0;
          for (uint64_t seed : cfg.seeds) {
            auto outcome = detail::run_probe_seed(train, test, entry.spec, cfg, seed);
            raw_sum += outcome.raw;
            evidence[ti].per_seed_values.push_back(
                metrics::normalize(outcome.raw, entry.spec.metric));
            if (!outcome.example_scores.empty())
              evidence[ti].per_seed_examples.push_back(std::move(outcome.example_scores));
          }
          row.raw = raw_sum / static_cast<double>(cfg.seeds.size());
          row.normalized = metrics::normalize(row.raw, entry.spec.metric);
          row.included = true;
        }
      }
    } catch (const Error& e) {
      row.included = false;
      row.status = std::string("error: ") + e.what();
      evidence[ti] = {};
    }

    if (row.included && cfg.bootstrap_B > 0) {
      const auto& ev = evidence[ti];
      bool decomposable = !ev.per_seed_examples.empty();
      for (const auto& arr : ev.per_seed_examples)
        decomposable = decomposable && arr.size() >= 2;
      uint64_t task_seed = cfg.bootstrap_seed ^ fnv1a64(row.task);
      if (decomposable) {
        auto b = metrics::bootstrap_ci(ev.per_seed_examples, cfg.bootstrap_B,
                                       cfg.bootstrap_level, task_seed);
        row.has_bootstrap = true;
        row.boot_mean = b.mean;
        row.boot_dev = b.deviation;
      } else if (ev.per_seed_values.size() >= 2) {
        auto b = detail::seed_bootstrap(ev.per_seed_values, cfg.bootstrap_B,
                                        cfg.bootstrap_level, task_seed);
        row.has_bootstrap = true;
        row.boot_mean = b.mean;
        row.boot_dev = b.deviation;
      }
    }
    report.rows.push_back(std::move(row));
  }

  std::vector<metrics::WeightedScore> included;
  for (const auto& row : report.rows)
    if (row.included) included.push_back({row.normalized, row.weight});
  if (!included.empty()) {
    report.aggregate = metrics::weighted_average(included);
    report.has_aggregate = true;
    for (const auto& s : included) report.total_weight += s.weight;
  }

  if (report.has_aggregate && cfg.bootstrap_B > 0) {
    // Hierarchical replicates of the weighted average: every included task
    // is resampled at the levels it has (seeds, then examples), tasks
    // without resampling structure contribute their point value.
    Rng rng(cfg.bootstrap_seed ^ fnv1a64(std::string("aggregate")));
    std::vector<double> replicates(static_cast<size_t>(cfg.bootstrap_B));
    for (auto& rep : replicates) {
      std::vector<metrics::WeightedScore> scores;
      for (size_t ti = 0; ti < suite.size(); ++ti) {
        const auto& row = report.rows[ti];
        if (!row.included) continue;
        scores.push_back(
            {detail::task_replicate(evidence[ti], row.normalized, &rng), row.weight});
      }
      rep = metrics::weighted_average(scores);
    }
    double mean = report.aggregate;
    auto [lo, hi] = metrics::detail::percentile_interval(&replicates, cfg.bootstrap_level);
    report.has_agg_bootstrap = true;
    report.agg_boot_mean = mean;
    report.agg_boot_dev = std::max(std::abs(mean - lo), std::abs(hi - mean));
  }
  return report;
}

// ---------------------------------------------------------------- reporting

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string fmt_hash(uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string seeds_list(const std::vector<uint64_t>& seeds) {
  std::string out;
  for (size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ";";
    out += std::to_string(seeds[i]);
  }
  return out;
}

}  // namespace detail

/// Machine-readable report: header comments echo the protocol settings, one
/// row per task, then the aggregate row.
inline std::string report_csv(const ScoreReport& r) {
  std::string out;
  out += "# protocol," + std::string(protocol_name(r.protocol)) + "\n";
  out += "# seeds," + detail::seeds_list(r.seeds) + "\n";
  if (r.protocol == Protocol::kKnn) out += "# k," + std::to_string(r.knn_k) + "\n";
  out += "# bootstrap_B," + std::to_string(r.bootstrap_B) + "\n";
  out += "# bootstrap_level," + detail::fmt(r.bootstrap_level) + "\n";
  out += "# config_hash," + detail::fmt_hash(r.config_hash) + "\n";
  out += "task,metric,raw,normalized,weight,boot_mean,boot_dev,status\n";
  auto field = [](bool present, double v) { return present ? detail::fmt(v) : std::string(); };
  for (const auto& row : r.rows) {
    out += row.task + "," + metrics::kind_name(row.metric) + "," +
           field(row.included, row.raw) + "," + field(row.included, row.normalized) + "," +
           detail::fmt(row.weight) + "," + field(row.has_bootstrap, row.boot_mean) + "," +
           field(row.has_bootstrap, row.boot_dev) + "," + row.status + "\n";
  }
  out += "S,,," + field(r.has_aggregate, r.aggregate) + "," + detail::fmt(r.total_weight) +
         "," + field(r.has_agg_bootstrap, r.agg_boot_mean) + "," +
         field(r.has_agg_bootstrap, r.agg_boot_dev) + "," +
         (r.has_aggregate ? "ok" : "error: no included tasks") + "\n";
  return out;
}

/// Fixed-width table for humans; same content as the CSV.
inline std::string report_table(const ScoreReport& r) {
  std::string out;
  out += "protocol " + std::string(protocol_name(r.protocol)) +
         "  seeds " + detail::seeds_list(r.seeds);
  if (r.protocol == Protocol::kKnn) out += "  k " + std::to_string(r.knn_k);
  if (r.bootstrap_B > 0)
    out += "  bootstrap B=" + std::to_string(r.bootstrap_B) + " level " +
           detail::fmt(r.bootstrap_level);
  out += "  config " + detail::fmt_hash(r.config_hash) + "\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-24s %-9s %10s %10s %8s %10s %10s  %s\n", "task",
                "metric", "raw", "norm", "weight", "boot_mean", "boot_dev", "status");
  out += line;
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%-24s %-9s %10s %10s %8.0f %10s %10s  %s\n",
                  row.task.c_str(), metrics::kind_name(row.metric),
                  row.included ? detail::fmt(row.raw).c_str() : "-",
                  row.included ? detail::fmt(row.normalized).c_str() : "-", row.weight,
                  row.has_bootstrap ? detail::fmt(row.boot_mean).c_str() : "-",
                  row.has_bootstrap ? detail::fmt(row.boot_dev).c_str() : "-",
                  row.status.c_str());
    out += line;
  }
  std::snprintf(line, sizeof line, "%-24s %-9s %10s %10s %8.0f %10s %10s  %s\n", "S",
                "", "", r.has_aggregate ? detail::fmt(r.aggregate).c_str() : "-",
                r.total_weight,
                r.has_agg_bootstrap ? detail::fmt(r.agg_boot_mean).c_str() : "-",
                r.has_agg_bootstrap ? detail::fmt(r.agg_boot_dev).c_str() : "-",
                r.has_aggregate ? "ok" : "error: no included tasks");
  out += line;
  return out;
}

}  // namespace earkit::evalkit
