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

// The network: a convolutional front end with two stride-2 stages (so each
// output frame spans about 40 ms), sinusoidal positions, pre-LN transformer
// encoder blocks with masked self-attention, a frame-wise MLP adapter from
// encoder width to decoder width, and a causal decoder that consumes the
// adapted frames as an in-context prefix. Training optimizes the answer-token
// cross-entropy; representation extraction takes the final encoder layer.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "earkit/audio.hpp"
#include "earkit/common.hpp"
#include "earkit/instruct.hpp"
#include "earkit/rng.hpp"
#include "earkit/tensor.hpp"

namespace earkit::model {

using grad::Tape;
using grad::TensorPtr;

struct ModelConfig {
  int n_mels = 128;
  int d_w = 48;  // encoder width
  int d_q = 48;  // decoder width
  int enc_layers = 2;
  int enc_heads = 4;
  int dec_layers = 2;
  int dec_heads = 4;
  int ffn_mult = 2;
  int adapter_hidden = -1;  // -1: max(d_w, d_q); 0: single linear layer
  int vocab_size = 271;
  int max_audio_frames = 100;  // mel frames after padding
  int max_text_len = 72;       // prompt + answer + end token

  int adapter_hidden_width() const {
    return adapter_hidden < 0 ? std::max(d_w, d_q) : adapter_hidden;
  }
  int max_prefix_frames() const { return (max_audio_frames + 3) / 4; }
  int max_stream_len() const { return max_prefix_frames() + max_text_len + 1; }

  void validate() const {
    if (d_w < 1 || d_q < 1 || enc_layers < 1 || dec_layers < 1 || vocab_size < 4 ||
        n_mels < 1 || max_audio_frames < 4 || max_text_len < 2 || ffn_mult < 1)
      throw Error(ErrorCode::kContract, "model config extents must be positive");
    if (d_w % enc_heads != 0 || d_q % dec_heads != 0)
      throw Error(ErrorCode::kContract, "width must divide by head count");
  }
};

struct EncoderOutput {
  TensorPtr h;         // [T' x d_w], final encoder layer
  std::vector<bool> valid;
  int valid_out_frames = 0;
  double frame_span_ms = 40.0;
};

struct AdapterOutput {
  TensorPtr z;  // [T' x d_q]
  std::vector<bool> valid;
  int valid_frames = 0;
};

struct LossResult {
  TensorPtr loss_sum;  // scalar
  int answer_tokens = 0;
};

// Features are affinely squashed before the first convolution so the log
// floor (about -23) maps near -1 and active bins land within a unit range.
inline constexpr double kFeatureShift = 11.5;
inline constexpr double kFeatureScale = 1.0 / 11.5;

inline int downsampled_frames(int frames) { return (frames + 1) / 2; }

inline std::vector<bool> downsample_mask(const std::vector<bool>& valid) {
  std::vector<bool> out((valid.size() + 1) / 2);
  for (size_t j = 0; j < out.size(); ++j) {
    bool any = valid[2 * j];
    if (2 * j + 1 < valid.size()) any = any || valid[2 * j + 1];
    out[j] = any;
  }
  return out;
}

/// Fixed sinusoidal position table, rows 0..n-1.
inline TensorPtr sinusoid_positions(int n, int dim) {
  auto pos = grad::make_tensor({n, dim});
  for (int p = 0; p < n; ++p) {
    for (int i = 0; i < dim; i += 2) {
      double rate = std::pow(10000.0, -static_cast<double>(i) / dim);
      pos->at(p, i) = std::sin(p * rate);
      if (i + 1 < dim) pos->at(p, i + 1) = std::cos(p * rate);
    }
  }
  return pos;
}

class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    init_params(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  grad::ParamSet& params() { return params_; }
  const grad::ParamSet& params() const { return params_; }

  void freeze_decoder(bool frozen) { params_.set_trainable("decoder/", !frozen); }

  uint64_t decoder_hash() const {
    return params_.value_hash(
        [](const std::string& p) { return p.rfind("decoder/", 0) == 0; });
  }

  // ---------------------------------------------------------------- encoder

  EncoderOutput encode(const audio::FeatureTensor& feat, Tape* tape) const {
    if (feat.bins != cfg_.n_mels)
      throw Error(ErrorCode::kShapeMismatch, "feature bins != n_mels");
    if (feat.valid_count() == 0)
      throw Error(ErrorCode::kDegenerateMask, "no valid frames to encode");
    auto x = grad::make_tensor({feat.frames, feat.bins});
    for (size_t i = 0; i < feat.data.size(); ++i)
      x->v[i] = (feat.data[i] + kFeatureShift) * kFeatureScale;

    auto h = grad::gelu(grad::conv1d(x, params_.get("encoder/conv1/w"),
                                     params_.get("encoder/conv1/b"), 3, 2, 1, tape),
                        tape);
    auto mask1 = downsample_mask(feat.valid);
    h = grad::gelu(grad::conv1d(h, params_.get("encoder/conv2/w"),
                                params_.get("encoder/conv2/b"), 3, 2, 1, tape),
                   tape);
    auto mask2 = downsample_mask(mask1);
    if (static_cast<int>(mask2.size()) != h->rows())
      throw Error(ErrorCode::kContract, "mask downsampling disagrees with conv");

    auto pos = sinusoid_positions(h->rows(), cfg_.d_w);
    h = grad::add(h, pos, tape);
    for (int layer = 0; layer < cfg_.enc_layers; ++layer)
      h = block(h, "encoder/blocks/" + block_tag(layer), cfg_.enc_heads, mask2, tape);
    h = grad::layer_norm(h, params_.get("encoder/ln_f/gamma"),
                         params_.get("encoder/ln_f/beta"), tape);

    EncoderOutput out;
    out.h = h;
    out.valid = mask2;
    for (bool v : mask2) out.valid_out_frames += v ? 1 : 0;
    return out;
  }

  // ---------------------------------------------------------------- adapter

  AdapterOutput adapt(const EncoderOutput& enc, Tape* tape) const {
    TensorPtr z;
    if (cfg_.adapter_hidden_width() == 0) {
      z = grad::linear(enc.h, params_.get("adapter/w"), params_.get("adapter/b"), tape);
    } else {
      auto hid = grad::gelu(grad::linear(enc.h, params_.get("adapter/w1"),
                                         params_.get("adapter/b1"), tape),
                            tape);
      z = grad::linear(hid, params_.get("adapter/w2"), params_.get("adapter/b2"), tape);
    }
    AdapterOutput out;
    out.z = z;
    out.valid = enc.valid;
    out.valid_frames = enc.valid_out_frames;
    return out;
  }

  // ---------------------------------------------------------------- decoder

  /// Logits over one example's text stream. z_prefix may be null (text-only
  /// decoding); otherwise it holds the valid adapter rows [P x d_q]. Row t of
  /// the result parameterizes the distribution of token_ids[t]: the decoder
  /// input at text position t is BOS for t = 0 and token_ids[t-1] after.
  TensorPtr decode_logits(const TensorPtr& z_prefix, const std::vector<int>& token_ids,
                          Tape* tape) const {
    int prefix = z_prefix ? z_prefix->rows() : 0;
    int text = static_cast<int>(token_ids.size());
    if (text < 1) throw Error(ErrorCode::kEmptyInput, "empty token stream");
    if (z_prefix && z_prefix->cols() != cfg_.d_q)
      throw Error(ErrorCode::kShapeMismatch, "prefix width != d_q");
    int stream = prefix + text;
    if (stream > cfg_.max_stream_len())
      throw Error(ErrorCode::kContract, "stream exceeds position table");
    for (int id : token_ids)
      if (id < 0 || id >= cfg_.vocab_size)
        throw Error(ErrorCode::kContract, "token id outside vocabulary");

    std::vector<int> input_ids(text);
    input_ids[0] = instruct::Tokenizer::kBos;
    for (int t = 1; t < text; ++t) input_ids[t] = token_ids[t - 1];
    auto tok = grad::embedding_lookup(params_.get("decoder/tok_emb"), input_ids, tape);

    TensorPtr h = z_prefix ? grad::concat_rows(z_prefix, tok, tape) : tok;
    std::vector<int> pos_ids(stream);
    for (int s = 0; s < stream; ++s) pos_ids[s] = s;
    auto pos = grad::embedding_lookup(params_.get("decoder/pos_emb"), pos_ids, tape);
    h = grad::add(h, pos, tape);

    // Prefix rows see the whole prefix; text rows see the prefix plus their
    // own causal past (self included).
    std::vector<uint8_t> allowed(static_cast<size_t>(stream) * stream, 0);
    for (int i = 0; i < stream; ++i) {
      int reach = i < prefix ? prefix : i + 1;
      for (int j = 0; j < reach; ++j) allowed[static_cast<size_t>(i) * stream + j] = 1;
    }
    for (int layer = 0; layer < cfg_.dec_layers; ++layer)
      h = block_with_matrix(h, "decoder/blocks/" + block_tag(layer), cfg_.dec_heads,
                            allowed, tape);
    h = grad::layer_norm(h, params_.get("decoder/ln_f/gamma"),
                         params_.get("decoder/ln_f/beta"), tape);
    auto text_rows = grad::slice_rows(h, prefix, text, tape);
    return grad::linear(text_rows, params_.get("decoder/unembed/w"),
                        params_.get("decoder/unembed/b"), tape);
  }

  /// Batch loss: sum of per-example answer-token cross-entropies plus the
  /// total answer-token count. feats may be null for text-only batches (the
  /// decoder warm start); otherwise it supplies one padded FeatureTensor per
  /// batch row.
  LossResult forward_loss(const std::vector<audio::FeatureTensor>* feats,
                          const instruct::TokenBatch& batch, Tape* tape) const {
    if (batch.batch < 1) throw Error(ErrorCode::kEmptyInput, "empty batch");
    if (feats && static_cast<int>(feats->size()) != batch.batch)
      throw Error(ErrorCode::kShapeMismatch, "feature count != batch rows");
    TensorPtr total;
    int answer_tokens = 0;
    for (int r = 0; r < batch.batch; ++r) {
      TensorPtr z;
      if (feats) {
        auto enc = encode((*feats)[r], tape);
        auto ada = adapt(enc, tape);
        z = valid_prefix(ada, tape);
      }
      int len = batch.prompt_len[r] + batch.answer_len[r];
      std::vector<int> ids(batch.ids.begin() + static_cast<size_t>(r) * batch.width,
                           batch.ids.begin() + static_cast<size_t>(r) * batch.width + len);
      std::vector<bool> mask(len);
      for (int p = 0; p < len; ++p)
        mask[p] = batch.loss_mask[static_cast<size_t>(r) * batch.width + p];
      auto logits = decode_logits(z, ids, tape);
      auto ce = grad::masked_cross_entropy(logits, ids, mask, tape);
      answer_tokens += ce.count;
      total = total ? grad::add(total, ce.loss_sum, tape) : ce.loss_sum;
    }
    return {total, answer_tokens};
  }

  /// Greedy continuation after the prompt; stops at the end-of-answer token
  /// or max_new tokens. Returns answer ids without the terminator.
  std::vector<int> greedy_decode(const audio::FeatureTensor& feat,
                                 const std::vector<int>& prompt_ids, int max_new) const {
    auto enc = encode(feat, nullptr);
    auto ada = adapt(enc, nullptr);
    auto z = valid_prefix(ada, nullptr);
    std::vector<int> ids = prompt_ids;
    std::vector<int> answer;
    for (int step = 0; step < max_new; ++step) {
      if (static_cast<int>(ids.size()) >= cfg_.max_text_len) break;
      // Logits row for the next position come from feeding a placeholder
      // target there; the row only depends on tokens before it.
      std::vector<int> probe = ids;
      probe.push_back(0);
      auto logits = decode_logits(z, probe, nullptr);
      int row = static_cast<int>(probe.size()) - 1;
      int best = 0;
      for (int v = 1; v < cfg_.vocab_size; ++v)
        if (logits->at(row, v) > logits->at(row, best)) best = v;
      if (best == instruct::Tokenizer::kEoa) break;
      answer.push_back(best);
      ids.push_back(best);
    }
    return answer;
  }

  // ------------------------------------------------------------- embeddings

  /// Mask-aware mean of the final encoder layer over valid frames.
  std::vector<double> clip_embedding(const audio::FeatureTensor& feat) const {
    auto enc = encode(feat, nullptr);
    std::vector<double> mean(cfg_.d_w, 0.0);
    int n = 0;
    for (int t = 0; t < enc.h->rows(); ++t) {
      if (!enc.valid[t]) continue;
      for (int c = 0; c < cfg_.d_w; ++c) mean[c] += enc.h->at(t, c);
      ++n;
    }
    if (n == 0) throw Error(ErrorCode::kDegenerateMask, "no valid frames");
    for (auto& m : mean) m /= n;
    return mean;
  }

  /// Valid rows of the final encoder layer, row-major [valid_out_frames x d_w].
  std::vector<double> frame_embeddings(const audio::FeatureTensor& feat,
                                       int* out_frames) const {
    auto enc = encode(feat, nullptr);
    std::vector<double> rows;
    int n = 0;
    for (int t = 0; t < enc.h->rows(); ++t) {
      if (!enc.valid[t]) continue;
      for (int c = 0; c < cfg_.d_w; ++c) rows.push_back(enc.h->at(t, c));
      ++n;
    }
    if (out_frames) *out_frames = n;
    return rows;
  }

 private:
  static std::string block_tag(int layer) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", layer);
    return buf;
  }

  /// Valid adapter rows as the decoder prefix. Valid frames always form a
  /// leading run because padding is applied on the right.
  static TensorPtr valid_prefix(const AdapterOutput& ada, Tape* tape) {
    int p = ada.valid_frames;
    for (int i = 0; i < p; ++i)
      if (!ada.valid[i])
        throw Error(ErrorCode::kContract, "valid frames are not a leading run");
    if (p == 0) return nullptr;
    return grad::slice_rows(ada.z, 0, p, tape);
  }

  TensorPtr block(const TensorPtr& x, const std::string& base, int heads,
                  const std::vector<bool>& valid, Tape* tape) const {
    auto normed = grad::layer_norm(x, params_.get(base + "/ln1/gamma"),
                                   params_.get(base + "/ln1/beta"), tape);
    auto q = grad::linear(normed, params_.get(base + "/attn/wq"),
                          params_.get(base + "/attn/bq"), tape);
    // No key bias: softmax is invariant to a per-row additive score shift,
    // so a bias on keys would be inert.
    auto k = grad::linear(normed, params_.get(base + "/attn/wk"), nullptr, tape);
    auto v = grad::linear(normed, params_.get(base + "/attn/wv"),
                          params_.get(base + "/attn/bv"), tape);
    auto att = grad::masked_attention(q, k, v, valid, heads, tape);
    auto proj = grad::linear(att, params_.get(base + "/attn/wo"),
                             params_.get(base + "/attn/bo"), tape);
    auto mid = grad::add(x, proj, tape);
    return grad::add(mid, mlp(mid, base, tape), tape);
  }

  TensorPtr block_with_matrix(const TensorPtr& x, const std::string& base, int heads,
                              const std::vector<uint8_t>& allowed, Tape* tape) const {
    auto normed = grad::layer_norm(x, params_.get(base + "/ln1/gamma"),
                                   params_.get(base + "/ln1/beta"), tape);
    auto q = grad::linear(normed, params_.get(base + "/attn/wq"),
                          params_.get(base + "/attn/bq"), tape);
    auto k = grad::linear(normed, params_.get(base + "/attn/wk"), nullptr, tape);
    auto v = grad::linear(normed, params_.get(base + "/attn/wv"),
                          params_.get(base + "/attn/bv"), tape);
    auto att = grad::attention(q, k, v, allowed, heads, tape);
    auto proj = grad::linear(att, params_.get(base + "/attn/wo"),
                             params_.get(base + "/attn/bo"), tape);
    auto mid = grad::add(x, proj, tape);
    return grad::add(mid, mlp(mid, base, tape), tape);
  }

  TensorPtr mlp(const TensorPtr& x, const std::string& base, Tape* tape) const {
    auto normed = grad::layer_norm(x, params_.get(base + "/ln2/gamma"),
                                   params_.get(base + "/ln2/beta"), tape);
    auto hid = grad::gelu(grad::linear(normed, params_.get(base + "/mlp/w1"),
                                       params_.get(base + "/mlp/b1"), tape),
                          tape);
    return grad::linear(hid, params_.get(base + "/mlp/w2"),
                        params_.get(base + "/mlp/b2"), tape);
  }

  void add_block_params(const std::string& base, int dim, Rng& rng) {
    auto w = [&](std::vector<int> shape) { return grad::randn(shape, 0.02, rng); };
    params_.add(base + "/ln1/gamma", ones({dim}), true);
    params_.add(base + "/ln1/beta", grad::make_tensor({dim}), true);
    params_.add(base + "/attn/wq", w({dim, dim}), true);
    params_.add(base + "/attn/bq", grad::make_tensor({dim}), true);
    params_.add(base + "/attn/wk", w({dim, dim}), true);
    params_.add(base + "/attn/wv", w({dim, dim}), true);
    params_.add(base + "/attn/bv", grad::make_tensor({dim}), true);
    params_.add(base + "/attn/wo", w({dim, dim}), true);
    params_.add(base + "/attn/bo", grad::make_tensor({dim}), true);
    params_.add(base + "/ln2/gamma", ones({dim}), true);
    params_.add(base + "/ln2/beta", grad::make_tensor({dim}), true);
    params_.add(base + "/mlp/w1", w({dim, dim * cfg_.ffn_mult}), true);
    params_.add(base + "/mlp/b1", grad::make_tensor({dim * cfg_.ffn_mult}), true);
    params_.add(base + "/mlp/w2", w({dim * cfg_.ffn_mult, dim}), true);
    params_.add(base + "/mlp/b2", grad::make_tensor({dim}), true);
  }

  static TensorPtr ones(std::vector<int> shape) {
    auto t = grad::make_tensor(std::move(shape));
    for (auto& x : t->v) x = 1.0;
    return t;
  }

  void init_params(Rng& rng) {
    auto w = [&](std::vector<int> shape, double sd = 0.02) {
      return grad::randn(shape, sd, rng);
    };
    params_.add("encoder/conv1/w", w({cfg_.d_w, 3 * cfg_.n_mels}), true);
    params_.add("encoder/conv1/b", grad::make_tensor({cfg_.d_w}), true);
    params_.add("encoder/conv2/w", w({cfg_.d_w, 3 * cfg_.d_w}), true);
    params_.add("encoder/conv2/b", grad::make_tensor({cfg_.d_w}), true);
    for (int l = 0; l < cfg_.enc_layers; ++l)
      add_block_params("encoder/blocks/" + block_tag(l), cfg_.d_w, rng);
    params_.add("encoder/ln_f/gamma", ones({cfg_.d_w}), true);
    params_.add("encoder/ln_f/beta", grad::make_tensor({cfg_.d_w}), true);

    int hidden = cfg_.adapter_hidden_width();
    if (hidden == 0) {
      params_.add("adapter/w", w({cfg_.d_w, cfg_.d_q}), true);
      params_.add("adapter/b", grad::make_tensor({cfg_.d_q}), true);
    } else {
      params_.add("adapter/w1", w({cfg_.d_w, hidden}), true);
      params_.add("adapter/b1", grad::make_tensor({hidden}), true);
      params_.add("adapter/w2", w({hidden, cfg_.d_q}), true);
      params_.add("adapter/b2", grad::make_tensor({cfg_.d_q}), true);
    }

    params_.add("decoder/tok_emb", w({cfg_.vocab_size, cfg_.d_q}), true);
    params_.add("decoder/pos_emb", w({cfg_.max_stream_len(), cfg_.d_q}, 0.01), true);
    for (int l = 0; l < cfg_.dec_layers; ++l)
      add_block_params("decoder/blocks/" + block_tag(l), cfg_.d_q, rng);
    params_.add("decoder/ln_f/gamma", ones({cfg_.d_q}), true);
    params_.add("decoder/ln_f/beta", grad::make_tensor({cfg_.d_q}), true);
    params_.add("decoder/unembed/w", w({cfg_.d_q, cfg_.vocab_size}), true);
    params_.add("decoder/unembed/b", grad::make_tensor({cfg_.vocab_size}), true);
  }

  ModelConfig cfg_;
  grad::ParamSet params_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: magic, version, config hash, config JSON, named tensors
// (path, trainable flag, shape, row-major f64 little-endian payload), then a
// CRC32 of everything before it.

inline constexpr char kCheckpointMagic[8] = {'E', 'A', 'R', 'K', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string path;
  bool trainable = false;
  std::vector<int> shape;
  std::vector<double> values;
};

struct CheckpointData {
  uint32_t version = 0;
  uint64_t config_hash = 0;
  std::string config_json;
  std::vector<NamedTensor> tensors;
};

namespace detail {

inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline uint32_t take_u32(const std::string& s, size_t& pos) {
  if (pos + 4 > s.size()) throw Error(ErrorCode::kIo, "truncated checkpoint");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(s[pos++])) << (8 * i);
  return v;
}
inline uint64_t take_u64(const std::string& s, size_t& pos) {
  if (pos + 8 > s.size()) throw Error(ErrorCode::kIo, "truncated checkpoint");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(s[pos++])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const grad::ParamSet& params,
                                     const std::string& config_json,
                                     uint64_t config_hash) {
  std::string s(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(s, kCheckpointVersion);
  detail::put_u64(s, config_hash);
  detail::put_u32(s, static_cast<uint32_t>(config_json.size()));
  s += config_json;
  detail::put_u32(s, static_cast<uint32_t>(params.size()));
  params.for_each([&](const std::string& path, const TensorPtr& t, bool trainable) {
    detail::put_u32(s, static_cast<uint32_t>(path.size()));
    s += path;
    s.push_back(trainable ? 1 : 0);
    detail::put_u32(s, static_cast<uint32_t>(t->shape.size()));
    for (int d : t->shape) detail::put_u32(s, static_cast<uint32_t>(d));
    static_assert(sizeof(double) == 8);
    for (double x : t->v) {
      uint64_t bits;
      std::memcpy(&bits, &x, 8);
      detail::put_u64(s, bits);
    }
  });
  detail::put_u32(s, crc32(s.data(), s.size()));
  return s;
}

inline void save_checkpoint(const std::string& path, const grad::ParamSet& params,
                            const std::string& config_json, uint64_t config_hash) {
  // Write to a scratch name first so a failed write never leaves a torn file
  // under the final name.
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::kIo, "cannot open for write: " + tmp);
    auto s = encode_checkpoint(params, config_json, config_hash);
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!f) {
      f.close();
      std::remove(tmp.c_str());
      throw Error(ErrorCode::kIo, "short write: " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw Error(ErrorCode::kIo, "cannot move checkpoint into place: " + path);
  }
}

inline CheckpointData decode_checkpoint(const std::string& s) {
  if (s.size() < sizeof kCheckpointMagic + 16 ||
      std::memcmp(s.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw Error(ErrorCode::kIo, "not a checkpoint file");
  uint32_t stored_crc = 0;
  {
    size_t tail = s.size() - 4;
    stored_crc = detail::take_u32(s, tail);
  }
  if (crc32(s.data(), s.size() - 4) != stored_crc)
    throw Error(ErrorCode::kIo, "checkpoint checksum mismatch");
  size_t pos = sizeof kCheckpointMagic;
  CheckpointData ck;
  ck.version = detail::take_u32(s, pos);
  if (ck.version != kCheckpointVersion)
    throw Error(ErrorCode::kIo, "unsupported checkpoint version");
  ck.config_hash = detail::take_u64(s, pos);
  uint32_t json_len = detail::take_u32(s, pos);
  if (pos + json_len > s.size()) throw Error(ErrorCode::kIo, "truncated checkpoint");
  ck.config_json = s.substr(pos, json_len);
  pos += json_len;
  uint32_t count = detail::take_u32(s, pos);
  ck.tensors.resize(count);
  for (auto& t : ck.tensors) {
    uint32_t path_len = detail::take_u32(s, pos);
    if (pos + path_len > s.size()) throw Error(ErrorCode::kIo, "truncated checkpoint");
    t.path = s.substr(pos, path_len);
    pos += path_len;
    if (pos >= s.size()) throw Error(ErrorCode::kIo, "truncated checkpoint");
    t.trainable = s[pos++] != 0;
    uint32_t ndim = detail::take_u32(s, pos);
    int64_t total = 1;
    t.shape.resize(ndim);
    for (auto& d : t.shape) {
      d = static_cast<int>(detail::take_u32(s, pos));
      total *= d;
    }
    t.values.resize(static_cast<size_t>(total));
    for (auto& x : t.values) {
      uint64_t bits = detail::take_u64(s, pos);
      std::memcpy(&x, &bits, 8);
    }
  }
  return ck;
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::kIo, "cannot open for read: " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(s);
}

/// Copies checkpoint values into an already-constructed model. Every stored
/// tensor must exist with the same shape, and vice versa.
inline void load_values(Model& model, const CheckpointData& ck) {
  size_t applied = 0;
  for (const auto& t : ck.tensors) {
    auto dst = model.params().get(t.path);
    if (dst->shape != t.shape)
      throw Error(ErrorCode::kShapeMismatch, "checkpoint shape mismatch at " + t.path);
    dst->v = t.values;
    ++applied;
  }
  if (applied != model.params().size())
    throw Error(ErrorCode::kContract, "checkpoint does not cover the parameter set");
}

}  // namespace earkit::model
