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

// Waveform handling and the log-Mel front end: 16 kHz mono, 25 ms periodic
// Hann windows with a 10 ms hop, 512-point FFT magnitudes, 128 triangular
// Slaney-scale filters from 0 to 8 kHz with Slaney area normalization, then a
// natural log with an additive floor. Feature rows count only fully covered
// windows: valid_frames = floor((n_samples - frame_length) / hop) + 1.

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "earkit/common.hpp"

namespace earkit::audio {

struct Waveform {
  std::vector<double> samples;  // nominal range [-1, 1]
  int sample_rate = 16000;

  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

struct FrontendConfig {
  int sample_rate = 16000;
  int frame_length = 400;  // 25 ms
  int hop = 160;           // 10 ms
  int n_fft = 512;
  int n_mels = 128;
  double fmin_hz = 0.0;
  double fmax_hz = 8000.0;
  double log_floor = 1e-10;
  bool mean_normalize = false;  // subtract the per-clip mean after the log
};

/// Feature matrix [frames x bins] with a per-frame validity mask. Frames past
/// the original clip (introduced by padding) carry valid=false and all-zero
/// rows.
struct FeatureTensor {
  int frames = 0;
  int bins = 0;
  std::vector<double> data;  // row-major
  std::vector<bool> valid;

  double& at(int f, int b) { return data[static_cast<size_t>(f) * bins + b]; }
  double at(int f, int b) const { return data[static_cast<size_t>(f) * bins + b]; }
  int valid_count() const {
    int n = 0;
    for (bool v : valid) n += v ? 1 : 0;
    return n;
  }
};

inline int valid_frame_count(size_t n_samples, const FrontendConfig& cfg) {
  if (n_samples < static_cast<size_t>(cfg.frame_length)) return 0;
  return static_cast<int>((n_samples - cfg.frame_length) / cfg.hop) + 1;
}

inline double hz_to_mel(double hz) {
  // Slaney scale: linear below 1 kHz, logarithmic above.
  constexpr double kBreak = 1000.0;
  constexpr double kLinStep = 200.0 / 3.0;
  if (hz < kBreak) return hz / kLinStep;
  const double log_step = std::log(6.4) / 27.0;
  return kBreak / kLinStep + std::log(hz / kBreak) / log_step;
}

inline double mel_to_hz(double mel) {
  constexpr double kBreak = 1000.0;
  constexpr double kLinStep = 200.0 / 3.0;
  const double break_mel = kBreak / kLinStep;
  if (mel < break_mel) return mel * kLinStep;
  const double log_step = std::log(6.4) / 27.0;
  return kBreak * std::exp(log_step * (mel - break_mel));
}

/// Triangular filters on FFT-bin center frequencies, area normalized so each
/// filter integrates to roughly unit response per Hz (2 / bandwidth).
inline std::vector<double> mel_filterbank(const FrontendConfig& cfg) {
  int n_bins = cfg.n_fft / 2 + 1;
  std::vector<double> edges(cfg.n_mels + 2);
  double mel_lo = hz_to_mel(cfg.fmin_hz), mel_hi = hz_to_mel(cfg.fmax_hz);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));
  std::vector<double> bank(static_cast<size_t>(cfg.n_mels) * n_bins, 0.0);
  for (int m = 0; m < cfg.n_mels; ++m) {
    double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    double enorm = 2.0 / (hi - lo);
    for (int k = 0; k < n_bins; ++k) {
      double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      double up = (f - lo) / (mid - lo);
      double down = (hi - f) / (hi - mid);
      double w = std::max(0.0, std::min(up, down));
      bank[static_cast<size_t>(m) * n_bins + k] = w * enorm;
    }
  }
  return bank;
}

namespace detail {

/// In-place iterative radix-2 FFT. Size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0)
    throw Error(ErrorCode::kContract, "FFT size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * M_PI / static_cast<double>(len);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        auto u = a[i + j];
        auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

}  // namespace detail

/// Linear mel magnitudes (no log compression). Scaling the waveform by g
/// scales every cell by g, which is what gain-invariant fingerprints rely on.
inline FeatureTensor mel_energies(const Waveform& wave, const FrontendConfig& cfg) {
  if (wave.sample_rate != cfg.sample_rate)
    throw Error(ErrorCode::kInvalidAudio,
                "expected " + std::to_string(cfg.sample_rate) + " Hz input, got " +
                    std::to_string(wave.sample_rate));
  int frames = valid_frame_count(wave.samples.size(), cfg);
  if (frames <= 0)
    throw Error(ErrorCode::kInvalidAudio, "clip shorter than one analysis window");
  if (cfg.n_fft < cfg.frame_length)
    throw Error(ErrorCode::kContract, "FFT size below frame length");

  std::vector<double> window(cfg.frame_length);
  for (int i = 0; i < cfg.frame_length; ++i)
    window[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / cfg.frame_length));
  auto bank = mel_filterbank(cfg);
  int n_bins = cfg.n_fft / 2 + 1;

  FeatureTensor out;
  out.frames = frames;
  out.bins = cfg.n_mels;
  out.data.assign(static_cast<size_t>(frames) * cfg.n_mels, 0.0);
  out.valid.assign(frames, true);

  std::vector<std::complex<double>> buf(cfg.n_fft);
  std::vector<double> mag(n_bins);
  for (int f = 0; f < frames; ++f) {
    size_t start = static_cast<size_t>(f) * cfg.hop;
    for (int i = 0; i < cfg.frame_length; ++i)
      buf[i] = std::complex<double>(wave.samples[start + i] * window[i], 0.0);
    for (int i = cfg.frame_length; i < cfg.n_fft; ++i) buf[i] = 0.0;
    detail::fft(buf);
    for (int k = 0; k < n_bins; ++k) mag[k] = std::abs(buf[k]);
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* w = bank.data() + static_cast<size_t>(m) * n_bins;
      double acc = 0.0;
      for (int k = 0; k < n_bins; ++k) acc += w[k] * mag[k];
      out.at(f, m) = acc;
    }
  }
  return out;
}

inline FeatureTensor log_mel(const Waveform& wave, const FrontendConfig& cfg) {
  FeatureTensor out = mel_energies(wave, cfg);
  for (auto& x : out.data) x = std::log(x + cfg.log_floor);
  if (cfg.mean_normalize) {
    double mu = 0.0;
    for (double x : out.data) mu += x;
    mu /= static_cast<double>(out.data.size());
    for (auto& x : out.data) x -= mu;
  }
  return out;
}

/// Pads (with zero rows, valid=false) up to target_frames. A clip longer than
/// the target is a contract violation, not a silent truncation.
inline FeatureTensor pad_to_fixed(const FeatureTensor& feat, int target_frames) {
  if (feat.frames > target_frames)
    throw Error(ErrorCode::kContract,
                "clip has " + std::to_string(feat.frames) + " frames, target " +
                    std::to_string(target_frames));
  FeatureTensor out;
  out.frames = target_frames;
  out.bins = feat.bins;
  out.data.assign(static_cast<size_t>(target_frames) * feat.bins, 0.0);
  std::copy(feat.data.begin(), feat.data.end(), out.data.begin());
  out.valid.assign(target_frames, false);
  for (int i = 0; i < feat.frames; ++i) out.valid[i] = feat.valid[i];
  return out;
}

// ---------------------------------------------------------------------------
// 16-bit PCM WAV files.

namespace detail {

inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline uint16_t get_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

inline std::string wav_encode(const Waveform& wave) {
  std::string s;
  uint32_t data_bytes = static_cast<uint32_t>(wave.samples.size() * 2);
  s += "RIFF";
  detail::put_u32(s, 36 + data_bytes);
  s += "WAVEfmt ";
  detail::put_u32(s, 16);
  detail::put_u16(s, 1);  // PCM
  detail::put_u16(s, 1);  // mono
  detail::put_u32(s, static_cast<uint32_t>(wave.sample_rate));
  detail::put_u32(s, static_cast<uint32_t>(wave.sample_rate * 2));
  detail::put_u16(s, 2);   // block align
  detail::put_u16(s, 16);  // bits per sample
  s += "data";
  detail::put_u32(s, data_bytes);
  for (double x : wave.samples) {
    long q = std::lround(std::clamp(x, -1.0, 1.0) * 32768.0);
    q = std::clamp(q, -32768l, 32767l);
    detail::put_u16(s, static_cast<uint16_t>(static_cast<int16_t>(q)));
  }
  return s;
}

inline void wav_write(const std::string& path, const Waveform& wave) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::kIo, "cannot open for write: " + path);
  auto s = wav_encode(wave);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw Error(ErrorCode::kIo, "short write: " + path);
}

/// Parses 16-bit PCM. Multi-channel input is averaged down to mono.
inline Waveform wav_decode(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw Error(ErrorCode::kInvalidAudio, "not a RIFF/WAVE file");
  size_t pos = 12;
  int channels = 0, bits = 0, rate = 0;
  bool have_fmt = false;
  Waveform wave;
  bool have_data = false;
  while (pos + 8 <= bytes.size()) {
    const uint8_t* p = bytes.data() + pos;
    uint32_t chunk_size = detail::get_u32(p + 4);
    size_t body = pos + 8;
    if (body + chunk_size > bytes.size())
      throw Error(ErrorCode::kInvalidAudio, "truncated WAV chunk");
    if (std::memcmp(p, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw Error(ErrorCode::kInvalidAudio, "short fmt chunk");
      uint16_t format = detail::get_u16(bytes.data() + body);
      channels = detail::get_u16(bytes.data() + body + 2);
      rate = static_cast<int>(detail::get_u32(bytes.data() + body + 4));
      bits = detail::get_u16(bytes.data() + body + 14);
      if (format != 1 || bits != 16)
        throw Error(ErrorCode::kInvalidAudio, "only 16-bit PCM is supported");
      if (channels < 1) throw Error(ErrorCode::kInvalidAudio, "no channels");
      have_fmt = true;
    } else if (std::memcmp(p, "data", 4) == 0) {
      if (!have_fmt) throw Error(ErrorCode::kInvalidAudio, "data before fmt");
      size_t n_frames = chunk_size / (2 * channels);
      wave.sample_rate = rate;
      wave.samples.resize(n_frames);
      for (size_t i = 0; i < n_frames; ++i) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
          auto raw = static_cast<int16_t>(
              detail::get_u16(bytes.data() + body + (i * channels + c) * 2));
          acc += static_cast<double>(raw) / 32768.0;
        }
        wave.samples[i] = acc / channels;
      }
      have_data = true;
    }
    pos = body + chunk_size + (chunk_size & 1);
  }
  if (!have_data) throw Error(ErrorCode::kInvalidAudio, "WAV has no data chunk");
  return wave;
}

inline Waveform wav_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::kIo, "cannot open for read: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return wav_decode(bytes);
}

/// Windowed-sinc resampler. Kernel weights are renormalized per output sample
/// so constant signals survive exactly.
inline Waveform resample(const Waveform& wave, int target_rate) {
  if (target_rate <= 0) throw Error(ErrorCode::kContract, "bad target rate");
  if (wave.sample_rate == target_rate) return wave;
  const int kHalfWidth = 32;
  double ratio = static_cast<double>(target_rate) / wave.sample_rate;
  double cutoff = std::min(1.0, ratio);  // relative to source Nyquist
  size_t out_n = static_cast<size_t>(std::floor(wave.samples.size() * ratio));
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(out_n);
  for (size_t j = 0; j < out_n; ++j) {
    double center = static_cast<double>(j) / ratio;
    int lo = static_cast<int>(std::ceil(center - kHalfWidth / cutoff));
    int hi = static_cast<int>(std::floor(center + kHalfWidth / cutoff));
    lo = std::max(lo, 0);
    hi = std::min(hi, static_cast<int>(wave.samples.size()) - 1);
    double acc = 0.0, wsum = 0.0;
    for (int i = lo; i <= hi; ++i) {
      double t = (i - center) * cutoff;
      double sinc = t == 0.0 ? 1.0 : std::sin(M_PI * t) / (M_PI * t);
      double u = t / kHalfWidth;
      double win = std::abs(u) >= 1.0 ? 0.0 : 0.5 * (1.0 + std::cos(M_PI * u));
      double w = sinc * win;
      acc += w * wave.samples[i];
      wsum += w;
    }
    out.samples[j] = wsum != 0.0 ? acc / wsum : 0.0;
  }
  return out;
}

}  // namespace earkit::audio
