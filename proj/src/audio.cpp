// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace diffmark {

double SpeechClip::rms() const {
  if (samples.empty()) return 0.0;
  double acc = 0;
  for (double s : samples) acc += s * s;
  return std::sqrt(acc / samples.size());
}

double SpeechClip::peak() const {
  double p = 0;
  for (double s : samples) p = std::max(p, std::fabs(s));
  return p;
}

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
std::uint16_t rd_u16(const unsigned char* p) {
  return std::uint16_t(p[0]) | (std::uint16_t(p[1]) << 8);
}

}  // namespace

SpeechClip load_wav(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw FileMissingError("no such file: " + path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileMissingError("cannot open: " + path);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (raw.size() < 44 || std::memcmp(raw.data(), "RIFF", 4) != 0 ||
      std::memcmp(raw.data() + 8, "WAVE", 4) != 0)
    throw MalformedWavError("not a RIFF/WAVE file: " + path);

  std::size_t pos = 12;
  int format = -1, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  while (pos + 8 <= raw.size()) {
    const unsigned char* hdr = raw.data() + pos;
    std::uint32_t chunk_len = rd_u32(hdr + 4);
    if (pos + 8 + chunk_len > raw.size())
      chunk_len = std::uint32_t(raw.size() - pos - 8);  // tolerate sloppy writers
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw MalformedWavError("fmt chunk too short: " + path);
      format = rd_u16(hdr + 8);
      channels = rd_u16(hdr + 10);
      rate = rd_u32(hdr + 12);
      bits = rd_u16(hdr + 22);
      if (format == 0xFFFE && chunk_len >= 40)  // WAVE_FORMAT_EXTENSIBLE
        format = rd_u16(hdr + 32);
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = hdr + 8;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);
  }
  if (format < 0 || !data) throw MalformedWavError("missing fmt/data chunk: " + path);
  if (format != 1 && format != 3)
    throw UnsupportedCodecError("non-PCM wav (format tag " + std::to_string(format) +
                                "): " + path);
  if (channels < 1 || channels > 2)
    throw UnsupportedCodecError("unsupported channel count: " + path);
  if (rate < 8000 || rate > 48000)
    throw UnsupportedCodecError("unsupported sample rate: " + path);
  if (format == 3 && bits != 32)
    throw UnsupportedCodecError("unsupported float width: " + path);
  if (format == 1 && bits != 8 && bits != 16 && bits != 24 && bits != 32)
    throw UnsupportedCodecError("unsupported bit depth: " + path);

  const int bytes_per = bits / 8;
  const std::size_t frames = data_len / (std::size_t(bytes_per) * channels);
  std::vector<double> mono(frames, 0.0);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0;
    for (int ch = 0; ch < channels; ++ch) {
      const unsigned char* p = data + (i * channels + ch) * bytes_per;
      double v = 0;
      if (format == 3) {
        float fv;
        std::memcpy(&fv, p, 4);
        v = fv;
      } else if (bits == 8) {
        v = (double(p[0]) - 128.0) / 128.0;
      } else if (bits == 16) {
        // matches the 16-bit writer so a round trip stays within half an LSB
        std::int16_t s = std::int16_t(rd_u16(p));
        v = double(s) / 32767.0;
      } else if (bits == 24) {
        std::int32_t s = (std::int32_t(p[0]) << 8) | (std::int32_t(p[1]) << 16) |
                         (std::int32_t(p[2]) << 24);
        v = double(s >> 8) / 8388608.0;
      } else {
        std::int32_t s;
        std::memcpy(&s, p, 4);
        v = double(s) / 2147483648.0;
      }
      acc += v;
    }
    mono[i] = acc / channels;
  }

  SpeechClip clip;
  clip.sample_rate = kPipelineRate;
  clip.samples =
      (int(rate) == kPipelineRate) ? std::move(mono) : resample(mono, int(rate), kPipelineRate);
  double pk = clip.peak();
  if (pk > 1.0)
    for (auto& s : clip.samples) s /= pk;
  return clip;
}

void save_wav(const std::string& path, const SpeechClip& clip) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw AudioError("cannot write: " + path);
  const std::uint32_t n = std::uint32_t(clip.samples.size());
  const std::uint32_t data_len = n * 2;
  const std::uint32_t rate = std::uint32_t(clip.sample_rate);
  unsigned char hdr[44];
  std::memcpy(hdr, "RIFF", 4);
  std::uint32_t riff_len = 36 + data_len;
  std::memcpy(hdr + 4, &riff_len, 4);
  std::memcpy(hdr + 8, "WAVEfmt ", 8);
  std::uint32_t fmt_len = 16;
  std::memcpy(hdr + 16, &fmt_len, 4);
  std::uint16_t tag = 1, channels = 1, block = 2, bits = 16;
  std::memcpy(hdr + 20, &tag, 2);
  std::memcpy(hdr + 22, &channels, 2);
  std::memcpy(hdr + 24, &rate, 4);
  std::uint32_t byte_rate = rate * 2;
  std::memcpy(hdr + 28, &byte_rate, 4);
  std::memcpy(hdr + 32, &block, 2);
  std::memcpy(hdr + 34, &bits, 2);
  std::memcpy(hdr + 36, "data", 4);
  std::memcpy(hdr + 40, &data_len, 4);
  f.write(reinterpret_cast<char*>(hdr), 44);
  for (double s : clip.samples) {
    double c = std::clamp(s, -1.0, 1.0);
    std::int16_t q = std::int16_t(std::lround(c * 32767.0));
    f.write(reinterpret_cast<char*>(&q), 2);
  }
  if (!f) throw AudioError("short write: " + path);
}

std::vector<SpeechClip> segment(const SpeechClip& clip, double seconds) {
  if (seconds <= 0) throw std::invalid_argument("segment: seconds must be positive");
  const std::size_t seg = std::size_t(std::llround(seconds * clip.sample_rate));
  std::vector<SpeechClip> out;
  if (seg == 0) throw std::invalid_argument("segment: zero-length segment");
  for (std::size_t start = 0; start + seg <= clip.samples.size(); start += seg) {
    SpeechClip c;
    c.sample_rate = clip.sample_rate;
    c.samples.assign(clip.samples.begin() + start, clip.samples.begin() + start + seg);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<double> resample(const std::vector<double>& in, int rate_in, int rate_out) {
  if (rate_in == rate_out) return in;
  if (in.empty()) return {};
  const double ratio = double(rate_in) / double(rate_out);
  const double cutoff = std::min(1.0, double(rate_out) / double(rate_in));
  const int half = 32;  // taps per side, in input samples
  const std::size_t n_out = std::size_t(std::floor(double(in.size()) / ratio));
  std::vector<double> out(n_out, 0.0);
  for (std::size_t n = 0; n < n_out; ++n) {
    const double t = double(n) * ratio;
    const int m0 = int(std::floor(t)) - half + 1;
    const int m1 = int(std::floor(t)) + half;
    double acc = 0, wsum = 0;
    for (int m = m0; m <= m1; ++m) {
      const double x = t - double(m);
      double w = 0;
      if (std::fabs(x) < 1e-12) {
        w = cutoff;
      } else {
        const double a = M_PI * x * cutoff;
        w = cutoff * std::sin(a) / a;
      }
      // Hann window over the kernel support
      w *= 0.5 * (1.0 + std::cos(M_PI * x / (half + 1)));
      wsum += w;
      if (m >= 0 && m < int(in.size())) acc += w * in[std::size_t(m)];
    }
    out[n] = (wsum != 0.0) ? acc / wsum : 0.0;
  }
  return out;
}

}  // namespace diffmark
