// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace diffmark {

constexpr int kPipelineRate = 22050;

// Mono waveform with its sample rate. All pipeline-internal clips are
// 22050 Hz, peak <= 1.0, and exactly segment_seconds * rate samples long.
struct SpeechClip {
  std::vector<double> samples;
  int sample_rate = kPipelineRate;

  std::size_t size() const { return samples.size(); }
  double duration() const { return double(samples.size()) / sample_rate; }
  double rms() const;
  double peak() const;
};

// Distinct error types so callers can tell I/O problems apart.
struct AudioError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FileMissingError : AudioError {
  using AudioError::AudioError;
};
struct MalformedWavError : AudioError {
  using AudioError::AudioError;
};
struct UnsupportedCodecError : AudioError {
  using AudioError::AudioError;
};

// Reads a PCM RIFF/WAVE file (8/16/24/32-bit int or 32-bit float,
// mono or stereo, 8-48 kHz), averages channels to mono, resamples to
// 22050 Hz with a windowed-sinc kernel and normalizes the peak to <= 1.
SpeechClip load_wav(const std::string& path);

// Writes mono 16-bit little-endian PCM at the clip's rate, clamping to
// [-1, 1] at quantization time.
void save_wav(const std::string& path, const SpeechClip& clip);

// Non-overlapping fixed-length segments; the trailing remainder shorter
// than one segment is discarded. A clip shorter than one segment yields
// an empty list.
std::vector<SpeechClip> segment(const SpeechClip& clip, double seconds);

// Windowed-sinc resampling (Hann window, 32-tap half-width, kernel
// renormalized per output sample). Anti-aliases when downsampling.
std::vector<double> resample(const std::vector<double>& in, int rate_in, int rate_out);

}  // namespace diffmark
