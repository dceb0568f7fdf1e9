// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "diffmark/audio.hpp"
#include "diffmark/fft.hpp"
#include "diffmark/tensor.hpp"

namespace diffmark {

// Project-wide spectral analysis settings. The same config feeds training
// losses, conditioning and metrics; checkpoints embed its fingerprint so
// drift is caught at load time.
struct FeatureConfig {
  int sample_rate = kPipelineRate;
  int fft_size = 1024;
  int hop_length = 256;
  int win_length = 1024;
  int mel_bins = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;

  int bins() const { return fft_size / 2 + 1; }
  // Center-padded framing: fft_size/2 zeros on both sides.
  int frames(int n_samples) const { return n_samples / hop_length + 1; }
  std::string canonical() const;
  std::uint64_t fingerprint() const;
  bool operator==(const FeatureConfig&) const = default;
};

struct MelSpectrogram {
  Eigen::MatrixXd frames;  // mel_bins x n_frames, linear magnitude domain
  int mel_bins = 0;
  int hop_length = 0;
  int win_length = 0;
  int n_samples = 0;  // source length; 0 when unknown
};

struct StftMagnitude {
  Eigen::MatrixXd bins;  // (fft/2+1) x n_frames
  int fft_size = 0;
  int hop_length = 0;
};

// Precomputed window / FFT / filterbank tables for one config.
class FeaturePlan {
 public:
  explicit FeaturePlan(const FeatureConfig& cfg);

  const FeatureConfig& config() const { return cfg_; }
  const std::vector<double>& window() const { return window_; }
  const FftPlan& fft() const { return fft_; }
  // mel filterbank, row-major (mel_bins x bins)
  const std::vector<double>& mel_fb() const { return mel_fb_; }
  // orthonormal DCT-II, row-major (order x mel_bins)
  std::vector<double> dct_rows(int order) const;

  // Hz -> mel-bin index of the filter whose center is nearest.
  int nearest_mel_bin(double hz) const;

 private:
  FeatureConfig cfg_;
  std::vector<double> window_;
  FftPlan fft_;
  std::vector<double> mel_fb_;
  std::vector<double> mel_centers_hz_;
};

// Shared plan cache (configs are few; plans are immutable).
const FeaturePlan& plan_for(const FeatureConfig& cfg);

// Plain (non-graph) extractors: pure deterministic functions.
StftMagnitude stft_magnitude(const SpeechClip& clip, const FeatureConfig& cfg);
MelSpectrogram mel_spectrogram(const SpeechClip& clip, const FeatureConfig& cfg);
// Per-frame cepstra (orthonormal DCT-II of floored log mel), n_frames columns.
Eigen::MatrixXd mel_cepstra(const SpeechClip& clip, int order, const FeatureConfig& cfg);

// Graph ops sharing the same kernels, with exact adjoints, so feature
// losses participate in gradient flow. Input (b,1,L); outputs
// (b,bins,frames) / (b,mel,frames).
Node* stft_mag_op(Graph& g, Node* x, const FeatureConfig& cfg);
Node* mel_op(Graph& g, Node* x, const FeatureConfig& cfg);

// Serialization of mel conditioning features (binary: magic + header +
// float64 data, row-major mel_bins x frames).
void save_mel(const std::string& path, const MelSpectrogram& mel, const FeatureConfig& cfg);
MelSpectrogram load_mel(const std::string& path, const FeatureConfig& cfg);

}  // namespace diffmark
