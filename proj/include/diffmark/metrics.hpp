// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <optional>
#include <string>

#include "diffmark/audio.hpp"
#include "diffmark/codec.hpp"
#include "diffmark/features.hpp"

namespace diffmark {

struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class PairKind {
  generated_vs_natural,
  watermarked_vs_generated,
  watermarked_vs_natural,
};

const char* pair_kind_name(PairKind k);

struct MetricReport {
  double stoi = 0;
  double ssim = 0;
  double mcd = 0;
  std::optional<double> acc;
  std::optional<double> pesq_external;  // merged from a sidecar, never computed
  PairKind pair_kind = PairKind::watermarked_vs_generated;
};

// Matching hard bits / payload length.
double bit_accuracy(const DecodedMessage& decoded, const WatermarkMessage& expected);

// Intelligibility proxy: one-third-octave band envelopes (15 bands from
// 150 Hz), correlated over 384 ms segments, averaged, clipped to [0,1].
// Reference-anchored; throws MetricError for a silent reference.
double stoi_proxy(const SpeechClip& reference, const SpeechClip& degraded,
                  const FeatureConfig& cfg);

// Structural similarity on jointly normalized log-mel images
// (11x11 Gaussian window, K1=0.01, K2=0.03).
double mel_ssim(const SpeechClip& a, const SpeechClip& b, const FeatureConfig& cfg);

// Mel-cepstral distortion in dB, coefficient 0 excluded.
double mcd(const SpeechClip& a, const SpeechClip& b, const FeatureConfig& cfg,
           int order = 13);

MetricReport metric_report(const SpeechClip& a, const SpeechClip& b,
                           const FeatureConfig& cfg, PairKind kind);

}  // namespace diffmark
