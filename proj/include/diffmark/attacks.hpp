// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffmark/audio.hpp"
#include "diffmark/rng.hpp"
#include "diffmark/tensor.hpp"

namespace diffmark {

struct AttackValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class AttackKind {
  gaussian_noise,
  pink_noise,
  lowpass,
  bandpass,
  suppress_front,
  suppress_behind,
  echo,
  time_stretch,
  dither,
  identity,
};

const char* attack_kind_name(AttackKind k);

// One waveform distortion. Length-preserving for every kind (time
// stretch is a stretch/restore round trip). Stochastic kinds are
// deterministic given `seed`.
struct AttackSpec {
  AttackKind kind = AttackKind::identity;
  double snr_db = 20.0;     // gaussian_noise
  double std = 0.5;         // pink_noise: amplitude of unit-RMS pink noise
  double cutoff_hz = 3000;  // lowpass
  double low_hz = 500;      // bandpass
  double high_hz = 8000;    // bandpass
  double fraction = 0.5;    // suppression
  double gain = 0.0;        // suppression
  double delay_s = 0.1;     // echo
  double decay = 0.5;       // echo
  double factor = 2.0;      // time_stretch
  std::uint64_t seed = 0;

  void validate(int sample_rate) const;
  std::string to_string() const;  // mini-grammar, parseable
  std::string label() const;      // short benchmark-table label
  static AttackSpec parse(const std::string& text);
};

struct CompoundAttack {
  std::vector<AttackSpec> stages;  // applied left to right, 1..4 stages
  void validate(int sample_rate) const;
  std::string to_string() const;
  static CompoundAttack parse(const std::string& text);  // '|' chaining
};

SpeechClip apply(const AttackSpec& attack, const SpeechClip& clip);
SpeechClip apply_compound(const CompoundAttack& c, const SpeechClip& clip);

// Training-time noise layer: one uniformly drawn attack per example.
SpeechClip noise_layer_sample(Rng& rng, const std::vector<AttackSpec>& config,
                              const SpeechClip& clip);

// Graph version used by the trainers: draws independently per batch row,
// forwards through the attack and backpropagates either the exact adjoint
// (filters, suppression, echo), identity (additive noise) or a
// straight-through estimate (dither, stretch).
Node* noise_layer_op(Graph& g, Node* x, const std::vector<AttackSpec>& config,
                     Rng& rng, int sample_rate,
                     std::vector<int>* chosen = nullptr);

// Exposed for tests: raw vector transform at a given rate.
std::vector<double> apply_vec(const AttackSpec& spec, const std::vector<double>& x,
                              int sample_rate);

// Unit-RMS pink noise (1/f power spectrum), deterministic per seed.
std::vector<double> pink_noise_unit(std::size_t n, int sample_rate, std::uint64_t seed);

// Time stretch by `factor` and restore, both via windowed-sinc
// interpolation (playback-speed change). Output length ~= input length
// (the attack wrapper pads/trims exactly).
std::vector<double> time_stretch_roundtrip(const std::vector<double>& x, double factor);

double measure_snr_db(const std::vector<double>& clean, const std::vector<double>& noisy);

}  // namespace diffmark
