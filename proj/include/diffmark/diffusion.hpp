// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "diffmark/codec.hpp"
#include "diffmark/features.hpp"
#include "diffmark/nn.hpp"
#include "diffmark/tensor.hpp"

namespace diffmark {

// Forward-process variance schedule plus everything derived from it.
struct NoiseSchedule {
  std::vector<double> betas;       // beta_t, t = 1..T (index 0 = t=1)
  std::vector<double> alphas;      // 1 - beta_t
  std::vector<double> alpha_bars;  // prod alphas
  std::vector<double> sigmas;      // per-step sampling noise scale delta_t
  int T = 0;

  double alpha_bar_prev(int t) const {  // alpha_bar_{t-1}, with alpha_bar_0 = 1
    return t <= 1 ? 1.0 : alpha_bars[t - 2];
  }
};

// Linear beta interpolation; validates monotonicity and range.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end);
// Geometric sub-schedule used for fast sampling and fine-tuning.
NoiseSchedule make_fast_schedule(int steps, double beta_start, double beta_end);
// Continuous training-schedule index per fast step (sqrt-alpha_bar
// alignment), used for the step embedding. Index s (1-based) -> t*.
std::vector<double> aligned_steps(const NoiseSchedule& train, const NoiseSchedule& fast);

struct SamplerConfig {
  enum class Mode { train_full, fast };
  Mode mode = Mode::fast;
  int inference_steps = 6;
  int injection_step = 3;
  std::uint64_t seed = 0;
  // Output length; 0 derives the longest length consistent with the mel.
  int length = 0;
  double fast_beta_end = 0.5;
};

struct VocoderBuildConfig {
  int residual_channels = 64;
  int layers = 10;
  int dilation_cycle = 10;  // dilations 1,2,4,... within a cycle
  int cond_channels = 32;
  int emb_dim = 128;
  int emb_hidden = 512;
  int schedule_steps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.05;
  std::uint64_t feature_fingerprint = 0;
  std::uint64_t seed = 1;
};

class VocoderParams {
 public:
  ParamStore store;
  VocoderBuildConfig cfg;
  NoiseSchedule schedule;  // training schedule
  int mel_bins = 80;
  int hop = 256;
  int up_stride = 16;

  nlohmann::json architecture() const;
  std::string describe() const;
};

VocoderParams build_vocoder(const VocoderBuildConfig& cfg, const FeatureConfig& feat);

// Graph builders ----------------------------------------------------------
// mel: (b, mel_bins, F) -> conditioner (b, cond_channels, out_len).
Node* vocoder_conditioner(Graph& g, VocoderParams& voc, Node* mel, int out_len);
// One noise-prediction pass. t_embed holds one (possibly fractional)
// schedule index per batch row.
Node* vocoder_eps(Graph& g, VocoderParams& voc, Node* x,
                  const std::vector<double>& t_embed, Node* cond);

// Value-level ops ----------------------------------------------------------
// sqrt(abar_t) s0 + sqrt(1-abar_t) eps
std::vector<double> q_sample(const NoiseSchedule& s, const std::vector<double>& s0,
                             int t, const std::vector<double>& eps);
// Single reverse step at t given the model's noise estimate.
std::vector<double> p_step_from_eps(const NoiseSchedule& s,
                                    const std::vector<double>& s_t, int t,
                                    const std::vector<double>& eps_hat,
                                    const std::vector<double>& z);
// Full reverse step including the model forward.
std::vector<double> p_step(VocoderParams& voc, const NoiseSchedule& s,
                           const std::vector<double>& s_t, int t,
                           const MelSpectrogram& c, const std::vector<double>& z);

SpeechClip synthesize(VocoderParams& voc, const MelSpectrogram& c,
                      const SamplerConfig& cfg);
// Watermark-injected sampling: at t = injection_step the latent is
// multiplied elementwise by E(ref, message); ref is s0_ref when given,
// otherwise the one-shot clean estimate at that step.
SpeechClip synthesize_watermarked(VocoderParams& voc, const MelSpectrogram& c,
                                  EncoderParams& enc, const WatermarkMessage& message,
                                  const SamplerConfig& cfg,
                                  const SpeechClip* s0_ref = nullptr);

// Noise-prediction training objective: mean over elements and batch of
// ||eps - eps_theta(q_sample(s0, t, eps), t, c)||^2 with t ~ U{1..T}.
double ddpm_pretrain_loss(VocoderParams& voc, const std::vector<SpeechClip>& s0,
                          const std::vector<MelSpectrogram>& mels, Rng& rng,
                          bool backprop);

// Checkpoints.
void save_vocoder(const std::string& path, const VocoderParams& voc);
VocoderParams load_vocoder(const std::string& path,
                           std::optional<std::uint64_t> expect_fingerprint = {});

}  // namespace diffmark
