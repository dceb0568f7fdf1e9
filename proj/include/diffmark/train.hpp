// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "diffmark/attacks.hpp"
#include "diffmark/codec.hpp"
#include "diffmark/diffusion.hpp"
#include "diffmark/features.hpp"

namespace diffmark {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class TrainStage { pretrain_codec, pretrain_vocoder, wgft };
const char* train_stage_name(TrainStage s);

struct TrainConfig {
  TrainStage stage = TrainStage::pretrain_codec;
  int epochs = 40;
  int batch_size = 16;
  double learning_rate = 2e-4;

  // Stage-I weights: watermark first, fidelity switched on once the
  // per-bit BCE drops below switch_threshold.
  double gamma_w = 1.0;
  double gamma_mel = 0.9;
  double gamma_mag = 0.1;
  // Stage-II weights.
  double lambda_speech = 1.0;
  double lambda_w = 1.0;
  double psi_mel = 0.2;
  double psi_mag = 0.8;
  double switch_threshold = 0.1;  // per-bit BCE

  double grad_clip = 1.0;
  double weight_decay = 0.01;  // stage II (decoupled)
  std::vector<AttackSpec> noise_layer;  // stage I; empty -> identity only
  std::uint64_t seed = 1;

  // Stage pretrain_vocoder: train on random crops of this many seconds.
  double crop_seconds = 0.25;
  int steps_per_epoch = 0;  // 0 -> derived from corpus/batch

  // Stage wgft sampler settings.
  int inference_steps = 6;
  int injection_step = 3;
  double fast_beta_end = 0.5;

  FeatureConfig features;
  CodecBuildConfig codec;        // stage pretrain_codec
  VocoderBuildConfig vocoder;    // stage pretrain_vocoder
};

struct EpochStats {
  int epoch = 0;
  double loss_w = 0;
  double loss_mel = 0;
  double loss_mag = 0;
  double loss_speech = 0;
  double acc_clean = 0;
  double acc_attacked = 0;
  double mel_ssim_val = 0;
  bool fidelity_on = false;
  double seconds = 0;
};

struct TrainReport {
  TrainStage stage = TrainStage::pretrain_codec;
  std::vector<EpochStats> epochs;
  void write_csv(const std::string& path) const;
  nlohmann::json summary() const;
};

// Per-batch pseudorandom message pool, regenerated each epoch; the same
// message is shared by every sample in a batch and pools are free of
// within-epoch repeats by construction.
struct MessageSchedule {
  std::uint64_t seed = 1;
  int payload_bits = 100;
};
std::vector<WatermarkMessage> next_messages(const MessageSchedule& schedule, int epoch,
                                            int n_batches);

// Loss helpers (value level; the trainers use the graph equivalents).
double loss_bce(const std::vector<double>& probabilities, const WatermarkMessage& message);
double loss_mel(const SpeechClip& a, const SpeechClip& b, const FeatureConfig& cfg);
double loss_stft_mag(const SpeechClip& a, const SpeechClip& b, const FeatureConfig& cfg);

using ProgressFn = std::function<void(const EpochStats&)>;

struct CodecTrainResult {
  EncoderParams encoder;
  DecoderParams decoder;
  TrainReport report;
};
CodecTrainResult pretrain_codec(const std::vector<SpeechClip>& corpus,
                                const TrainConfig& cfg, ProgressFn progress = {});

struct VocoderTrainResult {
  VocoderParams vocoder;
  TrainReport report;
};
VocoderTrainResult pretrain_vocoder(const std::vector<SpeechClip>& corpus,
                                    const TrainConfig& cfg, ProgressFn progress = {});

// Waveform-guided fine-tuning: encoder/decoder frozen, vocoder trained
// through the full fast-schedule sampling loop.
VocoderTrainResult wgft_finetune(VocoderParams vocoder, EncoderParams& encoder,
                                 DecoderParams& decoder,
                                 const std::vector<SpeechClip>& corpus,
                                 const TrainConfig& cfg, ProgressFn progress = {});

}  // namespace diffmark
