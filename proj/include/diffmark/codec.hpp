// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diffmark/audio.hpp"
#include "diffmark/features.hpp"
#include "diffmark/nn.hpp"
#include "diffmark/tensor.hpp"

namespace diffmark {

// Fixed-length binary payload; the unit of content/user identity.
struct WatermarkMessage {
  std::vector<std::uint8_t> bits;  // each 0 or 1
  int length() const { return int(bits.size()); }
  std::string to_hex() const;      // MSB-first packing
  static WatermarkMessage from_hex(const std::string& hex, int l);
  static WatermarkMessage random(int l, Rng& rng);
  bool operator==(const WatermarkMessage&) const = default;
};

// Soft decoder output plus its thresholded bits.
struct DecodedMessage {
  std::vector<double> probabilities;  // in [0,1]
  std::vector<std::uint8_t> hard_bits;
  int length() const { return int(probabilities.size()); }
};

DecodedMessage threshold_probs(const std::vector<double>& probs);

// Payload sizes the pipeline is validated for (bits per 1 s clip).
bool is_supported_payload(int l);

struct CodecBuildConfig {
  int payload_bits = 100;
  int input_length = 22050;
  int dense_hidden = 512;
  // SRNet downsampling widths; the upsampling path mirrors them.
  std::vector<int> encoder_channels = {32, 64, 128, 256};
  // TGCN widths; the last one fixes the flattened feature length.
  std::vector<int> decoder_channels = {8, 12, 16, 24, 32, 48, 64};
  std::uint64_t feature_fingerprint = 0;
  std::uint64_t seed = 1;
};

class EncoderParams {
 public:
  EncoderParams() = default;
  ParamStore store;
  CodecBuildConfig cfg;
  std::vector<int> down_lengths;  // input length at each down level (incl. L)

  nlohmann::json architecture() const;
  std::string describe() const;
};

class DecoderParams {
 public:
  DecoderParams() = default;
  ParamStore store;
  CodecBuildConfig cfg;
  std::vector<int> layer_lengths;  // temporal length after each TGCN
  int flat_features = 0;

  nlohmann::json architecture() const;
  std::string describe() const;
};

// Builders (seed-deterministic initialization).
EncoderParams build_encoder(const CodecBuildConfig& cfg);
DecoderParams build_decoder(const CodecBuildConfig& cfg);

// Graph-level forwards shared by inference and the trainers.
// cover: (b,1,L); msg: (b,l,1) with 0/1 values. Returns watermarked (b,1,L).
Node* encoder_forward(Graph& g, EncoderParams& enc, Node* cover, Node* msg);
// clip: (b,1,L). Returns probabilities (b,l,1).
Node* decoder_forward(Graph& g, DecoderParams& dec, Node* clip, bool bn_training);

// Convenience single-clip entry points (deterministic, no sampling).
SpeechClip encode(EncoderParams& enc, const SpeechClip& cover,
                  const WatermarkMessage& message);
DecodedMessage decode(DecoderParams& dec, const SpeechClip& clip);

// Checkpoint I/O. Load validates format version, feature fingerprint and
// the architecture descriptor against a rebuilt network.
void save_encoder(const std::string& path, const EncoderParams& enc);
void save_decoder(const std::string& path, const DecoderParams& dec);
EncoderParams load_encoder(const std::string& path,
                           std::optional<std::uint64_t> expect_fingerprint = {});
DecoderParams load_decoder(const std::string& path,
                           std::optional<std::uint64_t> expect_fingerprint = {});

}  // namespace diffmark
