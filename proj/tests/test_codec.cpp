// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "diffmark/codec.hpp"
#include "diffmark/corpus.hpp"
#include "diffmark/metrics.hpp"

using namespace diffmark;

namespace {

CodecBuildConfig small_cfg(int l = 16, int L = 4096) {
  CodecBuildConfig c;
  c.payload_bits = l;
  c.input_length = L;
  c.dense_hidden = 32;
  c.encoder_channels = {4, 6, 8, 12};
  c.decoder_channels = {4, 4, 6, 6, 8, 8, 8};
  c.seed = 7;
  return c;
}

std::filesystem::path tmp_dir() {
  auto p = std::filesystem::temp_directory_path() / "diffmark_codec_tests";
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("full-size build matches the published layer geometry") {
  CodecBuildConfig cfg;
  cfg.payload_bits = 100;
  cfg.input_length = 22050;
  DecoderParams dec = build_decoder(cfg);
  // seven stride-2 convs: floor((n+2-3)/2)+1 applied from 22050
  std::vector<int> expect;
  int n = 22050;
  for (int i = 0; i < 7; ++i) {
    n = (n + 2 - 3) / 2 + 1;
    expect.push_back(n);
  }
  CHECK(dec.layer_lengths == expect);
  CHECK(dec.layer_lengths.back() == 173);
  CHECK(dec.flat_features == 173 * cfg.decoder_channels.back());

  EncoderParams enc = build_encoder(cfg);
  // down-block temporal lengths from the conv length formula
  std::vector<int> down{22050};
  n = 22050;
  for (std::size_t i = 0; i < 4; ++i) {
    const int pad = (i == 3) ? 1 : 2;
    n = (n + 2 * pad - 3) / 2 + 1;
    down.push_back(n);
  }
  CHECK(enc.down_lengths == down);
}

TEST_CASE("encode produces finite output of the right length; deterministic") {
  CodecBuildConfig cfg = small_cfg();
  EncoderParams enc = build_encoder(cfg);
  SpeechClip cover = synth_speech_clip(3, double(cfg.input_length) / kPipelineRate);
  cover.samples.resize(cfg.input_length);
  Rng rng(5);
  WatermarkMessage msg = WatermarkMessage::random(16, rng);

  SpeechClip wm1 = encode(enc, cover, msg);
  SpeechClip wm2 = encode(enc, cover, msg);
  REQUIRE(wm1.size() == std::size_t(cfg.input_length));
  CHECK(wm1.samples == wm2.samples);  // bitwise determinism
  for (double v : wm1.samples) CHECK(std::isfinite(v));
}

TEST_CASE("untrained encoder starts as the identity (zero-init output conv)") {
  CodecBuildConfig cfg = small_cfg();
  EncoderParams enc = build_encoder(cfg);
  SpeechClip cover = synth_speech_clip(4, double(cfg.input_length) / kPipelineRate);
  cover.samples.resize(cfg.input_length);
  Rng rng(5);
  SpeechClip wm = encode(enc, cover, WatermarkMessage::random(16, rng));
  double diff = 0;
  for (std::size_t i = 0; i < wm.size(); ++i)
    diff = std::max(diff, std::fabs(wm.samples[i] - cover.samples[i]));
  CHECK(diff == 0.0);
}

TEST_CASE("decode yields probabilities in [0,1], finite on all-zero input") {
  CodecBuildConfig cfg = small_cfg();
  DecoderParams dec = build_decoder(cfg);
  SpeechClip zero;
  zero.samples.assign(cfg.input_length, 0.0);
  DecodedMessage d = decode(dec, zero);
  REQUIRE(d.length() == 16);
  for (double p : d.probabilities) {
    CHECK(std::isfinite(p));
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  for (std::size_t i = 0; i < d.probabilities.size(); ++i)
    CHECK(d.hard_bits[i] == (d.probabilities[i] >= 0.5 ? 1 : 0));
}

TEST_CASE("chance-level accuracy before training") {
  CodecBuildConfig cfg = small_cfg();
  EncoderParams enc = build_encoder(cfg);
  DecoderParams dec = build_decoder(cfg);
  Rng rng(11);
  double acc = 0;
  const int trials = 120;
  for (int i = 0; i < trials; ++i) {
    SpeechClip cover = synth_speech_clip(1000 + i, double(cfg.input_length) / kPipelineRate);
    cover.samples.resize(cfg.input_length);
    WatermarkMessage msg = WatermarkMessage::random(16, rng);
    acc += bit_accuracy(decode(dec, encode(enc, cover, msg)), msg);
  }
  acc /= trials;
  CHECK(acc > 0.4);
  CHECK(acc < 0.6);
}

TEST_CASE("builds are seed-deterministic") {
  CodecBuildConfig cfg = small_cfg();
  EncoderParams a = build_encoder(cfg);
  EncoderParams b = build_encoder(cfg);
  CHECK(a.store.param_count() == b.store.param_count());
  CHECK(b.store.equals_snapshot(a.store.snapshot()));
  cfg.seed = 8;
  EncoderParams c = build_encoder(cfg);
  CHECK_FALSE(c.store.equals_snapshot(a.store.snapshot()));
}

TEST_CASE("shape and length mismatches are rejected") {
  CodecBuildConfig cfg = small_cfg();
  EncoderParams enc = build_encoder(cfg);
  DecoderParams dec = build_decoder(cfg);
  Rng rng(3);
  SpeechClip wrong;
  wrong.samples.assign(cfg.input_length + 1, 0.0);
  CHECK_THROWS_AS(encode(enc, wrong, WatermarkMessage::random(16, rng)),
                  std::invalid_argument);
  SpeechClip ok;
  ok.samples.assign(cfg.input_length, 0.0);
  CHECK_THROWS_AS(encode(enc, ok, WatermarkMessage::random(17, rng)),
                  std::invalid_argument);
  CHECK_THROWS_AS(decode(dec, wrong), std::invalid_argument);

  CHECK_THROWS_AS(build_encoder({.payload_bits = 0}), std::invalid_argument);
  CodecBuildConfig tiny = small_cfg();
  tiny.input_length = 100;  // < 2^7
  CHECK_THROWS_AS(build_decoder(tiny), std::invalid_argument);
}

TEST_CASE("shape invariance across payload/length grid") {
  for (auto [l, L] : std::vector<std::pair<int, int>>{{16, 2048}, {32, 4096}, {100, 4096}}) {
    CodecBuildConfig cfg = small_cfg(l, L);
    EncoderParams enc = build_encoder(cfg);
    DecoderParams dec = build_decoder(cfg);
    SpeechClip cover;
    cover.samples.assign(L, 0.1);
    Rng rng(l);
    WatermarkMessage msg = WatermarkMessage::random(l, rng);
    DecodedMessage d = decode(dec, encode(enc, cover, msg));
    CHECK(d.length() == l);
  }
}

TEST_CASE("gradient of BCE through encode->decode matches finite differences") {
  // miniature build, < 5k parameters, randomized away from the zero init
  CodecBuildConfig cfg;
  cfg.payload_bits = 4;
  cfg.input_length = 512;
  cfg.dense_hidden = 8;
  cfg.encoder_channels = {2, 2, 3, 3};
  cfg.decoder_channels = {2, 2, 2, 3, 3, 3, 4};
  cfg.seed = 13;
  EncoderParams enc = build_encoder(cfg);
  DecoderParams dec = build_decoder(cfg);
  CHECK(enc.store.param_count() + dec.store.param_count() < 12000);
  Rng rng(17);
  for (Parameter* p : enc.store.all())
    for (auto& v : p->value) v = 0.2 * rng.normal();  // wake the zero-init layer

  std::vector<Scalar> cover(cfg.input_length);
  for (auto& v : cover) v = 0.3 * rng.normal();
  std::vector<Scalar> msg_bits = {1, 0, 1, 1};

  auto loss_value = [&]() {
    Graph g;
    Node* cov = g.input(Shape{1, 1, cfg.input_length}, cover);
    Node* msg = g.input(Shape{1, 4, 1}, msg_bits);
    Node* wm = encoder_forward(g, enc, cov, msg);
    Node* probs = decoder_forward(g, dec, wm, /*bn_training=*/true);
    return g.bce_sum(probs, msg_bits)->data[0];
  };

  enc.store.zero_grad();
  dec.store.zero_grad();
  {
    Graph g;
    Node* cov = g.input(Shape{1, 1, cfg.input_length}, cover);
    Node* msg = g.input(Shape{1, 4, 1}, msg_bits);
    Node* wm = encoder_forward(g, enc, cov, msg);
    Node* probs = decoder_forward(g, dec, wm, true);
    Node* loss = g.bce_sum(probs, msg_bits);
    g.backward(loss);
  }

  double grad_norm = 0;
  for (Parameter* p : enc.store.all())
    for (double v : p->grad) grad_norm += v * v;
  CHECK(grad_norm > 0.0);  // nonzero gradient reaches the encoder

  Rng pick(19);
  std::vector<Parameter*> params = enc.store.all();
  int checked = 0;
  for (int trial = 0; trial < 24 && checked < 10; ++trial) {
    Parameter* p = params[pick.uniform_int(params.size())];
    if (p->value.empty()) continue;
    const std::size_t i = pick.uniform_int(p->value.size());
    const double h = 1e-4;
    const double orig = p->value[i];
    p->value[i] = orig + h;
    const double fp = loss_value();
    p->value[i] = orig - h;
    const double fm = loss_value();
    p->value[i] = orig;
    const double fd = (fp - fm) / (2 * h);
    if (std::fabs(fd) < 1e-7) continue;  // numerically silent coordinate
    const double an = p->grad[i];
    CHECK(std::fabs(fd - an) / std::max(std::fabs(fd), std::fabs(an)) < 1e-3);
    ++checked;
  }
  CHECK(checked >= 5);
}

TEST_CASE("checkpoint round trip, manifest validation, corruption") {
  CodecBuildConfig cfg = small_cfg();
  EncoderParams enc = build_encoder(cfg);
  Rng rng(23);
  for (Parameter* p : enc.store.all())
    for (auto& v : p->value) v = rng.normal();
  const std::string path = (tmp_dir() / "enc.ckpt").string();
  save_encoder(path, enc);

  EncoderParams back = load_encoder(path);
  CHECK(back.store.equals_snapshot(enc.store.snapshot()));  // bitwise equal arrays
  CHECK(back.cfg.payload_bits == 16);

  // fingerprint mismatch
  CHECK_THROWS_AS(load_encoder(path, std::uint64_t(0xDEAD)), CheckpointError);

  // decoder loader refuses an encoder checkpoint
  CHECK_THROWS_AS(load_decoder(path), CheckpointError);

  // truncation -> corrupt archive
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    bytes.resize(bytes.size() / 2);
    const std::string trunc = (tmp_dir() / "trunc.ckpt").string();
    std::ofstream out(trunc, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.close();
    CHECK_THROWS_AS(load_encoder(trunc), CheckpointError);
  }
  // bit flip -> crc failure
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    bytes[bytes.size() / 2] ^= 0x40;
    const std::string flip = (tmp_dir() / "flip.ckpt").string();
    std::ofstream out(flip, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.close();
    CHECK_THROWS_AS(load_encoder(flip), CheckpointError);
  }

  DecoderParams dec = build_decoder(cfg);
  const std::string dpath = (tmp_dir() / "dec.ckpt").string();
  save_decoder(dpath, dec);
  DecoderParams dback = load_decoder(dpath);
  CHECK(dback.store.equals_snapshot(dec.store.snapshot()));
}

TEST_CASE("message hex round trip") {
  Rng rng(29);
  for (int l : {16, 100, 5}) {
    WatermarkMessage m = WatermarkMessage::random(l, rng);
    WatermarkMessage back = WatermarkMessage::from_hex(m.to_hex(), l);
    CHECK(back == m);
  }
  CHECK(is_supported_payload(100));
  CHECK_FALSE(is_supported_payload(17));
}
