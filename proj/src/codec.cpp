// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/codec.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace diffmark {

std::string WatermarkMessage::to_hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out;
  int acc = 0, nb = 0;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    acc = (acc << 1) | (bits[i] & 1);
    if (++nb == 4) {
      out.push_back(digits[acc]);
      acc = 0;
      nb = 0;
    }
  }
  if (nb > 0) out.push_back(digits[acc << (4 - nb)]);
  return out;
}

WatermarkMessage WatermarkMessage::from_hex(const std::string& hex, int l) {
  WatermarkMessage m;
  m.bits.reserve(l);
  for (char c : hex) {
    int v;
    if (c >= '0' && c <= '9') v = c - '0';
    else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
    else throw std::invalid_argument("bad hex digit in message");
    for (int b = 3; b >= 0; --b)
      if (int(m.bits.size()) < l) m.bits.push_back(std::uint8_t((v >> b) & 1));
  }
  if (int(m.bits.size()) < l) throw std::invalid_argument("hex message too short");
  m.bits.resize(l);
  return m;
}

WatermarkMessage WatermarkMessage::random(int l, Rng& rng) {
  WatermarkMessage m;
  m.bits.resize(l);
  for (auto& b : m.bits) b = std::uint8_t(rng.next_u64() & 1);
  return m;
}

DecodedMessage threshold_probs(const std::vector<double>& probs) {
  DecodedMessage d;
  d.probabilities = probs;
  d.hard_bits.resize(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i)
    d.hard_bits[i] = probs[i] >= 0.5 ? 1 : 0;
  return d;
}

bool is_supported_payload(int l) {
  static const int supported[] = {16, 32, 64, 100, 128, 200, 300, 400, 500};
  for (int s : supported)
    if (l == s) return true;
  return false;
}

namespace {

int down_len(int n, int pad) { return (n + 2 * pad - 3) / 2 + 1; }
int up_len(int m, int pad) { return (m - 1) * 2 - 2 * pad + 3 + 1; }
int tgcn_len(int n) { return (n + 2 * 1 - 3) / 2 + 1; }

void init_conv(Parameter& w, Parameter& b, int fan_in, Rng& rng) {
  init_uniform_fan_in(w, fan_in, rng);
  init_uniform_fan_in(b, fan_in, rng);
}

}  // namespace

nlohmann::json EncoderParams::architecture() const {
  nlohmann::json layers = nlohmann::json::array();
  layers.push_back({{"type", "fc"}, {"in", cfg.payload_bits}, {"out", cfg.dense_hidden}, {"act", "relu"}});
  layers.push_back({{"type", "fc"}, {"in", cfg.dense_hidden}, {"out", cfg.input_length}});
  const auto& ch = cfg.encoder_channels;
  int cin = 2;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    layers.push_back({{"type", "conv1d"}, {"in", cin}, {"out", ch[i]}, {"k", 3}, {"s", 2},
                      {"p", i + 1 == ch.size() ? 1 : 2}});
    cin = ch[i];
  }
  for (std::size_t i = ch.size(); i-- > 0;) {
    int cout = i == 0 ? ch[0] : ch[i - 1];
    layers.push_back({{"type", "tconv1d"}, {"in", cin}, {"out", cout}, {"k", 3}, {"s", 2},
                      {"p", i + 1 == ch.size() ? 1 : 2}, {"op", 1}});
    int skip = i == 0 ? 2 : ch[i - 1];
    layers.push_back({{"type", "conv1d"}, {"in", cout + skip},
                      {"out", i == 0 ? 1 : ch[i - 1]}, {"k", 3}, {"s", 1}, {"p", 1}});
    cin = i == 0 ? 1 : ch[i - 1];
  }
  return {{"dense_hidden", cfg.dense_hidden},
          {"payload_bits", cfg.payload_bits},
          {"input_length", cfg.input_length},
          {"channels", cfg.encoder_channels},
          {"residual", true},
          {"layers", layers}};
}

std::string EncoderParams::describe() const { return architecture().dump(2); }

nlohmann::json DecoderParams::architecture() const {
  nlohmann::json layers = nlohmann::json::array();
  int cin = 1;
  for (std::size_t i = 0; i < cfg.decoder_channels.size(); ++i) {
    layers.push_back({{"type", "tgcn"}, {"in", cin}, {"out", cfg.decoder_channels[i]},
                      {"k", 3}, {"s", 2}, {"p", 1}});
    cin = cfg.decoder_channels[i];
  }
  layers.push_back({{"type", "fc"}, {"in", flat_features}, {"out", cfg.dense_hidden}});
  layers.push_back({{"type", "fc"}, {"in", cfg.dense_hidden}, {"out", cfg.payload_bits},
                    {"act", "sigmoid"}});
  return {{"dense_hidden", cfg.dense_hidden},
          {"payload_bits", cfg.payload_bits},
          {"input_length", cfg.input_length},
          {"channels", cfg.decoder_channels},
          {"layers", layers}};
}

std::string DecoderParams::describe() const { return architecture().dump(2); }

EncoderParams build_encoder(const CodecBuildConfig& cfg) {
  if (cfg.payload_bits < 1) throw std::invalid_argument("build_encoder: l >= 1 required");
  if (cfg.input_length < 256)
    throw std::invalid_argument("build_encoder: input length >= 256 required");
  if (cfg.encoder_channels.size() != 4)
    throw std::invalid_argument("build_encoder: expects 4 downsampling widths");
  EncoderParams enc;
  enc.cfg = cfg;
  Rng rng(mix64(cfg.seed, 0xE1C0DE));

  auto& st = enc.store;
  init_uniform_fan_in(st.add("dense.fc1.w", Shape{cfg.dense_hidden, cfg.payload_bits, 1}),
                      cfg.payload_bits, rng);
  init_uniform_fan_in(st.add("dense.fc1.b", Shape{1, cfg.dense_hidden, 1}),
                      cfg.payload_bits, rng);
  init_uniform_fan_in(st.add("dense.fc2.w", Shape{cfg.input_length, cfg.dense_hidden, 1}),
                      cfg.dense_hidden, rng);
  init_uniform_fan_in(st.add("dense.fc2.b", Shape{1, cfg.input_length, 1}),
                      cfg.dense_hidden, rng);

  const auto& ch = cfg.encoder_channels;
  enc.down_lengths.push_back(cfg.input_length);
  int cin = 2, n = cfg.input_length;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    int pad = (i + 1 == ch.size()) ? 1 : 2;
    init_conv(st.add("down" + std::to_string(i) + ".w", Shape{ch[i], cin, 3}),
              st.add("down" + std::to_string(i) + ".b", Shape{1, ch[i], 1}), cin * 3, rng);
    n = down_len(n, pad);
    enc.down_lengths.push_back(n);
    cin = ch[i];
  }
  for (std::size_t i = ch.size(); i-- > 0;) {
    int cout = i == 0 ? ch[0] : ch[i - 1];
    init_conv(st.add("up" + std::to_string(i) + ".t.w", Shape{cin, cout, 3}),
              st.add("up" + std::to_string(i) + ".t.b", Shape{1, cout, 1}), cin * 3, rng);
    int skip = i == 0 ? 2 : ch[i - 1];
    int conv_out = i == 0 ? 1 : ch[i - 1];
    Parameter& cw = st.add("up" + std::to_string(i) + ".c.w",
                           Shape{conv_out, cout + skip, 3});
    Parameter& cb = st.add("up" + std::to_string(i) + ".c.b", Shape{1, conv_out, 1});
    if (i == 0) {
      // zero-init the layer that emits the additive perturbation: training
      // starts from an identity encoder
      init_zeros(cw);
      init_zeros(cb);
    } else {
      init_conv(cw, cb, (cout + skip) * 3, rng);
    }
    cin = conv_out;
  }
  return enc;
}

DecoderParams build_decoder(const CodecBuildConfig& cfg) {
  if (cfg.input_length < (1 << 7))
    throw std::invalid_argument("build_decoder: input length >= 128 required");
  if (cfg.decoder_channels.size() != 7)
    throw std::invalid_argument("build_decoder: expects 7 TGCN widths");
  DecoderParams dec;
  dec.cfg = cfg;
  Rng rng(mix64(cfg.seed, 0xDEC0DE));

  auto& st = dec.store;
  int cin = 1, n = cfg.input_length;
  for (int i = 0; i < 7; ++i) {
    int cout = cfg.decoder_channels[i];
    std::string base = "tgcn" + std::to_string(i);
    init_conv(st.add(base + ".lin.w", Shape{cout, cin, 3}),
              st.add(base + ".lin.b", Shape{1, cout, 1}), cin * 3, rng);
    init_conv(st.add(base + ".gate.w", Shape{cout, cin, 3}),
              st.add(base + ".gate.b", Shape{1, cout, 1}), cin * 3, rng);
    init_ones(st.add(base + ".bn.gamma", Shape{1, cout, 1}));
    init_zeros(st.add(base + ".bn.beta", Shape{1, cout, 1}));
    Parameter& rm = st.add(base + ".bn.running_mean", Shape{1, cout, 1});
    Parameter& rv = st.add(base + ".bn.running_var", Shape{1, cout, 1});
    init_zeros(rm);
    init_ones(rv);
    rm.frozen = true;  // state, never optimized
    rv.frozen = true;
    n = tgcn_len(n);
    dec.layer_lengths.push_back(n);
    cin = cout;
  }
  dec.flat_features = cin * n;
  init_uniform_fan_in(st.add("dense.fc1.w", Shape{cfg.dense_hidden, dec.flat_features, 1}),
                      dec.flat_features, rng);
  init_uniform_fan_in(st.add("dense.fc1.b", Shape{1, cfg.dense_hidden, 1}),
                      dec.flat_features, rng);
  init_uniform_fan_in(st.add("dense.fc2.w", Shape{cfg.payload_bits, cfg.dense_hidden, 1}),
                      cfg.dense_hidden, rng);
  init_uniform_fan_in(st.add("dense.fc2.b", Shape{1, cfg.payload_bits, 1}),
                      cfg.dense_hidden, rng);
  return dec;
}

Node* encoder_forward(Graph& g, EncoderParams& enc, Node* cover, Node* msg) {
  const auto& cfg = enc.cfg;
  if (cover->shape.c != 1 || cover->shape.l != cfg.input_length)
    throw std::invalid_argument("encoder_forward: cover length mismatch (got " +
                                std::to_string(cover->shape.l) + ", built for " +
                                std::to_string(cfg.input_length) + ")");
  if (msg->shape.c != cfg.payload_bits || msg->shape.l != 1)
    throw std::invalid_argument("encoder_forward: message length mismatch");
  auto& st = enc.store;

  Node* h = g.linear(msg, g.param(st.at("dense.fc1.w")), g.param(st.at("dense.fc1.b")));
  h = g.relu(h);
  Node* emb = g.linear(h, g.param(st.at("dense.fc2.w")), g.param(st.at("dense.fc2.b")));
  // (b, L, 1) -> (b, 1, L)
  Node* emb_cl = g.make(Shape{emb->shape.b, 1, cfg.input_length}, emb->needs_grad);
  std::memcpy(emb_cl->data, emb->data, emb->elems() * sizeof(Scalar));
  if (emb_cl->needs_grad)
    emb_cl->backprop = [emb_cl, emb](Graph&) {
      emb->accumulate(emb_cl->grad(), emb->elems());
    };

  Node* srnet_in = g.concat_c(cover, emb_cl);
  const auto& ch = cfg.encoder_channels;
  std::vector<Node*> down{srnet_in};
  Node* x = srnet_in;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    int pad = (i + 1 == ch.size()) ? 1 : 2;
    x = g.conv1d(x, g.param(st.at("down" + std::to_string(i) + ".w")),
                 g.param(st.at("down" + std::to_string(i) + ".b")), 2, pad);
    down.push_back(x);
  }
  for (std::size_t i = ch.size(); i-- > 0;) {
    int pad = (i + 1 == ch.size()) ? 1 : 2;
    x = g.conv_transpose1d(x, g.param(st.at("up" + std::to_string(i) + ".t.w")),
                           g.param(st.at("up" + std::to_string(i) + ".t.b")), 2, pad, 1);
    if (x->shape.l != down[i]->shape.l) x = g.trim_l(x, down[i]->shape.l);
    x = g.concat_c(x, down[i]);
    x = g.conv1d(x, g.param(st.at("up" + std::to_string(i) + ".c.w")),
                 g.param(st.at("up" + std::to_string(i) + ".c.b")), 1, 1);
  }
  return g.add(cover, x);  // residual reconstruction
}

Node* decoder_forward(Graph& g, DecoderParams& dec, Node* clip, bool bn_training) {
  const auto& cfg = dec.cfg;
  if (clip->shape.c != 1 || clip->shape.l != cfg.input_length)
    throw std::invalid_argument("decoder_forward: clip length mismatch (got " +
                                std::to_string(clip->shape.l) + ", built for " +
                                std::to_string(cfg.input_length) + ")");
  auto& st = dec.store;
  Node* x = clip;
  for (int i = 0; i < 7; ++i) {
    std::string base = "tgcn" + std::to_string(i);
    Node* lin = g.conv1d(x, g.param(st.at(base + ".lin.w")),
                         g.param(st.at(base + ".lin.b")), 2, 1);
    Node* gate = g.conv1d(x, g.param(st.at(base + ".gate.w")),
                          g.param(st.at(base + ".gate.b")), 2, 1);
    Parameter& rm = st.at(base + ".bn.running_mean");
    Parameter& rv = st.at(base + ".bn.running_var");
    Graph::BnStats stats;
    stats.running_mean = rm.value;
    stats.running_var = rv.value;
    gate = g.batchnorm(gate, g.param(st.at(base + ".bn.gamma")),
                       g.param(st.at(base + ".bn.beta")), &stats, bn_training);
    if (bn_training) {
      rm.value = stats.running_mean;
      rv.value = stats.running_var;
    }
    gate = g.sigmoid(gate);
    x = g.mul(lin, gate);
  }
  Node* flat = g.flatten(x);
  Node* h = g.linear(flat, g.param(st.at("dense.fc1.w")), g.param(st.at("dense.fc1.b")));
  h = g.linear(h, g.param(st.at("dense.fc2.w")), g.param(st.at("dense.fc2.b")));
  return g.sigmoid(h);
}

SpeechClip encode(EncoderParams& enc, const SpeechClip& cover,
                  const WatermarkMessage& message) {
  if (int(cover.size()) != enc.cfg.input_length)
    throw std::invalid_argument("encode: cover length mismatch");
  if (message.length() != enc.cfg.payload_bits)
    throw std::invalid_argument("encode: message length mismatch");
  Graph g;
  Node* cov = g.input(Shape{1, 1, enc.cfg.input_length}, cover.samples);
  std::vector<Scalar> mbits(message.bits.begin(), message.bits.end());
  Node* msg = g.input(Shape{1, enc.cfg.payload_bits, 1}, mbits);
  Node* out = encoder_forward(g, enc, cov, msg);
  SpeechClip wm;
  wm.sample_rate = cover.sample_rate;
  wm.samples.assign(out->data, out->data + out->elems());
  return wm;
}

DecodedMessage decode(DecoderParams& dec, const SpeechClip& clip) {
  if (int(clip.size()) != dec.cfg.input_length)
    throw std::invalid_argument("decode: clip length mismatch");
  Graph g;
  Node* in = g.input(Shape{1, 1, dec.cfg.input_length}, clip.samples);
  Node* probs = decoder_forward(g, dec, in, /*bn_training=*/false);
  std::vector<double> p(probs->data, probs->data + probs->elems());
  return threshold_probs(p);
}

namespace {

nlohmann::json codec_meta(const CodecBuildConfig& cfg, const nlohmann::json& arch) {
  return {{"payload_bits", cfg.payload_bits},
          {"input_length", cfg.input_length},
          {"dense_hidden", cfg.dense_hidden},
          {"encoder_channels", cfg.encoder_channels},
          {"decoder_channels", cfg.decoder_channels},
          {"feature_fingerprint", cfg.feature_fingerprint},
          {"seed", cfg.seed},
          {"architecture", arch}};
}

CodecBuildConfig cfg_from_manifest(const nlohmann::json& m) {
  CodecBuildConfig cfg;
  cfg.payload_bits = m.at("payload_bits").get<int>();
  cfg.input_length = m.at("input_length").get<int>();
  cfg.dense_hidden = m.at("dense_hidden").get<int>();
  cfg.encoder_channels = m.at("encoder_channels").get<std::vector<int>>();
  cfg.decoder_channels = m.at("decoder_channels").get<std::vector<int>>();
  cfg.feature_fingerprint = m.at("feature_fingerprint").get<std::uint64_t>();
  cfg.seed = m.at("seed").get<std::uint64_t>();
  return cfg;
}

void check_fingerprint(const nlohmann::json& m, std::optional<std::uint64_t> expect,
                       const std::string& path) {
  if (expect && m.at("feature_fingerprint").get<std::uint64_t>() != *expect)
    throw CheckpointError("feature-config fingerprint mismatch: " + path);
}

}  // namespace

void save_encoder(const std::string& path, const EncoderParams& enc) {
  save_checkpoint(path, "watermark_encoder", codec_meta(enc.cfg, enc.architecture()),
                  enc.store);
}

void save_decoder(const std::string& path, const DecoderParams& dec) {
  save_checkpoint(path, "watermark_decoder", codec_meta(dec.cfg, dec.architecture()),
                  dec.store);
}

EncoderParams load_encoder(const std::string& path,
                           std::optional<std::uint64_t> expect_fingerprint) {
  Checkpoint ck = load_checkpoint_raw(path);
  if (ck.manifest.at("kind").get<std::string>() != "watermark_encoder")
    throw CheckpointError("checkpoint is not a watermark encoder: " + path);
  check_fingerprint(ck.manifest, expect_fingerprint, path);
  EncoderParams enc = build_encoder(cfg_from_manifest(ck.manifest));
  if (enc.architecture() != ck.manifest.at("architecture"))
    throw CheckpointError("architecture descriptor mismatch: " + path);
  restore_params(ck, enc.store);
  return enc;
}

DecoderParams load_decoder(const std::string& path,
                           std::optional<std::uint64_t> expect_fingerprint) {
  Checkpoint ck = load_checkpoint_raw(path);
  if (ck.manifest.at("kind").get<std::string>() != "watermark_decoder")
    throw CheckpointError("checkpoint is not a watermark decoder: " + path);
  check_fingerprint(ck.manifest, expect_fingerprint, path);
  DecoderParams dec = build_decoder(cfg_from_manifest(ck.manifest));
  if (dec.architecture() != ck.manifest.at("architecture"))
    throw CheckpointError("architecture descriptor mismatch: " + path);
  restore_params(ck, dec.store);
  return dec;
}

}  // namespace diffmark
