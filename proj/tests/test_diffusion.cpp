// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "diffmark/corpus.hpp"
#include "diffmark/diffusion.hpp"
#include "diffmark/nn.hpp"

using namespace diffmark;

namespace {

FeatureConfig tiny_feat() {
  FeatureConfig f;  // project config; hop=256 is a perfect square of 16
  return f;
}

VocoderBuildConfig tiny_voc(int layers = 3, int ch = 4) {
  VocoderBuildConfig v;
  v.residual_channels = ch;
  v.layers = layers;
  v.dilation_cycle = layers;
  v.cond_channels = 4;
  v.emb_dim = 8;
  v.emb_hidden = 8;
  v.schedule_steps = 12;
  v.seed = 3;
  return v;
}

}  // namespace

TEST_CASE("schedule construction and invariants") {
  // T=1 boundary: alpha_bar_0 convention makes sigma_1 = 0
  NoiseSchedule s1 = make_schedule(1, 0.5, 0.5);
  CHECK(s1.alpha_bars == std::vector<double>{0.5});
  CHECK(s1.sigmas[0] == 0.0);
  CHECK(s1.alpha_bar_prev(1) == 1.0);

  // direct product oracle
  NoiseSchedule s = make_schedule(50, 1e-4, 0.05);
  double prod = 1.0;
  for (int t = 1; t <= 50; ++t) {
    const double beta = 1e-4 + (0.05 - 1e-4) * double(t - 1) / 49.0;
    prod *= 1.0 - beta;
    CHECK(s.betas[t - 1] == doctest::Approx(beta).epsilon(1e-12));
    CHECK(s.alpha_bars[t - 1] == doctest::Approx(prod).epsilon(1e-12));
    if (t > 1) CHECK(s.alpha_bars[t - 1] < s.alpha_bars[t - 2]);
    // definition check for the posterior variance
    const double expect =
        (1.0 - s.alpha_bar_prev(t)) / (1.0 - s.alpha_bars[t - 1]) * s.betas[t - 1];
    CHECK(s.sigmas[t - 1] * s.sigmas[t - 1] == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK(s.alpha_bars.back() < 0.3);

  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), std::invalid_argument);
}

TEST_CASE("q_sample closed forms and Monte-Carlo variance") {
  NoiseSchedule s = make_schedule(20, 1e-3, 0.2);
  Rng rng(5);
  std::vector<double> s0(64);
  for (auto& v : s0) v = rng.normal();  // unit-variance source

  // eps = 0 -> sqrt(abar) * s0
  std::vector<double> zero(64, 0.0);
  const int t = 7;
  std::vector<double> q = q_sample(s, s0, t, zero);
  for (int i = 0; i < 64; ++i)
    CHECK(q[i] == doctest::Approx(std::sqrt(s.alpha_bars[t - 1]) * s0[i]).epsilon(1e-12));

  CHECK_THROWS_AS(q_sample(s, s0, 0, zero), std::out_of_range);
  CHECK_THROWS_AS(q_sample(s, s0, 21, zero), std::out_of_range);

  // empirical variance over 10k draws at fixed t
  const int draws = 10000;
  double mean = 0, m2 = 0;
  long n = 0;
  for (int d = 0; d < draws / 64 + 1; ++d) {
    std::vector<double> eps = rng.normal_vec(64);
    std::vector<double> x = q_sample(s, s0, t, eps);
    for (double v : x) {
      ++n;
      const double delta = v - mean;
      mean += delta / double(n);
      m2 += delta * (v - mean);
    }
  }
  const double var = m2 / double(n - 1);
  double var_s0 = 0, mean_s0 = 0;
  for (double v : s0) mean_s0 += v / 64;
  for (double v : s0) var_s0 += (v - mean_s0) * (v - mean_s0) / 63.0;
  const double abar = s.alpha_bars[t - 1];
  const double expect = abar * var_s0 + (1 - abar);
  CHECK(var == doctest::Approx(expect).epsilon(0.03));
}

TEST_CASE("p_step closed forms") {
  NoiseSchedule s = make_schedule(10, 1e-3, 0.3);
  std::vector<double> st(32);
  Rng rng(7);
  for (auto& v : st) v = rng.normal();
  std::vector<double> zero(32, 0.0);

  // eps_hat = 0, z = 0 -> s_t / sqrt(alpha_t)
  const int t = 5;
  std::vector<double> out = p_step_from_eps(s, st, t, zero, zero);
  for (int i = 0; i < 32; ++i)
    CHECK(out[i] == doctest::Approx(st[i] / std::sqrt(s.alphas[t - 1])).epsilon(1e-12));

  // at t = 1 the noise term is absent even with z != 0
  std::vector<double> z = rng.normal_vec(32);
  std::vector<double> a = p_step_from_eps(s, st, 1, zero, zero);
  std::vector<double> b = p_step_from_eps(s, st, 1, zero, z);
  CHECK(a == b);

  CHECK_THROWS_AS(p_step_from_eps(s, st, 0, zero, zero), std::out_of_range);
}

TEST_CASE("single-step analytic inversion recovers s0 exactly") {
  // forward with known eps, reverse with oracle eps_hat = eps at T = 1
  NoiseSchedule s = make_schedule(1, 0.37, 0.37);
  Rng rng(9);
  std::vector<double> s0 = rng.normal_vec(128);
  std::vector<double> eps = rng.normal_vec(128);
  std::vector<double> s1 = q_sample(s, s0, 1, eps);
  std::vector<double> zero(128, 0.0);
  std::vector<double> rec = p_step_from_eps(s, s1, 1, eps, zero);
  for (int i = 0; i < 128; ++i) CHECK(rec[i] == doctest::Approx(s0[i]).epsilon(1e-5));
}

TEST_CASE("fast schedule and step alignment") {
  VocoderBuildConfig vc = tiny_voc();
  NoiseSchedule train = make_schedule(vc.schedule_steps, vc.beta_start, vc.beta_end);
  NoiseSchedule fast = make_fast_schedule(6, vc.beta_start, 0.5);
  CHECK(fast.T == 6);
  for (int i = 1; i < 6; ++i) CHECK(fast.betas[i] > fast.betas[i - 1]);
  std::vector<double> t_embed = aligned_steps(train, fast);
  REQUIRE(t_embed.size() == 6);
  for (int i = 1; i < 6; ++i) CHECK(t_embed[i] > t_embed[i - 1]);  // deeper noise, later t
  for (double t : t_embed) {
    CHECK(t >= 0.0);
    CHECK(t <= double(train.T));
  }
  // sqrt-alpha_bar bracketing: interpolated index reproduces the fast level
  for (int sidx = 0; sidx < 6; ++sidx) {
    const double t = t_embed[sidx];
    const int lo = int(std::floor(t));
    auto ta = [&](int i) {
      return i == 0 ? 1.0 : std::sqrt(train.alpha_bars[i - 1]);
    };
    if (lo < train.T) {
      const double approx = ta(lo) + (ta(lo + 1) - ta(lo)) * (t - lo);
      CHECK(approx == doctest::Approx(std::sqrt(fast.alpha_bars[sidx])).epsilon(1e-9));
    }
  }
}

TEST_CASE("synthesize: finite, length-correct, seed-reproducible") {
  FeatureConfig feat = tiny_feat();
  VocoderParams voc = build_vocoder(tiny_voc(), feat);
  SpeechClip clip = synth_speech_clip(3, 0.25);
  MelSpectrogram mel = mel_spectrogram(clip, feat);

  SamplerConfig sc;
  sc.inference_steps = 4;
  sc.injection_step = 2;
  sc.seed = 11;
  SpeechClip out = synthesize(voc, mel, sc);
  CHECK(out.size() == clip.size());
  for (double v : out.samples) CHECK(std::isfinite(v));

  SpeechClip out2 = synthesize(voc, mel, sc);
  CHECK(out.samples == out2.samples);
  sc.seed = 12;
  SpeechClip out3 = synthesize(voc, mel, sc);
  CHECK(out.samples != out3.samples);

  // mel length / waveform mismatch raises
  SamplerConfig bad = sc;
  bad.length = int(clip.size()) + 600;
  CHECK_THROWS_AS(synthesize(voc, mel, bad), std::invalid_argument);
}

TEST_CASE("watermark injection changes the waveform; all-ones reference is a no-op") {
  FeatureConfig feat = tiny_feat();
  VocoderParams voc = build_vocoder(tiny_voc(), feat);
  SpeechClip clip = synth_speech_clip(5, 0.25);
  MelSpectrogram mel = mel_spectrogram(clip, feat);
  const int L = int(clip.size());

  CodecBuildConfig cc;
  cc.payload_bits = 8;
  cc.input_length = L;
  cc.dense_hidden = 8;
  cc.encoder_channels = {2, 2, 3, 3};
  cc.decoder_channels = {2, 2, 2, 3, 3, 3, 4};
  EncoderParams enc = build_encoder(cc);
  Rng rng(13);
  WatermarkMessage msg = WatermarkMessage::random(8, rng);

  SamplerConfig sc;
  sc.inference_steps = 4;
  sc.injection_step = 2;
  sc.seed = 21;
  sc.length = L;

  SpeechClip plain = synthesize(voc, mel, sc);
  // training-mode reference: the clip itself (encoder is identity at init,
  // so the injected mask equals the clip, not ones)
  SpeechClip wm = synthesize_watermarked(voc, mel, enc, msg, sc, &clip);
  REQUIRE(wm.size() == plain.size());
  double l2 = 0;
  for (std::size_t i = 0; i < wm.size(); ++i) {
    const double d = wm.samples[i] - plain.samples[i];
    l2 += d * d;
  }
  CHECK(l2 > 0.0);

  // hypothetical identity encoder: all-ones reference leaves sampling intact
  SpeechClip ones;
  ones.samples.assign(L, 1.0);
  SpeechClip wm_ones = synthesize_watermarked(voc, mel, enc, msg, sc, &ones);
  CHECK(wm_ones.samples == plain.samples);

  // message/encoder mismatch
  WatermarkMessage wrong = WatermarkMessage::random(12, rng);
  CHECK_THROWS_AS(synthesize_watermarked(voc, mel, enc, wrong, sc, &clip),
                  std::invalid_argument);

  // inference mode (one-shot clean estimate) also runs and differs
  SpeechClip wm_inf = synthesize_watermarked(voc, mel, enc, msg, sc, nullptr);
  CHECK(wm_inf.size() == plain.size());
  for (double v : wm_inf.samples) CHECK(std::isfinite(v));
}

TEST_CASE("ddpm pretrain loss: zero-init model gives unit loss; decreases when trained") {
  FeatureConfig feat = tiny_feat();
  VocoderParams voc = build_vocoder(tiny_voc(), feat);
  Rng rng(17);

  // the output conv starts zero-initialized, i.e. eps_theta == 0:
  // loss = E||eps||^2 = 1 per element
  std::vector<SpeechClip> clips;
  std::vector<MelSpectrogram> mels;
  for (int i = 0; i < 4; ++i) {
    SpeechClip c = synth_speech_clip(100 + i, 0.2);
    mels.push_back(mel_spectrogram(c, feat));
    clips.push_back(std::move(c));
  }
  double acc = 0;
  for (int rep = 0; rep < 5; ++rep)
    acc += ddpm_pretrain_loss(voc, clips, mels, rng, /*backprop=*/false);
  acc /= 5;
  CHECK(acc == doctest::Approx(1.0).epsilon(0.05));
  CHECK(acc >= 0.0);

  // overfit-one-sample sanity: 200 Adam steps reduce the loss
  std::vector<SpeechClip> one{clips[0]};
  std::vector<MelSpectrogram> onem{mels[0]};
  Adam opt(voc.store.all(), 5e-4);
  Rng trng(23);
  double first_avg = 0, last_avg = 0;
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    const double loss = ddpm_pretrain_loss(voc, one, onem, trng, true);
    voc.store.clip_grad_norm(1.0);
    opt.step();
    if (step < 20) first_avg += loss / 20;
    if (step >= 180) last_avg += loss / 20;
  }
  CHECK(last_avg < first_avg);
}

TEST_CASE("gradient flows through the full watermark-injected sampling loop") {
  // miniature everything, 4 steps; finite differences within 1e-2
  FeatureConfig feat = tiny_feat();
  VocoderBuildConfig vc = tiny_voc(/*layers=*/1, /*ch=*/2);
  vc.cond_channels = 2;
  vc.emb_dim = 4;
  vc.emb_hidden = 4;
  VocoderParams voc = build_vocoder(vc, feat);
  Rng wake(29);
  for (Parameter* p : voc.store.all())
    for (auto& v : p->value) v = 0.15 * wake.normal();  // wake the zero init

  const int L = 512;
  CodecBuildConfig cc;
  cc.payload_bits = 3;
  cc.input_length = L;
  cc.dense_hidden = 4;
  cc.encoder_channels = {2, 2, 2, 2};
  cc.decoder_channels = {2, 2, 2, 2, 2, 2, 2};
  EncoderParams enc = build_encoder(cc);
  DecoderParams dec = build_decoder(cc);
  enc.store.freeze(true);
  dec.store.freeze(true);

  SpeechClip s0 = synth_speech_clip(31, double(L) / kPipelineRate);
  s0.samples.resize(L);
  MelSpectrogram mel = mel_spectrogram(s0, feat);
  std::vector<Scalar> melv(std::size_t(mel.frames.rows()) * mel.frames.cols());
  for (int r = 0; r < mel.frames.rows(); ++r)
    for (int t = 0; t < mel.frames.cols(); ++t)
      melv[std::size_t(r) * mel.frames.cols() + t] = mel.frames(r, t);
  std::vector<Scalar> msg_bits = {1, 0, 1};

  NoiseSchedule fast = make_fast_schedule(4, vc.beta_start, 0.5);
  std::vector<double> t_embed = aligned_steps(voc.schedule, fast);
  Rng noise_rng(37);
  std::vector<Scalar> x0 = noise_rng.normal_vec(L);
  std::vector<std::vector<Scalar>> zs;
  for (int t = fast.T; t > 1; --t) zs.push_back(noise_rng.normal_vec(L));

  auto loss_value = [&](bool backprop) {
    Graph g;
    Node* mel_in = g.input(Shape{1, int(mel.frames.rows()), int(mel.frames.cols())}, melv);
    Node* cond = vocoder_conditioner(g, voc, mel_in, L);
    Node* s0n = g.input(Shape{1, 1, L}, s0.samples);
    Node* msg = g.input(Shape{1, 3, 1}, msg_bits);
    Node* x = g.input(Shape{1, 1, L}, x0);
    int zi = 0;
    for (int t = fast.T; t >= 1; --t) {
      if (t == 2) {
        Node* wm = encoder_forward(g, enc, s0n, msg);
        x = g.mul(x, wm);
      }
      Node* eps = vocoder_eps(g, voc, x, {t_embed[t - 1]}, cond);
      const double alpha = fast.alphas[t - 1];
      const double k = (1.0 - alpha) / std::sqrt(1.0 - fast.alpha_bars[t - 1]);
      x = g.axpby(1.0 / std::sqrt(alpha), x, -k / std::sqrt(alpha), eps);
      if (t > 1) {
        std::vector<Scalar> z = zs[zi++];
        for (auto& v : z) v *= fast.sigmas[t - 1];
        x = g.add_const(x, z);
      }
    }
    Node* probs = decoder_forward(g, dec, x, false);
    Node* loss = g.bce_sum(probs, msg_bits);
    const double v = loss->data[0];
    if (backprop) g.backward(loss);
    return v;
  };

  voc.store.zero_grad();
  loss_value(true);
  double gnorm = 0;
  for (Parameter* p : voc.store.all())
    for (double g : p->grad) gnorm += g * g;
  CHECK(std::isfinite(gnorm));
  CHECK(gnorm > 0.0);

  Rng pick(41);
  std::vector<Parameter*> params = voc.store.all();
  int checked = 0;
  for (int trial = 0; trial < 30 && checked < 8; ++trial) {
    Parameter* p = params[pick.uniform_int(params.size())];
    const std::size_t i = pick.uniform_int(p->value.size());
    const double h = 1e-4;
    const double orig = p->value[i];
    p->value[i] = orig + h;
    const double fp = loss_value(false);
    p->value[i] = orig - h;
    const double fm = loss_value(false);
    p->value[i] = orig;
    const double fd = (fp - fm) / (2 * h);
    const double an = p->grad[i];
    if (std::fabs(fd) < 1e-6 && std::fabs(an) < 1e-6) continue;
    INFO("param ", p->name, " coord ", i, " fd=", fd, " an=", an);
    CHECK(std::fabs(fd - an) / std::max(std::fabs(fd), std::fabs(an)) < 1e-2);
    ++checked;
  }
  CHECK(checked >= 4);
}

TEST_CASE("vocoder checkpoint round trip and validation") {
  FeatureConfig feat = tiny_feat();
  VocoderParams voc = build_vocoder(tiny_voc(), feat);
  Rng rng(43);
  for (Parameter* p : voc.store.all())
    for (auto& v : p->value) v = rng.normal();
  auto dir = std::filesystem::temp_directory_path() / "diffmark_diff_tests";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "voc.ckpt").string();
  save_vocoder(path, voc);
  VocoderParams back = load_vocoder(path);
  CHECK(back.store.equals_snapshot(voc.store.snapshot()));
  CHECK(back.schedule.T == voc.schedule.T);
  CHECK_THROWS_AS(load_vocoder(path, std::uint64_t(1)), CheckpointError);
}
