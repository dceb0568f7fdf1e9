// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include "diffmark/metrics.hpp"

namespace diffmark {

const char* train_stage_name(TrainStage s) {
  switch (s) {
    case TrainStage::pretrain_codec: return "pretrain_codec";
    case TrainStage::pretrain_vocoder: return "pretrain_vocoder";
    case TrainStage::wgft: return "wgft";
  }
  return "?";
}

void TrainReport::write_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw TrainingError("cannot write report: " + path);
  f << "epoch,loss_w,loss_mel,loss_mag,loss_speech,acc_clean,acc_attacked,"
       "mel_ssim,fidelity_on,seconds\n";
  for (const auto& e : epochs)
    f << e.epoch << ',' << e.loss_w << ',' << e.loss_mel << ',' << e.loss_mag << ','
      << e.loss_speech << ',' << e.acc_clean << ',' << e.acc_attacked << ','
      << e.mel_ssim_val << ',' << (e.fidelity_on ? 1 : 0) << ',' << e.seconds << '\n';
}

nlohmann::json TrainReport::summary() const {
  nlohmann::json j;
  j["stage"] = train_stage_name(stage);
  j["epochs"] = epochs.size();
  if (!epochs.empty()) {
    const auto& last = epochs.back();
    j["final"] = {{"loss_w", last.loss_w},
                  {"loss_mel", last.loss_mel},
                  {"loss_mag", last.loss_mag},
                  {"loss_speech", last.loss_speech},
                  {"acc_clean", last.acc_clean},
                  {"acc_attacked", last.acc_attacked},
                  {"mel_ssim", last.mel_ssim_val},
                  {"fidelity_on", last.fidelity_on}};
  }
  return j;
}

std::vector<WatermarkMessage> next_messages(const MessageSchedule& schedule, int epoch,
                                            int n_batches) {
  std::vector<WatermarkMessage> pool;
  pool.reserve(std::size_t(std::max(n_batches, 0)));
  std::set<std::string> seen;
  Rng rng(mix64(schedule.seed, mix64(0x4D5647, std::uint64_t(epoch))));
  while (int(pool.size()) < n_batches) {
    WatermarkMessage m = WatermarkMessage::random(schedule.payload_bits, rng);
    if (schedule.payload_bits >= 16 && !seen.insert(m.to_hex()).second)
      continue;  // no within-epoch repeats
    pool.push_back(std::move(m));
  }
  return pool;
}

double loss_bce(const std::vector<double>& probabilities, const WatermarkMessage& message) {
  if (int(probabilities.size()) != message.length())
    throw std::invalid_argument("loss_bce: length mismatch");
  constexpr double eps = 1e-7;
  double acc = 0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const double p = std::clamp(probabilities[i], eps, 1.0 - eps);
    const double w = double(message.bits[i]);
    acc -= w * std::log(p) + (1.0 - w) * std::log(1.0 - p);
  }
  return acc;
}

double loss_mel(const SpeechClip& a, const SpeechClip& b, const FeatureConfig& cfg) {
  if (a.size() != b.size()) throw std::invalid_argument("loss_mel: equal lengths required");
  MelSpectrogram ma = mel_spectrogram(a, cfg);
  MelSpectrogram mb = mel_spectrogram(b, cfg);
  return (ma.frames - mb.frames).cwiseAbs().mean();
}

double loss_stft_mag(const SpeechClip& a, const SpeechClip& b, const FeatureConfig& cfg) {
  if (a.size() != b.size())
    throw std::invalid_argument("loss_stft_mag: equal lengths required");
  StftMagnitude sa = stft_magnitude(a, cfg);
  StftMagnitude sb = stft_magnitude(b, cfg);
  auto lg = [&](double v) { return std::log(std::max(v, cfg.log_floor)); };
  return (sa.bins.unaryExpr(lg) - sb.bins.unaryExpr(lg)).cwiseAbs().mean();
}

namespace {

double now_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

void guard_finite(double loss, const char* where) {
  if (!std::isfinite(loss))
    throw TrainingError(std::string("diverged: non-finite loss in ") + where);
}

std::vector<Scalar> message_targets(const WatermarkMessage& m) {
  return std::vector<Scalar>(m.bits.begin(), m.bits.end());
}

std::vector<Scalar> batch_clips(const std::vector<SpeechClip>& corpus,
                                const std::vector<int>& idx, int L) {
  std::vector<Scalar> v(idx.size() * std::size_t(L));
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& s = corpus[idx[b]].samples;
    if (int(s.size()) != L) throw TrainingError("corpus clip length mismatch");
    std::copy(s.begin(), s.end(), v.begin() + b * std::size_t(L));
  }
  return v;
}

// Deterministic shuffled batch order for one epoch.
std::vector<std::vector<int>> epoch_batches(int n, int batch, int epoch,
                                            std::uint64_t seed) {
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix64(seed, mix64(0xBA7C4, std::uint64_t(epoch))));
  for (int i = n - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(std::uint64_t(i + 1))]);
  std::vector<std::vector<int>> batches;
  for (int s = 0; s + batch <= n; s += batch)
    batches.emplace_back(order.begin() + s, order.begin() + s + batch);
  if (batches.empty()) batches.push_back(order);  // corpus smaller than one batch
  return batches;
}

struct CodecEval {
  double acc_clean = 0;
  double acc_attacked = 0;
  double ssim = 0;
};

CodecEval eval_codec(EncoderParams& enc, DecoderParams& dec,
                     const std::vector<SpeechClip>& corpus,
                     const std::vector<AttackSpec>& attacks, const FeatureConfig& feat,
                     std::uint64_t seed, int max_clips, bool with_ssim) {
  CodecEval ev;
  Rng rng(mix64(seed, 0xE7A1));
  const int n = std::min<int>(max_clips, int(corpus.size()));
  for (int i = 0; i < n; ++i) {
    const SpeechClip& cover = corpus[i];
    WatermarkMessage msg = WatermarkMessage::random(enc.cfg.payload_bits, rng);
    SpeechClip wm = encode(enc, cover, msg);
    ev.acc_clean += bit_accuracy(decode(dec, wm), msg);
    SpeechClip attacked = attacks.empty() ? wm : noise_layer_sample(rng, attacks, wm);
    ev.acc_attacked += bit_accuracy(decode(dec, attacked), msg);
    if (with_ssim) ev.ssim += mel_ssim(cover, wm, feat);
  }
  ev.acc_clean /= n;
  ev.acc_attacked /= n;
  if (with_ssim) ev.ssim /= n;
  return ev;
}

}  // namespace

CodecTrainResult pretrain_codec(const std::vector<SpeechClip>& corpus,
                                const TrainConfig& cfg, ProgressFn progress) {
  if (corpus.empty()) throw TrainingError("pretrain_codec: empty corpus");
  const int L = int(corpus[0].size());

  CodecBuildConfig bc = cfg.codec;
  bc.input_length = L;
  bc.feature_fingerprint = cfg.features.fingerprint();
  CodecTrainResult out;
  out.encoder = build_encoder(bc);
  out.decoder = build_decoder(bc);
  out.report.stage = TrainStage::pretrain_codec;

  std::vector<Parameter*> trainable = out.encoder.store.all();
  for (Parameter* p : out.decoder.store.all()) trainable.push_back(p);
  Adam opt(trainable, cfg.learning_rate);

  // Precompute cover features once; covers never change.
  const int l = bc.payload_bits;
  MessageSchedule schedule{cfg.seed, l};
  Rng noise_rng(mix64(cfg.seed, 0x4015E));

  bool fidelity_on = false;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double t0 = now_seconds();
    auto batches = epoch_batches(int(corpus.size()), cfg.batch_size, epoch, cfg.seed);
    auto messages = next_messages(schedule, epoch, int(batches.size()));
    EpochStats st;
    st.epoch = epoch;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      const int B = int(idx.size());
      Graph g;
      g.set_free_on_backward(true);
      Node* cover = g.input(Shape{B, 1, L}, batch_clips(corpus, idx, L));
      std::vector<Scalar> msg_bits = message_targets(messages[bi]);
      std::vector<Scalar> msg_batched(std::size_t(B) * l);
      for (int b = 0; b < B; ++b)
        std::copy(msg_bits.begin(), msg_bits.end(), msg_batched.begin() + std::size_t(b) * l);
      Node* msg = g.input(Shape{B, l, 1}, msg_batched);

      Node* wm = encoder_forward(g, out.encoder, cover, msg);
      Node* attacked = cfg.noise_layer.empty()
                           ? wm
                           : noise_layer_op(g, wm, cfg.noise_layer, noise_rng,
                                            cfg.features.sample_rate);
      Node* probs = decoder_forward(g, out.decoder, attacked, /*bn_training=*/true);
      Node* l_w = g.bce_sum(probs, msg_bits);
      const double loss_w_val = l_w->data[0];
      guard_finite(loss_w_val, "pretrain_codec/L_W");
      if (!fidelity_on && loss_w_val / l < cfg.switch_threshold)
        fidelity_on = true;  // monotone: never deactivates

      Node* loss = g.scale(l_w, cfg.gamma_w);
      double mel_val = 0, mag_val = 0;
      if (fidelity_on) {
        Node* mel_wm = mel_op(g, wm, cfg.features);
        Node* mel_cov = mel_op(g, cover, cfg.features);
        Node* l_mel = g.l1_mean(mel_wm, mel_cov);
        Node* mag_wm = g.log_floored(stft_mag_op(g, wm, cfg.features), cfg.features.log_floor);
        Node* mag_cov =
            g.log_floored(stft_mag_op(g, cover, cfg.features), cfg.features.log_floor);
        Node* l_mag = g.l1_mean(mag_wm, mag_cov);
        mel_val = l_mel->data[0];
        mag_val = l_mag->data[0];
        loss = g.add(loss, g.scale(l_mel, cfg.gamma_mel));
        loss = g.add(loss, g.scale(l_mag, cfg.gamma_mag));
      }
      guard_finite(loss->data[0], "pretrain_codec/L_Pre");

      opt.zero_grad();
      g.backward(loss);
      out.encoder.store.clip_grad_norm(cfg.grad_clip);
      out.decoder.store.clip_grad_norm(cfg.grad_clip);
      opt.step();

      st.loss_w += loss_w_val;
      st.loss_mel += mel_val;
      st.loss_mag += mag_val;
    }
    st.loss_w /= double(batches.size());
    st.loss_mel /= double(batches.size());
    st.loss_mag /= double(batches.size());
    st.fidelity_on = fidelity_on;

    CodecEval ev = eval_codec(out.encoder, out.decoder, corpus, cfg.noise_layer,
                              cfg.features, mix64(cfg.seed, std::uint64_t(epoch)),
                              /*max_clips=*/16, /*with_ssim=*/(epoch + 1 == cfg.epochs));
    st.acc_clean = ev.acc_clean;
    st.acc_attacked = ev.acc_attacked;
    st.mel_ssim_val = ev.ssim;
    st.seconds = now_seconds() - t0;
    out.report.epochs.push_back(st);
    if (progress) progress(st);
  }
  return out;
}

VocoderTrainResult pretrain_vocoder(const std::vector<SpeechClip>& corpus,
                                    const TrainConfig& cfg, ProgressFn progress) {
  if (corpus.empty()) throw TrainingError("pretrain_vocoder: empty corpus");
  VocoderTrainResult out;
  out.vocoder = build_vocoder(cfg.vocoder, cfg.features);
  out.report.stage = TrainStage::pretrain_vocoder;

  Adam opt(out.vocoder.store.all(), cfg.learning_rate);
  Rng rng(mix64(cfg.seed, 0xD0C0));

  const int crop = std::max(cfg.features.hop_length * 4,
                            int(std::lround(cfg.crop_seconds * cfg.features.sample_rate)));
  const int steps =
      cfg.steps_per_epoch > 0
          ? cfg.steps_per_epoch
          : std::max<int>(1, int(corpus.size()) / std::max(1, cfg.batch_size));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double t0 = now_seconds();
    EpochStats st;
    st.epoch = epoch;
    for (int step = 0; step < steps; ++step) {
      std::vector<SpeechClip> clips;
      std::vector<MelSpectrogram> mels;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const SpeechClip& src = corpus[rng.uniform_int(corpus.size())];
        const int maxstart = int(src.size()) - crop;
        const int start = maxstart > 0 ? int(rng.uniform_int(std::uint64_t(maxstart))) : 0;
        SpeechClip c;
        c.sample_rate = src.sample_rate;
        c.samples.assign(src.samples.begin() + start, src.samples.begin() + start + crop);
        mels.push_back(mel_spectrogram(c, cfg.features));
        clips.push_back(std::move(c));
      }
      opt.zero_grad();
      const double loss = ddpm_pretrain_loss(out.vocoder, clips, mels, rng, true);
      guard_finite(loss, "pretrain_vocoder");
      out.vocoder.store.clip_grad_norm(cfg.grad_clip);
      opt.step();
      st.loss_speech += loss;
    }
    st.loss_speech /= steps;
    st.seconds = now_seconds() - t0;
    out.report.epochs.push_back(st);
    if (progress) progress(st);
  }
  return out;
}

VocoderTrainResult wgft_finetune(VocoderParams vocoder, EncoderParams& encoder,
                                 DecoderParams& decoder,
                                 const std::vector<SpeechClip>& corpus,
                                 const TrainConfig& cfg, ProgressFn progress) {
  if (corpus.empty()) throw TrainingError("wgft: empty corpus");
  const int L = int(corpus[0].size());
  if (L != encoder.cfg.input_length || L != decoder.cfg.input_length)
    throw TrainingError("wgft: corpus length does not match codec input length");

  encoder.store.freeze(true);
  decoder.store.freeze(true);
  const auto enc_snapshot = encoder.store.snapshot();
  const auto dec_snapshot = decoder.store.snapshot();

  VocoderTrainResult out;
  out.vocoder = std::move(vocoder);
  out.report.stage = TrainStage::wgft;

  Adam opt(out.vocoder.store.all(), cfg.learning_rate, 0.9, 0.999, 1e-8,
           cfg.weight_decay);
  Rng rng(mix64(cfg.seed, 0xF17E));

  NoiseSchedule fast = make_fast_schedule(cfg.inference_steps,
                                          out.vocoder.cfg.beta_start, cfg.fast_beta_end);
  if (cfg.injection_step < 1 || cfg.injection_step > fast.T)
    throw TrainingError("wgft: injection_step outside schedule");
  const std::vector<double> t_embed = aligned_steps(out.vocoder.schedule, fast);

  const int l = encoder.cfg.payload_bits;
  MessageSchedule schedule{cfg.seed, l};
  // Per-clip mel features are fixed; cache them.
  std::vector<MelSpectrogram> mels;
  mels.reserve(corpus.size());
  for (const auto& c : corpus) mels.push_back(mel_spectrogram(c, cfg.features));

  bool fidelity_on = false;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double t0 = now_seconds();
    auto batches = epoch_batches(int(corpus.size()), cfg.batch_size, epoch, cfg.seed);
    auto messages = next_messages(schedule, epoch, int(batches.size()));
    EpochStats st;
    st.epoch = epoch;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      const std::vector<Scalar> msg_bits = message_targets(messages[bi]);
      opt.zero_grad();
      double batch_w = 0, batch_speech = 0;
      for (int sample : idx) {
        // One sample per graph: the full sampling loop is memory-heavy and
        // the frozen decoder needs no cross-sample batch statistics.
        Graph g;
        g.set_free_on_backward(true);
        const MelSpectrogram& mel = mels[sample];
        Node* mel_in =
            g.input(Shape{1, int(mel.frames.rows()), int(mel.frames.cols())},
                    [&] {
                      std::vector<Scalar> v(std::size_t(mel.frames.rows()) *
                                            mel.frames.cols());
                      for (int r = 0; r < mel.frames.rows(); ++r)
                        for (int t = 0; t < mel.frames.cols(); ++t)
                          v[std::size_t(r) * mel.frames.cols() + t] = mel.frames(r, t);
                      return v;
                    }());
        Node* cond = vocoder_conditioner(g, out.vocoder, mel_in, L);
        Node* s0 = g.input(Shape{1, 1, L}, corpus[sample].samples);
        Node* msg = g.input(Shape{1, l, 1}, msg_bits);

        Node* x = g.input(Shape{1, 1, L}, rng.normal_vec(L));
        for (int t = fast.T; t >= 1; --t) {
          if (t == cfg.injection_step) {
            Node* wm_target = encoder_forward(g, encoder, s0, msg);
            x = g.mul(x, wm_target);
          }
          Node* eps = vocoder_eps(g, out.vocoder, x, {t_embed[t - 1]}, cond);
          const double alpha = fast.alphas[t - 1];
          const double k = (1.0 - alpha) / std::sqrt(1.0 - fast.alpha_bars[t - 1]);
          x = g.axpby(1.0 / std::sqrt(alpha), x, -k / std::sqrt(alpha), eps);
          if (t > 1) {
            std::vector<Scalar> z = rng.normal_vec(L);
            for (auto& v : z) v *= fast.sigmas[t - 1];
            x = g.add_const(x, z);
          }
        }
        Node* probs = decoder_forward(g, decoder, x, /*bn_training=*/false);
        Node* l_w = g.bce_sum(probs, msg_bits);
        const double w_val = l_w->data[0];
        guard_finite(w_val, "wgft/L_W");
        if (!fidelity_on && w_val / l < cfg.switch_threshold) fidelity_on = true;

        Node* loss = g.scale(l_w, cfg.lambda_w);
        double speech_val = 0;
        if (fidelity_on) {
          Node* mel_wm = mel_op(g, x, cfg.features);
          Node* mel_s0 = mel_op(g, s0, cfg.features);
          Node* l_mel = g.l1_mean(mel_wm, mel_s0);
          Node* mag_wm =
              g.log_floored(stft_mag_op(g, x, cfg.features), cfg.features.log_floor);
          Node* mag_s0 =
              g.log_floored(stft_mag_op(g, s0, cfg.features), cfg.features.log_floor);
          Node* l_mag = g.l1_mean(mag_wm, mag_s0);
          Node* l_speech = g.add(g.scale(l_mel, cfg.psi_mel), g.scale(l_mag, cfg.psi_mag));
          speech_val = l_speech->data[0];
          loss = g.add(loss, g.scale(l_speech, cfg.lambda_speech));
        }
        guard_finite(loss->data[0], "wgft/L_FT");
        Node* scaled = g.scale(loss, 1.0 / double(idx.size()));
        g.backward(scaled);
        batch_w += w_val / double(idx.size());
        batch_speech += speech_val / double(idx.size());
      }
      out.vocoder.store.clip_grad_norm(cfg.grad_clip);
      opt.step();
      st.loss_w += batch_w;
      st.loss_speech += batch_speech;
    }
    st.loss_w /= double(batches.size());
    st.loss_speech /= double(batches.size());
    st.fidelity_on = fidelity_on;

    // Quick eval: a few training-mode samples, ACC + mel-SSIM.
    {
      Rng erng(mix64(cfg.seed, mix64(0xEEE, std::uint64_t(epoch))));
      const int n_eval = std::min<int>(4, int(corpus.size()));
      double acc = 0, ssim = 0;
      for (int i = 0; i < n_eval; ++i) {
        WatermarkMessage m = WatermarkMessage::random(l, erng);
        SamplerConfig sc;
        sc.inference_steps = cfg.inference_steps;
        sc.injection_step = cfg.injection_step;
        sc.fast_beta_end = cfg.fast_beta_end;
        sc.seed = erng.next_u64();
        sc.length = L;
        SpeechClip wm =
            synthesize_watermarked(out.vocoder, mels[i], encoder, m, sc, &corpus[i]);
        acc += bit_accuracy(decode(decoder, wm), m);
        ssim += mel_ssim(wm, corpus[i], cfg.features);
      }
      st.acc_clean = acc / n_eval;
      st.mel_ssim_val = ssim / n_eval;
    }
    st.seconds = now_seconds() - t0;
    out.report.epochs.push_back(st);
    if (progress) progress(st);
  }

  if (!encoder.store.equals_snapshot(enc_snapshot) ||
      !decoder.store.equals_snapshot(dec_snapshot))
    throw TrainingError("wgft: frozen codec parameters were modified");
  return out;
}

}  // namespace diffmark
