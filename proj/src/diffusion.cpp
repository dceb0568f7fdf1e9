// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/diffusion.hpp"

#include <cmath>
#include <cstring>

namespace diffmark {

namespace {

void derive(NoiseSchedule& s) {
  s.T = int(s.betas.size());
  s.alphas.resize(s.T);
  s.alpha_bars.resize(s.T);
  s.sigmas.resize(s.T);
  double prod = 1.0;
  for (int i = 0; i < s.T; ++i) {
    s.alphas[i] = 1.0 - s.betas[i];
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  for (int i = 0; i < s.T; ++i) {
    const double abar_prev = i == 0 ? 1.0 : s.alpha_bars[i - 1];
    const double var = (1.0 - abar_prev) / (1.0 - s.alpha_bars[i]) * s.betas[i];
    s.sigmas[i] = std::sqrt(std::max(var, 0.0));
  }
}

void validate_schedule(const NoiseSchedule& s) {
  if (s.T < 1) throw std::invalid_argument("schedule: T >= 1 required");
  double prev = 0.0;
  for (double b : s.betas) {
    if (!(b > 0.0) || !(b < 1.0))
      throw std::invalid_argument("schedule: betas must lie in (0,1)");
    if (b < prev) throw std::invalid_argument("schedule: betas must be non-decreasing");
    prev = b;
  }
  for (int i = 1; i < s.T; ++i)
    if (!(s.alpha_bars[i] < s.alpha_bars[i - 1]))
      throw std::invalid_argument("schedule: alpha_bar must decrease strictly");
}

}  // namespace

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1 || !(beta_start > 0) || beta_start > beta_end || !(beta_end < 1))
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1, T >= 1");
  NoiseSchedule s;
  s.betas.resize(T);
  for (int i = 0; i < T; ++i)
    s.betas[i] = T == 1 ? beta_start
                        : beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
  derive(s);
  validate_schedule(s);
  return s;
}

NoiseSchedule make_fast_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1 || !(beta_start > 0) || beta_start > beta_end || !(beta_end < 1))
    throw std::invalid_argument("make_fast_schedule: bad range");
  NoiseSchedule s;
  s.betas.resize(steps);
  for (int i = 0; i < steps; ++i)
    s.betas[i] = steps == 1
                     ? beta_end
                     : beta_start * std::pow(beta_end / beta_start,
                                             double(i) / double(steps - 1));
  derive(s);
  validate_schedule(s);
  return s;
}

std::vector<double> aligned_steps(const NoiseSchedule& train, const NoiseSchedule& fast) {
  // sqrt(alpha_bar) alignment; t* = 0 corresponds to clean data.
  std::vector<double> ta(train.T + 1);
  ta[0] = 1.0;
  for (int i = 0; i < train.T; ++i) ta[i + 1] = std::sqrt(train.alpha_bars[i]);
  std::vector<double> out(fast.T);
  for (int s = 0; s < fast.T; ++s) {
    const double a = std::sqrt(fast.alpha_bars[s]);
    if (a >= ta[0]) {
      out[s] = 0.0;
      continue;
    }
    if (a <= ta[train.T]) {
      out[s] = double(train.T);
      continue;
    }
    int i = 0;
    while (i + 1 <= train.T && ta[i + 1] > a) ++i;
    out[s] = double(i) + (ta[i] - a) / (ta[i] - ta[i + 1]);
  }
  return out;
}

nlohmann::json VocoderParams::architecture() const {
  return {{"residual_channels", cfg.residual_channels},
          {"layers", cfg.layers},
          {"dilation_cycle", cfg.dilation_cycle},
          {"cond_channels", cfg.cond_channels},
          {"emb_dim", cfg.emb_dim},
          {"emb_hidden", cfg.emb_hidden},
          {"mel_bins", mel_bins},
          {"hop", hop}};
}

std::string VocoderParams::describe() const { return architecture().dump(2); }

VocoderParams build_vocoder(const VocoderBuildConfig& cfg, const FeatureConfig& feat) {
  VocoderParams voc;
  voc.cfg = cfg;
  voc.cfg.feature_fingerprint = feat.fingerprint();
  voc.mel_bins = feat.mel_bins;
  voc.hop = feat.hop_length;
  voc.up_stride = int(std::lround(std::sqrt(double(feat.hop_length))));
  if (voc.up_stride * voc.up_stride != feat.hop_length)
    throw std::invalid_argument("build_vocoder: hop must be a perfect square");
  voc.schedule = make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);

  Rng rng(mix64(cfg.seed, 0x0DDF));
  auto& st = voc.store;
  const int R = cfg.residual_channels, C = cfg.cond_channels, M = feat.mel_bins;
  auto conv = [&](const std::string& name, int cout, int cin, int k, bool zero = false) {
    Parameter& w = st.add(name + ".w", Shape{cout, cin, k});
    Parameter& b = st.add(name + ".b", Shape{1, cout, 1});
    if (zero) {
      init_zeros(w);
      init_zeros(b);
    } else {
      init_uniform_fan_in(w, cin * k, rng);
      init_uniform_fan_in(b, cin * k, rng);
    }
  };
  auto fc = [&](const std::string& name, int out, int in) {
    init_uniform_fan_in(st.add(name + ".w", Shape{out, in, 1}), in, rng);
    init_uniform_fan_in(st.add(name + ".b", Shape{1, out, 1}), in, rng);
  };

  conv("in", R, 1, 1);
  fc("emb.fc1", cfg.emb_hidden, cfg.emb_dim);
  fc("emb.fc2", cfg.emb_hidden, cfg.emb_hidden);
  conv("cond.proj", C, M, 1);
  // transposed-conv upsampler: two stages of stride sqrt(hop)
  const int K = 2 * voc.up_stride;
  for (int i = 0; i < 2; ++i) {
    Parameter& w = st.add("cond.up" + std::to_string(i) + ".w", Shape{C, C, K});
    Parameter& b = st.add("cond.up" + std::to_string(i) + ".b", Shape{1, C, 1});
    init_uniform_fan_in(w, C * K, rng);
    init_uniform_fan_in(b, C * K, rng);
  }
  for (int i = 0; i < cfg.layers; ++i) {
    const std::string base = "res" + std::to_string(i);
    conv(base + ".dil", 2 * R, R, 3);
    conv(base + ".cond", 2 * R, C, 1);
    fc(base + ".emb", R, cfg.emb_hidden);
    conv(base + ".res", R, R, 1);
    conv(base + ".skip", R, R, 1);
  }
  conv("out.c1", R, R, 1);
  conv("out.c2", 1, R, 1, /*zero=*/true);
  return voc;
}

Node* vocoder_conditioner(Graph& g, VocoderParams& voc, Node* mel, int out_len) {
  auto& st = voc.store;
  Node* c = g.conv1d(mel, g.param(st.at("cond.proj.w")), g.param(st.at("cond.proj.b")), 1, 0);
  c = g.leaky_relu(c, 0.4);
  const int s = voc.up_stride, K = 2 * s, pad = s / 2;
  for (int i = 0; i < 2; ++i) {
    c = g.conv_transpose1d(c, g.param(st.at("cond.up" + std::to_string(i) + ".w")),
                           g.param(st.at("cond.up" + std::to_string(i) + ".b")), s, pad,
                           0);
    c = g.leaky_relu(c, 0.4);
  }
  if (c->shape.l < out_len)
    throw std::invalid_argument(
        "vocoder_conditioner: mel too short for requested length (" +
        std::to_string(c->shape.l) + " < " + std::to_string(out_len) + ")");
  if (c->shape.l > out_len) c = g.trim_l(c, out_len);
  return c;
}

namespace {

std::vector<Scalar> sinusoidal_embedding(const std::vector<double>& t, int dim) {
  const int half = dim / 2;
  std::vector<Scalar> e(t.size() * std::size_t(dim));
  for (std::size_t b = 0; b < t.size(); ++b)
    for (int j = 0; j < half; ++j) {
      const double f = std::pow(10.0, 4.0 * double(j) / double(half - 1));
      e[b * dim + j] = std::sin(t[b] * f);
      e[b * dim + half + j] = std::cos(t[b] * f);
    }
  return e;
}

}  // namespace

Node* vocoder_eps(Graph& g, VocoderParams& voc, Node* x,
                  const std::vector<double>& t_embed, Node* cond) {
  auto& st = voc.store;
  const int B = x->shape.b, L = x->shape.l;
  if (int(t_embed.size()) != B)
    throw std::invalid_argument("vocoder_eps: one step index per batch row required");
  if (cond->shape.l != L || cond->shape.b != B)
    throw std::invalid_argument("vocoder_eps: conditioner length mismatch");

  Node* h = g.relu(g.conv1d(x, g.param(st.at("in.w")), g.param(st.at("in.b")), 1, 0));

  Node* emb = g.input(Shape{B, voc.cfg.emb_dim, 1},
                      sinusoidal_embedding(t_embed, voc.cfg.emb_dim));
  auto swish = [&](Node* v) { return g.mul(v, g.sigmoid(v)); };
  emb = swish(g.linear(emb, g.param(st.at("emb.fc1.w")), g.param(st.at("emb.fc1.b"))));
  emb = swish(g.linear(emb, g.param(st.at("emb.fc2.w")), g.param(st.at("emb.fc2.b"))));

  Node* skip_sum = nullptr;
  for (int i = 0; i < voc.cfg.layers; ++i) {
    const std::string base = "res" + std::to_string(i);
    const int dil = 1 << (i % voc.cfg.dilation_cycle);
    Node* step = g.linear(emb, g.param(st.at(base + ".emb.w")),
                          g.param(st.at(base + ".emb.b")));
    Node* hin = g.broadcast_c(h, step);
    Node* z = g.conv1d(hin, g.param(st.at(base + ".dil.w")),
                       g.param(st.at(base + ".dil.b")), 1, dil, dil);
    z = g.conv1d_add(cond, g.param(st.at(base + ".cond.w")),
                     g.param(st.at(base + ".cond.b")), z, 1, 0);
    Node* gated = g.gated_unit(z);
    Node* res = g.conv1d(gated, g.param(st.at(base + ".res.w")),
                         g.param(st.at(base + ".res.b")), 1, 0);
    Node* skip = g.conv1d(gated, g.param(st.at(base + ".skip.w")),
                          g.param(st.at(base + ".skip.b")), 1, 0);
    h = g.axpby(M_SQRT1_2, h, M_SQRT1_2, res);
    skip_sum = skip_sum ? g.add(skip_sum, skip) : skip;
  }
  Node* out = g.relu(g.scale(skip_sum, 1.0 / std::sqrt(double(voc.cfg.layers))));
  out = g.relu(g.conv1d(out, g.param(st.at("out.c1.w")), g.param(st.at("out.c1.b")), 1, 0));
  return g.conv1d(out, g.param(st.at("out.c2.w")), g.param(st.at("out.c2.b")), 1, 0);
}

std::vector<double> q_sample(const NoiseSchedule& s, const std::vector<double>& s0,
                             int t, const std::vector<double>& eps) {
  if (t < 1 || t > s.T) throw std::out_of_range("q_sample: t outside [1, T]");
  if (eps.size() != s0.size()) throw std::invalid_argument("q_sample: eps length");
  const double a = std::sqrt(s.alpha_bars[t - 1]);
  const double b = std::sqrt(1.0 - s.alpha_bars[t - 1]);
  std::vector<double> out(s0.size());
  for (std::size_t i = 0; i < s0.size(); ++i) out[i] = a * s0[i] + b * eps[i];
  return out;
}

std::vector<double> p_step_from_eps(const NoiseSchedule& s,
                                    const std::vector<double>& s_t, int t,
                                    const std::vector<double>& eps_hat,
                                    const std::vector<double>& z) {
  if (t < 1 || t > s.T) throw std::out_of_range("p_step: t outside [1, T]");
  if (eps_hat.size() != s_t.size() || z.size() != s_t.size())
    throw std::invalid_argument("p_step: length mismatch");
  const double alpha = s.alphas[t - 1];
  const double abar = s.alpha_bars[t - 1];
  const double inv_sqrt_a = 1.0 / std::sqrt(alpha);
  const double k = (1.0 - alpha) / std::sqrt(1.0 - abar);
  const double sigma = t == 1 ? 0.0 : s.sigmas[t - 1];
  std::vector<double> out(s_t.size());
  for (std::size_t i = 0; i < s_t.size(); ++i)
    out[i] = inv_sqrt_a * (s_t[i] - k * eps_hat[i]) + sigma * z[i];
  return out;
}

namespace {

void check_mel_length(const FeatureConfig* feat_unused, const MelSpectrogram& c, int L,
                      int hop) {
  (void)feat_unused;
  const int F = int(c.frames.cols());
  if (L / hop + 1 != F)
    throw std::invalid_argument("mel/waveform shape mismatch: length " +
                                std::to_string(L) + " implies " +
                                std::to_string(L / hop + 1) + " frames, mel has " +
                                std::to_string(F));
}

std::vector<Scalar> mel_to_vec(const MelSpectrogram& c) {
  std::vector<Scalar> v(std::size_t(c.frames.rows()) * c.frames.cols());
  for (int r = 0; r < c.frames.rows(); ++r)
    for (int t = 0; t < c.frames.cols(); ++t)
      v[std::size_t(r) * c.frames.cols() + t] = c.frames(r, t);
  return v;
}

int derive_length(const MelSpectrogram& c, int hop, int requested) {
  if (requested > 0) return requested;
  if (c.n_samples > 0) return c.n_samples;
  return (int(c.frames.cols()) - 1) * hop;
}

struct SamplingPlan {
  NoiseSchedule sched;
  std::vector<double> t_embed;  // embedding index per step (1-based step s)
};

SamplingPlan sampling_plan(const VocoderParams& voc, const SamplerConfig& cfg) {
  SamplingPlan plan;
  if (cfg.mode == SamplerConfig::Mode::train_full) {
    plan.sched = voc.schedule;
    plan.t_embed.resize(plan.sched.T);
    for (int t = 1; t <= plan.sched.T; ++t) plan.t_embed[t - 1] = double(t);
  } else {
    plan.sched = make_fast_schedule(cfg.inference_steps, voc.cfg.beta_start,
                                    cfg.fast_beta_end);
    plan.t_embed = aligned_steps(voc.schedule, plan.sched);
  }
  if (cfg.injection_step < 1 || cfg.injection_step > plan.sched.T)
    throw std::invalid_argument("sampler: injection_step outside [1, inference_steps]");
  return plan;
}

}  // namespace

std::vector<double> p_step(VocoderParams& voc, const NoiseSchedule& s,
                           const std::vector<double>& s_t, int t,
                           const MelSpectrogram& c, const std::vector<double>& z) {
  check_mel_length(nullptr, c, int(s_t.size()), voc.hop);
  Graph g;
  Node* mel = g.input(Shape{1, int(c.frames.rows()), int(c.frames.cols())}, mel_to_vec(c));
  Node* cond = vocoder_conditioner(g, voc, mel, int(s_t.size()));
  Node* x = g.input(Shape{1, 1, int(s_t.size())}, s_t);
  Node* eps = vocoder_eps(g, voc, x, {double(t)}, cond);
  std::vector<double> eps_hat(eps->data, eps->data + eps->elems());
  return p_step_from_eps(s, s_t, t, eps_hat, z);
}

namespace {

SpeechClip run_sampler(VocoderParams& voc, const MelSpectrogram& c,
                       EncoderParams* enc, const WatermarkMessage& message,
                       const SamplerConfig& cfg, const SpeechClip* s0_ref);

}  // namespace

SpeechClip synthesize(VocoderParams& voc, const MelSpectrogram& c,
                      const SamplerConfig& cfg) {
  return run_sampler(voc, c, nullptr, {}, cfg, nullptr);
}

SpeechClip synthesize_watermarked(VocoderParams& voc, const MelSpectrogram& c,
                                  EncoderParams& enc, const WatermarkMessage& message,
                                  const SamplerConfig& cfg, const SpeechClip* s0_ref) {
  return run_sampler(voc, c, &enc, message, cfg, s0_ref);
}

namespace {

SpeechClip run_sampler(VocoderParams& voc, const MelSpectrogram& c,
                       EncoderParams* enc_ptr, const WatermarkMessage& message,
                       const SamplerConfig& cfg, const SpeechClip* s0_ref) {
  const bool watermarked = enc_ptr != nullptr;
  const int L = derive_length(c, voc.hop, cfg.length);
  check_mel_length(nullptr, c, L, voc.hop);
  if (watermarked) {
    if (message.length() != enc_ptr->cfg.payload_bits)
      throw std::invalid_argument("synthesize_watermarked: message/encoder mismatch");
    if (L != enc_ptr->cfg.input_length)
      throw std::invalid_argument("synthesize_watermarked: encoder built for length " +
                                  std::to_string(enc_ptr->cfg.input_length) +
                                  ", sampling " + std::to_string(L));
  }
  SamplingPlan plan = sampling_plan(voc, cfg);
  const NoiseSchedule& s = plan.sched;
  Rng rng(mix64(cfg.seed, 0x5A3D));

  std::vector<double> x = rng.normal_vec(L);
  Graph g;  // one no-grad graph for the whole loop; conditioner built once
  Node* mel = g.input(Shape{1, int(c.frames.rows()), int(c.frames.cols())}, mel_to_vec(c));
  Node* cond = vocoder_conditioner(g, voc, mel, L);

  for (int t = s.T; t >= 1; --t) {
    if (watermarked && t == cfg.injection_step) {
      std::vector<double> ref;
      if (s0_ref) {
        ref = s0_ref->samples;
      } else {
        // one-shot clean estimate at this step
        Node* xn = g.input(Shape{1, 1, L}, x);
        Node* eps = vocoder_eps(g, voc, xn, {plan.t_embed[t - 1]}, cond);
        const double abar = s.alpha_bars[t - 1];
        ref.resize(L);
        for (int i = 0; i < L; ++i)
          ref[i] = (x[i] - std::sqrt(1.0 - abar) * eps->data[i]) / std::sqrt(abar);
      }
      SpeechClip ref_clip;
      ref_clip.samples = std::move(ref);
      SpeechClip wm = encode(*enc_ptr, ref_clip, message);
      for (int i = 0; i < L; ++i) x[i] *= wm.samples[i];
    }
    Node* xn = g.input(Shape{1, 1, L}, x);
    Node* eps = vocoder_eps(g, voc, xn, {plan.t_embed[t - 1]}, cond);
    std::vector<double> eps_hat(eps->data, eps->data + eps->elems());
    std::vector<double> z(L, 0.0);
    if (t > 1) rng.fill_normal(z);
    x = p_step_from_eps(s, x, t, eps_hat, z);
  }
  SpeechClip out;
  out.sample_rate = kPipelineRate;
  out.samples = std::move(x);
  return out;
}

}  // namespace

double ddpm_pretrain_loss(VocoderParams& voc, const std::vector<SpeechClip>& s0,
                          const std::vector<MelSpectrogram>& mels, Rng& rng,
                          bool backprop) {
  if (s0.empty() || s0.size() != mels.size())
    throw std::invalid_argument("ddpm_pretrain_loss: batch mismatch");
  const int B = int(s0.size());
  const int L = int(s0[0].size());
  const int F = int(mels[0].frames.cols());
  for (const auto& c : s0)
    if (int(c.size()) != L)
      throw std::invalid_argument("ddpm_pretrain_loss: unequal clip lengths");

  const NoiseSchedule& s = voc.schedule;
  std::vector<Scalar> xt(std::size_t(B) * L), epsv(std::size_t(B) * L);
  std::vector<Scalar> melv(std::size_t(B) * voc.mel_bins * F);
  std::vector<double> tvals(B);
  for (int b = 0; b < B; ++b) {
    const int t = 1 + int(rng.uniform_int(std::uint64_t(s.T)));
    tvals[b] = double(t);
    std::vector<double> eps = rng.normal_vec(L);
    std::vector<double> noisy = q_sample(s, s0[b].samples, t, eps);
    std::copy(noisy.begin(), noisy.end(), xt.begin() + std::size_t(b) * L);
    std::copy(eps.begin(), eps.end(), epsv.begin() + std::size_t(b) * L);
    std::vector<Scalar> mv = mel_to_vec(mels[b]);
    std::copy(mv.begin(), mv.end(), melv.begin() + std::size_t(b) * voc.mel_bins * F);
  }

  Graph g;
  g.set_free_on_backward(true);
  Node* mel = g.input(Shape{B, voc.mel_bins, F}, melv);
  Node* cond = vocoder_conditioner(g, voc, mel, L);
  Node* x = g.input(Shape{B, 1, L}, xt);
  Node* eps_hat = vocoder_eps(g, voc, x, tvals, cond);
  Node* target = g.constant(Shape{B, 1, L}, epsv);
  Node* loss = g.mean_all(g.square(g.sub(eps_hat, target)));
  const double v = loss->data[0];
  if (backprop) g.backward(loss);
  return v;
}

void save_vocoder(const std::string& path, const VocoderParams& voc) {
  nlohmann::json meta = {{"residual_channels", voc.cfg.residual_channels},
                         {"layers", voc.cfg.layers},
                         {"dilation_cycle", voc.cfg.dilation_cycle},
                         {"cond_channels", voc.cfg.cond_channels},
                         {"emb_dim", voc.cfg.emb_dim},
                         {"emb_hidden", voc.cfg.emb_hidden},
                         {"schedule_steps", voc.cfg.schedule_steps},
                         {"beta_start", voc.cfg.beta_start},
                         {"beta_end", voc.cfg.beta_end},
                         {"feature_fingerprint", voc.cfg.feature_fingerprint},
                         {"seed", voc.cfg.seed},
                         {"mel_bins", voc.mel_bins},
                         {"hop", voc.hop},
                         {"architecture", voc.architecture()}};
  save_checkpoint(path, "diffusion_vocoder", meta, voc.store);
}

VocoderParams load_vocoder(const std::string& path,
                           std::optional<std::uint64_t> expect_fingerprint) {
  Checkpoint ck = load_checkpoint_raw(path);
  if (ck.manifest.at("kind").get<std::string>() != "diffusion_vocoder")
    throw CheckpointError("checkpoint is not a diffusion vocoder: " + path);
  if (expect_fingerprint &&
      ck.manifest.at("feature_fingerprint").get<std::uint64_t>() != *expect_fingerprint)
    throw CheckpointError("feature-config fingerprint mismatch: " + path);
  VocoderBuildConfig cfg;
  const auto& m = ck.manifest;
  cfg.residual_channels = m.at("residual_channels").get<int>();
  cfg.layers = m.at("layers").get<int>();
  cfg.dilation_cycle = m.at("dilation_cycle").get<int>();
  cfg.cond_channels = m.at("cond_channels").get<int>();
  cfg.emb_dim = m.at("emb_dim").get<int>();
  cfg.emb_hidden = m.at("emb_hidden").get<int>();
  cfg.schedule_steps = m.at("schedule_steps").get<int>();
  cfg.beta_start = m.at("beta_start").get<double>();
  cfg.beta_end = m.at("beta_end").get<double>();
  cfg.feature_fingerprint = m.at("feature_fingerprint").get<std::uint64_t>();
  cfg.seed = m.at("seed").get<std::uint64_t>();
  FeatureConfig feat;
  feat.mel_bins = m.at("mel_bins").get<int>();
  feat.hop_length = m.at("hop").get<int>();
  VocoderParams voc = build_vocoder(cfg, feat);
  voc.cfg.feature_fingerprint = cfg.feature_fingerprint;  // keep original
  if (voc.architecture() != ck.manifest.at("architecture"))
    throw CheckpointError("architecture descriptor mismatch: " + path);
  restore_params(ck, voc.store);
  return voc;
}

}  // namespace diffmark
