// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>

#include "diffmark/rng.hpp"

namespace diffmark {

SpeechClip synth_speech_clip(std::uint64_t seed, double seconds, int rate) {
  Rng rng(mix64(seed, 0xC0F5));
  const int n = int(std::llround(seconds * rate));
  SpeechClip clip;
  clip.sample_rate = rate;
  clip.samples.assign(n, 0.0);

  // speaker-ish traits
  const double f0_base = rng.uniform(95.0, 220.0);
  const double vibrato_hz = rng.uniform(4.5, 6.5);
  const double vibrato_amt = rng.uniform(0.005, 0.02);
  const double syl_rate = rng.uniform(2.5, 5.0);
  const double syl_phase = rng.uniform(0.0, 2.0 * M_PI);

  // formant targets change every 80..200 ms
  struct Form {
    double f, bw, gain;
  };
  auto draw_formants = [&](std::array<Form, 3>& f) {
    f[0] = {rng.uniform(300, 900), rng.uniform(60, 120), 1.0};
    f[1] = {rng.uniform(900, 2400), rng.uniform(90, 180), rng.uniform(0.5, 0.9)};
    f[2] = {rng.uniform(2400, 3500), rng.uniform(120, 260), rng.uniform(0.25, 0.5)};
  };
  std::array<Form, 3> cur{}, next{};
  draw_formants(cur);
  draw_formants(next);
  int seg_len = int(rng.uniform(0.08, 0.2) * rate);
  int seg_pos = 0;

  // pauses roughly one per second
  const double pause_start = rng.uniform(0.35, 0.9) * seconds;
  const double pause_len = rng.uniform(0.05, 0.12);

  const int harmonics = 60;
  std::vector<double> phase(harmonics, 0.0);
  for (int h = 0; h < harmonics; ++h) phase[h] = rng.uniform(0.0, 2.0 * M_PI);
  double f0_walk = 0.0;
  double lf_state = 0.0;  // one-pole lowpass for breath noise
  const double lf_coef = std::exp(-2.0 * M_PI * 400.0 / rate);

  for (int i = 0; i < n; ++i) {
    const double t = double(i) / rate;
    if (++seg_pos >= seg_len) {
      cur = next;
      draw_formants(next);
      seg_len = int(rng.uniform(0.08, 0.2) * rate);
      seg_pos = 0;
    }
    const double mix = double(seg_pos) / seg_len;
    f0_walk += rng.uniform(-1.0, 1.0) * 0.02;
    f0_walk = std::clamp(f0_walk, -6.0, 6.0);
    const double f0 = f0_base * (1.0 - 0.12 * t / seconds) *
                          (1.0 + vibrato_amt * std::sin(2 * M_PI * vibrato_hz * t)) +
                      f0_walk;

    double syl = 0.5 + 0.5 * std::sin(2 * M_PI * syl_rate * t + syl_phase);
    syl = 0.30 + 0.70 * std::pow(syl, 1.5);
    double env = syl;
    env *= std::min(1.0, t / 0.04);                    // onset
    env *= std::min(1.0, (seconds - t) / 0.05);        // offset
    if (t > pause_start && t < pause_start + pause_len) env *= 0.05;

    double v = 0.0;
    for (int h = 1; h <= harmonics; ++h) {
      const double fh = f0 * h;
      if (fh > rate * 0.42) break;
      phase[h - 1] += 2.0 * M_PI * fh / rate;
      double g = 0.04;  // spectral floor
      for (int k = 0; k < 3; ++k) {
        const Form a = cur[k], b = next[k];
        const double fc = a.f + (b.f - a.f) * mix;
        const double bw = a.bw + (b.bw - a.bw) * mix;
        const double ga = a.gain + (b.gain - a.gain) * mix;
        const double d = (fh - fc) / bw;
        g += ga / (1.0 + d * d);
      }
      v += g * std::sin(phase[h - 1]) / std::sqrt(double(h));
    }
    // aspiration / fricative-ish noise, stronger in syllable troughs, plus a
    // low-frequency breath component so the valleys between harmonics stay
    // broadband the way voiced speech does
    const double noise = rng.normal() * (0.02 + 0.05 * (1.0 - syl));
    lf_state = lf_coef * lf_state + (1.0 - lf_coef) * rng.normal();
    clip.samples[i] = env * (v * 0.22 + noise + 2.0 * lf_state);
  }

  const double pk = clip.peak();
  const double target = 0.5 + 0.25 * rng.uniform();
  if (pk > 0)
    for (auto& s : clip.samples) s *= target / pk;
  return clip;
}

std::vector<SpeechClip> synth_corpus(std::uint64_t seed, int n_clips, double seconds,
                                     int rate) {
  std::vector<SpeechClip> out;
  out.reserve(n_clips);
  for (int i = 0; i < n_clips; ++i)
    out.push_back(synth_speech_clip(mix64(seed, std::uint64_t(i)), seconds, rate));
  return out;
}

void write_corpus(const std::string& dir, const std::vector<SpeechClip>& clips) {
  std::filesystem::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < clips.size(); ++i) {
    std::snprintf(name, sizeof(name), "clip_%04zu.wav", i);
    save_wav((std::filesystem::path(dir) / name).string(), clips[i]);
  }
}

std::vector<SpeechClip> load_corpus_dir(const std::string& dir, double segment_seconds) {
  if (!std::filesystem::is_directory(dir))
    throw FileMissingError("corpus directory missing: " + dir);
  std::vector<std::string> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav")
      paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  std::vector<SpeechClip> out;
  for (const auto& p : paths) {
    SpeechClip c = load_wav(p);
    for (auto& seg : segment(c, segment_seconds)) out.push_back(std::move(seg));
  }
  return out;
}

}  // namespace diffmark
