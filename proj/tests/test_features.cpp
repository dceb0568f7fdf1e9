// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>

#include "diffmark/features.hpp"
#include "diffmark/rng.hpp"

using namespace diffmark;

namespace {

SpeechClip make_clip(std::size_t n, double v = 0.0) {
  SpeechClip c;
  c.samples.assign(n, v);
  return c;
}

SpeechClip tone(double hz, std::size_t n = 22050, double amp = 0.5) {
  SpeechClip c;
  c.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    c.samples[i] = amp * std::sin(2 * M_PI * hz * double(i) / kPipelineRate);
  return c;
}

SpeechClip noise_clip(std::uint64_t seed, std::size_t n = 22050, double amp = 0.3) {
  Rng rng(seed);
  SpeechClip c;
  c.samples.resize(n);
  for (auto& s : c.samples) s = amp * rng.normal();
  return c;
}

}  // namespace

TEST_CASE("zero clip maps to all-zero mel frames") {
  FeatureConfig cfg;
  MelSpectrogram m = mel_spectrogram(make_clip(22050), cfg);
  CHECK(m.frames.rows() == 80);
  CHECK(m.frames.cols() == 22050 / 256 + 1);
  CHECK(m.frames.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pure 1 kHz tone concentrates in the right mel band") {
  FeatureConfig cfg;
  MelSpectrogram m = mel_spectrogram(tone(1000.0), cfg);
  const int expect = plan_for(cfg).nearest_mel_bin(1000.0);
  // centre frame argmax vs the mel-scale mapping of 1 kHz
  const int t = int(m.frames.cols()) / 2;
  int argmax = 0;
  for (int r = 1; r < m.frames.rows(); ++r)
    if (m.frames(r, t) > m.frames(argmax, t)) argmax = r;
  CHECK(std::abs(argmax - expect) <= 1);
}

TEST_CASE("extractors are deterministic pure functions") {
  FeatureConfig cfg;
  SpeechClip a = noise_clip(11);
  MelSpectrogram m1 = mel_spectrogram(a, cfg);
  MelSpectrogram m2 = mel_spectrogram(a, cfg);
  CHECK(m1.frames == m2.frames);
  StftMagnitude s1 = stft_magnitude(a, cfg);
  StftMagnitude s2 = stft_magnitude(a, cfg);
  CHECK(s1.bins == s2.bins);
}

TEST_CASE("stft of zero clip is zero; bins row count = fft/2+1") {
  FeatureConfig cfg;
  StftMagnitude s = stft_magnitude(make_clip(22050), cfg);
  CHECK(s.bins.rows() == 513);
  CHECK(s.bins.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("unit impulse: frame 0 magnitude matches direct DFT of windowed impulse") {
  FeatureConfig cfg;
  SpeechClip c = make_clip(2048);
  c.samples[0] = 1.0;
  StftMagnitude s = stft_magnitude(c, cfg);
  // with centre padding, sample 0 sits at window index fft/2 in frame 0
  const auto& win = plan_for(cfg).window();
  const int center = cfg.fft_size / 2;
  for (int k = 0; k < 513; k += 64) {
    // direct DFT of the windowed impulse: w[center] * e^{-i 2 pi k center / N}
    const double expect = win[center];  // modulus
    CHECK(s.bins(k, 0) == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("Parseval: half-spectrum energy equals windowed frame energy") {
  FeatureConfig cfg;
  SpeechClip a = noise_clip(17, 4096);
  StftMagnitude s = stft_magnitude(a, cfg);
  const auto& win = plan_for(cfg).window();
  const int t = 8;  // an interior frame
  const int start = t * cfg.hop_length - cfg.fft_size / 2;
  double frame_energy = 0;
  for (int j = 0; j < cfg.fft_size; ++j) {
    const int idx = start + j;
    const double v = (idx >= 0 && idx < int(a.size())) ? a.samples[idx] : 0.0;
    frame_energy += v * win[j] * v * win[j];
  }
  double spec_energy = s.bins(0, t) * s.bins(0, t) + s.bins(512, t) * s.bins(512, t);
  for (int k = 1; k < 512; ++k) spec_energy += 2.0 * s.bins(k, t) * s.bins(k, t);
  CHECK(spec_energy / cfg.fft_size ==
        doctest::Approx(frame_energy).epsilon(1e-4));
}

TEST_CASE("mel cepstra identities") {
  FeatureConfig cfg;
  SpeechClip a = noise_clip(23);
  Eigen::MatrixXd c1 = mel_cepstra(a, 13, cfg);
  Eigen::MatrixXd c2 = mel_cepstra(a, 13, cfg);
  CHECK(c1 == c2);
  CHECK(c1.rows() == 13);

  // zero clip: floor dominates -> c0 = sqrt(M) log(floor), rest 0
  Eigen::MatrixXd cz = mel_cepstra(make_clip(22050), 13, cfg);
  const double c0_expect = std::sqrt(80.0) * std::log(cfg.log_floor);
  for (int t = 0; t < cz.cols(); ++t) {
    CHECK(cz(0, t) == doctest::Approx(c0_expect).epsilon(1e-12));
    for (int p = 1; p < 13; ++p) CHECK(std::fabs(cz(p, t)) < 1e-9);
  }

  CHECK_THROWS_AS(mel_cepstra(a, 81, cfg), std::invalid_argument);
  CHECK_THROWS_AS(mel_cepstra(a, 0, cfg), std::invalid_argument);
}

TEST_CASE("doubling amplitude shifts only cepstral coefficient 0") {
  // log-scaling oracle: log(2x) = log 2 + log(x) when x is above the floor
  FeatureConfig cfg;
  SpeechClip a = noise_clip(29);  // white noise keeps every mel bin above floor
  SpeechClip b = a;
  for (auto& s : b.samples) s *= 2.0;
  Eigen::MatrixXd ca = mel_cepstra(a, 13, cfg);
  Eigen::MatrixXd cb = mel_cepstra(b, 13, cfg);
  const double dc0 = std::sqrt(80.0) * std::log(2.0);
  for (int t = 2; t + 2 < ca.cols(); ++t) {  // interior frames (edges touch padding)
    CHECK(cb(0, t) - ca(0, t) == doctest::Approx(dc0).epsilon(1e-9));
    for (int p = 1; p < 13; ++p)
      CHECK(std::fabs(cb(p, t) - ca(p, t)) < 1e-9);
  }
}

TEST_CASE("mel graph op gradient matches central differences") {
  FeatureConfig cfg;
  Rng rng(31);
  const int L = 2205;  // 0.1 s
  std::vector<Scalar> x(L);
  for (auto& v : x) v = 0.3 * rng.normal();

  auto loss_at = [&](const std::vector<Scalar>& vals) {
    Graph g;
    Node* in = g.input(Shape{1, 1, L}, vals);
    Node* mel = mel_op(g, in, cfg);
    Node* s = g.sum_all(mel);
    return s->data[0];
  };

  Graph g;
  Node* in = g.input(Shape{1, 1, L}, x, /*needs_grad=*/true);
  Node* mel = mel_op(g, in, cfg);
  Node* s = g.sum_all(mel);
  g.backward(s);
  std::vector<Scalar> analytic(in->grad(), in->grad() + L);

  Rng pick(37);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t i = pick.uniform_int(L);
    const double h = 1e-5;
    std::vector<Scalar> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (loss_at(xp) - loss_at(xm)) / (2 * h);
    const double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), 1e-6});
    CHECK(std::fabs(fd - analytic[i]) / denom < 1e-3);
  }
}

TEST_CASE("stft graph op gradient check") {
  FeatureConfig cfg;
  Rng rng(41);
  const int L = 1024;
  std::vector<Scalar> x(L);
  for (auto& v : x) v = 0.4 * rng.normal();
  auto loss_at = [&](const std::vector<Scalar>& vals) {
    Graph g;
    Node* in = g.input(Shape{1, 1, L}, vals);
    Node* m = stft_mag_op(g, in, cfg);
    return g.sum_all(g.square(m))->data[0];
  };
  Graph g;
  Node* in = g.input(Shape{1, 1, L}, x, true);
  Node* m = stft_mag_op(g, in, cfg);
  Node* loss = g.sum_all(g.square(m));
  g.backward(loss);
  std::vector<Scalar> analytic(in->grad(), in->grad() + L);
  Rng pick(43);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t i = pick.uniform_int(L);
    const double h = 1e-6;
    std::vector<Scalar> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (loss_at(xp) - loss_at(xm)) / (2 * h);
    const double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), 1e-6});
    CHECK(std::fabs(fd - analytic[i]) / denom < 1e-3);
  }
}

TEST_CASE("mel file round trip and header validation") {
  FeatureConfig cfg;
  SpeechClip a = noise_clip(47);
  MelSpectrogram m = mel_spectrogram(a, cfg);
  auto dir = std::filesystem::temp_directory_path() / "diffmark_feat_tests";
  std::filesystem::create_directories(dir);
  const std::string p = (dir / "mel.bin").string();
  save_mel(p, m, cfg);
  MelSpectrogram back = load_mel(p, cfg);
  CHECK(back.frames == m.frames);
  CHECK(back.n_samples == 22050);

  FeatureConfig other = cfg;
  other.mel_bins = 40;
  CHECK_THROWS(load_mel(p, other));
  CHECK_THROWS_AS(load_mel((dir / "nope.bin").string(), cfg), FileMissingError);
}

TEST_CASE("feature fingerprint tracks config changes") {
  FeatureConfig a, b;
  CHECK(a.fingerprint() == b.fingerprint());
  b.hop_length = 128;
  CHECK(a.fingerprint() != b.fingerprint());
}
