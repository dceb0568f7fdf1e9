// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/metrics.hpp"

#include <cmath>

namespace diffmark {

const char* pair_kind_name(PairKind k) {
  switch (k) {
    case PairKind::generated_vs_natural: return "generated_vs_natural";
    case PairKind::watermarked_vs_generated: return "watermarked_vs_generated";
    case PairKind::watermarked_vs_natural: return "watermarked_vs_natural";
  }
  return "?";
}

double bit_accuracy(const DecodedMessage& decoded, const WatermarkMessage& expected) {
  if (decoded.length() != expected.length())
    throw std::invalid_argument("bit_accuracy: length mismatch");
  int k = 0;
  for (int i = 0; i < expected.length(); ++i)
    if (decoded.hard_bits[i] == expected.bits[i]) ++k;
  return double(k) / double(expected.length());
}

namespace {

// 15 one-third-octave band envelopes (rows) per frame (cols).
Eigen::MatrixXd third_octave_envelopes(const StftMagnitude& st, const FeatureConfig& cfg) {
  constexpr int kBands = 15;
  const int bins = int(st.bins.rows());
  const int frames = int(st.bins.cols());
  Eigen::MatrixXd env = Eigen::MatrixXd::Zero(kBands, frames);
  for (int b = 0; b < kBands; ++b) {
    const double fc = 150.0 * std::pow(2.0, double(b) / 3.0);
    const double lo = fc * std::pow(2.0, -1.0 / 6.0);
    const double hi = fc * std::pow(2.0, 1.0 / 6.0);
    const int k0 = int(std::ceil(lo * cfg.fft_size / cfg.sample_rate));
    const int k1 = std::min(bins - 1, int(std::floor(hi * cfg.fft_size / cfg.sample_rate)));
    for (int t = 0; t < frames; ++t) {
      double acc = 0;
      for (int k = std::max(k0, 0); k <= k1; ++k) acc += st.bins(k, t) * st.bins(k, t);
      env(b, t) = std::sqrt(acc);
    }
  }
  return env;
}

}  // namespace

double stoi_proxy(const SpeechClip& reference, const SpeechClip& degraded,
                  const FeatureConfig& cfg) {
  if (reference.size() != degraded.size())
    throw std::invalid_argument("stoi_proxy: equal lengths required");
  if (reference.sample_rate != degraded.sample_rate)
    throw std::invalid_argument("stoi_proxy: sample-rate mismatch");
  if (reference.rms() == 0.0)
    throw MetricError("stoi_proxy: silent reference is undefined");

  StftMagnitude sr = stft_magnitude(reference, cfg);
  StftMagnitude sd = stft_magnitude(degraded, cfg);
  Eigen::MatrixXd er_all = third_octave_envelopes(sr, cfg);
  Eigen::MatrixXd ed_all = third_octave_envelopes(sd, cfg);

  // 384 ms of frames at the configured hop.
  const int seg = std::max(2, int(std::lround(0.384 * cfg.sample_rate / cfg.hop_length)));

  // drop reference frames more than 40 dB below the loudest frame
  std::vector<int> keep;
  {
    Eigen::VectorXd energy = er_all.colwise().squaredNorm();
    const double thresh = energy.maxCoeff() * 1e-4;
    for (int t = 0; t < er_all.cols(); ++t)
      if (energy(t) >= thresh) keep.push_back(t);
    if (int(keep.size()) < seg)
      for (keep.clear(); int(keep.size()) < er_all.cols();)
        keep.push_back(int(keep.size()));  // too little voiced material: use all
  }
  Eigen::MatrixXd er(er_all.rows(), keep.size());
  Eigen::MatrixXd ed(ed_all.rows(), keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    er.col(i) = er_all.col(keep[i]);
    ed.col(i) = ed_all.col(keep[i]);
  }
  const int frames = int(er.cols());
  if (frames < seg) throw MetricError("stoi_proxy: clip shorter than one segment");

  const double sdr_bound = 1.0 + std::pow(10.0, 15.0 / 20.0);  // -15 dB clip
  double acc = 0;
  long count = 0;
  std::vector<double> xs(seg), ys(seg);
  for (int b = 0; b < er.rows(); ++b) {
    for (int t0 = 0; t0 + seg <= frames; ++t0) {
      double ex = 0, ey = 0;
      for (int j = 0; j < seg; ++j) {
        xs[j] = er(b, t0 + j);
        ys[j] = ed(b, t0 + j);
        ex += xs[j] * xs[j];
        ey += ys[j] * ys[j];
      }
      // energy-normalize the degraded segment, clip its overshoot
      const double alpha = ey > 0 ? std::sqrt(ex / ey) : 0.0;
      for (int j = 0; j < seg; ++j) ys[j] = std::min(alpha * ys[j], sdr_bound * xs[j]);
      double mx = 0, my = 0;
      for (int j = 0; j < seg; ++j) {
        mx += xs[j];
        my += ys[j];
      }
      mx /= seg;
      my /= seg;
      double vxx = 0, vyy = 0, vxy = 0;
      for (int j = 0; j < seg; ++j) {
        const double dx = xs[j] - mx;
        const double dy = ys[j] - my;
        vxx += dx * dx;
        vyy += dy * dy;
        vxy += dx * dy;
      }
      if (vxx < 1e-20) continue;  // flat reference envelope carries no cue
      double r = vyy < 1e-20 ? 0.0 : vxy / (std::sqrt(vxx) * std::sqrt(vyy));
      acc += std::min(r, 1.0);
      ++count;
    }
  }
  if (count == 0) throw MetricError("stoi_proxy: no usable segments in reference");
  return std::clamp(acc / double(count), 0.0, 1.0);
}

double mel_ssim(const SpeechClip& a, const SpeechClip& b, const FeatureConfig& cfg) {
  if (a.size() != b.size()) throw std::invalid_argument("mel_ssim: equal lengths required");
  MelSpectrogram ma = mel_spectrogram(a, cfg);
  MelSpectrogram mb = mel_spectrogram(b, cfg);
  Eigen::MatrixXd X = ma.frames.unaryExpr(
      [&](double v) { return std::log(std::max(v, cfg.log_floor)); });
  Eigen::MatrixXd Y = mb.frames.unaryExpr(
      [&](double v) { return std::log(std::max(v, cfg.log_floor)); });

  const double lo = std::min(X.minCoeff(), Y.minCoeff());
  const double hi = std::max(X.maxCoeff(), Y.maxCoeff());
  if (hi <= lo) return 1.0;  // both images constant and equal
  X = (X.array() - lo) / (hi - lo);
  Y = (Y.array() - lo) / (hi - lo);

  constexpr int W = 11;
  constexpr double sigma = 1.5;
  double w[W];
  double wsum = 0;
  for (int i = 0; i < W; ++i) {
    const double d = i - (W - 1) / 2.0;
    w[i] = std::exp(-d * d / (2 * sigma * sigma));
    wsum += w[i];
  }
  for (int i = 0; i < W; ++i) w[i] /= wsum;

  const int rows = int(X.rows()), cols = int(X.cols());
  if (rows < W || cols < W) throw MetricError("mel_ssim: image smaller than window");
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double acc = 0;
  long count = 0;
  for (int r0 = 0; r0 + W <= rows; ++r0) {
    for (int c0 = 0; c0 + W <= cols; ++c0) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < W; ++i)
        for (int j = 0; j < W; ++j) {
          const double ww = w[i] * w[j];
          const double x = X(r0 + i, c0 + j), y = Y(r0 + i, c0 + j);
          mx += ww * x;
          my += ww * y;
          sxx += ww * x * x;
          syy += ww * y * y;
          sxy += ww * x * y;
        }
      const double vx = sxx - mx * mx;
      const double vy = syy - my * my;
      const double cxy = sxy - mx * my;
      const double num = (2 * mx * my + C1) * (2 * cxy + C2);
      const double den = (mx * mx + my * my + C1) * (vx + vy + C2);
      acc += num / den;
      ++count;
    }
  }
  return acc / double(count);
}

double mcd(const SpeechClip& a, const SpeechClip& b, const FeatureConfig& cfg, int order) {
  if (a.size() != b.size()) throw std::invalid_argument("mcd: equal lengths required");
  Eigen::MatrixXd ca = mel_cepstra(a, order, cfg);
  Eigen::MatrixXd cb = mel_cepstra(b, order, cfg);
  const double scale = 10.0 * std::sqrt(2.0) / std::log(10.0);
  double acc = 0;
  for (int t = 0; t < ca.cols(); ++t) {
    double d2 = 0;
    for (int p = 1; p < order; ++p) {  // coefficient 0 carries gain, excluded
      const double d = ca(p, t) - cb(p, t);
      d2 += d * d;
    }
    acc += std::sqrt(d2);
  }
  return scale * acc / double(ca.cols());
}

MetricReport metric_report(const SpeechClip& a, const SpeechClip& b,
                           const FeatureConfig& cfg, PairKind kind) {
  MetricReport r;
  r.stoi = stoi_proxy(a, b, cfg);
  r.ssim = mel_ssim(a, b, cfg);
  r.mcd = mcd(a, b, cfg);
  r.pair_kind = kind;
  return r;
}

}  // namespace diffmark
