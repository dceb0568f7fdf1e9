// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/features.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace diffmark {

namespace {

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

std::string FeatureConfig::canonical() const {
  std::ostringstream os;
  os << "sr=" << sample_rate << ";fft=" << fft_size << ";hop=" << hop_length
     << ";win=" << win_length << ";mel=" << mel_bins << ";fmin=" << fmin
     << ";fmax=" << fmax << ";floor=" << log_floor;
  return os.str();
}

std::uint64_t FeatureConfig::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

FeaturePlan::FeaturePlan(const FeatureConfig& cfg)
    : cfg_(cfg), fft_(std::size_t(cfg.fft_size)) {
  if (cfg.win_length != cfg.fft_size)
    throw std::invalid_argument("FeaturePlan: win_length != fft_size not supported");
  // periodic Hann
  window_.resize(cfg.win_length);
  for (int i = 0; i < cfg.win_length; ++i)
    window_[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / cfg.win_length);

  const int bins = cfg.bins();
  mel_fb_.assign(std::size_t(cfg.mel_bins) * bins, 0.0);
  mel_centers_hz_.resize(cfg.mel_bins);
  const double mel_lo = hz_to_mel(cfg.fmin), mel_hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(cfg.mel_bins + 2);
  for (int i = 0; i < cfg.mel_bins + 2; ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.mel_bins + 1));
  for (int m = 0; m < cfg.mel_bins; ++m) {
    mel_centers_hz_[m] = edges[m + 1];
    for (int k = 0; k < bins; ++k) {
      const double f = double(k) * cfg.sample_rate / cfg.fft_size;
      double w = 0;
      if (f >= edges[m] && f <= edges[m + 1] && edges[m + 1] > edges[m])
        w = (f - edges[m]) / (edges[m + 1] - edges[m]);
      else if (f > edges[m + 1] && f <= edges[m + 2] && edges[m + 2] > edges[m + 1])
        w = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
      mel_fb_[std::size_t(m) * bins + k] = w;
    }
  }
}

std::vector<double> FeaturePlan::dct_rows(int order) const {
  const int M = cfg_.mel_bins;
  std::vector<double> d(std::size_t(order) * M);
  for (int p = 0; p < order; ++p) {
    const double s = (p == 0) ? std::sqrt(1.0 / M) : std::sqrt(2.0 / M);
    for (int m = 0; m < M; ++m)
      d[std::size_t(p) * M + m] = s * std::cos(M_PI * p * (m + 0.5) / M);
  }
  return d;
}

int FeaturePlan::nearest_mel_bin(double hz) const {
  int best = 0;
  double err = std::fabs(mel_centers_hz_[0] - hz);
  for (int m = 1; m < cfg_.mel_bins; ++m) {
    double e = std::fabs(mel_centers_hz_[m] - hz);
    if (e < err) {
      err = e;
      best = m;
    }
  }
  return best;
}

const FeaturePlan& plan_for(const FeatureConfig& cfg) {
  static std::map<std::string, std::unique_ptr<FeaturePlan>> cache;
  const std::string key = cfg.canonical();
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, std::make_unique<FeaturePlan>(cfg)).first;
  return *it->second;
}

namespace {

// One clip -> magnitude STFT. Optionally keeps re/im for the adjoint.
void stft_kernel(const double* x, int L, const FeaturePlan& plan, double* mag,
                 double* re = nullptr, double* im = nullptr) {
  const FeatureConfig& cfg = plan.config();
  const int N = cfg.fft_size, hop = cfg.hop_length, bins = cfg.bins();
  const int F = cfg.frames(L);
  const int pad = N / 2;
  std::vector<std::complex<double>> buf(N);
  for (int t = 0; t < F; ++t) {
    const int start = t * hop - pad;
    for (int j = 0; j < N; ++j) {
      const int idx = start + j;
      const double v = (idx >= 0 && idx < L) ? x[idx] : 0.0;
      buf[j] = {v * plan.window()[j], 0.0};
    }
    plan.fft().forward(buf.data());
    for (int k = 0; k < bins; ++k) {
      const double r = buf[k].real(), i = buf[k].imag();
      mag[std::size_t(k) * F + t] = std::sqrt(r * r + i * i);
      if (re) re[std::size_t(k) * F + t] = r;
      if (im) im[std::size_t(k) * F + t] = i;
    }
  }
}

// Adjoint of stft_kernel's magnitude output: accumulates into gx.
void stft_adjoint(const double* gmag, const double* mag, const double* re,
                  const double* im, int L, const FeaturePlan& plan, double* gx) {
  const FeatureConfig& cfg = plan.config();
  const int N = cfg.fft_size, hop = cfg.hop_length, bins = cfg.bins();
  const int F = cfg.frames(L);
  const int pad = N / 2;
  std::vector<std::complex<double>> buf(N);
  for (int t = 0; t < F; ++t) {
    for (int j = 0; j < N; ++j) buf[j] = {0.0, 0.0};
    for (int k = 0; k < bins; ++k) {
      const double m = mag[std::size_t(k) * F + t];
      if (m <= 0) continue;
      const double g = gmag[std::size_t(k) * F + t] / m;
      buf[k] = {g * re[std::size_t(k) * F + t], g * im[std::size_t(k) * F + t]};
    }
    // g_time = Re(sum_k c_k e^{+i 2 pi k n / N}) = N * Re(ifft(c))
    plan.fft().inverse(buf.data());
    const int start = t * hop - pad;
    for (int j = 0; j < N; ++j) {
      const int idx = start + j;
      if (idx >= 0 && idx < L)
        gx[idx] += double(N) * buf[j].real() * plan.window()[j];
    }
  }
}

}  // namespace

StftMagnitude stft_magnitude(const SpeechClip& clip, const FeatureConfig& cfg) {
  const FeaturePlan& plan = plan_for(cfg);
  const int L = int(clip.size());
  const int F = cfg.frames(L);
  StftMagnitude out;
  out.fft_size = cfg.fft_size;
  out.hop_length = cfg.hop_length;
  out.bins.resize(cfg.bins(), F);
  std::vector<double> mag(std::size_t(cfg.bins()) * F);
  stft_kernel(clip.samples.data(), L, plan, mag.data());
  for (int k = 0; k < cfg.bins(); ++k)
    for (int t = 0; t < F; ++t) out.bins(k, t) = mag[std::size_t(k) * F + t];
  return out;
}

MelSpectrogram mel_spectrogram(const SpeechClip& clip, const FeatureConfig& cfg) {
  const FeaturePlan& plan = plan_for(cfg);
  StftMagnitude st = stft_magnitude(clip, cfg);
  MelSpectrogram out;
  out.mel_bins = cfg.mel_bins;
  out.hop_length = cfg.hop_length;
  out.win_length = cfg.win_length;
  out.n_samples = int(clip.size());
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      FB(plan.mel_fb().data(), cfg.mel_bins, cfg.bins());
  out.frames = FB * st.bins;
  return out;
}

Eigen::MatrixXd mel_cepstra(const SpeechClip& clip, int order, const FeatureConfig& cfg) {
  if (order < 1) throw std::invalid_argument("mel_cepstra: order must be >= 1");
  if (order > cfg.mel_bins)
    throw std::invalid_argument("mel_cepstra: order exceeds mel_bins");
  const FeaturePlan& plan = plan_for(cfg);
  MelSpectrogram mel = mel_spectrogram(clip, cfg);
  Eigen::MatrixXd logmel = mel.frames.unaryExpr(
      [&](double v) { return std::log(std::max(v, cfg.log_floor)); });
  std::vector<double> d = plan.dct_rows(order);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      D(d.data(), order, cfg.mel_bins);
  return D * logmel;  // order x frames
}

Node* stft_mag_op(Graph& g, Node* x, const FeatureConfig& cfg) {
  if (x->shape.c != 1) throw std::invalid_argument("stft_mag_op: expects (b,1,L)");
  const FeaturePlan& plan = plan_for(cfg);
  const int B = x->shape.b, L = x->shape.l;
  const int F = cfg.frames(L), bins = cfg.bins();
  Node* out = g.make(Shape{B, bins, F}, x->needs_grad);
  const std::size_t per = std::size_t(bins) * F;
  auto re = std::make_shared<std::vector<double>>();
  auto im = std::make_shared<std::vector<double>>();
  if (x->needs_grad) {
    re->assign(std::size_t(B) * per, 0.0);
    im->assign(std::size_t(B) * per, 0.0);
  }
  for (int bb = 0; bb < B; ++bb)
    stft_kernel(x->data + std::size_t(bb) * L, L, plan, out->data + std::size_t(bb) * per,
                x->needs_grad ? re->data() + std::size_t(bb) * per : nullptr,
                x->needs_grad ? im->data() + std::size_t(bb) * per : nullptr);
  if (out->needs_grad) {
    out->backprop = [out, x, B, L, per, &plan, re, im](Graph&) {
      for (int bb = 0; bb < B; ++bb)
        stft_adjoint(out->grad() + std::size_t(bb) * per,
                     out->data + std::size_t(bb) * per, re->data() + std::size_t(bb) * per,
                     im->data() + std::size_t(bb) * per, L, plan,
                     x->grad() + std::size_t(bb) * L);
    };
  }
  return out;
}

Node* mel_op(Graph& g, Node* x, const FeatureConfig& cfg) {
  const FeaturePlan& plan = plan_for(cfg);
  Node* mag = stft_mag_op(g, x, cfg);
  return g.channel_matmul(mag, plan.mel_fb(), cfg.mel_bins);
}

namespace {
constexpr char kMelMagic[8] = {'D', 'M', 'K', 'M', 'E', 'L', '0', '1'};
}

void save_mel(const std::string& path, const MelSpectrogram& mel, const FeatureConfig& cfg) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw AudioError("cannot write mel file: " + path);
  f.write(kMelMagic, 8);
  std::uint32_t hdr[8] = {1u,
                          std::uint32_t(mel.frames.rows()),
                          std::uint32_t(mel.frames.cols()),
                          std::uint32_t(cfg.sample_rate),
                          std::uint32_t(cfg.fft_size),
                          std::uint32_t(cfg.hop_length),
                          std::uint32_t(cfg.win_length),
                          std::uint32_t(mel.n_samples)};
  f.write(reinterpret_cast<char*>(hdr), sizeof(hdr));
  for (int r = 0; r < mel.frames.rows(); ++r)
    for (int c = 0; c < mel.frames.cols(); ++c) {
      double v = mel.frames(r, c);
      f.write(reinterpret_cast<char*>(&v), 8);
    }
  if (!f) throw AudioError("short write: " + path);
}

MelSpectrogram load_mel(const std::string& path, const FeatureConfig& cfg) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileMissingError("cannot open mel file: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMelMagic, 8) != 0)
    throw MalformedWavError("unknown mel file format: " + path);
  std::uint32_t hdr[8];
  f.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!f) throw MalformedWavError("truncated mel header: " + path);
  if (hdr[0] != 1) throw MalformedWavError("unsupported mel file version: " + path);
  if (int(hdr[1]) != cfg.mel_bins || int(hdr[3]) != cfg.sample_rate ||
      int(hdr[4]) != cfg.fft_size || int(hdr[5]) != cfg.hop_length ||
      int(hdr[6]) != cfg.win_length)
    throw MalformedWavError("mel file does not match feature config: " + path);
  MelSpectrogram mel;
  mel.mel_bins = int(hdr[1]);
  mel.hop_length = cfg.hop_length;
  mel.win_length = cfg.win_length;
  mel.n_samples = int(hdr[7]);
  mel.frames.resize(int(hdr[1]), int(hdr[2]));
  for (int r = 0; r < mel.frames.rows(); ++r)
    for (int c = 0; c < mel.frames.cols(); ++c) {
      double v;
      f.read(reinterpret_cast<char*>(&v), 8);
      mel.frames(r, c) = v;
    }
  if (!f) throw MalformedWavError("truncated mel data: " + path);
  return mel;
}

}  // namespace diffmark
