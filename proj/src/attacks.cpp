// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <sstream>

#include "diffmark/fft.hpp"

namespace diffmark {

const char* attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::gaussian_noise: return "gaussian_noise";
    case AttackKind::pink_noise: return "pink_noise";
    case AttackKind::lowpass: return "lowpass";
    case AttackKind::bandpass: return "bandpass";
    case AttackKind::suppress_front: return "suppress_front";
    case AttackKind::suppress_behind: return "suppress_behind";
    case AttackKind::echo: return "echo";
    case AttackKind::time_stretch: return "time_stretch";
    case AttackKind::dither: return "dither";
    case AttackKind::identity: return "identity";
  }
  return "?";
}

void AttackSpec::validate(int rate) const {
  const double nyq = rate / 2.0;
  switch (kind) {
    case AttackKind::gaussian_noise:
      if (snr_db < -10.0 || snr_db > 60.0)
        throw AttackValidationError("gaussian_noise: snr_db outside [-10, 60]");
      break;
    case AttackKind::pink_noise:
      if (!(std > 0.0) || std > 10.0)
        throw AttackValidationError("pink_noise: std outside (0, 10]");
      break;
    case AttackKind::lowpass:
      if (!(cutoff_hz > 0.0) || cutoff_hz >= nyq)
        throw AttackValidationError("lowpass: cutoff must be in (0, nyquist)");
      break;
    case AttackKind::bandpass:
      if (!(low_hz > 0.0) || low_hz >= high_hz || high_hz >= nyq)
        throw AttackValidationError("bandpass: need 0 < low < high < nyquist");
      break;
    case AttackKind::suppress_front:
    case AttackKind::suppress_behind:
      if (!(fraction > 0.0) || !(fraction < 1.0))
        throw AttackValidationError("suppression: fraction must be in (0, 1)");
      if (gain < 0.0 || gain > 1.0)
        throw AttackValidationError("suppression: gain must be in [0, 1]");
      break;
    case AttackKind::echo:
      if (!(delay_s > 0.0) || delay_s > 2.0)
        throw AttackValidationError("echo: delay_s must be in (0, 2]");
      if (decay < 0.0 || decay > 1.0)
        throw AttackValidationError("echo: decay must be in [0, 1]");
      break;
    case AttackKind::time_stretch:
      if (!(factor > 0.0) || factor > 8.0)
        throw AttackValidationError("time_stretch: factor must be in (0, 8]");
      break;
    case AttackKind::dither:
    case AttackKind::identity:
      break;
  }
}

void CompoundAttack::validate(int rate) const {
  if (stages.empty() || stages.size() > 4)
    throw AttackValidationError("compound attack: 1..4 stages required");
  for (const auto& s : stages) s.validate(rate);
}

namespace {

std::string fmt_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

std::string AttackSpec::to_string() const {
  std::string s = attack_kind_name(kind);
  std::vector<std::string> kv;
  switch (kind) {
    case AttackKind::gaussian_noise: kv.push_back("snr_db=" + fmt_num(snr_db)); break;
    case AttackKind::pink_noise: kv.push_back("std=" + fmt_num(std)); break;
    case AttackKind::lowpass: kv.push_back("cutoff_hz=" + fmt_num(cutoff_hz)); break;
    case AttackKind::bandpass:
      kv.push_back("low_hz=" + fmt_num(low_hz));
      kv.push_back("high_hz=" + fmt_num(high_hz));
      break;
    case AttackKind::suppress_front:
    case AttackKind::suppress_behind:
      kv.push_back("fraction=" + fmt_num(fraction));
      kv.push_back("gain=" + fmt_num(gain));
      break;
    case AttackKind::echo:
      kv.push_back("delay_s=" + fmt_num(delay_s));
      kv.push_back("decay=" + fmt_num(decay));
      break;
    case AttackKind::time_stretch: kv.push_back("factor=" + fmt_num(factor)); break;
    case AttackKind::dither:
    case AttackKind::identity: break;
  }
  if (seed != 0) kv.push_back("seed=" + std::to_string(seed));
  if (!kv.empty()) {
    s += ":";
    for (std::size_t i = 0; i < kv.size(); ++i) s += (i ? "," : "") + kv[i];
  }
  return s;
}

std::string AttackSpec::label() const {
  switch (kind) {
    case AttackKind::gaussian_noise: return "GN " + fmt_num(snr_db) + " dB";
    case AttackKind::pink_noise: return "PN " + fmt_num(std);
    case AttackKind::lowpass: return "LP " + fmt_num(cutoff_hz / 1000.0) + "k";
    case AttackKind::bandpass:
      return "BP " + fmt_num(low_hz / 1000.0) + "-" + fmt_num(high_hz / 1000.0) + "k";
    case AttackKind::suppress_front: return "Suppress front";
    case AttackKind::suppress_behind: return "Suppress behind";
    case AttackKind::echo: return "Echo";
    case AttackKind::time_stretch: return "Stretch " + fmt_num(factor) + "x";
    case AttackKind::dither: return "Dither";
    case AttackKind::identity: return "None";
  }
  return "?";
}

namespace {

AttackKind kind_from_name(const std::string& n) {
  static const std::map<std::string, AttackKind> names = {
      {"gaussian_noise", AttackKind::gaussian_noise},
      {"gn", AttackKind::gaussian_noise},
      {"pink_noise", AttackKind::pink_noise},
      {"pn", AttackKind::pink_noise},
      {"lowpass", AttackKind::lowpass},
      {"lp", AttackKind::lowpass},
      {"bandpass", AttackKind::bandpass},
      {"bp", AttackKind::bandpass},
      {"suppress_front", AttackKind::suppress_front},
      {"sf", AttackKind::suppress_front},
      {"suppress_behind", AttackKind::suppress_behind},
      {"sb", AttackKind::suppress_behind},
      {"echo", AttackKind::echo},
      {"time_stretch", AttackKind::time_stretch},
      {"stretch", AttackKind::time_stretch},
      {"ts", AttackKind::time_stretch},
      {"dither", AttackKind::dither},
      {"identity", AttackKind::identity},
      {"id", AttackKind::identity},
  };
  auto it = names.find(n);
  if (it == names.end()) throw AttackValidationError("unknown attack kind: " + n);
  return it->second;
}

double parse_num(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing chars");
    return v;
  } catch (const std::exception&) {
    throw AttackValidationError("bad numeric value for " + what + ": '" + s + "'");
  }
}

}  // namespace

AttackSpec AttackSpec::parse(const std::string& text) {
  AttackSpec spec;
  std::string name = text, args;
  if (auto colon = text.find(':'); colon != std::string::npos) {
    name = text.substr(0, colon);
    args = text.substr(colon + 1);
  }
  spec.kind = kind_from_name(name);
  if (args.empty()) return spec;

  std::vector<std::string> parts;
  std::stringstream ss(args);
  std::string part;
  while (std::getline(ss, part, ',')) parts.push_back(part);

  for (const auto& p : parts) {
    auto eq = p.find('=');
    if (eq == std::string::npos) {
      // positional shorthand: gn:20, pn:0.5, lp:3000, bp:500-8000, sf:0.3,
      // echo:0.1, stretch:2
      switch (spec.kind) {
        case AttackKind::gaussian_noise: spec.snr_db = parse_num(p, "snr_db"); break;
        case AttackKind::pink_noise: spec.std = parse_num(p, "std"); break;
        case AttackKind::lowpass: spec.cutoff_hz = parse_num(p, "cutoff_hz"); break;
        case AttackKind::bandpass: {
          auto dash = p.find('-');
          if (dash == std::string::npos)
            throw AttackValidationError("bandpass shorthand is low-high: '" + p + "'");
          spec.low_hz = parse_num(p.substr(0, dash), "low_hz");
          spec.high_hz = parse_num(p.substr(dash + 1), "high_hz");
          break;
        }
        case AttackKind::suppress_front:
        case AttackKind::suppress_behind: spec.fraction = parse_num(p, "fraction"); break;
        case AttackKind::echo: spec.delay_s = parse_num(p, "delay_s"); break;
        case AttackKind::time_stretch: spec.factor = parse_num(p, "factor"); break;
        default:
          throw AttackValidationError(std::string("attack '") + attack_kind_name(spec.kind) +
                                      "' takes no positional value");
      }
      continue;
    }
    std::string key = p.substr(0, eq), val = p.substr(eq + 1);
    if (key == "snr_db") spec.snr_db = parse_num(val, key);
    else if (key == "std") spec.std = parse_num(val, key);
    else if (key == "cutoff_hz") spec.cutoff_hz = parse_num(val, key);
    else if (key == "low_hz") spec.low_hz = parse_num(val, key);
    else if (key == "high_hz") spec.high_hz = parse_num(val, key);
    else if (key == "fraction") spec.fraction = parse_num(val, key);
    else if (key == "gain") spec.gain = parse_num(val, key);
    else if (key == "delay_s") spec.delay_s = parse_num(val, key);
    else if (key == "decay") spec.decay = parse_num(val, key);
    else if (key == "factor") spec.factor = parse_num(val, key);
    else if (key == "seed") spec.seed = std::uint64_t(parse_num(val, key));
    else throw AttackValidationError("unknown attack parameter: " + key);
  }
  return spec;
}

std::string CompoundAttack::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < stages.size(); ++i)
    s += (i ? "|" : "") + stages[i].to_string();
  return s;
}

CompoundAttack CompoundAttack::parse(const std::string& text) {
  CompoundAttack c;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '|'))
    if (!part.empty()) c.stages.push_back(AttackSpec::parse(part));
  if (c.stages.empty()) throw AttackValidationError("empty compound attack");
  return c;
}

// Biquad cascade (Butterworth via RBJ sections) ---------------------------

namespace {

struct Biquad {
  double b0, b1, b2, a1, a2;  // a0 normalized to 1
};

// Q values of the three second-order sections of a 6th-order Butterworth.
constexpr double kButterQ6[3] = {0.5176380902050415, 0.7071067811865476,
                                 1.9318516525781366};

std::vector<Biquad> design_butter6(double fc, int rate, bool highpass) {
  const double w0 = 2.0 * M_PI * fc / rate;
  const double cw = std::cos(w0), sw = std::sin(w0);
  std::vector<Biquad> bq;
  for (double q : kButterQ6) {
    const double alpha = sw / (2.0 * q);
    const double a0 = 1.0 + alpha;
    Biquad b{};
    if (!highpass) {
      b.b0 = (1.0 - cw) / 2.0 / a0;
      b.b1 = (1.0 - cw) / a0;
      b.b2 = b.b0;
    } else {
      b.b0 = (1.0 + cw) / 2.0 / a0;
      b.b1 = -(1.0 + cw) / a0;
      b.b2 = b.b0;
    }
    b.a1 = (-2.0 * cw) / a0;
    b.a2 = (1.0 - alpha) / a0;
    bq.push_back(b);
  }
  return bq;
}

void biquad_cascade(const std::vector<Biquad>& bq, const double* in, double* out,
                    std::size_t n) {
  std::vector<double> tmp(in, in + n);
  for (const Biquad& b : bq) {
    double z1 = 0, z2 = 0;  // direct form II transposed
    for (std::size_t i = 0; i < n; ++i) {
      double x = tmp[i];
      double y = b.b0 * x + z1;
      z1 = b.b1 * x - b.a1 * y + z2;
      z2 = b.b2 * x - b.a2 * y;
      tmp[i] = y;
    }
  }
  std::copy(tmp.begin(), tmp.end(), out);
}

// Adjoint of a causal LTI filter: time-reverse, filter, time-reverse.
void biquad_cascade_adjoint(const std::vector<Biquad>& bq, const double* g,
                            double* out, std::size_t n) {
  std::vector<double> rev(n);
  for (std::size_t i = 0; i < n; ++i) rev[i] = g[n - 1 - i];
  biquad_cascade(bq, rev.data(), rev.data(), n);
  for (std::size_t i = 0; i < n; ++i) out[i] = rev[n - 1 - i];
}

std::vector<Biquad> filter_for(const AttackSpec& spec, int rate) {
  std::vector<Biquad> bq;
  if (spec.kind == AttackKind::lowpass) {
    bq = design_butter6(spec.cutoff_hz, rate, false);
  } else {
    bq = design_butter6(spec.low_hz, rate, true);
    auto lp = design_butter6(spec.high_hz, rate, false);
    bq.insert(bq.end(), lp.begin(), lp.end());
  }
  return bq;
}

double vec_rms(const double* x, std::size_t n) {
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return n ? std::sqrt(acc / double(n)) : 0.0;
}

double vec_peak(const double* x, std::size_t n) {
  double p = 0;
  for (std::size_t i = 0; i < n; ++i) p = std::max(p, std::fabs(x[i]));
  return p;
}

void suppression_mask(const AttackSpec& spec, std::size_t n, std::vector<double>& mask) {
  mask.assign(n, 1.0);
  std::size_t cut = std::size_t(std::llround(spec.fraction * double(n)));
  cut = std::min(cut, n);
  if (spec.kind == AttackKind::suppress_front)
    std::fill(mask.begin(), mask.begin() + cut, spec.gain);
  else
    std::fill(mask.end() - cut, mask.end(), spec.gain);
}

std::vector<double> quantize16_tpdf(const std::vector<double>& x, std::uint64_t seed) {
  Rng rng(mix64(seed, 0xD17E));
  std::vector<double> out(x.size());
  const double lsb = 1.0 / 32768.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = (rng.uniform() - rng.uniform()) * lsb;
    double v = std::clamp(x[i] + d, -1.0, 1.0);
    out[i] = std::round(v * 32767.0) / 32767.0;
  }
  return out;
}

}  // namespace

std::vector<double> pink_noise_unit(std::size_t n, int rate, std::uint64_t seed) {
  const std::size_t m = std::max<std::size_t>(next_pow2(n), 2048);
  FftPlan plan(m);
  Rng rng(mix64(seed, 0x9177));
  std::vector<std::complex<double>> spec(m, {0.0, 0.0});
  for (std::size_t k = 1; k <= m / 2; ++k) {
    const double f = double(k) * rate / double(m);
    const double amp = 1.0 / std::sqrt(std::max(f, 1.0));
    const double phase = 2.0 * M_PI * rng.uniform();
    std::complex<double> v = amp * std::complex<double>(std::cos(phase), std::sin(phase));
    spec[k] = v;
    if (k < m / 2) spec[m - k] = std::conj(v);
  }
  spec[m / 2] = {spec[m / 2].real(), 0.0};
  plan.inverse(spec.data());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = spec[i].real();
  double r = vec_rms(out.data(), n);
  if (r > 0)
    for (auto& v : out) v /= r;
  return out;
}

std::vector<double> time_stretch_roundtrip(const std::vector<double>& x, double factor) {
  if (x.empty()) return x;
  const int base = 10000;
  const int scaled = std::max(1, int(std::lround(double(base) * factor)));
  std::vector<double> stretched = resample(x, base, scaled);
  return resample(stretched, scaled, base);
}

double measure_snr_db(const std::vector<double>& clean, const std::vector<double>& noisy) {
  if (clean.size() != noisy.size()) throw std::invalid_argument("measure_snr: length");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    num += clean[i] * clean[i];
    double d = noisy[i] - clean[i];
    den += d * d;
  }
  if (den <= 0) return 1e9;
  return 10.0 * std::log10(num / den);
}

std::vector<double> apply_vec(const AttackSpec& spec, const std::vector<double>& x,
                              int rate) {
  spec.validate(rate);
  const std::size_t n = x.size();
  switch (spec.kind) {
    case AttackKind::identity:
      return x;
    case AttackKind::gaussian_noise: {
      Rng rng(mix64(spec.seed, 0x6A55));
      std::vector<double> noise(n);
      rng.fill_normal(noise);
      const double target = vec_rms(x.data(), n) * std::pow(10.0, -spec.snr_db / 20.0);
      const double r = vec_rms(noise.data(), n);
      const double s = r > 0 ? target / r : 0.0;  // exact-SNR scaling
      std::vector<double> out(n);
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + s * noise[i];
      return out;
    }
    case AttackKind::pink_noise: {
      std::vector<double> noise = pink_noise_unit(n, rate, spec.seed);
      std::vector<double> out(n);
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + spec.std * noise[i];
      return out;
    }
    case AttackKind::lowpass:
    case AttackKind::bandpass: {
      std::vector<double> out(n);
      biquad_cascade(filter_for(spec, rate), x.data(), out.data(), n);
      return out;
    }
    case AttackKind::suppress_front:
    case AttackKind::suppress_behind: {
      std::vector<double> mask;
      suppression_mask(spec, n, mask);
      std::vector<double> out(n);
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * mask[i];
      return out;
    }
    case AttackKind::echo: {
      const std::size_t k = std::size_t(std::llround(spec.delay_s * rate));
      std::vector<double> out(n);
      for (std::size_t i = 0; i < n; ++i)
        out[i] = x[i] + (i >= k ? spec.decay * x[i - k] : 0.0);
      const double pin = vec_peak(x.data(), n), praw = vec_peak(out.data(), n);
      const double s = (praw > 0 && pin > 0) ? pin / praw : 1.0;
      for (auto& v : out) v *= s;
      return out;
    }
    case AttackKind::time_stretch: {
      // duration scaled by `factor` via windowed-sinc interpolation (a
      // playback-speed change), then restored; see time_stretch_roundtrip
      std::vector<double> back = time_stretch_roundtrip(x, spec.factor);
      back.resize(n, 0.0);  // restore exact length
      return back;
    }
    case AttackKind::dither:
      return quantize16_tpdf(x, spec.seed);
  }
  throw std::logic_error("unreachable");
}

SpeechClip apply(const AttackSpec& attack, const SpeechClip& clip) {
  SpeechClip out;
  out.sample_rate = clip.sample_rate;
  out.samples = apply_vec(attack, clip.samples, clip.sample_rate);
  return out;
}

SpeechClip apply_compound(const CompoundAttack& c, const SpeechClip& clip) {
  c.validate(clip.sample_rate);
  SpeechClip cur = clip;
  for (const auto& s : c.stages) cur = apply(s, cur);
  return cur;
}

SpeechClip noise_layer_sample(Rng& rng, const std::vector<AttackSpec>& config,
                              const SpeechClip& clip) {
  if (config.empty()) throw AttackValidationError("noise layer: empty attack list");
  AttackSpec spec = config[rng.uniform_int(config.size())];
  spec.seed = rng.next_u64();
  return apply(spec, clip);
}

Node* noise_layer_op(Graph& g, Node* x, const std::vector<AttackSpec>& config,
                     Rng& rng, int rate, std::vector<int>* chosen_out) {
  if (config.empty()) throw AttackValidationError("noise layer: empty attack list");
  if (x->shape.c != 1) throw std::invalid_argument("noise_layer_op: expects (b,1,L)");
  const int B = x->shape.b, L = x->shape.l;

  struct RowPlan {
    AttackSpec spec;
    std::vector<Biquad> filt;  // lowpass/bandpass
    std::vector<double> addend;  // additive noise kinds
    std::vector<double> mask;    // suppression
    double echo_scale = 1.0;
    std::size_t echo_lag = 0;
  };
  auto plans = std::make_shared<std::vector<RowPlan>>(B);

  Node* out = g.make(x->shape, x->needs_grad);
  for (int b = 0; b < B; ++b) {
    RowPlan& rp = (*plans)[b];
    const std::size_t idx = rng.uniform_int(config.size());
    rp.spec = config[idx];
    rp.spec.seed = rng.next_u64();
    if (chosen_out) chosen_out->push_back(int(idx));
    const double* in = x->data + std::size_t(b) * L;
    double* o = out->data + std::size_t(b) * L;
    std::vector<double> xin(in, in + L);
    std::vector<double> y = apply_vec(rp.spec, xin, rate);
    std::copy(y.begin(), y.end(), o);
    // Cache what the backward pass needs.
    switch (rp.spec.kind) {
      case AttackKind::lowpass:
      case AttackKind::bandpass:
        rp.filt = filter_for(rp.spec, rate);
        break;
      case AttackKind::suppress_front:
      case AttackKind::suppress_behind:
        suppression_mask(rp.spec, std::size_t(L), rp.mask);
        break;
      case AttackKind::echo: {
        rp.echo_lag = std::size_t(std::llround(rp.spec.delay_s * rate));
        double praw = 0;
        std::vector<double> raw(L);
        for (int i = 0; i < L; ++i)
          raw[i] = in[i] + (std::size_t(i) >= rp.echo_lag
                                ? rp.spec.decay * in[i - rp.echo_lag]
                                : 0.0);
        praw = vec_peak(raw.data(), L);
        double pin = vec_peak(in, L);
        rp.echo_scale = (praw > 0 && pin > 0) ? pin / praw : 1.0;
        break;
      }
      default:
        break;  // additive / straight-through / identity
    }
  }

  if (out->needs_grad) {
    out->backprop = [out, x, B, L, plans](Graph&) {
      const Scalar* gy = out->grad();
      Scalar* gx = x->grad();
      std::vector<double> tmp(L);
      for (int b = 0; b < B; ++b) {
        const RowPlan& rp = (*plans)[b];
        const Scalar* go = gy + std::size_t(b) * L;
        Scalar* gi = gx + std::size_t(b) * L;
        switch (rp.spec.kind) {
          case AttackKind::lowpass:
          case AttackKind::bandpass:
            biquad_cascade_adjoint(rp.filt, go, tmp.data(), std::size_t(L));
            for (int i = 0; i < L; ++i) gi[i] += tmp[i];
            break;
          case AttackKind::suppress_front:
          case AttackKind::suppress_behind:
            for (int i = 0; i < L; ++i) gi[i] += go[i] * rp.mask[i];
            break;
          case AttackKind::echo: {
            const std::size_t k = rp.echo_lag;
            for (int i = 0; i < L; ++i) {
              double v = go[i];
              if (std::size_t(i) + k < std::size_t(L))
                v += rp.spec.decay * go[i + k];
              gi[i] += rp.echo_scale * v;
            }
            break;
          }
          default:
            // additive noise: exact identity; dither/stretch: straight-through
            for (int i = 0; i < L; ++i) gi[i] += go[i];
            break;
        }
      }
    };
  }
  return out;
}

}  // namespace diffmark
