// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/verify.hpp"

#include <openssl/hmac.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>

namespace diffmark {

namespace {

std::string iso_now() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string to_hex_bytes(const std::uint8_t* p, std::size_t n) {
  static const char* d = "0123456789abcdef";
  std::string s;
  s.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    s.push_back(d[p[i] >> 4]);
    s.push_back(d[p[i] & 15]);
  }
  return s;
}

int hex_val(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  throw VerifyError("bad hex digit");
}

// Little-endian base-2^32 unsigned big integer, just enough arithmetic
// for exact binomial tails at l <= 4096.
struct BigUint {
  std::vector<std::uint32_t> limbs;  // little endian

  static BigUint zero() { return {}; }
  static BigUint one() { return BigUint{{1}}; }
  static BigUint from_u64(std::uint64_t v) {
    BigUint b;
    while (v) {
      b.limbs.push_back(std::uint32_t(v));
      v >>= 32;
    }
    return b;
  }
  void trim() {
    while (!limbs.empty() && limbs.back() == 0) limbs.pop_back();
  }
  void add(const BigUint& o) {
    std::uint64_t carry = 0;
    const std::size_t n = std::max(limbs.size(), o.limbs.size());
    limbs.resize(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t s = carry + limbs[i] + (i < o.limbs.size() ? o.limbs[i] : 0);
      limbs[i] = std::uint32_t(s);
      carry = s >> 32;
    }
    if (carry) limbs.push_back(std::uint32_t(carry));
  }
  void mul_u32(std::uint32_t m) {
    std::uint64_t carry = 0;
    for (auto& limb : limbs) {
      std::uint64_t p = std::uint64_t(limb) * m + carry;
      limb = std::uint32_t(p);
      carry = p >> 32;
    }
    while (carry) {
      limbs.push_back(std::uint32_t(carry));
      carry >>= 32;
    }
    trim();
  }
  // Exact division by a small divisor (used for binomial coefficients).
  void div_u32(std::uint32_t d) {
    std::uint64_t rem = 0;
    for (std::size_t i = limbs.size(); i-- > 0;) {
      std::uint64_t cur = (rem << 32) | limbs[i];
      limbs[i] = std::uint32_t(cur / d);
      rem = cur % d;
    }
    trim();
  }
  void shl(int bits) {
    if (limbs.empty() || bits == 0) return;
    const int words = bits / 32, rest = bits % 32;
    limbs.insert(limbs.begin(), std::size_t(words), 0u);
    if (rest) {
      std::uint32_t carry = 0;
      for (std::size_t i = std::size_t(words); i < limbs.size(); ++i) {
        std::uint32_t nv = (limbs[i] << rest) | carry;
        carry = limbs[i] >> (32 - rest);
        limbs[i] = nv;
      }
      if (carry) limbs.push_back(carry);
    }
  }
  // -1 / 0 / +1 comparison
  int cmp(const BigUint& o) const {
    if (limbs.size() != o.limbs.size()) return limbs.size() < o.limbs.size() ? -1 : 1;
    for (std::size_t i = limbs.size(); i-- > 0;)
      if (limbs[i] != o.limbs[i]) return limbs[i] < o.limbs[i] ? -1 : 1;
    return 0;
  }
};

}  // namespace

VerifierKey VerifierKey::generate(Rng& rng) {
  VerifierKey k;
  for (auto& b : k.secret) b = std::uint8_t(rng.next_u64() & 0xff);
  return k;
}

VerifierKey VerifierKey::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw VerifyError("cannot open key file: " + path);
  std::string hex;
  f >> hex;
  VerifierKey k;
  if (hex.size() < 64) throw VerifyError("key file too short: " + path);
  for (int i = 0; i < 32; ++i)
    k.secret[i] = std::uint8_t((hex_val(hex[2 * i]) << 4) | hex_val(hex[2 * i + 1]));
  int tau;
  if (f >> tau) k.active_tau = tau;
  return k;
}

void VerifierKey::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw VerifyError("cannot write key file: " + path);
  f << to_hex_bytes(secret.data(), secret.size()) << "\n" << active_tau << "\n";
}

Registry Registry::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw VerifyError("cannot open registry: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw VerifyError("registry parse error: " + std::string(e.what()));
  }
  if (!j.contains("version") || j["version"].get<int>() != 1)
    throw VerifyError("unsupported registry version: " + path);
  Registry reg;
  for (const auto& u : j.at("users")) {
    UserRecord r;
    r.user_id = u.at("user_id").get<std::string>();
    r.tau = u.at("tau").get<int>();
    const int l = u.at("bits").get<int>();
    r.message = WatermarkMessage::from_hex(u.at("message_hex").get<std::string>(), l);
    r.created_at = u.at("created_at").get<std::string>();
    reg.users.push_back(std::move(r));
  }
  return reg;
}

void Registry::save(const std::string& path) const {
  nlohmann::json j;
  j["version"] = 1;
  j["users"] = nlohmann::json::array();
  for (const auto& r : users)
    j["users"].push_back({{"user_id", r.user_id},
                          {"tau", r.tau},
                          {"bits", r.message.length()},
                          {"message_hex", r.message.to_hex()},
                          {"created_at", r.created_at}});
  std::ofstream f(path);
  if (!f) throw VerifyError("cannot write registry: " + path);
  f << j.dump(2) << "\n";
}

const UserRecord* Registry::find(const std::string& user_id, int tau) const {
  for (const auto& r : users)
    if (r.user_id == user_id && r.tau == tau) return &r;
  return nullptr;
}

WatermarkMessage assign_message(const VerifierKey& key, const std::string& user_id,
                                int l, std::optional<int> tau_opt) {
  if (l < 1) throw VerifyError("assign_message: l >= 1 required");
  const int tau = tau_opt.value_or(key.active_tau);
  WatermarkMessage m;
  m.bits.reserve(l);
  std::uint32_t counter = 0;
  while (int(m.bits.size()) < l) {
    // HMAC_K(user_id || 0x00 || tau_le || counter_le), expanded in counter mode
    std::vector<std::uint8_t> msg(user_id.begin(), user_id.end());
    msg.push_back(0);
    for (int i = 0; i < 4; ++i) msg.push_back(std::uint8_t((std::uint32_t(tau) >> (8 * i)) & 0xff));
    for (int i = 0; i < 4; ++i) msg.push_back(std::uint8_t((counter >> (8 * i)) & 0xff));
    unsigned char out[32];
    unsigned int out_len = 32;
    HMAC(EVP_sha256(), key.secret.data(), int(key.secret.size()), msg.data(), msg.size(),
         out, &out_len);
    for (unsigned int i = 0; i < out_len && int(m.bits.size()) < l; ++i)
      for (int b = 7; b >= 0 && int(m.bits.size()) < l; --b)
        m.bits.push_back(std::uint8_t((out[i] >> b) & 1));
    ++counter;
  }
  return m;
}

namespace {

// Exact tail comparison for p = 1/2: sum_{k=th}^{l} C(l,k) <= fpr * 2^l.
// fpr is a double, i.e. mant * 2^exp exactly, so both sides are integers
// after shifting.
bool tail_leq_fpr_half(int l, int th, double fpr) {
  if (th > l) return true;  // empty tail = 0
  // sum of binomial coefficients C(l, th..l)
  BigUint coeff = BigUint::one();  // C(l, l)
  BigUint sum = BigUint::one();
  for (int k = l - 1; k >= th; --k) {
    // C(l,k) = C(l,k+1) * (k+1) / (l-k)
    coeff.mul_u32(std::uint32_t(k + 1));
    coeff.div_u32(std::uint32_t(l - k));
    sum.add(coeff);
  }
  int exp;
  double mant = std::frexp(fpr, &exp);  // fpr = mant * 2^exp, mant in [0.5, 1)
  std::int64_t imant = std::llround(std::ldexp(mant, 53));
  int e = exp - 53;  // fpr = imant * 2^e exactly
  BigUint rhs = BigUint::from_u64(std::uint64_t(imant));
  // compare sum <= imant * 2^{e + l}
  const int shift = e + l;
  if (shift >= 0) {
    rhs.shl(shift);
    return sum.cmp(rhs) <= 0;
  }
  BigUint lhs = sum;
  lhs.shl(-shift);
  return lhs.cmp(rhs) <= 0;
}

double log_tail(int l, int th, double p) {
  // log P(K >= th) via stable logsumexp over log C(l,k) p^k q^(l-k)
  if (th > l) return -std::numeric_limits<double>::infinity();
  const double lp = std::log(p), lq = std::log1p(-p);
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  for (int k = th; k <= l; ++k) {
    double t = std::lgamma(l + 1.0) - std::lgamma(k + 1.0) - std::lgamma(l - k + 1.0) +
               k * lp + (l - k) * lq;
    terms.push_back(t);
    mx = std::max(mx, t);
  }
  double acc = 0;
  for (double t : terms) acc += std::exp(t - mx);
  return mx + std::log(acc);
}

}  // namespace

int binomial_threshold(int l, double fpr, double p, bool* saturated) {
  if (l < 1) throw VerifyError("binomial_threshold: l >= 1 required");
  if (!(fpr > 0.0) || fpr > 1.0) throw VerifyError("binomial_threshold: fpr in (0, 1] required");
  if (!(p > 0.0) || !(p < 1.0)) throw VerifyError("binomial_threshold: p in (0, 1) required");
  if (saturated) *saturated = false;
  auto tail_ok = [&](int th) {
    if (p == 0.5) return tail_leq_fpr_half(l, th, fpr);
    return log_tail(l, th, p) <= std::log(fpr);
  };
  // P(K >= 0) = 1, so fpr = 1 accepts th = 0; otherwise scan up.
  for (int th = 0; th <= l; ++th)
    if (tail_ok(th)) return th;
  // Even k = l fails the bound: flag and accept only exact matches.
  if (!saturated)
    throw VerifyError("binomial_threshold: fpr unattainable even at k = l for l = " +
                      std::to_string(l));
  *saturated = true;
  return l;
}

VerificationReport verify(const DecodedMessage& decoded, const WatermarkMessage& expected,
                          double fpr) {
  if (decoded.length() != expected.length())
    throw VerifyError("verify: payload length mismatch");
  const int l = expected.length();
  VerificationReport rep;
  rep.payload_len = l;
  rep.fpr_target = fpr;
  rep.threshold = binomial_threshold(l, fpr, 0.5, &rep.threshold_saturated);
  int k = 0;
  for (int i = 0; i < l; ++i)
    if (decoded.hard_bits[i] == expected.bits[i]) ++k;
  rep.matched_bits = k;
  rep.bit_accuracy = double(k) / double(l);
  rep.watermarked = !rep.threshold_saturated ? (k >= rep.threshold) : (k == l);
  return rep;
}

VerificationReport attribute(const DecodedMessage& decoded, const Registry& registry,
                             double fpr) {
  if (registry.users.empty()) {
    VerificationReport rep;
    rep.payload_len = decoded.length();
    rep.fpr_target = fpr;
    rep.threshold = binomial_threshold(decoded.length(), fpr, 0.5,
                                       &rep.threshold_saturated);
    rep.watermarked = false;
    return rep;
  }
  VerificationReport top;        // highest-k report, passing or not
  const UserRecord* winner = nullptr;  // passing user with max k (earliest on ties)
  int winner_k = -1;
  bool tie = false;
  bool first = true;
  for (const auto& user : registry.users) {
    VerificationReport rep = verify(decoded, user.message, fpr);
    if (first || rep.matched_bits > top.matched_bits) top = rep;
    first = false;
    if (!rep.watermarked) continue;
    if (rep.matched_bits > winner_k) {
      winner = &user;
      winner_k = rep.matched_bits;
      tie = false;
    } else if (rep.matched_bits == winner_k) {
      tie = true;
      if (user.created_at < winner->created_at) winner = &user;
    }
  }
  if (winner) {
    VerificationReport rep = verify(decoded, winner->message, fpr);
    rep.attributed_user = winner->user_id;
    rep.tie = tie;
    return rep;
  }
  top.watermarked = false;
  top.attributed_user.reset();
  return top;
}

WatermarkMessage repetition_encode(const std::vector<std::uint8_t>& payload, int r, int l) {
  if (r < 1 || r % 2 == 0) throw VerifyError("repetition_encode: r must be odd");
  if (int(payload.size()) * r > l)
    throw VerifyError("repetition_encode: payload exceeds capacity");
  WatermarkMessage m;
  m.bits.assign(l, 0);
  const int n = int(payload.size());
  // interleaved: copy j of bit i lands at j*n + i
  for (int j = 0; j < r; ++j)
    for (int i = 0; i < n; ++i) m.bits[std::size_t(j) * n + i] = payload[i] & 1;
  return m;
}

std::vector<std::uint8_t> repetition_decode(const DecodedMessage& message, int r,
                                            int payload_bits) {
  if (r < 1 || r % 2 == 0) throw VerifyError("repetition_decode: r must be odd");
  if (payload_bits * r > message.length())
    throw VerifyError("repetition_decode: payload exceeds message length");
  std::vector<std::uint8_t> out(payload_bits, 0);
  for (int i = 0; i < payload_bits; ++i) {
    int votes = 0;
    for (int j = 0; j < r; ++j)
      votes += message.hard_bits[std::size_t(j) * payload_bits + i] ? 1 : -1;
    out[i] = votes > 0 ? 1 : 0;
  }
  return out;
}

double empirical_fpr(int l, double fpr, int trials, std::uint64_t seed) {
  Rng rng(seed);
  WatermarkMessage expected = WatermarkMessage::random(l, rng);
  int hits = 0;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> probs(l);
    for (auto& p : probs) p = rng.uniform() < 0.5 ? 0.25 : 0.75;
    VerificationReport rep = verify(threshold_probs(probs), expected, fpr);
    if (rep.watermarked) ++hits;
  }
  return double(hits) / double(trials);
}

nlohmann::json VerificationReport::to_json() const {
  nlohmann::json j = {{"matched_bits", matched_bits},
                      {"payload_len", payload_len},
                      {"threshold", threshold},
                      {"fpr_target", fpr_target},
                      {"decision", watermarked ? "watermarked" : "not_watermarked"},
                      {"bit_accuracy", bit_accuracy},
                      {"tie", tie},
                      {"threshold_saturated", threshold_saturated}};
  if (attributed_user) j["attributed_user"] = *attributed_user;
  return j;
}

}  // namespace diffmark
