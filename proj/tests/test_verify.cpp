// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <gmp.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "diffmark/verify.hpp"

using namespace diffmark;

namespace {

// Independent exact big-integer tail oracle built on GMP: smallest th with
// sum_{k=th}^{l} C(l,k) <= fpr * 2^l (fpr taken exactly as mant * 2^exp).
int threshold_oracle_gmp(int l, double fpr) {
  int e;
  const double mant = std::frexp(fpr, &e);
  const long imant = std::llround(std::ldexp(mant, 53));
  const int shift = e - 53 + l;

  mpz_t rhs, sum, coeff;
  mpz_inits(rhs, sum, coeff, nullptr);
  mpz_set_si(rhs, imant);
  if (shift >= 0)
    mpz_mul_2exp(rhs, rhs, static_cast<mp_bitcnt_t>(shift));

  int result = -1;
  for (int th = 0; th <= l && result < 0; ++th) {
    mpz_set_ui(sum, 0);
    for (int k = th; k <= l; ++k) {
      mpz_bin_uiui(coeff, static_cast<unsigned long>(l), static_cast<unsigned long>(k));
      mpz_add(sum, sum, coeff);
    }
    if (shift >= 0) {
      if (mpz_cmp(sum, rhs) <= 0) result = th;
    } else {
      mpz_t lhs;
      mpz_init(lhs);
      mpz_mul_2exp(lhs, sum, static_cast<mp_bitcnt_t>(-shift));
      mpz_t rhs2;
      mpz_init_set_si(rhs2, imant);
      if (mpz_cmp(lhs, rhs2) <= 0) result = th;
      mpz_clears(lhs, rhs2, nullptr);
    }
  }
  mpz_clears(rhs, sum, coeff, nullptr);
  return result;  // -1 when even k = l misses the bound
}

VerifierKey test_key() {
  Rng rng(1234);
  return VerifierKey::generate(rng);
}

std::filesystem::path tmp_dir() {
  auto p = std::filesystem::temp_directory_path() / "diffmark_verify_tests";
  std::filesystem::create_directories(p);
  return p;
}

DecodedMessage decoded_from_bits(const std::vector<std::uint8_t>& bits) {
  std::vector<double> probs(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) probs[i] = bits[i] ? 0.9 : 0.1;
  return threshold_probs(probs);
}

}  // namespace

TEST_CASE("binomial_threshold matches the exact GMP oracle on the full grid") {
  const auto t0 = std::chrono::steady_clock::now();
  for (int l : {8, 16, 32, 64, 100, 128}) {
    for (double fpr : {0.5, 0.05, 5e-3, 1e-4, 1e-6}) {
      const int oracle = threshold_oracle_gmp(l, fpr);
      bool saturated = false;
      const int got = binomial_threshold(l, fpr, 0.5, &saturated);
      INFO("l=", l, " fpr=", fpr);
      if (oracle >= 0) {
        CHECK_FALSE(saturated);
        CHECK(got == oracle);  // zero tolerance
      } else {
        CHECK(saturated);
        CHECK(got == l);
      }
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 1.0);  // exactness must stay cheap
}

TEST_CASE("binomial_threshold boundary cases") {
  CHECK(binomial_threshold(16, 1.0) == 0);           // always-accept bound
  CHECK(binomial_threshold(1, 0.5) == 1);            // P(K>=1) = 0.5
  CHECK(binomial_threshold(1, 0.49999) == 1);        // just under still needs k=1...
  // ...but P(K>=1)=0.5 > 0.49999, so k=1 fails the bound: saturated
  {
    bool sat = false;
    CHECK(binomial_threshold(1, 0.49999, 0.5, &sat) == 1);
    CHECK(sat);
  }
  CHECK_THROWS_AS(binomial_threshold(16, 1e-6), VerifyError);  // 2^-16 > 1e-6
  CHECK_THROWS_AS(binomial_threshold(0, 0.5), VerifyError);
  CHECK_THROWS_AS(binomial_threshold(16, 0.0), VerifyError);
  CHECK_THROWS_AS(binomial_threshold(16, 0.5, 1.0), VerifyError);

  // decreasing fpr never lowers the threshold
  int prev = -1;
  for (double fpr : {0.5, 0.05, 5e-3, 1e-4, 1e-6, 1e-9}) {
    const int th = binomial_threshold(100, fpr);
    CHECK(th >= prev);
    prev = th;
  }

  // non-half p falls back to the log-space tail and stays sane
  const int th_low_p = binomial_threshold(100, 1e-4, 0.25);
  const int th_half = binomial_threshold(100, 1e-4, 0.5);
  CHECK(th_low_p < th_half);
}

TEST_CASE("assign_message is a deterministic keyed PRF with avalanche") {
  VerifierKey key = test_key();
  WatermarkMessage a1 = assign_message(key, "alice", 100);
  WatermarkMessage a2 = assign_message(key, "alice", 100);
  CHECK(a1 == a2);

  // different user: Hamming distance within the binomial 3-sigma band
  WatermarkMessage b = assign_message(key, "bob", 100);
  int d = 0;
  for (int i = 0; i < 100; ++i) d += a1.bits[i] != b.bits[i];
  CHECK(d >= 30);
  CHECK(d <= 70);

  // tau bump changes the message (domain separation)
  WatermarkMessage a_tau = assign_message(key, "alice", 100, 1);
  CHECK_FALSE(a_tau == a1);

  // different key changes the message
  Rng rng(777);
  VerifierKey other = VerifierKey::generate(rng);
  CHECK_FALSE(assign_message(other, "alice", 100) == a1);

  // avalanche: one flipped user-id bit moves ~l/2 bits on average
  const int l = 64, users = 1000;
  double mean_d = 0;
  for (int u = 0; u < users; ++u) {
    std::string id = "user" + std::to_string(u);
    WatermarkMessage m1 = assign_message(key, id, l);
    std::string id2 = id;
    id2[0] ^= 1;  // 'u' -> 't'
    WatermarkMessage m2 = assign_message(key, id2, l);
    int dd = 0;
    for (int i = 0; i < l; ++i) dd += m1.bits[i] != m2.bits[i];
    mean_d += dd;
  }
  mean_d /= users;
  const double sigma = std::sqrt(l * 0.25 / users);
  CHECK(std::fabs(mean_d - l / 2.0) <= 3.0 * sigma);
}

TEST_CASE("verify: exact match, complement, Monte-Carlo FPR") {
  Rng rng(31);
  WatermarkMessage msg = WatermarkMessage::random(64, rng);
  DecodedMessage same = decoded_from_bits(msg.bits);
  for (double fpr : {0.5, 1e-3, 1e-6}) {
    VerificationReport rep = verify(same, msg, fpr);
    CHECK(rep.matched_bits == 64);
    CHECK(rep.watermarked);
    CHECK(rep.bit_accuracy == 1.0);
  }
  std::vector<std::uint8_t> comp(64);
  for (int i = 0; i < 64; ++i) comp[i] = 1 - msg.bits[i];
  VerificationReport rep = verify(decoded_from_bits(comp), msg, 1e-3);
  CHECK(rep.matched_bits == 0);
  CHECK_FALSE(rep.watermarked);

  WatermarkMessage short_msg = WatermarkMessage::random(32, rng);
  CHECK_THROWS_AS(verify(same, short_msg, 0.5), VerifyError);

  // empirical false-positive rate at l=100, fpr=1e-3 stays below 2e-3
  CHECK(empirical_fpr(100, 1e-3, 10000, 42) <= 2e-3);
}

TEST_CASE("attribute: self-match, random queries, ties, empty registry") {
  VerifierKey key = test_key();
  Registry reg;
  for (int u = 0; u < 100; ++u) {
    UserRecord r;
    r.user_id = "user" + std::to_string(u);
    r.tau = 0;
    r.message = assign_message(key, r.user_id, 64);
    r.created_at = "2026-01-01T00:00:0" + std::to_string(u % 10) + "Z";
    reg.users.push_back(std::move(r));
  }

  // clean decoded message of user 42 attributes to user 42
  DecodedMessage q = decoded_from_bits(reg.users[42].message.bits);
  VerificationReport rep = attribute(q, reg, 1e-4);
  REQUIRE(rep.attributed_user.has_value());
  CHECK(*rep.attributed_user == "user42");
  CHECK(rep.watermarked);

  // random bits: no attribution at small fpr (union-bound Monte Carlo)
  Rng rng(7);
  int false_hits = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    WatermarkMessage r = WatermarkMessage::random(64, rng);
    VerificationReport rr = attribute(decoded_from_bits(r.bits), reg, 1e-6);
    if (rr.attributed_user) ++false_hits;
  }
  CHECK(false_hits <= 2);  // expected ~0.1

  // single-user registry, exact match
  Registry single;
  single.users.push_back(reg.users[3]);
  VerificationReport srep =
      attribute(decoded_from_bits(reg.users[3].message.bits), single, 1e-4);
  REQUIRE(srep.attributed_user.has_value());
  CHECK(*srep.attributed_user == "user3");

  // empty registry: not watermarked, no attribution
  Registry empty;
  VerificationReport erep = attribute(q, empty, 1e-4);
  CHECK_FALSE(erep.watermarked);
  CHECK_FALSE(erep.attributed_user.has_value());

  // tie: duplicate message under two ids, earlier created_at wins
  Registry dup;
  UserRecord r1 = reg.users[10];
  UserRecord r2 = reg.users[10];
  r1.user_id = "late";
  r1.created_at = "2026-06-01T00:00:00Z";
  r2.user_id = "early";
  r2.created_at = "2025-06-01T00:00:00Z";
  dup.users = {r1, r2};
  VerificationReport trep =
      attribute(decoded_from_bits(reg.users[10].message.bits), dup, 1e-4);
  REQUIRE(trep.attributed_user.has_value());
  CHECK(*trep.attributed_user == "early");
  CHECK(trep.tie);
}

TEST_CASE("repetition code: identity, burst recovery, channel-error oracle") {
  // r = 1 is the identity embedding
  std::vector<std::uint8_t> payload = {1, 0, 1, 1, 0, 0, 1, 0, 1, 1};
  WatermarkMessage m1 = repetition_encode(payload, 1, 10);
  CHECK(std::vector<std::uint8_t>(m1.bits.begin(), m1.bits.end()) == payload);
  CHECK(repetition_decode(decoded_from_bits(m1.bits), 1, 10) == payload);

  // r = 5, l = 50: any 2 flips per group recover exactly
  WatermarkMessage m5 = repetition_encode(payload, 5, 50);
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint8_t> bits = m5.bits;
    for (int i = 0; i < 10; ++i) {  // flip 2 of the 5 copies of each payload bit
      std::size_t a = rng.uniform_int(5), b;
      do {
        b = rng.uniform_int(5);
      } while (b == a);
      bits[a * 10 + i] ^= 1;
      bits[b * 10 + i] ^= 1;
    }
    CHECK(repetition_decode(decoded_from_bits(bits), 5, 10) == payload);
  }

  CHECK_THROWS_AS(repetition_encode(payload, 2, 50), VerifyError);   // even r
  CHECK_THROWS_AS(repetition_encode(payload, 7, 50), VerifyError);   // capacity
  CHECK_THROWS_AS(repetition_decode(decoded_from_bits(m5.bits), 7, 10), VerifyError);

  // binomial channel: exact tail oracle for p=0.2, r=9
  double exact_tail = 0;
  for (int j = 5; j <= 9; ++j) {
    double c = 1;
    for (int i = 0; i < j; ++i) c = c * (9 - i) / (i + 1);
    exact_tail += c * std::pow(0.2, j) * std::pow(0.8, 9 - j);
  }
  const int trials = 10000;
  Rng crng(13);
  long errors = 0;
  for (int t = 0; t < trials; ++t) {
    std::vector<std::uint8_t> bits = repetition_encode(payload, 9, 100).bits;
    for (auto& b : bits)
      if (crng.uniform() < 0.2) b ^= 1;
    std::vector<std::uint8_t> dec = repetition_decode(decoded_from_bits(bits), 9, 10);
    for (int i = 0; i < 10; ++i) errors += dec[i] != payload[i];
  }
  const double rate = double(errors) / double(trials * 10);
  CHECK(rate < 0.025);
  // and the empirical rate agrees with the exact per-bit tail
  const double sigma = std::sqrt(exact_tail * (1 - exact_tail) / (trials * 10));
  CHECK(std::fabs(rate - exact_tail) < 5 * sigma + 1e-4);
}

TEST_CASE("registry and key files round trip; secret never leaks") {
  VerifierKey key = test_key();
  const std::string key_path = (tmp_dir() / "key.txt").string();
  key.save(key_path);
  VerifierKey back = VerifierKey::load(key_path);
  CHECK(back.secret == key.secret);

  Registry reg;
  for (int u = 0; u < 10; ++u) {
    UserRecord r;
    r.user_id = "u" + std::to_string(u);
    r.tau = 0;
    r.message = assign_message(key, r.user_id, 32);
    r.created_at = "2026-02-02T00:00:00Z";
    reg.users.push_back(std::move(r));
  }
  const std::string reg_path = (tmp_dir() / "registry.json").string();
  reg.save(reg_path);
  Registry rback = Registry::load(reg_path);
  REQUIRE(rback.users.size() == 10);
  CHECK(rback.users[3].message == reg.users[3].message);
  CHECK(rback.find("u3", 0) != nullptr);
  CHECK(rback.find("u3", 1) == nullptr);

  // secret hygiene: neither raw secret bytes nor their hex encoding appear
  std::ifstream f(reg_path, std::ios::binary);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::string secret_raw(key.secret.begin(), key.secret.end());
  CHECK(blob.find(secret_raw) == std::string::npos);
  static const char* hexd = "0123456789abcdef";
  std::string secret_hex;
  for (auto b : key.secret) {
    secret_hex.push_back(hexd[b >> 4]);
    secret_hex.push_back(hexd[b & 15]);
  }
  CHECK(blob.find(secret_hex) == std::string::npos);

  VerificationReport rep = verify(decoded_from_bits(reg.users[0].message.bits),
                                  reg.users[0].message, 1e-3);
  const std::string rep_json = rep.to_json().dump();
  CHECK(rep_json.find(secret_hex) == std::string::npos);

  CHECK_THROWS_AS(Registry::load((tmp_dir() / "none.json").string()), VerifyError);
}

TEST_CASE("documented reference sample size is displayed, not derived") {
  CHECK(kReferenceSampleSize768 == 768);
}
