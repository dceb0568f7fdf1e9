// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffmark/codec.hpp"

namespace diffmark {

struct VerifyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Server-side secret used to derive per-user messages. The secret never
// appears in reports or the registry.
struct VerifierKey {
  std::array<std::uint8_t, 32> secret{};
  int active_tau = 0;
  int retained_tau_window = 4;

  static VerifierKey generate(Rng& rng);
  static VerifierKey load(const std::string& path);
  void save(const std::string& path) const;
};

struct UserRecord {
  std::string user_id;
  int tau = 0;
  WatermarkMessage message;
  std::string created_at;  // ISO-8601 UTC
};

class Registry {
 public:
  std::vector<UserRecord> users;

  static Registry load(const std::string& path);
  void save(const std::string& path) const;
  const UserRecord* find(const std::string& user_id, int tau) const;
};

struct VerificationReport {
  int matched_bits = 0;
  int payload_len = 0;
  int threshold = 0;
  double fpr_target = 0;
  bool watermarked = false;
  std::optional<std::string> attributed_user;
  double bit_accuracy = 0;
  bool tie = false;
  bool threshold_saturated = false;  // th clipped at l, see binomial_threshold

  nlohmann::json to_json() const;
};

// Deterministic keyed-hash expansion of (user_id, tau) to l bits
// (HMAC-SHA256 in counter mode).
WatermarkMessage assign_message(const VerifierKey& key, const std::string& user_id,
                                int l, std::optional<int> tau = {});

// Smallest th with P(K >= th | Bin(l, p)) <= fpr. For p = 0.5 the tail is
// evaluated with exact integer arithmetic (the comparison against the
// binary-rational fpr is exact); other p fall back to log-space sums.
// When even k = l cannot meet fpr the result is l with `saturated` set;
// an fpr no value of k can satisfy raises VerifyError.
int binomial_threshold(int l, double fpr, double p = 0.5, bool* saturated = nullptr);

VerificationReport verify(const DecodedMessage& decoded, const WatermarkMessage& expected,
                          double fpr);

// Verifies against every registered message; attributes to the passing
// user with maximal k (earliest created_at on ties, flagged).
VerificationReport attribute(const DecodedMessage& decoded, const Registry& registry,
                             double fpr);

// Repetition code over the payload, interleaved across the message so a
// burst of flips lands in different groups.
WatermarkMessage repetition_encode(const std::vector<std::uint8_t>& payload, int r, int l);
std::vector<std::uint8_t> repetition_decode(const DecodedMessage& message, int r,
                                            int payload_bits);

// Documented constant from the verification literature: test-case count
// for FPR 0.5% at 95% confidence. Displayed, not re-derived.
constexpr int kReferenceSampleSize768 = 768;

// Monte-Carlo FPR estimate under H0 (random decoded bits vs fixed message).
double empirical_fpr(int l, double fpr, int trials, std::uint64_t seed);

}  // namespace diffmark
