// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/fft.hpp"

#include <cmath>
#include <stdexcept>

namespace diffmark {

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

FftPlan::FftPlan(std::size_t n) : n_(n) {
  if (n == 0 || (n & (n - 1)) != 0)
    throw std::invalid_argument("FftPlan: size must be a power of two");
  log2n_ = 0;
  while ((std::size_t(1) << log2n_) < n) ++log2n_;

  rev_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < log2n_; ++b)
      if (i & (std::size_t(1) << b)) r |= std::size_t(1) << (log2n_ - 1 - b);
    rev_[i] = r;
  }
  tw_fwd_.resize(n / 2);
  tw_inv_.resize(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    double ang = -2.0 * M_PI * double(k) / double(n);
    tw_fwd_[k] = {std::cos(ang), std::sin(ang)};
    tw_inv_[k] = {std::cos(ang), -std::sin(ang)};
  }
}

void FftPlan::transform(std::complex<double>* a, bool inv) const {
  const auto& tw = inv ? tw_inv_ : tw_fwd_;
  for (std::size_t i = 0; i < n_; ++i) {
    std::size_t j = rev_[i];
    if (j > i) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n_; len <<= 1) {
    std::size_t half = len >> 1;
    std::size_t step = n_ / len;
    for (std::size_t i = 0; i < n_; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + half] * tw[k * step];
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

void FftPlan::forward(std::complex<double>* data) const { transform(data, false); }

void FftPlan::inverse(std::complex<double>* data) const {
  transform(data, true);
  double s = 1.0 / double(n_);
  for (std::size_t i = 0; i < n_; ++i) data[i] *= s;
}

void FftPlan::forward(std::vector<std::complex<double>>& d) const {
  if (d.size() != n_) throw std::invalid_argument("FftPlan: size mismatch");
  forward(d.data());
}

void FftPlan::inverse(std::vector<std::complex<double>>& d) const {
  if (d.size() != n_) throw std::invalid_argument("FftPlan: size mismatch");
  inverse(d.data());
}

}  // namespace diffmark
