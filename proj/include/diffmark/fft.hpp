// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace diffmark {

// Iterative radix-2 complex FFT. Size must be a power of two.
// Twiddle tables are cached per plan so repeated transforms of the
// same size (STFT frames, noise synthesis) cost no setup.
class FftPlan {
 public:
  explicit FftPlan(std::size_t n);

  std::size_t size() const { return n_; }

  // In-place transforms on interleaved complex data.
  void forward(std::complex<double>* data) const;
  void inverse(std::complex<double>* data) const;  // includes 1/n scaling

  void forward(std::vector<std::complex<double>>& data) const;
  void inverse(std::vector<std::complex<double>>& data) const;

 private:
  void transform(std::complex<double>* data, bool inv) const;

  std::size_t n_;
  std::size_t log2n_;
  std::vector<std::size_t> rev_;
  std::vector<std::complex<double>> tw_fwd_;
  std::vector<std::complex<double>> tw_inv_;
};

// Smallest power of two >= n.
std::size_t next_pow2(std::size_t n);

}  // namespace diffmark
