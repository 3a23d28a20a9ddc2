#pragma once

// Gaussian noise with power spectral density proportional to f^-beta.

#include "cmpc/common.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <complex>
#include <random>
#include <vector>

namespace cmpc {

// One stationary Gaussian sequence of length h with zero mean and unit
// marginal variance. The zero-frequency bin gets the scale of the lowest
// nonzero frequency.
inline Vec colored_sequence(double beta, int h, std::mt19937_64& rng) {
  require(h >= 2, "colored_noise: horizon must be at least 2");
  require(beta >= 0.0, "colored_noise: beta must be non-negative");
  std::normal_distribution<double> normal(0.0, 1.0);
  const int bins = h / 2 + 1;
  std::vector<std::complex<double>> spectrum(bins, {0.0, 0.0});
  double variance = 0.0;
  for (int k = 0; k < bins; ++k) {
    const double scale = std::pow(static_cast<double>(std::max(k, 1)) / h, -beta / 2.0);
    const bool real_bin = k == 0 || (h % 2 == 0 && k == bins - 1);
    const double re = normal(rng);
    const double im = real_bin ? 0.0 : normal(rng);
    spectrum[k] = {re * scale, im * scale};
    variance += (real_bin ? 1.0 : 4.0) * scale * scale;
  }
  variance /= static_cast<double>(h) * h;
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> out;
  fft.inv(out, spectrum, h);
  return Eigen::Map<Vec>(out.data(), h) / std::sqrt(variance);
}

// `count` samples of shape d x h; each row is an independent sequence.
inline std::vector<Mat> colored_noise(double beta, int d, int h, int count, std::mt19937_64& rng) {
  require(h >= 2, "colored_noise: horizon must be at least 2");
  std::vector<Mat> samples(count, Mat(d, h));
  for (auto& s : samples) {
    for (int i = 0; i < d; ++i) s.row(i) = colored_sequence(beta, h, rng).transpose();
  }
  return samples;
}

}  // namespace cmpc
